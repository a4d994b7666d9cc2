use ndarray::{Array2, ArrayView2};

use concept_sliders::diffusion::{denoise_loss, denoise_loss_grad, draw_noise, NoisePredictor};
use concept_sliders::model::{DenoiserConfig, DenoiserModel, GradRequest};
use concept_sliders::schedule::{NoiseSchedule, ScheduleConfig};
use concept_sliders::vocab::Phrase;

/// Predicts `k · x_t`, whatever the timestep or condition.
struct Scaled(f64);

impl NoisePredictor<f64> for Scaled {
    fn predict_noise(&self, x: ArrayView2<f64>, _: &[usize], _: &[Phrase]) -> Array2<f64> {
        x.mapv(|v| self.0 * v)
    }
}

/// ᾱ for the linear schedule, accumulated independently of the library.
fn alpha_bar(t: usize, timesteps: usize, lo: f64, hi: f64) -> f64 {
    (1..=t)
        .map(|s| 1.0 - (lo + (hi - lo) * (s - 1) as f64 / (timesteps - 1) as f64))
        .product()
}

#[test]
fn loss_matches_hand_computation() {
    let sched = NoiseSchedule::new(ScheduleConfig::linear_scaled(100)).unwrap();
    let x0 = Array2::from_shape_fn((5, 12), |(i, j)| ((i * 12 + j) as f64 * 0.61).cos());
    let conds = vec![Phrase::null(); 5];
    for k in [0.0, 0.5, 1.0] {
        let loss = denoise_loss(&Scaled(k), x0.view(), &conds, &sched, 0.0, 77).unwrap();
        let draw = draw_noise::<f64>(5, 12, &sched, 0.0, 77);
        let mut want = 0.0;
        for i in 0..5 {
            let ab = alpha_bar(draw.timesteps[i], 100, 1e-3, 0.2);
            for j in 0..12 {
                let e = draw.eps[[i, j]];
                let xt = ab.sqrt() * x0[[i, j]] + (1.0 - ab).sqrt() * e;
                want += (e - k * xt).powi(2);
            }
        }
        want /= 5.0;
        assert!((loss - want).abs() <= 1e-10 * want.max(1.0), "k={k}: {loss} vs {want}");
    }
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let mut m = DenoiserModel::<f32>::new(DenoiserConfig::tiny(), 3).unwrap().cast::<f64>();
    for (i, p) in m.params_mut().values_mut().enumerate() {
        let mut j = 0.0;
        p.mapv_inplace(|v| {
            j += 1.0;
            v + 0.1 * (0.9 * j + i as f64).sin()
        });
    }
    let sched = m.schedule().clone();
    let px = m.config().pixels();
    let x0 = Array2::from_shape_fn((3, px), |(i, j)| ((i * px + j) as f64 * 0.37).sin());
    let conds = vec![Phrase::new(vec![2, 5]), Phrase::null(), Phrase::new(vec![7])];
    let ids = ["cond.proj", "out.conv"];
    let (_, grads) = denoise_loss_grad(&m, x0.view(), &conds, &sched, 0.3, 5, &GradRequest::only(ids)).unwrap();
    let h = 1e-6;
    for id in ids {
        let g = grads.get(id).unwrap();
        let (r, c) = g.dim();
        for idx in [(0, 0), (r / 2, c / 2), (r - 1, c - 1)] {
            let eval = |d: f64| {
                let mut p = m.clone();
                p.params_mut().get_mut(id).unwrap()[idx] += d;
                denoise_loss(&p, x0.view(), &conds, &sched, 0.3, 5).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((numeric - g[idx]).abs() <= 1e-5 * (1.0 + numeric.abs()), "{id}{idx:?}: {numeric} vs {}", g[idx]);
        }
    }
}
