//! Denoising objective and base-model training.

use ndarray::{Array2, ArrayView2, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::ImageSample;
use crate::model::{DenoiserModel, GradRequest, Gradients, WeightSource};
use crate::optim::{cosine_lr, Adam};
use crate::real::Real;
use crate::schedule::{forward_noise_array, NoiseSchedule};
use crate::vocab::Phrase;

/// Anything that predicts the noise in a batch of noised images.
pub trait NoisePredictor<F: Real>: Sync {
    fn predict_noise(&self, x: ArrayView2<F>, timesteps: &[usize], conds: &[Phrase]) -> Array2<F>;
}

impl<F: Real> NoisePredictor<F> for DenoiserModel<F> {
    fn predict_noise(&self, x: ArrayView2<F>, timesteps: &[usize], conds: &[Phrase]) -> Array2<F> {
        self.predict(self, x, timesteps, conds)
    }
}

/// A model evaluated with substitute weights.
pub struct Reweighted<'a, F: Real> {
    pub model: &'a DenoiserModel<F>,
    pub weights: &'a dyn WeightSource<F>,
}

impl<F: Real> NoisePredictor<F> for Reweighted<'_, F> {
    fn predict_noise(&self, x: ArrayView2<F>, timesteps: &[usize], conds: &[Phrase]) -> Array2<F> {
        self.model.predict(self.weights, x, timesteps, conds)
    }
}

/// The random part of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<F> {
    pub timesteps: Vec<usize>,
    /// Samples whose condition is replaced by NULL.
    pub dropped: Vec<bool>,
    pub eps: Array2<F>,
}

/// Per sample, in order: `t ~ U{1..T}`, the unconditional coin, then the
/// pixel noise.
pub fn draw_noise<F: Real>(
    batch: usize,
    pixels: usize,
    sched: &NoiseSchedule,
    p_uncond: f64,
    seed: u64,
) -> NoiseDraw<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut timesteps = Vec::with_capacity(batch);
    let mut dropped = Vec::with_capacity(batch);
    let mut eps = Array2::zeros((batch, pixels));
    for mut row in eps.rows_mut() {
        timesteps.push(rng.random_range(1..=sched.len()));
        dropped.push(p_uncond > 0.0 && rng.random_bool(p_uncond));
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = F::lit(z);
        }
    }
    NoiseDraw {
        timesteps,
        dropped,
        eps,
    }
}

fn noised_inputs<F: Real>(
    x0: ArrayView2<F>,
    conds: &[Phrase],
    sched: &NoiseSchedule,
    p_uncond: f64,
    seed: u64,
) -> Result<(NoiseDraw<F>, Array2<F>, Vec<Phrase>)> {
    if x0.nrows() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if conds.len() != x0.nrows() {
        return Err(Error::Shape(format!(
            "{} conditions for {} images",
            conds.len(),
            x0.nrows()
        )));
    }
    if !(0.0..=1.0).contains(&p_uncond) {
        return Err(Error::range("p_uncond", format!("{p_uncond}")));
    }
    let draw = draw_noise::<F>(x0.nrows(), x0.ncols(), sched, p_uncond, seed);
    let mut xt = Array2::zeros(x0.raw_dim());
    for (i, mut row) in xt.rows_mut().into_iter().enumerate() {
        row.assign(&forward_noise_array(x0.row(i), draw.timesteps[i], draw.eps.row(i), sched)?);
    }
    let used = conds
        .iter()
        .zip(&draw.dropped)
        .map(|(c, &d)| if d { Phrase::null() } else { c.clone() })
        .collect();
    Ok((draw, xt, used))
}

fn squared_error<F: Real>(eps: &Array2<F>, pred: &Array2<F>) -> f64 {
    let sum: f64 = Zip::from(eps)
        .and(pred)
        .fold(0.0, |acc, &e, &p| {
            let d = (e - p).to_f64_lossy();
            acc + d * d
        });
    sum / eps.nrows() as f64
}

/// Mean over the batch of `‖eps − ε(x_t, c, t)‖²`.
pub fn denoise_loss<F: Real, P: NoisePredictor<F> + ?Sized>(
    predictor: &P,
    x0: ArrayView2<F>,
    conds: &[Phrase],
    sched: &NoiseSchedule,
    p_uncond: f64,
    seed: u64,
) -> Result<f64> {
    let (draw, xt, used) = noised_inputs(x0, conds, sched, p_uncond, seed)?;
    let pred = predictor.predict_noise(xt.view(), &draw.timesteps, &used);
    Ok(squared_error(&draw.eps, &pred))
}

/// [`denoise_loss`] together with its gradient for the requested parameters.
pub fn denoise_loss_grad<F: Real>(
    model: &DenoiserModel<F>,
    x0: ArrayView2<F>,
    conds: &[Phrase],
    sched: &NoiseSchedule,
    p_uncond: f64,
    seed: u64,
    wanted: &GradRequest,
) -> Result<(f64, Gradients<F>)> {
    let (draw, xt, used) = noised_inputs(x0, conds, sched, p_uncond, seed)?;
    let (pred, cache) = model.forward(model, xt.view(), &draw.timesteps, &used);
    let loss = squared_error(&draw.eps, &pred);
    let scale = F::lit(-2.0 / x0.nrows() as f64);
    let dpred = (&draw.eps - &pred).mapv(|v| v * scale);
    Ok((loss, model.backward(model, &cache, dpred.view(), wanted)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Final learning rate as a fraction of `lr` (cosine decay).
    pub lr_floor: f64,
    pub p_uncond: f64,
    /// Probability of keeping each caption token, so partial phrases such
    /// as "large" alone are in-distribution conditions.
    pub caption_keep: f64,
    /// Decay of the parameter moving average swapped in after training;
    /// `0` keeps the raw weights.
    #[serde(default)]
    pub ema: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch: 32,
            lr: 2e-3,
            lr_floor: 0.05,
            p_uncond: 0.1,
            caption_keep: 0.6,
            ema: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::Argument("epochs and batch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::range("lr", format!("{}", self.lr)));
        }
        for (what, v) in [
            ("lr_floor", self.lr_floor),
            ("p_uncond", self.p_uncond),
            ("caption_keep", self.caption_keep),
            ("ema", self.ema),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::range(what, format!("{v}")));
            }
        }
        Ok(())
    }
}

/// Stacks dataset images into the `n × pixels` layout the model consumes.
pub fn stack_images<F: Real>(images: &[&ImageSample]) -> Array2<F> {
    let pixels = images.first().map_or(0, |i| i.len());
    let mut out = Array2::zeros((images.len(), pixels));
    for (mut row, img) in out.rows_mut().into_iter().zip(images) {
        for (o, &v) in row.iter_mut().zip(img.pixels().iter()) {
            *o = F::lit(v as f64);
        }
    }
    out
}

/// Trains every parameter of `model` on `dataset`; returns the per-epoch
/// mean loss.
pub fn train_base<F: Real>(
    model: &mut DenoiserModel<F>,
    dataset: &LabeledDataset,
    sched: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    if sched.config() != model.config().schedule {
        return Err(Error::Argument(format!(
            "schedule {:?} differs from the model's {:?}",
            sched.config(),
            model.config().schedule
        )));
    }
    let vocab = model.vocab().clone();
    let captions = dataset
        .items
        .iter()
        .map(|it| vocab.phrase_from_words(&it.caption))
        .collect::<Result<Vec<_>>>()?;
    let images: Vec<&ImageSample> = dataset.items.iter().map(|it| &it.image).collect();
    let all = stack_images::<F>(&images);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let batches_per_epoch = dataset.len().div_ceil(config.batch);
    let total_steps = config.epochs * batches_per_epoch;
    let mut adam = Adam::default();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut ema = (config.ema > 0.0).then(|| model.params().clone());
    let decay = F::lit(config.ema);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch) {
            let x0 = all.select(ndarray::Axis(0), chunk);
            let conds: Vec<Phrase> = chunk
                .iter()
                .map(|&i| drop_tokens(&captions[i], config.caption_keep, &mut rng))
                .collect();
            let (loss, grads) = denoise_loss_grad(
                model,
                x0.view(),
                &conds,
                sched,
                config.p_uncond,
                rng.random(),
                &GradRequest::All,
            )?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            let lr = cosine_lr(config.lr, config.lr_floor, adam.steps_taken() as usize, total_steps);
            adam.step(model.params_mut(), &grads, lr);
            if let Some(avg) = ema.as_mut() {
                for (id, a) in avg.iter_mut() {
                    a.zip_mut_with(&model.params()[id], |a, &w| *a = decay * *a + (F::one() - decay) * w);
                }
            }
            epoch_loss += loss * chunk.len() as f64;
        }
        let mean = epoch_loss / dataset.len() as f64;
        log::info!("base epoch {epoch}: loss {mean:.3}");
        curve.push(mean);
    }
    if let Some(avg) = ema {
        *model.params_mut() = avg;
    }
    Ok(curve)
}

fn drop_tokens<R: Rng>(phrase: &Phrase, keep: f64, rng: &mut R) -> Phrase {
    if keep >= 1.0 {
        return phrase.clone();
    }
    Phrase::new(
        phrase
            .ids()
            .iter()
            .copied()
            .filter(|_| rng.random_bool(keep))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::sample_dataset;
    use crate::model::DenoiserConfig;
    use crate::schedule::ScheduleConfig;

    const TINY: ScheduleConfig = ScheduleConfig::Linear {
        timesteps: 10,
        beta_start: 1e-3,
        beta_end: 0.2,
    };

    fn tiny_schedule() -> NoiseSchedule {
        NoiseSchedule::new(TINY).unwrap()
    }

    struct Zeros;
    impl NoisePredictor<f64> for Zeros {
        fn predict_noise(&self, x: ArrayView2<f64>, _: &[usize], _: &[Phrase]) -> Array2<f64> {
            Array2::zeros(x.raw_dim())
        }
    }

    /// Recovers the true noise from `x_t` given the clean batch.
    struct Oracle<'a> {
        x0: ArrayView2<'a, f64>,
        sched: &'a NoiseSchedule,
    }
    impl NoisePredictor<f64> for Oracle<'_> {
        fn predict_noise(&self, x: ArrayView2<f64>, t: &[usize], _: &[Phrase]) -> Array2<f64> {
            let mut out = x.to_owned();
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let ab = self.sched.alpha_bar(t[i]);
                let x0 = self.x0.row(i);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - ab.sqrt() * x0[j]) / (1.0 - ab).sqrt();
                }
            }
            out
        }
    }

    fn batch() -> Array2<f64> {
        Array2::from_shape_fn((3, 48), |(b, i)| ((b * 7 + i) as f64 * 0.37).sin())
    }

    #[test]
    fn perfect_predictor_has_near_zero_loss() {
        let sched = tiny_schedule();
        let x0 = batch();
        let conds = vec![Phrase::null(); 3];
        let oracle = Oracle { x0: x0.view(), sched: &sched };
        let loss = denoise_loss(&oracle, x0.view(), &conds, &sched, 0.0, 5).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn null_predictor_loss_is_mean_noise_energy() {
        let sched = tiny_schedule();
        let x0 = batch();
        let conds = vec![Phrase::null(); 3];
        let loss = denoise_loss(&Zeros, x0.view(), &conds, &sched, 0.1, 9).unwrap();
        let draw = draw_noise::<f64>(3, 48, &sched, 0.1, 9);
        let energy = draw.eps.iter().map(|e| e * e).sum::<f64>() / 3.0;
        assert!((loss - energy).abs() < 1e-9 * energy);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let sched = tiny_schedule();
        let x0 = Array2::<f64>::zeros((0, 48));
        assert!(matches!(
            denoise_loss(&Zeros, x0.view(), &[], &sched, 0.0, 0),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn p_uncond_one_drops_every_condition() {
        let sched = tiny_schedule();
        let draw = draw_noise::<f64>(50, 4, &sched, 1.0, 3);
        assert!(draw.dropped.iter().all(|&d| d));
        let draw = draw_noise::<f64>(50, 4, &sched, 0.0, 3);
        assert!(draw.dropped.iter().all(|&d| !d));
        assert!(draw.timesteps.iter().all(|&t| (1..=10).contains(&t)));
    }

    #[test]
    fn one_epoch_smoke_and_determinism() {
        let sched = tiny_schedule();
        let data = crate::dataset::LabeledDataset {
            items: sample_dataset(16, 1).unwrap().items,
        };
        let cfg = DenoiserConfig {
            image_size: 32,
            widths: vec![2, 4],
            heads: 2,
            emb_dim: 4,
            cond_dim: 4,
            schedule: TINY,
            ..DenoiserConfig::default()
        };
        let tc = TrainConfig {
            epochs: 1,
            batch: 8,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = DenoiserModel::<f32>::new(cfg.clone(), 4).unwrap();
            let curve = train_base(&mut m, &data, &sched, &tc).unwrap();
            (m, curve)
        };
        let (m1, c1) = run();
        let (m2, c2) = run();
        assert_eq!(c1.len(), 1);
        assert!(c1[0].is_finite());
        assert_eq!(c1, c2);
        assert_eq!(m1, m2);
    }

    #[test]
    fn schedule_mismatch_is_rejected() {
        let data = sample_dataset(2, 0).unwrap();
        let mut m = DenoiserModel::<f32>::new(DenoiserConfig::default(), 0).unwrap();
        let err = train_base(&mut m, &data, &tiny_schedule(), &TrainConfig::default());
        assert!(matches!(err, Err(Error::Argument(_))));
    }
}
