//! Deterministic DDIM sampling with classifier-free guidance, and its
//! inverse.
//!
//! Steps are indexed from the noisy end: step `s` moves the state from
//! timestep `grid[steps-1-s]` to the next lower grid point (or to the clean
//! image after the last step).

use std::ops::Range;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{stack_images, NoisePredictor, Reweighted};
use crate::error::{Error, Result};
use crate::image::ImageSample;
use crate::model::{DenoiserModel, WeightSource};
use crate::schedule::NoiseSchedule;
use crate::vocab::Phrase;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            cfg_scale: 3.0,
        }
    }
}

/// Chooses the weights used at each step; `None` means the base model.
pub trait AdaptorHook: Sync {
    fn weights(&self, step: usize, steps: usize) -> Option<&dyn WeightSource<f32>>;
}

/// The identity hook.
pub struct BaseOnly;

impl AdaptorHook for BaseOnly {
    fn weights(&self, _: usize, _: usize) -> Option<&dyn WeightSource<f32>> {
        None
    }
}

/// `ε_u + s·(ε_c − ε_u)`. Scales 0 and 1 return the unconditional and
/// conditional predictions exactly.
pub fn guided_noise<P: NoisePredictor<f32> + ?Sized>(
    predictor: &P,
    x: ArrayView2<f32>,
    t: usize,
    conds: &[Phrase],
    cfg_scale: f64,
) -> Array2<f32> {
    let b = x.nrows();
    let ts = vec![t; b];
    if cfg_scale == 1.0 || conds.iter().all(Phrase::is_null) {
        return predictor.predict_noise(x, &ts, conds);
    }
    let nulls = vec![Phrase::null(); b];
    if cfg_scale == 0.0 {
        return predictor.predict_noise(x, &ts, &nulls);
    }
    let both = concatenate(Axis(0), &[x, x]).expect("same width");
    let all_conds: Vec<Phrase> = conds.iter().cloned().chain(nulls).collect();
    let pred = predictor.predict_noise(both.view(), &[ts.clone(), ts].concat(), &all_conds);
    let (cond, uncond) = (pred.slice(s![..b, ..]), pred.slice(s![b.., ..]));
    let scale = cfg_scale as f32;
    let mut out = uncond.to_owned();
    out.zip_mut_with(&cond, |u, &c| *u += scale * (c - *u));
    out
}

/// One deterministic DDIM move from `t_from` to `t_to` given `eps`.
pub fn ddim_step(x: &Array2<f32>, eps: &Array2<f32>, t_from: usize, t_to: usize, sched: &NoiseSchedule) -> Array2<f32> {
    let (a_from, a_to) = (sched.alpha_bar(t_from), sched.alpha_bar(t_to));
    let (sf, nf) = (a_from.sqrt() as f32, (1.0 - a_from).sqrt() as f32);
    let (st, nt) = (a_to.sqrt() as f32, (1.0 - a_to).sqrt() as f32);
    let mut out = x.clone();
    out.zip_mut_with(eps, |v, &e| {
        let x0 = (*v - nf * e) / sf;
        *v = st * x0 + nt * e;
    });
    out
}

/// Timestep before and after each step, noisy end first.
pub fn step_timesteps(sched: &NoiseSchedule, steps: usize) -> Result<Vec<(usize, usize)>> {
    let grid = sched.sampling_timesteps(steps)?;
    Ok((0..steps)
        .map(|s| {
            let i = steps - 1 - s;
            (grid[i], if i == 0 { 0 } else { grid[i - 1] })
        })
        .collect())
}

/// Seeded standard-normal starting latents, one row per seed.
pub fn initial_noise(seeds: &[u64], pixels: usize) -> Array2<f32> {
    let mut out = Array2::zeros((seeds.len(), pixels));
    for (mut row, &seed) in out.rows_mut().into_iter().zip(seeds) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z as f32;
        }
    }
    out
}

/// Runs steps `from..steps` on `x`, asking `eps_at(step, x, t)` for the
/// noise estimate. Does not clamp.
pub fn run_steps<E>(x: Array2<f32>, sched: &NoiseSchedule, steps: usize, from: usize, eps_at: E) -> Result<Array2<f32>>
where
    E: FnMut(usize, ArrayView2<f32>, usize) -> Array2<f32>,
{
    run_step_range(x, sched, steps, from..steps, eps_at)
}

/// Runs the steps in `range` of a `steps`-step trajectory. Splitting a
/// trajectory into consecutive ranges gives bit-identical results.
pub fn run_step_range<E>(
    mut x: Array2<f32>,
    sched: &NoiseSchedule,
    steps: usize,
    range: Range<usize>,
    mut eps_at: E,
) -> Result<Array2<f32>>
where
    E: FnMut(usize, ArrayView2<f32>, usize) -> Array2<f32>,
{
    if range.end > steps {
        return Err(Error::range("step range", format!("{range:?} of {steps}")));
    }
    let grid = step_timesteps(sched, steps)?;
    for s in range {
        let (t_from, t_to) = grid[s];
        let eps = eps_at(s, x.view(), t_from);
        x = ddim_step(&x, &eps, t_from, t_to, sched);
    }
    Ok(x)
}

/// Runs the steps in `range` with the hook's weights; does not clamp.
pub fn denoise_range(
    model: &DenoiserModel,
    x: Array2<f32>,
    conds: &[Phrase],
    sched: &NoiseSchedule,
    config: &SamplerConfig,
    range: Range<usize>,
    hook: &dyn AdaptorHook,
) -> Result<Array2<f32>> {
    if conds.len() != x.nrows() {
        return Err(Error::Shape(format!("{} conditions for {} latents", conds.len(), x.nrows())));
    }
    let steps = config.steps;
    run_step_range(x, sched, steps, range, |s, xv, t| {
        let weights = hook.weights(s, steps).unwrap_or(model);
        let predictor = Reweighted { model, weights };
        guided_noise(&predictor, xv, t, conds, config.cfg_scale)
    })
}

/// Continues a batch of latents from step `from` using the hook's weights,
/// clamping once at the end.
pub fn denoise_latents(
    model: &DenoiserModel,
    x: Array2<f32>,
    conds: &[Phrase],
    sched: &NoiseSchedule,
    config: &SamplerConfig,
    from: usize,
    hook: &dyn AdaptorHook,
) -> Result<Array2<f32>> {
    let out = denoise_range(model, x, conds, sched, config, from..config.steps, hook)?;
    Ok(out.mapv(|v| v.clamp(-1.0, 1.0)))
}

pub fn sample_batch(
    model: &DenoiserModel,
    conds: &[Phrase],
    seeds: &[u64],
    sched: &NoiseSchedule,
    config: &SamplerConfig,
    hook: &dyn AdaptorHook,
) -> Result<Vec<ImageSample>> {
    check_schedule(model, sched)?;
    for c in conds {
        c.validate(model.vocab())?;
    }
    let x = initial_noise(seeds, model.config().pixels());
    let out = denoise_latents(model, x, conds, sched, config, 0, hook)?;
    Ok(to_images(model, &out))
}

/// One image from pure noise. Deterministic in every argument.
pub fn sample(
    model: &DenoiserModel,
    condition: &Phrase,
    sched: &NoiseSchedule,
    config: &SamplerConfig,
    seed: u64,
    hook: &dyn AdaptorHook,
) -> Result<ImageSample> {
    Ok(sample_batch(model, std::slice::from_ref(condition), &[seed], sched, config, hook)?.remove(0))
}

/// States `x_0 → x_T` visited by deterministic inversion, clean end first.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub timesteps: Vec<usize>,
    pub states: Vec<ImageSample>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> &ImageSample {
        self.states.last().expect("trajectory holds x_0")
    }
}

/// Reverses the sampler: the noise estimate at each step is taken at the
/// destination timestep, mirroring the step that will later undo it.
/// `depth` limits the number of inversion steps (`None` = all the way to
/// `T`).
pub fn ddim_invert(
    model: &DenoiserModel,
    image: &ImageSample,
    condition: &Phrase,
    sched: &NoiseSchedule,
    config: &SamplerConfig,
    depth: Option<usize>,
) -> Result<Trajectory> {
    check_schedule(model, sched)?;
    condition.validate(model.vocab())?;
    let cfg = model.config();
    if image.pixels().dim() != (cfg.image_size, cfg.image_size, cfg.channels) {
        return Err(Error::Shape(format!("image {:?} vs model {}", image.pixels().dim(), cfg.image_size)));
    }
    if !image.is_in_range() {
        return Err(Error::range("image", "pixels outside [-1, 1]"));
    }
    let grid = sched.sampling_timesteps(config.steps)?;
    let depth = depth.unwrap_or(config.steps);
    if depth > config.steps {
        return Err(Error::range("depth", format!("{depth} > {} steps", config.steps)));
    }
    let conds = [condition.clone()];
    let mut x = stack_images::<f32>(&[image]);
    let mut timesteps = vec![0];
    let mut states = vec![image.clone()];
    let mut t_prev = 0;
    for &t in grid.iter().take(depth) {
        let eps = guided_noise(model, x.view(), t, &conds, config.cfg_scale);
        x = ddim_step(&x, &eps, t_prev, t, sched);
        t_prev = t;
        timesteps.push(t);
        states.push(to_images(model, &x).remove(0));
    }
    Ok(Trajectory { timesteps, states })
}

pub(crate) fn check_schedule(model: &DenoiserModel, sched: &NoiseSchedule) -> Result<()> {
    if sched.config() != model.config().schedule {
        return Err(Error::Argument(format!(
            "schedule {:?} differs from the model's {:?}",
            sched.config(),
            model.config().schedule
        )));
    }
    Ok(())
}

pub(crate) fn to_images(model: &DenoiserModel, x: &Array2<f32>) -> Vec<ImageSample> {
    let c = model.config();
    x.rows()
        .into_iter()
        .map(|r| ImageSample::from_flat(r, c.image_size, c.image_size, c.channels))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;
    use crate::schedule::ScheduleConfig;

    fn setup() -> (DenoiserModel, NoiseSchedule) {
        let cfg = DenoiserConfig {
            widths: vec![4, 8],
            heads: 2,
            emb_dim: 8,
            cond_dim: 8,
            schedule: ScheduleConfig::Linear {
                timesteps: 20,
                beta_start: 1e-3,
                beta_end: 0.2,
            },
            ..DenoiserConfig::default()
        };
        let mut m = DenoiserModel::new(cfg, 1).unwrap();
        // Give the zero-initialized output layers some weight.
        let mut k = 0.0f32;
        for (id, p) in m.params_mut().iter_mut() {
            if id.starts_with("dec.") || id.contains(".mod") {
                p.mapv_inplace(|_| {
                    k += 0.7;
                    0.05 * k.sin()
                });
            }
        }
        let sched = m.schedule().clone();
        (m, sched)
    }

    #[test]
    fn step_grid_ends_at_clean_image() {
        let sched = NoiseSchedule::default();
        let st = step_timesteps(&sched, 4).unwrap();
        assert_eq!(st, vec![(100, 75), (75, 50), (50, 25), (25, 0)]);
        assert_eq!(step_timesteps(&sched, 1).unwrap(), vec![(100, 0)]);
        assert!(matches!(step_timesteps(&sched, 101), Err(Error::Range { .. })));
    }

    #[test]
    fn sampling_is_deterministic_and_clamped() {
        let (m, sched) = setup();
        let c = m.vocab().phrase("large circle").unwrap();
        let cfg = SamplerConfig { steps: 5, cfg_scale: 2.0 };
        let a = sample(&m, &c, &sched, &cfg, 3, &BaseOnly).unwrap();
        let b = sample(&m, &c, &sched, &cfg, 3, &BaseOnly).unwrap();
        assert_eq!(a, b);
        assert!(a.is_in_range());
        let other = sample(&m, &c, &sched, &cfg, 4, &BaseOnly).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn batch_matches_individual_samples() {
        let (m, sched) = setup();
        let v = m.vocab();
        let conds = vec![v.phrase("small square").unwrap(), Phrase::null(), v.phrase("red").unwrap()];
        let cfg = SamplerConfig { steps: 4, cfg_scale: 2.5 };
        let batch = sample_batch(&m, &conds, &[1, 2, 3], &sched, &cfg, &BaseOnly).unwrap();
        for (i, c) in conds.iter().enumerate() {
            let single = sample(&m, c, &sched, &cfg, i as u64 + 1, &BaseOnly).unwrap();
            assert_eq!(batch[i], single);
        }
    }

    #[test]
    fn guidance_endpoints_are_exact() {
        let (m, sched) = setup();
        let x = initial_noise(&[7, 8], m.config().pixels());
        let c = vec![m.vocab().phrase("large").unwrap(); 2];
        let t = sched.len() / 2;
        let cond = m.predict_noise(x.view(), &[t, t], &c);
        let uncond = m.predict_noise(x.view(), &[t, t], &[Phrase::null(), Phrase::null()]);
        assert_eq!(guided_noise(&m, x.view(), t, &c, 1.0), cond);
        assert_eq!(guided_noise(&m, x.view(), t, &c, 0.0), uncond);
        let g = guided_noise(&m, x.view(), t, &c, 3.0);
        let manual = &uncond + &((&cond - &uncond) * 3.0);
        assert!(g.iter().zip(manual.iter()).all(|(a, b)| (a - b).abs() < 1e-5));
    }

    #[test]
    fn cfg_zero_ignores_the_condition() {
        let (m, sched) = setup();
        let cfg = SamplerConfig { steps: 3, cfg_scale: 0.0 };
        let a = sample(&m, &m.vocab().phrase("large").unwrap(), &sched, &cfg, 1, &BaseOnly).unwrap();
        let b = sample(&m, &m.vocab().phrase("small").unwrap(), &sched, &cfg, 1, &BaseOnly).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_many_steps_is_a_range_error() {
        let (m, sched) = setup();
        let cfg = SamplerConfig { steps: 21, cfg_scale: 1.0 };
        assert!(matches!(
            sample(&m, &Phrase::null(), &sched, &cfg, 0, &BaseOnly),
            Err(Error::Range { .. })
        ));
    }

    #[test]
    fn inversion_trajectory_length() {
        let (m, sched) = setup();
        let img = ImageSample::filled(32, 32, 3, 0.2);
        let one = SamplerConfig { steps: 1, cfg_scale: 1.0 };
        let tr = ddim_invert(&m, &img, &Phrase::null(), &sched, &one, None).unwrap();
        assert_eq!(tr.len(), 2);
        assert_eq!(tr.timesteps, vec![0, 20]);
        let cfg = SamplerConfig { steps: 5, cfg_scale: 1.0 };
        let tr = ddim_invert(&m, &img, &Phrase::null(), &sched, &cfg, Some(2)).unwrap();
        assert_eq!(tr.timesteps, vec![0, 4, 8]);
    }

    #[test]
    fn ddim_step_is_invertible_for_fixed_eps() {
        let sched = NoiseSchedule::default();
        let x = initial_noise(&[1], 12);
        let eps = initial_noise(&[2], 12);
        let up = ddim_step(&x, &eps, 10, 40, &sched);
        let back = ddim_step(&up, &eps, 40, 10, &sched);
        assert!(x.iter().zip(back.iter()).all(|(a, b)| (a - b).abs() < 1e-5));
    }
}
