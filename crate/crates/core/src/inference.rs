//! Slider-scaled generation.
//!
//! The first `⌈sdedit_frac·steps⌉` steps, counted from the noisy end, run on
//! the base weights so the coarse layout is fixed before any slider acts.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::diffusion::{stack_images, NoisePredictor};
use crate::error::{Error, Result};
use crate::image::ImageSample;
use crate::lora::{apply, SliderHandle};
use crate::model::{DenoiserModel, WeightSource};
use crate::sampler::{
    check_schedule, ddim_invert, denoise_latents, denoise_range, guided_noise, initial_noise, run_steps, to_images,
    AdaptorHook, SamplerConfig,
};
use crate::vocab::Phrase;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    /// Fraction of the trajectory, from the noisy end, run without sliders.
    pub sdedit_frac: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            steps: s.steps,
            cfg_scale: s.cfg_scale,
            sdedit_frac: 0.2,
        }
    }
}

impl GenerationConfig {
    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            cfg_scale: self.cfg_scale,
        }
    }

    /// Number of leading base-only steps.
    pub fn gate(&self) -> Result<usize> {
        gate_steps(self.steps, self.sdedit_frac)
    }

    pub fn with_frac(self, sdedit_frac: f64) -> Self {
        Self { sdedit_frac, ..self }
    }
}

/// `⌈frac·steps⌉`; `frac` must lie in `[0, 1]`.
pub fn gate_steps(steps: usize, frac: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&frac) {
        return Err(Error::range("sdedit_frac", format!("{frac}")));
    }
    Ok(((frac * steps as f64).ceil() as usize).min(steps))
}

/// Base weights before `gate`, `view` from then on.
pub struct GatedHook<'a> {
    pub view: &'a dyn WeightSource<f32>,
    pub gate: usize,
}

impl AdaptorHook for GatedHook<'_> {
    fn weights(&self, step: usize, _: usize) -> Option<&dyn WeightSource<f32>> {
        (step >= self.gate).then_some(self.view)
    }
}

fn validate_conds(model: &DenoiserModel, conds: &[Phrase], seeds: &[u64]) -> Result<()> {
    if conds.len() != seeds.len() {
        return Err(Error::Shape(format!("{} conditions for {} seeds", conds.len(), seeds.len())));
    }
    conds.iter().try_for_each(|c| c.validate(model.vocab()))
}

/// One image per `(condition, seed)` with the composed sliders behind the
/// SDEdit gate.
pub fn generate_batch_with_sliders(
    model: &DenoiserModel,
    handles: &[SliderHandle<'_>],
    conds: &[Phrase],
    seeds: &[u64],
    config: &GenerationConfig,
) -> Result<Vec<ImageSample>> {
    let gate = config.gate()?;
    validate_conds(model, conds, seeds)?;
    let view = apply(model, handles)?;
    let hook = GatedHook { view: &view, gate };
    let x = initial_noise(seeds, model.config().pixels());
    let out = denoise_latents(model, x, conds, model.schedule(), &config.sampler(), 0, &hook)?;
    Ok(to_images(model, &out))
}

pub fn generate_with_sliders(
    model: &DenoiserModel,
    handles: &[SliderHandle<'_>],
    condition: &Phrase,
    seed: u64,
    config: &GenerationConfig,
) -> Result<ImageSample> {
    Ok(generate_batch_with_sliders(model, handles, std::slice::from_ref(condition), &[seed], config)?.remove(0))
}

/// A batch partially denoised on the base weights, to be finished under
/// several different slider settings. Finishing from step `gate` gives the
/// same bits as a full gated generation.
#[derive(Debug, Clone)]
pub struct BasePrefix {
    latents: Array2<f32>,
    step: usize,
    conds: Vec<Phrase>,
    sampler: SamplerConfig,
}

impl BasePrefix {
    pub fn new(model: &DenoiserModel, conds: &[Phrase], seeds: &[u64], sampler: SamplerConfig) -> Result<Self> {
        validate_conds(model, conds, seeds)?;
        Ok(Self {
            latents: initial_noise(seeds, model.config().pixels()),
            step: 0,
            conds: conds.to_vec(),
            sampler,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Runs base steps up to `gate`. Gates only move forward.
    pub fn advance(&mut self, model: &DenoiserModel, gate: usize) -> Result<()> {
        if gate < self.step || gate > self.sampler.steps {
            return Err(Error::range("gate", format!("{gate} from step {}", self.step)));
        }
        let x = std::mem::take(&mut self.latents);
        self.latents = denoise_range(model, x, &self.conds, model.schedule(), &self.sampler, self.step..gate, &NoHook)?;
        self.step = gate;
        Ok(())
    }

    /// Remaining steps with `weights`, clamped at the end.
    pub fn finish(&self, model: &DenoiserModel, weights: &dyn WeightSource<f32>) -> Result<Vec<ImageSample>> {
        let hook = GatedHook { view: weights, gate: 0 };
        let out = denoise_latents(model, self.latents.clone(), &self.conds, model.schedule(), &self.sampler, self.step, &hook)?;
        Ok(to_images(model, &out))
    }
}

struct NoHook;

impl AdaptorHook for NoHook {
    fn weights(&self, _: usize, _: usize) -> Option<&dyn WeightSource<f32>> {
        None
    }
}

/// Phrases of the inference-time composition baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreComposition {
    pub target: Phrase,
    pub enhance: Phrase,
    pub suppress: Phrase,
    pub eta: f64,
}

/// Adds `η·(ε(c₊) − ε(c₋))` to the guided base prediction at every gated
/// step. No adaptor is involved.
pub fn compose_inference_baseline_batch(
    model: &DenoiserModel,
    terms: &ScoreComposition,
    seeds: &[u64],
    config: &GenerationConfig,
) -> Result<Vec<ImageSample>> {
    let gate = config.gate()?;
    for c in [&terms.target, &terms.enhance, &terms.suppress] {
        c.validate(model.vocab())?;
    }
    if !terms.eta.is_finite() {
        return Err(Error::range("eta", format!("{}", terms.eta)));
    }
    let n = seeds.len();
    let conds = vec![terms.target.clone(); n];
    let (plus, minus) = (vec![terms.enhance.clone(); n], vec![terms.suppress.clone(); n]);
    let x = initial_noise(seeds, model.config().pixels());
    let eta = terms.eta as f32;
    let out = run_steps(x, model.schedule(), config.steps, 0, |s, xv: ArrayView2<f32>, t| {
        let mut eps = guided_noise(model, xv, t, &conds, config.cfg_scale);
        if s >= gate && eta != 0.0 {
            let ts = vec![t; n];
            let diff = model.predict_noise(xv, &ts, &plus) - model.predict_noise(xv, &ts, &minus);
            eps.scaled_add(eta, &diff);
        }
        eps
    })?;
    Ok(to_images(model, &out.mapv(|v| v.clamp(-1.0, 1.0))))
}

pub fn compose_inference_baseline(
    model: &DenoiserModel,
    terms: &ScoreComposition,
    seed: u64,
    config: &GenerationConfig,
) -> Result<ImageSample> {
    Ok(compose_inference_baseline_batch(model, terms, &[seed], config)?.remove(0))
}

/// Inverts `image` for the `steps − gate` steps nearest the clean end,
/// then re-generates those steps with the sliders on. `sdedit_frac = 1`
/// returns the input unchanged.
pub fn edit_real_image(
    model: &DenoiserModel,
    image: &ImageSample,
    handles: &[SliderHandle<'_>],
    condition: &Phrase,
    config: &GenerationConfig,
) -> Result<ImageSample> {
    let gate = config.gate()?;
    check_schedule(model, model.schedule())?;
    let view = apply(model, handles)?;
    let sampler = config.sampler();
    let trajectory = ddim_invert(model, image, condition, model.schedule(), &sampler, Some(config.steps - gate))?;
    let x = stack_images::<f32>(&[trajectory.last()]);
    let hook = GatedHook { view: &view, gate: 0 };
    let out = denoise_latents(model, x, std::slice::from_ref(condition), model.schedule(), &sampler, gate, &hook)?;
    Ok(to_images(model, &out).remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::init_adaptor;
    use crate::model::DenoiserConfig;
    use crate::schedule::ScheduleConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model() -> DenoiserModel {
        let cfg = DenoiserConfig {
            image_size: 8,
            widths: vec![4, 8],
            heads: 2,
            emb_dim: 8,
            cond_dim: 4,
            schedule: ScheduleConfig::linear_scaled(20),
            ..DenoiserConfig::default()
        };
        let mut m = DenoiserModel::new(cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for p in m.params_mut().values_mut() {
            p.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
        }
        m
    }

    fn trained_like(m: &DenoiserModel, seed: u64) -> crate::lora::LoRAAdaptor {
        let mut a = init_adaptor(m, &m.config().slider_target_layers(), 2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in a.entries.values_mut() {
            e.b.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        a
    }

    fn cfg() -> GenerationConfig {
        GenerationConfig {
            steps: 8,
            cfg_scale: 2.0,
            sdedit_frac: 0.25,
        }
    }

    fn base(m: &DenoiserModel, c: &Phrase, seeds: &[u64], config: &GenerationConfig) -> Vec<ImageSample> {
        generate_batch_with_sliders(m, &[], &vec![c.clone(); seeds.len()], seeds, config).unwrap()
    }

    #[test]
    fn gate_rounding_and_range() {
        assert_eq!(gate_steps(20, 0.2).unwrap(), 4);
        assert_eq!(gate_steps(20, 0.21).unwrap(), 5);
        assert_eq!(gate_steps(20, 0.0).unwrap(), 0);
        assert_eq!(gate_steps(20, 1.0).unwrap(), 20);
        assert!(gate_steps(20, 1.5).is_err());
        assert!(gate_steps(20, f64::NAN).is_err());
    }

    #[test]
    fn gate_off_and_zero_alpha_are_the_base() {
        let m = model();
        let a = trained_like(&m, 1);
        let c = m.vocab().phrase("large circle").unwrap();
        let seeds = [3, 4, 5];
        let conds = vec![c.clone(); 3];
        let reference = base(&m, &c, &seeds, &cfg());
        let zero = [SliderHandle::new(&a, 0.0).unwrap()];
        assert_eq!(generate_batch_with_sliders(&m, &zero, &conds, &seeds, &cfg()).unwrap(), reference);
        let on = [SliderHandle::new(&a, 2.0).unwrap()];
        let gated = cfg().with_frac(1.0);
        assert_eq!(
            generate_batch_with_sliders(&m, &on, &conds, &seeds, &gated).unwrap(),
            base(&m, &c, &seeds, &gated)
        );
        assert_ne!(generate_batch_with_sliders(&m, &on, &conds, &seeds, &cfg()).unwrap(), reference);
    }

    #[test]
    fn prefix_then_finish_matches_full_generation() {
        let m = model();
        let a = trained_like(&m, 2);
        let c = m.vocab().phrase("small").unwrap();
        let seeds = [10, 11];
        let conds = vec![c; 2];
        let handles = [SliderHandle::new(&a, -1.5).unwrap()];
        let view = apply(&m, &handles).unwrap();
        let mut prefix = BasePrefix::new(&m, &conds, &seeds, cfg().sampler()).unwrap();
        for frac in [0.0, 0.25, 0.5, 1.0] {
            let config = cfg().with_frac(frac);
            prefix.advance(&m, config.gate().unwrap()).unwrap();
            assert_eq!(
                prefix.finish(&m, &view).unwrap(),
                generate_batch_with_sliders(&m, &handles, &conds, &seeds, &config).unwrap(),
                "frac {frac}"
            );
        }
        assert!(prefix.advance(&m, 2).is_err());
    }

    #[test]
    fn baseline_reduces_to_conditional_sampling() {
        let m = model();
        let v = m.vocab();
        let seeds = [7, 8];
        let terms = ScoreComposition {
            target: v.phrase("circle").unwrap(),
            enhance: v.phrase("large").unwrap(),
            suppress: v.phrase("small").unwrap(),
            eta: 0.0,
        };
        let plain = base(&m, &terms.target, &seeds, &cfg());
        assert_eq!(compose_inference_baseline_batch(&m, &terms, &seeds, &cfg()).unwrap(), plain);
        let cancel = ScoreComposition {
            suppress: terms.enhance.clone(),
            eta: 1.0,
            ..terms.clone()
        };
        assert_eq!(compose_inference_baseline_batch(&m, &cancel, &seeds, &cfg()).unwrap(), plain);
        let on = ScoreComposition { eta: 1.0, ..terms };
        assert_ne!(compose_inference_baseline_batch(&m, &on, &seeds, &cfg()).unwrap(), plain);
    }

    #[test]
    fn real_image_editing_contracts() {
        let m = model();
        let c = Phrase::null();
        let img = base(&m, &c, &[1], &cfg()).remove(0);
        let a = trained_like(&m, 3);
        let h = [SliderHandle::new(&a, 1.0).unwrap()];
        let untouched = edit_real_image(&m, &img, &h, &c, &cfg().with_frac(1.0)).unwrap();
        assert_eq!(untouched, img.clamped());
        let edited = edit_real_image(&m, &img, &h, &c, &cfg()).unwrap();
        assert!(edited.is_finite() && edited.is_in_range());
        assert!(edit_real_image(&m, &ImageSample::zeros(4, 4, 3), &[], &c, &cfg()).is_err());
    }
}
