//! Slider training.
//!
//! Text sliders regress the adapted prediction at `c_t` onto the guided
//! target `ε(c_t) + η·Σ_p [ε(c₊·p) − ε(c₋·p)]` computed by the frozen base.
//! Image sliders apply one adaptor at `α = −1` to the negative pole and at
//! `α = +1` to the positive pole under the ordinary denoising loss.
//!
//! Only adaptor factors receive updates; the base model is borrowed
//! immutably throughout.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::sha256_hex;
use crate::dataset::ImagePairSet;
use crate::diffusion::{stack_images, NoisePredictor};
use crate::error::{Error, Result};
use crate::lora::{init_adaptor, LoRAAdaptor, LoraEntry, ModelView};
use crate::model::{DenoiserModel, GradRequest, Gradients};
use crate::optim::Adam;
use crate::real::Real;
use crate::sampler::{ddim_step, guided_noise, initial_noise, step_timesteps, SamplerConfig};
use crate::schedule::forward_noise_array;
use crate::vocab::{Phrase, Vocabulary};

/// How the weight update of each target layer is parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaForm {
    /// `ΔW = B·A` with `B` zero-initialized.
    #[default]
    LowRank,
    /// `ΔW` trained directly; stored as `B = I, A = ΔW` (or the transpose
    /// arrangement) so it composes like any adaptor.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliderSpec {
    pub name: String,
    /// `c_t`; empty for the unconditional target.
    pub target: String,
    pub enhance: String,
    pub suppress: String,
    /// Preservation phrases `P`; empty selects the single-pair form.
    #[serde(default)]
    pub preserve: Vec<String>,
    pub eta: f64,
    /// Divide the preservation sum by `|P|`.
    #[serde(default)]
    pub normalize_preserve: bool,
    pub rank: usize,
    #[serde(default)]
    pub delta_form: DeltaForm,
    /// Layers to adapt; empty selects the model's default targets.
    #[serde(default)]
    pub layers: Vec<String>,
    /// Optimization steps, each on a fresh minibatch of pooled states.
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Seeded trajectories in the partial-denoising pool.
    pub trajectories: usize,
    /// Fractions of `T` bounding the training timesteps.
    pub horizon: (f64, f64),
    /// Sampler used to partially denoise the pool.
    pub sampler: SamplerConfig,
}

impl Default for SliderSpec {
    fn default() -> Self {
        Self {
            name: "slider".into(),
            target: String::new(),
            enhance: String::new(),
            suppress: String::new(),
            preserve: Vec::new(),
            eta: 1.0,
            normalize_preserve: false,
            rank: 4,
            delta_form: DeltaForm::LowRank,
            layers: Vec::new(),
            epochs: 300,
            lr: 2e-3,
            batch: 8,
            seed: 0,
            trajectories: 64,
            horizon: (0.2, 0.9),
            sampler: SamplerConfig::default(),
        }
    }
}

impl SliderSpec {
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let terms = self.terms(vocab)?;
        if terms.pairs.iter().any(|(p, m)| p == m) {
            return Err(Error::Validation("enhance and suppress phrases must differ".into()));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::range("eta", format!("{}", self.eta)));
        }
        check_common(self.rank, self.epochs, self.batch, self.lr)?;
        if self.trajectories == 0 {
            return Err(Error::Argument("trajectories must be positive".into()));
        }
        let (lo, hi) = self.horizon;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::range("horizon", format!("{lo}..{hi}")));
        }
        Ok(())
    }

    pub fn terms(&self, vocab: &Vocabulary) -> Result<TargetTerms> {
        let plus = vocab.phrase(&self.enhance)?;
        let minus = vocab.phrase(&self.suppress)?;
        let pairs = if self.preserve.is_empty() {
            vec![(plus, minus)]
        } else {
            self.preserve
                .iter()
                .map(|p| {
                    let p = vocab.phrase(p)?;
                    Ok((plus.concat(&p), minus.concat(&p)))
                })
                .collect::<Result<_>>()?
        };
        Ok(TargetTerms {
            target: vocab.phrase(&self.target)?,
            pairs,
            eta: self.eta,
            normalize: self.normalize_preserve,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("spec serializes"))
    }
}

fn check_common(rank: usize, epochs: usize, batch: usize, lr: f64) -> Result<()> {
    if rank == 0 || epochs == 0 || batch == 0 {
        return Err(Error::Argument("rank, epochs and batch must be positive".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::range("lr", format!("{lr}")));
    }
    Ok(())
}

/// Resolved phrases of the guided target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTerms {
    pub target: Phrase,
    /// `(c₊·p, c₋·p)` per preservation phrase, or `(c₊, c₋)` alone.
    pub pairs: Vec<(Phrase, Phrase)>,
    pub eta: f64,
    pub normalize: bool,
}

/// `ε(x_t, c_t) + η·Σ [ε(x_t, c₊·p) − ε(x_t, c₋·p)]`, evaluated by a frozen
/// predictor. The result is a plain array: no gradient flows through it.
pub fn compose_target_score<F: Real, P: NoisePredictor<F> + ?Sized>(
    frozen: &P,
    x_t: ArrayView2<F>,
    timesteps: &[usize],
    terms: &TargetTerms,
) -> Array2<F> {
    let n = x_t.nrows();
    let conds = |p: &Phrase| vec![p.clone(); n];
    let mut out = frozen.predict_noise(x_t, timesteps, &conds(&terms.target));
    if terms.eta == 0.0 || terms.pairs.is_empty() {
        return out;
    }
    let mut guide = Array2::<F>::zeros(out.raw_dim());
    for (plus, minus) in &terms.pairs {
        guide += &frozen.predict_noise(x_t, timesteps, &conds(plus));
        guide -= &frozen.predict_noise(x_t, timesteps, &conds(minus));
    }
    let mut scale = terms.eta;
    if terms.normalize {
        scale /= terms.pairs.len() as f64;
    }
    out.scaled_add(F::lit(scale), &guide);
    out
}

/// Key of a factor in the optimizer's parameter map.
fn factor_key(layer: &str, factor: char) -> String {
    format!("{layer}.{factor}")
}

/// Unpacks an adaptor into `layer.B` / `layer.A` matrices of type `F`.
pub fn adaptor_factors<F: Real>(adaptor: &LoRAAdaptor) -> BTreeMap<String, Array2<F>> {
    let mut out = BTreeMap::new();
    for (id, e) in &adaptor.entries {
        out.insert(factor_key(id, 'B'), e.b.mapv(|v| F::lit(v as f64)));
        out.insert(factor_key(id, 'A'), e.a.mapv(|v| F::lit(v as f64)));
    }
    out
}

fn store_factors<F: Real>(adaptor: &mut LoRAAdaptor, factors: &BTreeMap<String, Array2<F>>) {
    for (id, e) in adaptor.entries.iter_mut() {
        e.b = factors[&factor_key(id, 'B')].mapv(|v| v.to_f64_lossy() as f32);
        e.a = factors[&factor_key(id, 'A')].mapv(|v| v.to_f64_lossy() as f32);
    }
}

/// `Σ_b ‖ε_{θ+αBA}(x_b, c_b, t_b) − target_b‖² / batch` and its gradient with
/// respect to the factors only.
#[allow(clippy::too_many_arguments)]
pub fn adaptor_loss_grad<F: Real>(
    model: &DenoiserModel<F>,
    factors: &BTreeMap<String, Array2<F>>,
    layers: &[String],
    alpha: f64,
    x: ArrayView2<F>,
    timesteps: &[usize],
    conds: &[Phrase],
    target: ArrayView2<F>,
) -> Result<(f64, Gradients<F>)> {
    let batch = x.nrows();
    if batch == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let a = F::lit(alpha);
    let mut overrides = BTreeMap::new();
    for id in layers {
        let (b, f) = (&factors[&factor_key(id, 'B')], &factors[&factor_key(id, 'A')]);
        let mut w = model.params()[id].clone();
        w.scaled_add(a, &b.dot(f));
        overrides.insert(id.clone(), w);
    }
    let view = ModelView::with_overrides(model, overrides)?;
    let (pred, cache) = model.forward(&view, x, timesteps, conds);
    let diff = &pred - &target;
    let loss = diff.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() / batch as f64;
    let dpred = diff.mapv(|v| v * F::lit(2.0 / batch as f64));
    let dw = model.backward(&view, &cache, dpred.view(), &GradRequest::only(layers.iter().cloned()));
    let mut grads = Gradients::default();
    for id in layers {
        let Some(g) = dw.get(id) else { continue };
        let (b, f) = (&factors[&factor_key(id, 'B')], &factors[&factor_key(id, 'A')]);
        grads.accumulate(&factor_key(id, 'B'), g.dot(&f.t()).mapv(|v| v * a));
        grads.accumulate(&factor_key(id, 'A'), b.t().dot(g).mapv(|v| v * a));
    }
    Ok((loss, grads))
}

/// Trained adaptor and per-epoch loss.
#[derive(Debug, Clone)]
pub struct SliderOutcome {
    pub adaptor: LoRAAdaptor,
    pub losses: Vec<f64>,
}

fn resolve_layers(model: &DenoiserModel, layers: &[String]) -> Vec<String> {
    if layers.is_empty() {
        model.config().slider_target_layers()
    } else {
        layers.to_vec()
    }
}

/// A fresh update of the requested form, plus the factor keys that train.
fn init_delta(
    model: &DenoiserModel,
    layers: &[String],
    rank: usize,
    form: DeltaForm,
    seed: u64,
) -> Result<(LoRAAdaptor, Vec<String>)> {
    match form {
        DeltaForm::LowRank => {
            let adaptor = init_adaptor(model, layers, rank, seed)?;
            let keys = layers
                .iter()
                .flat_map(|l| [factor_key(l, 'B'), factor_key(l, 'A')])
                .collect();
            Ok((adaptor, keys))
        }
        DeltaForm::Full => {
            let mut entries = BTreeMap::new();
            let mut keys = Vec::new();
            let mut max_rank = 0;
            for id in layers {
                let (d, k) = model.layer_dims(id)?;
                let entry = if d <= k {
                    keys.push(factor_key(id, 'A'));
                    LoraEntry {
                        b: Array2::eye(d),
                        a: Array2::zeros((d, k)),
                    }
                } else {
                    keys.push(factor_key(id, 'B'));
                    LoraEntry {
                        b: Array2::zeros((d, k)),
                        a: Array2::eye(k),
                    }
                };
                max_rank = max_rank.max(d.min(k));
                entries.insert(id.clone(), entry);
            }
            let adaptor = LoRAAdaptor {
                name: String::new(),
                rank: max_rank,
                entries,
                metadata: BTreeMap::new(),
            };
            adaptor.validate(model)?;
            Ok((adaptor, keys))
        }
    }
}

fn keep_trainable<F: Real>(grads: Gradients<F>, keys: &[String]) -> Gradients<F> {
    Gradients {
        map: grads.map.into_iter().filter(|(k, _)| keys.contains(k)).collect(),
    }
}

/// Partially denoised states with their frozen targets.
struct StatePool {
    x: Array2<f32>,
    timesteps: Vec<usize>,
    target: Array2<f32>,
}

fn build_pool(model: &DenoiserModel, spec: &SliderSpec, terms: &TargetTerms) -> Result<StatePool> {
    let sched = model.schedule();
    let steps = step_timesteps(sched, spec.sampler.steps)?;
    let total = sched.len() as f64;
    let (lo, hi) = ((spec.horizon.0 * total).ceil() as usize, (spec.horizon.1 * total).floor() as usize);
    let eligible: Vec<usize> = (0..steps.len())
        .filter(|&s| (lo..=hi).contains(&steps[s].0))
        .collect();
    let Some(&last) = eligible.last() else {
        return Err(Error::Argument(format!(
            "no sampler grid point in the training horizon {lo}..={hi}"
        )));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_7001);
    let seeds: Vec<u64> = (0..spec.trajectories).map(|_| rng.random()).collect();
    let mut x = initial_noise(&seeds, model.config().pixels());
    let conds = vec![terms.target.clone(); seeds.len()];
    let mut states = Vec::new();
    let mut timesteps = Vec::new();
    for (s, &(t_from, t_to)) in steps.iter().enumerate().take(last + 1) {
        if eligible.contains(&s) {
            states.push(x.clone());
            timesteps.extend(std::iter::repeat_n(t_from, seeds.len()));
        }
        if s < last {
            let eps = guided_noise(model, x.view(), t_from, &conds, spec.sampler.cfg_scale);
            x = ddim_step(&x, &eps, t_from, t_to, sched);
        }
    }
    let views: Vec<_> = states.iter().map(|a| a.view()).collect();
    let x = ndarray::concatenate(Axis(0), &views).expect("equal widths");
    let target = compose_target_score(model, x.view(), &timesteps, terms);
    Ok(StatePool { x, timesteps, target })
}

/// Trains a text-defined slider against the frozen `model`.
pub fn train_text_slider(model: &DenoiserModel, spec: &SliderSpec) -> Result<SliderOutcome> {
    spec.validate(model.vocab())?;
    let layers = resolve_layers(model, &spec.layers);
    let terms = spec.terms(model.vocab())?;
    let (mut adaptor, trainable) = init_delta(model, &layers, spec.rank, spec.delta_form, spec.seed)?;
    let pool = build_pool(model, spec, &terms)?;
    let mut factors = adaptor_factors::<f32>(&adaptor);
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let conds = vec![terms.target.clone(); spec.batch];
    let mut losses = Vec::with_capacity(spec.epochs);
    let rows: Vec<usize> = (0..pool.x.nrows()).collect();
    for epoch in 0..spec.epochs {
        let pick: Vec<usize> = (0..spec.batch).map(|_| *rows.choose(&mut rng).expect("non-empty pool")).collect();
        let x = pool.x.select(Axis(0), &pick);
        let target = pool.target.select(Axis(0), &pick);
        let ts: Vec<usize> = pick.iter().map(|&i| pool.timesteps[i]).collect();
        let (loss, grads) = adaptor_loss_grad(model, &factors, &layers, 1.0, x.view(), &ts, &conds, target.view())?;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        adam.step(&mut factors, &keep_trainable(grads, &trainable), spec.lr);
        losses.push(loss);
        log::debug!("slider {} epoch {epoch}: loss {loss:.4}", spec.name);
    }
    store_factors(&mut adaptor, &factors);
    adaptor.name = spec.name.clone();
    adaptor.metadata = BTreeMap::from([
        ("kind".to_string(), json!("text")),
        ("spec_hash".to_string(), json!(spec.hash())),
        ("spec".to_string(), serde_json::to_value(spec)?),
        ("target_layers".to_string(), json!(layers)),
        ("epochs".to_string(), json!(spec.epochs)),
        ("final_loss".to_string(), json!(losses.last())),
    ]);
    Ok(SliderOutcome { adaptor, losses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTrainConfig {
    pub name: String,
    pub rank: usize,
    #[serde(default)]
    pub delta_form: DeltaForm,
    #[serde(default)]
    pub layers: Vec<String>,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for PairTrainConfig {
    fn default() -> Self {
        Self {
            name: "pairs".into(),
            rank: 4,
            delta_form: DeltaForm::LowRank,
            layers: Vec::new(),
            epochs: 300,
            lr: 2e-3,
            batch: 8,
            seed: 0,
        }
    }
}

/// Trains a slider from `(negative, positive)` image pairs: the negative
/// pole is denoised at `α = −1`, the positive one at `α = +1`, with shared
/// `t` and noise per pair.
pub fn train_image_slider(model: &DenoiserModel, pairs: &ImagePairSet, config: &PairTrainConfig) -> Result<SliderOutcome> {
    check_common(config.rank, config.epochs, config.batch, config.lr)?;
    let cfg = model.config();
    if pairs.is_empty() {
        return Err(Error::Validation("empty pair set".into()));
    }
    for (a, b) in &pairs.pairs {
        for img in [a, b] {
            if img.pixels().dim() != (cfg.image_size, cfg.image_size, cfg.channels) {
                return Err(Error::Shape(format!("pair image {:?}", img.pixels().dim())));
            }
        }
    }
    let cond = match &pairs.guidance {
        Some(text) => model.vocab().phrase(text)?,
        None => Phrase::null(),
    };
    let layers = resolve_layers(model, &config.layers);
    let (mut adaptor, trainable) = init_delta(model, &layers, config.rank, config.delta_form, config.seed)?;
    let neg: Vec<_> = pairs.pairs.iter().map(|(a, _)| a).collect();
    let pos: Vec<_> = pairs.pairs.iter().map(|(_, b)| b).collect();
    let (neg, pos) = (stack_images::<f32>(&neg), stack_images::<f32>(&pos));
    let sched = model.schedule();
    let mut factors = adaptor_factors::<f32>(&adaptor);
    let mut adam = Adam::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let conds = vec![cond; config.batch];
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let pick: Vec<usize> = (0..config.batch).map(|_| rng.random_range(0..pairs.len())).collect();
        let ts: Vec<usize> = (0..config.batch).map(|_| rng.random_range(1..=sched.len())).collect();
        let eps = Array2::from_shape_fn((config.batch, cfg.pixels()), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        });
        let noised = |x0: &Array2<f32>| -> Array2<f32> {
            let x0 = x0.select(Axis(0), &pick);
            let mut out = Array2::zeros(x0.raw_dim());
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                row.assign(&forward_noise_array(x0.row(i), ts[i], eps.row(i), sched).expect("timestep in range"));
            }
            out
        };
        let (xa, xb) = (noised(&neg), noised(&pos));
        let (la, mut grads) = adaptor_loss_grad(model, &factors, &layers, -1.0, xa.view(), &ts, &conds, eps.view())?;
        let (lb, gb) = adaptor_loss_grad(model, &factors, &layers, 1.0, xb.view(), &ts, &conds, eps.view())?;
        grads.merge(gb);
        let loss = la + lb;
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch, loss });
        }
        adam.step(&mut factors, &keep_trainable(grads, &trainable), config.lr);
        losses.push(loss);
        log::debug!("pair slider {} epoch {epoch}: loss {loss:.4}", config.name);
    }
    store_factors(&mut adaptor, &factors);
    adaptor.name = config.name.clone();
    adaptor.metadata = BTreeMap::from([
        ("kind".to_string(), json!("pairs")),
        ("config".to_string(), serde_json::to_value(config)?),
        ("pairs".to_string(), json!(pairs.len())),
        ("guidance".to_string(), json!(pairs.guidance)),
        ("target_layers".to_string(), json!(layers)),
        ("epochs".to_string(), json!(config.epochs)),
        ("final_loss".to_string(), json!(losses.last())),
    ]);
    Ok(SliderOutcome { adaptor, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;
    use crate::schedule::ScheduleConfig;
    use ndarray::Array2;

    fn small_model() -> DenoiserModel {
        let cfg = DenoiserConfig {
            image_size: 8,
            widths: vec![4, 8],
            heads: 2,
            emb_dim: 8,
            cond_dim: 4,
            schedule: ScheduleConfig::linear_scaled(20),
            ..DenoiserConfig::default()
        };
        let mut m = DenoiserModel::new(cfg, 1).unwrap();
        // Non-zero output layers so conditions matter.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for p in m.params_mut().values_mut() {
            p.mapv_inplace(|v| v + rng.random_range(-0.1..0.1));
        }
        m
    }

    fn spec() -> SliderSpec {
        SliderSpec {
            name: "size".into(),
            enhance: "large".into(),
            suppress: "small".into(),
            preserve: vec!["circle".into(), "square".into()],
            rank: 2,
            epochs: 3,
            batch: 4,
            trajectories: 3,
            sampler: SamplerConfig { steps: 10, cfg_scale: 2.0 },
            ..SliderSpec::default()
        }
    }

    #[test]
    fn terms_concatenate_preservation_phrases() {
        let v = Vocabulary::standard();
        let t = spec().terms(&v).unwrap();
        assert_eq!(t.pairs.len(), 2);
        assert_eq!(t.pairs[0].0, v.phrase("large circle").unwrap());
        assert_eq!(t.pairs[1].1, v.phrase("small square").unwrap());
        let single = SliderSpec { preserve: vec![], ..spec() }.terms(&v).unwrap();
        assert_eq!(single.pairs, vec![(v.phrase("large").unwrap(), v.phrase("small").unwrap())]);
    }

    #[test]
    fn spec_validation() {
        let v = Vocabulary::standard();
        assert!(spec().validate(&v).is_ok());
        let same = SliderSpec { suppress: "large".into(), ..spec() };
        assert!(matches!(same.validate(&v), Err(Error::Validation(_))));
        assert!(SliderSpec { eta: -1.0, ..spec() }.validate(&v).is_err());
        assert!(SliderSpec { enhance: "huge".into(), ..spec() }.validate(&v).is_err());
        assert!(SliderSpec { horizon: (0.9, 0.2), ..spec() }.validate(&v).is_err());
        let back = SliderSpec::from_json(&spec().to_json().unwrap()).unwrap();
        assert_eq!(back, spec());
        assert_eq!(back.hash(), spec().hash());
        assert_ne!(SliderSpec { eta: 2.0, ..spec() }.hash(), spec().hash());
    }

    #[test]
    fn target_reduces_to_base_when_guidance_is_off() {
        let m = small_model();
        let v = m.vocab();
        let x = Array2::from_shape_fn((2, m.config().pixels()), |(i, j)| ((i * 7 + j) % 11) as f32 / 11.0 - 0.5);
        let ts = [5, 12];
        let base = m.predict_noise(x.view(), &ts, &[Phrase::null(), Phrase::null()]);
        let mut terms = spec().terms(v).unwrap();
        terms.eta = 0.0;
        assert_eq!(compose_target_score(&m, x.view(), &ts, &terms), base);
        let mut cancel = spec().terms(v).unwrap();
        cancel.pairs = vec![(v.phrase("large").unwrap(), v.phrase("large").unwrap())];
        assert_eq!(compose_target_score(&m, x.view(), &ts, &cancel), base);
        let guided = compose_target_score(&m, x.view(), &ts, &spec().terms(v).unwrap());
        assert_ne!(guided, base);
    }

    #[test]
    fn normalization_divides_the_guidance() {
        let m = small_model();
        let x = Array2::from_elem((1, m.config().pixels()), 0.2f32);
        let terms = spec().terms(m.vocab()).unwrap();
        let base = compose_target_score(&m, x.view(), &[7], &TargetTerms { eta: 0.0, ..terms.clone() });
        let summed = compose_target_score(&m, x.view(), &[7], &terms);
        let averaged = compose_target_score(&m, x.view(), &[7], &TargetTerms { normalize: true, ..terms });
        for ((b, s), a) in base.iter().zip(&summed).zip(&averaged) {
            assert!(((s - b) / 2.0 - (a - b)).abs() < 1e-5);
        }
    }

    #[test]
    fn adaptor_gradient_matches_finite_differences() {
        let m32 = small_model();
        let m = m32.cast::<f64>();
        let layers = vec!["cond.proj".to_string(), "mid.attn.v".to_string(), "down1.mod".to_string()];
        let mut adaptor = init_adaptor(&m32, &layers, 1, 3).unwrap();
        for e in adaptor.entries.values_mut() {
            e.b.mapv_inplace(|_| 0.3);
        }
        let factors = adaptor_factors::<f64>(&adaptor);
        assert!(factors.values().map(|f| f.len()).sum::<usize>() <= 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let px = m.config().pixels();
        let x = Array2::from_shape_fn((2, px), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((2, px), |_| rng.random_range(-1.0..1.0));
        let ts = [3, 15];
        let conds = vec![m.vocab().phrase("large").unwrap(), Phrase::null()];
        for alpha in [1.0, -0.7] {
            let loss_at = |f: &BTreeMap<String, Array2<f64>>| {
                adaptor_loss_grad(&m, f, &layers, alpha, x.view(), &ts, &conds, target.view()).unwrap().0
            };
            let (_, grads) = adaptor_loss_grad(&m, &factors, &layers, alpha, x.view(), &ts, &conds, target.view()).unwrap();
            assert!(grads.map.keys().all(|k| k.ends_with(".A") || k.ends_with(".B")));
            let h = 1e-6;
            for (key, f) in &factors {
                let g = &grads.map[key];
                for idx in [(0, 0), (f.nrows() - 1, f.ncols() - 1)] {
                    let mut plus = factors.clone();
                    plus.get_mut(key).unwrap()[idx] += h;
                    let mut minus = factors.clone();
                    minus.get_mut(key).unwrap()[idx] -= h;
                    let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
                    let a = g[idx];
                    assert!(
                        (numeric - a).abs() <= 1e-3 * numeric.abs().max(a.abs()).max(1e-6),
                        "{key}{idx:?}: numeric {numeric} analytic {a}"
                    );
                }
            }
        }
    }

    #[test]
    fn text_training_is_deterministic_and_leaves_the_base_alone() {
        let m = small_model();
        let before = m.clone();
        let a = train_text_slider(&m, &spec()).unwrap();
        let b = train_text_slider(&m, &spec()).unwrap();
        assert_eq!(m, before);
        assert_eq!(a.adaptor, b.adaptor);
        assert_eq!(a.losses.len(), 3);
        assert_eq!(a.adaptor.metadata["spec_hash"], json!(spec().hash()));
        assert!(a.adaptor.entries.values().any(|e| e.b.iter().any(|v| *v != 0.0)));
    }

    #[test]
    fn zero_eta_keeps_the_adaptor_a_no_op() {
        let m = small_model();
        let out = train_text_slider(&m, &SliderSpec { eta: 0.0, ..spec() }).unwrap();
        assert!(out.adaptor.entries.values().all(|e| e.b.iter().all(|v| *v == 0.0)));
        assert!(out.losses.iter().all(|l| *l == 0.0));
    }

    #[test]
    fn full_rank_form_trains_only_the_free_factor() {
        let m = small_model();
        let out = train_text_slider(&m, &SliderSpec { delta_form: DeltaForm::Full, ..spec() }).unwrap();
        for (id, e) in &out.adaptor.entries {
            let (d, k) = m.layer_dims(id).unwrap();
            if d <= k {
                assert_eq!(e.b, Array2::<f32>::eye(d), "{id}");
            } else {
                assert_eq!(e.a, Array2::<f32>::eye(k), "{id}");
            }
        }
        out.adaptor.validate(&m).unwrap();
    }

    #[test]
    fn pair_training_with_identical_poles() {
        let m = small_model();
        let img = crate::image::ImageSample::filled(8, 8, 3, 0.25);
        let pairs = ImagePairSet::new(vec![(img.clone(), img)], None).unwrap();
        let cfg = PairTrainConfig {
            rank: 1,
            epochs: 2,
            batch: 2,
            ..PairTrainConfig::default()
        };
        let before = m.clone();
        let a = train_image_slider(&m, &pairs, &cfg).unwrap();
        assert_eq!(a.adaptor, train_image_slider(&m, &pairs, &cfg).unwrap().adaptor);
        assert_eq!(m, before);
        assert_eq!(a.losses.len(), 2);
        let wrong = ImagePairSet::new(
            vec![(crate::image::ImageSample::filled(4, 4, 3, 0.0), crate::image::ImageSample::filled(4, 4, 3, 0.0))],
            None,
        )
        .unwrap();
        assert!(matches!(train_image_slider(&m, &wrong, &cfg), Err(Error::Shape(_))));
    }
}
