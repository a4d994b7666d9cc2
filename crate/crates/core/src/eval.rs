//! Oracle-based measurement: attribute change, structural distance,
//! interference, α and SDEdit sweeps, the three-arm ablation and the
//! analytic Gaussian check of the composed target.
//!
//! Every aggregate is computed from per-seed records sorted by seed, so a
//! report does not depend on the order in which seeds were evaluated.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataset::{measure, Hue, Shape};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::image::ImageSample;
use crate::inference::{BasePrefix, GenerationConfig};
use crate::lora::{apply, LoRAAdaptor, SliderHandle};
use crate::model::DenoiserModel;
use crate::slider::{compose_target_score, TargetTerms};
use crate::vocab::Phrase;

pub const BOOTSTRAP_RESAMPLES: usize = 1000;
pub const BOOTSTRAP_SEED: u64 = 0xb007;

/// Scalar attribute read by an oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    /// Foreground area in pixels.
    Size,
    Brightness,
}

impl Attribute {
    pub fn measure(self, image: &ImageSample) -> f64 {
        let m = measure(image);
        match self {
            Attribute::Size => m.area,
            Attribute::Brightness => m.brightness,
        }
    }
}

/// Categorical attribute that an edit should leave alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protected {
    Shape,
    Hue,
}

impl Protected {
    pub fn label(self, image: &ImageSample) -> usize {
        let m = measure(image);
        match self {
            Protected::Shape => Shape::ALL.iter().position(|s| *s == m.shape).expect("known shape"),
            Protected::Hue => Hue::ALL.iter().position(|h| *h == m.hue).expect("known hue"),
        }
    }
}

/// Mean with a 95% percentile-bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Statistic {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
}

impl Statistic {
    pub fn of(values: &[f64]) -> Self {
        let (ci_low, ci_high) = bootstrap_ci(values, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED);
        Self {
            mean: mean(values),
            ci_low,
            ci_high,
            n: values.len(),
        }
    }

    pub fn excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// 2.5% and 97.5% quantiles of resampled means.
pub fn bootstrap_ci(values: &[f64], resamples: usize, seed: u64) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = values.len();
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (resamples - 1) as f64).round() as usize).min(resamples - 1)];
    (at(0.025), at(0.975))
}

/// One-sided paired bootstrap: the fraction of resampled mean differences
/// `a − b` that are not negative. Small values mean `a < b` reliably.
pub fn paired_bootstrap_p(a: &[f64], b: &[f64], resamples: usize, seed: u64) -> Result<f64> {
    check_paired(a.len(), b.len())?;
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = diff.len();
    let hits = (0..resamples)
        .filter(|_| (0..n).map(|_| diff[rng.random_range(0..n)]).sum::<f64>() >= 0.0)
        .count();
    Ok((hits as f64 + 1.0) / (resamples as f64 + 1.0))
}

fn check_paired(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} base images vs {b} edited")));
    }
    if a == 0 {
        return Err(Error::Argument("no image pairs".into()));
    }
    Ok(())
}

/// Mean of `oracle(edited) − oracle(base)`.
pub fn delta_attribute(base: &[ImageSample], edited: &[ImageSample], attribute: Attribute) -> Result<Statistic> {
    check_paired(base.len(), edited.len())?;
    let d: Vec<f64> = base
        .iter()
        .zip(edited)
        .map(|(b, e)| attribute.measure(e) - attribute.measure(b))
        .collect();
    Ok(Statistic::of(&d))
}

/// Patch side of the coarse term.
pub const PATCH: usize = 4;

/// `½·(mean |a − b| + mean |patch-mean(a) − patch-mean(b)|)` over 4×4 patches.
/// Symmetric, zero only for identical images, at most 2 for images in
/// `[−1, 1]`.
pub fn image_distance(a: &ImageSample, b: &ImageSample) -> f64 {
    assert_eq!(a.pixels().dim(), b.pixels().dim(), "paired images differ in shape");
    let (h, w, c) = a.pixels().dim();
    let pixel = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .sum::<f64>()
        / a.len() as f64;
    let (ph, pw) = (h.div_ceil(PATCH), w.div_ceil(PATCH));
    let mut coarse = 0.0;
    for py in 0..ph {
        for px in 0..pw {
            for ch in 0..c {
                let (mut sa, mut sb, mut n) = (0.0, 0.0, 0.0);
                for y in py * PATCH..((py + 1) * PATCH).min(h) {
                    for x in px * PATCH..((px + 1) * PATCH).min(w) {
                        sa += a.pixels()[[y, x, ch]] as f64;
                        sb += b.pixels()[[y, x, ch]] as f64;
                        n += 1.0;
                    }
                }
                coarse += ((sa - sb) / n).abs();
            }
        }
    }
    coarse /= (ph * pw * c) as f64;
    0.5 * (pixel + coarse)
}

pub fn structural_distance(base: &[ImageSample], edited: &[ImageSample]) -> Result<Statistic> {
    check_paired(base.len(), edited.len())?;
    let d: Vec<f64> = base.iter().zip(edited).map(|(a, b)| image_distance(a, b)).collect();
    Ok(Statistic::of(&d))
}

fn flips(base: &ImageSample, edited: &ImageSample, protected: &[Protected]) -> bool {
    protected.iter().any(|p| p.label(base) != p.label(edited))
}

/// Fraction of pairs where any protected label changes.
pub fn interference(base: &[ImageSample], edited: &[ImageSample], protected: &[Protected]) -> Result<f64> {
    check_paired(base.len(), edited.len())?;
    if protected.is_empty() {
        return Err(Error::Argument("no protected oracles".into()));
    }
    let n = base.iter().zip(edited).filter(|(b, e)| flips(b, e, protected)).count();
    Ok(n as f64 / base.len() as f64)
}

/// Per-seed measurements of one base/edited pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub seed: u64,
    pub base: f64,
    pub edited: f64,
    pub distance: f64,
    pub flipped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub attribute: Attribute,
    pub protected: Vec<Protected>,
    pub delta_attribute: Statistic,
    pub structural_distance: Statistic,
    pub interference: f64,
    pub records: Vec<PairRecord>,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Measures every pair; records are sorted by seed before aggregation.
    pub fn from_pairs(
        seeds: &[u64],
        base: &[ImageSample],
        edited: &[ImageSample],
        attribute: Attribute,
        protected: &[Protected],
        config: serde_json::Value,
    ) -> Result<Self> {
        check_paired(base.len(), edited.len())?;
        check_paired(seeds.len(), base.len())?;
        if protected.is_empty() {
            return Err(Error::Argument("no protected oracles".into()));
        }
        let mut records: Vec<PairRecord> = seeds
            .iter()
            .zip(base.iter().zip(edited))
            .map(|(&seed, (b, e))| PairRecord {
                seed,
                base: attribute.measure(b),
                edited: attribute.measure(e),
                distance: image_distance(b, e),
                flipped: flips(b, e, protected),
            })
            .collect();
        records.sort_by_key(|r| r.seed);
        Ok(Self::from_records(records, attribute, protected, config))
    }

    fn from_records(records: Vec<PairRecord>, attribute: Attribute, protected: &[Protected], config: serde_json::Value) -> Self {
        let deltas: Vec<f64> = records.iter().map(|r| r.edited - r.base).collect();
        let dists: Vec<f64> = records.iter().map(|r| r.distance).collect();
        let flipped = records.iter().filter(|r| r.flipped).count();
        Self {
            attribute,
            protected: protected.to_vec(),
            delta_attribute: Statistic::of(&deltas),
            structural_distance: Statistic::of(&dists),
            interference: flipped as f64 / records.len() as f64,
            records,
            config,
        }
    }

    pub fn flip_indicators(&self) -> Vec<f64> {
        self.records.iter().map(|r| if r.flipped { 1.0 } else { 0.0 }).collect()
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        for r in &self.records {
            w.serialize(r).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Generates base (α = 0) and edited images for `seeds` with one condition.
pub fn paired_generations(
    model: &DenoiserModel,
    handles: &[SliderHandle<'_>],
    condition: &Phrase,
    seeds: &[u64],
    config: &GenerationConfig,
) -> Result<(Vec<ImageSample>, Vec<ImageSample>)> {
    let conds = vec![condition.clone(); seeds.len()];
    let mut prefix = BasePrefix::new(model, &conds, seeds, config.sampler())?;
    prefix.advance(model, config.gate()?)?;
    let edited = prefix.finish(model, &apply(model, handles)?)?;
    prefix.advance(model, config.steps)?;
    let base = prefix.finish(model, model)?;
    Ok((base, edited))
}

/// Evaluates one slider at one strength against the base model.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_slider(
    model: &DenoiserModel,
    adaptor: &LoRAAdaptor,
    alpha: f64,
    condition: &Phrase,
    seeds: &[u64],
    config: &GenerationConfig,
    attribute: Attribute,
    protected: &[Protected],
) -> Result<EvalReport> {
    let h = [SliderHandle::new(adaptor, alpha)?];
    let (base, edited) = paired_generations(model, &h, condition, seeds, config)?;
    let snapshot = serde_json::json!({
        "slider": adaptor.name,
        "alpha": alpha,
        "condition": model.vocab().render(condition),
        "generation": config,
    });
    EvalReport::from_pairs(seeds, &base, &edited, attribute, protected, snapshot)
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSweep {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Mean oracle value per alpha.
    pub means: Vec<f64>,
    /// `values[i][j]`: seed `i` at alpha `j`.
    pub values: Vec<Vec<f64>>,
    /// Seeds whose curve strictly increases with alpha.
    pub increasing: f64,
    /// Seeds whose curve strictly decreases with alpha.
    pub decreasing: f64,
    /// Largest over smallest per-alpha mean.
    pub ratio: f64,
}

impl AlphaSweep {
    pub fn monotone_fraction(&self) -> f64 {
        self.increasing.max(self.decreasing)
    }
}

/// Oracle values over `alphas` (sorted ascending) for each seed. All alphas
/// share the base-only prefix of each trajectory.
#[allow(clippy::too_many_arguments)]
pub fn alpha_sweep(
    model: &DenoiserModel,
    adaptor: &LoRAAdaptor,
    alphas: &[f64],
    condition: &Phrase,
    seeds: &[u64],
    config: &GenerationConfig,
    attribute: Attribute,
) -> Result<AlphaSweep> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(Error::Argument("alpha sweep needs alphas and seeds".into()));
    }
    let mut alphas = alphas.to_vec();
    alphas.sort_by(f64::total_cmp);
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    let conds = vec![condition.clone(); seeds.len()];
    let mut prefix = BasePrefix::new(model, &conds, &seeds, config.sampler())?;
    prefix.advance(model, config.gate()?)?;
    let mut values = vec![Vec::with_capacity(alphas.len()); seeds.len()];
    for &alpha in &alphas {
        let view = apply(model, &[SliderHandle::new(adaptor, alpha)?])?;
        for (row, img) in values.iter_mut().zip(prefix.finish(model, &view)?) {
            row.push(attribute.measure(&img));
        }
    }
    let means: Vec<f64> = (0..alphas.len())
        .map(|j| mean(&values.iter().map(|r| r[j]).collect::<Vec<_>>()))
        .collect();
    let frac = |pred: fn(f64, f64) -> bool| {
        values.iter().filter(|r| r.windows(2).all(|w| pred(w[0], w[1]))).count() as f64 / seeds.len() as f64
    };
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(AlphaSweep {
        increasing: if alphas.len() > 1 { frac(|a, b| b > a) } else { 0.0 },
        decreasing: if alphas.len() > 1 { frac(|a, b| b < a) } else { 0.0 },
        ratio: hi / lo,
        alphas,
        seeds,
        means,
        values,
    })
}

/// Rank correlation with a two-sided p-value from the t approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Trend {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman's ρ with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<Trend> {
    check_paired(x.len(), y.len())?;
    let n = x.len();
    if n < 3 {
        return Err(Error::Argument("spearman needs at least 3 points".into()));
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y));
    let df = (n - 2) as f64;
    let p_value = if rho.abs() >= 1.0 {
        0.0
    } else {
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        2.0 * (1.0 - dist.cdf(t.abs()))
    };
    Ok(Trend { rho, p_value, n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeditPoint {
    pub frac: f64,
    pub delta_attribute: Statistic,
    pub abs_delta: Statistic,
    pub structural_distance: Statistic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeditSweep {
    pub alpha: f64,
    pub points: Vec<SdeditPoint>,
    /// ρ between frac and per-image structural distance to the α = 0 image.
    pub distance_trend: Trend,
    /// ρ between frac and per-image |Δ-attribute|.
    pub delta_trend: Trend,
}

/// Edits at one alpha over gate fractions (sorted ascending), each against
/// the α = 0 image of the same seed.
#[allow(clippy::too_many_arguments)]
pub fn sdedit_sweep(
    model: &DenoiserModel,
    adaptor: &LoRAAdaptor,
    alpha: f64,
    fracs: &[f64],
    condition: &Phrase,
    seeds: &[u64],
    config: &GenerationConfig,
    attribute: Attribute,
) -> Result<SdeditSweep> {
    if fracs.is_empty() || seeds.is_empty() {
        return Err(Error::Argument("sdedit sweep needs fractions and seeds".into()));
    }
    let mut fracs = fracs.to_vec();
    fracs.sort_by(f64::total_cmp);
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    let conds = vec![condition.clone(); seeds.len()];
    let view = apply(model, &[SliderHandle::new(adaptor, alpha)?])?;
    let mut prefix = BasePrefix::new(model, &conds, &seeds, config.sampler())?;
    let mut edited = Vec::with_capacity(fracs.len());
    for &frac in &fracs {
        prefix.advance(model, config.with_frac(frac).gate()?)?;
        edited.push(prefix.finish(model, &view)?);
    }
    prefix.advance(model, config.steps)?;
    let base = prefix.finish(model, model)?;
    let base_values: Vec<f64> = base.iter().map(|b| attribute.measure(b)).collect();
    let (mut xs, mut dist_all, mut delta_all) = (Vec::new(), Vec::new(), Vec::new());
    let mut points = Vec::with_capacity(fracs.len());
    for (&frac, imgs) in fracs.iter().zip(&edited) {
        let deltas: Vec<f64> = imgs.iter().zip(&base_values).map(|(e, b)| attribute.measure(e) - b).collect();
        let abs: Vec<f64> = deltas.iter().map(|d| d.abs()).collect();
        let dists: Vec<f64> = imgs.iter().zip(&base).map(|(e, b)| image_distance(b, e)).collect();
        xs.extend(std::iter::repeat_n(frac, seeds.len()));
        dist_all.extend_from_slice(&dists);
        delta_all.extend_from_slice(&abs);
        points.push(SdeditPoint {
            frac,
            delta_attribute: Statistic::of(&deltas),
            abs_delta: Statistic::of(&abs),
            structural_distance: Statistic::of(&dists),
        });
    }
    let (distance_trend, delta_trend) = if xs.len() >= 3 {
        (spearman(&xs, &dist_all)?, spearman(&xs, &delta_all)?)
    } else {
        let none = Trend { rho: 0.0, p_value: 1.0, n: xs.len() };
        (none, none)
    };
    Ok(SdeditSweep {
        alpha,
        points,
        distance_trend,
        delta_trend,
    })
}

// ---------------------------------------------------------------------------
// Ablation

/// One trained variant in the ablation table.
pub struct AblationArm<'a> {
    pub name: String,
    pub adaptor: &'a LoRAAdaptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    /// Strength at which this arm's Δ-attribute matches the reference.
    pub alpha: f64,
    pub delta_attribute: Statistic,
    pub structural_distance: Statistic,
    pub interference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub reference: String,
    pub target_delta: f64,
    pub rows: Vec<AblationRow>,
    /// Paired-bootstrap p-value for `interference(arm) < interference(other)`
    /// keyed `"arm<other"`.
    pub interference_p: BTreeMap<String, f64>,
    /// Paired-bootstrap p-value for `distance(arm) < distance(other)`.
    pub distance_p: BTreeMap<String, f64>,
    #[serde(skip)]
    pub reports: Vec<EvalReport>,
}

impl AblationTable {
    pub fn row(&self, arm: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.arm == arm)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["arm", "alpha", "delta_attribute", "delta_ci_low", "delta_ci_high", "structural_distance", "distance_ci_low", "distance_ci_high", "interference"])
            .map_err(csv_error)?;
        for r in &self.rows {
            let d = &r.delta_attribute;
            let s = &r.structural_distance;
            w.write_record([
                r.arm.clone(),
                r.alpha.to_string(),
                d.mean.to_string(),
                d.ci_low.to_string(),
                d.ci_high.to_string(),
                s.mean.to_string(),
                s.ci_low.to_string(),
                s.ci_high.to_string(),
                r.interference.to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub generation: GenerationConfig,
    pub attribute: Attribute,
    /// Strength of the reference arm.
    pub reference_alpha: f64,
    /// Largest strength searched when matching Δ.
    pub max_alpha: f64,
    /// Bisection steps of the matching search.
    pub match_iterations: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            generation: GenerationConfig::default(),
            attribute: Attribute::Size,
            reference_alpha: 1.0,
            max_alpha: 4.0,
            match_iterations: 8,
        }
    }
}

/// Strength at which `adaptor` reaches `target` mean Δ on the calibration
/// prefix, by bisection on `[0, max_alpha]` (Δ assumed monotone in α).
fn match_alpha(
    model: &DenoiserModel,
    adaptor: &LoRAAdaptor,
    prefix: &BasePrefix,
    base_values: &[f64],
    target: f64,
    config: &AblationConfig,
) -> Result<f64> {
    let delta_at = |alpha: f64| -> Result<f64> {
        let view = apply(model, &[SliderHandle::new(adaptor, alpha)?])?;
        let imgs = prefix.finish(model, &view)?;
        Ok(mean(&imgs.iter().zip(base_values).map(|(e, b)| config.attribute.measure(e) - b).collect::<Vec<_>>()))
    };
    let sign = target.signum();
    let (mut lo, mut hi) = (0.0, config.max_alpha);
    if sign * delta_at(hi)? < sign * target {
        return Ok(hi);
    }
    for _ in 0..config.match_iterations {
        let mid = 0.5 * (lo + hi);
        if sign * delta_at(mid)? < sign * target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Evaluates every arm at a strength whose Δ-attribute matches the
/// reference arm's Δ at `reference_alpha`. Strengths are matched on
/// `calibration_seeds` and reported on `seeds`.
pub fn run_ablation(
    model: &DenoiserModel,
    arms: &[AblationArm<'_>],
    reference: &str,
    condition: &Phrase,
    seeds: &[u64],
    calibration_seeds: &[u64],
    protected: &[Protected],
    config: &AblationConfig,
) -> Result<AblationTable> {
    if !arms.iter().any(|a| a.name == reference) {
        return Err(Error::Argument(format!("reference arm `{reference}` missing")));
    }
    let gen = &config.generation;
    let calib_conds = vec![condition.clone(); calibration_seeds.len()];
    let mut calib = BasePrefix::new(model, &calib_conds, calibration_seeds, gen.sampler())?;
    calib.advance(model, gen.gate()?)?;
    let calib_base: Vec<f64> = {
        let mut full = calib.clone();
        full.advance(model, gen.steps)?;
        full.finish(model, model)?.iter().map(|i| config.attribute.measure(i)).collect()
    };
    let ref_adaptor = arms.iter().find(|a| a.name == reference).expect("checked").adaptor;
    let ref_view = apply(model, &[SliderHandle::new(ref_adaptor, config.reference_alpha)?])?;
    let target_delta = mean(
        &calib
            .finish(model, &ref_view)?
            .iter()
            .zip(&calib_base)
            .map(|(e, b)| config.attribute.measure(e) - b)
            .collect::<Vec<_>>(),
    );

    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    let conds = vec![condition.clone(); sorted.len()];
    let mut prefix = BasePrefix::new(model, &conds, &sorted, gen.sampler())?;
    let mut full = prefix.clone();
    full.advance(model, gen.steps)?;
    let base = full.finish(model, model)?;
    prefix.advance(model, gen.gate()?)?;

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for arm in arms {
        let alpha = if arm.name == reference {
            config.reference_alpha
        } else {
            match_alpha(model, arm.adaptor, &calib, &calib_base, target_delta, config)?
        };
        log::info!("ablation arm {}: alpha {alpha:.3}", arm.name);
        let view = apply(model, &[SliderHandle::new(arm.adaptor, alpha)?])?;
        let edited = prefix.finish(model, &view)?;
        let snapshot = serde_json::json!({ "arm": arm.name, "alpha": alpha, "generation": gen });
        let report = EvalReport::from_pairs(&sorted, &base, &edited, config.attribute, protected, snapshot)?;
        rows.push(AblationRow {
            arm: arm.name.clone(),
            alpha,
            delta_attribute: report.delta_attribute,
            structural_distance: report.structural_distance,
            interference: report.interference,
        });
        reports.push(report);
    }
    let mut interference_p = BTreeMap::new();
    let mut distance_p = BTreeMap::new();
    for (i, a) in reports.iter().enumerate() {
        for (j, b) in reports.iter().enumerate() {
            if i == j {
                continue;
            }
            let key = format!("{}<{}", rows[i].arm, rows[j].arm);
            let p = paired_bootstrap_p(&a.flip_indicators(), &b.flip_indicators(), BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED)?;
            interference_p.insert(key.clone(), p);
            let da: Vec<f64> = a.records.iter().map(|r| r.distance).collect();
            let db: Vec<f64> = b.records.iter().map(|r| r.distance).collect();
            distance_p.insert(key, paired_bootstrap_p(&da, &db, BOOTSTRAP_RESAMPLES, BOOTSTRAP_SEED)?);
        }
    }
    Ok(AblationTable {
        reference: reference.to_string(),
        target_delta,
        rows,
        interference_p,
        distance_p,
        reports,
    })
}

// ---------------------------------------------------------------------------
// Gaussian score check

/// One-pixel predictor whose condition `c` stands for `N(μ_c, 1)`: it
/// returns `σ·(x − μ_c)`, the noise estimate implied by that density's
/// score `−(x − μ_c)` at noise level `σ`.
#[derive(Debug, Clone)]
pub struct GaussianStub {
    pub means: BTreeMap<Phrase, f64>,
    pub sigma: f64,
}

impl NoisePredictor<f64> for GaussianStub {
    fn predict_noise(&self, x: ArrayView2<f64>, _: &[usize], conds: &[Phrase]) -> Array2<f64> {
        let mut out = x.to_owned();
        for (mut row, c) in out.rows_mut().into_iter().zip(conds) {
            let mu = self.means[c];
            row.mapv_inplace(|v| self.sigma * (v - mu));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianCheck {
    pub cases: usize,
    pub max_abs_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the composed target against the tilted density
/// `p(x|c_t)·(p(x|c₊)/p(x|c₋))^η`. For unit-variance Gaussians that is again
/// a unit-variance Gaussian with mean `μ_t + η(μ₊ − μ₋)`, so the expected
/// noise estimate is `σ·(x − μ_t − η(μ₊ − μ₋))`.
pub fn gaussian_score_check(cases: usize, seed: u64) -> GaussianCheck {
    const TOLERANCE: f64 = 1e-6;
    let (target, plus, minus) = (Phrase::new(vec![1]), Phrase::new(vec![2]), Phrase::new(vec![3]));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let (mt, mp, mm) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let sigma: f64 = rng.random_range(0.05..1.0);
        let eta: f64 = rng.random_range(0.0..3.0);
        let stub = GaussianStub {
            means: BTreeMap::from([(target.clone(), mt), (plus.clone(), mp), (minus.clone(), mm)]),
            sigma,
        };
        let x: Array2<f64> = Array2::from_shape_fn((8, 1), |_| rng.random_range(-5.0..5.0));
        let terms = TargetTerms {
            target: target.clone(),
            pairs: vec![(plus.clone(), minus.clone())],
            eta,
            normalize: false,
        };
        let got = compose_target_score(&stub, x.view(), &[1; 8], &terms);
        let tilted_mean = mt + eta * (mp - mm);
        for (g, xv) in got.iter().zip(x.iter()) {
            worst = worst.max((g - sigma * (xv - tilted_mean)).abs());
        }
    }
    GaussianCheck {
        cases,
        max_abs_error: worst,
        tolerance: TOLERANCE,
        passed: worst <= TOLERANCE,
    }
}

// ---------------------------------------------------------------------------
// Output

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_path(path).map_err(csv_error)?)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

impl AlphaSweep {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["alpha", "mean"]).map_err(csv_error)?;
        for (a, m) in self.alphas.iter().zip(&self.means) {
            w.write_record([a.to_string(), m.to_string()]).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_svg(&self, path: &Path, attribute: Attribute) -> Result<()> {
        let series = [Series {
            label: format!("{attribute:?}"),
            points: self.alphas.iter().copied().zip(self.means.iter().copied()).collect(),
        }];
        line_plot(path, "alpha", &format!("mean {attribute:?}").to_lowercase(), &series)
    }
}

impl SdeditSweep {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["frac", "delta_attribute", "abs_delta", "structural_distance"]).map_err(csv_error)?;
        for p in &self.points {
            w.write_record([
                p.frac.to_string(),
                p.delta_attribute.mean.to_string(),
                p.abs_delta.mean.to_string(),
                p.structural_distance.mean.to_string(),
            ])
            .map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Both curves normalized by their value at the smallest fraction.
    pub fn write_svg(&self, path: &Path) -> Result<()> {
        let norm = |f: fn(&SdeditPoint) -> f64| -> Vec<(f64, f64)> {
            let first = self.points.first().map(f).filter(|v| *v != 0.0).unwrap_or(1.0);
            self.points.iter().map(|p| (p.frac, f(p) / first)).collect()
        };
        let series = [
            Series {
                label: "|delta attribute|".into(),
                points: norm(|p| p.abs_delta.mean),
            },
            Series {
                label: "structural distance".into(),
                points: norm(|p| p.structural_distance.mean),
            },
        ];
        line_plot(path, "sdedit fraction", "relative to frac 0", &series)
    }
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn line_plot(path: &Path, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    use plotters::prelude::*;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if !x0.is_finite() {
        return Err(Error::Argument("nothing to plot".into()));
    }
    let pad = |lo: f64, hi: f64| {
        let p = ((hi - lo) * 0.05).max(1e-9);
        (lo - p)..(hi + p)
    };
    let plot_error = |e: &dyn std::fmt::Display| Error::Format(format!("svg: {e}"));
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_error(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(pad(x0, x1), pad(y0, y1))
        .map_err(|e| plot_error(&e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_error(&e))?;
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_error(&e))?
            .label(s.label.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_error(&e))?;
    root.present().map_err(|e| plot_error(&e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{render, ProceduralScene};

    fn scene(shape: Shape, size: f64, brightness: f64) -> ImageSample {
        render(&ProceduralScene {
            shape,
            size,
            brightness,
            position: (0.5, 0.5),
            background: 0.1,
            hue: Hue::Red,
        })
        .unwrap()
    }

    #[test]
    fn delta_of_a_known_brightness_offset() {
        let base: Vec<_> = (0..5).map(|i| scene(Shape::Circle, 0.3, 0.5 + 0.05 * i as f64)).collect();
        let edited: Vec<_> = (0..5).map(|i| scene(Shape::Circle, 0.3, 0.6 + 0.05 * i as f64)).collect();
        let d = delta_attribute(&base, &edited, Attribute::Brightness).unwrap();
        assert!((d.mean - 0.1).abs() < 1e-6, "{}", d.mean);
        assert_eq!(delta_attribute(&base, &base, Attribute::Brightness).unwrap().mean, 0.0);
        let back = delta_attribute(&edited, &base, Attribute::Brightness).unwrap();
        assert!((back.mean + d.mean).abs() < 1e-12);
    }

    #[test]
    fn distance_is_a_bounded_symmetric_metric() {
        let a = scene(Shape::Circle, 0.3, 0.9);
        let b = scene(Shape::Square, 0.2, 0.5);
        assert_eq!(image_distance(&a, &a), 0.0);
        assert_eq!(image_distance(&a, &b), image_distance(&b, &a));
        assert!(image_distance(&a, &b) > 0.0);
        let white = ImageSample::filled(32, 32, 3, 1.0);
        let black = ImageSample::filled(32, 32, 3, -1.0);
        assert_eq!(image_distance(&white, &black), 2.0);
    }

    #[test]
    fn three_shape_flips_in_ten() {
        let base: Vec<_> = (0..10).map(|_| scene(Shape::Circle, 0.3, 0.9)).collect();
        let mut edited = base.clone();
        for e in edited.iter_mut().take(3) {
            *e = scene(Shape::Triangle, 0.3, 0.9);
        }
        assert_eq!(interference(&base, &edited, &[Protected::Shape]).unwrap(), 0.3);
        assert_eq!(interference(&base, &base, &[Protected::Shape, Protected::Hue]).unwrap(), 0.0);
        assert!(interference(&base, &edited, &[]).is_err());
        assert!(interference(&base, &edited[..3], &[Protected::Shape]).is_err());
    }

    #[test]
    fn bootstrap_is_seeded_and_brackets_the_mean() {
        let v: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        let s = Statistic::of(&v);
        assert_eq!(s, Statistic::of(&v));
        assert!(s.ci_low <= s.mean && s.mean <= s.ci_high);
        let lower: Vec<f64> = v.iter().map(|x| x - 1.0).collect();
        assert!(paired_bootstrap_p(&lower, &v, 1000, 1).unwrap() < 0.01);
        assert!(paired_bootstrap_p(&v, &lower, 1000, 1).unwrap() > 0.99);
    }

    #[test]
    fn spearman_against_hand_values() {
        let t = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]).unwrap();
        // Ranks of y with ties: 1, 2, 3.5, 5, 3.5; ρ = 0.8208 (by hand).
        assert!((t.rho - 0.820_782_681_668_123).abs() < 1e-12, "{}", t.rho);
        let perfect = spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert_eq!((perfect.rho, perfect.p_value), (-1.0, 0.0));
    }

    #[test]
    fn gaussian_oracle() {
        let check = gaussian_score_check(100, 3);
        assert!(check.passed, "{check:?}");
    }

    #[test]
    fn report_outputs() {
        let base: Vec<_> = (0..4).map(|i| scene(Shape::Circle, 0.2 + 0.02 * i as f64, 0.9)).collect();
        let edited: Vec<_> = (0..4).map(|i| scene(Shape::Circle, 0.25 + 0.02 * i as f64, 0.9)).collect();
        let report = EvalReport::from_pairs(&[3, 1, 2, 0], &base, &edited, Attribute::Size, &[Protected::Shape], serde_json::json!({})).unwrap();
        assert_eq!(report.records.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(report.delta_attribute.mean > 0.0);
        let dir = tempfile::tempdir().unwrap();
        report.write_json(&dir.path().join("r.json")).unwrap();
        report.write_csv(&dir.path().join("r.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.starts_with("seed,base,edited,distance,flipped"));
        let sweep = AlphaSweep {
            alphas: vec![-1.0, 0.0, 1.0],
            seeds: vec![0],
            means: vec![50.0, 80.0, 120.0],
            values: vec![vec![50.0, 80.0, 120.0]],
            increasing: 1.0,
            decreasing: 0.0,
            ratio: 2.4,
        };
        sweep.write_svg(&dir.path().join("a.svg"), Attribute::Size).unwrap();
        assert!(std::fs::read_to_string(dir.path().join("a.svg")).unwrap().contains("<svg"));
    }
}
