//! Variance schedule and closed-form forward noising.

use ndarray::{Array, ArrayView, Dimension, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageSample;
use crate::real::Real;

/// How the per-step betas are generated. Stored in checkpoints instead of the
/// raw betas so the schedule is reproduced exactly on load.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleConfig {
    Linear {
        timesteps: usize,
        beta_start: f64,
        beta_end: f64,
    },
}

impl ScheduleConfig {
    /// The common 1000-step linear range `1e-4 → 0.02` compressed to
    /// `timesteps` steps by scaling every beta by `1000 / timesteps`, which
    /// keeps the terminal signal level near zero.
    pub fn linear_scaled(timesteps: usize) -> Self {
        let k = 1000.0 / timesteps as f64;
        ScheduleConfig::Linear {
            timesteps,
            beta_start: 1e-4 * k,
            beta_end: (0.02 * k).min(0.999),
        }
    }
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self::linear_scaled(100)
    }
}

/// Betas and their cumulative products. Timesteps are 1-based: `t ∈ [1, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    config: ScheduleConfig,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let betas = match config {
            ScheduleConfig::Linear {
                timesteps,
                beta_start,
                beta_end,
            } => {
                if timesteps == 0 {
                    return Err(Error::range("timesteps", "must be positive"));
                }
                if timesteps == 1 {
                    vec![beta_start]
                } else {
                    let span = (timesteps - 1) as f64;
                    (0..timesteps)
                        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / span)
                        .collect()
                }
            }
        };
        Self::from_betas_with_config(config, betas)
    }

    /// Builds a schedule from explicit betas; the config records only the count.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        let config = ScheduleConfig::Linear {
            timesteps: betas.len(),
            beta_start: betas.first().copied().unwrap_or(0.0),
            beta_end: betas.last().copied().unwrap_or(0.0),
        };
        Self::from_betas_with_config(config, betas)
    }

    fn from_betas_with_config(config: ScheduleConfig, betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::range("timesteps", "must be positive"));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::range("beta", format!("{b} not in (0, 1)")));
        }
        let alpha_bars = cumulative_alpha_bars(&betas);
        Ok(Self {
            config,
            betas,
            alpha_bars,
        })
    }

    pub fn config(&self) -> ScheduleConfig {
        self.config
    }

    /// Number of diffusion steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            Err(Error::range(
                "timestep",
                format!("{t} not in [1, {}]", self.len()),
            ))
        } else {
            Ok(())
        }
    }

    /// ᾱ_t for `t ∈ [1, T]`; `t = 0` is the clean signal with ᾱ = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `steps` evenly spaced timesteps in increasing order, ending at `T`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.len();
        if steps == 0 || steps > total {
            return Err(Error::range(
                "steps",
                format!("{steps} not in [1, {total}]"),
            ));
        }
        Ok((1..=steps).map(|i| (i * total).div_ceil(steps)).collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(ScheduleConfig::default()).expect("default schedule is valid")
    }
}

pub(crate) fn cumulative_alpha_bars(betas: &[f64]) -> Vec<f64> {
    betas
        .iter()
        .scan(1.0f64, |acc, b| {
            *acc *= 1.0 - b;
            Some(*acc)
        })
        .collect()
}

/// `√ᾱ_t · x0 + √(1−ᾱ_t) · eps` on raw arrays of any dimension.
pub fn forward_noise_array<F: Real, D: Dimension>(
    x0: ArrayView<F, D>,
    t: usize,
    eps: ArrayView<F, D>,
    sched: &NoiseSchedule,
) -> Result<Array<F, D>> {
    sched.check_timestep(t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!(
            "x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = sched.alpha_bar(t);
    let signal = F::lit(ab.sqrt());
    let noise = F::lit((1.0 - ab).sqrt());
    Ok(Zip::from(&x0)
        .and(&eps)
        .map_collect(|&x, &e| signal * x + noise * e))
}

pub fn forward_noise(
    x0: &ImageSample,
    t: usize,
    eps: &ImageSample,
    sched: &NoiseSchedule,
) -> Result<ImageSample> {
    let out = forward_noise_array(x0.pixels().view(), t, eps.pixels().view(), sched)?;
    Ok(ImageSample::from_array_unchecked(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn default_schedule_is_monotone() {
        let s = NoiseSchedule::default();
        assert_eq!(s.len(), 100);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(100) < s.alpha_bar(1) && s.alpha_bar(1) < 1.0);
        assert!(s.betas().iter().all(|b| *b > 0.0 && *b < 1.0));
    }

    #[test]
    fn default_schedule_ends_in_noise() {
        let s = NoiseSchedule::default();
        assert!(s.alpha_bar(100) < 1e-3, "{}", s.alpha_bar(100));
        let ScheduleConfig::Linear { beta_start, beta_end, .. } = s.config();
        assert!((beta_start - 1e-3).abs() < 1e-15 && (beta_end - 0.2).abs() < 1e-15);
    }

    #[test]
    fn alpha_bars_recompute_bit_exactly() {
        let s = NoiseSchedule::default();
        let mut acc = 1.0f64;
        for (b, ab) in s.betas().iter().zip(s.alpha_bars()) {
            acc *= 1.0 - b;
            assert_eq!(acc.to_bits(), ab.to_bits());
        }
    }

    #[test]
    fn rejects_bad_betas() {
        assert!(NoiseSchedule::from_betas(vec![0.1, 1.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![0.0]).is_err());
        assert!(NoiseSchedule::from_betas(vec![]).is_err());
    }

    #[test]
    fn sampling_timesteps_cover_range() {
        let s = NoiseSchedule::default();
        assert_eq!(s.sampling_timesteps(100).unwrap(), (1..=100).collect::<Vec<_>>());
        let ts = s.sampling_timesteps(25).unwrap();
        assert_eq!(ts.len(), 25);
        assert_eq!(*ts.last().unwrap(), 100);
        assert_eq!(ts[0], 4);
        assert!(s.sampling_timesteps(0).is_err());
        assert!(s.sampling_timesteps(101).is_err());
        assert_eq!(s.sampling_timesteps(1).unwrap(), vec![100]);
    }

    #[test]
    fn forward_noise_hand_evaluated() {
        // ᾱ = 0.64: one beta of 0.36.
        let s = NoiseSchedule::from_betas(vec![0.36]).unwrap();
        let x0 = Array3::<f64>::from_elem((2, 2, 3), 0.5);
        let eps = Array3::<f64>::from_elem((2, 2, 3), 1.0);
        let out = forward_noise_array(x0.view(), 1, eps.view(), &s).unwrap();
        for v in out.iter() {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_noise_limits() {
        let s = NoiseSchedule::from_betas(vec![1e-300, 0.5]).unwrap();
        let x0 = Array3::<f64>::from_elem((1, 1, 3), 0.25);
        let eps = Array3::<f64>::from_elem((1, 1, 3), -0.7);
        // ᾱ_1 == 1 in floating point.
        assert_eq!(s.alpha_bar(1), 1.0);
        let out = forward_noise_array(x0.view(), 1, eps.view(), &s).unwrap();
        assert_eq!(out, x0);

        let zeros = Array3::<f64>::zeros((1, 1, 3));
        let out = forward_noise_array(zeros.view(), 2, eps.view(), &s).unwrap();
        let k = (1.0 - s.alpha_bar(2)).sqrt();
        for (o, e) in out.iter().zip(eps.iter()) {
            assert_eq!(*o, k * e);
        }
    }

    #[test]
    fn forward_noise_errors() {
        let s = NoiseSchedule::default();
        let a = Array3::<f32>::zeros((2, 2, 3));
        let b = Array3::<f32>::zeros((2, 2, 1));
        assert!(matches!(
            forward_noise_array(a.view(), 0, a.view(), &s),
            Err(Error::Range { .. })
        ));
        assert!(matches!(
            forward_noise_array(a.view(), 101, a.view(), &s),
            Err(Error::Range { .. })
        ));
        assert!(matches!(
            forward_noise_array(a.view(), 5, b.view(), &s),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn forward_noise_variance_matches_schedule() {
        let s = NoiseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &t in &[1usize, 10, 50, 100] {
            let x0 = ndarray::Array1::<f64>::from_elem(1, 0.3);
            let draws: Vec<f64> = (0..10_000)
                .map(|_| {
                    let e = ndarray::Array1::from_elem(1, StandardNormal.sample(&mut rng));
                    forward_noise_array(x0.view(), t, e.view(), &s).unwrap()[0]
                })
                .collect();
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (draws.len() - 1) as f64;
            let expected = 1.0 - s.alpha_bar(t);
            assert!(
                (var - expected).abs() / expected < 0.05,
                "t={t}: var {var} vs {expected}"
            );
        }
    }
}
