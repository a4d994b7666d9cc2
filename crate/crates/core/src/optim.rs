//! Adam over named parameter maps.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};

use crate::model::Gradients;
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct Adam<F: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Array2<F>>,
    v: BTreeMap<String, Array2<F>>,
}

impl<F: Real> Default for Adam<F> {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl<F: Real> Adam<F> {
    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Parameters absent
    /// from `grads` are left untouched.
    pub fn step(&mut self, params: &mut BTreeMap<String, Array2<F>>, grads: &Gradients<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (one, eps) = (F::one(), F::lit(self.eps));
        let step_size = F::lit(lr / c1);
        let inv_c2 = F::lit(1.0 / c2);
        for (id, g) in &grads.map {
            let Some(p) = params.get_mut(id) else {
                continue;
            };
            let m = self
                .m
                .entry(id.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(id.clone())
                .or_insert_with(|| Array2::zeros(g.raw_dim()));
            Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *p -= step_size * *m / ((*v * inv_c2).sqrt() + eps);
                });
        }
    }
}

/// Cosine decay from `lr` to `floor · lr` over `total` steps.
pub fn cosine_lr(lr: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return lr;
    }
    let progress = (step as f64 / (total - 1) as f64).min(1.0);
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
    lr * (floor + (1.0 - floor) * cos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut params = BTreeMap::from([("w".to_string(), Array2::from_elem((1, 2), 1.0f64))]);
        let mut grads = Gradients::default();
        grads.accumulate("w", Array2::from_shape_vec((1, 2), vec![3.0, -0.5]).unwrap());
        let mut adam = Adam::default();
        adam.step(&mut params, &grads, 0.1);
        let w = &params["w"];
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut params = BTreeMap::from([("w".to_string(), Array2::from_elem((2, 2), 5.0f64))]);
        let mut adam = Adam::default();
        for _ in 0..2000 {
            let mut grads = Gradients::default();
            grads.accumulate("w", params["w"].mapv(|v| 2.0 * (v - 1.5)));
            adam.step(&mut params, &grads, 0.05);
        }
        assert!(params["w"].iter().all(|v| (v - 1.5).abs() < 1e-3));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0.1, 0, 11), 1.0);
        assert!((cosine_lr(1.0, 0.1, 10, 11) - 0.1).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0.1, 5, 11) - 0.55).abs() < 1e-12);
    }
}
