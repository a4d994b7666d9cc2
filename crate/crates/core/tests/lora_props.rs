use nalgebra::DMatrix;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use concept_sliders::lora::{apply, init_adaptor, LoRAAdaptor, SliderHandle};
use concept_sliders::model::{DenoiserConfig, DenoiserModel, WeightSource};

fn model() -> DenoiserModel {
    DenoiserModel::new(DenoiserConfig::tiny(), 0).unwrap()
}

fn random_adaptor(m: &DenoiserModel, rank: usize, seed: u64) -> LoRAAdaptor {
    let mut a = init_adaptor(m, &m.config().slider_target_layers(), rank, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for e in a.entries.values_mut() {
        e.b.mapv_inplace(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z as f32
        });
    }
    a
}

fn effective(m: &DenoiserModel, handles: &[SliderHandle<'_>]) -> Vec<Array2<f32>> {
    let view = apply(m, handles).unwrap();
    m.layer_ids().iter().map(|id| view.effective(id).clone()).collect()
}

fn h(a: &LoRAAdaptor, alpha: f64) -> SliderHandle<'_> {
    SliderHandle::new(a, alpha).unwrap()
}

fn alpha() -> impl Strategy<Value = f64> {
    -4.0f64..4.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn alpha_is_linear(seed in any::<u64>(), a1 in alpha(), a2 in alpha()) {
        let m = model();
        let a = random_adaptor(&m, 2, seed);
        prop_assert_eq!(effective(&m, &[h(&a, a1 + a2)]), effective(&m, &[h(&a, a1), h(&a, a2)]));
    }

    #[test]
    fn composition_commutes(s1 in any::<u64>(), s2 in any::<u64>(), a1 in alpha(), a2 in alpha()) {
        let m = model();
        let (x, y) = (random_adaptor(&m, 2, s1), random_adaptor(&m, 3, s2));
        prop_assert_eq!(effective(&m, &[h(&x, a1), h(&y, a2)]), effective(&m, &[h(&y, a2), h(&x, a1)]));
    }

    #[test]
    fn negate_mirrors_alpha(seed in any::<u64>(), a1 in alpha()) {
        let m = model();
        let a = random_adaptor(&m, 2, seed);
        let n = a.negate();
        prop_assert_eq!(effective(&m, &[h(&n, a1)]), effective(&m, &[h(&a, -a1)]));
        prop_assert_eq!(n.negate(), a);
    }

    #[test]
    fn update_rank_is_bounded(seed in any::<u64>(), rank in 1usize..=4, a1 in 0.5f64..4.0) {
        let m = model();
        let a = random_adaptor(&m, rank, seed);
        let view = apply(&m, &[h(&a, a1)]).unwrap();
        for id in view.modified_layers() {
            let diff = view.effective(&id).mapv(f64::from) - m.weight(&id).mapv(f64::from);
            let mat = DMatrix::from_row_iterator(diff.nrows(), diff.ncols(), diff.iter().copied());
            let sv = mat.singular_values();
            let top = sv.max();
            let numerical = sv.iter().filter(|&&s| s > 1e-4 * top).count();
            prop_assert!(numerical <= rank, "{id}: rank {numerical} > {rank}");
        }
    }

    #[test]
    fn alpha_zero_is_identity(seed in any::<u64>()) {
        let m = model();
        let a = random_adaptor(&m, 2, seed);
        let view = apply(&m, &[h(&a, 0.0)]).unwrap();
        prop_assert!(view.modified_layers().is_empty());
    }
}

#[test]
fn fifty_sliders_compose() {
    // Perturbed so no layer is zero-initialized and weight changes reach the output.
    let mut m = model();
    for (i, p) in m.params_mut().values_mut().enumerate() {
        let mut j = 0.0f32;
        p.mapv_inplace(|v| {
            j += 1.0;
            v + 0.2 * (1.7 * j + i as f32).sin()
        });
    }
    let cfg = m.config().clone();
    let x = Array2::from_shape_fn((2, cfg.pixels()), |(i, j)| ((i * 31 + j) as f32 * 0.37).sin());
    let conds = vec![m.vocab().phrase("large circle").unwrap(), m.vocab().phrase("").unwrap()];
    let ts = [1, cfg.max_timestep()];
    let base = m.predict(&m, x.view(), &ts, &conds);

    let noops: Vec<LoRAAdaptor> = (0..50)
        .map(|s| init_adaptor(&m, &cfg.slider_target_layers(), 1 + s as usize % 4, s).unwrap())
        .collect();
    let handles: Vec<_> = noops.iter().map(|a| h(a, 3.0)).collect();
    let view = apply(&m, &handles).unwrap();
    assert_eq!(m.predict(&view, x.view(), &ts, &conds), base, "untrained sliders are exact no-ops");

    let random: Vec<LoRAAdaptor> = (0..50).map(|s| random_adaptor(&m, 1 + s as usize % 4, s)).collect();
    let handles: Vec<_> = random.iter().enumerate().map(|(i, a)| h(a, 0.02 * (i as f64 - 25.0))).collect();
    let view = apply(&m, &handles).unwrap();
    let out = m.predict(&view, x.view(), &ts, &conds);
    assert!(out.iter().all(|v| v.is_finite()));
    assert_ne!(out, base);
}
