//! Low-rank weight directions and their α-scaled composition.
//!
//! An adaptor stores `ΔW = B·A` per target layer (`B: d × r`, zero at
//! birth; `A: r × k`). [`apply`] builds a view whose weights are
//! `W₀ + Σ αᵢ·Bᵢ·Aᵢ` without touching the base model.
//!
//! Composition is bit-exact under reordering and α-splitting: handles that
//! share an adaptor are merged by summing their alphas in sorted order, and
//! distinct adaptors are accumulated in content-fingerprint order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::container::{self, Container};
use crate::error::{Error, Result};
use crate::model::{DenoiserModel, WeightSource};
use crate::real::Real;

pub const SLIDER_MAGIC: &[u8; 8] = b"CSLDSLDR";
pub const SLIDER_VERSION: u32 = 1;

/// One layer's factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraEntry {
    pub b: Array2<f32>,
    pub a: Array2<f32>,
}

impl LoraEntry {
    pub fn rank(&self) -> usize {
        self.b.ncols()
    }

    pub fn delta(&self) -> Array2<f32> {
        self.b.dot(&self.a)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoRAAdaptor {
    pub name: String,
    pub rank: usize,
    pub entries: BTreeMap<String, LoraEntry>,
    /// Free-form provenance: spec hash, epochs, creation time, ...
    pub metadata: BTreeMap<String, serde_json::Value>,
}

/// A scaled reference to an adaptor.
#[derive(Debug, Clone, Copy)]
pub struct SliderHandle<'a> {
    pub adaptor: &'a LoRAAdaptor,
    pub alpha: f64,
}

impl<'a> SliderHandle<'a> {
    pub fn new(adaptor: &'a LoRAAdaptor, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::range("alpha", format!("{alpha}")));
        }
        Ok(Self { adaptor, alpha })
    }
}

/// Zero `B`, seeded Gaussian `A` with row norm ≈ 1: a no-op until trained.
pub fn init_adaptor(model: &DenoiserModel, layer_ids: &[String], rank: usize, seed: u64) -> Result<LoRAAdaptor> {
    if rank == 0 {
        return Err(Error::Argument("rank must be at least 1".into()));
    }
    if layer_ids.is_empty() {
        return Err(Error::Argument("an adaptor needs at least one layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = BTreeMap::new();
    for id in layer_ids {
        let (d, k) = model.layer_dims(id)?;
        if rank > d.min(k) {
            return Err(Error::Rank {
                layer: id.clone(),
                rank,
                max: d.min(k),
            });
        }
        let std = 1.0 / (k as f64).sqrt();
        let a = Array2::from_shape_fn((rank, k), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (z * std) as f32
        });
        entries.insert(
            id.clone(),
            LoraEntry {
                b: Array2::zeros((d, rank)),
                a,
            },
        );
    }
    Ok(LoRAAdaptor {
        name: String::new(),
        rank,
        entries,
        metadata: BTreeMap::new(),
    })
}

impl LoRAAdaptor {
    pub fn layer_ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// `apply(negate(a), α) ≡ apply(a, −α)`, realized by negating `B`.
    pub fn negate(&self) -> Self {
        let mut out = self.clone();
        for e in out.entries.values_mut() {
            e.b.mapv_inplace(|v| -v);
        }
        out
    }

    /// Checks ranks and that every layer exists in `model` with matching
    /// dimensions.
    pub fn validate(&self, model: &DenoiserModel) -> Result<()> {
        if self.rank == 0 || self.entries.is_empty() {
            return Err(Error::Argument(format!("adaptor `{}` is empty", self.name)));
        }
        for (id, e) in &self.entries {
            let (d, k) = model.layer_dims(id)?;
            let r = e.rank();
            if e.b.dim() != (d, r) || e.a.dim() != (r, k) {
                return Err(Error::Shape(format!(
                    "{id}: B {:?}, A {:?} for a {d}×{k} layer",
                    e.b.dim(),
                    e.a.dim()
                )));
            }
            if r == 0 || r > self.rank || r > d.min(k) {
                return Err(Error::Rank {
                    layer: id.clone(),
                    rank: r,
                    max: self.rank.min(d.min(k)),
                });
            }
            if e.b.iter().chain(e.a.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Format(format!("{id}: non-finite factor")));
            }
        }
        Ok(())
    }

    /// Content hash of the factors (layer ids, shapes and exact bits).
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (id, e) in &self.entries {
            h.update(id.as_bytes());
            for m in [&e.b, &e.a] {
                h.update((m.nrows() as u64).to_le_bytes());
                h.update((m.ncols() as u64).to_le_bytes());
                for v in m {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        h.finalize().into()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = SliderManifest {
            name: self.name.clone(),
            rank: self.rank,
            layers: self
                .entries
                .iter()
                .map(|(id, e)| LayerRecord {
                    id: id.clone(),
                    d: e.b.nrows(),
                    k: e.a.ncols(),
                    rank: e.rank(),
                })
                .collect(),
            metadata: self.metadata.clone(),
        };
        let names: Vec<(String, String)> = self
            .entries
            .keys()
            .map(|id| (format!("{id}.B"), format!("{id}.A")))
            .collect();
        let mut blobs = Vec::with_capacity(2 * names.len());
        for ((bn, an), e) in names.iter().zip(self.entries.values()) {
            blobs.push((bn.as_str(), &e.b));
            blobs.push((an.as_str(), &e.a));
        }
        container::encode(SLIDER_MAGIC, SLIDER_VERSION, &manifest, &blobs)
    }

    /// Decodes and validates against `model`.
    pub fn from_bytes(bytes: &[u8], model: &DenoiserModel) -> Result<Self> {
        let Container {
            meta, entries, blobs, ..
        }: Container<SliderManifest> = container::decode(bytes, SLIDER_MAGIC, SLIDER_VERSION)?;
        if entries.len() != 2 * meta.layers.len() {
            return Err(Error::Format("blob count does not match layer table".into()));
        }
        let mut blobs = blobs.into_iter();
        let mut map = BTreeMap::new();
        for (i, layer) in meta.layers.iter().enumerate() {
            if entries[2 * i].id != format!("{}.B", layer.id) || entries[2 * i + 1].id != format!("{}.A", layer.id) {
                return Err(Error::Format(format!("blob order for layer `{}`", layer.id)));
            }
            let b = blobs.next().expect("counted");
            let a = blobs.next().expect("counted");
            if b.dim() != (layer.d, layer.rank) || a.dim() != (layer.rank, layer.k) {
                return Err(Error::Shape(format!("layer `{}` blobs disagree with manifest", layer.id)));
            }
            map.insert(layer.id.clone(), LoraEntry { b, a });
        }
        let adaptor = LoRAAdaptor {
            name: meta.name,
            rank: meta.rank,
            entries: map,
            metadata: meta.metadata,
        };
        adaptor.validate(model)?;
        Ok(adaptor)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, model: &DenoiserModel) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerRecord {
    id: String,
    d: usize,
    k: usize,
    rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SliderManifest {
    name: String,
    rank: usize,
    layers: Vec<LayerRecord>,
    metadata: BTreeMap<String, serde_json::Value>,
}

/// Base weights with per-layer overrides.
#[derive(Debug, Clone)]
pub struct ModelView<'a, F: Real = f32> {
    base: &'a DenoiserModel<F>,
    overrides: BTreeMap<String, Array2<F>>,
}

impl<F: Real> WeightSource<F> for ModelView<'_, F> {
    fn weight(&self, id: &str) -> &Array2<F> {
        self.overrides
            .get(id)
            .unwrap_or_else(|| self.base.weight(id))
    }
}

impl<'a, F: Real> ModelView<'a, F> {
    pub fn base(&self) -> &'a DenoiserModel<F> {
        self.base
    }

    /// Layers whose effective weight differs from the base object.
    pub fn modified_layers(&self) -> Vec<String> {
        self.overrides.keys().cloned().collect()
    }

    /// Effective weight of a layer (`W₀` when unmodified).
    pub fn effective(&self, id: &str) -> &Array2<F> {
        self.weight(id)
    }

    /// A view over `base` with explicit replacement weights.
    pub fn with_overrides(base: &'a DenoiserModel<F>, overrides: BTreeMap<String, Array2<F>>) -> Result<Self> {
        for (id, w) in &overrides {
            let want = base
                .params()
                .get(id)
                .ok_or_else(|| Error::UnknownLayer(id.clone()))?
                .dim();
            if w.dim() != want {
                return Err(Error::Shape(format!("{id}: {:?} vs {want:?}", w.dim())));
            }
        }
        Ok(Self { base, overrides })
    }
}

/// `W = W₀ + Σ αᵢ·Bᵢ·Aᵢ` for every targeted layer. Handles whose merged
/// alpha is zero contribute nothing, so the view is then exactly the base.
pub fn apply<'a>(model: &'a DenoiserModel, handles: &[SliderHandle<'_>]) -> Result<ModelView<'a>> {
    let mut groups: BTreeMap<[u8; 32], (&LoRAAdaptor, Vec<f64>)> = BTreeMap::new();
    for h in handles {
        if !h.alpha.is_finite() {
            return Err(Error::range("alpha", format!("{}", h.alpha)));
        }
        h.adaptor.validate(model)?;
        groups
            .entry(h.adaptor.fingerprint())
            .or_insert_with(|| (h.adaptor, Vec::new()))
            .1
            .push(h.alpha);
    }
    let mut overrides: BTreeMap<String, Array2<f32>> = BTreeMap::new();
    for (adaptor, mut alphas) in groups.into_values() {
        alphas.sort_by(f64::total_cmp);
        let alpha = alphas.iter().sum::<f64>() as f32;
        if alpha == 0.0 {
            continue;
        }
        for (id, e) in &adaptor.entries {
            let delta = e.delta();
            let w = overrides
                .entry(id.clone())
                .or_insert_with(|| model.weight(id).clone());
            w.zip_mut_with(&delta, |w, &d| *w += alpha * d);
        }
    }
    Ok(ModelView {
        base: model,
        overrides,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserConfig;
    use ndarray::array;

    fn model() -> DenoiserModel {
        DenoiserModel::new(DenoiserConfig::tiny(), 0).unwrap()
    }

    fn random_adaptor(m: &DenoiserModel, seed: u64) -> LoRAAdaptor {
        let mut a = init_adaptor(m, &m.config().slider_target_layers(), 2, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for e in a.entries.values_mut() {
            e.b.mapv_inplace(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z as f32
            });
        }
        a
    }

    #[test]
    fn init_shapes_and_errors() {
        let m = DenoiserModel::new(DenoiserConfig::default(), 0).unwrap();
        let a = init_adaptor(&m, &["mid.attn.q".to_string()], 4, 1).unwrap();
        let e = &a.entries["mid.attn.q"];
        assert_eq!(e.b.dim(), (64, 4));
        assert_eq!(e.a.dim(), (4, 64));
        assert!(e.b.iter().all(|v| *v == 0.0));
        assert_eq!(a, init_adaptor(&m, &["mid.attn.q".to_string()], 4, 1).unwrap());
        assert!(matches!(
            init_adaptor(&m, &["nope".to_string()], 4, 1),
            Err(Error::UnknownLayer(_))
        ));
        assert!(matches!(
            init_adaptor(&m, &["cond.proj".to_string()], 33, 1),
            Err(Error::Rank { max: 32, .. })
        ));
    }

    #[test]
    fn hand_computed_merge() {
        let mut m = model();
        let id = "mid.attn.q".to_string();
        let w0 = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 1.0 } else { 0.0 });
        m.params_mut().insert(id.clone(), w0);
        let mut b = Array2::zeros((4, 1));
        b[[0, 0]] = 1.0;
        let mut a = Array2::zeros((1, 4));
        a[[0, 0]] = 1.0;
        let adaptor = LoRAAdaptor {
            name: "unit".into(),
            rank: 1,
            entries: BTreeMap::from([(id.clone(), LoraEntry { b, a })]),
            metadata: BTreeMap::new(),
        };
        let view = apply(&m, &[SliderHandle::new(&adaptor, 0.5).unwrap()]).unwrap();
        let w = view.effective(&id);
        assert_eq!(w.slice(ndarray::s![..2, ..2]), array![[1.5, 0.0], [0.0, 1.0]]);
    }

    #[test]
    fn zero_alpha_and_fresh_adaptors_are_identity() {
        let m = model();
        let trained = random_adaptor(&m, 1);
        let fresh = init_adaptor(&m, &m.config().slider_target_layers(), 2, 5).unwrap();
        let view = apply(&m, &[SliderHandle::new(&trained, 0.0).unwrap()]).unwrap();
        assert!(view.modified_layers().is_empty());
        let view = apply(&m, &[SliderHandle::new(&fresh, 3.0).unwrap()]).unwrap();
        for id in m.layer_ids() {
            assert_eq!(view.effective(&id), m.weight(&id));
        }
        assert!(apply(&m, &[]).unwrap().modified_layers().is_empty());
    }

    #[test]
    fn negate_is_an_involution_and_flips_alpha() {
        let m = model();
        let a = random_adaptor(&m, 2);
        assert_eq!(a.negate().negate(), a);
        let neg = a.negate();
        let v1 = apply(&m, &[SliderHandle::new(&neg, 1.0).unwrap()]).unwrap();
        let v2 = apply(&m, &[SliderHandle::new(&a, -1.0).unwrap()]).unwrap();
        for id in a.layer_ids() {
            assert_eq!(v1.effective(&id), v2.effective(&id));
        }
    }

    #[test]
    fn non_finite_alpha_is_rejected() {
        let m = model();
        let a = random_adaptor(&m, 3);
        assert!(SliderHandle::new(&a, f64::NAN).is_err());
        let h = SliderHandle { adaptor: &a, alpha: f64::INFINITY };
        assert!(apply(&m, &[h]).is_err());
    }

    #[test]
    fn save_load_round_trip_and_validation() {
        let m = model();
        let mut a = random_adaptor(&m, 4);
        a.name = "size".into();
        a.metadata.insert("epochs".into(), serde_json::json!(12));
        let bytes = a.to_bytes().unwrap();
        let back = LoRAAdaptor::from_bytes(&bytes, &m).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.fingerprint(), a.fingerprint());

        let mut other = DenoiserConfig::tiny();
        other.widths = vec![2, 4, 4];
        other.image_size = 8;
        let m2 = DenoiserModel::new(other, 0).unwrap();
        let mut b = init_adaptor(&m2, &["down2.conv1".to_string()], 2, 0).unwrap();
        b.name = "deep".into();
        assert!(matches!(
            LoRAAdaptor::from_bytes(&b.to_bytes().unwrap(), &m),
            Err(Error::UnknownLayer(_))
        ));

        let mut wide = DenoiserConfig::tiny();
        wide.widths = vec![2, 6];
        let m3 = DenoiserModel::new(wide, 0).unwrap();
        assert!(matches!(LoRAAdaptor::from_bytes(&bytes, &m3), Err(Error::Shape(_))));

        let mut corrupt = bytes.clone();
        let n = corrupt.len();
        corrupt[n - 3] ^= 0x40;
        assert!(matches!(LoRAAdaptor::from_bytes(&corrupt, &m), Err(Error::Checksum(_))));
    }
}
