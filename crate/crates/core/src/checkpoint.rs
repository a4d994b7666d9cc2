//! Model checkpoints: architecture (including schedule and vocabulary) and
//! training record in the header, one little-endian `f32` blob per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{self, Container};
use crate::dataset::DatasetConfig;
use crate::diffusion::TrainConfig;
use crate::error::Result;
use crate::model::{DenoiserConfig, DenoiserModel};
use crate::schedule::NoiseSchedule;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CSLDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub config: TrainConfig,
    pub dataset: DatasetConfig,
    pub loss_curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    architecture: DenoiserConfig,
    training: Option<TrainingRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: DenoiserModel,
    pub training: Option<TrainingRecord>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            architecture: self.model.config().clone(),
            training: self.training.clone(),
        };
        let blobs: Vec<(&str, _)> = self
            .model
            .params()
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .collect();
        container::encode(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &manifest, &blobs)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let Container {
            meta,
            entries,
            blobs,
        }: Container<Manifest> = container::decode(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let params: BTreeMap<_, _> = entries.into_iter().map(|e| e.id).zip(blobs).collect();
        Ok(Self {
            model: DenoiserModel::from_params(meta.architecture, params)?,
            training: meta.training,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        self.model.schedule()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn checkpoint() -> Checkpoint {
        let mut model = DenoiserModel::new(DenoiserConfig::tiny(), 3).unwrap();
        model.params_mut().get_mut("out.conv").unwrap()[[0, 0]] = -0.0;
        Checkpoint {
            model,
            training: Some(TrainingRecord {
                config: TrainConfig::default(),
                dataset: DatasetConfig::new(4, 1),
                loss_curve: vec![3.25, 1.0 / 3.0],
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = checkpoint();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
        for (k, v) in ck.model.params() {
            let w = &back.model.params()[k];
            assert!(v.iter().zip(w.iter()).all(|(a, b)| a.to_bits() == b.to_bits()), "{k}");
        }
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/model.ckpt");
        let ck = checkpoint();
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn slider_file_is_not_a_checkpoint() {
        let bytes = container::encode(b"CSLIDER1", CHECKPOINT_VERSION, &(), &[]).unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Magic(_))));
    }
}
