//! Corruption anywhere in a blob must surface as a checksum error, never
//! as a silently different model or slider.

use proptest::prelude::*;

use concept_sliders::checkpoint::Checkpoint;
use concept_sliders::error::Error;
use concept_sliders::lora::{init_adaptor, LoRAAdaptor};
use concept_sliders::model::{DenoiserConfig, DenoiserModel};

fn model() -> DenoiserModel {
    DenoiserModel::new(DenoiserConfig::tiny(), 4).unwrap()
}

fn slider_bytes(m: &DenoiserModel) -> (Vec<u8>, usize) {
    let a = init_adaptor(m, &m.config().slider_target_layers(), 2, 8).unwrap();
    let blob_len: usize = a.entries.values().map(|e| 4 * (e.a.len() + e.b.len())).sum();
    (a.to_bytes().unwrap(), blob_len)
}

fn checkpoint_bytes(m: &DenoiserModel) -> (Vec<u8>, usize) {
    let ck = Checkpoint {
        model: m.clone(),
        training: None,
    };
    (ck.to_bytes().unwrap(), 4 * m.param_count())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn corrupted_slider_blob_is_detected(offset in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let m = model();
        let (mut bytes, blob_len) = slider_bytes(&m);
        let n = bytes.len();
        bytes[n - blob_len + offset.index(blob_len)] ^= flip;
        prop_assert!(matches!(LoRAAdaptor::from_bytes(&bytes, &m), Err(Error::Checksum(_))));
    }

    #[test]
    fn corrupted_checkpoint_blob_is_detected(offset in any::<prop::sample::Index>(), flip in 1u8..=255) {
        let m = model();
        let (mut bytes, blob_len) = checkpoint_bytes(&m);
        let n = bytes.len();
        bytes[n - blob_len + offset.index(blob_len)] ^= flip;
        prop_assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum(_))));
    }

    #[test]
    fn truncation_is_rejected(cut in any::<prop::sample::Index>()) {
        let m = model();
        let (bytes, _) = slider_bytes(&m);
        prop_assert!(LoRAAdaptor::from_bytes(&bytes[..cut.index(bytes.len())], &m).is_err());
    }
}

#[test]
fn magic_is_checked_per_kind() {
    let m = model();
    let (slider, _) = slider_bytes(&m);
    let (ckpt, _) = checkpoint_bytes(&m);
    assert!(matches!(Checkpoint::from_bytes(&slider), Err(Error::Magic(_))));
    assert!(matches!(LoRAAdaptor::from_bytes(&ckpt, &m), Err(Error::Magic(_))));
}

#[test]
fn slider_for_another_architecture_is_rejected() {
    let m = model();
    let (bytes, _) = slider_bytes(&m);
    let other = DenoiserModel::new(
        DenoiserConfig {
            widths: vec![8, 16],
            ..DenoiserConfig::tiny()
        },
        4,
    )
    .unwrap();
    assert!(LoRAAdaptor::from_bytes(&bytes, &other).is_err());
}
