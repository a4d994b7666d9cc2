//! A slider learned from 32 before/after pairs that differ only in radius.
//! The pairs are exported next to the slider so the same set can be fed to
//! `sliders train-slider pairs --pairs DIR`.
//!
//!     cargo run --release --example image_pair_slider -- [OUT_DIR]

use std::path::{Path, PathBuf};

use concept_sliders::checkpoint::Checkpoint;
use concept_sliders::dataset::{export_pairs, make_pairs, PairAttribute};
use concept_sliders::eval::{alpha_sweep, Attribute};
use concept_sliders::inference::GenerationConfig;
use concept_sliders::slider::{train_image_slider, PairTrainConfig};
use concept_sliders::vocab::Phrase;

const REFERENCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/reference.ckpt");

fn main() -> concept_sliders::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/image_pair_slider".into()));
    let model = Checkpoint::load(Path::new(REFERENCE))?.model;

    // Low radius in the first image, high in the second.
    let pairs = make_pairs(PairAttribute::Size, 0.15, 0.4, 32, 5)?;
    export_pairs(&pairs, &out.join("pairs"))?;

    let config = PairTrainConfig {
        name: "radius".into(),
        ..PairTrainConfig::default()
    };
    let trained = train_image_slider(&model, &pairs, &config)?;
    let slider = trained.adaptor;
    slider.save(&out.join("radius.slider"))?;

    let seeds: Vec<u64> = (0..40).collect();
    let sweep = alpha_sweep(
        &model,
        &slider,
        &[-2.0, 0.0, 2.0],
        &Phrase::null(),
        &seeds,
        &GenerationConfig::default(),
        Attribute::Size,
    )?;
    let right = sweep.values.iter().filter(|v| v[0] < v[1] && v[1] < v[2]).count();
    println!("mean area at alpha -2/0/+2: {:.1} / {:.1} / {:.1}", sweep.means[0], sweep.means[1], sweep.means[2]);
    println!("moved the right way in both directions for {right}/{} seeds", seeds.len());
    Ok(())
}
