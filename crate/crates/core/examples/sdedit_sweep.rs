//! Structure vs strength: the same slider at a fixed alpha with the first
//! `sdedit_frac` of the sampling steps left to the base model. Later gates
//! keep more of the base image and change the attribute less.
//!
//!     cargo run --release --example sdedit_sweep -- [OUT_DIR]

use std::path::{Path, PathBuf};

use concept_sliders::checkpoint::Checkpoint;
use concept_sliders::eval::{sdedit_sweep, Attribute};
use concept_sliders::image::ImageSample;
use concept_sliders::inference::{generate_with_sliders, GenerationConfig};
use concept_sliders::lora::SliderHandle;
use concept_sliders::slider::{train_text_slider, SliderSpec};
use concept_sliders::vocab::Phrase;

const REFERENCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/reference.ckpt");

fn main() -> concept_sliders::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/sdedit_sweep".into()));
    std::fs::create_dir_all(&out)?;
    let model = Checkpoint::load(Path::new(REFERENCE))?.model;
    let slider = train_text_slider(
        &model,
        &SliderSpec {
            name: "size".into(),
            enhance: "large".into(),
            suppress: "small".into(),
            preserve: vec!["circle".into(), "square".into()],
            ..SliderSpec::default()
        },
    )?
    .adaptor;

    let alpha = 2.0;
    let fracs: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
    let seeds: Vec<u64> = (0..40).collect();
    let config = GenerationConfig::default();
    let sweep = sdedit_sweep(&model, &slider, alpha, &fracs, &Phrase::null(), &seeds, &config, Attribute::Size)?;
    sweep.write_csv(&out.join("sweep.csv"))?;
    sweep.write_svg(&out.join("sweep.svg"))?;
    println!("frac  |delta area|  distance");
    for p in &sweep.points {
        println!("{:.1}   {:>10.1}  {:.4}", p.frac, p.abs_delta.mean, p.structural_distance.mean);
    }
    println!(
        "spearman: distance {:.3} (p {:.1e}), |delta| {:.3} (p {:.1e})",
        sweep.distance_trend.rho, sweep.distance_trend.p_value, sweep.delta_trend.rho, sweep.delta_trend.p_value
    );

    let mut sheet = Vec::new();
    for seed in 0..4 {
        for &frac in &fracs {
            let h = [SliderHandle::new(&slider, alpha)?];
            sheet.push(generate_with_sliders(&model, &h, &Phrase::null(), seed, &config.with_frac(frac))?);
        }
    }
    std::fs::write(out.join("sheet.png"), ImageSample::grid(&sheet, fracs.len(), 3)?.to_png()?)?;
    Ok(())
}
