//! Trains a size slider from text alone ("large" vs "small", preserving
//! "circle" and "square") against the reference model, then sweeps its
//! strength.
//!
//! Writes `size.slider`, `sweep.csv`, `sweep.svg` and `sheet.png` (one row
//! per seed, one column per alpha).
//!
//!     cargo run --release --example text_slider -- [OUT_DIR]

use std::path::{Path, PathBuf};
use std::time::Instant;

use concept_sliders::checkpoint::Checkpoint;
use concept_sliders::eval::{alpha_sweep, Attribute};
use concept_sliders::image::ImageSample;
use concept_sliders::inference::{generate_with_sliders, GenerationConfig};
use concept_sliders::lora::SliderHandle;
use concept_sliders::slider::{train_text_slider, SliderSpec};
use concept_sliders::vocab::Phrase;

const REFERENCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/reference.ckpt");

fn main() -> concept_sliders::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/text_slider".into()));
    std::fs::create_dir_all(&out)?;
    let model = Checkpoint::load(Path::new(REFERENCE))?.model;

    let spec = SliderSpec {
        name: "size".into(),
        enhance: "large".into(),
        suppress: "small".into(),
        preserve: vec!["circle".into(), "square".into()],
        ..SliderSpec::default()
    };
    let start = Instant::now();
    let trained = train_text_slider(&model, &spec)?;
    println!(
        "trained in {:.0}s, loss {:.3} -> {:.3}",
        start.elapsed().as_secs_f64(),
        trained.losses[0],
        trained.losses[trained.losses.len() - 1]
    );
    let slider = trained.adaptor;
    slider.save(&out.join("size.slider"))?;

    let alphas = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let config = GenerationConfig::default();
    let seeds: Vec<u64> = (0..40).collect();
    let sweep = alpha_sweep(&model, &slider, &alphas, &Phrase::null(), &seeds, &config, Attribute::Size)?;
    sweep.write_csv(&out.join("sweep.csv"))?;
    sweep.write_svg(&out.join("sweep.svg"), Attribute::Size)?;
    for (a, m) in sweep.alphas.iter().zip(&sweep.means) {
        println!("alpha {a:+.1}: mean area {m:.1} px");
    }
    println!("strictly monotone on {:.0}% of seeds", 100.0 * sweep.monotone_fraction());

    let mut sheet = Vec::new();
    for seed in 0..6 {
        for &alpha in &alphas {
            let h = [SliderHandle::new(&slider, alpha)?];
            sheet.push(generate_with_sliders(&model, &h, &Phrase::null(), seed, &config)?);
        }
    }
    std::fs::write(out.join("sheet.png"), ImageSample::grid(&sheet, alphas.len(), 3)?.to_png()?)?;
    Ok(())
}
