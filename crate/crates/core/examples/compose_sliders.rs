//! Two independently trained sliders stacked on one model: size and
//! brightness. Also renders the inference-time alternative (adding
//! `eta * (eps(large) - eps(small))` to each guided step past the gate) for
//! comparison.
//!
//!     cargo run --release --example compose_sliders -- [OUT_DIR]

use std::path::{Path, PathBuf};

use concept_sliders::checkpoint::Checkpoint;
use concept_sliders::eval::Attribute;
use concept_sliders::image::ImageSample;
use concept_sliders::inference::{compose_inference_baseline, generate_with_sliders, GenerationConfig, ScoreComposition};
use concept_sliders::lora::SliderHandle;
use concept_sliders::slider::{train_text_slider, SliderSpec};
use concept_sliders::vocab::Phrase;

const REFERENCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/reference.ckpt");

fn main() -> concept_sliders::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "out/compose_sliders".into()));
    std::fs::create_dir_all(&out)?;
    let model = Checkpoint::load(Path::new(REFERENCE))?.model;

    let size = train_text_slider(
        &model,
        &SliderSpec {
            name: "size".into(),
            enhance: "large".into(),
            suppress: "small".into(),
            ..SliderSpec::default()
        },
    )?
    .adaptor;
    let brightness = train_text_slider(
        &model,
        &SliderSpec {
            name: "brightness".into(),
            enhance: "bright".into(),
            suppress: "dim".into(),
            seed: 1,
            ..SliderSpec::default()
        },
    )?
    .adaptor;

    let config = GenerationConfig::default();
    let levels = [-1.5, 0.0, 1.5];
    let seed = 3;
    let mut sheet = Vec::new();
    println!("rows: size alpha, columns: brightness alpha (seed {seed})");
    for &a in &levels {
        let mut line = String::new();
        for &b in &levels {
            let h = [SliderHandle::new(&size, a)?, SliderHandle::new(&brightness, b)?];
            let img = generate_with_sliders(&model, &h, &Phrase::null(), seed, &config)?;
            line += &format!(
                "  area {:>6.1} bright {:.2}",
                Attribute::Size.measure(&img),
                Attribute::Brightness.measure(&img)
            );
            sheet.push(img);
        }
        println!("{a:+.1}:{line}");
    }
    std::fs::write(out.join("grid.png"), ImageSample::grid(&sheet, levels.len(), 4)?.to_png()?)?;

    let vocab = model.vocab();
    let baseline = compose_inference_baseline(
        &model,
        &ScoreComposition {
            target: Phrase::null(),
            enhance: vocab.phrase("large")?,
            suppress: vocab.phrase("small")?,
            eta: 1.5,
        },
        seed,
        &config,
    )?;
    println!("inference-time composition, eta 1.5: area {:.1}", Attribute::Size.measure(&baseline));
    std::fs::write(out.join("baseline.png"), baseline.to_png()?)?;
    Ok(())
}
