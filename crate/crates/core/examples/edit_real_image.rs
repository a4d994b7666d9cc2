//! Editing an image the model did not generate: a rendered scene (or any
//! 32x32 RGB PNG given on the command line) is inverted with DDIM and the
//! tail of the trajectory is regenerated with a slider on.
//!
//!     cargo run --release --example edit_real_image -- [IMAGE.png] [OUT_DIR]

use std::path::{Path, PathBuf};

use concept_sliders::checkpoint::Checkpoint;
use concept_sliders::dataset::{measure, render, Hue, ProceduralScene, Shape};
use concept_sliders::image::ImageSample;
use concept_sliders::inference::{edit_real_image, GenerationConfig};
use concept_sliders::lora::SliderHandle;
use concept_sliders::slider::{train_text_slider, SliderSpec};
use concept_sliders::vocab::Phrase;

const REFERENCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/reference.ckpt");

fn main() -> concept_sliders::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (input, out) = match args.as_slice() {
        [img, out, ..] => (Some(img.clone()), PathBuf::from(out)),
        [img] if img.ends_with(".png") => (Some(img.clone()), PathBuf::from("out/edit_real_image")),
        [out] => (None, PathBuf::from(out)),
        [] => (None, PathBuf::from("out/edit_real_image")),
    };
    std::fs::create_dir_all(&out)?;
    let image = match input {
        Some(path) => ImageSample::from_png(&std::fs::read(path)?)?,
        None => render(&ProceduralScene {
            shape: Shape::Circle,
            size: 0.22,
            brightness: 0.85,
            position: (0.5, 0.5),
            background: 0.15,
            hue: Hue::Red,
        })?,
    };

    let model = Checkpoint::load(Path::new(REFERENCE))?.model;
    let slider = train_text_slider(
        &model,
        &SliderSpec {
            name: "size".into(),
            enhance: "large".into(),
            suppress: "small".into(),
            ..SliderSpec::default()
        },
    )?
    .adaptor;

    let alphas = [-1.5, -0.75, 0.0, 0.75, 1.5];
    let mut sheet = vec![image.clone()];
    for frac in [0.4, 0.6] {
        let config = GenerationConfig::default().with_frac(frac);
        for &alpha in &alphas {
            let h = [SliderHandle::new(&slider, alpha)?];
            let edited = edit_real_image(&model, &image, &h, &Phrase::null(), &config)?;
            println!("frac {frac:.1} alpha {alpha:+.2}: area {:.1} px", measure(&edited).area);
            sheet.push(edited);
        }
    }
    println!("input area {:.1} px", measure(&image).area);
    // First cell is the input; each following row of five is one gate.
    std::fs::write(out.join("edits.png"), ImageSample::grid(&sheet, 1 + alphas.len(), 4)?.to_png()?)?;
    Ok(())
}
