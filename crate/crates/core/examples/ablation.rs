//! The three-arm ablation: disentangled low-rank slider, the same slider
//! without a preservation set, and a full-rank update. Arms are compared
//! at equal mean change in size.
//!
//!     cargo run --release --example ablation -- [OUT_DIR] [SEEDS]

use std::path::{Path, PathBuf};

use concept_sliders::checkpoint::Checkpoint;
use concept_sliders::eval::{run_ablation, AblationArm, AblationConfig, Protected};
use concept_sliders::slider::{train_text_slider, DeltaForm, SliderSpec};
use concept_sliders::vocab::Phrase;

const REFERENCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/reference.ckpt");

fn main() -> concept_sliders::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/ablation".into()));
    let n: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(200);
    let model = Checkpoint::load(Path::new(REFERENCE))?.model;

    let spec = SliderSpec {
        enhance: "large".into(),
        suppress: "small".into(),
        preserve: vec!["circle".into(), "square".into()],
        ..SliderSpec::default()
    };
    let variants = [
        SliderSpec { name: "ours".into(), ..spec.clone() },
        SliderSpec { name: "no-disentanglement".into(), preserve: vec![], ..spec.clone() },
        SliderSpec { name: "full-rank".into(), delta_form: DeltaForm::Full, ..spec },
    ];
    let adaptors = variants
        .iter()
        .map(|s| train_text_slider(&model, s).map(|t| t.adaptor))
        .collect::<concept_sliders::Result<Vec<_>>>()?;
    let arms: Vec<AblationArm> = adaptors
        .iter()
        .map(|a| AblationArm { name: a.name.clone(), adaptor: a })
        .collect();

    let seeds: Vec<u64> = (10_000..10_000 + n).collect();
    let calibration: Vec<u64> = (20_000..20_050).collect();
    let table = run_ablation(
        &model,
        &arms,
        "ours",
        &Phrase::null(),
        &seeds,
        &calibration,
        &[Protected::Shape],
        &AblationConfig::default(),
    )?;
    table.write_csv(&out.join("ablation.csv"))?;
    table.write_json(&out.join("ablation.json"))?;

    println!("{:<20} {:>6} {:>12} {:>10} {:>13}", "arm", "alpha", "delta area", "distance", "interference");
    for r in &table.rows {
        println!(
            "{:<20} {:>6.2} {:>12.1} {:>10.4} {:>13.3}",
            r.arm, r.alpha, r.delta_attribute.mean, r.structural_distance.mean, r.interference
        );
    }
    for key in ["ours<no-disentanglement", "ours<full-rank"] {
        println!(
            "{key}: interference p {:.3}, distance p {:.3}",
            table.interference_p[key], table.distance_p[key]
        );
    }
    Ok(())
}
