//! Rebuilds `fixtures/reference.ckpt`, the base model every slider example
//! and the acceptance suite load.
//!
//! Three stages on the default architecture, shape tied to size with
//! probability 0.5:
//!   1. 150 epochs on 1024 scenes, lr 2e-3, raw weights;
//!   2. 100 epochs on 2048 scenes (a superset), lr 1e-3, EMA 0.999;
//!   3. 150 more epochs of stage 2 with a fresh learning-rate cycle.
//!
//! About two hours on one core. `--quick` runs a few epochs of each stage
//! to check the pipeline.
//!
//!     cargo run --release --example train_reference -- [--quick] [OUT]

use std::path::PathBuf;
use std::time::Instant;

use concept_sliders::checkpoint::{Checkpoint, TrainingRecord};
use concept_sliders::dataset::{sample_dataset_with, DatasetConfig};
use concept_sliders::diffusion::{train_base, TrainConfig};
use concept_sliders::model::{DenoiserConfig, DenoiserModel};

fn stage(model: &mut DenoiserModel, n: usize, config: TrainConfig) -> concept_sliders::Result<TrainingRecord> {
    let dataset_config = DatasetConfig {
        shape_size_coupling: 0.5,
        ..DatasetConfig::new(n, 1)
    };
    let dataset = sample_dataset_with(&dataset_config)?;
    let sched = model.schedule().clone();
    let start = Instant::now();
    let curve = train_base(model, &dataset, &sched, &config)?;
    println!(
        "{n} scenes x {} epochs: loss {:.1} -> {:.1} in {:.0}s",
        config.epochs,
        curve[0],
        curve[curve.len() - 1],
        start.elapsed().as_secs_f64()
    );
    Ok(TrainingRecord {
        config,
        dataset: dataset_config,
        loss_curve: curve,
    })
}

fn main() -> concept_sliders::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let quick = args.iter().any(|a| a == "--quick");
    let out = args
        .iter()
        .find(|a| !a.starts_with("--"))
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("reference.ckpt"));
    let (e1, e2, e3) = if quick { (2, 1, 1) } else { (150, 100, 150) };

    let mut model = DenoiserModel::new(DenoiserConfig::default(), 0)?;
    println!("{} parameters", model.param_count());
    stage(
        &mut model,
        1024,
        TrainConfig {
            epochs: e1,
            ..TrainConfig::default()
        },
    )?;
    let finetune = |epochs| TrainConfig {
        epochs,
        lr: 1e-3,
        ema: 0.999,
        ..TrainConfig::default()
    };
    stage(&mut model, 2048, finetune(e2))?;
    let record = stage(&mut model, 2048, finetune(e3))?;
    // The header keeps the final stage; the first is fixed by this file.
    Checkpoint {
        model,
        training: Some(record),
    }
    .save(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
