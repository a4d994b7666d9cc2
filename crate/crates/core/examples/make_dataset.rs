//! Samples a labeled procedural dataset, exports it as PNG + `manifest.json`,
//! and checks every image against the attribute oracles.
//!
//!     cargo run --release --example make_dataset -- [OUT_DIR] [N]

use std::collections::BTreeMap;
use std::path::PathBuf;

use concept_sliders::dataset::{export_dataset, measure, sample_dataset_with, DatasetConfig};
use concept_sliders::image::ImageSample;

fn main() -> concept_sliders::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "out/dataset".into()));
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(300);

    let config = DatasetConfig {
        shape_size_coupling: 0.5,
        ..DatasetConfig::new(n, 1)
    };
    let data = sample_dataset_with(&config)?;
    export_dataset(&data, &out)?;

    let mut captions: BTreeMap<String, usize> = BTreeMap::new();
    let mut worst_area: f64 = 0.0;
    let mut mismatched = 0;
    for item in &data.items {
        *captions.entry(item.caption.join(" ")).or_default() += 1;
        let m = measure(&item.image);
        let area = item.scene.analytic_area(item.image.width());
        worst_area = worst_area.max((m.area - area).abs() / area);
        if m.caption(item.image.width()) != item.caption {
            mismatched += 1;
        }
    }
    println!("{n} images in {} ({} distinct captions)", out.display(), captions.len());
    println!("oracle: worst area error {:.2}%, caption mismatches {mismatched}", 100.0 * worst_area);
    for (caption, count) in captions.iter().take(5) {
        println!("  {count:>3}  {caption}");
    }

    let first: Vec<ImageSample> = data.items.iter().take(32).map(|i| i.image.clone()).collect();
    std::fs::write(out.join("sheet.png"), ImageSample::grid(&first, 8, 3)?.to_png()?)?;
    Ok(())
}
