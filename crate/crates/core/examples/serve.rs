//! Serves the reference model over HTTP with every `.slider` file in a
//! directory preloaded. Try:
//!
//!     cargo run --release --example text_slider
//!     cargo run --release --example serve -- out/text_slider
//!     curl localhost:8080/sliders
//!     curl -X POST localhost:8080/generate -H 'content-type: application/json' \
//!          -d '{"caption": ["red"], "seed": 4, "sliders": [{"id": "<id>", "alpha": 1.5}]}'
//!     curl -F file=@out/image_pair_slider/radius.slider localhost:8080/sliders

use std::path::Path;

use concept_sliders::checkpoint::Checkpoint;
use concept_sliders::service::{serve, AppState, Registry};

const REFERENCE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/reference.ckpt");

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let dir = args.next().unwrap_or_else(|| "out/registry".into());
    let addr = args.next().unwrap_or_else(|| "127.0.0.1:8080".into());
    let model = Checkpoint::load(Path::new(REFERENCE))?.model;
    let registry = Registry::open(Path::new(&dir), &model)?;
    for info in registry.list() {
        println!("{}  {} (rank {})", info.id, info.name, info.rank);
    }
    serve(AppState::new(model, registry), &addr).await?;
    Ok(())
}
