use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use concept_sliders::checkpoint::{Checkpoint, TrainingRecord};
use concept_sliders::dataset::{
    export_dataset, export_pairs, import_pairs, make_pairs, sample_dataset_with, DatasetConfig, PairAttribute,
};
use concept_sliders::diffusion::{train_base, TrainConfig};
use concept_sliders::eval::{
    alpha_sweep, evaluate_slider, run_ablation, sdedit_sweep, AblationArm, AblationConfig, Attribute, Protected,
};
use concept_sliders::image::ImageSample;
use concept_sliders::inference::{edit_real_image, generate_with_sliders, GenerationConfig};
use concept_sliders::lora::{LoRAAdaptor, SliderHandle};
use concept_sliders::model::{DenoiserConfig, DenoiserModel};
use concept_sliders::service::{serve, AppState, Registry};
use concept_sliders::slider::{train_image_slider, train_text_slider, DeltaForm, PairTrainConfig, SliderSpec};

/// Train, apply and evaluate concept sliders on the toy shapes model.
#[derive(Parser)]
#[command(name = "sliders", version)]
struct Cli {
    /// Directory holding `model.ckpt` and the `sliders/` registry.
    #[arg(long, env = "SLIDERS_HOME", default_value = "sliders-home", global = true)]
    home: PathBuf,
    /// Seed for every random choice of the run.
    #[arg(long, default_value_t = 0, global = true)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base denoiser on a fresh procedural dataset.
    TrainBase(TrainBaseArgs),
    /// Export a labeled dataset, or before/after pairs, as PNG + JSON.
    MakeDataset(MakeDatasetArgs),
    /// Train a slider from phrases or from image pairs.
    #[command(subcommand)]
    TrainSlider(TrainSlider),
    /// Generate (or edit) one image with sliders applied.
    Generate(GenerateArgs),
    /// Measurement suite.
    #[command(subcommand)]
    Eval(Eval),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Args)]
struct TrainBaseArgs {
    #[arg(long, default_value_t = 1024)]
    n: usize,
    #[arg(long, default_value_t = 0.5)]
    coupling: f64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().p_uncond)]
    p_uncond: f64,
    #[arg(long, default_value_t = TrainConfig::default().caption_keep)]
    caption_keep: f64,
    #[arg(long, default_value_t = TrainConfig::default().ema)]
    ema: f64,
    /// Continue from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Defaults to `<home>/model.ckpt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MakeDatasetArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 0.0)]
    coupling: f64,
    /// Emit `(low, high)` pairs of this attribute instead of a dataset.
    #[arg(long, value_enum)]
    pairs: Option<PairKind>,
    #[arg(long, default_value_t = 0.15)]
    low: f64,
    #[arg(long, default_value_t = 0.4)]
    high: f64,
    /// Condition phrase stored with pairs.
    #[arg(long)]
    guidance: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PairKind {
    Size,
    Brightness,
}

impl From<PairKind> for PairAttribute {
    fn from(k: PairKind) -> Self {
        match k {
            PairKind::Size => PairAttribute::Size,
            PairKind::Brightness => PairAttribute::Brightness,
        }
    }
}

#[derive(Subcommand)]
enum TrainSlider {
    /// Guided-score objective from enhance/suppress phrases.
    Text(TextArgs),
    /// Paired-image objective.
    Pairs(PairArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Defaults to `<home>/model.ckpt`.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct SliderOut {
    /// Write here instead of registering in `<home>/sliders`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TextArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    out: SliderOut,
    /// JSON spec; the flags below are ignored when given.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "slider")]
    name: String,
    #[arg(long, default_value = "")]
    target: String,
    #[arg(long, default_value = "large")]
    enhance: String,
    #[arg(long, default_value = "small")]
    suppress: String,
    /// Repeatable preservation phrase.
    #[arg(long)]
    preserve: Vec<String>,
    #[arg(long, default_value_t = SliderSpec::default().eta)]
    eta: f64,
    #[arg(long)]
    normalize_preserve: bool,
    #[arg(long, default_value_t = SliderSpec::default().rank)]
    rank: usize,
    /// Train an unconstrained ΔW instead of a low-rank one.
    #[arg(long)]
    full_rank: bool,
    #[arg(long, default_value_t = SliderSpec::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = SliderSpec::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = SliderSpec::default().batch)]
    batch: usize,
    #[arg(long, default_value_t = SliderSpec::default().trajectories)]
    trajectories: usize,
}

#[derive(Args)]
struct PairArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    out: SliderOut,
    /// Directory from `make-dataset --pairs`; otherwise pairs are synthesized.
    #[arg(long)]
    pairs_dir: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "size")]
    attribute: PairKind,
    #[arg(long, default_value_t = 0.15)]
    low: f64,
    #[arg(long, default_value_t = 0.4)]
    high: f64,
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long)]
    guidance: Option<String>,
    #[arg(long, default_value = "pairs")]
    name: String,
    #[arg(long, default_value_t = PairTrainConfig::default().rank)]
    rank: usize,
    #[arg(long, default_value_t = PairTrainConfig::default().epochs)]
    epochs: usize,
    #[arg(long, default_value_t = PairTrainConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = PairTrainConfig::default().batch)]
    batch: usize,
}

#[derive(Args, Clone)]
struct GenArgs {
    #[arg(long, default_value = "")]
    caption: String,
    #[arg(long, default_value_t = GenerationConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = GenerationConfig::default().cfg_scale)]
    cfg_scale: f64,
    #[arg(long, default_value_t = GenerationConfig::default().sdedit_frac)]
    sdedit_frac: f64,
}

impl GenArgs {
    fn config(&self) -> GenerationConfig {
        GenerationConfig {
            steps: self.steps,
            cfg_scale: self.cfg_scale,
            sdedit_frac: self.sdedit_frac,
        }
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    gen: GenArgs,
    /// `<id|path>=<alpha>`, repeatable.
    #[arg(long = "slider")]
    sliders: Vec<String>,
    /// Edit this PNG instead of sampling from noise.
    #[arg(long)]
    edit: Option<PathBuf>,
    #[arg(long, default_value = "out.png")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Eval {
    /// Δ-attribute, structural distance and interference at one strength.
    Table(EvalTableArgs),
    AlphaSweep(AlphaSweepArgs),
    SdeditSweep(SdeditSweepArgs),
    /// Matched-Δ comparison of several sliders.
    Ablation(AblationArgs),
}

#[derive(Args)]
struct EvalCommon {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    gen: GenArgs,
    #[arg(long, default_value_t = 100)]
    seeds: u64,
    #[arg(long, value_enum, default_value = "size")]
    attribute: AttributeArg,
    #[arg(long, default_value = "eval-out")]
    out_dir: PathBuf,
}

impl EvalCommon {
    fn seeds(&self, base: u64) -> Vec<u64> {
        (0..self.seeds).map(|i| base.wrapping_add(i)).collect()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AttributeArg {
    Size,
    Brightness,
}

impl From<AttributeArg> for Attribute {
    fn from(a: AttributeArg) -> Self {
        match a {
            AttributeArg::Size => Attribute::Size,
            AttributeArg::Brightness => Attribute::Brightness,
        }
    }
}

#[derive(Args)]
struct EvalTableArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long)]
    slider: String,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
}

#[derive(Args)]
struct AlphaSweepArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long)]
    slider: String,
    #[arg(long, value_delimiter = ',', default_value = "-2,-1,0,1,2")]
    alphas: Vec<f64>,
}

#[derive(Args)]
struct SdeditSweepArgs {
    #[command(flatten)]
    common: EvalCommon,
    #[arg(long)]
    slider: String,
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    fracs: Vec<f64>,
}

#[derive(Args)]
struct AblationArgs {
    #[command(flatten)]
    common: EvalCommon,
    /// `<name>=<id|path>`, repeatable; the first arm is the reference.
    #[arg(long = "arm", required = true)]
    arms: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    reference_alpha: f64,
    #[arg(long, default_value_t = 50)]
    calibration_seeds: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let home = cli.home.clone();
    let seed = cli.seed;
    match cli.command {
        Command::TrainBase(a) => train_base_cmd(&home, seed, a),
        Command::MakeDataset(a) => make_dataset_cmd(seed, a),
        Command::TrainSlider(TrainSlider::Text(a)) => train_text_cmd(&home, seed, a),
        Command::TrainSlider(TrainSlider::Pairs(a)) => train_pairs_cmd(&home, seed, a),
        Command::Generate(a) => generate_cmd(&home, seed, a),
        Command::Eval(e) => eval_cmd(&home, seed, e),
        Command::Serve(a) => {
            let model = load_model(&home, &a.model)?;
            let registry = Registry::open(&home.join("sliders"), &model)?;
            log::info!("{} sliders registered", registry.len());
            let state = AppState::new(model, registry);
            tokio::runtime::Runtime::new()?.block_on(serve(state, &a.addr))?;
            Ok(())
        }
    }
}

fn model_path(home: &Path, m: &ModelArgs) -> PathBuf {
    m.model.clone().unwrap_or_else(|| home.join("model.ckpt"))
}

fn load_model(home: &Path, m: &ModelArgs) -> Result<DenoiserModel> {
    let path = model_path(home, m);
    Ok(Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?.model)
}

/// A path if one exists, otherwise a registry id or unique id prefix.
fn resolve_slider(home: &Path, model: &DenoiserModel, key: &str) -> Result<LoRAAdaptor> {
    let path = Path::new(key);
    if path.is_file() {
        return Ok(LoRAAdaptor::load(path, model)?);
    }
    let registry = Registry::open(&home.join("sliders"), model)?;
    let matches: Vec<_> = registry.list().into_iter().filter(|s| s.id.starts_with(key)).collect();
    match matches.as_slice() {
        [one] => Ok((*registry.get(&one.id).expect("listed")).clone()),
        [] => bail!("no slider file or registry id matches `{key}`"),
        _ => bail!("slider id prefix `{key}` is ambiguous"),
    }
}

fn store_slider(home: &Path, model: &DenoiserModel, adaptor: &LoRAAdaptor, out: &SliderOut) -> Result<()> {
    match &out.out {
        Some(path) => {
            adaptor.save(path)?;
            println!("{}", path.display());
        }
        None => {
            let mut registry = Registry::open(&home.join("sliders"), model)?;
            println!("{}", registry.register(&adaptor.to_bytes()?, model)?);
        }
    }
    Ok(())
}

fn train_base_cmd(home: &Path, seed: u64, a: TrainBaseArgs) -> Result<()> {
    let dataset_config = DatasetConfig {
        n: a.n,
        seed,
        shape_size_coupling: a.coupling,
    };
    let dataset = sample_dataset_with(&dataset_config)?;
    let config = TrainConfig {
        epochs: a.epochs,
        batch: a.batch,
        lr: a.lr,
        p_uncond: a.p_uncond,
        caption_keep: a.caption_keep,
        ema: a.ema,
        seed,
        ..TrainConfig::default()
    };
    let mut model = match &a.init {
        Some(path) => Checkpoint::load(path)?.model,
        None => DenoiserModel::new(DenoiserConfig::default(), seed)?,
    };
    let sched = model.schedule().clone();
    let curve = train_base(&mut model, &dataset, &sched, &config)?;
    let out = a.out.unwrap_or_else(|| home.join("model.ckpt"));
    Checkpoint {
        model,
        training: Some(TrainingRecord {
            config,
            dataset: dataset_config,
            loss_curve: curve.clone(),
        }),
    }
    .save(&out)?;
    println!("{}: loss {:.2} -> {:.2}", out.display(), curve[0], curve[curve.len() - 1]);
    Ok(())
}

fn make_dataset_cmd(seed: u64, a: MakeDatasetArgs) -> Result<()> {
    match a.pairs {
        Some(kind) => {
            let mut pairs = make_pairs(kind.into(), a.low, a.high, a.n, seed)?;
            pairs.guidance = a.guidance;
            export_pairs(&pairs, &a.out)?;
        }
        None => {
            let dataset = sample_dataset_with(&DatasetConfig {
                n: a.n,
                seed,
                shape_size_coupling: a.coupling,
            })?;
            export_dataset(&dataset, &a.out)?;
        }
    }
    println!("{}", a.out.display());
    Ok(())
}

fn train_text_cmd(home: &Path, seed: u64, a: TextArgs) -> Result<()> {
    let model = load_model(home, &a.model)?;
    let spec = match &a.spec {
        Some(path) => SliderSpec::from_json(&std::fs::read_to_string(path)?)?,
        None => SliderSpec {
            name: a.name.clone(),
            target: a.target.clone(),
            enhance: a.enhance.clone(),
            suppress: a.suppress.clone(),
            preserve: a.preserve.clone(),
            eta: a.eta,
            normalize_preserve: a.normalize_preserve,
            rank: a.rank,
            delta_form: if a.full_rank { DeltaForm::Full } else { DeltaForm::LowRank },
            epochs: a.epochs,
            lr: a.lr,
            batch: a.batch,
            seed,
            trajectories: a.trajectories,
            ..SliderSpec::default()
        },
    };
    let outcome = train_text_slider(&model, &spec)?;
    log::info!("final loss {:?}", outcome.losses.last());
    store_slider(home, &model, &outcome.adaptor, &a.out)
}

fn train_pairs_cmd(home: &Path, seed: u64, a: PairArgs) -> Result<()> {
    let model = load_model(home, &a.model)?;
    let mut pairs = match &a.pairs_dir {
        Some(dir) => import_pairs(dir)?,
        None => make_pairs(a.attribute.into(), a.low, a.high, a.n, seed)?,
    };
    if a.guidance.is_some() {
        pairs.guidance = a.guidance.clone();
    }
    let config = PairTrainConfig {
        name: a.name.clone(),
        rank: a.rank,
        epochs: a.epochs,
        lr: a.lr,
        batch: a.batch,
        seed,
        ..PairTrainConfig::default()
    };
    let outcome = train_image_slider(&model, &pairs, &config)?;
    log::info!("final loss {:?}", outcome.losses.last());
    store_slider(home, &model, &outcome.adaptor, &a.out)
}

fn parse_pair(s: &str) -> Result<(&str, &str)> {
    s.rsplit_once('=').with_context(|| format!("expected `<key>=<value>`, got `{s}`"))
}

fn generate_cmd(home: &Path, seed: u64, a: GenerateArgs) -> Result<()> {
    let model = load_model(home, &a.model)?;
    let mut adaptors = Vec::new();
    for s in &a.sliders {
        let (key, alpha) = parse_pair(s)?;
        adaptors.push((resolve_slider(home, &model, key)?, alpha.parse::<f64>()?));
    }
    let handles = adaptors
        .iter()
        .map(|(ad, alpha)| SliderHandle::new(ad, *alpha))
        .collect::<Result<Vec<_>, _>>()?;
    let condition = model.vocab().phrase(&a.gen.caption)?;
    let config = a.gen.config();
    let image = match &a.edit {
        Some(path) => {
            let input = ImageSample::from_png(&std::fs::read(path)?)?;
            edit_real_image(&model, &input, &handles, &condition, &config)?
        }
        None => generate_with_sliders(&model, &handles, &condition, seed, &config)?,
    };
    std::fs::write(&a.out, image.to_png()?)?;
    println!("{}", a.out.display());
    Ok(())
}

const PROTECTED: [Protected; 2] = [Protected::Shape, Protected::Hue];

fn eval_cmd(home: &Path, seed: u64, e: Eval) -> Result<()> {
    match e {
        Eval::Table(a) => {
            let c = &a.common;
            let model = load_model(home, &c.model)?;
            let adaptor = resolve_slider(home, &model, &a.slider)?;
            let cond = model.vocab().phrase(&c.gen.caption)?;
            let report = evaluate_slider(&model, &adaptor, a.alpha, &cond, &c.seeds(seed), &c.gen.config(), c.attribute.into(), &PROTECTED)?;
            report.write_json(&c.out_dir.join("table.json"))?;
            report.write_csv(&c.out_dir.join("table.csv"))?;
            println!(
                "delta {:.3} [{:.3}, {:.3}]  distance {:.4}  interference {:.3}",
                report.delta_attribute.mean,
                report.delta_attribute.ci_low,
                report.delta_attribute.ci_high,
                report.structural_distance.mean,
                report.interference
            );
        }
        Eval::AlphaSweep(a) => {
            let c = &a.common;
            let model = load_model(home, &c.model)?;
            let adaptor = resolve_slider(home, &model, &a.slider)?;
            let cond = model.vocab().phrase(&c.gen.caption)?;
            let sweep = alpha_sweep(&model, &adaptor, &a.alphas, &cond, &c.seeds(seed), &c.gen.config(), c.attribute.into())?;
            concept_sliders::eval::write_json(&c.out_dir.join("alpha_sweep.json"), &sweep)?;
            sweep.write_csv(&c.out_dir.join("alpha_sweep.csv"))?;
            sweep.write_svg(&c.out_dir.join("alpha_sweep.svg"), c.attribute.into())?;
            println!("means {:?}  monotone {:.2}  ratio {:.2}", sweep.means, sweep.monotone_fraction(), sweep.ratio);
        }
        Eval::SdeditSweep(a) => {
            let c = &a.common;
            let model = load_model(home, &c.model)?;
            let adaptor = resolve_slider(home, &model, &a.slider)?;
            let cond = model.vocab().phrase(&c.gen.caption)?;
            let sweep = sdedit_sweep(&model, &adaptor, a.alpha, &a.fracs, &cond, &c.seeds(seed), &c.gen.config(), c.attribute.into())?;
            concept_sliders::eval::write_json(&c.out_dir.join("sdedit_sweep.json"), &sweep)?;
            sweep.write_csv(&c.out_dir.join("sdedit_sweep.csv"))?;
            sweep.write_svg(&c.out_dir.join("sdedit_sweep.svg"))?;
            println!(
                "distance rho {:.3} (p {:.2e})  |delta| rho {:.3} (p {:.2e})",
                sweep.distance_trend.rho, sweep.distance_trend.p_value, sweep.delta_trend.rho, sweep.delta_trend.p_value
            );
        }
        Eval::Ablation(a) => {
            let c = &a.common;
            let model = load_model(home, &c.model)?;
            let mut loaded = Vec::new();
            for arm in &a.arms {
                let (name, key) = arm.split_once('=').with_context(|| format!("expected `<name>=<slider>`, got `{arm}`"))?;
                loaded.push((name.to_string(), resolve_slider(home, &model, key)?));
            }
            let arms: Vec<AblationArm> = loaded
                .iter()
                .map(|(name, adaptor)| AblationArm { name: name.clone(), adaptor })
                .collect();
            let cond = model.vocab().phrase(&c.gen.caption)?;
            let config = AblationConfig {
                generation: c.gen.config(),
                attribute: c.attribute.into(),
                reference_alpha: a.reference_alpha,
                ..AblationConfig::default()
            };
            let calibration: Vec<u64> = (0..a.calibration_seeds).map(|i| seed.wrapping_add(1 << 32).wrapping_add(i)).collect();
            let table = run_ablation(&model, &arms, &arms[0].name, &cond, &c.seeds(seed), &calibration, &PROTECTED, &config)?;
            table.write_json(&c.out_dir.join("ablation.json"))?;
            table.write_csv(&c.out_dir.join("ablation.csv"))?;
            for r in &table.rows {
                println!(
                    "{:<24} alpha {:>6.3}  delta {:>8.3}  distance {:.4}  interference {:.3}",
                    r.arm, r.alpha, r.delta_attribute.mean, r.structural_distance.mean, r.interference
                );
            }
        }
    }
    Ok(())
}
