//! Command-line surface for the attention-attack library: zoo training,
//! single-image attacks, heat-map export, transfer evaluation, and
//! adversarial dataset generation.
//!
//! Every run writes `run_metadata.json` under `--out` with the fully
//! resolved configuration, so a run is reproducible from its artifacts
//! alone. Exit codes: 0 success, 1 usage error, 2 runtime failure.

use anyhow::{anyhow, bail, Context, Result};
use aoa::attack::{run_attack, AttackConfig, Enhancements, StopReason};
use aoa::data::{
    load_idx, load_png_corpus, read_png, synthetic_corpus, write_png_u16, Dataset, SplitTag,
    SyntheticConfig,
};
use aoa::evaluation::{
    generate_adversarial_dataset, run_experiment, select_samples, write_report, ExperimentPlan,
};
use aoa::network::{build_zoo, load_model, save_model, Model, TrainReport, ZooConfig};
use aoa::relevance::{heatmap, write_heatmap, RelevanceConfig};
use aoa::rng::{derive_seed, Rng};
use aoa::tensor::Real;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

#[derive(Parser)]
#[command(
    name = "aoa",
    version,
    about = "Attention heat maps, attention-driven adversarial attacks, and transfer evaluation"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Directory for artifacts and run metadata.
    #[arg(long, global = true, default_value = "aoa-out")]
    out: PathBuf,
    /// Overrides the seed of the loaded or defaulted configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for sample-parallel work; never changes results.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// JSON configuration file for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print only errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model zoo on a dataset and save one file per architecture.
    TrainZoo(TrainZooArgs),
    /// Attack one image and write the adversarial PNG plus its trace.
    Attack(AttackArgs),
    /// Write the attention heat map for (model, image, class).
    Heatmap(HeatmapArgs),
    /// Run a transfer experiment plan and write its reports.
    Eval(EvalArgs),
    /// Attack a batch of correctly classified samples into a PNG corpus.
    GenDataset(GenDatasetArgs),
}

/// `synthetic`, `synthetic:TRAIN,TEST`, `idx:DIR`, or `png:DIR`.
const DATA_HELP: &str = "Dataset: synthetic[:TRAIN,TEST], idx:DIR, or png:DIR";

#[derive(Args)]
struct TrainZooArgs {
    #[arg(long, default_value = "synthetic", help = DATA_HELP)]
    data: String,
}

#[derive(Args)]
struct AttackArgs {
    /// Model file the attack is computed on.
    #[arg(long)]
    model: PathBuf,
    /// Image to attack (8- or 16-bit PNG, gray or RGB).
    #[arg(long)]
    image: PathBuf,
    /// Class under attack; the model's prediction when omitted.
    #[arg(long)]
    class: Option<usize>,
    /// Loss preset: aoa, pgd, cw, si-aoa, suppress, distract, boundary,
    /// log-boundary.
    #[arg(long)]
    loss: Option<String>,
    /// Comma-separated enhancements: mi,di,ti,si.
    #[arg(long)]
    enhance: Option<String>,
    #[arg(long)]
    alpha: Option<Real>,
    #[arg(long)]
    epsilon: Option<Real>,
    /// RMSE at which the attack stops.
    #[arg(long)]
    eta: Option<Real>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Relevance target class; the model's prediction when omitted.
    #[arg(long)]
    class: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value = "synthetic", help = DATA_HELP)]
    data: String,
    /// Directory of model files, as written by train-zoo.
    #[arg(long)]
    models: PathBuf,
}

#[derive(Args)]
struct GenDatasetArgs {
    #[arg(long, default_value = "synthetic", help = DATA_HELP)]
    data: String,
    /// Model file the attack is computed on.
    #[arg(long)]
    model: PathBuf,
    /// Correctly classified samples to attack.
    #[arg(long, default_value_t = 200)]
    count: usize,
    /// Loss preset; see attack --loss.
    #[arg(long)]
    loss: Option<String>,
    /// Comma-separated enhancements: mi,di,ti,si.
    #[arg(long)]
    enhance: Option<String>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here too; only real usage
            // problems exit nonzero.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(workers) = cli.global.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("building the worker pool")?;
    }
    std::fs::create_dir_all(&cli.global.out)
        .with_context(|| format!("creating {}", cli.global.out.display()))?;
    match &cli.command {
        Command::TrainZoo(args) => train_zoo(&cli.global, args),
        Command::Attack(args) => attack(&cli.global, args),
        Command::Heatmap(args) => heatmap_cmd(&cli.global, args),
        Command::Eval(args) => eval(&cli.global, args),
        Command::GenDataset(args) => gen_dataset(&cli.global, args),
    }
}

fn train_zoo(global: &Global, args: &TrainZooArgs) -> Result<()> {
    let mut cfg: ZooConfig = load_config(global)?.unwrap_or_default();
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    let data = DataSpec::parse(&args.data)?;
    write_metadata(
        global,
        "train-zoo",
        cfg.seed,
        &serde_json::json!({ "data": args.data, "zoo": cfg }),
    )?;
    let corpus = data.corpus()?;
    let zoo = build_zoo(&corpus, &cfg)?;

    let models_dir = global.out.join("models");
    std::fs::create_dir_all(&models_dir)
        .with_context(|| format!("creating {}", models_dir.display()))?;
    #[derive(Serialize)]
    struct ZooEntry<'a> {
        label: &'a str,
        file: String,
        report: &'a TrainReport,
    }
    let mut entries = Vec::new();
    for (model, report) in &zoo {
        let file = format!("{}.aoa", model.label);
        save_model(model, &models_dir.join(&file))?;
        say(
            global,
            &format!(
                "saved models/{file} (train accuracy {:.3}, test accuracy {:.3})",
                report.train_accuracy, report.test_accuracy
            ),
        );
        entries.push(ZooEntry {
            label: &model.label,
            file,
            report,
        });
    }
    write_json(&global.out.join("zoo_report.json"), &entries)
}

fn attack(global: &Global, args: &AttackArgs) -> Result<()> {
    let mut cfg: AttackConfig = load_config(global)?.unwrap_or_default();
    apply_attack_flags(
        &mut cfg,
        &args.loss,
        &args.enhance,
        args.alpha,
        args.epsilon,
        args.eta,
        args.max_iters,
    )?;
    if let Some(seed) = global.seed {
        cfg.seed = seed;
    }
    let model = load_model(&args.model)?;
    let image = read_png(&args.image)?;
    let class = match args.class {
        Some(c) => c,
        None => model.predict(&image)?,
    };
    write_metadata(
        global,
        "attack",
        cfg.seed,
        &serde_json::json!({
            "model": args.model,
            "image": args.image,
            "class": class,
            "attack": cfg,
        }),
    )?;

    let result = run_attack(&model, &image, class, &cfg)?;
    // 16-bit keeps the fractional adversarial pixels exact, which makes the
    // fixed-seed byte-identity contract hold at the file level.
    let adv_path = global.out.join("adversarial.png");
    write_png_u16(&adv_path, &result.x_adv)?;

    #[derive(Serialize)]
    struct Trace<'a> {
        class: usize,
        prediction: usize,
        iterations: usize,
        stop: StopReason,
        rmse: Real,
        trace: &'a [aoa::attack::IterationRecord],
    }
    write_json(
        &global.out.join("trace.json"),
        &Trace {
            class,
            prediction: result.prediction,
            iterations: result.iterations,
            stop: result.stop,
            rmse: result.rmse,
            trace: &result.trace,
        },
    )?;
    say(
        global,
        &format!(
            "attacked class {class}: now predicts {} after {} iterations (rmse {:.2})",
            result.prediction, result.iterations, result.rmse
        ),
    );
    Ok(())
}

fn heatmap_cmd(global: &Global, args: &HeatmapArgs) -> Result<()> {
    let cfg: RelevanceConfig = load_config(global)?.unwrap_or_default();
    let model = load_model(&args.model)?;
    let image = read_png(&args.image)?;
    let class = match args.class {
        Some(c) => c,
        None => model.predict(&image)?,
    };
    write_metadata(
        global,
        "heatmap",
        0,
        &serde_json::json!({
            "model": args.model,
            "image": args.image,
            "class": class,
            "relevance": cfg,
        }),
    )?;
    let h = heatmap(&model, &image, class, &cfg)?;
    write_heatmap(&h, &global.out.join("heatmap.png"))?;
    say(global, &format!("wrote heatmap.png for class {class}"));
    Ok(())
}

fn eval(global: &Global, args: &EvalArgs) -> Result<()> {
    let mut plan = match &global.config {
        Some(path) => read_plan(path)?,
        None => ExperimentPlan::default(),
    };
    if let Some(seed) = global.seed {
        plan.seed = seed;
    }
    let data = DataSpec::parse(&args.data)?;
    let zoo = load_zoo(&args.models, &plan)?;
    let test = data.test()?;
    let report = run_experiment(&zoo, &test, &plan)?;
    write_metadata(
        global,
        "eval",
        report.plan.seed,
        &serde_json::json!({
            "data": args.data,
            "models": args.models,
            "plan": report.plan,
        }),
    )?;
    write_report(&report, &global.out)?;
    say(
        global,
        &format!(
            "white-box error {:.1}%, mean rmse {:.2}, mean iterations {:.1}",
            report.white_box.mean, report.rmse.mean, report.iterations.mean
        ),
    );
    for cell in report.cells.values() {
        say(
            global,
            &format!(
                "  {} vs {}: error {:.1}±{:.2}%",
                cell.victim, cell.defense, cell.error.mean, cell.error.std
            ),
        );
    }
    Ok(())
}

fn gen_dataset(global: &Global, args: &GenDatasetArgs) -> Result<()> {
    let mut cfg: AttackConfig = load_config(global)?.unwrap_or_default();
    apply_attack_flags(&mut cfg, &args.loss, &args.enhance, None, None, None, None)?;
    let seed = global.seed.unwrap_or(cfg.seed);
    let data = DataSpec::parse(&args.data)?;
    write_metadata(
        global,
        "gen-dataset",
        seed,
        &serde_json::json!({
            "data": args.data,
            "model": args.model,
            "count": args.count,
            "attack": cfg,
        }),
    )?;
    let model = load_model(&args.model)?;
    let test = data.test()?;
    let mut rng = Rng::seed(derive_seed(seed, 0x5E1, 0));
    let indices = select_samples(&model, &test, args.count, &mut rng)?;
    let dir = global.out.join("dataset");
    let summary = generate_adversarial_dataset(&model, &test, &indices, &cfg, &dir, seed)?;
    say(
        global,
        &format!(
            "dataset/: {} written, {} reused, mean rmse {:.2}",
            summary.written, summary.reused, summary.mean_rmse
        ),
    );
    Ok(())
}

/// Applies the attack shorthand flags on top of the loaded config. The
/// enhancement list uses the reported constants: mi=momentum 1.0,
/// di=probability 0.7, ti=half-width 2, si=5 scale copies.
fn apply_attack_flags(
    cfg: &mut AttackConfig,
    loss: &Option<String>,
    enhance: &Option<String>,
    alpha: Option<Real>,
    epsilon: Option<Real>,
    eta: Option<Real>,
    max_iters: Option<usize>,
) -> Result<()> {
    if let Some(name) = loss {
        let preset = AttackConfig::preset(name)
            .ok_or_else(|| anyhow!("unknown loss preset '{name}'"))?;
        cfg.loss = preset.loss;
        cfg.enhance = preset.enhance;
    }
    if let Some(list) = enhance {
        let mut e = Enhancements::default();
        for item in list.split(',').filter(|s| !s.is_empty()) {
            match item {
                "mi" => e.momentum = 1.0,
                "di" => e.diversity_prob = 0.7,
                "ti" => e.translation_halfwidth = 2,
                "si" => e.scale_copies = 5,
                other => bail!("unknown enhancement '{other}' (expected mi, di, ti, si)"),
            }
        }
        cfg.enhance = e;
    }
    if let Some(v) = alpha {
        cfg.alpha = v;
    }
    if let Some(v) = epsilon {
        cfg.epsilon = v;
    }
    if let Some(v) = eta {
        cfg.eta = v;
    }
    if let Some(v) = max_iters {
        cfg.max_iters = v;
    }
    Ok(())
}

/// Where a run's samples come from.
enum DataSpec {
    Synthetic(SyntheticConfig),
    Idx(PathBuf),
    Png(PathBuf),
}

impl DataSpec {
    fn parse(spec: &str) -> Result<DataSpec> {
        if let Some(rest) = spec.strip_prefix("synthetic") {
            let mut cfg = SyntheticConfig::default();
            if let Some(counts) = rest.strip_prefix(':') {
                let (train, test) = counts
                    .split_once(',')
                    .ok_or_else(|| anyhow!("synthetic:TRAIN,TEST needs two counts"))?;
                cfg.train_count = train.parse().context("synthetic train count")?;
                cfg.test_count = test.parse().context("synthetic test count")?;
            } else if !rest.is_empty() {
                bail!("data spec '{spec}' is not synthetic, synthetic:TRAIN,TEST, idx:DIR, or png:DIR");
            }
            Ok(DataSpec::Synthetic(cfg))
        } else if let Some(dir) = spec.strip_prefix("idx:") {
            Ok(DataSpec::Idx(dir.into()))
        } else if let Some(dir) = spec.strip_prefix("png:") {
            Ok(DataSpec::Png(dir.into()))
        } else {
            bail!("data spec '{spec}' is not synthetic, idx:DIR, or png:DIR")
        }
    }

    fn corpus(&self) -> Result<aoa::data::Corpus> {
        Ok(aoa::data::Corpus {
            train: self.split(SplitTag::Train)?,
            test: self.split(SplitTag::Test)?,
        })
    }

    fn test(&self) -> Result<Dataset> {
        self.split(SplitTag::Test)
    }

    /// IDX directories use the MNIST file names; PNG directories hold
    /// `train/` and `test/` subdirectories with `labels.json` manifests.
    fn split(&self, split: SplitTag) -> Result<Dataset> {
        match self {
            DataSpec::Synthetic(cfg) => {
                let corpus = synthetic_corpus(cfg)?;
                Ok(match split {
                    SplitTag::Train => corpus.train,
                    SplitTag::Test => corpus.test,
                })
            }
            DataSpec::Idx(dir) => {
                let (images, labels) = match split {
                    SplitTag::Train => ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
                    SplitTag::Test => ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
                };
                Ok(load_idx(&dir.join(images), &dir.join(labels), split, None)?)
            }
            DataSpec::Png(dir) => {
                let sub = match split {
                    SplitTag::Train => "train",
                    SplitTag::Test => "test",
                };
                Ok(load_png_corpus(&dir.join(sub), split)?)
            }
        }
    }
}

/// Loads every model file in the directory, then resolves plan labels that
/// are still missing to `<dir>/<label>.aoa` so a absent model fails with
/// the path it was expected at.
fn load_zoo(dir: &Path, plan: &ExperimentPlan) -> Result<Vec<Model>> {
    let mut paths = Vec::new();
    let entries =
        std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?;
    for entry in entries {
        let path = entry.with_context(|| format!("reading {}", dir.display()))?.path();
        if path.extension().is_some_and(|e| e == "aoa") {
            paths.push(path);
        }
    }
    paths.sort();
    let mut zoo = Vec::new();
    for path in &paths {
        zoo.push(load_model(path)?);
    }
    for label in std::iter::once(&plan.surrogate).chain(&plan.victims) {
        if !zoo.iter().any(|m| &m.label == label) {
            zoo.push(load_model(&dir.join(format!("{label}.aoa")))?);
        }
    }
    Ok(zoo)
}

/// Accepts a plan file, or a `run_metadata.json` from a previous eval run
/// (the resolved plan is lifted out of it).
fn read_plan(path: &Path) -> Result<ExperimentPlan> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut value: serde_json::Value = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing {}", path.display()))?;
    if let Some(config) = value.get_mut("config") {
        value = config.take();
    }
    if let Some(plan) = value.get_mut("plan") {
        value = plan.take();
    }
    serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))
}

fn load_config<T: serde::de::DeserializeOwned>(global: &Global) -> Result<Option<T>> {
    let Some(path) = &global.config else {
        return Ok(None);
    };
    let bytes =
        std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(serde_json::from_slice(&bytes).with_context(|| {
        format!("parsing {}", path.display())
    })?))
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    artifact_version: &'static str,
    command: &'a str,
    timestamp_unix: u64,
    seed: u64,
    workers: Option<usize>,
    config: &'a serde_json::Value,
}

fn write_metadata(
    global: &Global,
    command: &str,
    seed: u64,
    config: &serde_json::Value,
) -> Result<()> {
    let timestamp_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    write_json(
        &global.out.join("run_metadata.json"),
        &RunMetadata {
            artifact_version: env!("CARGO_PKG_VERSION"),
            command,
            timestamp_unix,
            seed,
            workers: global.workers,
            config,
        },
    )
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)?;
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn say(global: &Global, line: &str) {
    if !global.quiet {
        println!("{line}");
    }
}
