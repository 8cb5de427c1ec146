use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use ridnoise::eval::{resimulation_error, test_targets, EvalConfig, EvalReport};
use ridnoise::flow::{flow_sample, train_flow_wnll, FlowConfig, FlowModel, WnllConfig};
use ridnoise::io::{read_dataset, read_targets, write_dataset, write_samples};
use ridnoise::nn::{train_regressor, RegressorConfig};
use ridnoise::seed::derive_seed;
use ridnoise::tasks::{generate_dataset, NoiseMode, NoiseSpec, TaskKind, TaskSpec};
use ridnoise::weights::{estimate_sample_robustness, relabel, robustness_to_weights, WeightConfig, WeightVector, WeightsFile};
use ridnoise::Error;

const FILE_FORMAT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "ridnoise", version, about = "Robust inverse design from noisy datasets")]
struct Cli {
    /// Worker threads for fold training and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset from a task prior and noise model.
    Generate(GenerateArgs),
    /// Estimate per-sample robustness weights for a dataset.
    Weights(WeightsArgs),
    /// Train a conditional flow by weighted likelihood.
    Train(TrainArgs),
    /// Draw designs for a list of targets.
    Sample(SampleArgs),
    /// Re-simulation error of a model, optionally against a baseline.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; its fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    task: Option<TaskKind>,
    #[arg(long)]
    noise: Option<NoiseMode>,
    #[arg(long)]
    n: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct WeightsArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    /// Surrogate training epochs per fold.
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Weights file; omitted means uniform weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Comma-separated subnet hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    clamp: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Replace responses by a forward surrogate's predictions first.
    #[arg(long)]
    relabel: bool,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    n_per_target: Option<usize>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Defaults to the task the model was trained on.
    #[arg(long)]
    task: Option<TaskKind>,
    /// Defaults to the noise mode the model was trained on.
    #[arg(long)]
    noise: Option<NoiseMode>,
    /// Targets file; omitted means fresh targets from the task.
    #[arg(long)]
    targets: Option<PathBuf>,
    #[arg(long)]
    n_targets: Option<usize>,
    #[arg(long)]
    samples_per_target: Option<usize>,
    /// Label written into the report.
    #[arg(long)]
    method: Option<String>,
    #[command(flatten)]
    common: Common,
}

/// Everything a pipeline step can be configured with.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
struct RunConfig {
    task: TaskKind,
    noise: NoiseMode,
    n: usize,
    seed: u64,
    dataset: Option<PathBuf>,
    weights_file: Option<PathBuf>,
    model: Option<PathBuf>,
    baseline: Option<PathBuf>,
    targets: Option<PathBuf>,
    n_per_target: usize,
    method: String,
    relabel: bool,
    weights: WeightConfig,
    flow: FlowConfig,
    training: WnllConfig,
    eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Radian,
            noise: NoiseMode::X,
            n: 5000,
            seed: 0,
            dataset: None,
            weights_file: None,
            model: None,
            baseline: None,
            targets: None,
            n_per_target: 16,
            method: "rid-noise".into(),
            relabel: false,
            weights: WeightConfig::default(),
            flow: FlowConfig::default(),
            training: WnllConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Sets every component seed from the master seed.
    fn propagate_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.weights.seed = derive_seed(seed, "weights");
        self.flow.seed = derive_seed(seed, "flow");
        self.training.seed = derive_seed(seed, "training");
        self.eval.seed = derive_seed(seed, "eval");
    }

    fn task_spec(&self) -> TaskSpec {
        TaskSpec::default_for(self.task)
    }

    fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec::default_for(self.task, self.noise)
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::InvalidArgument(_) => Failure::Usage(msg),
            Error::Diverged { .. } | Error::FoldDiverged { .. } | Error::Domain(_) => Failure::Numerical(msg),
            _ => Failure::Data(msg),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Data(e.to_string()))
}

/// Recursively overlays `top` onto `base`.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, t) => *b = t,
    }
}

/// Applies `--config` on top of the flag-derived configuration.
fn resolve(mut cfg: RunConfig, common: &Common) -> Result<RunConfig, Failure> {
    if let Some(seed) = common.seed {
        cfg.propagate_seed(seed);
    }
    let Some(path) = &common.config else {
        return Ok(cfg);
    };
    let overlay: Value = serde_json::from_str(&read_text(path)?)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut base = serde_json::to_value(&cfg).map_err(|e| Failure::Data(e.to_string()))?;
    let master = overlay.get("seed").and_then(Value::as_u64);
    let explicit = |section: &str| overlay.get(section).and_then(|v| v.get("seed")).and_then(Value::as_u64);
    let component_seeds = [explicit("weights"), explicit("flow"), explicit("training"), explicit("eval")];
    merge(&mut base, overlay);
    let mut merged: RunConfig =
        serde_json::from_value(base).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let Some(seed) = master {
        merged.propagate_seed(seed);
        // component seeds set in the file win over the derived ones
        let [w, f, t, e] = component_seeds;
        merged.weights.seed = w.unwrap_or(merged.weights.seed);
        merged.flow.seed = f.unwrap_or(merged.flow.seed);
        merged.training.seed = t.unwrap_or(merged.training.seed);
        merged.eval.seed = e.unwrap_or(merged.eval.seed);
    }
    Ok(merged)
}

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf, Failure> {
    value
        .as_ref()
        .ok_or_else(|| Failure::Usage(format!("missing --{flag}")))
}

fn ensure_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn generate(args: GenerateArgs) -> CmdResult {
    let mut cfg = RunConfig::default();
    if let Some(t) = args.task {
        cfg.task = t;
    }
    if let Some(m) = args.noise {
        cfg.noise = m;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    let cfg = resolve(cfg, &args.common)?;
    if cfg.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let dataset = generate_dataset(&cfg.task_spec(), &cfg.noise_spec(), cfg.n, cfg.seed)?;
    ensure_dir(&args.common.out)?;
    let meta = write_dataset(&dataset, &args.common.out.join("dataset.jsonl"))?;
    println!("rows {} checksum {}", meta.rows, meta.checksum);
    Ok(())
}

fn weights(args: WeightsArgs) -> CmdResult {
    let mut cfg = RunConfig {
        dataset: args.dataset,
        ..RunConfig::default()
    };
    if let Some(k) = args.k {
        cfg.weights.k_folds = k;
    }
    if let Some(tau) = args.tau {
        cfg.weights.tau = tau;
    }
    if let Some(eps) = args.eps {
        cfg.weights.eps = eps;
    }
    if let Some(e) = args.epochs {
        cfg.weights.training.epochs = e;
    }
    let cfg = resolve(cfg, &args.common)?;
    let path = require(&cfg.dataset, "dataset")?;
    let dataset = read_dataset(path)?;
    let estimate = estimate_sample_robustness(&dataset, &cfg.weights)?;
    let w = robustness_to_weights(&estimate.r, cfg.weights.tau, cfg.weights.eps)?;
    println!("min {:.6} mean {:.6} max {:.6}", w.min(), w.mean(), w.max());
    let checksum = ridnoise::io::checksum(read_text(path)?.as_bytes());
    let file = WeightsFile::new(cfg.weights.clone(), Some(checksum), estimate.r, w);
    ensure_dir(&args.common.out)?;
    write_text(&args.common.out.join("weights.json"), &(file.to_json()? + "\n"))
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    config: RunConfig,
    model: FlowModel,
}

#[derive(Serialize)]
struct TraceFile<'a> {
    format_version: u32,
    config: &'a RunConfig,
    /// Mean weighted negative log-likelihood of each epoch.
    loss: &'a [f64],
}

fn load_model_file(path: &Path) -> Result<ModelFile, Failure> {
    let file: ModelFile =
        serde_json::from_str(&read_text(path)?).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    if file.format_version != FILE_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: file.format_version,
            expected: FILE_FORMAT_VERSION,
        }
        .into());
    }
    Ok(file)
}

fn load_model(path: &Path) -> Result<FlowModel, Failure> {
    Ok(load_model_file(path)?.model)
}

fn train(args: TrainArgs) -> CmdResult {
    let mut cfg = RunConfig {
        dataset: args.dataset,
        weights_file: args.weights,
        relabel: args.relabel,
        ..RunConfig::default()
    };
    if let Some(b) = args.blocks {
        cfg.flow.blocks = b;
    }
    if let Some(h) = args.hidden {
        cfg.flow.hidden = h;
    }
    if let Some(c) = args.clamp {
        cfg.flow.clamp = c;
    }
    if let Some(e) = args.epochs {
        cfg.training.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.training.batch_size = b;
    }
    if let Some(lr) = args.lr {
        cfg.training.adam.learning_rate = lr;
    }
    let mut cfg = resolve(cfg, &args.common)?;
    let mut dataset = read_dataset(require(&cfg.dataset, "dataset")?)?;
    if let Some(p) = &dataset.provenance {
        cfg.task = p.task.kind();
        cfg.noise = p.noise.mode;
    }
    let weights = match &cfg.weights_file {
        Some(p) => {
            let file = WeightsFile::from_json(&read_text(p)?)?;
            if file.weights.len() != dataset.len() {
                return Err(Failure::Data(format!(
                    "{} weights for {} rows",
                    file.weights.len(),
                    dataset.len()
                )));
            }
            file.weights
        }
        None => WeightVector::uniform(dataset.len()),
    };
    if cfg.relabel {
        let spec = cfg.weights.surrogate_spec(dataset.d_x(), dataset.d_y());
        let training = RegressorConfig {
            seed: derive_seed(cfg.seed, "relabel"),
            ..cfg.weights.training.clone()
        };
        let (surrogate, _) = train_regressor(&spec, &dataset, &dataset.empty_like(), &training)?;
        dataset = relabel(&dataset, &surrogate)?;
    }
    let model = FlowModel::new(dataset.d_x(), dataset.d_y(), &cfg.flow)?;
    let (trained, trace) = train_flow_wnll(&model, &dataset, &weights.0, &cfg.training)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("epochs {} loss {first:.4} -> {last:.4}", trace.len());
    }
    ensure_dir(&args.common.out)?;
    write_text(
        &args.common.out.join("trace.json"),
        &to_json(&TraceFile {
            format_version: FILE_FORMAT_VERSION,
            config: &cfg,
            loss: &trace,
        })?,
    )?;
    write_text(
        &args.common.out.join("model.json"),
        &to_json(&ModelFile {
            format_version: FILE_FORMAT_VERSION,
            config: cfg,
            model: trained,
        })?,
    )
}

#[derive(Serialize)]
struct SamplesMeta<'a> {
    format_version: u32,
    config: &'a RunConfig,
    targets: usize,
    n_per_target: usize,
}

fn sample(args: SampleArgs) -> CmdResult {
    let mut cfg = RunConfig {
        model: args.model,
        targets: args.targets,
        ..RunConfig::default()
    };
    if let Some(n) = args.n_per_target {
        cfg.n_per_target = n;
    }
    let cfg = resolve(cfg, &args.common)?;
    if cfg.n_per_target == 0 {
        return Err(Failure::Usage("--n-per-target must be at least 1".into()));
    }
    let model = load_model(require(&cfg.model, "model")?)?;
    let targets = read_targets(require(&cfg.targets, "targets")?)?;
    let samples = flow_sample(&model, &targets, cfg.n_per_target, derive_seed(cfg.seed, "sample"))?;
    ensure_dir(&args.common.out)?;
    write_samples(&args.common.out.join("samples.jsonl"), &targets, &samples, cfg.n_per_target)?;
    write_text(
        &args.common.out.join("samples.meta.json"),
        &to_json(&SamplesMeta {
            format_version: FILE_FORMAT_VERSION,
            config: &cfg,
            targets: targets.rows(),
            n_per_target: cfg.n_per_target,
        })?,
    )?;
    println!("targets {} samples {}", targets.rows(), samples.rows());
    Ok(())
}

fn evaluate(args: EvalArgs) -> CmdResult {
    let start = Instant::now();
    let mut cfg = RunConfig {
        model: args.model,
        baseline: args.baseline,
        targets: args.targets,
        ..RunConfig::default()
    };
    if let Some(p) = &cfg.model {
        let trained = load_model_file(p)?.config;
        cfg.task = trained.task;
        cfg.noise = trained.noise;
    }
    if let Some(t) = args.task {
        cfg.task = t;
    }
    if let Some(m) = args.noise {
        cfg.noise = m;
    }
    if let Some(n) = args.n_targets {
        cfg.eval.n_targets = n;
    }
    if let Some(s) = args.samples_per_target {
        cfg.eval.samples_per_target = s;
    }
    if let Some(m) = args.method {
        cfg.method = m;
    }
    let cfg = resolve(cfg, &args.common)?;
    cfg.eval.validate()?;
    let (task, noise) = (cfg.task_spec(), cfg.noise_spec());
    let model = load_model(require(&cfg.model, "model")?)?;
    let targets = match &cfg.targets {
        Some(p) => read_targets(p)?,
        None => test_targets(&task, &noise, cfg.eval.n_targets, cfg.eval.seed)?,
    };
    let mut report = resimulation_error(&model, &cfg.method, &task, &noise, &targets, &cfg.eval)?;
    if let Some(p) = &cfg.baseline {
        let baseline = load_model(p)?;
        let base = resimulation_error(&baseline, "baseline", &task, &noise, &targets, &cfg.eval)?;
        report.compare_with(&base)?;
    }
    ensure_dir(&args.common.out)?;
    write_text(&args.common.out.join("report.json"), &(report.to_json()? + "\n"))?;
    print_report(&report);
    println!("wall clock {:.2}s", start.elapsed().as_secs_f64());
    Ok(())
}

fn print_report(report: &EvalReport) {
    println!("mse {:.6} +- {:.6} over {} targets", report.mse, report.std_error, report.n_targets);
    if let Some(c) = &report.comparison {
        println!("baseline mse {:.6} t {:.4} p {:.3e}", c.baseline_mse, c.t, c.p);
    }
}

fn run(cli: Cli) -> CmdResult {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    match cli.command {
        Command::Generate(a) => generate(a),
        Command::Weights(a) => weights(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => evaluate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
