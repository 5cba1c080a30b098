use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chunklab::bench::{self, Preset, SweepSpec};
use chunklab::data;
use chunklab::envs::{TaskName, TaskSpec};
use chunklab::policy::{self, Backbone, FlowPolicy, PolicyConfig, TrainConfig, TrainMode};
use chunklab::runtime::{self, EpisodeResult, RunConfig, Strategy, Summary, DEFAULT_TICK_MS};
use chunklab::{Error, LatencyModel, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const AFTER_HELP: &str = "Exit codes: 0 success, 1 runtime failure, 2 invalid config, 3 missing file.\n\
Episode evaluation runs in parallel; set RAYON_NUM_THREADS to bound the thread count.\n\
Log verbosity follows RUST_LOG (default info).";

#[derive(Parser)]
#[command(name = "chunklab", version, about = "Asynchronous action-chunk control experiments", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Record expert demonstrations to a JSONL dataset.
    GenData(GenDataArgs),
    /// Train a flow policy on a dataset and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint under one scheduling strategy.
    Eval(EvalArgs),
    /// Run a (strategy, delay, horizon) sweep from a JSON config.
    Sweep(SweepArgs),
    /// Print the closed-form latency tables.
    Analytics(AnalyticsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Task preset (reach, chase, catch) or path to a task JSON file.
    #[arg(long)]
    task: String,
    /// Number of accepted demonstrations.
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    /// First episode seed; later episodes use consecutive seeds.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output JSONL path.
    #[arg(long)]
    out: PathBuf,
    /// Macro-action size q; actions are summed over blocks of q steps.
    #[arg(long, default_value_t = 1)]
    quantize: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset written by gen-data.
    #[arg(long, conflicts_with = "task")]
    data: Option<PathBuf>,
    /// Generate demonstrations for this task instead of reading --data.
    #[arg(long)]
    task: Option<String>,
    /// Demonstrations to generate with --task.
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    /// JSON file with training settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// standard, offset or packed.
    #[arg(long)]
    mode: Option<TrainMode>,
    /// mixer or transformer.
    #[arg(long)]
    backbone: Option<Backbone>,
    /// Largest temporal offset seen in training.
    #[arg(long)]
    delta_max: Option<usize>,
    /// Optimizer steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Branches per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seed for initialization, sampling and (with --task) demonstrations.
    #[arg(long)]
    seed: Option<u64>,
    /// Chunk length H.
    #[arg(long)]
    horizon: Option<usize>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint written by train.
    #[arg(long)]
    ckpt: PathBuf,
    /// Task preset or path to a task JSON file.
    #[arg(long)]
    task: String,
    /// sync, naive, rtc or vlash.
    #[arg(long)]
    strategy: Strategy,
    /// Inference delay in ticks.
    #[arg(long, default_value_t = 0)]
    delta: u64,
    /// Actions executed per chunk (K).
    #[arg(long)]
    exec_horizon: usize,
    /// Macro-action size the checkpoint was trained with.
    #[arg(long, default_value_t = 1)]
    quantize: u64,
    /// Actual delay varies down to delta - jitter; handoff stays at delta.
    #[arg(long, default_value_t = 0)]
    jitter: u64,
    #[arg(long, default_value_t = 64)]
    episodes: usize,
    /// First episode seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Controller tick length used for wall-time metrics.
    #[arg(long, default_value_t = DEFAULT_TICK_MS)]
    tick_ms: f64,
    /// Results JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// horizon, delay or custom; overrides the config's preset.
    #[arg(long)]
    preset: Option<Preset>,
    /// Sweep JSON config. Relative checkpoint paths resolve against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for results.csv, results.json and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AnalyticsArgs {
    /// Also write the tables as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSettings {
    mode: TrainMode,
    backbone: Backbone,
    horizon: usize,
    flow_steps: usize,
    width: usize,
    depth: usize,
    delta_max: usize,
    steps: u64,
    batch_size: usize,
    seed: u64,
    lr_peak: f64,
    lr_min: f64,
    warmup_steps: Option<u64>,
    delta_weights: Option<Vec<f64>>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            mode: TrainMode::Standard,
            backbone: Backbone::Mixer,
            horizon: 8,
            flow_steps: 10,
            width: 32,
            depth: 3,
            delta_max: 0,
            steps: 4000,
            batch_size: 32,
            seed: 0,
            lr_peak: 3e-3,
            lr_min: 5e-5,
            warmup_steps: None,
            delta_weights: None,
        }
    }
}

#[derive(Serialize)]
struct EvalOutput {
    task: TaskName,
    strategy: Strategy,
    delta: u64,
    exec_horizon: usize,
    q: u64,
    jitter: u64,
    summary: Summary,
    episodes: Vec<EpisodeResult>,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: String,
    config_hash: String,
    config: Value,
    seeds: Value,
    outputs: Vec<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Missing(_) => 3,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
        Error::Config(_)
        | Error::InvalidHorizon(_)
        | Error::InvalidDelay(_)
        | Error::InvalidTask(_)
        | Error::InvalidQuantization(_)
        | Error::InfeasibleSchedule { .. }
        | Error::PrefixTooLong { .. } => 2,
        _ => 1,
    }
}

fn resolve_task(arg: &str) -> Result<TaskSpec> {
    if let Ok(name) = arg.parse::<TaskName>() {
        return Ok(TaskSpec::preset(name));
    }
    let path = Path::new(arg);
    if arg.ends_with(".json") || path.exists() {
        return TaskSpec::load(path);
    }
    Err(Error::InvalidTask(format!("{arg:?} is neither a preset (reach, chase, catch) nor a task file")))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest(path: &Path, command: &str, config: Value, seeds: Value, outputs: Vec<PathBuf>) -> Result<()> {
    let canonical = serde_json::to_string(&config).expect("config serializes");
    let manifest = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: hex::encode(Sha256::digest(canonical.as_bytes())),
        config,
        seeds,
        outputs,
    };
    write(path, &serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("value serializes")
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let task = resolve_task(&a.task)?;
    if a.episodes == 0 {
        return Err(Error::Config("episodes: must be at least 1".into()));
    }
    if a.quantize < 1 {
        return Err(Error::InvalidQuantization(a.quantize));
    }
    let (mut ds, report) = data::generate_dataset(&task, a.episodes, a.seed)?;
    log::info!("{} of {} expert rollouts accepted", report.accepted, report.attempted);
    if a.quantize > 1 {
        ds = data::quantize_dataset(&ds, a.quantize)?;
    }
    ensure_parent(&a.out)?;
    data::save_dataset(&ds, &a.out)?;
    let config = json!({ "task": to_value(&task), "episodes": a.episodes, "seed": a.seed, "quantize": a.quantize });
    let seeds = json!({ "first": a.seed, "attempted": report.attempted });
    write_manifest(&manifest_path(&a.out), "gen-data", config, seeds, vec![a.out.clone()])
}

fn train_settings(a: &TrainArgs) -> Result<TrainSettings> {
    let mut s = match &a.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Missing(path.clone()));
            }
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainSettings::default(),
    };
    if let Some(v) = a.mode {
        s.mode = v;
    }
    if let Some(v) = a.backbone {
        s.backbone = v;
    }
    if let Some(v) = a.delta_max {
        s.delta_max = v;
    }
    if let Some(v) = a.steps {
        s.steps = v;
    }
    if let Some(v) = a.batch_size {
        s.batch_size = v;
    }
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.horizon {
        s.horizon = v;
    }
    if let Some(v) = a.lr {
        s.lr_peak = v;
    }
    if !(s.lr_peak > 0.0) || !(s.lr_min >= 0.0) || s.lr_min > s.lr_peak {
        return Err(Error::Config("lr_peak/lr_min: need 0 <= lr_min <= lr_peak and lr_peak > 0".into()));
    }
    Ok(s)
}

fn train(a: TrainArgs) -> Result<()> {
    let s = train_settings(&a)?;
    let (ds, source) = match (&a.data, &a.task) {
        (Some(path), _) => (data::load_dataset(path)?, json!({ "data": path })),
        (None, Some(task)) => {
            let spec = resolve_task(task)?;
            let (ds, _) = data::generate_dataset(&spec, a.episodes, s.seed)?;
            (ds, json!({ "task": to_value(&spec), "episodes": a.episodes }))
        }
        (None, None) => return Err(Error::Config("train needs --data or --task".into())),
    };
    let first = ds.trajectories.first().and_then(|t| t.steps.first()).ok_or(Error::EmptyDataset)?;
    let config = PolicyConfig {
        horizon: s.horizon,
        flow_steps: s.flow_steps,
        width: s.width,
        depth: s.depth,
        delta_max: s.delta_max,
        ..PolicyConfig::new(s.backbone, first.obs.features.len(), first.state.dim())
    };
    let mut tc = TrainConfig::toy(s.mode, s.steps, s.seed);
    tc.batch_size = s.batch_size;
    tc.optimizer.schedule.lr_peak = s.lr_peak;
    tc.optimizer.schedule.lr_min = s.lr_min;
    if let Some(w) = s.warmup_steps {
        tc.optimizer.schedule.warmup_steps = w;
    }
    tc.delta_weights = s.delta_weights.clone();
    policy::validate_training(&config, &tc)?;
    log::info!("training {:?} {:?} for {} steps on {} demonstrations", s.mode, s.backbone, s.steps, ds.len());
    let (policy, log) = policy::train(&ds, &config, &tc)?;
    let tail = &log.losses[log.losses.len().saturating_sub(100)..];
    log::info!("final loss {:.4} (mean of last {})", tail.iter().sum::<f64>() / tail.len() as f64, tail.len());
    ensure_parent(&a.out)?;
    policy.save(&a.out)?;
    let manifest_config = json!({ "settings": to_value(&s), "source": source });
    write_manifest(&manifest_path(&a.out), "train", manifest_config, json!({ "train": s.seed }), vec![a.out.clone()])
}

fn eval(a: EvalArgs) -> Result<()> {
    let task = resolve_task(&a.task)?;
    if a.episodes == 0 {
        return Err(Error::Config("episodes: must be at least 1".into()));
    }
    if a.jitter > a.delta {
        return Err(Error::InvalidDelay(format!("jitter {} exceeds delta {}", a.jitter, a.delta)));
    }
    let env = task.quantized(a.quantize)?;
    let policy = FlowPolicy::load(&a.ckpt)?;
    let pc = policy.config();
    if pc.obs_dim != env.dims.obs || pc.state_dim != env.dims.state {
        return Err(Error::Config(format!(
            "checkpoint dims (obs {}, state {}) do not match task {} (obs {}, state {})",
            pc.obs_dim,
            pc.state_dim,
            task.name.as_str(),
            env.dims.obs,
            env.dims.state
        )));
    }
    let latency = if a.jitter > 0 { LatencyModel::jitter(a.delta, a.jitter) } else { LatencyModel::fixed(a.delta) };
    let cfg = RunConfig { latency, tick_ms: a.tick_ms, ..RunConfig::new(a.strategy, a.delta, a.exec_horizon) };
    cfg.validate(pc.horizon)?;
    let seeds: Vec<u64> = (0..a.episodes as u64).map(|i| a.seed + i).collect();
    let episodes = runtime::evaluate(&env, &policy, &cfg, &seeds)?;
    let summary = runtime::summarize(&episodes);
    log::info!(
        "{} {} delta={} K={}: success {:.3}, mean steps {:.1}",
        task.name.as_str(),
        a.strategy.as_str(),
        a.delta,
        a.exec_horizon,
        summary.success_rate,
        summary.mean_steps
    );
    let out = EvalOutput {
        task: task.name,
        strategy: a.strategy,
        delta: a.delta,
        exec_horizon: a.exec_horizon,
        q: a.quantize,
        jitter: a.jitter,
        summary,
        episodes,
    };
    write(&a.out, &serde_json::to_string_pretty(&out).expect("results serialize"))?;
    let config = json!({
        "ckpt": a.ckpt,
        "task": to_value(&task),
        "run": to_value(&cfg),
        "q": a.quantize,
        "episodes": a.episodes,
    });
    let seeds = json!({ "first": a.seed, "episodes": a.episodes });
    write_manifest(&manifest_path(&a.out), "eval", config, seeds, vec![a.out.clone()])
}

fn load_sweep(a: &SweepArgs) -> Result<SweepSpec> {
    if !a.config.exists() {
        return Err(Error::Missing(a.config.clone()));
    }
    let text = fs::read_to_string(&a.config).map_err(|e| Error::io(&a.config, e))?;
    let bad = |e: serde_json::Error| Error::Config(format!("{}: {e}", a.config.display()));
    let mut value: Value = serde_json::from_str(&text).map_err(bad)?;
    let obj = value.as_object_mut().ok_or_else(|| Error::Config("sweep config must be a JSON object".into()))?;
    if let Some(p) = a.preset {
        obj.insert("preset".into(), to_value(&p));
    }
    let mut spec: SweepSpec = serde_json::from_value(value).map_err(bad)?;
    let base = a.config.parent().unwrap_or(Path::new(""));
    for path in spec.checkpoints.values_mut() {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn sweep(a: SweepArgs) -> Result<()> {
    let spec = load_sweep(&a)?;
    let table = bench::run_sweep(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let csv = a.out.join("results.csv");
    let json_out = a.out.join("results.json");
    table.emit_csv(&csv)?;
    table.emit_json(&json_out)?;
    log::info!("{} rows written to {}", table.rows.len(), a.out.display());
    let seeds = json!({ "first": spec.seed, "episodes": spec.episodes });
    write_manifest(&a.out.join("manifest.json"), "sweep", to_value(&spec), seeds, vec![csv, json_out])
}

fn analytics(a: AnalyticsArgs) -> Result<()> {
    let report = bench::analytic_tables();
    print!("{}", report.render());
    if let Some(path) = a.out {
        write(&path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Analytics(a) => analytics(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
