use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;

use visf_core::config::{ConfigError, RunConfig};
use visf_core::dataworld::{generate_dataset, read_dataset, split_dataset, write_dataset, DataError, Dataset};
use visf_core::diffgraph::GraphError;
use visf_core::evalreport::{
    ablation_fused_vs_unfused, build_report, evaluate, metrics_csv, report_csv, EvalError, Report, RunMetrics,
    SPREAD_NOTE,
};
use visf_core::filter::{qp_filter, ControlBox, FilterError, FilterStatus};
use visf_core::model::{FeatureSource, Method, ModelError, SafetyModel, Variant};
use visf_core::training::{train, EpochLoss, TrainError};

const MODEL_FILE: &str = "model.json";
const MANIFEST_FILE: &str = "manifest.json";
const METRICS_JSON: &str = "metrics.json";
const METRICS_CSV: &str = "metrics.csv";

#[derive(Parser)]
#[command(name = "visf", version, about = "Learned safety filters over multi-camera features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on the training split of a dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        features: Option<FeatureSource>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split and write metrics.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Filter the recorded controls of the test split.
    Filter {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Control box half-width (m/s).
        #[arg(long, default_value_t = 10.0)]
        u_max: f64,
    },
    /// Aggregate evaluated runs into a table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Paired fused/unfused study over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Existing dataset; generated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(code: u8, kind: &'static str, message: impl ToString) -> Self {
        Self {
            code,
            kind,
            message: message.to_string(),
        }
    }
    fn config(e: impl ToString) -> Self {
        Self::new(2, "config", e)
    }
    fn data(e: impl ToString) -> Self {
        Self::new(3, "data", e)
    }
    fn numerical(e: impl ToString) -> Self {
        Self::new(4, "numerical", e)
    }
    fn io(e: impl ToString) -> Self {
        Self::new(1, "io", e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::config(e)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => Failure::config(e),
            // Reads go through `load_data`, so this is a failed write.
            DataError::Io(_) => Failure::io(e),
            _ => Failure::data(e),
        }
    }
}

impl From<GraphError> for Failure {
    fn from(e: GraphError) -> Self {
        Failure::numerical(e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Io(_) => Failure::io(e),
            ModelError::Json(_) | ModelError::Spec(_) | ModelError::DegenerateBatch(_) => Failure::data(e),
            _ => Failure::numerical(e),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Divergence { .. } => Failure::numerical(e),
            TrainError::NoData(_) => Failure::data(e),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::Train(t) => t.into(),
            _ => Failure::data(e),
        }
    }
}

impl From<FilterError> for Failure {
    fn from(e: FilterError) -> Self {
        Failure::numerical(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::io(e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::data(e)
    }
}

/// Output paths created by the running command, removed on failure.
#[derive(Default)]
struct Outputs(Vec<PathBuf>);

impl Outputs {
    fn claim(&mut self, path: &Path) -> PathBuf {
        if !path.exists() {
            self.0.push(path.to_path_buf());
        }
        path.to_path_buf()
    }

    fn remove_all(&self) {
        for p in self.0.iter().rev() {
            let _ = if p.is_dir() { fs::remove_dir_all(p) } else { fs::remove_file(p) };
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn load_data(path: &Path) -> Result<Dataset, Failure> {
    read_dataset(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn model_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MODEL_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_model(path: &Path) -> Result<SafetyModel, Failure> {
    let p = model_path(path);
    SafetyModel::load(&p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))
}

fn test_split(data: &Dataset) -> Dataset {
    split_dataset(data, data.meta.seed).2
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool_version: &'static str,
    config_hash: String,
    config: &'a RunConfig,
    method: Method,
    features: FeatureSource,
    variant: Variant,
    seed: u64,
    train_trajectories: usize,
    loss_history: &'a [EpochLoss],
    wall_clock_secs: f64,
    checkpoint: &'static str,
}

#[derive(Serialize)]
struct FilterRecord<'a> {
    traj: &'a str,
    t: usize,
    u_ref: Vec<f64>,
    u_out: Vec<f64>,
    modified: bool,
    constraint_margin: f64,
    status: FilterStatus,
}

fn gen_data(config: &Path, out: &Path, outputs: &mut Outputs) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let mut ds = generate_dataset(&cfg.world, cfg.seed)?;
    ds.meta.config_hash = Some(cfg.hash());
    ds.meta.tool_version = Some(env!("CARGO_PKG_VERSION").to_string());
    outputs.claim(out);
    write_dataset(out, &ds)?;
    let collided = ds.trajectories.iter().filter(|t| t.collision_step().is_some()).count();
    log::info!(
        "wrote {} trajectories ({} with collisions, {} frames) to {}",
        ds.trajectories.len(),
        collided,
        ds.frame_count(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    config: &Path,
    data: &Path,
    method: Option<Method>,
    seed: Option<u64>,
    features: Option<FeatureSource>,
    variant: Option<Variant>,
    out: &Path,
    outputs: &mut Outputs,
) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(m) = method {
        cfg.method.name = m;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(f) = features {
        cfg.method.features = f;
    }
    if let Some(v) = variant {
        cfg.method.variant = v;
    }
    let ds = load_data(data)?;
    let (train_set, _, _) = split_dataset(&ds, ds.meta.seed);
    let started = Instant::now();
    let hash = cfg.hash();
    let (model, history) = train(&cfg.train_run(), &train_set, &hash)?;
    let elapsed = started.elapsed().as_secs_f64();
    outputs.claim(out);
    fs::create_dir_all(out)?;
    model.save(&out.join(MODEL_FILE))?;
    write_json(
        &out.join(MANIFEST_FILE),
        &Manifest {
            tool_version: env!("CARGO_PKG_VERSION"),
            config_hash: hash,
            config: &cfg,
            method: cfg.method.name,
            features: cfg.method.features,
            variant: cfg.method.variant,
            seed: cfg.seed,
            train_trajectories: train_set.trajectories.len(),
            loss_history: &history,
            wall_clock_secs: elapsed,
            checkpoint: MODEL_FILE,
        },
    )?;
    log::info!("trained {} in {elapsed:.1}s", cfg.method.name);
    Ok(())
}

fn eval_cmd(model: &Path, data: &Path, out: &Path, outputs: &mut Outputs) -> Result<(), Failure> {
    let model = load_model(model)?;
    let ds = load_data(data)?;
    model.check_dataset(&ds).map_err(Failure::data)?;
    let test = test_split(&ds);
    let (metrics, _) = evaluate(&model, &test)?;
    let run = RunMetrics::new(&model, test.frame_count(), metrics);
    outputs.claim(out);
    fs::create_dir_all(out)?;
    write_json(&out.join(METRICS_JSON), &run)?;
    fs::write(out.join(METRICS_CSV), metrics_csv(&run))?;
    Ok(())
}

fn filter_cmd(model: &Path, data: &Path, out: &Path, u_max: f64, outputs: &mut Outputs) -> Result<(), Failure> {
    let model = load_model(model)?;
    let ds = load_data(data)?;
    model.check_dataset(&ds).map_err(Failure::data)?;
    let test = test_split(&ds);
    let bounds = ControlBox::symmetric(model.spec.control_dim, u_max)?;
    let scores = model.score_trajectories(&test.trajectories)?;
    outputs.claim(out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut w = std::io::BufWriter::new(fs::File::create(out)?);
    for (frame, score) in test.frames().zip(&scores) {
        let u_ref: Vec<f64> = frame.u.iter().map(|&v| v as f64).collect();
        let d = qp_filter(&score.halfspace, &u_ref, &bounds)?;
        let record = FilterRecord {
            traj: &frame.traj,
            t: frame.t,
            u_ref,
            u_out: d.u_out,
            modified: d.modified,
            constraint_margin: d.constraint_margin,
            status: d.status,
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_run(path: &Path) -> Result<RunMetrics, Failure> {
    let p = if path.is_dir() { path.join(METRICS_JSON) } else { path.to_path_buf() };
    let text = fs::read_to_string(&p).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::data(format!("{}: {e}", p.display())))
}

fn write_report(report: &Report, out: &Path, outputs: &mut Outputs) -> Result<(), Failure> {
    outputs.claim(out);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(out, report_csv(report))?;
    let json = out.with_extension("json");
    outputs.claim(&json);
    write_json(&json, report)
}

fn report_cmd(runs: &[PathBuf], out: &Path, outputs: &mut Outputs) -> Result<(), Failure> {
    let runs: Vec<RunMetrics> = runs.iter().map(|p| read_run(p)).collect::<Result<_, _>>()?;
    let report = build_report(&runs)?;
    write_report(&report, out, outputs)
}

fn ablate_cmd(config: &Path, seeds: u64, data: Option<&Path>, out: &Path, outputs: &mut Outputs) -> Result<(), Failure> {
    let cfg = RunConfig::load(config)?;
    let ds = match data {
        Some(p) => load_data(p)?,
        None => generate_dataset(&cfg.world, cfg.seed)?,
    };
    let seeds: Vec<u64> = (0..seeds).map(|k| cfg.seed + k).collect();
    let (fused, unfused) = ablation_fused_vs_unfused(&cfg, &ds, &seeds)?;
    let report = Report {
        rows: vec![fused, unfused],
        note: SPREAD_NOTE.to_string(),
    };
    outputs.claim(out);
    fs::create_dir_all(out)?;
    write_report(&report, &out.join("ablation.csv"), outputs)
}

fn run(cli: Cli, outputs: &mut Outputs) -> Result<(), Failure> {
    match cli.command {
        Command::GenData { config, out } => gen_data(&config, &out, outputs),
        Command::Train {
            config,
            data,
            method,
            seed,
            features,
            variant,
            out,
        } => train_cmd(&config, &data, method, seed, features, variant, &out, outputs),
        Command::Eval { model, data, out } => eval_cmd(&model, &data, &out, outputs),
        Command::Filter {
            model,
            data,
            out,
            u_max,
        } => filter_cmd(&model, &data, &out, u_max, outputs),
        Command::Report { runs, out } => report_cmd(&runs, &out, outputs),
        Command::Ablate {
            config,
            seeds,
            data,
            out,
        } => ablate_cmd(&config, seeds, data.as_deref(), &out, outputs),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut outputs = Outputs::default();
    match run(cli, &mut outputs) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            outputs.remove_all();
            let body = serde_json::json!({ "error": f.kind, "message": f.message });
            eprintln!("{body}");
            ExitCode::from(f.code)
        }
    }
}
