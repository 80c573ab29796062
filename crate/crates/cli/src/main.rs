use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use carrynav::config::text::ConfigError;
use carrynav::config::RunConfig;
use carrynav::data::{index_hash, DataError};
use carrynav::eval::{self, EvalError, EvalReport, StateMode};
use carrynav::lin_attn::LinAttnError;
use carrynav::model::ModelError;
use carrynav::numerics::DType;
use carrynav::pipeline::{self, Experiment, PipelineError};
use carrynav::selfcheck;
use carrynav::train::{Mode, RunControl, TrainError, FINAL};

#[derive(Parser, Debug)]
#[command(name = "carrynav", version, about = "Train and evaluate memory-carrying maze navigation policies")]
struct Cli {
    /// Run configuration file; omitted keys take desk-scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for the stage being run (data, training or evaluation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bit-identical reruns.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Protocol {
    Stateful,
    Stateless,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Memory {
    Continuous,
    ResetPerTask,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate expert interaction streams and their index.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a policy on a generated dataset.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Protocol>,
        /// Continue from the run directory's latest checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many optimizer steps (resumable).
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Roll a checkpoint out in unseen mazes and write the report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        state_mode: Option<Memory>,
    },
    /// Compare evaluation reports across training protocols.
    Analyze {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Directory for analysis.md and analysis.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient, chunk-equivalence and oracle suites.
    Selfcheck,
    /// Train and evaluate stateful/stateless twins over several seeds.
    Experiment {
        #[arg(long)]
        root: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Print the resolved configuration.
    ShowConfig,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        Failure {
            code,
            kind,
            message: message.into(),
        }
    }
}

const CONFIG: u8 = 2;
const DATA: u8 = 3;
const NUMERIC: u8 = 4;
const SELFCHECK: u8 = 5;

fn classify_model(e: &ModelError) -> (u8, &'static str) {
    match e {
        ModelError::Numeric { .. } | ModelError::Numerics(_) => (NUMERIC, "numeric"),
        ModelError::Attention(LinAttnError::Numeric { .. }) => (NUMERIC, "numeric"),
        ModelError::Checkpoint(_) => (DATA, "data"),
        _ => (CONFIG, "config"),
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let (code, kind) = match &e {
            PipelineError::Config(_) => (CONFIG, "config"),
            PipelineError::Mismatch(_) => (CONFIG, "mismatch"),
            PipelineError::Data(DataError::Config(_)) => (CONFIG, "config"),
            PipelineError::Data(_) | PipelineError::Io { .. } => (DATA, "data"),
            PipelineError::Train(TrainError::Numeric { .. }) => (NUMERIC, "numeric"),
            PipelineError::Train(TrainError::Mismatch(_)) => (CONFIG, "mismatch"),
            PipelineError::Train(TrainError::Config(_)) => (CONFIG, "config"),
            PipelineError::Train(TrainError::Model(m)) => classify_model(m),
            PipelineError::Train(_) => (DATA, "data"),
            PipelineError::Eval(EvalError::Model(m)) => classify_model(m),
            PipelineError::Eval(EvalError::Config(_)) => (CONFIG, "config"),
            PipelineError::Eval(_) => (DATA, "data"),
            PipelineError::Model(m) => classify_model(m),
        };
        Failure::new(code, kind, e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::new(CONFIG, "config", e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        PipelineError::Eval(e).into()
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(p) = cli.precision {
        cfg.train.precision = match p {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        };
    }
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::GenData { .. } => cfg.data.master_seed = seed,
            Command::Eval { .. } => cfg.eval.seed = seed,
            _ => cfg.train.seed = seed,
        }
    }
    match &cli.command {
        Command::GenData { out } => {
            if let Some(o) = out {
                cfg.paths.data_dir = o.clone();
            }
        }
        Command::Train { data, out, mode, .. } => {
            if let Some(d) = data {
                cfg.paths.data_dir = d.clone();
            }
            if let Some(o) = out {
                cfg.paths.run_dir = o.clone();
            }
            if let Some(m) = mode {
                cfg.train.mode = match m {
                    Protocol::Stateful => Mode::Stateful,
                    Protocol::Stateless => Mode::Stateless,
                };
            }
        }
        Command::Eval { out, state_mode, .. } => {
            if let Some(o) = out {
                cfg.paths.eval_dir = o.clone();
            }
            if let Some(m) = state_mode {
                cfg.eval.state_mode = match m {
                    Memory::Continuous => StateMode::Continuous,
                    Memory::ResetPerTask => StateMode::ResetPerTask,
                };
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Failure::new(CONFIG, "config", e.to_string()))?;
    }
    let cfg = resolve(&cli)?;
    match &cli.command {
        Command::GenData { .. } => {
            let entries = pipeline::gen_data(&cfg, cli.force)?;
            let hash = index_hash(&cfg.paths.data_dir).map_err(PipelineError::from)?;
            println!(
                "wrote {} streams to {} (index sha256 {hash})",
                entries.len(),
                cfg.paths.data_dir.display()
            );
        }
        Command::Train { resume, stop_after, .. } => {
            let final_path = cfg.paths.run_dir.join(FINAL);
            if final_path.exists() && !cli.force && !*resume {
                return Err(Failure::new(
                    CONFIG,
                    "config",
                    format!("{} exists; pass --force to retrain or --resume", final_path.display()),
                ));
            }
            let out = pipeline::train(
                &cfg,
                RunControl {
                    resume: *resume,
                    stop_after: *stop_after,
                },
            )?;
            if out.completed {
                println!(
                    "trained {} steps; final checkpoint {} (params sha256 {})",
                    out.global_step,
                    final_path.display(),
                    out.param_hash
                );
            } else {
                println!("stopped at step {}/{}; rerun with --resume", out.global_step, out.total_steps);
            }
        }
        Command::Eval { checkpoint, .. } => {
            let ck = checkpoint.clone().unwrap_or_else(|| cfg.paths.run_dir.join(FINAL));
            if !ck.exists() {
                return Err(Failure::new(DATA, "missing", format!("checkpoint {} not found", ck.display())));
            }
            let (report, _) = pipeline::evaluate(&cfg, &ck)?;
            println!(
                "{}: SR {:.3}, steps-to-goal {:.1}, {} tasks, memory RSD {}; report in {}",
                report.train_mode,
                report.success_rate,
                report.steps_to_goal,
                report.n_tasks,
                report.memory.rsd.map_or("n/a".into(), |r| format!("{r:.4}")),
                cfg.paths.eval_dir.display()
            );
        }
        Command::Analyze { reports, out } => {
            let loaded = reports
                .iter()
                .map(|p| {
                    let path = if p.is_dir() { p.join(eval::REPORT_FILE) } else { p.clone() };
                    if !path.exists() {
                        return Err(Failure::new(DATA, "missing", format!("{} not found", path.display())));
                    }
                    Ok(EvalReport::load(&path)?)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let analysis = eval::analyze(&loaded)?;
            let md = analysis.markdown();
            print!("{md}");
            if let Some(dir) = out {
                let io = |e: std::io::Error| Failure::new(DATA, "data", format!("{}: {e}", dir.display()));
                std::fs::create_dir_all(dir).map_err(io)?;
                std::fs::write(dir.join("analysis.md"), &md).map_err(io)?;
                std::fs::write(dir.join("analysis.json"), analysis.to_json()).map_err(io)?;
            }
        }
        Command::Selfcheck => {
            let results = selfcheck::run_all();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if let Some(r) = results.iter().find(|r| !r.passed) {
                return Err(Failure::new(SELFCHECK, "selfcheck", format!("{} failed", r.name)));
            }
        }
        Command::Experiment { root, seeds } => {
            let exp = Experiment {
                base: cfg,
                seeds: seeds.clone(),
                root: root.clone(),
            };
            let arms = exp.run()?;
            let reports: Vec<EvalReport> = arms.into_iter().map(|a| a.report).collect();
            print!("{}", eval::analyze(&reports)?.markdown());
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_text());
            println!("# sha256 {}", cfg.hash());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error kind={} code={}: {}", f.kind, f.code, f.message);
            ExitCode::from(f.code)
        }
    }
}
