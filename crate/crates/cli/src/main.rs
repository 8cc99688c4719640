use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dafa_core::config::ExperimentConfig;
use dafa_core::data::read_dataset;
use dafa_core::eval::{evaluate, render_report, Format};
use dafa_core::experiment::{self, RunOptions};
use dafa_core::gradcheck::{run_suite, Mutation};
use dafa_core::model::{count_complexity, enforce_budget, ComplexityBudget};
use dafa_core::pipeline::ModelBundle;
use dafa_core::Error;

/// Exit statuses, one per failure class.
mod status {
    pub const OTHER: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const BUDGET: u8 = 3;
    pub const IO: u8 = 4;
    pub const GRADCHECK: u8 = 5;
}

#[derive(Parser)]
#[command(name = "dafa", version, about = "Device-robust distillation on synthetic device-shifted data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML). Defaults to the built-in desk preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its manifest.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset file; defaults to <out_dir>/dataset.bin.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite an existing dataset.
        #[arg(long)]
        force: bool,
    },
    /// Train teachers, distill, fine-tune per device and write reports.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory; overrides experiment.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep the distilled student only; no device specialists.
        #[arg(long)]
        skip_dsft: bool,
        /// Recompute every stage instead of resuming.
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of every loss and layer.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Negate every analytic gradient; the check must then fail.
        #[arg(long, hide = true)]
        flip_sign: bool,
    },
    /// Parameter and MAC report of the configured student.
    Budget {
        /// Experiment config (TOML). Defaults to the built-in desk preset.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Evaluate a saved bundle on a dataset file.
    Eval {
        /// Bundle directory written by `run`.
        bundle: PathBuf,
        /// Dataset file.
        dataset: PathBuf,
        /// Config supplying the complexity budget.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Route every sample to the base model.
        #[arg(long)]
        no_device_labels: bool,
        /// Directory for eval.json and eval.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Core(Error),
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    fn status(&self) -> u8 {
        match self {
            Failure::Gradcheck(_) => status::GRADCHECK,
            Failure::Core(e) => match e {
                Error::Config(_) => status::CONFIG,
                Error::Budget(_) => status::BUDGET,
                Error::Io { .. } | Error::Format { .. } | Error::Json(_) => status::IO,
                _ => status::OTHER,
            },
        }
    }

    fn class(&self) -> &'static str {
        match self.status() {
            status::CONFIG => "config error",
            status::BUDGET => "budget exceeded",
            status::IO => "i/o error",
            status::GRADCHECK => "gradient check failed",
            _ => "error",
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Gradcheck(m) => write!(f, "{m}"),
        }
    }
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = args.seed {
        cfg.experiment.seed = seed;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { cfg, out, force } => {
            let cfg = load_config(&cfg)?;
            let path = out.unwrap_or_else(|| cfg.experiment.out_dir.join("dataset.bin"));
            let split = experiment::generate_dataset(&cfg)?;
            let m = experiment::write_dataset_with_manifest(&cfg, &split, &path, force)?;
            println!(
                "wrote {} ({} train, {} validation samples, sha256 {})",
                path.display(),
                m.train_samples,
                m.validation_samples,
                m.sha256
            );
        }
        Command::Run {
            cfg,
            out,
            skip_dsft,
            force,
        } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(out) = out {
                cfg.experiment.out_dir = out;
            }
            let summary = experiment::run(&cfg, RunOptions { skip_dsft, force })?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            print!("{}", render_report(&summary.after, Format::Text));
            println!();
            print!("{}", dafa_core::eval::render_delta(&summary.delta, Format::Text));
            println!("reports in {}", summary.out_dir.join("reports").display());
        }
        Command::Gradcheck { seed, out, flip_sign } => {
            let mutation = if flip_sign { Mutation::FlipSign } else { Mutation::None };
            let report = run_suite(seed, mutation)?;
            println!("{report}");
            if let Some(path) = out {
                write(&path, &(serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n"))?;
            }
            let sentinel = run_suite(seed, Mutation::FlipSign)?;
            if sentinel.passed() {
                return Err(Failure::Gradcheck("sign-flip sentinel went undetected".into()));
            }
            println!("sign-flip sentinel detected in {} of {} checks", sentinel.failures().count(), sentinel.checks.len());
            if !report.passed() {
                let names: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
                return Err(Failure::Gradcheck(names.join(", ")));
            }
        }
        Command::Budget { config } => {
            let (spec, budget) = match config {
                Some(path) => {
                    // budget failures must be reported, not rejected at load
                    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                    let cfg: ExperimentConfig = parse_for_budget(&text, &path)?;
                    (cfg.student, cfg.budget)
                }
                None => (ExperimentConfig::desk().student, ComplexityBudget::default()),
            };
            let c = count_complexity(&spec);
            println!("student {:?} -> {} params, {} MACs", layer_widths(&spec), c.params, c.macs);
            let report = enforce_budget(&spec, &budget);
            println!("{report}");
            if !report.passed {
                return Err(Error::Budget(report.violations().join("; ")).into());
            }
        }
        Command::Eval {
            bundle,
            dataset,
            config,
            no_device_labels,
            out,
        } => {
            let budget = match config {
                Some(path) => ExperimentConfig::load(path)?.budget,
                None => ComplexityBudget::default(),
            };
            let bundle = ModelBundle::load(&bundle, &budget)?;
            let split = read_dataset(&dataset)?;
            let mut report = evaluate(&bundle, &split, !no_device_labels)?;
            report.stage = if no_device_labels { "base_only" } else { "device_routed" }.into();
            let text = render_report(&report, Format::Text);
            print!("{text}");
            if let Some(dir) = out {
                write(&dir.join("eval.json"), &render_report(&report, Format::Json))?;
                write(&dir.join("eval.txt"), &text)?;
            }
        }
    }
    Ok(())
}

/// Parses a config without the load-time budget gate so that `budget` can
/// print the full report for an oversized student.
fn parse_for_budget(text: &str, path: &Path) -> Result<ExperimentConfig, Error> {
    match ExperimentConfig::from_toml_str(text) {
        Ok(cfg) => Ok(cfg),
        Err(Error::Budget(_)) => ExperimentConfig::parse_unchecked(text),
        Err(Error::Config(m)) => Err(Error::Config(format!("{}: {m}", path.display()))),
        Err(e) => Err(e),
    }
}

fn layer_widths(spec: &dafa_core::model::NetworkSpec) -> Vec<usize> {
    let mut w = vec![spec.input_dim];
    w.extend(&spec.hidden_dims);
    w.extend([spec.embedding_dim, spec.num_classes]);
    w
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}: {f}", f.class());
            ExitCode::from(f.status())
        }
    }
}
