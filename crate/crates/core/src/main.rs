use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sparselab::coherence::certify;
use sparselab::data::{self, GenConfig, Split};
use sparselab::harness::{
    metrics_csv, run_eval, run_sweep, train_model, write_metrics, ExperimentConfig, ModelKind, SweepConfig,
    TrainedModel, DEFAULT_MEASUREMENTS,
};
use sparselab::vlista::{ood_detect, ood_pools, DEFAULT_DRAWS, DEFAULT_SIGNIFICANCE};
use sparselab::{Error, Result};

#[derive(Parser)]
#[command(name = "sparselab", version, about = "Sparse recovery with learned unrolled solvers")]
struct Cli {
    /// Root seed; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write its checkpoint directory.
    Train {
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        /// Write wall_s as 0 for byte-stable output.
        #[arg(long)]
        no_wall_time: bool,
    },
    /// Certify the threshold condition and error bound on dataset instances.
    Diagnose {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 5)]
        layers: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Out-of-distribution test of a VLISTA checkpoint against a shifted dictionary.
    Ood {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise_std: f64,
        #[arg(long, default_value_t = DEFAULT_DRAWS)]
        draws: usize,
        #[arg(long, default_value_t = DEFAULT_SIGNIFICANCE)]
        significance: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate models across measurement counts.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_MEASUREMENTS)]
        measurements: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values = ["ista-grid", "lista", "dlista", "adlista"])]
        models: Vec<ModelKind>,
        /// Data generation config (m is replaced per point).
        #[arg(long)]
        data_config: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for sweep.csv and checkpoints.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_wall_time: bool,
    },
}

fn experiment(path: Option<&Path>, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn gen_config(path: Option<&Path>, seed: Option<u64>) -> Result<GenConfig> {
    let mut cfg = match path {
        Some(p) => GenConfig::load(p)?,
        None => GenConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = gen_config(config.as_deref(), seed)?;
            let ds = data::generate(&cfg)?;
            data::save(&ds, &out)?;
            eprintln!("wrote {} instances to {}", ds.len(), out.display());
        }
        Command::Train {
            model,
            data: data_path,
            config,
            out,
        } => {
            let cfg = experiment(config.as_deref(), seed)?;
            let kind = model
                .or(cfg.model)
                .ok_or_else(|| Error::InvalidArgument("no model given (use --model or `model` in the config)".into()))?;
            let data_path = data_path
                .or_else(|| cfg.data.clone())
                .ok_or_else(|| Error::InvalidArgument("no dataset given (use --data or `data` in the config)".into()))?;
            let ds = data::load(&data_path)?;
            let (trained, report) = train_model(kind, &ds, &cfg)?;
            trained.save(&out)?;
            write_json(&out.join("train_report.json"), &report)?;
            eprintln!("trained {kind} in {:.1}s, checkpoint in {}", report.wall_s, out.display());
        }
        Command::Eval {
            ckpt,
            data: data_path,
            split,
            out,
            no_wall_time,
        } => {
            let model = TrainedModel::load(&ckpt)?;
            let ds = data::load(&data_path)?;
            let record = run_eval(&model, &ds, split)?;
            write_metrics(&out, std::slice::from_ref(&record), !no_wall_time)?;
            print!("{}", metrics_csv(std::slice::from_ref(&record), !no_wall_time));
        }
        Command::Diagnose {
            data: data_path,
            trials,
            layers,
            out,
        } => {
            let ds = data::load(&data_path)?;
            if trials > ds.len() {
                return Err(Error::InvalidArgument(format!(
                    "{trials} trials requested but the dataset holds {} instances",
                    ds.len()
                )));
            }
            let sink = create(&out)?;
            let summary = certify(ds.instances.iter().take(trials), &ds.psi_o, layers, Some(sink))?;
            let summary_path = out.with_extension("summary.json");
            write_json(&summary_path, &summary)?;
            println!("{}", serde_json::to_string(&summary).map_err(|e| Error::InvalidArgument(e.to_string()))?);
        }
        Command::Ood {
            ckpt,
            data: data_path,
            noise_std,
            draws,
            significance,
            out,
        } => {
            let model = match TrainedModel::load(&ckpt)? {
                TrainedModel::Vlista(m) => m,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "ood needs a vlista checkpoint, got {}",
                        other.kind()
                    )))
                }
            };
            let ds = data::load(&data_path)?;
            let root = seed.unwrap_or(0);
            let (id, ood) = ood_pools(&ds, noise_std, root)?;
            let det = ood_detect(&model, &id, &ood, draws, significance, root)?;
            let report = det.report(noise_std);
            write_json(&out, &report)?;
            println!("{}", serde_json::to_string(&report).map_err(|e| Error::InvalidArgument(e.to_string()))?);
        }
        Command::Sweep {
            measurements,
            models,
            data_config,
            config,
            out,
            no_wall_time,
        } => {
            let cfg = SweepConfig {
                measurements,
                models,
                data: gen_config(data_config.as_deref(), seed)?,
                experiment: experiment(config.as_deref(), seed)?,
            };
            let result = run_sweep(&cfg, Some(&out))?;
            write_metrics(&out.join("sweep.csv"), &result.records, !no_wall_time)?;
            write_json(&out.join("train_reports.json"), &result.reports)?;
            print!("{}", metrics_csv(&result.records, !no_wall_time));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
