use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sada::experiment::{
    augment_command, evaluate, load_desk_data, run_report, run_sweep, run_train, sensitivity_command, ExperimentConfig,
    Preset, SweepAxis, Workspace, OUTPUT_DIR_ENV,
};
use sada::model::load_checkpoint;
use sada::sensitivity::{map_l1_summary, DScale, MapKind, SensitivityMap};
use sada::{Result, SadaError};

/// Spectral sensitivity maps and spectral adversarial data augmentation.
#[derive(Parser)]
#[command(name = "sada", version, args_override_self = true)]
struct Cli {
    /// Output root for runs and caches.
    #[arg(long, global = true, env = OUTPUT_DIR_ENV)]
    output_dir: Option<PathBuf>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute a sensitivity map of a checkpoint on the source split.
    Sensitivity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        kind: Option<KindArg>,
        /// Noise norm of the original map.
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long, value_enum)]
        d_scale: Option<DScaleArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for <stem>.csv/.json/.png.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "map")]
        stem: String,
    },
    /// Write SADA augmentations of the first source images.
    Augment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Map as <dir>/<stem> (files <stem>.csv and <stem>.json).
        #[arg(long)]
        map: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// ERM pretraining, map, finetuning and evaluation for every seed.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Accuracy of a checkpoint on the clean and target test sets.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the report to this JSON file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One training run per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// lambda, T, delta or epsilon.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Accuracy versus map l1 across runs.
    Report {
        /// Run directories (each with records/).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Copy, Clone, ValueEnum)]
enum KindArg {
    Original,
    Modulated,
}

#[derive(Copy, Clone, ValueEnum)]
enum DScaleArg {
    Orthonormal,
    Unnormalized,
}

/// Config file plus overrides; flags win over the file.
#[derive(Args)]
struct Common {
    /// Experiment config (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    /// Comma-separated seed list; the last occurrence wins.
    #[arg(long)]
    seeds: Option<String>,
    /// Fraction of source samples that get augmented views.
    #[arg(long)]
    aug_fraction: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Finetuning epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    erm_epochs: Option<usize>,
    /// Share of source images evaluated per frequency bin.
    #[arg(long)]
    map_fraction: Option<f64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, output_dir: &Option<PathBuf>) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(p) = &self.preset {
            cfg = cfg.with_preset(p.parse::<Preset>()?);
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = s
                .split(',')
                .map(|v| v.trim().parse::<u64>().map_err(|_| SadaError::Config(format!("--seeds: bad seed {v:?}"))))
                .collect::<Result<_>>()?;
        }
        if let Some(f) = self.aug_fraction {
            cfg.train.aug_fraction = f;
        }
        if let Some(l) = self.lambda {
            SweepAxis::Lambda.apply(&mut cfg, l)?;
        }
        if let Some(e) = self.epochs {
            cfg.train.optimizer.epochs = e;
        }
        if let Some(e) = self.erm_epochs {
            cfg.erm.epochs = e;
        }
        if let Some(f) = self.map_fraction {
            cfg.map.sample_fraction = f;
        }
        if let Some(n) = self.n_train {
            cfg.data.n_train = n;
        }
        if let Some(n) = self.n_test {
            cfg.data.n_test = n;
        }
        if let Some(d) = &self.data_dir {
            cfg.data.dir = Some(d.clone());
        }
        if output_dir.is_some() {
            cfg.output_dir = output_dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(SadaError::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn split_map_path(path: &Path) -> Result<(PathBuf, String)> {
    let stem = path
        .file_name()
        .map(|s| s.to_string_lossy().trim_end_matches(".csv").to_string())
        .ok_or_else(|| SadaError::Config(format!("--map {} has no file stem", path.display())))?;
    Ok((path.parent().map(Path::to_path_buf).unwrap_or_default(), stem))
}

fn run(cli: Cli) -> Result<()> {
    let out_root = cli.output_dir;
    match cli.command {
        Command::Sensitivity { common, checkpoint, kind, epsilon, d_scale, seed, out, stem } => {
            let mut cfg = common.resolve(&out_root)?;
            if let Some(k) = kind {
                cfg.map.kind = match k {
                    KindArg::Original => MapKind::Original,
                    KindArg::Modulated => MapKind::AmplitudeModulated,
                };
            }
            if let Some(e) = epsilon {
                cfg.map.epsilon = e;
            }
            if let Some(d) = d_scale {
                cfg.map.d_scale = match d {
                    DScaleArg::Orthonormal => DScale::Orthonormal,
                    DScaleArg::Unnormalized => DScale::Unnormalized,
                };
            }
            cfg.validate()?;
            let model = load_checkpoint(&checkpoint)?;
            let data = load_desk_data(&cfg)?;
            let map = sensitivity_command(&model, &data.train, &cfg.map, seed, &out, &stem)?;
            let (central, outer) = sada::sensitivity::central_and_outer_means(&map.values);
            print_json(&serde_json::json!({
                "map": out.join(format!("{stem}.csv")),
                "l1": map_l1_summary(&map),
                "central_mean": central,
                "outer_mean": outer,
            }))
        }
        Command::Augment { common, checkpoint, map, count, seed, out } => {
            let cfg = common.resolve(&out_root)?;
            let model = load_checkpoint(&checkpoint)?;
            let (dir, stem) = split_map_path(&map)?;
            let map = SensitivityMap::load(&dir, &stem)?;
            let data = load_desk_data(&cfg)?;
            let manifest = augment_command(&model, &map, &data.train, &cfg.train.augmentation, count, seed, &out)?;
            let flips = manifest.items.iter().filter(|i| i.trace.prediction_changed).count();
            print_json(&serde_json::json!({ "out": out, "images": manifest.items.len(), "prediction_changed": flips }))
        }
        Command::Train { common } => {
            let cfg = common.resolve(&out_root)?;
            let ws = Workspace::for_config(&cfg)?;
            let (record, path) = run_train(&cfg, &ws, None)?;
            eprintln!("record written to {}", path.display());
            print_json(&record)
        }
        Command::Eval { common, checkpoint, out } => {
            let cfg = common.resolve(&out_root)?;
            let model = load_checkpoint(&checkpoint)?;
            let report = evaluate(&model, &load_desk_data(&cfg)?)?;
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n")
                    .map_err(|e| SadaError::io(&path, e))?;
            }
            print_json(&report)
        }
        Command::Sweep { common, axis, values } => {
            let cfg = common.resolve(&out_root)?;
            let axis: SweepAxis = axis.parse()?;
            let ws = Workspace::for_config(&cfg)?;
            let (report, dir) = run_sweep(&cfg, axis, &values, &ws, None)?;
            eprintln!("sweep written to {} ({} failed)", dir.display(), report.failures());
            print_json(&report)
        }
        Command::Report { runs, out } => {
            let report = run_report(&runs, &out)?;
            print_json(&report)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
