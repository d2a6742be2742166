//! Command-line front end. Flags override the loaded [`RunConfig`]; the
//! resolved configuration is what each command runs and echoes.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::LevelFilter;

use crate::commands;
use crate::config::RunConfig;
use crate::dataset::DatasetKind;
use crate::error::{Error, Result};
use crate::evaluation::{MapeMode, MatchGeometry};
use crate::pipelines::{BackendRef, Task};

pub const SEED_ENV: &str = "PODCOUNT_SEED";

#[derive(Debug, Parser)]
#[command(name = "podcount", version, about = "Pod and seed counting experiments")]
pub struct Cli {
    /// Base seed for every random choice; PODCOUNT_SEED takes precedence.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory for all outputs.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = LogLevel::Warn)]
    pub log_level: LogLevel,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LogLevel {
    Error,
    Warn,
    Info,
    Debug,
}

impl From<LogLevel> for LevelFilter {
    fn from(l: LogLevel) -> Self {
        match l {
            LogLevel::Error => LevelFilter::Error,
            LogLevel::Warn => LevelFilter::Warn,
            LogLevel::Info => LevelFilter::Info,
            LogLevel::Debug => LevelFilter::Debug,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compose a synthetic indoor dataset from a labeled pod pool.
    Synthesize {
        #[arg(long)]
        pool: Option<PathBuf>,
        #[arg(long)]
        background: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<u64>,
        #[arg(long)]
        n_eval: Option<u64>,
    },
    /// Train the toy detector with (or without) domain adaptation.
    TrainDa {
        #[arg(long)]
        steps: Option<usize>,
        /// Detection-only training.
        #[arg(long)]
        no_adapt: bool,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Run a counting pipeline over a dataset.
    Count {
        #[arg(long)]
        task: Option<Task>,
        #[command(flatten)]
        dataset: DatasetArgs,
        #[arg(long, visible_alias = "backend")]
        detector: Option<BackendRef>,
        #[arg(long)]
        segmenter: Option<BackendRef>,
        #[arg(long)]
        classifier: Option<BackendRef>,
        /// Detections whose centers prompt the segmenter (outdoor-sam).
        #[arg(long)]
        prompt_top_n: Option<usize>,
    },
    /// Score predictions against a dataset.
    Evaluate {
        #[command(flatten)]
        dataset: DatasetArgs,
        /// Defaults to predictions.json in the output directory.
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        mape_mode: Option<MapeMode>,
        #[arg(long)]
        iou_threshold: Option<f64>,
        #[arg(long)]
        geometry: Option<MatchGeometry>,
    },
    /// Render markdown tables from report.json files.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// Check the configuration and, if given, a dataset without running anything.
    Validate {
        #[arg(long)]
        task: Option<Task>,
        #[command(flatten)]
        dataset: DatasetArgs,
    },
    /// Write procedural sample data: an indoor pool, a background, a field set.
    MakeFixtures,
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub kind: Option<DatasetKind>,
}

impl DatasetArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(d) = &self.dataset {
            cfg.data.dataset = Some(d.clone());
        }
        if let Some(k) = self.kind {
            cfg.data.kind = Some(k);
        }
    }
}

/// Seed precedence: environment, then `--seed`, then the config file.
pub fn resolve_seed(env: Option<&str>, flag: Option<u64>, cfg: &RunConfig) -> Result<u64> {
    match env {
        Some(v) => v
            .trim()
            .parse()
            .map_err(|_| Error::invalid(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        None => Ok(flag.unwrap_or(cfg.rng_seed)),
    }
}

/// Loads the config file (if any) and applies the command's flags.
pub fn resolve_config(cli: &Cli, env_seed: Option<&str>) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = resolve_seed(env_seed, cli.seed, &cfg)?;
    cfg.rng_seed = seed;
    cfg.composer.rng_seed = seed;
    match &cli.command {
        Command::Synthesize {
            pool,
            background,
            n_train,
            n_eval,
        } => {
            if let Some(p) = pool {
                cfg.data.pool = Some(p.clone());
            }
            if let Some(b) = background {
                cfg.data.background = Some(b.clone());
            }
            if let Some(n) = n_train {
                cfg.data.n_train = *n;
            }
            if let Some(n) = n_eval {
                cfg.data.n_eval = *n;
            }
        }
        Command::TrainDa { steps, no_adapt, alpha } => {
            if let Some(s) = steps {
                cfg.training.steps = *s;
            }
            if *no_adapt {
                cfg.train_da.adapt = false;
            }
            if let Some(a) = alpha {
                cfg.training.grl = crate::adversarial::GrlConfig::new(*a)?;
            }
        }
        Command::Count {
            task,
            dataset,
            detector,
            segmenter,
            classifier,
            prompt_top_n,
        } => {
            if let Some(n) = prompt_top_n {
                cfg.pipeline = crate::pipelines::PipelineConfig::new(*n, cfg.pipeline.background_fill)?;
            }
            if let Some(t) = task {
                cfg.task = *t;
            }
            dataset.apply(&mut cfg);
            for (slot, value) in [
                (&mut cfg.backends.detector, detector),
                (&mut cfg.backends.segmenter, segmenter),
                (&mut cfg.backends.classifier, classifier),
            ] {
                if let Some(v) = value {
                    *slot = Some(v.clone());
                }
            }
        }
        Command::Evaluate {
            dataset,
            predictions,
            mape_mode,
            iou_threshold,
            geometry,
        } => {
            dataset.apply(&mut cfg);
            if let Some(p) = predictions {
                cfg.data.predictions = Some(p.clone());
            } else if cfg.data.predictions.is_none() {
                cfg.data.predictions = Some(cli.out.join(crate::dataset::PREDICTIONS_FILE));
            }
            if let Some(m) = mape_mode {
                cfg.evaluation.mape_mode = *m;
            }
            if let Some(t) = iou_threshold {
                crate::evaluation::check_threshold(*t)?;
                cfg.evaluation.iou_threshold = *t;
            }
            if let Some(g) = geometry {
                cfg.evaluation.geometry = *g;
            }
        }
        Command::Validate { task, dataset } => {
            if let Some(t) = task {
                cfg.task = *t;
            }
            dataset.apply(&mut cfg);
        }
        Command::Report { .. } | Command::MakeFixtures => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: &Cli, cfg: &RunConfig) -> Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::Synthesize { .. } => {
            let m = commands::synthesize(cfg, out)?;
            println!(
                "wrote {} scenes ({} train, {} eval) to {}",
                m.total_images,
                m.n_train,
                m.n_eval,
                out.display()
            );
        }
        Command::TrainDa { .. } => {
            let s = commands::train_da(cfg, out)?;
            println!(
                "probe domain accuracy {:.3}; count MAE source {:.3}, target {:.3}; checkpoint in {}",
                s.probe_domain_accuracy,
                s.source_count_mae,
                s.target_count_mae,
                out.join(commands::CHECKPOINT_FILE).display()
            );
        }
        Command::Count { .. } => {
            let p = commands::count(cfg, out)?;
            println!("counted {} images with {}", p.outputs.len(), p.method);
        }
        Command::Evaluate { .. } => {
            let e = commands::evaluate(cfg, out)?;
            print!("{}", crate::evaluation::render_markdown(std::slice::from_ref(&e.report)));
        }
        Command::Report { reports } => {
            print!("{}", commands::report(reports, out)?);
        }
        Command::Validate { .. } => match commands::validate(cfg)? {
            Some(s) => println!(
                "ok: {} {} images ({} target), {} pods, {} seeds",
                s.images, s.kind, s.target_images, s.totals.pod_count, s.totals.seed_count
            ),
            None => println!("ok: configuration"),
        },
        Command::MakeFixtures => {
            commands::fixtures(cfg, out)?;
            println!("wrote fixtures to {}", out.display());
        }
    }
    Ok(())
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Parses `argv`, runs the command and returns the process exit code:
/// 0 on success, 1 for usage or validation errors, 2 for runtime failures.
pub fn run<I, T>(argv: I, env_seed: Option<&str>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(cli.log_level.into())
        .format_timestamp(None)
        .try_init();
    let result = resolve_config(&cli, env_seed).and_then(|cfg| execute(&cli, &cfg));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_precedence() {
        let cfg = RunConfig {
            rng_seed: 5,
            ..RunConfig::default()
        };
        assert_eq!(resolve_seed(None, None, &cfg).unwrap(), 5);
        assert_eq!(resolve_seed(None, Some(9), &cfg).unwrap(), 9);
        assert_eq!(resolve_seed(Some("12"), Some(9), &cfg).unwrap(), 12);
        assert!(resolve_seed(Some("x"), None, &cfg).is_err());
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::try_parse_from([
            "podcount", "--seed", "3", "count", "--task", "outdoor-sam", "--backend", "dropout-oracle(0.2)",
            "--segmenter", "fullmask-segmenter", "--dataset", "d",
        ])
        .unwrap();
        let cfg = resolve_config(&cli, None).unwrap();
        assert_eq!(cfg.task, Task::OutdoorSam);
        assert_eq!(cfg.rng_seed, 3);
        assert_eq!(cfg.composer.rng_seed, 3);
        assert_eq!(cfg.method_name(), "dropout-oracle(0.2)+fullmask-segmenter");
        assert_eq!(cfg.data.dataset, Some(PathBuf::from("d")));
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["podcount", "frobnicate"], None), 1);
        assert_eq!(run(["podcount", "validate", "--bogus"], None), 1);
        assert_eq!(run(["podcount", "count", "--backend", "yolo"], None), 1);
        assert_eq!(run(["podcount", "--help"], None), 0);
    }
}
