//! The operations behind each CLI subcommand, callable as library functions.
//! Every function takes a resolved [`RunConfig`] and an output directory.

use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adversarial::{count_mae, TrainLogEntry};
use crate::checkpoint::{save_checkpoint, Checkpoint};
use crate::composer::{load_cutouts, render_dataset, write_manifest, Manifest};
use crate::config::RunConfig;
use crate::dataset::{
    ingest_dataset, load_rgb, read_json, save_png, write_json, DatasetKind, DomainsFile, FieldAnnotationFile,
    DOMAINS_FILE, PREDICTIONS_FILE, RUN_CONFIG_FILE,
};
use crate::detection::{CountResult, Domain, ImageRecord};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_run, render_markdown, write_evaluation, CountReport, Evaluation};
use crate::fixtures::{make_fixtures, FixtureSizes};
use crate::pipelines::{run_pipeline, BackendContext, Predictions, Task};

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.json";
pub const TRAIN_SUMMARY_FILE: &str = "summary.json";
/// Held-out toy images written by `train-da`, laid out as a field dataset.
pub const TOY_EVAL_DIR: &str = "toy_eval";

fn echo(cfg: &RunConfig) -> Result<Value> {
    serde_json::to_value(cfg).map_err(|e| Error::invalid(format!("config does not serialize: {e}")))
}

fn write_echo(out: &Path, cfg: &RunConfig) -> Result<()> {
    write_json(&out.join(RUN_CONFIG_FILE), cfg)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::invalid(format!("missing input: set `data.{key}` or pass --{}", key.replace('_', "-"))))
}

/// Composes `n_train + n_eval` scenes from the pool onto the background.
pub fn synthesize(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let pool = load_cutouts(require(&cfg.data.pool, "pool")?)?;
    if pool.is_empty() {
        return Err(Error::invalid("the pool has no usable instances"));
    }
    let background = load_rgb(require(&cfg.data.background, "background")?)?;
    info!("composing {}+{} scenes from {} cutouts", cfg.data.n_train, cfg.data.n_eval, pool.len());
    let mut manifest = render_dataset(&pool, &background, cfg.data.n_train, cfg.data.n_eval, &cfg.composer, out)?;
    manifest.run_config = Some(echo(cfg)?);
    write_manifest(out, &manifest)?;
    write_echo(out, cfg)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub adapted: bool,
    pub steps: usize,
    /// Held-out accuracy of a fresh domain probe on frozen features; 0.5 is chance.
    pub probe_domain_accuracy: f64,
    pub source_count_mae: f64,
    pub target_count_mae: f64,
    pub final_losses: Option<TrainLogEntry>,
    pub config: Value,
}

/// Trains the toy detector, saves the checkpoint, and exports held-out
/// images of both domains as a field dataset for `count`.
pub fn train_da(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let exp = &cfg.training;
    let seed = cfg.rng_seed;
    let adapt = cfg.train_da.adapt;
    info!("training toy detector for {} steps (adapt = {adapt})", exp.steps);
    let outcome = exp.train(seed, adapt)?;
    let probe = exp.probe(&outcome.detector, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4));
    let n = cfg.train_da.export_images;
    let source = exp.task.batch(Domain::Source, n, &mut rng);
    let target = exp.task.batch(Domain::Target, n, &mut rng);
    let summary = TrainSummary {
        adapted: adapt,
        steps: exp.steps,
        probe_domain_accuracy: probe,
        source_count_mae: count_mae(&outcome.detector, &source),
        target_count_mae: count_mae(&outcome.detector, &target),
        final_losses: outcome.log.last().cloned(),
        config: echo(cfg)?,
    };

    let ckpt = Checkpoint::new(outcome.detector, exp.grl, exp.roi, adapt);
    save_checkpoint(&ckpt, &out.join(CHECKPOINT_FILE))?;
    write_json(&out.join(TRAIN_LOG_FILE), &outcome.log)?;
    let dir = out.join(TOY_EVAL_DIR);
    let mut target_ids = Vec::new();
    for (domain, samples) in [(Domain::Source, &source), (Domain::Target, &target)] {
        for (i, s) in samples.iter().enumerate() {
            let stem = format!("{domain:?}_{i:03}").to_lowercase();
            let image = format!("{stem}.png");
            save_png(&dir.join(&image), &s.to_rgb())?;
            let (w, h) = (s.image.dim().2 as u32, s.image.dim().1 as u32);
            write_json(
                &dir.join(format!("{stem}.json")),
                &FieldAnnotationFile::from_detections(PathBuf::from(image), w, h, &s.labels),
            )?;
            if domain == Domain::Target {
                target_ids.push(stem);
            }
        }
    }
    write_json(
        &dir.join(DOMAINS_FILE),
        &DomainsFile {
            source: None,
            target: target_ids,
        },
    )?;
    write_json(&out.join(TRAIN_SUMMARY_FILE), &summary)?;
    write_echo(out, cfg)?;
    Ok(summary)
}

/// Runs the configured pipeline over `data.dataset` and writes `predictions.json`.
pub fn count(cfg: &RunConfig, out: &Path) -> Result<Predictions> {
    cfg.validate()?;
    cfg.check_task_backends()?;
    let records = ingest_dataset(require(&cfg.data.dataset, "dataset")?, cfg.dataset_kind())?;
    let ctx = BackendContext::new(&records, cfg.rng_seed);
    let backends = cfg.build_backends(&ctx)?;
    info!("running {} with {} on {} images", cfg.task, cfg.method_name(), records.len());
    let outputs = run_pipeline(cfg.task, &records, &backends, &cfg.pipeline)?;
    let predictions = Predictions {
        task: cfg.task,
        method: cfg.method_name(),
        outputs,
        config: Some(echo(cfg)?),
    };
    write_json(&out.join(PREDICTIONS_FILE), &predictions)?;
    write_echo(out, cfg)?;
    Ok(predictions)
}

/// Scores `data.predictions` against `data.dataset` and writes the report
/// files. The configuration echo goes into `report.json` only, so the
/// `run_config.json` of a `count` run in the same directory survives.
pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<Evaluation> {
    cfg.validate()?;
    let predictions: Predictions = read_json(require(&cfg.data.predictions, "predictions")?)?;
    let kind = cfg.data.kind.unwrap_or(match predictions.task {
        Task::Indoor => DatasetKind::Instance,
        Task::Outdoor | Task::OutdoorSam => DatasetKind::Field,
    });
    let records = ingest_dataset(require(&cfg.data.dataset, "dataset")?, kind)?;
    let mut eval = evaluate_run(&records, &predictions, &cfg.evaluation)?;
    eval.report.config = Some(echo(cfg)?);
    write_evaluation(out, &eval)?;
    Ok(eval)
}

/// Renders one markdown document from several `report.json` files.
pub fn report(reports: &[PathBuf], out: &Path) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("no report files given"));
    }
    let parsed = reports
        .iter()
        .map(|p| read_json::<CountReport>(p))
        .collect::<Result<Vec<_>>>()?;
    let md = render_markdown(&parsed);
    crate::dataset::write_bytes(&out.join("report.md"), md.as_bytes())?;
    Ok(md)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub kind: DatasetKind,
    pub images: usize,
    pub target_images: usize,
    pub totals: CountResult,
}

fn summarize(kind: DatasetKind, records: &[ImageRecord]) -> DatasetSummary {
    DatasetSummary {
        kind,
        images: records.len(),
        target_images: records.iter().filter(|r| r.domain.in_target()).count(),
        totals: records.iter().map(|r| r.annotations.count()).sum(),
    }
}

/// Schema and invariant checks only: the configuration, and the dataset
/// when one is configured.
pub fn validate(cfg: &RunConfig) -> Result<Option<DatasetSummary>> {
    cfg.validate()?;
    let Some(root) = &cfg.data.dataset else {
        return Ok(None);
    };
    let kind = cfg.dataset_kind();
    Ok(Some(summarize(kind, &ingest_dataset(root, kind)?)))
}

pub fn fixtures(cfg: &RunConfig, out: &Path) -> Result<()> {
    make_fixtures(out, &FixtureSizes::default(), cfg.rng_seed)
}
