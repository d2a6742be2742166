//! Counting error metrics, instance matching, confusion matrices and reports.

mod matching;
mod metrics;
mod report;

pub use matching::{
    check_threshold, confusion_matrix, match_instances, ConfusionMatrix, Geometry, Match,
    MatchResult, PredictedObject, TruthObject, COL_LABELS, OTHER, ROW_LABELS,
};
pub use metrics::{mae, mape, CountPair, CountSeries, MapeMode};
pub use report::{per_image_csv, render_markdown, write_evaluation};

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detection::{mask_bbox, CountResult, ImageRecord, Mask};
use crate::error::{Error, Result};
use crate::pipelines::{ImageOutput, Predictions, Task};

/// Which geometry instance matching compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchGeometry {
    /// Masks when the run produced instance masks, boxes otherwise.
    #[default]
    Auto,
    Box,
    Mask,
}

impl FromStr for MatchGeometry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(MatchGeometry::Auto),
            "box" => Ok(MatchGeometry::Box),
            "mask" => Ok(MatchGeometry::Mask),
            other => Err(Error::invalid(format!(
                "unknown match geometry `{other}` (expected auto, box or mask)"
            ))),
        }
    }
}

impl fmt::Display for MatchGeometry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchGeometry::Auto => "auto",
            MatchGeometry::Box => "box",
            MatchGeometry::Mask => "mask",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawOptions")]
pub struct EvalOptions {
    pub mape_mode: MapeMode,
    pub iou_threshold: f64,
    pub geometry: MatchGeometry,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptions {
    #[serde(default)]
    mape_mode: MapeMode,
    #[serde(default = "default_iou")]
    iou_threshold: f64,
    #[serde(default)]
    geometry: MatchGeometry,
}

fn default_iou() -> f64 {
    0.5
}

impl TryFrom<RawOptions> for EvalOptions {
    type Error = Error;

    fn try_from(r: RawOptions) -> Result<Self> {
        check_threshold(r.iou_threshold)?;
        Ok(EvalOptions {
            mape_mode: r.mape_mode,
            iou_threshold: r.iou_threshold,
            geometry: r.geometry,
        })
    }
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            mape_mode: MapeMode::PerImage,
            iou_threshold: default_iou(),
            geometry: MatchGeometry::Auto,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorMetrics {
    pub mae: f64,
    /// Percent.
    pub mape: f64,
}

impl ErrorMetrics {
    pub fn of(series: &CountSeries, mode: MapeMode) -> Result<Self> {
        Ok(ErrorMetrics {
            mae: mae(series)?,
            mape: mape(series, mode)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionReport {
    pub geometry: MatchGeometry,
    pub iou_threshold: f64,
    pub matrix: ConfusionMatrix,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub task: Task,
    pub method: String,
    pub n_images: usize,
    pub mape_mode: MapeMode,
    pub pods: ErrorMetrics,
    pub seeds: ErrorMetrics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub image_id: String,
    pub predicted: CountResult,
    pub ground_truth: CountResult,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: CountReport,
    pub rows: Vec<ImageRow>,
}

fn pred_geometry(out: &ImageOutput, geometry: MatchGeometry, w: u32, h: u32) -> Result<Option<Vec<PredictedObject>>> {
    use crate::detection::rasterize;
    if let Some(inst) = &out.instances {
        return inst
            .iter()
            .map(|i| {
                let mask = Mask::from_rle(&i.mask)?;
                let geometry = match geometry {
                    MatchGeometry::Box => match mask_bbox(&mask) {
                        Some(b) => Geometry::Box(b?),
                        None => return Err(Error::invalid("predicted instance has an empty mask")),
                    },
                    _ => Geometry::Mask(mask),
                };
                Ok(PredictedObject {
                    geometry,
                    spp: i.spp,
                    confidence: i.confidence,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Some);
    }
    let Some(dets) = &out.detections else {
        return Ok(None);
    };
    dets.iter()
        .map(|d| {
            let geometry = match geometry {
                MatchGeometry::Mask => Geometry::Mask(rasterize(&d.bbox.to_polygon(w, h), w, h)?),
                _ => Geometry::Box(d.bbox),
            };
            Ok(PredictedObject {
                geometry,
                spp: d.spp,
                confidence: d.confidence,
            })
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn truth_geometry(record: &ImageRecord, use_masks: bool) -> Result<Vec<TruthObject>> {
    Ok(if use_masks {
        record
            .truth_masks()?
            .into_iter()
            .map(|(m, spp)| TruthObject {
                geometry: Geometry::Mask(m),
                spp,
            })
            .collect()
    } else {
        record
            .truth_boxes()?
            .into_iter()
            .map(|d| TruthObject {
                geometry: Geometry::Box(d.bbox),
                spp: d.spp,
            })
            .collect()
    })
}

fn image_confusion(record: &ImageRecord, out: &ImageOutput, opts: &EvalOptions) -> Result<Option<(ConfusionMatrix, MatchGeometry)>> {
    let resolved = match opts.geometry {
        MatchGeometry::Auto if out.instances.is_some() => MatchGeometry::Mask,
        MatchGeometry::Auto => MatchGeometry::Box,
        g => g,
    };
    let Some(preds) = pred_geometry(out, resolved, record.width, record.height)? else {
        return Ok(None);
    };
    let gts = truth_geometry(record, resolved == MatchGeometry::Mask)?;
    let m = match_instances(&preds, &gts, opts.iou_threshold)?;
    let pc: Vec<_> = preds.iter().map(|p| p.spp).collect();
    let gc: Vec<_> = gts.iter().map(|g| g.spp).collect();
    Ok(Some((confusion_matrix(&m, &pc, &gc)?, resolved)))
}

/// Scores a pipeline run against the dataset it ran on. Every record must
/// have exactly one output and every output must name a record.
pub fn evaluate_run(records: &[ImageRecord], predictions: &Predictions, opts: &EvalOptions) -> Result<Evaluation> {
    let mut by_id: HashMap<&str, &ImageOutput> = HashMap::new();
    for out in &predictions.outputs {
        if by_id.insert(out.image_id.as_str(), out).is_some() {
            return Err(Error::invalid(format!("duplicate output for image `{}`", out.image_id)));
        }
    }
    let ids: BTreeSet<&str> = records.iter().map(|r| r.image_id.as_str()).collect();
    let missing: Vec<&str> = records
        .iter()
        .map(|r| r.image_id.as_str())
        .filter(|id| !by_id.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!(
            "no pipeline output for {} image(s): {}",
            missing.len(),
            missing.join(", ")
        )));
    }
    let mut extra: Vec<&str> = by_id.keys().copied().filter(|id| !ids.contains(id)).collect();
    if !extra.is_empty() {
        extra.sort_unstable();
        return Err(Error::invalid(format!(
            "outputs for images not in the dataset: {}",
            extra.join(", ")
        )));
    }

    let rows: Vec<ImageRow> = records
        .iter()
        .map(|r| ImageRow {
            image_id: r.image_id.clone(),
            predicted: by_id[r.image_id.as_str()].counts,
            ground_truth: r.annotations.count(),
        })
        .collect();
    let series = |f: fn(&CountResult) -> u64| {
        CountSeries::new(
            rows.iter()
                .map(|r| CountPair {
                    image_id: r.image_id.clone(),
                    predicted: f(&r.predicted),
                    ground_truth: f(&r.ground_truth),
                })
                .collect(),
        )
    };
    let pods = ErrorMetrics::of(&series(|c| c.pod_count)?, opts.mape_mode)?;
    let seeds = ErrorMetrics::of(&series(|c| c.seed_count)?, opts.mape_mode)?;

    let per_image: Vec<Option<(ConfusionMatrix, MatchGeometry)>> = records
        .par_iter()
        .map(|r| image_confusion(r, by_id[r.image_id.as_str()], opts))
        .collect::<Result<_>>()?;
    let mut confusion: Option<ConfusionReport> = None;
    for (cm, geometry) in per_image.into_iter().flatten() {
        match &mut confusion {
            Some(c) => c.matrix.merge(&cm),
            None => {
                confusion = Some(ConfusionReport {
                    geometry,
                    iou_threshold: opts.iou_threshold,
                    matrix: cm,
                })
            }
        }
    }

    Ok(Evaluation {
        report: CountReport {
            task: predictions.task,
            method: predictions.method.clone(),
            n_images: records.len(),
            mape_mode: opts.mape_mode,
            pods,
            seeds,
            confusion,
            config: predictions.config.clone(),
        },
        rows,
    })
}
