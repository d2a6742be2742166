//! Counting procedures: direct detection, detect/segment/re-detect with
//! background removal, and segment-then-classify.

mod backends;

pub use backends::{
    build_classifier, build_detector, build_segmenter, BackendContext, BackendKind, BackendRef,
    ConstantClassifier, DropoutOracleDetector, FullMaskSegmenter, OracleClassifier,
    OracleDetector, OracleSegmenter, ToyDetectorBackend, REGISTRY,
};

use std::fmt;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::load_rgb;
use crate::detection::{
    count_from_detections, sort_by_confidence, CountResult, Detection, ImageRecord, Mask, Rle,
    SppClass,
};
use crate::error::{Error, Result};

/// Pixels of one image together with its dataset id.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image_id: String,
    pub image: RgbImage,
}

pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> String;
    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>>;
}

pub trait SegmenterBackend: Send + Sync {
    fn name(&self) -> String;
    /// Foreground mask prompted by points in normalized `[x, y]` coordinates.
    fn segment_from_points(&self, frame: &Frame, points: &[[f64; 2]]) -> Result<Mask>;
    /// Instance masks with confidences.
    fn segment_instances(&self, frame: &Frame) -> Result<Vec<(Mask, f64)>>;
}

pub trait ClassifierBackend: Send + Sync {
    fn name(&self) -> String;
    /// `crop` and `mask` cover the same window, whose top-left corner sits
    /// at `origin` in the full frame.
    fn classify(&self, frame: &Frame, crop: &RgbImage, mask: &Mask, origin: (u32, u32)) -> Result<SppClass>;
}

/// Margin in pixels around a mask's bounding box when cropping for the classifier.
pub const CROP_MARGIN: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPipeline")]
pub struct PipelineConfig {
    /// Highest-confidence detections whose centers become prompts.
    pub prompt_top_n: usize,
    pub background_fill: [u8; 3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPipeline {
    #[serde(default = "default_top_n")]
    prompt_top_n: usize,
    #[serde(default)]
    background_fill: [u8; 3],
}

fn default_top_n() -> usize {
    10
}

impl TryFrom<RawPipeline> for PipelineConfig {
    type Error = Error;

    fn try_from(raw: RawPipeline) -> Result<Self> {
        PipelineConfig::new(raw.prompt_top_n, raw.background_fill)
    }
}

impl PipelineConfig {
    pub fn new(prompt_top_n: usize, background_fill: [u8; 3]) -> Result<Self> {
        if prompt_top_n == 0 {
            return Err(Error::invalid("prompt_top_n must be >= 1"));
        }
        Ok(PipelineConfig {
            prompt_top_n,
            background_fill,
        })
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            prompt_top_n: default_top_n(),
            background_fill: [0, 0, 0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Outdoor,
    OutdoorSam,
    Indoor,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "outdoor" => Ok(Task::Outdoor),
            "outdoor-sam" => Ok(Task::OutdoorSam),
            "indoor" => Ok(Task::Indoor),
            other => Err(Error::invalid(format!(
                "unknown task `{other}` (expected outdoor, outdoor-sam or indoor)"
            ))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Outdoor => "outdoor",
            Task::OutdoorSam => "outdoor-sam",
            Task::Indoor => "indoor",
        })
    }
}

/// Attributes a backend failure to the backend and image.
fn blame<T>(result: Result<T>, backend: &str, frame: &Frame) -> Result<T> {
    result.map_err(|e| match e {
        e @ Error::Backend { .. } => e,
        other => Error::Backend {
            backend: backend.to_string(),
            image_id: frame.image_id.clone(),
            message: other.to_string(),
        },
    })
}

fn check_mask(mask: &Mask, backend: &str, frame: &Frame) -> Result<()> {
    if (mask.width(), mask.height()) != frame.image.dimensions() {
        return Err(Error::Backend {
            backend: backend.to_string(),
            image_id: frame.image_id.clone(),
            message: format!(
                "mask is {}x{} but the image is {:?}",
                mask.width(),
                mask.height(),
                frame.image.dimensions()
            ),
        });
    }
    Ok(())
}

pub fn outdoor_detections(frame: &Frame, det: &dyn DetectorBackend) -> Result<Vec<Detection>> {
    blame(det.detect(frame), &det.name(), frame)
}

pub fn count_outdoor(frame: &Frame, det: &dyn DetectorBackend) -> Result<CountResult> {
    Ok(count_from_detections(&outdoor_detections(frame, det)?))
}

/// Centers of the `prompt_top_n` most confident detections; ties go to the
/// smaller `(cx, cy)`.
pub fn prompt_points_from_detections(dets: &[Detection], cfg: &PipelineConfig) -> Result<Vec<[f64; 2]>> {
    if dets.is_empty() {
        return Err(Error::Empty("nothing to prompt"));
    }
    let mut ranked = dets.to_vec();
    sort_by_confidence(&mut ranked);
    Ok(ranked
        .iter()
        .take(cfg.prompt_top_n)
        .map(|d| [d.bbox.cx(), d.bbox.cy()])
        .collect())
}

/// Every pixel outside `mask` replaced by `fill`.
pub fn remove_background(image: &RgbImage, mask: &Mask, fill: [u8; 3]) -> RgbImage {
    RgbImage::from_fn(image.width(), image.height(), |x, y| {
        if mask.get(x, y) {
            *image.get_pixel(x, y)
        } else {
            Rgb(fill)
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamOutput {
    /// Detections used only to place prompts.
    pub prompts: Vec<Detection>,
    /// Detections on the background-removed image; these are counted.
    pub detections: Vec<Detection>,
}

pub fn sam_detections(
    frame: &Frame,
    det: &dyn DetectorBackend,
    seg: &dyn SegmenterBackend,
    cfg: &PipelineConfig,
) -> Result<SamOutput> {
    let first = outdoor_detections(frame, det)?;
    if first.is_empty() {
        return Ok(SamOutput {
            prompts: first,
            detections: Vec::new(),
        });
    }
    let points = prompt_points_from_detections(&first, cfg)?;
    let seg_name = seg.name();
    let mask = blame(seg.segment_from_points(frame, &points), &seg_name, frame)?;
    check_mask(&mask, &seg_name, frame)?;
    let masked = Frame {
        image_id: frame.image_id.clone(),
        image: remove_background(&frame.image, &mask, cfg.background_fill),
    };
    let detections = outdoor_detections(&masked, det)?;
    Ok(SamOutput {
        prompts: first,
        detections,
    })
}

pub fn count_outdoor_sam(
    frame: &Frame,
    det: &dyn DetectorBackend,
    seg: &dyn SegmenterBackend,
    cfg: &PipelineConfig,
) -> Result<CountResult> {
    Ok(count_from_detections(&sam_detections(frame, det, seg, cfg)?.detections))
}

/// Classifier input for one instance: the mask's bounding box grown by
/// [`CROP_MARGIN`] and clipped to the image, with pixels outside the mask zeroed.
pub fn classifier_crop(image: &RgbImage, mask: &Mask) -> Option<(RgbImage, Mask, (u32, u32))> {
    let (x0, y0, x1, y1) = mask.bounds()?;
    let x0 = x0.saturating_sub(CROP_MARGIN);
    let y0 = y0.saturating_sub(CROP_MARGIN);
    let x1 = (x1 + CROP_MARGIN).min(image.width() - 1);
    let y1 = (y1 + CROP_MARGIN).min(image.height() - 1);
    let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
    let sub = mask.crop(x0, y0, w, h);
    let crop = RgbImage::from_fn(w, h, |x, y| {
        if sub.get(x, y) {
            *image.get_pixel(x0 + x, y0 + y)
        } else {
            Rgb([0, 0, 0])
        }
    });
    Some((crop, sub, (x0, y0)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndoorInstance {
    pub mask: Mask,
    pub confidence: f64,
    pub spp: SppClass,
}

pub fn indoor_instances(
    frame: &Frame,
    seg: &dyn SegmenterBackend,
    cls: &dyn ClassifierBackend,
) -> Result<Vec<IndoorInstance>> {
    let seg_name = seg.name();
    let cls_name = cls.name();
    let instances = blame(seg.segment_instances(frame), &seg_name, frame)?;
    let mut out = Vec::with_capacity(instances.len());
    for (i, (mask, confidence)) in instances.into_iter().enumerate() {
        check_mask(&mask, &seg_name, frame)?;
        let Some((crop, sub, origin)) = classifier_crop(&frame.image, &mask) else {
            return Err(Error::Backend {
                backend: seg_name,
                image_id: frame.image_id.clone(),
                message: format!("instance {i} has an empty mask"),
            });
        };
        let spp = blame(cls.classify(frame, &crop, &sub, origin), &cls_name, frame)?;
        out.push(IndoorInstance {
            mask,
            confidence,
            spp,
        });
    }
    Ok(out)
}

/// Pods are segmented instances; seeds are the sum of their classes.
pub fn count_indoor(frame: &Frame, seg: &dyn SegmenterBackend, cls: &dyn ClassifierBackend) -> Result<CountResult> {
    let instances = indoor_instances(frame, seg, cls)?;
    Ok(CountResult::from_classes(instances.iter().map(|i| i.spp)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedInstance {
    pub mask: Rle,
    pub spp: SppClass,
    pub confidence: f64,
}

/// Pipeline result for one image, as written to `predictions.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutput {
    pub image_id: String,
    pub counts: CountResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<Vec<Detection>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instances: Option<Vec<PredictedInstance>>,
}

/// Contents of `predictions.json`: one pipeline run over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub task: Task,
    /// Backend names joined with `+`, e.g. `oracle+fullmask-segmenter`.
    pub method: String,
    pub outputs: Vec<ImageOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Backends used by [`run_pipeline`]; which ones are needed depends on the task.
#[derive(Default)]
pub struct Backends {
    pub detector: Option<Box<dyn DetectorBackend>>,
    pub segmenter: Option<Box<dyn SegmenterBackend>>,
    pub classifier: Option<Box<dyn ClassifierBackend>>,
}

impl Backends {
    fn detector(&self) -> Result<&dyn DetectorBackend> {
        self.detector
            .as_deref()
            .ok_or_else(|| Error::invalid("this task needs a detector backend"))
    }

    fn segmenter(&self) -> Result<&dyn SegmenterBackend> {
        self.segmenter
            .as_deref()
            .ok_or_else(|| Error::invalid("this task needs a segmenter backend"))
    }

    fn classifier(&self) -> Result<&dyn ClassifierBackend> {
        self.classifier
            .as_deref()
            .ok_or_else(|| Error::invalid("this task needs a classifier backend"))
    }
}

pub fn run_frame(task: Task, frame: &Frame, backends: &Backends, cfg: &PipelineConfig) -> Result<ImageOutput> {
    let image_id = frame.image_id.clone();
    Ok(match task {
        Task::Outdoor => {
            let dets = outdoor_detections(frame, backends.detector()?)?;
            ImageOutput {
                image_id,
                counts: count_from_detections(&dets),
                detections: Some(dets),
                instances: None,
            }
        }
        Task::OutdoorSam => {
            let out = sam_detections(frame, backends.detector()?, backends.segmenter()?, cfg)?;
            ImageOutput {
                image_id,
                counts: count_from_detections(&out.detections),
                detections: Some(out.detections),
                instances: None,
            }
        }
        Task::Indoor => {
            let inst = indoor_instances(frame, backends.segmenter()?, backends.classifier()?)?;
            ImageOutput {
                image_id,
                counts: CountResult::from_classes(inst.iter().map(|i| i.spp)),
                detections: None,
                instances: Some(
                    inst.into_iter()
                        .map(|i| PredictedInstance {
                            mask: i.mask.to_rle(),
                            spp: i.spp,
                            confidence: i.confidence,
                        })
                        .collect(),
                ),
            }
        }
    })
}

/// Runs `task` over every record in parallel; outputs keep record order.
pub fn run_pipeline(
    task: Task,
    records: &[ImageRecord],
    backends: &Backends,
    cfg: &PipelineConfig,
) -> Result<Vec<ImageOutput>> {
    match task {
        Task::Outdoor => {
            backends.detector()?;
        }
        Task::OutdoorSam => {
            backends.detector()?;
            backends.segmenter()?;
        }
        Task::Indoor => {
            backends.segmenter()?;
            backends.classifier()?;
        }
    }
    records
        .par_iter()
        .map(|r| {
            let frame = Frame {
                image_id: r.image_id.clone(),
                image: load_rgb(&r.path)?,
            };
            run_frame(task, &frame, backends, cfg)
        })
        .collect()
}
