//! Bundled backends and the name-based registry that builds them.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{ClassifierBackend, DetectorBackend, Frame, SegmenterBackend};
use crate::adversarial::ToyDetector;
use crate::checkpoint::load_checkpoint;
use crate::detection::{rasterize_window, BBox, Detection, ImageRecord, Mask, SppClass, Vertex};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Detector,
    Segmenter,
    Classifier,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Detector => "detector",
            BackendKind::Segmenter => "segmenter",
            BackendKind::Classifier => "classifier",
        })
    }
}

/// Registered backend names, their role, and the parameter that the
/// `name(arg)` shorthand fills in.
pub const REGISTRY: &[(&str, BackendKind, Option<&str>)] = &[
    ("oracle", BackendKind::Detector, None),
    ("dropout-oracle", BackendKind::Detector, Some("p")),
    ("toy-detector", BackendKind::Detector, Some("checkpoint")),
    ("fullmask-segmenter", BackendKind::Segmenter, None),
    ("oracle-segmenter", BackendKind::Segmenter, None),
    ("oracle-classifier", BackendKind::Classifier, None),
    ("constant-classifier", BackendKind::Classifier, Some("k")),
];

/// A backend named in configuration: `{"name": ..., "params": {...}}`, or
/// the string shorthand `name` / `name(arg)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRef")]
pub struct BackendRef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub params: Map<String, Value>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawRef {
    Short(String),
    Full {
        name: String,
        #[serde(default)]
        params: Map<String, Value>,
    },
}

impl TryFrom<RawRef> for BackendRef {
    type Error = Error;

    fn try_from(raw: RawRef) -> Result<Self> {
        let r = match raw {
            RawRef::Short(s) => return s.parse(),
            RawRef::Full { name, params } => BackendRef { name, params },
        };
        r.kind()?;
        Ok(r)
    }
}

fn registry_entry(name: &str) -> Result<(BackendKind, Option<&'static str>)> {
    REGISTRY
        .iter()
        .find(|(n, _, _)| *n == name)
        .map(|&(_, kind, arg)| (kind, arg))
        .ok_or_else(|| {
            let known: Vec<&str> = REGISTRY.iter().map(|(n, _, _)| *n).collect();
            Error::invalid(format!(
                "unknown backend `{name}` (known: {})",
                known.join(", ")
            ))
        })
}

impl FromStr for BackendRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.split_once('(') {
            Some((name, rest)) => {
                let arg = rest
                    .strip_suffix(')')
                    .ok_or_else(|| Error::invalid(format!("backend `{s}` is missing `)`")))?;
                (name.trim(), Some(arg.trim()))
            }
            None => (s, None),
        };
        let (_, param) = registry_entry(name)?;
        let mut params = Map::new();
        match (param, arg) {
            (Some(key), Some(arg)) => {
                // numbers stay numbers, anything else is a string
                let value = serde_json::from_str::<Value>(arg)
                    .ok()
                    .filter(Value::is_number)
                    .unwrap_or_else(|| Value::String(arg.to_string()));
                params.insert(key.to_string(), value);
            }
            (None, Some(_)) => {
                return Err(Error::invalid(format!("backend `{name}` takes no argument")));
            }
            (_, None) => {}
        }
        Ok(BackendRef {
            name: name.to_string(),
            params,
        })
    }
}

impl fmt::Display for BackendRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let short = registry_entry(&self.name).ok().and_then(|(_, p)| p);
        match short.and_then(|k| self.params.get(k)) {
            Some(v) if self.params.len() == 1 => match v {
                Value::String(s) => write!(f, "{}({s})", self.name),
                other => write!(f, "{}({other})", self.name),
            },
            _ if self.params.is_empty() => f.write_str(&self.name),
            _ => write!(f, "{}{}", self.name, Value::Object(self.params.clone())),
        }
    }
}

impl BackendRef {
    pub fn kind(&self) -> Result<BackendKind> {
        Ok(registry_entry(&self.name)?.0)
    }

    fn expect_kind(&self, kind: BackendKind) -> Result<()> {
        let actual = self.kind()?;
        if actual != kind {
            return Err(Error::invalid(format!(
                "backend `{}` is a {actual}, not a {kind}",
                self.name
            )));
        }
        Ok(())
    }

    fn param<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        self.params
            .get(key)
            .map(|v| {
                serde_json::from_value(v.clone()).map_err(|e| {
                    Error::invalid(format!("backend `{}` parameter `{key}`: {e}", self.name))
                })
            })
            .transpose()
    }

    fn required<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        self.param(key)?.ok_or_else(|| {
            Error::invalid(format!("backend `{}` needs parameter `{key}`", self.name))
        })
    }

    fn check_params(&self, allowed: &[&str]) -> Result<()> {
        match self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(Error::invalid(format!(
                "backend `{}` has no parameter `{k}`",
                self.name
            ))),
            None => Ok(()),
        }
    }
}

/// What backends may read besides pixels: ground truth for the oracles and
/// the run seed for stochastic stubs.
#[derive(Debug, Clone, Default)]
pub struct BackendContext {
    pub truth: Arc<HashMap<String, ImageRecord>>,
    pub seed: u64,
}

impl BackendContext {
    pub fn new(records: &[ImageRecord], seed: u64) -> Self {
        BackendContext {
            truth: Arc::new(
                records
                    .iter()
                    .map(|r| (r.image_id.clone(), r.clone()))
                    .collect(),
            ),
            seed,
        }
    }
}

fn truth_for<'a>(truth: &'a HashMap<String, ImageRecord>, frame: &Frame) -> Result<&'a ImageRecord> {
    truth
        .get(&frame.image_id)
        .ok_or_else(|| Error::invalid(format!("no ground truth for image `{}`", frame.image_id)))
}

fn box_visible(image: &RgbImage, bbox: &BBox, fill: [u8; 3]) -> bool {
    let (x0, y0, x1, y1) = bbox.to_pixels(image.width(), image.height());
    let (x0, y0) = (x0.floor() as u32, y0.floor() as u32);
    let x1 = (x1.ceil() as u32).min(image.width());
    let y1 = (y1.ceil() as u32).min(image.height());
    (y0..y1).any(|y| (x0..x1).any(|x| image.get_pixel(x, y).0 != fill))
}

/// Returns the ground-truth boxes of the frame's image. With `visible_only`
/// a box is kept only if some pixel inside it differs from `fill`.
#[derive(Debug, Clone)]
pub struct OracleDetector {
    pub truth: Arc<HashMap<String, ImageRecord>>,
    pub visible_only: bool,
    pub fill: [u8; 3],
}

impl DetectorBackend for OracleDetector {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>> {
        let mut dets = truth_for(&self.truth, frame)?.truth_boxes()?;
        if self.visible_only {
            dets.retain(|d| box_visible(&frame.image, &d.bbox, self.fill));
        }
        Ok(dets)
    }
}

/// Ground truth with each box dropped independently with probability `p`.
/// The draw depends only on the run seed and the image id.
#[derive(Debug, Clone)]
pub struct DropoutOracleDetector {
    pub truth: Arc<HashMap<String, ImageRecord>>,
    pub p: f64,
    pub seed: u64,
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

impl DropoutOracleDetector {
    pub fn new(truth: Arc<HashMap<String, ImageRecord>>, p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("dropout probability {p} must lie in [0, 1]")));
        }
        Ok(DropoutOracleDetector { truth, p, seed })
    }
}

impl DetectorBackend for DropoutOracleDetector {
    fn name(&self) -> String {
        format!("dropout-oracle({})", self.p)
    }

    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(&frame.image_id));
        let mut dets = truth_for(&self.truth, frame)?.truth_boxes()?;
        dets.retain(|_| rng.random::<f64>() >= self.p);
        Ok(dets)
    }
}

#[derive(Debug, Clone)]
pub struct ToyDetectorBackend {
    pub detector: ToyDetector,
    pub checkpoint: PathBuf,
}

impl DetectorBackend for ToyDetectorBackend {
    fn name(&self) -> String {
        format!("toy-detector({})", self.checkpoint.display())
    }

    fn detect(&self, frame: &Frame) -> Result<Vec<Detection>> {
        Ok(self.detector.detect_rgb(&frame.image))
    }
}

/// Treats the whole image as foreground, and as a single instance.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullMaskSegmenter;

impl SegmenterBackend for FullMaskSegmenter {
    fn name(&self) -> String {
        "fullmask-segmenter".into()
    }

    fn segment_from_points(&self, frame: &Frame, _: &[[f64; 2]]) -> Result<Mask> {
        Ok(Mask::full(frame.image.width(), frame.image.height()))
    }

    fn segment_instances(&self, frame: &Frame) -> Result<Vec<(Mask, f64)>> {
        Ok(vec![(Mask::full(frame.image.width(), frame.image.height()), 1.0)])
    }
}

/// Ground-truth masks. Point prompts select the union of the annotated
/// objects that contain a prompt.
#[derive(Debug, Clone)]
pub struct OracleSegmenter {
    pub truth: Arc<HashMap<String, ImageRecord>>,
}

impl SegmenterBackend for OracleSegmenter {
    fn name(&self) -> String {
        "oracle-segmenter".into()
    }

    fn segment_from_points(&self, frame: &Frame, points: &[[f64; 2]]) -> Result<Mask> {
        let record = truth_for(&self.truth, frame)?;
        let (w, h) = (record.width, record.height);
        let pixels: Vec<(u32, u32)> = points
            .iter()
            .map(|[x, y]| {
                (
                    ((x * f64::from(w)) as u32).min(w - 1),
                    ((y * f64::from(h)) as u32).min(h - 1),
                )
            })
            .collect();
        let mut fg = Mask::new(w, h);
        for (m, _) in record.truth_masks()? {
            if pixels.iter().any(|&(x, y)| m.get(x, y)) {
                fg = fg.union(&m)?;
            }
        }
        Ok(fg)
    }

    fn segment_instances(&self, frame: &Frame) -> Result<Vec<(Mask, f64)>> {
        Ok(truth_for(&self.truth, frame)?.truth_masks()?
            .into_iter()
            .map(|(m, _)| (m, 1.0))
            .collect())
    }
}

/// Class of the ground-truth object that best overlaps the instance.
#[derive(Debug, Clone)]
pub struct OracleClassifier {
    pub truth: Arc<HashMap<String, ImageRecord>>,
}

impl ClassifierBackend for OracleClassifier {
    fn name(&self) -> String {
        "oracle-classifier".into()
    }

    fn classify(&self, frame: &Frame, _: &RgbImage, mask: &Mask, origin: (u32, u32)) -> Result<SppClass> {
        let record = truth_for(&self.truth, frame)?;
        let (ox, oy) = (i64::from(origin.0), i64::from(origin.1));
        let (mw, mh) = (i64::from(mask.width()), i64::from(mask.height()));
        let area = mask.area() as f64;
        let mut best: Option<(f64, SppClass)> = None;
        for (poly, spp) in record.truth_polygons() {
            let Some((x0, y0, x1, y1)) = pixel_bounds(&poly, record.width, record.height) else {
                continue;
            };
            if x1 <= ox || y1 <= oy || x0 >= ox + mw || y0 >= oy + mh {
                continue;
            }
            let own = rasterize_window(&poly, x0, y0, (x1 - x0) as u32, (y1 - y0) as u32)?.area() as f64;
            let local = rasterize_window(&poly, ox, oy, mask.width(), mask.height())?;
            let inter = local.iter_set().filter(|&(x, y)| mask.get(x, y)).count() as f64;
            let iou = inter / (area + own - inter);
            if iou > 0.0 && best.is_none_or(|(b, _)| iou > b) {
                best = Some((iou, spp));
            }
        }
        best.map(|(_, spp)| spp)
            .ok_or_else(|| Error::invalid("instance overlaps no ground-truth object"))
    }
}

/// Pixel window `[x0, x1) x [y0, y1)` covering `poly`, clipped to the image.
fn pixel_bounds(poly: &[Vertex], width: u32, height: u32) -> Option<(i64, i64, i64, i64)> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for v in poly {
        for k in 0..2 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    let x0 = (lo[0].floor() as i64).max(0);
    let y0 = (lo[1].floor() as i64).max(0);
    let x1 = (hi[0].ceil() as i64).min(i64::from(width));
    let y1 = (hi[1].ceil() as i64).min(i64::from(height));
    (x0 < x1 && y0 < y1).then_some((x0, y0, x1, y1))
}

#[derive(Debug, Clone, Copy)]
pub struct ConstantClassifier(pub SppClass);

impl ClassifierBackend for ConstantClassifier {
    fn name(&self) -> String {
        format!("constant-classifier({})", self.0.value())
    }

    fn classify(&self, _: &Frame, _: &RgbImage, _: &Mask, _: (u32, u32)) -> Result<SppClass> {
        Ok(self.0)
    }
}

pub fn build_detector(r: &BackendRef, ctx: &BackendContext) -> Result<Box<dyn DetectorBackend>> {
    r.expect_kind(BackendKind::Detector)?;
    Ok(match r.name.as_str() {
        "oracle" => {
            r.check_params(&["visible_only", "fill"])?;
            Box::new(OracleDetector {
                truth: ctx.truth.clone(),
                visible_only: r.param("visible_only")?.unwrap_or(false),
                fill: r.param("fill")?.unwrap_or([0, 0, 0]),
            })
        }
        "dropout-oracle" => {
            r.check_params(&["p"])?;
            Box::new(DropoutOracleDetector::new(ctx.truth.clone(), r.required("p")?, ctx.seed)?)
        }
        "toy-detector" => {
            r.check_params(&["checkpoint"])?;
            let checkpoint: PathBuf = r.required("checkpoint")?;
            let detector = load_checkpoint(&checkpoint)?.detector;
            Box::new(ToyDetectorBackend {
                detector,
                checkpoint,
            })
        }
        other => unreachable!("`{other}` is registered as a detector"),
    })
}

pub fn build_segmenter(r: &BackendRef, ctx: &BackendContext) -> Result<Box<dyn SegmenterBackend>> {
    r.expect_kind(BackendKind::Segmenter)?;
    r.check_params(&[])?;
    Ok(match r.name.as_str() {
        "fullmask-segmenter" => Box::new(FullMaskSegmenter),
        "oracle-segmenter" => Box::new(OracleSegmenter {
            truth: ctx.truth.clone(),
        }),
        other => unreachable!("`{other}` is registered as a segmenter"),
    })
}

pub fn build_classifier(r: &BackendRef, ctx: &BackendContext) -> Result<Box<dyn ClassifierBackend>> {
    r.expect_kind(BackendKind::Classifier)?;
    Ok(match r.name.as_str() {
        "oracle-classifier" => {
            r.check_params(&[])?;
            Box::new(OracleClassifier {
                truth: ctx.truth.clone(),
            })
        }
        "constant-classifier" => {
            r.check_params(&["k"])?;
            Box::new(ConstantClassifier(SppClass::new(r.required("k")?)?))
        }
        other => unreachable!("`{other}` is registered as a classifier"),
    })
}
