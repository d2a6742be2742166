//! Geometric and counting primitives shared by every other module.
//!
//! Boxes are normalized center-size rectangles, instance outlines are pixel
//! polygons, and every pod carries a seeds-per-pod class in `1..=4`.

mod mask;
mod raster;

use std::fmt;
use std::ops::Add;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use mask::{mask_iou, Mask, Rle};
pub use raster::{polygon_area, rasterize, rasterize_window, trace_contour};

/// Polygon vertex in pixel coordinates, `[x, y]`.
pub type Vertex = [f64; 2];

/// Seeds-per-pod class of a single pod.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct SppClass(u8);

impl SppClass {
    pub const MAX: u8 = 4;
    pub const ALL: [SppClass; 4] = [SppClass(1), SppClass(2), SppClass(3), SppClass(4)];

    pub fn new(value: u8) -> Result<Self> {
        if (1..=Self::MAX).contains(&value) {
            Ok(SppClass(value))
        } else {
            Err(Error::invalid(format!(
                "spp must be in 1..={}, got {value}",
                Self::MAX
            )))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Zero-based index, handy for confusion matrices and class logits.
    pub fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    pub fn from_index(index: usize) -> Result<Self> {
        u8::try_from(index + 1)
            .map_err(|_| Error::invalid(format!("class index {index} out of range")))
            .and_then(SppClass::new)
    }
}

impl TryFrom<u8> for SppClass {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        SppClass::new(value)
    }
}

impl From<SppClass> for u8 {
    fn from(c: SppClass) -> u8 {
        c.0
    }
}

impl fmt::Display for SppClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}spp", self.0)
    }
}

/// Axis-aligned box in normalized image coordinates, center-size convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    /// Builds a box, clipping its extent to the unit image.
    ///
    /// The center must lie in `[0, 1]` and the size in `(0, 1]`; after
    /// clipping the center and size are recomputed from the clipped extent.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        if ![cx, cy, w, h].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box coordinates must be finite"));
        }
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(Error::invalid(format!(
                "box center ({cx}, {cy}) outside the unit image"
            )));
        }
        if !(w > 0.0 && w <= 1.0 && h > 0.0 && h <= 1.0) {
            return Err(Error::invalid(format!(
                "box size ({w}, {h}) must be in (0, 1]"
            )));
        }
        let x0 = (cx - w / 2.0).max(0.0);
        let x1 = (cx + w / 2.0).min(1.0);
        let y0 = (cy - h / 2.0).max(0.0);
        let y1 = (cy + h / 2.0).min(1.0);
        if x0 == cx - w / 2.0 && x1 == cx + w / 2.0 && y0 == cy - h / 2.0 && y1 == cy + h / 2.0 {
            return Ok(BBox { cx, cy, w, h });
        }
        Self::from_corners(x0, y0, x1, y1)
    }

    /// Builds a box from its corner coordinates (normalized).
    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let (x0, x1) = (x0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0));
        let (y0, y1) = (y0.clamp(0.0, 1.0), y1.clamp(0.0, 1.0));
        if !(x1 > x0 && y1 > y0) {
            return Err(Error::invalid(format!(
                "degenerate box corners ({x0}, {y0})-({x1}, {y1})"
            )));
        }
        Ok(BBox {
            cx: (x0 + x1) / 2.0,
            cy: (y0 + y1) / 2.0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }

    /// Box from a pixel rectangle `[x0, x1) x [y0, y1)` in an image of the given size.
    pub fn from_pixel_rect(
        x0: f64,
        y0: f64,
        x1: f64,
        y1: f64,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let (w, h) = (f64::from(width), f64::from(height));
        Self::from_corners(x0 / w, y0 / h, x1 / w, y1 / h)
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }
    pub fn cy(&self) -> f64 {
        self.cy
    }
    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn h(&self) -> f64 {
        self.h
    }
    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }
    pub fn area(&self) -> f64 {
        self.w * self.h
    }
    pub fn center(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }

    /// Pixel-space corners `(x0, y0, x1, y1)` for an image of the given size.
    pub fn to_pixels(&self, width: u32, height: u32) -> (f64, f64, f64, f64) {
        let (w, h) = (f64::from(width), f64::from(height));
        (self.x0() * w, self.y0() * h, self.x1() * w, self.y1() * h)
    }

    /// Rectangle outline in pixel coordinates, clockwise from the top-left.
    pub fn to_polygon(&self, width: u32, height: u32) -> Vec<Vertex> {
        let (x0, y0, x1, y1) = self.to_pixels(width, height);
        vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            cx: f64,
            cy: f64,
            w: f64,
            h: f64,
        }
        let r = Raw::deserialize(d)?;
        BBox::new(r.cx, r.cy, r.w, r.h).map_err(serde::de::Error::custom)
    }
}

/// Intersection over union of two boxes; 0 when disjoint or degenerate.
pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    // areas from corners so identical boxes score exactly 1
    let area = |r: &BBox| (r.x1() - r.x0()) * (r.y1() - r.y0());
    let union = area(a) + area(b) - inter;
    if inter <= 0.0 || union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// A detected (or annotated) pod: box, seed class and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub bbox: BBox,
    pub spp: SppClass,
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BBox, spp: SppClass, confidence: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::invalid(format!(
                "confidence {confidence} outside [0, 1]"
            )));
        }
        Ok(Detection {
            bbox,
            spp,
            confidence,
        })
    }

    /// Ground-truth detection (confidence 1).
    pub fn labeled(bbox: BBox, spp: SppClass) -> Self {
        Detection {
            bbox,
            spp,
            confidence: 1.0,
        }
    }
}

impl<'de> Deserialize<'de> for Detection {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            bbox: BBox,
            spp: SppClass,
            confidence: f64,
        }
        let r = Raw::deserialize(d)?;
        Detection::new(r.bbox, r.spp, r.confidence).map_err(serde::de::Error::custom)
    }
}

/// Sorts detections by descending confidence, ties broken by `(cx, cy)`.
pub fn sort_by_confidence(dets: &mut [Detection]) {
    dets.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.bbox.cx().total_cmp(&b.bbox.cx()))
            .then(a.bbox.cy().total_cmp(&b.bbox.cy()))
    });
}

/// Instance outline in pixel coordinates plus its seed class.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceAnnotation {
    pub polygon: Vec<Vertex>,
    pub spp: SppClass,
}

impl InstanceAnnotation {
    /// Validates the polygon against an image of `width x height` pixels.
    pub fn new(polygon: Vec<Vertex>, spp: SppClass, width: u32, height: u32) -> Result<Self> {
        raster::validate_polygon(&polygon, width, height)?;
        Ok(InstanceAnnotation { polygon, spp })
    }

    pub fn rasterize(&self, width: u32, height: u32) -> Result<Mask> {
        rasterize(&self.polygon, width, height)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        InstanceAnnotation {
            polygon: self.polygon.iter().map(|[x, y]| [x + dx, y + dy]).collect(),
            spp: self.spp,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Labeled training distribution. Every record belongs to it.
    #[default]
    Source,
    /// Adaptation target; a target record is also a source record.
    Target,
}

impl Domain {
    pub fn in_target(self) -> bool {
        self == Domain::Target
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Annotations {
    Boxes(Vec<Detection>),
    Instances(Vec<InstanceAnnotation>),
}

impl Annotations {
    pub fn len(&self) -> usize {
        match self {
            Annotations::Boxes(b) => b.len(),
            Annotations::Instances(i) => i.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn classes(&self) -> Vec<SppClass> {
        match self {
            Annotations::Boxes(b) => b.iter().map(|d| d.spp).collect(),
            Annotations::Instances(i) => i.iter().map(|a| a.spp).collect(),
        }
    }

    /// Ground-truth counts implied by the annotations.
    pub fn count(&self) -> CountResult {
        CountResult::from_classes(self.classes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
    pub domain: Domain,
    pub annotations: Annotations,
}

impl ImageRecord {
    /// Ground-truth boxes; outlines contribute the bounds of their rasterized mask.
    pub fn truth_boxes(&self) -> Result<Vec<Detection>> {
        match &self.annotations {
            Annotations::Boxes(b) => Ok(b.iter().map(|d| Detection::labeled(d.bbox, d.spp)).collect()),
            Annotations::Instances(list) => list
                .iter()
                .map(|a| {
                    let m = a.rasterize(self.width, self.height)?;
                    let bbox = mask_bbox(&m).ok_or_else(|| Error::invalid("annotation covers no pixels"))??;
                    Ok(Detection::labeled(bbox, a.spp))
                })
                .collect(),
        }
    }

    /// Ground-truth outlines in pixel coordinates; boxes become rectangles.
    pub fn truth_polygons(&self) -> Vec<(Vec<Vertex>, SppClass)> {
        let (w, h) = (self.width, self.height);
        match &self.annotations {
            Annotations::Boxes(b) => b.iter().map(|d| (d.bbox.to_polygon(w, h), d.spp)).collect(),
            Annotations::Instances(list) => list.iter().map(|a| (a.polygon.clone(), a.spp)).collect(),
        }
    }

    /// Ground-truth masks; boxes become filled rectangles.
    pub fn truth_masks(&self) -> Result<Vec<(Mask, SppClass)>> {
        self.truth_polygons()
            .into_iter()
            .map(|(p, spp)| Ok((rasterize(&p, self.width, self.height)?, spp)))
            .collect()
    }
}

/// Normalized box around the set pixels of `mask`; `None` for an empty mask.
pub fn mask_bbox(mask: &Mask) -> Option<Result<BBox>> {
    let (x0, y0, x1, y1) = mask.bounds()?;
    Some(BBox::from_pixel_rect(
        f64::from(x0),
        f64::from(y0),
        f64::from(x1 + 1),
        f64::from(y1 + 1),
        mask.width(),
        mask.height(),
    ))
}

/// Pod and seed totals for one image or an aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CountResult {
    pub pod_count: u64,
    pub seed_count: u64,
}

impl CountResult {
    pub fn from_classes(classes: impl IntoIterator<Item = SppClass>) -> Self {
        classes
            .into_iter()
            .fold(CountResult::default(), |acc, c| CountResult {
                pod_count: acc.pod_count + 1,
                seed_count: acc.seed_count + u64::from(c.value()),
            })
    }
}

impl Add for CountResult {
    type Output = CountResult;

    fn add(self, rhs: CountResult) -> CountResult {
        CountResult {
            pod_count: self.pod_count + rhs.pod_count,
            seed_count: self.seed_count + rhs.seed_count,
        }
    }
}

impl std::iter::Sum for CountResult {
    fn sum<I: Iterator<Item = CountResult>>(iter: I) -> Self {
        iter.fold(CountResult::default(), Add::add)
    }
}

/// Every detection is one pod; its class is the number of seeds inside.
pub fn count_from_detections(dets: &[Detection]) -> CountResult {
    CountResult::from_classes(dets.iter().map(|d| d.spp))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    fn spp(v: u8) -> SppClass {
        SppClass::new(v).unwrap()
    }

    #[test]
    fn spp_range_is_enforced() {
        assert!(SppClass::new(0).is_err());
        assert!(SppClass::new(5).is_err());
        for v in 1..=4 {
            assert_eq!(SppClass::new(v).unwrap().value(), v);
        }
        let parsed: std::result::Result<SppClass, _> = serde_json::from_str("5");
        assert!(parsed.is_err());
    }

    #[test]
    fn box_is_clipped_on_construction() {
        let b = bx(0.9, 0.5, 0.4, 0.2);
        assert!((b.x1() - 1.0).abs() < 1e-12);
        assert!((b.x0() - 0.7).abs() < 1e-12);
        assert!((b.cx() - 0.85).abs() < 1e-12);
        assert!(BBox::new(1.2, 0.5, 0.1, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 1.5, 0.1).is_err());
    }

    #[test]
    fn box_iou_examples() {
        let a = bx(0.25, 0.5, 0.5, 1.0);
        let b = bx(0.5, 0.5, 0.5, 1.0);
        assert_eq!(box_iou(&a, &a), 1.0);
        assert!((box_iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
        let far = bx(0.9, 0.9, 0.1, 0.1);
        let near = bx(0.1, 0.1, 0.1, 0.1);
        assert_eq!(box_iou(&far, &near), 0.0);
    }

    #[test]
    fn counting_examples() {
        assert_eq!(count_from_detections(&[]), CountResult::default());
        let b = bx(0.5, 0.5, 0.1, 0.1);
        let dets: Vec<_> = [2, 3, 1]
            .iter()
            .map(|&v| Detection::labeled(b, spp(v)))
            .collect();
        assert_eq!(
            count_from_detections(&dets),
            CountResult {
                pod_count: 3,
                seed_count: 6
            }
        );
    }

    #[test]
    fn detection_rejects_bad_confidence() {
        let b = bx(0.5, 0.5, 0.1, 0.1);
        assert!(Detection::new(b, spp(1), 1.5).is_err());
        assert!(Detection::new(b, spp(1), -0.1).is_err());
    }

    #[test]
    fn annotation_validation() {
        let tri = vec![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        assert!(InstanceAnnotation::new(tri.clone(), spp(2), 4, 4).is_ok());
        assert!(InstanceAnnotation::new(tri, spp(2), 3, 3).is_err());
        let bowtie = vec![[0.0, 0.0], [4.0, 4.0], [4.0, 0.0], [0.0, 4.0]];
        assert!(InstanceAnnotation::new(bowtie, spp(1), 8, 8).is_err());
        let line = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]];
        assert!(InstanceAnnotation::new(line, spp(1), 8, 8).is_err());
        assert!(InstanceAnnotation::new(vec![[0.0, 0.0], [1.0, 1.0]], spp(1), 8, 8).is_err());
    }
}
