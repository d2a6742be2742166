use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::detection::{box_iou, BBox, Mask, SppClass};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    Box(BBox),
    Mask(Mask),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedObject {
    pub geometry: Geometry,
    pub spp: SppClass,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TruthObject {
    pub geometry: Geometry,
    pub spp: SppClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub matches: Vec<Match>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

/// Geometry prepared for repeated IoU queries: masks are cropped to their
/// set pixels so disjoint pairs are rejected from their bounds alone.
enum Shape {
    Box(BBox),
    Mask {
        dims: (u32, u32),
        /// Inclusive pixel bounds; `None` for an empty mask.
        bounds: Option<(u32, u32, u32, u32)>,
        crop: Mask,
        area: u64,
    },
}

impl Shape {
    fn new(g: &Geometry) -> Shape {
        match g {
            Geometry::Box(b) => Shape::Box(*b),
            Geometry::Mask(m) => {
                let bounds = m.bounds();
                let crop = match bounds {
                    Some((x0, y0, x1, y1)) => m.crop(x0, y0, x1 - x0 + 1, y1 - y0 + 1),
                    None => Mask::new(0, 0),
                };
                let area = crop.area();
                Shape::Mask {
                    dims: (m.width(), m.height()),
                    bounds,
                    crop,
                    area,
                }
            }
        }
    }

    /// Lexicographic key used to order equally confident predictions.
    fn key(&self) -> [f64; 4] {
        match self {
            Shape::Box(b) => [b.x0(), b.y0(), b.x1(), b.y1()],
            Shape::Mask { bounds, .. } => match bounds {
                Some((x0, y0, x1, y1)) => [*x0, *y0, *x1, *y1].map(f64::from),
                None => [f64::INFINITY; 4],
            },
        }
    }
}

fn shape_iou(a: &Shape, b: &Shape) -> Result<f64> {
    match (a, b) {
        (Shape::Box(a), Shape::Box(b)) => Ok(box_iou(a, b)),
        (
            Shape::Mask { dims: da, bounds: ba, crop: ca, area: aa },
            Shape::Mask { dims: db, bounds: bb, crop: cb, area: ab },
        ) => {
            if da != db {
                return Err(Error::invalid(format!(
                    "cannot compare a {}x{} mask with a {}x{} mask",
                    da.0, da.1, db.0, db.1
                )));
            }
            let (Some((ax0, ay0, ax1, ay1)), Some((bx0, by0, bx1, by1))) = (ba, bb) else {
                return Ok(0.0);
            };
            let (x0, y0) = (*ax0.max(bx0), *ay0.max(by0));
            let (x1, y1) = (*ax1.min(bx1), *ay1.min(by1));
            let mut inter = 0u64;
            if x0 <= x1 && y0 <= y1 {
                for y in y0..=y1 {
                    for x in x0..=x1 {
                        inter += u64::from(ca.get(x - ax0, y - ay0) && cb.get(x - bx0, y - by0));
                    }
                }
            }
            Ok(inter as f64 / (aa + ab - inter) as f64)
        }
        _ => Err(Error::invalid("cannot compare a box with a mask")),
    }
}

pub fn check_threshold(iou_threshold: f64) -> Result<()> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold {iou_threshold} must lie in (0, 1]"
        )));
    }
    Ok(())
}

/// Greedy class-agnostic matching. Predictions are visited by descending
/// confidence (ties by geometry, then input order); each takes the free
/// ground truth of highest IoU when that IoU reaches the threshold.
pub fn match_instances(
    preds: &[PredictedObject],
    gts: &[TruthObject],
    iou_threshold: f64,
) -> Result<MatchResult> {
    check_threshold(iou_threshold)?;
    let pred_shapes: Vec<Shape> = preds.iter().map(|p| Shape::new(&p.geometry)).collect();
    let gt_shapes: Vec<Shape> = gts.iter().map(|g| Shape::new(&g.geometry)).collect();
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .confidence
            .total_cmp(&preds[a].confidence)
            .then_with(|| {
                let (ka, kb) = (pred_shapes[a].key(), pred_shapes[b].key());
                ka.iter()
                    .zip(&kb)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut result = MatchResult::default();
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, shape) in gt_shapes.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let iou = shape_iou(&pred_shapes[p], shape)?;
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((gt, iou)) => {
                taken[gt] = true;
                result.matches.push(Match { pred: p, gt, iou });
            }
            None => result.unmatched_pred.push(p),
        }
    }
    result.unmatched_pred.sort_unstable();
    result.unmatched_gt = (0..gts.len()).filter(|&g| !taken[g]).collect();
    Ok(result)
}

/// Row index of missed ground truth, column index of false positives.
pub const OTHER: usize = 4;

/// Rows are predicted classes 1..4 then "missed"; columns are ground-truth
/// classes 1..4 then "false positive".
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; 5]; 5],
}

pub const ROW_LABELS: [&str; 5] = ["1spp", "2spp", "3spp", "4spp", "missed"];
pub const COL_LABELS: [&str; 5] = ["1spp", "2spp", "3spp", "4spp", "false_positive"];

impl ConfusionMatrix {
    pub fn counts(&self) -> &[[u64; 5]; 5] {
        &self.counts
    }

    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.counts[row][col]
    }

    pub fn matched(&self) -> u64 {
        self.counts[..OTHER].iter().map(|r| r[..OTHER].iter().sum::<u64>()).sum()
    }

    pub fn missed(&self) -> u64 {
        self.counts[OTHER].iter().sum()
    }

    pub fn false_positives(&self) -> u64 {
        self.counts.iter().map(|r| r[OTHER]).sum()
    }

    pub fn total_gt(&self) -> u64 {
        self.matched() + self.missed()
    }

    pub fn total_pred(&self) -> u64 {
        self.matched() + self.false_positives()
    }

    /// Matched pairs whose classes agree.
    pub fn correct(&self) -> u64 {
        (0..OTHER).map(|i| self.counts[i][i]).sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, o) in self.counts.iter_mut().zip(&other.counts) {
            for (c, v) in row.iter_mut().zip(o) {
                *c += v;
            }
        }
    }
}

impl Serialize for ConfusionMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Out<'a> {
            rows: [&'a str; 5],
            cols: [&'a str; 5],
            counts: &'a [[u64; 5]; 5],
        }
        Out {
            rows: ROW_LABELS,
            cols: COL_LABELS,
            counts: &self.counts,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConfusionMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            rows: Vec<String>,
            cols: Vec<String>,
            counts: [[u64; 5]; 5],
        }
        let r = Raw::deserialize(d)?;
        if r.rows != ROW_LABELS || r.cols != COL_LABELS {
            return Err(serde::de::Error::custom("unexpected confusion matrix labels"));
        }
        if r.counts[OTHER][OTHER] != 0 {
            return Err(serde::de::Error::custom("missed/false_positive cell must be 0"));
        }
        Ok(ConfusionMatrix { counts: r.counts })
    }
}

fn check_partition(name: &str, n: usize, indices: impl Iterator<Item = usize>) -> Result<()> {
    let mut seen = vec![false; n];
    for i in indices {
        match seen.get_mut(i) {
            None => return Err(Error::invalid(format!("{name} index {i} out of range (have {n})"))),
            Some(true) => return Err(Error::invalid(format!("{name} index {i} used twice"))),
            Some(s) => *s = true,
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(Error::invalid(format!("{name} index {i} is neither matched nor unmatched")));
    }
    Ok(())
}

pub fn confusion_matrix(
    m: &MatchResult,
    pred_classes: &[SppClass],
    gt_classes: &[SppClass],
) -> Result<ConfusionMatrix> {
    check_partition(
        "prediction",
        pred_classes.len(),
        m.matches.iter().map(|x| x.pred).chain(m.unmatched_pred.iter().copied()),
    )?;
    check_partition(
        "ground-truth",
        gt_classes.len(),
        m.matches.iter().map(|x| x.gt).chain(m.unmatched_gt.iter().copied()),
    )?;
    let mut cm = ConfusionMatrix::default();
    for x in &m.matches {
        cm.counts[pred_classes[x.pred].index()][gt_classes[x.gt].index()] += 1;
    }
    for &g in &m.unmatched_gt {
        cm.counts[OTHER][gt_classes[g].index()] += 1;
    }
    for &p in &m.unmatched_pred {
        cm.counts[pred_classes[p].index()][OTHER] += 1;
    }
    Ok(cm)
}
