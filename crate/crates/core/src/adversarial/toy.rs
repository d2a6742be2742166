//! Desk-scale trainable detector and its synthetic two-domain task.
//!
//! Images are `3 x 16 x 16`. The backbone is three 1x1-conv + tanh stages
//! with 2x2 average pooling in between (16x16, 8x8 and 4x4 maps, which are
//! the pyramid taps), and a linear head predicts objectness plus four
//! seed-class logits for each cell of the 4x4 grid. A predicted box is the
//! grid cell itself.

use image::RgbImage;
use ndarray::{s, Array2, Array3, Axis};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::{Dense, DenseGrad};
use super::roi::FeaturePyramid;
use crate::detection::{sort_by_confidence, BBox, Detection, Domain, SppClass};
use crate::error::{Error, Result};

pub const TOY_IMAGE: usize = 16;
pub const TOY_GRID: usize = 4;
pub const TOY_CELL: usize = TOY_IMAGE / TOY_GRID;
pub const TOY_CHANNELS: usize = 3;
const HEAD_OUTPUTS: usize = 1 + SppClass::MAX as usize;
const TAPS: [usize; 3] = [2, 4, 6];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub backbone: [Dense; 3],
    pub head: Dense,
    /// Minimum objectness for a cell to be reported by [`ToyDetector::detect`].
    pub threshold: f64,
}

/// Forward activations of one image.
#[derive(Debug, Clone)]
pub struct ToyTrace {
    input: Array3<f64>,
    acts: [Array3<f64>; 3],
    pooled: [Array3<f64>; 2],
    logits: Array3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyGrad {
    pub backbone: [DenseGrad; 3],
    pub head: DenseGrad,
}

impl ToyTrace {
    pub fn zero_logit_grad(&self) -> Array3<f64> {
        Array3::zeros(self.logits.raw_dim())
    }
}

fn to_matrix(a: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = a.dim();
    a.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h * w))
        .expect("contiguous reshape")
}

fn from_matrix(m: Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = m.nrows();
    m.as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, h, w))
        .expect("contiguous reshape")
}

fn avg_pool2(a: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = a.dim();
    Array3::from_shape_fn((c, h / 2, w / 2), |(k, i, j)| {
        (a[[k, 2 * i, 2 * j]]
            + a[[k, 2 * i + 1, 2 * j]]
            + a[[k, 2 * i, 2 * j + 1]]
            + a[[k, 2 * i + 1, 2 * j + 1]])
            / 4.0
    })
}

fn avg_pool2_backward(g: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = g.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(k, i, j)| g[[k, i / 2, j / 2]] / 4.0)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Grid cell `(row, col)` whose area contains the box center.
pub fn cell_of(b: &BBox) -> (usize, usize) {
    let g = TOY_GRID as f64;
    let col = ((b.cx() * g).floor() as usize).min(TOY_GRID - 1);
    let row = ((b.cy() * g).floor() as usize).min(TOY_GRID - 1);
    (row, col)
}

pub fn cell_box(row: usize, col: usize) -> BBox {
    let g = TOY_GRID as f64;
    BBox::new((col as f64 + 0.5) / g, (row as f64 + 0.5) / g, 1.0 / g, 1.0 / g)
        .expect("grid cell is a valid box")
}

impl ToyDetector {
    pub const DEFAULT_WIDTH: usize = 8;

    /// Fresh detector; identical seeds give bit-identical parameters.
    pub fn build(seed: u64) -> Self {
        Self::with_width(seed, Self::DEFAULT_WIDTH)
    }

    pub fn with_width(seed: u64, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ToyDetector {
            backbone: [
                Dense::init(TOY_CHANNELS, width, &mut rng),
                Dense::init(width, width, &mut rng),
                Dense::init(width, width, &mut rng),
            ],
            head: Dense::init(width, HEAD_OUTPUTS, &mut rng),
            threshold: 0.5,
        }
    }

    /// Verifies layer shapes chain together, e.g. after deserializing.
    pub fn check_shapes(&self) -> Result<()> {
        let mut inputs = TOY_CHANNELS;
        for (i, layer) in self.backbone.iter().chain([&self.head]).enumerate() {
            if layer.inputs() != inputs || layer.bias.len() != layer.outputs() {
                return Err(Error::invalid(format!(
                    "toy detector layer {i} has shape {:?} with {} biases, expected {inputs} inputs",
                    layer.weight.dim(),
                    layer.bias.len()
                )));
            }
            inputs = layer.outputs();
        }
        if inputs != HEAD_OUTPUTS {
            return Err(Error::invalid(format!(
                "toy detector head has {inputs} outputs, expected {HEAD_OUTPUTS}"
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "detection threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Array3<f64>) -> ToyTrace {
        let stage = |layer: &Dense, x: &Array3<f64>| {
            let (_, h, w) = x.dim();
            from_matrix(layer.forward(&to_matrix(x)).mapv(f64::tanh), h, w)
        };
        let a1 = stage(&self.backbone[0], image);
        let p1 = avg_pool2(&a1);
        let a2 = stage(&self.backbone[1], &p1);
        let p2 = avg_pool2(&a2);
        let a3 = stage(&self.backbone[2], &p2);
        let logits = from_matrix(self.head.forward(&to_matrix(&a3)), TOY_GRID, TOY_GRID);
        ToyTrace {
            input: image.clone(),
            acts: [a1, a2, a3],
            pooled: [p1, p2],
            logits,
        }
    }

    pub fn pyramid(&self, trace: &ToyTrace) -> FeaturePyramid {
        FeaturePyramid::new(trace.acts.to_vec(), TAPS).expect("toy pyramid shape is fixed")
    }

    /// Objectness BCE averaged over all cells plus class cross-entropy
    /// averaged over labeled cells. Returns the loss and `dL/dlogits`.
    pub fn detection_loss(&self, trace: &ToyTrace, labels: &[Detection]) -> (f64, Array3<f64>) {
        let mut target: [[Option<SppClass>; TOY_GRID]; TOY_GRID] = [[None; TOY_GRID]; TOY_GRID];
        for d in labels {
            let (r, c) = cell_of(&d.bbox);
            target[r][c] = Some(d.spp);
        }
        let cells = (TOY_GRID * TOY_GRID) as f64;
        let positives = target.iter().flatten().filter(|t| t.is_some()).count().max(1) as f64;
        let mut loss = 0.0;
        let mut grad = Array3::zeros(trace.logits.raw_dim());
        for r in 0..TOY_GRID {
            for c in 0..TOY_GRID {
                let z = trace.logits[[0, r, c]];
                let t = if target[r][c].is_some() { 1.0 } else { 0.0 };
                loss += (softplus(z) - t * z) / cells;
                grad[[0, r, c]] = (sigmoid(z) - t) / cells;
                if let Some(spp) = target[r][c] {
                    let logits = trace.logits.slice(s![1.., r, c]);
                    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                    let exps = logits.mapv(|v| (v - max).exp());
                    let sum = exps.sum();
                    loss += (sum.ln() + max - logits[spp.index()]) / positives;
                    for k in 0..exps.len() {
                        let onehot = if k == spp.index() { 1.0 } else { 0.0 };
                        grad[[1 + k, r, c]] = (exps[k] / sum - onehot) / positives;
                    }
                }
            }
        }
        (loss, grad)
    }

    /// Backpropagates head-logit gradients and extra gradients arriving at
    /// the three pyramid levels.
    pub fn backward(
        &self,
        trace: &ToyTrace,
        dlogits: &Array3<f64>,
        dlevels: Option<&[Array3<f64>]>,
    ) -> ToyGrad {
        let (head, da3) = self
            .head
            .backward(&to_matrix(&trace.acts[2]), &to_matrix(dlogits));
        let mut da3 = from_matrix(da3, TOY_GRID, TOY_GRID);
        let extra = |i: usize, g: &mut Array3<f64>| {
            if let Some(levels) = dlevels {
                *g += &levels[i];
            }
        };
        extra(2, &mut da3);
        let stage_back = |layer: &Dense, x: &Array3<f64>, a: &Array3<f64>, da: &Array3<f64>| {
            let (_, h, w) = x.dim();
            let dz = to_matrix(da) * to_matrix(a).mapv(|v| 1.0 - v * v);
            let (g, dx) = layer.backward(&to_matrix(x), &dz);
            (g, from_matrix(dx, h, w))
        };
        let (g3, dp2) = stage_back(&self.backbone[2], &trace.pooled[1], &trace.acts[2], &da3);
        let mut da2 = avg_pool2_backward(&dp2);
        extra(1, &mut da2);
        let (g2, dp1) = stage_back(&self.backbone[1], &trace.pooled[0], &trace.acts[1], &da2);
        let mut da1 = avg_pool2_backward(&dp1);
        extra(0, &mut da1);
        let (g1, _) = stage_back(&self.backbone[0], &trace.input, &trace.acts[0], &da1);
        ToyGrad {
            backbone: [g1, g2, g3],
            head,
        }
    }

    /// Every grid cell as a detection, ranked by objectness.
    pub fn ranked_cells(&self, trace: &ToyTrace) -> Vec<Detection> {
        let mut out = Vec::with_capacity(TOY_GRID * TOY_GRID);
        for r in 0..TOY_GRID {
            for c in 0..TOY_GRID {
                let conf = sigmoid(trace.logits[[0, r, c]]);
                let cls = trace.logits.slice(s![1.., r, c]);
                let best = cls
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc })
                    .0;
                let spp = SppClass::from_index(best).expect("four class logits");
                out.push(Detection {
                    bbox: cell_box(r, c),
                    spp,
                    confidence: conf,
                });
            }
        }
        sort_by_confidence(&mut out);
        out
    }

    pub fn detect_array(&self, image: &Array3<f64>) -> Vec<Detection> {
        let trace = self.forward(image);
        self.ranked_cells(&trace)
            .into_iter()
            .filter(|d| d.confidence >= self.threshold)
            .collect()
    }

    pub fn detect_rgb(&self, image: &RgbImage) -> Vec<Detection> {
        self.detect_array(&rgb_to_toy(image))
    }

    pub fn apply(&mut self, grad: &ToyGrad, lr: f64) {
        for (layer, g) in self.backbone.iter_mut().zip(&grad.backbone) {
            layer.apply(g, lr);
        }
        self.head.apply(&grad.head, lr);
    }

    pub fn zero_grad(&self) -> ToyGrad {
        ToyGrad {
            backbone: std::array::from_fn(|i| self.backbone[i].zero_grad()),
            head: self.head.zero_grad(),
        }
    }

    /// Backbone (feature extractor) parameters, flattened layer by layer.
    pub fn extractor_params(&self) -> Vec<f64> {
        self.backbone.iter().flat_map(|l| l.params()).copied().collect()
    }

    pub fn extractor_params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.backbone.iter_mut().flat_map(|l| l.params_mut())
    }

    pub fn head_params(&self) -> Vec<f64> {
        self.head.params().copied().collect()
    }
}

impl ToyGrad {
    pub fn add_assign(&mut self, other: &ToyGrad) {
        for (a, b) in self.backbone.iter_mut().zip(&other.backbone) {
            a.add_assign(b);
        }
        self.head.add_assign(&other.head);
    }

    pub fn extractor(&self) -> Vec<f64> {
        self.backbone.iter().flat_map(|g| g.values()).copied().collect()
    }
}

/// Converts an RGB image to the toy input: box-averaged down to 16x16
/// (nearest-sampled when smaller), scaled to `[0, 1]`.
pub fn rgb_to_toy(img: &RgbImage) -> Array3<f64> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut sum = Array3::<f64>::zeros((TOY_CHANNELS, TOY_IMAGE, TOY_IMAGE));
    let mut hits = Array2::<f64>::zeros((TOY_IMAGE, TOY_IMAGE));
    if w >= TOY_IMAGE && h >= TOY_IMAGE {
        for (x, y, p) in img.enumerate_pixels() {
            let (tx, ty) = (x as usize * TOY_IMAGE / w, y as usize * TOY_IMAGE / h);
            for k in 0..TOY_CHANNELS {
                sum[[k, ty, tx]] += f64::from(p[k]) / 255.0;
            }
            hits[[ty, tx]] += 1.0;
        }
        for k in 0..TOY_CHANNELS {
            let mut plane = sum.index_axis_mut(Axis(0), k);
            plane /= &hits;
        }
        sum
    } else {
        Array3::from_shape_fn((TOY_CHANNELS, TOY_IMAGE, TOY_IMAGE), |(k, ty, tx)| {
            let p = img.get_pixel((tx * w / TOY_IMAGE) as u32, (ty * h / TOY_IMAGE) as u32);
            f64::from(p[k]) / 255.0
        })
    }
}

pub fn toy_to_rgb(a: &Array3<f64>) -> RgbImage {
    let (_, h, w) = a.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |k: usize| (a[[k, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

/// One synthetic toy image with its cell-aligned pod labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ToySample {
    pub image: Array3<f64>,
    pub labels: Vec<Detection>,
}

/// Generator for the two-domain toy task.
///
/// Pods fill a grid cell with a body color and carry `spp` bright seed
/// quadrants. The target domain shares the layout and pod appearance but every
/// pixel gets an additive color cast, a stand-in for field lighting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyTask {
    pub min_pods: usize,
    pub max_pods: usize,
    pub noise: f64,
    pub background: [f64; 3],
    pub body: [f64; 3],
    pub seed_color: [f64; 3],
    pub target_cast: [f64; 3],
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            min_pods: 1,
            max_pods: 6,
            noise: 0.05,
            background: [0.08, 0.08, 0.08],
            body: [0.45, 0.55, 0.2],
            seed_color: [0.9, 0.8, 0.35],
            target_cast: [0.0, 0.0, 0.45],
        }
    }
}

impl ToyTask {
    pub fn validate(&self) -> Result<()> {
        let cells = TOY_GRID * TOY_GRID;
        if self.min_pods > self.max_pods || self.max_pods > cells {
            return Err(Error::invalid(format!(
                "toy task needs min_pods <= max_pods <= {cells}, got {}..{}",
                self.min_pods, self.max_pods
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::invalid(format!("toy noise must be finite and >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    pub fn sample(&self, domain: Domain, rng: &mut impl Rng) -> ToySample {
        let mut image = Array3::zeros((TOY_CHANNELS, TOY_IMAGE, TOY_IMAGE));
        for k in 0..TOY_CHANNELS {
            image.index_axis_mut(Axis(0), k).fill(self.background[k]);
        }
        let n = rng.random_range(self.min_pods..=self.max_pods);
        let mut cells = sample_indices(rng, TOY_GRID * TOY_GRID, n).into_vec();
        cells.sort_unstable();
        let mut labels = Vec::with_capacity(n);
        for cell in cells {
            let (r, c) = (cell / TOY_GRID, cell % TOY_GRID);
            let spp = SppClass::new(rng.random_range(1..=SppClass::MAX)).expect("valid range");
            let (y0, x0) = (r * TOY_CELL, c * TOY_CELL);
            for k in 0..TOY_CHANNELS {
                image
                    .slice_mut(s![k, y0..y0 + TOY_CELL, x0..x0 + TOY_CELL])
                    .fill(self.body[k]);
            }
            // each seed fills one 2x2 quadrant of the cell
            let half = TOY_CELL / 2;
            for q in sample_indices(rng, 4, usize::from(spp.value())) {
                let (qy, qx) = (y0 + (q / 2) * half, x0 + (q % 2) * half);
                for k in 0..TOY_CHANNELS {
                    image
                        .slice_mut(s![k, qy..qy + half, qx..qx + half])
                        .fill(self.seed_color[k]);
                }
            }
            labels.push(Detection::labeled(cell_box(r, c), spp));
        }
        let cast = if domain.in_target() {
            self.target_cast
        } else {
            [0.0; 3]
        };
        for ((k, _, _), v) in image.indexed_iter_mut() {
            *v += cast[k] + rng.random_range(-self.noise..=self.noise);
        }
        ToySample { image, labels }
    }

    pub fn batch(&self, domain: Domain, n: usize, rng: &mut impl Rng) -> Vec<ToySample> {
        (0..n).map(|_| self.sample(domain, rng)).collect()
    }
}

impl ToySample {
    pub fn to_rgb(&self) -> RgbImage {
        toy_to_rgb(&self.image)
    }
}


pub(crate) fn check_sample(sample: &ToySample) -> Result<()> {
    if sample.image.dim() != (TOY_CHANNELS, TOY_IMAGE, TOY_IMAGE) {
        return Err(crate::Error::invalid(format!(
            "toy image must be {TOY_CHANNELS}x{TOY_IMAGE}x{TOY_IMAGE}, got {:?}",
            sample.image.dim()
        )));
    }
    Ok(())
}
