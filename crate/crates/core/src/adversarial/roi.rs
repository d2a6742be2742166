//! Multi-scale ROI pooling for the domain discriminator.
//!
//! Each box is cropped from every pyramid level by bilinear sampling on an
//! `output_size x output_size` grid, each crop is average-pooled over space,
//! and the three pooled channel vectors are concatenated. Because sampling
//! and pooling are linear in the feature values, a box reduces to a sparse
//! weight map per level, which serves both the forward and backward pass.

use ndarray::{s, Array1, Array3};
use serde::{Deserialize, Serialize};

use crate::detection::BBox;
use crate::error::{Error, Result};

pub const PYRAMID_LEVELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRoi")]
pub struct RoiConfig {
    pub output_size: usize,
    pub top_k: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRoi {
    #[serde(default = "default_output_size")]
    output_size: usize,
    #[serde(default = "default_top_k")]
    top_k: usize,
}

fn default_output_size() -> usize {
    7
}

fn default_top_k() -> usize {
    8
}

impl TryFrom<RawRoi> for RoiConfig {
    type Error = Error;
    fn try_from(r: RawRoi) -> Result<Self> {
        RoiConfig::new(r.output_size, r.top_k)
    }
}

impl RoiConfig {
    pub fn new(output_size: usize, top_k: usize) -> Result<Self> {
        if output_size == 0 || top_k == 0 {
            return Err(Error::invalid("ROI output_size and top_k must be >= 1"));
        }
        Ok(RoiConfig { output_size, top_k })
    }
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            output_size: default_output_size(),
            top_k: default_top_k(),
        }
    }
}

/// Three backbone feature maps, `channels x height x width`, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<Array3<f64>>,
    taps: [usize; PYRAMID_LEVELS],
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Array3<f64>>, taps: [usize; PYRAMID_LEVELS]) -> Result<Self> {
        if levels.len() != PYRAMID_LEVELS {
            return Err(Error::invalid(format!(
                "feature pyramid needs {PYRAMID_LEVELS} levels, got {}",
                levels.len()
            )));
        }
        for pair in levels.windows(2) {
            let (_, h0, w0) = pair[0].dim();
            let (_, h1, w1) = pair[1].dim();
            if !(h1 < h0 && w1 < w0) {
                return Err(Error::invalid(format!(
                    "pyramid spatial sizes must strictly decrease: {h0}x{w0} then {h1}x{w1}"
                )));
            }
        }
        if levels.iter().any(|l| l.is_empty()) {
            return Err(Error::invalid("empty pyramid level"));
        }
        Ok(FeaturePyramid { levels, taps })
    }

    pub fn levels(&self) -> &[Array3<f64>] {
        &self.levels
    }

    pub fn taps(&self) -> [usize; PYRAMID_LEVELS] {
        self.taps
    }

    /// Length of a fused ROI vector: the sum of channel counts.
    pub fn fused_len(&self) -> usize {
        self.levels.iter().map(|l| l.dim().0).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array3<f64>> {
        self.levels
            .iter()
            .map(|l| Array3::zeros(l.raw_dim()))
            .collect()
    }
}

/// Bilinear taps `(row, col, weight)` for a point in feature coordinates,
/// clamped to the map border.
fn bilinear_taps(fy: f64, fx: f64, h: usize, w: usize) -> [(usize, usize, f64); 4] {
    let fy = fy.clamp(0.0, (h - 1) as f64);
    let fx = fx.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (fy - y0 as f64, fx - x0 as f64);
    [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x1, (1.0 - ly) * lx),
        (y1, x0, ly * (1.0 - lx)),
        (y1, x1, ly * lx),
    ]
}

/// Sample point `(fy, fx)` in feature coordinates for output cell `(i, j)`.
fn sample_point(b: &BBox, i: usize, j: usize, size: usize, h: usize, w: usize) -> (f64, f64) {
    let v = b.y0() + (i as f64 + 0.5) / size as f64 * b.h();
    let u = b.x0() + (j as f64 + 0.5) / size as f64 * b.w();
    (v * h as f64 - 0.5, u * w as f64 - 0.5)
}

/// Crops one level to `channels x size x size` by bilinear sampling.
pub fn crop_resize_level(level: &Array3<f64>, b: &BBox, size: usize) -> Array3<f64> {
    let (c, h, w) = level.dim();
    let mut out = Array3::zeros((c, size, size));
    for i in 0..size {
        for j in 0..size {
            let (fy, fx) = sample_point(b, i, j, size, h, w);
            for (y, x, wt) in bilinear_taps(fy, fx, h, w) {
                if wt != 0.0 {
                    let src = level.slice(s![.., y, x]);
                    out.slice_mut(s![.., i, j]).scaled_add(wt, &src);
                }
            }
        }
    }
    out
}

/// Sparse pooling weights `(row, col, weight)` of one box on an `h x w` level.
pub fn pooling_weights(b: &BBox, size: usize, h: usize, w: usize) -> Vec<(usize, usize, f64)> {
    let mut dense = vec![0.0; h * w];
    let norm = 1.0 / (size * size) as f64;
    for i in 0..size {
        for j in 0..size {
            let (fy, fx) = sample_point(b, i, j, size, h, w);
            for (y, x, wt) in bilinear_taps(fy, fx, h, w) {
                dense[y * w + x] += wt * norm;
            }
        }
    }
    dense
        .into_iter()
        .enumerate()
        .filter(|(_, v)| *v != 0.0)
        .map(|(k, v)| (k / w, k % w, v))
        .collect()
}

/// Precomputed pooling weights for a set of boxes on one pyramid.
#[derive(Debug, Clone)]
pub struct RoiPlan {
    /// `[box][level] -> weights`
    weights: Vec<[Vec<(usize, usize, f64)>; PYRAMID_LEVELS]>,
}

impl RoiPlan {
    /// Plans the first `top_k` boxes, which callers pass ranked by confidence.
    pub fn new(pyr: &FeaturePyramid, boxes: &[BBox], cfg: &RoiConfig) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::Empty("no ROIs for discriminator"));
        }
        let weights = boxes
            .iter()
            .take(cfg.top_k)
            .map(|b| {
                std::array::from_fn(|l| {
                    let (_, h, w) = pyr.levels[l].dim();
                    pooling_weights(b, cfg.output_size, h, w)
                })
            })
            .collect();
        Ok(RoiPlan { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn forward(&self, pyr: &FeaturePyramid) -> Vec<Array1<f64>> {
        self.weights
            .iter()
            .map(|per_level| {
                let mut fused = Vec::with_capacity(pyr.fused_len());
                for (level, wts) in pyr.levels.iter().zip(per_level) {
                    let mut pooled = Array1::zeros(level.dim().0);
                    for &(y, x, wt) in wts {
                        pooled.scaled_add(wt, &level.slice(s![.., y, x]));
                    }
                    fused.extend(pooled);
                }
                Array1::from(fused)
            })
            .collect()
    }

    /// Scatters gradients w.r.t. the fused vectors back onto the levels,
    /// accumulating into `level_grads`.
    pub fn backward(&self, grads: &[Array1<f64>], level_grads: &mut [Array3<f64>]) {
        for (per_level, g) in self.weights.iter().zip(grads) {
            let mut offset = 0;
            for (lg, wts) in level_grads.iter_mut().zip(per_level) {
                let c = lg.dim().0;
                let part = g.slice(s![offset..offset + c]);
                for &(y, x, wt) in wts {
                    lg.slice_mut(s![.., y, x]).scaled_add(wt, &part);
                }
                offset += c;
            }
        }
    }
}

/// Fused ROI vectors for the `top_k` leading boxes.
pub fn roi_crop_resize(
    pyr: &FeaturePyramid,
    boxes: &[BBox],
    cfg: &RoiConfig,
) -> Result<Vec<Array1<f64>>> {
    Ok(RoiPlan::new(pyr, boxes, cfg)?.forward(pyr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn pyramid(c: usize) -> FeaturePyramid {
        FeaturePyramid::new(
            vec![
                Array3::from_elem((c, 8, 8), 1.5),
                Array3::from_elem((c, 4, 4), -2.0),
                Array3::from_elem((c, 2, 2), 0.25),
            ],
            [2, 4, 6],
        )
        .unwrap()
    }

    /// Direct bilinear interpolation, written without the shared helpers.
    fn brute_bilinear(level: &Array3<f64>, ch: usize, fy: f64, fx: f64) -> f64 {
        let (_, h, w) = level.dim();
        let fy = fy.max(0.0).min((h - 1) as f64);
        let fx = fx.max(0.0).min((w - 1) as f64);
        let (y0, x0) = (fy as usize, fx as usize);
        let y1 = if y0 + 1 < h { y0 + 1 } else { y0 };
        let x1 = if x0 + 1 < w { x0 + 1 } else { x0 };
        let (dy, dx) = (fy - y0 as f64, fx - x0 as f64);
        let top = level[[ch, y0, x0]] * (1.0 - dx) + level[[ch, y0, x1]] * dx;
        let bot = level[[ch, y1, x0]] * (1.0 - dx) + level[[ch, y1, x1]] * dx;
        top * (1.0 - dy) + bot * dy
    }

    fn brute_pool(level: &Array3<f64>, ch: usize, b: &BBox, size: usize) -> f64 {
        let (_, h, w) = level.dim();
        let mut acc = 0.0;
        for i in 0..size {
            for j in 0..size {
                let ny = b.y0() + b.h() * (2 * i + 1) as f64 / (2 * size) as f64;
                let nx = b.x0() + b.w() * (2 * j + 1) as f64 / (2 * size) as f64;
                acc += brute_bilinear(level, ch, ny * h as f64 - 0.5, nx * w as f64 - 0.5);
            }
        }
        acc / (size * size) as f64
    }

    #[test]
    fn pyramid_invariants() {
        let ok = pyramid(2);
        assert_eq!(ok.fused_len(), 6);
        let bad = FeaturePyramid::new(
            vec![
                Array3::zeros((1, 4, 4)),
                Array3::zeros((1, 4, 4)),
                Array3::zeros((1, 2, 2)),
            ],
            [0, 1, 2],
        );
        assert!(bad.is_err());
        assert!(FeaturePyramid::new(vec![Array3::zeros((1, 4, 4))], [0, 1, 2]).is_err());
    }

    #[test]
    fn constant_pyramid_gives_level_constants() {
        let pyr = pyramid(2);
        let boxes = [
            BBox::new(0.3, 0.6, 0.2, 0.5).unwrap(),
            BBox::new(0.9, 0.1, 0.05, 0.05).unwrap(),
        ];
        let fused = roi_crop_resize(&pyr, &boxes, &RoiConfig::default()).unwrap();
        for v in fused {
            let expect = [1.5, 1.5, -2.0, -2.0, 0.25, 0.25];
            for (a, b) in v.iter().zip(expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_box_at_level_size_is_verbatim() {
        let level = Array3::from_shape_fn((2, 4, 4), |(c, y, x)| (c * 16 + y * 4 + x) as f64);
        let full = BBox::new(0.5, 0.5, 1.0, 1.0).unwrap();
        let crop = crop_resize_level(&level, &full, 4);
        assert_eq!(crop, level);
    }

    #[test]
    fn left_half_pool_is_6_5() {
        let level = Array3::from_shape_fn((1, 4, 4), |(_, y, x)| (y * 4 + x) as f64);
        let b = BBox::new(0.25, 0.5, 0.5, 1.0).unwrap();
        let brute = brute_pool(&level, 0, &b, 1);
        assert!((brute - 6.5).abs() < 1e-12);
        let pyr = FeaturePyramid::new(
            vec![level, Array3::zeros((1, 2, 2)), Array3::zeros((1, 1, 1))],
            [0, 1, 2],
        )
        .unwrap();
        let fused = roi_crop_resize(&pyr, &[b], &RoiConfig::new(1, 1).unwrap()).unwrap();
        assert!((fused[0][0] - 6.5).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_random_boxes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let levels: Vec<Array3<f64>> = [(3, 9, 11), (2, 5, 6), (4, 3, 3)]
            .iter()
            .map(|&d| Array3::from_shape_fn(d, |_| rng.random_range(-1.0..1.0)))
            .collect();
        let pyr = FeaturePyramid::new(levels, [1, 2, 3]).unwrap();
        for _ in 0..50 {
            let b = BBox::new(
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.05..1.0),
                rng.random_range(0.05..1.0),
            )
            .unwrap();
            let size = rng.random_range(1..6);
            let v = roi_crop_resize(&pyr, &[b], &RoiConfig::new(size, 1).unwrap()).unwrap();
            let mut k = 0;
            for level in pyr.levels() {
                for ch in 0..level.dim().0 {
                    let expect = brute_pool(level, ch, &b, size);
                    assert!((v[0][k] - expect).abs() < 1e-12);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <forward(x), g> == <x, backward(g)> for a linear map
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let levels: Vec<Array3<f64>> = [(2, 8, 8), (3, 4, 4), (2, 2, 2)]
            .iter()
            .map(|&d| Array3::from_shape_fn(d, |_| rng.random_range(-1.0..1.0)))
            .collect();
        let pyr = FeaturePyramid::new(levels, [2, 4, 6]).unwrap();
        let boxes = [
            BBox::new(0.4, 0.4, 0.3, 0.6).unwrap(),
            BBox::new(0.7, 0.2, 0.5, 0.2).unwrap(),
        ];
        let plan = RoiPlan::new(&pyr, &boxes, &RoiConfig::new(3, 8).unwrap()).unwrap();
        let out = plan.forward(&pyr);
        let g: Vec<Array1<f64>> = out
            .iter()
            .map(|v| Array1::from_shape_fn(v.len(), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let lhs: f64 = out.iter().zip(&g).map(|(a, b)| a.dot(b)).sum();
        let mut back = pyr.zeros_like();
        plan.backward(&g, &mut back);
        let rhs: f64 = pyr
            .levels()
            .iter()
            .zip(&back)
            .map(|(a, b)| (a * b).sum())
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn empty_boxes_error() {
        let err = roi_crop_resize(&pyramid(1), &[], &RoiConfig::default()).unwrap_err();
        assert_eq!(err.to_string(), "no ROIs for discriminator");
    }

    #[test]
    fn only_top_k_boxes_are_used() {
        let b = BBox::new(0.5, 0.5, 0.5, 0.5).unwrap();
        let v = roi_crop_resize(&pyramid(1), &[b; 5], &RoiConfig::new(2, 3).unwrap()).unwrap();
        assert_eq!(v.len(), 3);
    }
}
