//! Synthetic indoor scenes: masked pod cutouts are rotated and pasted onto
//! a background, and the pasted outlines become pixel-exact annotations.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{
    ingest_dataset, load_rgb, save_png, write_json, DatasetKind, InstanceAnnotationFile, MANIFEST_FILE,
};
use crate::detection::{
    rasterize, rasterize_window, Annotations, CountResult, ImageRecord, InstanceAnnotation, Mask,
    SppClass, Vertex,
};
use crate::error::{Error, Result};

/// A pod cut out of a labeled image. Alpha is the rasterized outline; the
/// outline is kept in patch coordinates so placements stay exact.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceCutout {
    pub patch: RgbaImage,
    pub polygon: Vec<Vertex>,
    pub spp: SppClass,
    pub source_image_id: String,
}

impl InstanceCutout {
    pub fn width(&self) -> u32 {
        self.patch.width()
    }

    pub fn height(&self) -> u32 {
        self.patch.height()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComposerConfig {
    /// Inclusive range for the number of cutouts drawn per scene.
    pub instances_per_image: [u32; 2],
    /// Rotation range in degrees, `[lo, hi)`; `lo == hi` fixes the angle.
    pub rotation_deg: [f64; 2],
    pub max_overlap_iou: f64,
    pub max_placement_attempts: u32,
    pub rng_seed: u64,
    /// Scene size `[width, height]` in pixels.
    pub output_size: [u32; 2],
}

impl Default for ComposerConfig {
    fn default() -> Self {
        ComposerConfig {
            instances_per_image: [40, 80],
            rotation_deg: [0.0, 360.0],
            max_overlap_iou: 0.0,
            max_placement_attempts: 100,
            rng_seed: 0,
            output_size: [1024, 1024],
        }
    }
}

impl ComposerConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.instances_per_image;
        let [rlo, rhi] = self.rotation_deg;
        let mut errors = Vec::new();
        if !(1 <= lo && lo <= hi) {
            errors.push(format!("instances_per_image [{lo}, {hi}] needs 1 <= min <= max"));
        }
        if !(rlo.is_finite() && rhi.is_finite() && rlo <= rhi) {
            errors.push(format!("rotation_deg [{rlo}, {rhi}] needs finite lo <= hi"));
        }
        if !(0.0..=1.0).contains(&self.max_overlap_iou) {
            errors.push(format!(
                "max_overlap_iou {} must lie in [0, 1]",
                self.max_overlap_iou
            ));
        }
        if self.max_placement_attempts == 0 {
            errors.push("max_placement_attempts must be >= 1".into());
        }
        if self.output_size.contains(&0) {
            errors.push(format!("output_size {:?} must be positive", self.output_size));
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Itemized(errors))
        }
    }
}

/// Where one cutout ended up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub source_image_id: String,
    pub rotation_deg: f64,
    /// Integer offset of the rotated patch frame in the scene.
    pub placement_xy: [i64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: RgbImage,
    pub annotations: Vec<InstanceAnnotation>,
    pub provenance: Vec<Placement>,
    footprints: Vec<Footprint>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PlacementOutcome {
    Placed(Placement),
    Rejected,
}

/// Rasterized annotation restricted to its bounding window.
#[derive(Debug, Clone, PartialEq)]
struct Footprint {
    x0: i64,
    y0: i64,
    mask: Mask,
    area: u64,
}

impl Footprint {
    fn intersection(&self, other: &Footprint) -> u64 {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = (self.x0 + i64::from(self.mask.width())).min(other.x0 + i64::from(other.mask.width()));
        let y1 = (self.y0 + i64::from(self.mask.height())).min(other.y0 + i64::from(other.mask.height()));
        let mut n = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let a = self.mask.get((x - self.x0) as u32, (y - self.y0) as u32);
                let b = other.mask.get((x - other.x0) as u32, (y - other.y0) as u32);
                n += u64::from(a && b);
            }
        }
        n
    }

    fn iou(&self, other: &Footprint) -> f64 {
        let inter = self.intersection(other);
        let union = self.area + other.area - inter;
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

impl SyntheticScene {
    pub fn new(background: RgbImage) -> Self {
        SyntheticScene {
            image: background,
            annotations: Vec::new(),
            provenance: Vec::new(),
            footprints: Vec::new(),
        }
    }

    pub fn counts(&self) -> CountResult {
        CountResult::from_classes(self.annotations.iter().map(|a| a.spp))
    }
}

/// One cutout per instance annotation of `record`, cut from `image`.
/// Annotations that rasterize to no pixels are skipped with a warning.
pub fn extract_instances(record: &ImageRecord, image: &RgbImage) -> Result<Vec<InstanceCutout>> {
    let Annotations::Instances(anns) = &record.annotations else {
        return Err(Error::invalid(format!(
            "{}: cutouts need instance annotations, found boxes",
            record.image_id
        )));
    };
    if anns.is_empty() {
        return Err(Error::invalid(format!(
            "{}: no instance annotations",
            record.image_id
        )));
    }
    if image.dimensions() != (record.width, record.height) {
        return Err(Error::invalid(format!(
            "{}: image is {:?} but the record says {}x{}",
            record.image_id,
            image.dimensions(),
            record.width,
            record.height
        )));
    }
    let mut out = Vec::with_capacity(anns.len());
    for (i, ann) in anns.iter().enumerate() {
        let mask = ann.rasterize(record.width, record.height)?;
        let Some((x0, y0, x1, y1)) = mask.bounds() else {
            warn!(
                "{}: instance {i} covers no pixel centers; skipped",
                record.image_id
            );
            continue;
        };
        let (w, h) = (x1 - x0 + 1, y1 - y0 + 1);
        let patch = RgbaImage::from_fn(w, h, |x, y| {
            let Rgb([r, g, b]) = *image.get_pixel(x0 + x, y0 + y);
            let a = if mask.get(x0 + x, y0 + y) { 255 } else { 0 };
            Rgba([r, g, b, a])
        });
        let (fx, fy) = (f64::from(x0), f64::from(y0));
        out.push(InstanceCutout {
            patch,
            polygon: ann.polygon.iter().map(|[x, y]| [x - fx, y - fy]).collect(),
            spp: ann.spp,
            source_image_id: record.image_id.clone(),
        });
    }
    Ok(out)
}

fn rotate(poly: &[Vertex], deg: f64, center: Vertex) -> Vec<Vertex> {
    if deg == 0.0 {
        return poly.to_vec();
    }
    let (s, c) = deg.to_radians().sin_cos();
    poly.iter()
        .map(|[x, y]| {
            let (dx, dy) = (x - center[0], y - center[1]);
            [center[0] + c * dx - s * dy, center[1] + s * dx + c * dy]
        })
        .collect()
}

fn sample_angle(cfg: &ComposerConfig, rng: &mut impl Rng) -> f64 {
    let [lo, hi] = cfg.rotation_deg;
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Bilinear RGBA sample at patch coordinates `(px, py)`; pixel centers sit
/// at half-integers and pixels outside the patch are transparent. Color is
/// averaged with alpha weights so transparent texels do not darken edges.
fn sample_patch(patch: &RgbaImage, px: f64, py: f64) -> ([f64; 3], f64) {
    let (fx, fy) = (px - 0.5, py - 0.5);
    let (ix, iy) = (fx.floor(), fy.floor());
    let (tx, ty) = (fx - ix, fy - iy);
    let (ix, iy) = (ix as i64, iy as i64);
    let mut color = [0.0; 3];
    let mut alpha = 0.0;
    for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
        for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
            let w = wx * wy;
            let (x, y) = (ix + dx, iy + dy);
            if w == 0.0 || x < 0 || y < 0 || x >= i64::from(patch.width()) || y >= i64::from(patch.height()) {
                continue;
            }
            let Rgba([r, g, b, a]) = *patch.get_pixel(x as u32, y as u32);
            let wa = w * f64::from(a) / 255.0;
            alpha += wa;
            for (c, v) in color.iter_mut().zip([r, g, b]) {
                *c += wa * f64::from(v);
            }
        }
    }
    if alpha > 0.0 {
        for c in &mut color {
            *c /= alpha;
        }
    }
    (color, alpha)
}

/// Cutouts of every annotated pod in an instance dataset, in record order.
pub fn load_cutouts(root: &Path) -> Result<Vec<InstanceCutout>> {
    let records = ingest_dataset(root, DatasetKind::Instance)?;
    let per_image: Vec<Vec<InstanceCutout>> = records
        .par_iter()
        .map(|r| extract_instances(r, &load_rgb(&r.path)?))
        .collect::<Result<_>>()?;
    Ok(per_image.into_iter().flatten().collect())
}

/// Tries up to `max_placement_attempts` random rotations and positions.
///
/// A candidate is rejected when its rotated outline leaves the scene or its
/// mask overlaps an already placed instance with IoU above the limit. On
/// acceptance the patch is composited inside the rotated outline and the
/// outline is appended as an annotation.
pub fn place_instance(
    scene: &mut SyntheticScene,
    cutout: &InstanceCutout,
    cfg: &ComposerConfig,
    rng: &mut impl Rng,
) -> Result<PlacementOutcome> {
    let (sw, sh) = (f64::from(scene.image.width()), f64::from(scene.image.height()));
    let center = [f64::from(cutout.width()) / 2.0, f64::from(cutout.height()) / 2.0];
    for _ in 0..cfg.max_placement_attempts {
        let deg = sample_angle(cfg, rng);
        let rotated = rotate(&cutout.polygon, deg, center);
        let (mut minx, mut miny, mut maxx, mut maxy) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for [x, y] in &rotated {
            minx = minx.min(*x);
            miny = miny.min(*y);
            maxx = maxx.max(*x);
            maxy = maxy.max(*y);
        }
        // integer offsets keeping every vertex inside [0, size]
        let (dx_lo, dx_hi) = ((-minx).ceil() as i64, (sw - maxx).floor() as i64);
        let (dy_lo, dy_hi) = ((-miny).ceil() as i64, (sh - maxy).floor() as i64);
        if dx_lo > dx_hi || dy_lo > dy_hi {
            continue;
        }
        let dx = rng.random_range(dx_lo..=dx_hi);
        let dy = rng.random_range(dy_lo..=dy_hi);
        let (fdx, fdy) = (dx as f64, dy as f64);
        let polygon: Vec<Vertex> = rotated.iter().map(|[x, y]| [x + fdx, y + fdy]).collect();
        let Ok(ann) = InstanceAnnotation::new(
            polygon,
            cutout.spp,
            scene.image.width(),
            scene.image.height(),
        ) else {
            continue;
        };
        let wx0 = (minx + fdx).floor().max(0.0) as i64;
        let wy0 = (miny + fdy).floor().max(0.0) as i64;
        let wx1 = ((maxx + fdx).ceil() as i64).min(scene.image.width() as i64);
        let wy1 = ((maxy + fdy).ceil() as i64).min(scene.image.height() as i64);
        let mask = rasterize_window(&ann.polygon, wx0, wy0, (wx1 - wx0) as u32, (wy1 - wy0) as u32)?;
        let area = mask.area();
        if area == 0 {
            continue;
        }
        let fp = Footprint {
            x0: wx0,
            y0: wy0,
            mask,
            area,
        };
        if scene
            .footprints
            .iter()
            .any(|other| fp.iou(other) > cfg.max_overlap_iou)
        {
            continue;
        }
        composite(&mut scene.image, cutout, &fp, deg, center, fdx, fdy);
        let placement = Placement {
            source_image_id: cutout.source_image_id.clone(),
            rotation_deg: deg,
            placement_xy: [dx, dy],
        };
        scene.annotations.push(ann);
        scene.footprints.push(fp);
        scene.provenance.push(placement.clone());
        return Ok(PlacementOutcome::Placed(placement));
    }
    Ok(PlacementOutcome::Rejected)
}

fn composite(
    image: &mut RgbImage,
    cutout: &InstanceCutout,
    fp: &Footprint,
    deg: f64,
    center: Vertex,
    dx: f64,
    dy: f64,
) {
    let (s, c) = if deg == 0.0 {
        (0.0, 1.0)
    } else {
        (-deg).to_radians().sin_cos()
    };
    for (mx, my) in fp.mask.iter_set() {
        let (x, y) = (fp.x0 as u32 + mx, fp.y0 as u32 + my);
        // inverse transform of the pixel center into patch coordinates
        let (qx, qy) = (f64::from(x) + 0.5 - dx - center[0], f64::from(y) + 0.5 - dy - center[1]);
        let (px, py) = if deg == 0.0 {
            (qx + center[0], qy + center[1])
        } else {
            (center[0] + c * qx - s * qy, center[1] + s * qx + c * qy)
        };
        let (color, alpha) = sample_patch(&cutout.patch, px, py);
        if alpha == 0.0 {
            continue;
        }
        let px = image.get_pixel_mut(x, y);
        for (dst, src) in px.0.iter_mut().zip(color) {
            let v = alpha * src + (1.0 - alpha) * f64::from(*dst);
            *dst = v.round().clamp(0.0, 255.0) as u8;
        }
    }
}

/// Draws a cutout count, samples cutouts with replacement and places each.
pub fn compose_scene(
    background: &RgbImage,
    pool: &[InstanceCutout],
    cfg: &ComposerConfig,
    rng: &mut impl Rng,
) -> Result<SyntheticScene> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Empty("cutout pool is empty"));
    }
    let (bw, bh) = background.dimensions();
    if pool.iter().all(|c| c.width() > bw || c.height() > bh) {
        return Err(Error::Infeasible(format!(
            "background {bw}x{bh} is smaller than every cutout"
        )));
    }
    let [lo, hi] = cfg.instances_per_image;
    let n = rng.random_range(lo..=hi);
    let mut scene = SyntheticScene::new(background.clone());
    let mut rejected = 0;
    for _ in 0..n {
        let cutout = &pool[rng.random_range(0..pool.len())];
        if place_instance(&mut scene, cutout, cfg, rng)? == PlacementOutcome::Rejected {
            rejected += 1;
        }
    }
    if rejected > 0 {
        debug!("{rejected} of {n} placements rejected");
    }
    Ok(scene)
}

/// Per-annotation problems with a composed scene; empty when it is valid.
///
/// Checks masks stay in bounds, pairwise IoU stays within the limit, and
/// every annotated pixel differs from the background unless it lies on the
/// one-pixel fringe of its mask.
pub fn check_scene(background: &RgbImage, scene: &SyntheticScene, max_overlap_iou: f64) -> Vec<String> {
    let (w, h) = scene.image.dimensions();
    let mut problems = Vec::new();
    if background.dimensions() != (w, h) {
        problems.push(format!(
            "background is {:?} but the scene is {w}x{h}",
            background.dimensions()
        ));
        return problems;
    }
    let mut masks = Vec::with_capacity(scene.annotations.len());
    for (i, ann) in scene.annotations.iter().enumerate() {
        match InstanceAnnotation::new(ann.polygon.clone(), ann.spp, w, h)
            .and_then(|a| rasterize(&a.polygon, w, h))
        {
            Ok(m) => masks.push(Some(m)),
            Err(e) => {
                problems.push(format!("annotation {i}: {e}"));
                masks.push(None);
            }
        }
    }
    for (i, m) in masks.iter().enumerate() {
        let Some(m) = m else { continue };
        if m.is_empty() {
            problems.push(format!("annotation {i} covers no pixels"));
        }
        for (x, y) in m.iter_set() {
            if scene.image.get_pixel(x, y) != background.get_pixel(x, y) {
                continue;
            }
            let on_fringe = (-1i64..=1).any(|oy| {
                (-1i64..=1).any(|ox| {
                    let (nx, ny) = (i64::from(x) + ox, i64::from(y) + oy);
                    nx < 0
                        || ny < 0
                        || nx >= i64::from(w)
                        || ny >= i64::from(h)
                        || !m.get(nx as u32, ny as u32)
                })
            });
            if !on_fringe {
                problems.push(format!(
                    "annotation {i}: interior pixel ({x}, {y}) matches the background"
                ));
            }
        }
        for (j, other) in masks.iter().enumerate().skip(i + 1) {
            let Some(other) = other else { continue };
            let iou = crate::detection::mask_iou(m, other).unwrap_or(1.0);
            if iou > max_overlap_iou {
                problems.push(format!(
                    "annotations {i} and {j} overlap with IoU {iou} > {max_overlap_iou}"
                ));
            }
        }
    }
    problems
}

/// Tiles `background` to `width x height`, starting at its top-left corner.
pub fn fit_background(background: &RgbImage, width: u32, height: u32) -> Result<RgbImage> {
    let (bw, bh) = background.dimensions();
    if bw == 0 || bh == 0 {
        return Err(Error::invalid("background image is empty"));
    }
    Ok(RgbImage::from_fn(width, height, |x, y| {
        *background.get_pixel(x % bw, y % bh)
    }))
}

/// Independent generator for scene `index`: the configured seed selects the
/// key and the index selects the stream.
pub fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestScene {
    pub index: u64,
    pub split: Split,
    /// Paths relative to the dataset root.
    pub image: PathBuf,
    pub annotation: PathBuf,
    pub pod_count: u64,
    pub seed_count: u64,
    pub provenance: Vec<Placement>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_train: u64,
    pub n_eval: u64,
    pub total_images: u64,
    pub scenes: Vec<ManifestScene>,
    /// Placed instances per seed class, keyed `1spp`..`4spp`.
    pub class_histogram: std::collections::BTreeMap<String, u64>,
    pub config: ComposerConfig,
    /// Full run configuration when the dataset was produced from one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<serde_json::Value>,
}

pub fn scene_stem(index: u64) -> String {
    format!("scene_{index:05}")
}

/// Renders and writes `n_train + n_eval` scenes under `out/train` and
/// `out/eval` in parallel and returns the manifest, sorted by scene index.
/// The manifest itself is not written; see [`generate_dataset`].
pub fn render_dataset(
    pool: &[InstanceCutout],
    background: &RgbImage,
    n_train: u64,
    n_eval: u64,
    cfg: &ComposerConfig,
    out: &Path,
) -> Result<Manifest> {
    cfg.validate()?;
    let [w, h] = cfg.output_size;
    let bg = fit_background(background, w, h)?;
    let scenes = (0..n_train + n_eval)
        .into_par_iter()
        .map(|index| {
            let split = if index < n_train { Split::Train } else { Split::Eval };
            let mut rng = scene_rng(cfg.rng_seed, index);
            let scene = compose_scene(&bg, pool, cfg, &mut rng)?;
            let stem = scene_stem(index);
            let image = Path::new(split.dir()).join(format!("{stem}.png"));
            let annotation = Path::new(split.dir()).join(format!("{stem}.json"));
            save_png(&out.join(&image), &scene.image)?;
            write_json(
                &out.join(&annotation),
                &InstanceAnnotationFile::from_annotations(
                    PathBuf::from(format!("{stem}.png")),
                    w,
                    h,
                    &scene.annotations,
                ),
            )?;
            let counts = scene.counts();
            Ok((
                ManifestScene {
                    index,
                    split,
                    image,
                    annotation,
                    pod_count: counts.pod_count,
                    seed_count: counts.seed_count,
                    provenance: scene.provenance,
                },
                scene.annotations.iter().map(|a| a.spp).collect::<Vec<_>>(),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut histogram: std::collections::BTreeMap<String, u64> =
        SppClass::ALL.iter().map(|c| (c.to_string(), 0)).collect();
    for c in scenes.iter().flat_map(|(_, classes)| classes) {
        *histogram.entry(c.to_string()).or_default() += 1;
    }
    Ok(Manifest {
        n_train,
        n_eval,
        total_images: n_train + n_eval,
        scenes: scenes.into_iter().map(|(s, _)| s).collect(),
        class_histogram: histogram,
        config: cfg.clone(),
        run_config: None,
    })
}

/// [`render_dataset`] followed by writing `manifest.json`.
pub fn generate_dataset(
    pool: &[InstanceCutout],
    background: &RgbImage,
    n_train: u64,
    n_eval: u64,
    cfg: &ComposerConfig,
    out: &Path,
) -> Result<Manifest> {
    let manifest = render_dataset(pool, background, n_train, n_eval, cfg, out)?;
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(out: &Path, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(&out.join(MANIFEST_FILE), manifest)
}
