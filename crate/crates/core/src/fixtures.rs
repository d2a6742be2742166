//! Procedural sample data: a labeled indoor pod pool, a black-cloth
//! background and a small two-domain outdoor field set.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{save_png, write_json, DomainsFile, FieldAnnotationFile, FieldBox, InstanceAnnotationFile, InstanceEntry, DOMAINS_FILE};
use crate::detection::{rasterize, BBox, SppClass, Vertex};
use crate::error::Result;

pub const POOL_DIR: &str = "pool";
pub const FIELD_DIR: &str = "field";
pub const BACKGROUND_FILE: &str = "background.png";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureSizes {
    pub pool_images: usize,
    pub field_source: usize,
    pub field_target: usize,
    pub background: u32,
}

impl Default for FixtureSizes {
    fn default() -> Self {
        FixtureSizes {
            pool_images: 40,
            field_source: 16,
            field_target: 8,
            background: 256,
        }
    }
}

fn jitter(rng: &mut impl Rng, base: [u8; 3], amount: i16) -> Rgb<u8> {
    Rgb(base.map(|c| (i16::from(c) + rng.random_range(-amount..=amount)).clamp(0, 255) as u8))
}

fn quarter(v: f64) -> f64 {
    (v * 4.0).round() / 4.0
}

/// Capsule-like outline: a rectangle of `length x width` with each end
/// replaced by a half-hexagon, rotated by `angle` radians about the center.
pub fn pod_outline(cx: f64, cy: f64, length: f64, width: f64, angle: f64) -> Vec<Vertex> {
    let (hl, hw) = (length / 2.0, width / 2.0);
    let cap = hw * 0.8;
    let local = [
        [-hl + cap, -hw],
        [hl - cap, -hw],
        [hl, -hw / 2.0],
        [hl, hw / 2.0],
        [hl - cap, hw],
        [-hl + cap, hw],
        [-hl, hw / 2.0],
        [-hl, -hw / 2.0],
    ];
    let (s, c) = angle.sin_cos();
    local
        .iter()
        .map(|[x, y]| [quarter(cx + x * c - y * s), quarter(cy + x * s + y * c)])
        .collect()
}

/// Dark, slightly textured cloth.
pub fn cloth(width: u32, height: u32, rng: &mut impl Rng) -> RgbImage {
    RgbImage::from_fn(width, height, |x, y| {
        let weave = if (x + y) % 4 == 0 { 6 } else { 0 };
        let v = 14 + weave + rng.random_range(0..5u8);
        Rgb([v, v, v + 2])
    })
}

/// Paints a pod: body color inside the outline, `spp` lighter seeds spaced
/// along its long axis.
fn paint_pod(img: &mut RgbImage, outline: &[Vertex], center: [f64; 2], length: f64, angle: f64, spp: SppClass, rng: &mut impl Rng) -> Result<()> {
    let mask = rasterize(outline, img.width(), img.height())?;
    let body = [150, 120, 60];
    let seed = [205, 180, 105];
    let n = f64::from(spp.value());
    let (s, c) = angle.sin_cos();
    for (x, y) in mask.iter_set() {
        let (dx, dy) = (f64::from(x) + 0.5 - center[0], f64::from(y) + 0.5 - center[1]);
        // position along the axis in [0, 1)
        let t = ((dx * c + dy * s) / length + 0.5).clamp(0.0, 0.999);
        let across = (-dx * s + dy * c).abs();
        let phase = (t * n).fract() - 0.5;
        let on_seed = phase.abs() < 0.3 && across < length / (2.5 * n).max(3.0);
        img.put_pixel(x, y, jitter(rng, if on_seed { seed } else { body }, 6));
    }
    Ok(())
}

/// Instance dataset of `n_images` cloth photos with 2 to 4 separated pods each.
pub fn write_indoor_pool(dir: &Path, n_images: usize, seed: u64) -> Result<usize> {
    const W: u32 = 96;
    const H: u32 = 72;
    const CELL: f64 = 24.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0;
    for i in 0..n_images {
        let mut img = cloth(W, H, &mut rng);
        let n = rng.random_range(2..=4);
        let mut instances = Vec::with_capacity(n);
        for cell in sample_indices(&mut rng, 12, n) {
            let (cx, cy) = (
                (cell % 4) as f64 * CELL + CELL / 2.0,
                (cell / 4) as f64 * CELL + CELL / 2.0,
            );
            let length = rng.random_range(14.0..20.0);
            let width = rng.random_range(6.0..8.0);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let spp = SppClass::new(rng.random_range(1..=SppClass::MAX))?;
            let outline = pod_outline(cx, cy, length, width, angle);
            paint_pod(&mut img, &outline, [cx, cy], length, angle, spp, &mut rng)?;
            instances.push(InstanceEntry {
                polygon: outline,
                spp: spp.value(),
            });
        }
        total += instances.len();
        let stem = format!("pool_{i:03}");
        save_png(&dir.join(format!("{stem}.png")), &img)?;
        write_json(
            &dir.join(format!("{stem}.json")),
            &InstanceAnnotationFile {
                image: PathBuf::from(format!("{stem}.png")),
                width: W,
                height: H,
                instances,
            },
        )?;
    }
    Ok(total)
}

pub fn write_background(path: &Path, size: u32, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    save_png(path, &cloth(size, size, &mut rng))
}

/// Outdoor box dataset: soil-and-foliage images with pods in separate grid
/// cells; some pods are partly covered by a leaf and flagged occluded. The
/// last `n_target` images carry a blue cast and are listed as target.
pub fn write_field_dataset(dir: &Path, n_source: usize, n_target: usize, seed: u64) -> Result<()> {
    const W: u32 = 128;
    const H: u32 = 96;
    const CELL: u32 = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut target = Vec::new();
    for i in 0..n_source + n_target {
        let in_target = i >= n_source;
        let cast: i16 = if in_target { 40 } else { 0 };
        let mut img = RgbImage::from_fn(W, H, |_, _| Rgb([70, 90, 40]));
        for p in img.pixels_mut() {
            *p = jitter(&mut rng, p.0, 8);
        }
        let n = rng.random_range(1..=6);
        let mut boxes = Vec::with_capacity(n);
        for cell in sample_indices(&mut rng, 12, n) {
            let (x0, y0) = ((cell as u32 % 4) * CELL, (cell as u32 / 4) * CELL);
            let (w, h) = (rng.random_range(14..24u32), rng.random_range(8..12u32));
            let (px, py) = (x0 + rng.random_range(2..CELL - w), y0 + rng.random_range(2..CELL - h));
            let spp = SppClass::new(rng.random_range(1..=SppClass::MAX))?;
            for y in py..py + h {
                for x in px..px + w {
                    let seg = (x - px) * u32::from(spp.value()) / w;
                    let centre = px + (2 * seg + 1) * w / (2 * u32::from(spp.value()));
                    let on_seed = x.abs_diff(centre) < w / (3 * u32::from(spp.value())).max(1) + 1;
                    let base = if on_seed { [190, 170, 90] } else { [120, 140, 60] };
                    img.put_pixel(x, y, jitter(&mut rng, base, 6));
                }
            }
            let occluded = rng.random_bool(0.3);
            if occluded {
                // leaf over the left half of the pod
                for y in py.saturating_sub(2)..(py + h + 2).min(H) {
                    for x in px.saturating_sub(2)..px + w / 2 {
                        img.put_pixel(x, y, jitter(&mut rng, [40, 110, 35], 6));
                    }
                }
            }
            let b = BBox::from_pixel_rect(f64::from(px), f64::from(py), f64::from(px + w), f64::from(py + h), W, H)?;
            boxes.push(FieldBox {
                cx: b.cx(),
                cy: b.cy(),
                w: b.w(),
                h: b.h(),
                spp: spp.value(),
                occluded: occluded.then_some(true),
            });
        }
        if cast > 0 {
            for p in img.pixels_mut() {
                p.0[2] = (i16::from(p.0[2]) + cast).clamp(0, 255) as u8;
            }
        }
        let stem = format!("field_{i:03}");
        if in_target {
            target.push(stem.clone());
        }
        save_png(&dir.join(format!("{stem}.png")), &img)?;
        write_json(
            &dir.join(format!("{stem}.json")),
            &FieldAnnotationFile {
                image: PathBuf::from(format!("{stem}.png")),
                width: W,
                height: H,
                boxes,
            },
        )?;
    }
    write_json(
        &dir.join(DOMAINS_FILE),
        &DomainsFile {
            source: None,
            target,
        },
    )
}

/// Writes `pool/`, `background.png` and `field/` under `out`.
pub fn make_fixtures(out: &Path, sizes: &FixtureSizes, seed: u64) -> Result<()> {
    write_indoor_pool(&out.join(POOL_DIR), sizes.pool_images, seed)?;
    write_background(&out.join(BACKGROUND_FILE), sizes.background, seed.wrapping_add(1))?;
    write_field_dataset(
        &out.join(FIELD_DIR),
        sizes.field_source,
        sizes.field_target,
        seed.wrapping_add(2),
    )
}
