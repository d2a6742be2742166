//! Polygon scanline fill and its inverse, pixel-boundary contour tracing.
//!
//! A pixel belongs to a polygon iff its center `(x + 0.5, y + 0.5)` is inside
//! under the even-odd rule. Centers lying exactly on an edge are included for
//! top and left edges and excluded for bottom and right edges.

use std::collections::HashMap;

use super::{Mask, Vertex};
use crate::error::{Error, Result};

/// Signed shoelace area; positive for clockwise order in y-down coordinates.
pub fn polygon_area(poly: &[Vertex]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

fn check_fillable(poly: &[Vertex]) -> Result<()> {
    if poly.len() < 3 {
        return Err(Error::invalid(format!(
            "polygon needs at least 3 vertices, got {}",
            poly.len()
        )));
    }
    if poly.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::invalid("polygon has non-finite vertices"));
    }
    if polygon_area(poly).abs() <= 0.0 {
        return Err(Error::invalid("polygon has zero area"));
    }
    Ok(())
}

fn orient(a: Vertex, b: Vertex, c: Vertex) -> f64 {
    (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
}

fn on_segment(a: Vertex, b: Vertex, p: Vertex) -> bool {
    p[0] >= a[0].min(b[0]) && p[0] <= a[0].max(b[0]) && p[1] >= a[1].min(b[1]) && p[1] <= a[1].max(b[1])
}

fn segments_touch(a: Vertex, b: Vertex, c: Vertex, d: Vertex) -> bool {
    let (o1, o2) = (orient(a, b, c), orient(a, b, d));
    let (o3, o4) = (orient(c, d, a), orient(c, d, b));
    if o1 * o2 < 0.0 && o3 * o4 < 0.0 {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

/// Full annotation invariants: fillable, simple, and inside the image.
pub(crate) fn validate_polygon(poly: &[Vertex], width: u32, height: u32) -> Result<()> {
    check_fillable(poly)?;
    let (w, h) = (f64::from(width), f64::from(height));
    if let Some([x, y]) = poly
        .iter()
        .find(|[x, y]| *x < 0.0 || *y < 0.0 || *x > w || *y > h)
    {
        return Err(Error::invalid(format!(
            "vertex ({x}, {y}) outside {width}x{height} image"
        )));
    }
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if a == b {
            return Err(Error::invalid(format!("repeated vertex at index {i}")));
        }
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if segments_touch(a, b, c, d) {
                return Err(Error::invalid(format!(
                    "polygon self-intersects between edges {i} and {j}"
                )));
            }
        }
    }
    Ok(())
}

/// Fills `poly` on a `width x height` grid.
pub fn rasterize(poly: &[Vertex], width: u32, height: u32) -> Result<Mask> {
    rasterize_window(poly, 0, 0, width, height)
}

/// Fills `poly` on the window `[x0, x0 + width) x [y0, y0 + height)` of the
/// pixel grid; the returned mask is indexed relative to the window origin.
pub fn rasterize_window(poly: &[Vertex], x0: i64, y0: i64, width: u32, height: u32) -> Result<Mask> {
    check_fillable(poly)?;
    let mut mask = Mask::new(width, height);
    let n = poly.len();
    let mut crossings = Vec::with_capacity(n);
    for row in 0..height {
        let yc = (y0 + i64::from(row)) as f64 + 0.5;
        crossings.clear();
        for i in 0..n {
            let [ax, ay] = poly[i];
            let [bx, by] = poly[(i + 1) % n];
            if (ay > yc) != (by > yc) {
                crossings.push(ax + (yc - ay) * (bx - ax) / (by - ay));
            }
        }
        crossings.sort_by(f64::total_cmp);
        for pair in crossings.chunks_exact(2) {
            // centers xc with pair[0] <= xc < pair[1]
            let start = (pair[0] - 0.5).ceil() as i64 - x0;
            let end = (pair[1] - 0.5).ceil() as i64 - x0;
            let start = start.clamp(0, i64::from(width));
            let end = end.clamp(0, i64::from(width));
            for x in start..end {
                mask.set(x as u32, row, true);
            }
        }
    }
    Ok(mask)
}

/// Traces the pixel-boundary outline of a mask as a rectilinear polygon with
/// integer vertices, clockwise in y-down coordinates.
///
/// Rasterizing the result reproduces the mask exactly. Diagonal pinch points
/// are kept in a single outline (the polygon touches itself there); masks
/// with several components or with holes are rejected.
pub fn trace_contour(mask: &Mask) -> Result<Vec<Vertex>> {
    type P = (i64, i64);
    let mut edges: Vec<(P, P)> = Vec::new();
    for (x, y) in mask.iter_set() {
        let (xi, yi) = (i64::from(x), i64::from(y));
        let unset = |dx: i64, dy: i64| {
            let (nx, ny) = (xi + dx, yi + dy);
            nx < 0 || ny < 0 || !mask.get(nx as u32, ny as u32)
        };
        if unset(0, -1) {
            edges.push(((xi, yi), (xi + 1, yi)));
        }
        if unset(1, 0) {
            edges.push(((xi + 1, yi), (xi + 1, yi + 1)));
        }
        if unset(0, 1) {
            edges.push(((xi + 1, yi + 1), (xi, yi + 1)));
        }
        if unset(-1, 0) {
            edges.push(((xi, yi + 1), (xi, yi)));
        }
    }
    if edges.is_empty() {
        return Err(Error::invalid("cannot trace an empty mask"));
    }
    let mut by_start: HashMap<P, Vec<usize>> = HashMap::new();
    for (i, (s, _)) in edges.iter().enumerate() {
        by_start.entry(*s).or_default().push(i);
    }
    let mut used = vec![false; edges.len()];
    let first = 0;
    used[first] = true;
    let mut outline: Vec<P> = vec![edges[first].0];
    let (mut cur, mut heading) = {
        let (s, e) = edges[first];
        (e, (e.0 - s.0, e.1 - s.1))
    };
    loop {
        if cur == edges[first].0 {
            break;
        }
        outline.push(cur);
        let left = (heading.1, -heading.0);
        let straight = heading;
        let right = (-heading.1, heading.0);
        let candidates = by_start.get(&cur).map(Vec::as_slice).unwrap_or(&[]);
        let next = [left, straight, right].iter().find_map(|want| {
            candidates.iter().copied().find(|&i| {
                let (s, e) = edges[i];
                !used[i] && (e.0 - s.0, e.1 - s.1) == *want
            })
        });
        let Some(i) = next else {
            return Err(Error::invalid("mask outline is not closed"));
        };
        used[i] = true;
        let (s, e) = edges[i];
        heading = (e.0 - s.0, e.1 - s.1);
        cur = e;
    }
    if used.iter().any(|u| !u) {
        return Err(Error::invalid(
            "mask has several components or holes; a single outline cannot describe it",
        ));
    }
    // drop collinear vertices
    let n = outline.len();
    let simplified: Vec<Vertex> = (0..n)
        .filter(|&i| {
            let p = outline[(i + n - 1) % n];
            let c = outline[i];
            let q = outline[(i + 1) % n];
            (c.0 - p.0) * (q.1 - c.1) - (c.1 - p.1) * (q.0 - c.0) != 0
        })
        .map(|i| [outline[i].0 as f64, outline[i].1 as f64])
        .collect();
    Ok(simplified)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent even-odd ray cast at one point, strict interior test.
    fn inside_strict(poly: &[Vertex], px: f64, py: f64) -> bool {
        let n = poly.len();
        let mut inside = false;
        for i in 0..n {
            let [ax, ay] = poly[i];
            let [bx, by] = poly[(i + 1) % n];
            if (ay > py) != (by > py) {
                let x = ax + (py - ay) * (bx - ax) / (by - ay);
                if px < x {
                    inside = !inside;
                }
            }
        }
        inside
    }

    #[test]
    fn square_fills_100_pixels() {
        let sq = vec![[2.0, 3.0], [12.0, 3.0], [12.0, 13.0], [2.0, 13.0]];
        let m = rasterize(&sq, 20, 20).unwrap();
        assert_eq!(m.area(), 100);
        assert!(m.get(2, 3) && m.get(11, 12) && !m.get(12, 12) && !m.get(1, 3));
    }

    #[test]
    fn triangle_matches_brute_force_point_in_polygon() {
        let tri = vec![[0.0, 0.0], [4.0, 0.0], [0.0, 4.0]];
        let m = rasterize(&tri, 4, 4).unwrap();
        let brute = Mask::from_fn(4, 4, |x, y| {
            inside_strict(&tri, f64::from(x) + 0.5, f64::from(y) + 0.5)
        });
        assert_eq!(brute.area(), 6);
        assert_eq!(m, brute);
    }

    #[test]
    fn degenerate_polygons_error() {
        assert!(rasterize(&[[0.0, 0.0], [1.0, 1.0]], 4, 4).is_err());
        assert!(rasterize(&[[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]], 4, 4).is_err());
    }

    #[test]
    fn window_matches_full_raster() {
        let poly = vec![[3.2, 1.7], [17.9, 4.1], [12.5, 15.3], [4.4, 11.0]];
        let full = rasterize(&poly, 20, 20).unwrap();
        let win = rasterize_window(&poly, 5, 3, 10, 9).unwrap();
        for y in 0..9 {
            for x in 0..10 {
                assert_eq!(win.get(x, y), full.get(x + 5, y + 3));
            }
        }
    }

    #[test]
    fn contour_round_trip_on_l_shape() {
        let m = Mask::from_fn(8, 8, |x, y| (1..6).contains(&x) && (2..4).contains(&y) || (1..3).contains(&x) && (2..7).contains(&y));
        let poly = trace_contour(&m).unwrap();
        assert_eq!(poly.len(), 6);
        assert_eq!(rasterize(&poly, 8, 8).unwrap(), m);
    }

    #[test]
    fn diagonal_pinch_stays_one_outline() {
        let m = Mask::from_fn(4, 4, |x, y| (x, y) == (1, 1) || (x, y) == (2, 2));
        let poly = trace_contour(&m).unwrap();
        assert_eq!(rasterize(&poly, 4, 4).unwrap(), m);
    }

    #[test]
    fn contour_rejects_split_masks() {
        let m = Mask::from_fn(6, 6, |x, y| (x, y) == (0, 0) || (x, y) == (4, 4));
        assert!(trace_contour(&m).is_err());
        let ring = Mask::from_fn(5, 5, |x, y| (1..4).contains(&x) && (1..4).contains(&y) && (x, y) != (2, 2));
        assert!(trace_contour(&ring).is_err());
        assert!(trace_contour(&Mask::new(3, 3)).is_err());
    }
}
