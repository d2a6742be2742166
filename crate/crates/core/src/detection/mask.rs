use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major binary mask.
#[derive(Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl std::fmt::Debug for Mask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mask({}x{}, {} set)", self.width, self.height, self.area())
    }
}

impl Mask {
    pub fn new(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Self {
        let mut m = Mask::new(width, height);
        for y in 0..height {
            for x in 0..width {
                m.set(x, y, f(x, y));
            }
        }
        m
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    fn idx(&self, x: u32, y: u32) -> usize {
        y as usize * self.width as usize + x as usize
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height && self.bits[self.idx(x, y)]
    }

    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        let i = self.idx(x, y);
        self.bits[i] = v;
    }

    pub fn area(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Iterates `(x, y)` of set pixels in row-major order.
    pub fn iter_set(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width as usize;
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(move |(i, _)| ((i % w) as u32, (i / w) as u32))
    }

    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the set region.
    pub fn bounds(&self) -> Option<(u32, u32, u32, u32)> {
        self.iter_set().fold(None, |acc, (x, y)| match acc {
            None => Some((x, y, x, y)),
            Some((x0, y0, x1, y1)) => Some((x0.min(x), y0.min(y), x1.max(x), y1.max(y))),
        })
    }

    /// Sub-mask `[x0, x0 + w) x [y0, y0 + h)`; pixels outside the mask read as unset.
    pub fn crop(&self, x0: u32, y0: u32, w: u32, h: u32) -> Mask {
        Mask::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.check_dims(other)?;
        Ok(Mask {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| *a || *b)
                .collect(),
        })
    }

    fn check_dims(&self, other: &Mask) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::invalid(format!(
                "mask dimension mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Run-length encoding over the row-major pixel order, starting with an
    /// unset run (which may be zero-length).
    pub fn to_rle(&self) -> Rle {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        Rle {
            width: self.width,
            height: self.height,
            counts,
        }
    }

    pub fn from_rle(rle: &Rle) -> Result<Mask> {
        let n = rle.width as usize * rle.height as usize;
        let total: u64 = rle.counts.iter().map(|&c| u64::from(c)).sum();
        if total != n as u64 {
            return Err(Error::invalid(format!(
                "RLE covers {total} pixels, mask has {n}"
            )));
        }
        let mut bits = Vec::with_capacity(n);
        for (i, &c) in rle.counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, c as usize));
        }
        Ok(Mask {
            width: rle.width,
            height: rle.height,
            bits,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

/// `|a ∧ b| / |a ∨ b|`, with two empty masks scoring 0.
pub fn mask_iou(a: &Mask, b: &Mask) -> Result<f64> {
    a.check_dims(b)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += u64::from(x && y);
        union += u64::from(x || y);
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = Mask::from_fn(2, 2, |x, y| (x, y) == (0, 0) || (x, y) == (1, 0));
        let b = Mask::from_fn(2, 2, |x, y| (x, y) == (0, 0) || (x, y) == (0, 1));
        assert!((mask_iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(mask_iou(&a, &a).unwrap(), 1.0);
        let c = Mask::from_fn(2, 2, |x, y| (x, y) == (1, 1));
        assert_eq!(mask_iou(&a, &c).unwrap(), 0.0);
        assert_eq!(mask_iou(&Mask::new(2, 2), &Mask::new(2, 2)).unwrap(), 0.0);
        assert!(mask_iou(&a, &Mask::new(3, 2)).is_err());
    }

    #[test]
    fn rle_round_trip() {
        let m = Mask::from_fn(5, 3, |x, y| (x + y) % 3 == 0);
        assert_eq!(Mask::from_rle(&m.to_rle()).unwrap(), m);
        let full = Mask::full(4, 4);
        assert_eq!(full.to_rle().counts, vec![0, 16]);
        let mut bad = m.to_rle();
        bad.counts.push(1);
        assert!(Mask::from_rle(&bad).is_err());
    }

    #[test]
    fn bounds_and_crop() {
        let m = Mask::from_fn(6, 6, |x, y| (2..4).contains(&x) && (1..5).contains(&y));
        assert_eq!(m.bounds(), Some((2, 1, 3, 4)));
        let c = m.crop(2, 1, 2, 4);
        assert_eq!(c.area(), 8);
        assert_eq!(Mask::new(3, 3).bounds(), None);
    }
}
