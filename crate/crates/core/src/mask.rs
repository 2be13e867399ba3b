//! Binary masks at arbitrary resolution, with the pooling and dilation the
//! router needs and the region IoU used for evaluation.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim(
                "BinaryMask::from_bits",
                alloc::format!("{} bits for {height}x{width}", bits.len()),
            ));
        }
        Ok(Self { height, width, bits })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(y, x));
            }
        }
        Self { height, width, bits }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Centroid `(y, x)` of set pixels, `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sy, mut sx, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    sy += y as f64;
                    sx += x as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sy / n as f64, sx / n as f64))
    }

    pub fn union(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.same_extents(other, "BinaryMask::union")?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| a | b).collect();
        Ok(BinaryMask { bits, ..self.clone() })
    }

    /// Logical-OR pooling by an integer factor: a cell is set if any pixel
    /// under it is set.
    pub fn or_pool(&self, factor: usize) -> Result<BinaryMask> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::dim(
                "BinaryMask::or_pool",
                alloc::format!("{}x{} not divisible by {factor}", self.height, self.width),
            ));
        }
        let mut out = BinaryMask::empty(self.height / factor, self.width / factor);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out.set(y / factor, x / factor, true);
                }
            }
        }
        Ok(out)
    }

    /// Nearest-neighbour resampling to `(height, width)`.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        BinaryMask::from_fn(height, width, |y, x| {
            self.get(y * self.height / height, x * self.width / width)
        })
    }

    /// Fraction of set pixels under each `f×f` cell, as a row-major vector.
    pub fn area_fractions(&self, factor: usize) -> Vec<f32> {
        let (ho, wo) = (self.height / factor, self.width / factor);
        let mut out = vec![0.0f32; ho * wo];
        let inv = 1.0 / (factor * factor) as f32;
        for y in 0..ho * factor {
            for x in 0..wo * factor {
                if self.get(y, x) {
                    out[(y / factor) * wo + x / factor] += inv;
                }
            }
        }
        out
    }

    /// Square dilation with a `(2r+1)²` structuring element, applied `iterations` times.
    pub fn dilate(&self, radius: usize, iterations: usize) -> BinaryMask {
        let mut cur = self.clone();
        if radius == 0 {
            return cur;
        }
        for _ in 0..iterations {
            let src = cur.clone();
            for y in 0..self.height {
                for x in 0..self.width {
                    if !src.get(y, x) {
                        continue;
                    }
                    let (y0, y1) = (y.saturating_sub(radius), (y + radius).min(self.height - 1));
                    let (x0, x1) = (x.saturating_sub(radius), (x + radius).min(self.width - 1));
                    for yy in y0..=y1 {
                        for xx in x0..=x1 {
                            cur.set(yy, xx, true);
                        }
                    }
                }
            }
        }
        cur
    }

    fn same_extents(&self, other: &BinaryMask, op: &'static str) -> Result<()> {
        if self.extents() != other.extents() {
            return Err(Error::dim(
                op,
                alloc::format!("{:?} vs {:?}", self.extents(), other.extents()),
            ));
        }
        Ok(())
    }
}

/// Region IoU `|a∧b| / |a∨b|`; two empty masks score 1.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_extents(b, "iou")?;
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += usize::from(x & y);
        uni += usize::from(x | y);
    }
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}
