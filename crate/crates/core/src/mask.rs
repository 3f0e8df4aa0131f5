//! Frame-level mask primitives: bit masks, soft masks, column-major RLE,
//! IoU, area and COCO size categories.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("InvalidDimensions: mask must be at least 1x1, got {width}x{height}")]
    InvalidDimensions { width: u32, height: u32 },
    #[error("DimensionMismatch: {left_width}x{left_height} vs {right_width}x{right_height}")]
    DimensionMismatch {
        left_width: u32,
        left_height: u32,
        right_width: u32,
        right_height: u32,
    },
    #[error("CountSumMismatch: RLE counts sum to {actual}, expected {expected}")]
    CountSumMismatch { expected: u64, actual: u64 },
    #[error("ValueOutOfRange: soft mask value {value} at index {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f32 },
    #[error("LengthMismatch: expected {expected} values, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

fn check_dims(width: u32, height: u32) -> Result<(), MaskError> {
    if width == 0 || height == 0 {
        return Err(MaskError::InvalidDimensions { width, height });
    }
    Ok(())
}

/// Binary segmentation of one object in one frame.
///
/// Pixels are packed row-major into 64-bit words; bits past `width * height`
/// are always zero so word-wise popcounts are exact.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMask {
    width: u32,
    height: u32,
    words: Vec<u64>,
}

impl std::fmt::Debug for BitMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BitMask")
            .field("width", &self.width)
            .field("height", &self.height)
            .field("area", &self.area())
            .finish()
    }
}

impl BitMask {
    pub fn zeros(width: u32, height: u32) -> Result<Self, MaskError> {
        check_dims(width, height)?;
        let n = width as usize * height as usize;
        Ok(Self {
            width,
            height,
            words: vec![0; n.div_ceil(64)],
        })
    }

    pub fn ones(width: u32, height: u32) -> Result<Self, MaskError> {
        Self::from_fn(width, height, |_, _| true)
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        mut f: impl FnMut(u32, u32) -> bool,
    ) -> Result<Self, MaskError> {
        let mut mask = Self::zeros(width, height)?;
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    mask.set(x, y, true);
                }
            }
        }
        Ok(mask)
    }

    /// Builds a mask from row-major booleans.
    pub fn from_bools(width: u32, height: u32, bits: &[bool]) -> Result<Self, MaskError> {
        check_dims(width, height)?;
        let n = width as usize * height as usize;
        if bits.len() != n {
            return Err(MaskError::LengthMismatch {
                expected: n,
                actual: bits.len(),
            });
        }
        Self::from_fn(width, height, |x, y| bits[(y * width + x) as usize])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }

    #[inline]
    fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        let i = self.index(x, y);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.index(x, y);
        let bit = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= bit;
        } else {
            self.words[i / 64] &= !bit;
        }
    }

    /// Row-major booleans.
    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.pixel_count())
            .map(|i| self.words[i / 64] >> (i % 64) & 1 == 1)
            .collect()
    }

    pub fn area(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn same_dims(&self, other: &BitMask) -> Result<(), MaskError> {
        if self.width != other.width || self.height != other.height {
            return Err(MaskError::DimensionMismatch {
                left_width: self.width,
                left_height: self.height,
                right_width: other.width,
                right_height: other.height,
            });
        }
        Ok(())
    }

    /// Returns `(|a ∩ b|, |a ∪ b|)`.
    pub fn overlap_counts(&self, other: &BitMask) -> Result<(u64, u64), MaskError> {
        self.same_dims(other)?;
        let mut inter = 0u64;
        let mut union = 0u64;
        for (a, b) in self.words.iter().zip(&other.words) {
            inter += u64::from((a & b).count_ones());
            union += u64::from((a | b).count_ones());
        }
        Ok((inter, union))
    }
}

/// Raw predicted mask with per-pixel probabilities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    width: u32,
    height: u32,
    values: Vec<f32>,
}

impl SoftMask {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self, MaskError> {
        check_dims(width, height)?;
        let n = width as usize * height as usize;
        if values.len() != n {
            return Err(MaskError::LengthMismatch {
                expected: n,
                actual: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(MaskError::ValueOutOfRange { index, value });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    /// Lifts a hard mask to probabilities 0.0 / 1.0.
    pub fn from_bitmask(mask: &BitMask) -> Self {
        Self {
            width: mask.width,
            height: mask.height,
            values: mask
                .to_bools()
                .into_iter()
                .map(|b| if b { 1.0 } else { 0.0 })
                .collect(),
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.values[y as usize * self.width as usize + x as usize]
    }
}

/// Thresholds a soft mask; a bit is set iff its value is strictly greater
/// than `threshold`.
///
/// # Panics
///
/// If `threshold` is not inside the open interval `(0, 1)`.
pub fn binarize(mask: &SoftMask, threshold: f64) -> BitMask {
    assert!(
        threshold > 0.0 && threshold < 1.0,
        "binarize threshold must lie in (0, 1), got {threshold}"
    );
    let mut out = BitMask::zeros(mask.width, mask.height).expect("soft mask dims are valid");
    for (i, &v) in mask.values.iter().enumerate() {
        if f64::from(v) > threshold {
            out.words[i / 64] |= 1 << (i % 64);
        }
    }
    out
}

/// Uncompressed COCO run-length encoding.
///
/// Runs are column-major and alternate background / foreground, starting
/// with a (possibly empty) background run.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "RleRepr", into = "RleRepr")]
pub struct Rle {
    pub height: u32,
    pub width: u32,
    pub counts: Vec<u32>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RleRepr {
    size: [u32; 2],
    counts: Vec<u32>,
}

impl From<RleRepr> for Rle {
    fn from(r: RleRepr) -> Self {
        Rle {
            height: r.size[0],
            width: r.size[1],
            counts: r.counts,
        }
    }
}

impl From<Rle> for RleRepr {
    fn from(r: Rle) -> Self {
        RleRepr {
            size: [r.height, r.width],
            counts: r.counts,
        }
    }
}

pub fn rle_encode(mask: &BitMask) -> Rle {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..mask.width {
        for y in 0..mask.height {
            let v = mask.get(x, y);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    Rle {
        height: mask.height,
        width: mask.width,
        counts,
    }
}

pub fn rle_decode(rle: &Rle) -> Result<BitMask, MaskError> {
    let mut mask = BitMask::zeros(rle.width, rle.height)?;
    let expected = mask.pixel_count() as u64;
    let actual: u64 = rle.counts.iter().map(|&c| u64::from(c)).sum();
    if actual != expected {
        return Err(MaskError::CountSumMismatch { expected, actual });
    }
    let h = rle.height as usize;
    let mut pos = 0usize;
    for (i, &c) in rle.counts.iter().enumerate() {
        let c = c as usize;
        if i % 2 == 1 {
            for p in pos..pos + c {
                mask.set((p / h) as u32, (p % h) as u32, true);
            }
        }
        pos += c;
    }
    Ok(mask)
}

/// Intersection over union; two empty masks have IoU 0.
pub fn mask_iou(a: &BitMask, b: &BitMask) -> Result<f64, MaskError> {
    let (inter, union) = a.overlap_counts(b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

pub fn mask_area(mask: &BitMask) -> u64 {
    mask.area()
}

/// COCO object-size strata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AreaCategory {
    Small,
    Medium,
    Large,
}

pub const SMALL_AREA_LIMIT: u64 = 32 * 32;
pub const MEDIUM_AREA_LIMIT: u64 = 96 * 96;

pub fn area_category(area: u64) -> AreaCategory {
    if area < SMALL_AREA_LIMIT {
        AreaCategory::Small
    } else if area < MEDIUM_AREA_LIMIT {
        AreaCategory::Medium
    } else {
        AreaCategory::Large
    }
}

impl AreaCategory {
    /// Same partition applied to a fractional (mean) area.
    pub fn of_mean_area(area: f64) -> Self {
        if area < SMALL_AREA_LIMIT as f64 {
            AreaCategory::Small
        } else if area < MEDIUM_AREA_LIMIT as f64 {
            AreaCategory::Medium
        } else {
            AreaCategory::Large
        }
    }
}
