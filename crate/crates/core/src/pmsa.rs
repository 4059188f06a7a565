//! Motivation-shift degree between a history and its next item, and its
//! discretization into shift levels `1..=V`.
//!
//! The degree is kept as an exact fraction `(|target| − |overlap|) / |target|`
//! so that bucket boundaries never depend on floating-point rounding.

use thiserror::Error;

use crate::corpus::Catalog;

#[derive(Debug, Error, PartialEq)]
pub enum PmsaError {
    #[error("target item has an empty category set")]
    EmptyTarget,
    #[error("shift degree {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("need at least 3 shift levels, got {0}")]
    TooFewLevels(usize),
    #[error("history contains no real item")]
    EmptyHistory,
}

/// Shift degree as the exact fraction `shifted / target_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftDegree {
    /// Target categories absent from the history union.
    pub shifted: usize,
    pub target_size: usize,
}

impl ShiftDegree {
    /// `1 − |overlap| / |target|` in floating point.
    pub fn value(&self) -> f64 {
        let overlap = self.target_size - self.shifted;
        1.0 - overlap as f64 / self.target_size as f64
    }
}

/// Counts elements shared by two sorted, deduplicated slices.
fn sorted_intersection_len(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Shift degree of `target` against the union of history categories. Both
/// slices must be sorted and deduplicated.
pub fn pmsd(history_union: &[u32], target: &[u32]) -> Result<ShiftDegree, PmsaError> {
    if target.is_empty() {
        return Err(PmsaError::EmptyTarget);
    }
    let overlap = sorted_intersection_len(history_union, target);
    Ok(ShiftDegree {
        shifted: target.len() - overlap,
        target_size: target.len(),
    })
}

/// Maps shift degrees onto `1..=levels`: 0 to level 1, 1 to the top level, and
/// the open interval `(0, 1)` split evenly over the interior levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShiftBucketizer {
    levels: usize,
}

impl ShiftBucketizer {
    pub fn new(levels: usize) -> Result<Self, PmsaError> {
        if levels < 3 {
            return Err(PmsaError::TooFewLevels(levels));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Exact bucket of a fractional degree: `⌈(V−2)·a + 1⌉` in the interior.
    pub fn bucket_exact(&self, degree: ShiftDegree) -> usize {
        let ShiftDegree {
            shifted,
            target_size,
        } = degree;
        if shifted == 0 {
            1
        } else if shifted == target_size {
            self.levels
        } else {
            // ⌈(V−2)·s/t⌉ + 1 with integer ceiling division.
            1 + ((self.levels - 2) * shifted).div_ceil(target_size)
        }
    }

    /// Bucket of a real-valued degree. Interior values are clamped into
    /// `2..=V−1`, which the exact formula guarantees.
    pub fn bucket(&self, a: f64) -> Result<usize, PmsaError> {
        if !(0.0..=1.0).contains(&a) {
            return Err(PmsaError::OutOfRange(a));
        }
        if a == 0.0 {
            return Ok(1);
        }
        if a == 1.0 {
            return Ok(self.levels);
        }
        let raw = ((self.levels - 2) as f64 * a + 1.0).ceil() as usize;
        Ok(raw.clamp(2, self.levels - 1))
    }
}

/// Sorted union of the category sets of `items`; the padding index 0 and
/// duplicates contribute nothing.
pub fn history_union(items: &[usize], catalog: &Catalog) -> Vec<u32> {
    let mut all: Vec<u32> = items
        .iter()
        .filter(|&&i| i != crate::corpus::PAD)
        .flat_map(|&i| catalog.categories(i).iter().copied())
        .collect();
    all.sort_unstable();
    all.dedup();
    all
}

/// Shift level of `(history, target)` under `catalog`.
pub fn pmsa(
    history: &[usize],
    target: usize,
    catalog: &Catalog,
    bucketizer: &ShiftBucketizer,
) -> Result<usize, PmsaError> {
    if history.iter().all(|&i| i == crate::corpus::PAD) {
        return Err(PmsaError::EmptyHistory);
    }
    let union = history_union(history, catalog);
    let degree = pmsd(&union, catalog.categories(target))?;
    Ok(bucketizer.bucket_exact(degree))
}
