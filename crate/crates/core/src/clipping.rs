//! Adaptive feature clipping from a rolling memory bank.
//!
//! The bank keeps the most recent `capacity` vectors (FIFO). Per-dimension
//! thresholds are nearest-rank quantiles of the banked values: `lo` is the
//! `ceil(q n)`-th smallest value and `hi` the `ceil((1 - q) n)`-th smallest.
//! Features outside `[lo, hi]` are truncated to the nearer bound.
//!
//! The bank holds whatever vectors flow through the insertion point; the
//! detectors feed it both sentence embeddings and per-step states.

use std::collections::VecDeque;

use crate::error::{invalid, Error, Result};

pub const DEFAULT_CAPACITY: usize = 3000;
pub const DEFAULT_QUANTILE: f64 = 0.002;

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    capacity: usize,
    dim: Option<usize>,
    entries: VecDeque<Vec<f64>>,
}

impl Default for MemoryBank {
    fn default() -> Self {
        Self::new(DEFAULT_CAPACITY)
    }
}

impl MemoryBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "bank capacity must be positive");
        Self {
            capacity,
            dim: None,
            entries: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.entries.iter()
    }

    /// Appends `vectors` in order, evicting the oldest entries beyond capacity.
    /// The batch is rejected as a whole if any vector is malformed.
    pub fn update<V: AsRef<[f64]>>(&mut self, vectors: &[V]) -> Result<()> {
        let mut dim = self.dim;
        for (i, v) in vectors.iter().enumerate() {
            let v = v.as_ref();
            match dim {
                Some(d) if d != v.len() => {
                    return Err(Error::DimensionMismatch(format!(
                        "bank holds {d}-dim vectors, vector {i} has {}",
                        v.len()
                    )))
                }
                None => dim = Some(v.len()),
                _ => {}
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("bank vector {i}")));
            }
        }
        self.dim = dim;
        for v in vectors {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back(v.as_ref().to_vec());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipThresholds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub quantile: f64,
}

/// 1-based nearest rank `ceil(p n)`, clamped to `[1, n]`. The small offset
/// absorbs floating-point noise in products such as `0.002 * 3000`.
fn nearest_rank(p: f64, n: usize) -> usize {
    let r = (p * n as f64 - 1e-9).ceil() as usize;
    r.clamp(1, n)
}

/// Per-dimension nearest-rank `q` and `1 - q` quantiles of the bank.
pub fn compute_thresholds(bank: &MemoryBank, q: f64) -> Result<ClipThresholds> {
    if !(q > 0.0 && q < 0.5) {
        return Err(invalid("quantile", "must lie in (0, 0.5)"));
    }
    let n = bank.count();
    if n < 2 {
        return Err(Error::Insufficient {
            what: "banked vectors",
            needed: 2,
            got: n,
        });
    }
    let d = bank.dim.expect("non-empty bank has a dimension");
    let lo_rank = nearest_rank(q, n) - 1;
    let hi_rank = nearest_rank(1.0 - q, n) - 1;
    let mut lo = Vec::with_capacity(d);
    let mut hi = Vec::with_capacity(d);
    let mut column = Vec::with_capacity(n);
    for j in 0..d {
        column.clear();
        column.extend(bank.entries.iter().map(|v| v[j]));
        column.sort_by(f64::total_cmp);
        lo.push(column[lo_rank]);
        hi.push(column[hi_rank]);
    }
    Ok(ClipThresholds {
        lo,
        hi,
        quantile: q,
    })
}

/// Clips rows in place; returns the fraction of entries that changed.
pub fn clip_rows(rows: &mut [Vec<f64>], th: &ClipThresholds) -> Result<f64> {
    let d = th.lo.len();
    let mut changed = 0usize;
    let mut total = 0usize;
    for (i, row) in rows.iter_mut().enumerate() {
        if row.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "row {i} has {} features, thresholds have {d}",
                row.len()
            )));
        }
        for (j, x) in row.iter_mut().enumerate() {
            let c = x.clamp(th.lo[j], th.hi[j]);
            if c != *x {
                changed += 1;
                *x = c;
            }
        }
        total += d;
    }
    Ok(if total == 0 {
        0.0
    } else {
        changed as f64 / total as f64
    })
}

/// Returns the clipped copy of `matrix` and the fraction of modified entries.
pub fn clip_features(matrix: &[Vec<f64>], th: &ClipThresholds) -> Result<(Vec<Vec<f64>>, f64)> {
    let mut out = matrix.to_vec();
    let frac = clip_rows(&mut out, th)?;
    Ok((out, frac))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fill_and_evict() {
        let mut bank = MemoryBank::new(3);
        bank.update(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let held: Vec<f64> = bank.iter().map(|v| v[0]).collect();
        assert_eq!(held, vec![2.0, 3.0, 4.0]);

        let mut bank = MemoryBank::default();
        bank.update(&vec![vec![0.0; 4]; 5]).unwrap();
        assert_eq!(bank.count(), 5);
    }

    #[test]
    fn full_bank_keeps_capacity() {
        let mut bank = MemoryBank::new(10);
        let vs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        bank.update(&vs).unwrap();
        bank.update(&[vec![99.0]]).unwrap();
        assert_eq!(bank.count(), 10);
        assert_eq!(bank.iter().next().unwrap()[0], 1.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut bank = MemoryBank::new(4);
        bank.update(&[vec![1.0, 2.0]]).unwrap();
        assert!(matches!(
            bank.update(&[vec![1.0]]),
            Err(Error::DimensionMismatch(_))
        ));
        assert_eq!(bank.count(), 1);
    }

    #[test]
    fn constant_bank() {
        let mut bank = MemoryBank::new(50);
        bank.update(&vec![vec![2.5, -1.0]; 20]).unwrap();
        let th = compute_thresholds(&bank, 0.002).unwrap();
        assert_eq!(th.lo, vec![2.5, -1.0]);
        assert_eq!(th.hi, vec![2.5, -1.0]);
    }

    #[test]
    fn nearest_rank_thousand() {
        let mut bank = MemoryBank::new(1000);
        let vs: Vec<Vec<f64>> = (1..=1000).rev().map(|i| vec![i as f64]).collect();
        bank.update(&vs).unwrap();
        let th = compute_thresholds(&bank, 0.002).unwrap();
        // ranks ceil(2) = 2 and ceil(998) = 998
        assert_eq!(th.lo, vec![2.0]);
        assert_eq!(th.hi, vec![998.0]);
    }

    #[test]
    fn nearest_rank_quartile() {
        let mut bank = MemoryBank::new(4);
        bank.update(&[vec![3.0], vec![1.0], vec![4.0], vec![2.0]]).unwrap();
        let th = compute_thresholds(&bank, 0.25).unwrap();
        assert_eq!((th.lo[0], th.hi[0]), (1.0, 3.0));
    }

    #[test]
    fn thresholds_need_data() {
        let bank = MemoryBank::new(4);
        assert!(matches!(
            compute_thresholds(&bank, 0.1),
            Err(Error::Insufficient { .. })
        ));
    }

    #[test]
    fn clip_examples() {
        let th = ClipThresholds {
            lo: vec![-1.0, -1.0],
            hi: vec![1.0, 1.0],
            quantile: 0.1,
        };
        let (out, frac) = clip_features(&[vec![-5.0, 0.0], vec![0.0, 5.0]], &th).unwrap();
        assert_eq!(out, vec![vec![-1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(frac, 0.5);

        let (same, frac) = clip_features(&[vec![0.5, -0.5]], &th).unwrap();
        assert_eq!(same, vec![vec![0.5, -0.5]]);
        assert_eq!(frac, 0.0);

        let (up, _) = clip_features(&[vec![0.0, 7.0]], &th).unwrap();
        assert_eq!(up[0][1], 1.0);
    }
}
