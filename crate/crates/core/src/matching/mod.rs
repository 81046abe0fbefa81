//! Keypoints, correspondences, descriptor matching, external match import and
//! the rotation sweep.

mod detect;
mod import;
mod sweep;

use std::collections::HashSet;

use rayon::prelude::*;

use crate::error::{Error, Result};

pub use detect::{detect_keypoints, DetectorConfig};
pub use import::{import_matches, write_matches, MATCH_FILE_HEADER};
pub use sweep::{
    canonical_rotation, default_angles, rotate_image, rotation_canvas, rotation_sweep, BuiltinMatcher,
    ImportedPerAngle, PairMatcher, RotationSweepResult,
};

/// Descriptor patch side length; descriptors have `PATCH_SIZE^2` entries.
pub const PATCH_SIZE: usize = 16;
pub const DESCRIPTOR_LEN: usize = PATCH_SIZE * PATCH_SIZE;

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    /// Full-resolution sub-pixel position.
    pub x: f64,
    pub y: f64,
    pub response: f64,
    /// Pyramid level the point was detected on (0 = full resolution).
    pub level: u8,
    /// Mean-subtracted, unit-norm patch.
    pub descriptor: Vec<f32>,
}

/// Keypoints of one image together with that image's dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub dims: (usize, usize),
    pub keypoints: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }
}

/// One correspondence: `fixed` in the fixed image, `moving` in the moving image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub fixed: [f64; 2],
    pub moving: [f64; 2],
    pub score: f64,
}

impl Match {
    fn key(&self) -> [u64; 4] {
        [
            self.fixed[0].to_bits(),
            self.fixed[1].to_bits(),
            self.moving[0].to_bits(),
            self.moving[1].to_bits(),
        ]
    }

    pub fn swapped(&self) -> Match {
        Match {
            fixed: self.moving,
            moving: self.fixed,
            score: self.score,
        }
    }
}

/// Bounds-checked, duplicate-free list of correspondences.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchSet {
    pairs: Vec<Match>,
    fixed_dims: (usize, usize),
    moving_dims: (usize, usize),
}

fn in_bounds(p: [f64; 2], dims: (usize, usize)) -> bool {
    p[0] >= 0.0 && p[1] >= 0.0 && p[0] < dims.0 as f64 && p[1] < dims.1 as f64
}

impl MatchSet {
    /// Validates bounds and scores and drops duplicate (fixed, moving) pairs,
    /// keeping the first occurrence.
    pub fn new(
        pairs: Vec<Match>,
        fixed_dims: (usize, usize),
        moving_dims: (usize, usize),
    ) -> Result<Self> {
        for (i, m) in pairs.iter().enumerate() {
            if !in_bounds(m.fixed, fixed_dims) {
                return Err(Error::InvalidArgument(format!(
                    "match {i}: fixed point ({}, {}) outside {}x{}",
                    m.fixed[0], m.fixed[1], fixed_dims.0, fixed_dims.1
                )));
            }
            if !in_bounds(m.moving, moving_dims) {
                return Err(Error::InvalidArgument(format!(
                    "match {i}: moving point ({}, {}) outside {}x{}",
                    m.moving[0], m.moving[1], moving_dims.0, moving_dims.1
                )));
            }
            if !(-1.0..=1.0).contains(&m.score) {
                return Err(Error::InvalidArgument(format!(
                    "match {i}: score {} outside [-1, 1]",
                    m.score
                )));
            }
        }
        Ok(Self::from_pairs_unchecked(pairs, fixed_dims, moving_dims))
    }

    /// Deduplicates without bounds checks.
    pub(crate) fn from_pairs_unchecked(
        pairs: Vec<Match>,
        fixed_dims: (usize, usize),
        moving_dims: (usize, usize),
    ) -> Self {
        let mut seen = HashSet::with_capacity(pairs.len());
        let pairs = pairs.into_iter().filter(|m| seen.insert(m.key())).collect();
        Self {
            pairs,
            fixed_dims,
            moving_dims,
        }
    }

    pub fn empty(fixed_dims: (usize, usize), moving_dims: (usize, usize)) -> Self {
        Self {
            pairs: Vec::new(),
            fixed_dims,
            moving_dims,
        }
    }

    pub fn pairs(&self) -> &[Match] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn fixed_dims(&self) -> (usize, usize) {
        self.fixed_dims
    }

    pub fn moving_dims(&self) -> (usize, usize) {
        self.moving_dims
    }

    /// Subset by index, preserving order.
    pub fn select(&self, indices: &[usize]) -> MatchSet {
        Self {
            pairs: indices.iter().map(|&i| self.pairs[i]).collect(),
            fixed_dims: self.fixed_dims,
            moving_dims: self.moving_dims,
        }
    }

    /// Maps every moving point through `f`, re-tagging the moving dimensions.
    /// Points landing outside `new_moving_dims` are dropped.
    pub fn map_moving(
        &self,
        new_moving_dims: (usize, usize),
        f: impl Fn(f64, f64) -> (f64, f64),
    ) -> MatchSet {
        let pairs = self
            .pairs
            .iter()
            .filter_map(|m| {
                let (x, y) = f(m.moving[0], m.moving[1]);
                let moved = Match {
                    fixed: m.fixed,
                    moving: [x, y],
                    score: m.score,
                };
                in_bounds(moved.moving, new_moving_dims).then_some(moved)
            })
            .collect();
        Self::from_pairs_unchecked(pairs, self.fixed_dims, new_moving_dims)
    }
}

#[derive(Clone, Copy)]
struct Top2 {
    best: f32,
    best_idx: usize,
    second: f32,
}

impl Top2 {
    const EMPTY: Top2 = Top2 {
        best: f32::NEG_INFINITY,
        best_idx: usize::MAX,
        second: f32::NEG_INFINITY,
    };

    #[inline]
    fn push(&mut self, s: f32, idx: usize) {
        if s > self.best || (s == self.best && idx < self.best_idx) {
            self.second = self.best;
            self.best = s;
            self.best_idx = idx;
        } else if s > self.second {
            self.second = s;
        }
    }

    fn merge(mut self, other: Top2) -> Top2 {
        if other.best_idx != usize::MAX {
            self.push(other.best, other.best_idx);
            if other.second > self.second {
                self.second = other.second;
            }
        }
        self
    }

    /// Lowe-style ratio on cosine distance, `(1 - best) <= ratio (1 - second)`.
    fn passes_ratio(&self, ratio: f64) -> bool {
        if self.second == f32::NEG_INFINITY {
            return true;
        }
        (1.0 - self.best as f64) <= ratio * (1.0 - self.second as f64)
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    // 8 independent accumulators so the compiler can vectorize
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for k in 0..8 {
            acc[k] += a[c * 8 + k] * b[c * 8 + k];
        }
    }
    let mut s: f32 = acc.iter().sum();
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

const ROW_BLOCK: usize = 64;

/// Mutual-nearest-neighbour matching with a ratio test applied in both
/// directions. Similarity is the descriptor dot product.
pub fn match_descriptors(fixed: &KeypointSet, moving: &KeypointSet, ratio: f64) -> MatchSet {
    let (fk, mk) = (&fixed.keypoints, &moving.keypoints);
    if fk.is_empty() || mk.is_empty() {
        return MatchSet::empty(fixed.dims, moving.dims);
    }
    let m = mk.len();

    // per row block: row top-2 plus column top-2 partials, merged in block order
    let blocks: Vec<(Vec<Top2>, Vec<Top2>)> = fk
        .par_chunks(ROW_BLOCK)
        .enumerate()
        .map(|(b, rows)| {
            let mut row_tops = vec![Top2::EMPTY; rows.len()];
            let mut col_tops = vec![Top2::EMPTY; m];
            for (r, kp) in rows.iter().enumerate() {
                let i = b * ROW_BLOCK + r;
                for (j, other) in mk.iter().enumerate() {
                    let s = dot(&kp.descriptor, &other.descriptor);
                    row_tops[r].push(s, j);
                    col_tops[j].push(s, i);
                }
            }
            (row_tops, col_tops)
        })
        .collect();

    let mut rows = Vec::with_capacity(fk.len());
    let mut cols = vec![Top2::EMPTY; m];
    for (row_tops, col_tops) in blocks {
        rows.extend(row_tops);
        for (c, partial) in cols.iter_mut().zip(col_tops) {
            *c = c.merge(partial);
        }
    }

    let pairs = rows
        .iter()
        .enumerate()
        .filter_map(|(i, row)| {
            let j = row.best_idx;
            let col = &cols[j];
            let mutual = col.best_idx == i;
            (mutual && row.passes_ratio(ratio) && col.passes_ratio(ratio)).then(|| Match {
                fixed: [fk[i].x, fk[i].y],
                moving: [mk[j].x, mk[j].y],
                score: (row.best as f64).clamp(-1.0, 1.0),
            })
        })
        .collect();
    MatchSet::from_pairs_unchecked(pairs, fixed.dims, moving.dims)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kp(x: f64, y: f64, desc: Vec<f32>) -> Keypoint {
        Keypoint {
            x,
            y,
            response: 1.0,
            level: 0,
            descriptor: desc,
        }
    }

    fn basis(i: usize, n: usize) -> Vec<f32> {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn matchset_dedups_and_checks_bounds() {
        let m = Match {
            fixed: [1.0, 2.0],
            moving: [3.0, 4.0],
            score: 0.5,
        };
        let set = MatchSet::new(vec![m, m], (10, 10), (10, 10)).unwrap();
        assert_eq!(set.len(), 1);
        let bad = Match {
            fixed: [10.0, 2.0],
            ..m
        };
        assert!(MatchSet::new(vec![bad], (10, 10), (10, 10)).is_err());
        let bad_score = Match { score: 1.5, ..m };
        assert!(MatchSet::new(vec![bad_score], (10, 10), (10, 10)).is_err());
    }

    #[test]
    fn self_matching_is_identity_with_unit_score() {
        let kps: Vec<Keypoint> = (0..6)
            .map(|i| kp(i as f64, 2.0 * i as f64, basis(i, 8)))
            .collect();
        let set = KeypointSet {
            dims: (20, 20),
            keypoints: kps,
        };
        let ms = match_descriptors(&set, &set, 0.9);
        assert_eq!(ms.len(), 6);
        for m in ms.pairs() {
            assert_eq!(m.fixed, m.moving);
            assert_eq!(m.score, 1.0);
        }
    }

    #[test]
    fn orthogonal_descriptors_give_no_matches() {
        let a = KeypointSet {
            dims: (20, 20),
            keypoints: (0..3).map(|i| kp(i as f64, 0.0, basis(i, 8))).collect(),
        };
        let b = KeypointSet {
            dims: (20, 20),
            keypoints: (3..6).map(|i| kp(i as f64, 0.0, basis(i, 8))).collect(),
        };
        assert!(match_descriptors(&a, &b, 0.9).is_empty());
    }

    #[test]
    fn top2_merge_is_order_independent() {
        let mut a = Top2::EMPTY;
        a.push(0.3, 0);
        a.push(0.9, 1);
        let mut b = Top2::EMPTY;
        b.push(0.9, 2);
        b.push(0.5, 3);
        let ab = a.merge(b);
        let ba = b.merge(a);
        assert_eq!((ab.best, ab.best_idx, ab.second), (0.9, 1, 0.9));
        assert_eq!((ba.best, ba.best_idx, ba.second), (0.9, 1, 0.9));
    }
}
