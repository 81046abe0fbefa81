//! 2D affine transforms, least-squares fitting from correspondences, and
//! RANSAC outlier rejection.
//!
//! Estimated transforms map moving-image coordinates to fixed-image
//! coordinates, `p = A q + t`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::CoordinateMap;
use crate::matching::{Match, MatchSet};

/// Determinants below this are refused by [`AffineTransform2D::invert`].
pub const SINGULAR_DET: f64 = 1e-12;
/// Accepted registrations keep `|det|` inside this band.
pub const DET_SANITY_BAND: (f64, f64) = (1e-3, 1e3);

/// `x' = a11 x + a12 y + tx`, `y' = a21 x + a22 y + ty`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform2D {
    pub a11: f64,
    pub a12: f64,
    pub a21: f64,
    pub a22: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Default for AffineTransform2D {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform2D {
    pub const fn new(a11: f64, a12: f64, a21: f64, a22: f64, tx: f64, ty: f64) -> Self {
        Self {
            a11,
            a12,
            a21,
            a22,
            tx,
            ty,
        }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 0.0, 1.0, 0.0, 0.0)
    }

    pub const fn translation(tx: f64, ty: f64) -> Self {
        Self::new(1.0, 0.0, 0.0, 1.0, tx, ty)
    }

    pub const fn scale(s: f64) -> Self {
        Self::new(s, 0.0, 0.0, s, 0.0, 0.0)
    }

    /// Rotation by `deg` degrees (counter-clockwise in x-right/y-up terms,
    /// which is clockwise on screen for y-down images) about `(cx, cy)`.
    pub fn rotation_about(deg: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = sin_cos_deg(deg);
        Self::new(c, -s, s, c, cx - c * cx + s * cy, cy - s * cx - c * cy)
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a11, self.a12, self.a21, self.a22, self.tx, self.ty]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4], a[5])
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.a11 * x + self.a12 * y + self.tx,
            self.a21 * x + self.a22 * y + self.ty,
        )
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a21
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Whether the transform is finite with `|det|` inside [`DET_SANITY_BAND`].
    pub fn is_sane(&self) -> bool {
        let d = self.det().abs();
        self.is_finite() && d >= DET_SANITY_BAND.0 && d <= DET_SANITY_BAND.1
    }

    /// `compose(outer, inner)` applies `inner` first, then `outer`.
    pub fn compose(outer: &Self, inner: &Self) -> Self {
        Self::new(
            outer.a11 * inner.a11 + outer.a12 * inner.a21,
            outer.a11 * inner.a12 + outer.a12 * inner.a22,
            outer.a21 * inner.a11 + outer.a22 * inner.a21,
            outer.a21 * inner.a12 + outer.a22 * inner.a22,
            outer.a11 * inner.tx + outer.a12 * inner.ty + outer.tx,
            outer.a21 * inner.tx + outer.a22 * inner.ty + outer.ty,
        )
    }

    /// Exact inverse, `t' = -A^-1 t`.
    pub fn invert(&self) -> Result<Self> {
        let det = self.det();
        if !det.is_finite() || det.abs() <= SINGULAR_DET {
            return Err(Error::SingularTransform { det });
        }
        let (i11, i12, i21, i22) = (
            self.a22 / det,
            -self.a12 / det,
            -self.a21 / det,
            self.a11 / det,
        );
        Ok(Self::new(
            i11,
            i12,
            i21,
            i22,
            -(i11 * self.tx + i12 * self.ty),
            -(i21 * self.tx + i22 * self.ty),
        ))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl CoordinateMap for AffineTransform2D {
    fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        self.apply(x, y)
    }
}

/// `(sin, cos)` of an angle in degrees, exact at multiples of 90.
pub(crate) fn sin_cos_deg(deg: f64) -> (f64, f64) {
    let r = deg.rem_euclid(360.0);
    if r == 0.0 {
        (0.0, 1.0)
    } else if r == 90.0 {
        (1.0, 0.0)
    } else if r == 180.0 {
        (0.0, -1.0)
    } else if r == 270.0 {
        (-1.0, 0.0)
    } else {
        deg.to_radians().sin_cos()
    }
}

/// Least-squares affine mapping moving points onto fixed points.
pub fn estimate_least_squares(matches: &MatchSet) -> Result<AffineTransform2D> {
    fit_pairs(matches.pairs())
}

/// Fit over any slice of correspondences (moving -> fixed).
pub fn fit_pairs(pairs: &[Match]) -> Result<AffineTransform2D> {
    fit_iter(pairs.len(), || pairs.iter())
}

fn fit_indexed(pairs: &[Match], idx: &[usize]) -> Result<AffineTransform2D> {
    fit_iter(idx.len(), || idx.iter().map(|&i| &pairs[i]))
}

// Centered normal equations: with q~ = q - mean(q), the translation decouples
// and A = (sum p~ q~^T)(sum q~ q~^T)^-1.
fn fit_iter<'a, I, F>(n: usize, iter: F) -> Result<AffineTransform2D>
where
    I: Iterator<Item = &'a Match>,
    F: Fn() -> I,
{
    if n < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 3 correspondences, got {n}"
        )));
    }
    let nf = n as f64;
    let (mut qx, mut qy, mut px, mut py) = (0.0, 0.0, 0.0, 0.0);
    for m in iter() {
        qx += m.moving[0];
        qy += m.moving[1];
        px += m.fixed[0];
        py += m.fixed[1];
    }
    let (qx, qy, px, py) = (qx / nf, qy / nf, px / nf, py / nf);
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    let (mut pxx, mut pxy, mut pyx, mut pyy) = (0.0, 0.0, 0.0, 0.0);
    for m in iter() {
        let (u, v) = (m.moving[0] - qx, m.moving[1] - qy);
        let (a, b) = (m.fixed[0] - px, m.fixed[1] - py);
        sxx += u * u;
        sxy += u * v;
        syy += v * v;
        pxx += a * u;
        pxy += a * v;
        pyx += b * u;
        pyy += b * v;
    }
    let det = sxx * syy - sxy * sxy;
    let scale = sxx + syy;
    if !(scale > 0.0) || !(det > 1e-12 * scale * scale) {
        return Err(Error::DegenerateConfiguration(
            "moving points are collinear or coincident".into(),
        ));
    }
    let (i11, i12, i22) = (syy / det, -sxy / det, sxx / det);
    let a11 = pxx * i11 + pxy * i12;
    let a12 = pxx * i12 + pxy * i22;
    let a21 = pyx * i11 + pyy * i12;
    let a22 = pyx * i12 + pyy * i22;
    let t = AffineTransform2D::new(
        a11,
        a12,
        a21,
        a22,
        px - a11 * qx - a12 * qy,
        py - a21 * qx - a22 * qy,
    );
    if !t.is_finite() {
        return Err(Error::DegenerateConfiguration(
            "non-finite least-squares solution".into(),
        ));
    }
    Ok(t)
}

/// Euclidean transfer residual `|T(q) - p|` of one correspondence.
#[inline]
pub fn residual(t: &AffineTransform2D, m: &Match) -> f64 {
    let (x, y) = t.apply(m.moving[0], m.moving[1]);
    (x - m.fixed[0]).hypot(y - m.fixed[1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub max_iterations: usize,
    pub inlier_threshold: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            inlier_threshold: 3.0,
            min_inliers: 8,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("ransac max_iterations must be >= 1".into()));
        }
        if !(self.inlier_threshold > 0.0) {
            return Err(Error::Config("ransac inlier_threshold must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RansacOutcome {
    /// Least-squares re-fit over the consensus set.
    pub transform: AffineTransform2D,
    /// The best minimal-sample model.
    pub minimal: AffineTransform2D,
    /// Consensus set as indices into the caller's match list, ascending.
    pub inliers: Vec<usize>,
}

/// RANSAC with 3-point minimal samples. Fails with `Unregistrable` when the
/// best consensus is smaller than `cfg.min_inliers`.
pub fn ransac_affine(matches: &MatchSet, cfg: &RansacConfig) -> Result<RansacOutcome> {
    let outcome = ransac_best(matches, cfg)?;
    if outcome.inliers.len() < cfg.min_inliers {
        return Err(Error::Unregistrable(format!(
            "best RANSAC consensus {} < min_inliers {}",
            outcome.inliers.len(),
            cfg.min_inliers
        )));
    }
    Ok(outcome)
}

/// RANSAC without the `min_inliers` gate; used to score candidate match sets.
/// Returns an error only when no non-degenerate minimal sample exists.
pub fn ransac_best(matches: &MatchSet, cfg: &RansacConfig) -> Result<RansacOutcome> {
    cfg.validate()?;
    let pairs = matches.pairs();
    let n = pairs.len();
    if n < 3 {
        return Err(Error::Unregistrable(format!(
            "RANSAC needs at least 3 matches, got {n}"
        )));
    }

    // canonical order makes the result independent of input order
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| canonical_cmp(&pairs[a], &pairs[b]));
    let canon: Vec<Match> = order.iter().map(|&i| pairs[i]).collect();

    let threshold = cfg.inlier_threshold;
    let best = (0..cfg.max_iterations)
        .into_par_iter()
        .filter_map(|iter| {
            let mut rng = ChaCha8Rng::seed_from_u64(iteration_seed(cfg.seed, iter as u64));
            let sample = rand::seq::index::sample(&mut rng, n, 3).into_vec();
            let model = fit_indexed(&canon, &sample).ok()?;
            let mut count = 0usize;
            let mut sum = 0.0;
            for m in &canon {
                let r = residual(&model, m);
                if r <= threshold {
                    count += 1;
                    sum += r;
                }
            }
            Some(Candidate {
                count,
                mean_residual: sum / count.max(1) as f64,
                iteration: iter,
                model,
            })
        })
        .reduce_with(|a, b| if b.better_than(&a) { b } else { a })
        .ok_or_else(|| {
            Error::Unregistrable("every RANSAC minimal sample was degenerate".into())
        })?;

    let consensus: Vec<usize> = canon
        .iter()
        .enumerate()
        .filter(|(_, m)| residual(&best.model, m) <= threshold)
        .map(|(i, _)| i)
        .collect();
    let transform = fit_indexed(&canon, &consensus).unwrap_or(best.model);
    let mut inliers: Vec<usize> = consensus.iter().map(|&i| order[i]).collect();
    inliers.sort_unstable();
    Ok(RansacOutcome {
        transform,
        minimal: best.model,
        inliers,
    })
}

struct Candidate {
    count: usize,
    mean_residual: f64,
    iteration: usize,
    model: AffineTransform2D,
}

impl Candidate {
    fn better_than(&self, other: &Self) -> bool {
        use std::cmp::Ordering::*;
        match self.count.cmp(&other.count) {
            Greater => true,
            Less => false,
            Equal => match self.mean_residual.total_cmp(&other.mean_residual) {
                Less => true,
                Greater => false,
                Equal => self.iteration < other.iteration,
            },
        }
    }
}

fn canonical_cmp(a: &Match, b: &Match) -> std::cmp::Ordering {
    a.fixed[0]
        .total_cmp(&b.fixed[0])
        .then(a.fixed[1].total_cmp(&b.fixed[1]))
        .then(a.moving[0].total_cmp(&b.moving[0]))
        .then(a.moving[1].total_cmp(&b.moving[1]))
        .then(a.score.total_cmp(&b.score))
}

/// Counter-based seed for one RANSAC iteration (splitmix64 finalizer).
fn iteration_seed(seed: u64, iteration: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(iteration.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(q: (f64, f64), t: &AffineTransform2D) -> Match {
        let p = t.apply(q.0, q.1);
        Match {
            fixed: [p.0, p.1],
            moving: [q.0, q.1],
            score: 1.0,
        }
    }

    fn set(pairs: Vec<Match>) -> MatchSet {
        MatchSet::from_pairs_unchecked(pairs, (1 << 20, 1 << 20), (1 << 20, 1 << 20))
    }

    #[test]
    fn apply_examples() {
        assert_eq!(AffineTransform2D::identity().apply(7.5, -2.0), (7.5, -2.0));
        let rot = AffineTransform2D::new(0.0, -1.0, 1.0, 0.0, 0.0, 0.0);
        assert_eq!(rot.apply(1.0, 0.0), (0.0, 1.0));
        assert_eq!(AffineTransform2D::translation(3.0, -2.0).apply(1.0, 1.0), (4.0, -1.0));
    }

    #[test]
    fn invert_examples() {
        let id = AffineTransform2D::identity();
        assert_eq!(id.invert().unwrap(), id);
        assert_eq!(
            AffineTransform2D::translation(3.0, -2.0).invert().unwrap(),
            AffineTransform2D::translation(-3.0, 2.0)
        );
        assert_eq!(
            AffineTransform2D::scale(2.0).invert().unwrap(),
            AffineTransform2D::scale(0.5)
        );
        assert!(AffineTransform2D::new(1.0, 2.0, 2.0, 4.0, 0.0, 0.0)
            .invert()
            .is_err());
    }

    #[test]
    fn compose_with_identity_and_inverse() {
        let t = AffineTransform2D::new(1.1, -0.2, 0.3, 0.9, 4.0, -7.0);
        assert_eq!(
            AffineTransform2D::compose(&t, &AffineTransform2D::identity()),
            t
        );
        let c = AffineTransform2D::compose(&t, &t.invert().unwrap());
        assert!(c.max_abs_diff(&AffineTransform2D::identity()) < 1e-12);
    }

    #[test]
    fn rotation_about_fixes_center() {
        let r = AffineTransform2D::rotation_about(90.0, 10.0, 5.0);
        let (x, y) = r.apply(10.0, 5.0);
        assert!((x - 10.0).abs() < 1e-12 && (y - 5.0).abs() < 1e-12);
        let (x, y) = r.apply(11.0, 5.0);
        assert!((x - 10.0).abs() < 1e-12 && (y - 6.0).abs() < 1e-12);
    }

    #[test]
    fn three_points_recover_exactly() {
        let t = AffineTransform2D::new(0.9, 0.15, -0.1, 1.05, 12.5, -3.25);
        let pairs = vec![
            pair((10.0, 20.0), &t),
            pair((200.0, 40.0), &t),
            pair((60.0, 180.0), &t),
        ];
        let est = estimate_least_squares(&set(pairs)).unwrap();
        assert!(est.max_abs_diff(&t) < 1e-9);
    }

    #[test]
    fn collinear_and_short_inputs_fail() {
        let t = AffineTransform2D::identity();
        let line: Vec<Match> = (0..10).map(|i| pair((i as f64, 2.0 * i as f64), &t)).collect();
        assert!(matches!(
            estimate_least_squares(&set(line)),
            Err(Error::DegenerateConfiguration(_))
        ));
        let two = vec![pair((0.0, 0.0), &t), pair((1.0, 5.0), &t)];
        assert!(estimate_least_squares(&set(two)).is_err());
    }

    #[test]
    fn ransac_is_order_invariant() {
        let t = AffineTransform2D::new(1.02, 0.05, -0.04, 0.98, 5.0, 3.0);
        let mut pairs: Vec<Match> = (0..25)
            .map(|i| pair(((i * 37 % 200) as f64, (i * 53 % 190) as f64), &t))
            .collect();
        for i in 0..8 {
            pairs.push(Match {
                fixed: [(i * 31 % 211) as f64, (i * 17 % 97) as f64],
                moving: [(i * 71 % 150) as f64, (i * 13 % 181) as f64],
                score: 0.5,
            });
        }
        let cfg = RansacConfig {
            seed: 9,
            ..Default::default()
        };
        let a = ransac_affine(&set(pairs.clone()), &cfg).unwrap();
        let mut rev = pairs.clone();
        rev.reverse();
        let b = ransac_affine(&set(rev), &cfg).unwrap();
        assert_eq!(a.transform, b.transform);
        let n = pairs.len();
        let mut mapped: Vec<usize> = b.inliers.iter().map(|&i| n - 1 - i).collect();
        mapped.sort_unstable();
        assert_eq!(a.inliers, mapped);
    }

    #[test]
    fn refit_never_increases_inlier_residual() {
        let t = AffineTransform2D::new(0.97, 0.08, -0.06, 1.01, -4.0, 9.0);
        let pairs: Vec<Match> = (0..40)
            .map(|i| {
                let mut m = pair(((i * 29 % 300) as f64, (i * 41 % 280) as f64), &t);
                m.fixed[0] += ((i * 7919) % 13) as f64 / 13.0 - 0.5;
                m.fixed[1] += ((i * 104729) % 11) as f64 / 11.0 - 0.5;
                m
            })
            .collect();
        let ms = set(pairs);
        let out = ransac_affine(&ms, &RansacConfig::default()).unwrap();
        let sse = |model: &AffineTransform2D| -> f64 {
            out.inliers
                .iter()
                .map(|&i| residual(model, &ms.pairs()[i]).powi(2))
                .sum()
        };
        assert!(sse(&out.transform) <= sse(&out.minimal) + 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = RansacConfig::default();
        c.max_iterations = 0;
        assert!(c.validate().is_err());
        let mut c = RansacConfig::default();
        c.inlier_threshold = 0.0;
        assert!(c.validate().is_err());
    }
}
