//! Rotation sweep: try candidate orientations of the moving image and keep the
//! one with the largest geometrically consistent match set.
//!
//! A sweep angle `θ` means "the moving image looks like the fixed image
//! rotated by `θ`"; the candidate is evaluated by rotating the moving image by
//! `-θ` onto an expanded canvas (the canonical frame).

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{detect_keypoints, match_descriptors, DetectorConfig, KeypointSet, MatchSet};
use crate::affine::{ransac_best, sin_cos_deg, AffineTransform2D, RansacConfig};
use crate::error::{Error, Result};
use crate::imaging::{warp, ScalarImage};

/// Minimum RANSAC consensus for a pair to count as registrable in the sweep.
pub const MIN_SWEEP_INLIERS: usize = 4;

/// `0, step, 2*step, ...` up to (not including) 360 degrees.
pub fn default_angles(step_deg: f64) -> Vec<f64> {
    assert!(step_deg > 0.0);
    let n = (360.0 / step_deg).round() as usize;
    (0..n).map(|i| i as f64 * step_deg).collect()
}

fn canvas_extent(v: f64) -> usize {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r.max(1.0) as usize
    } else {
        v.ceil().max(1.0) as usize
    }
}

/// Rotation by `deg` about the image centre onto a canvas large enough to
/// hold the whole rotated image. Returns the source -> canvas map and the
/// canvas size.
pub fn rotation_canvas(dims: (usize, usize), deg: f64) -> (AffineTransform2D, (usize, usize)) {
    let (s, c) = sin_cos_deg(deg);
    let (w, h) = (dims.0 as f64, dims.1 as f64);
    let out = (
        canvas_extent(w * c.abs() + h * s.abs()),
        canvas_extent(w * s.abs() + h * c.abs()),
    );
    let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
    let (ox, oy) = ((out.0 as f64 - 1.0) / 2.0, (out.1 as f64 - 1.0) / 2.0);
    let t = AffineTransform2D::new(c, -s, s, c, ox - c * cx + s * cy, oy - s * cx - c * cy);
    (t, out)
}

/// Content rotated by `deg` about its centre, canvas expanded to avoid cropping.
pub fn rotate_image(img: &ScalarImage, deg: f64, fill: f64) -> ScalarImage {
    let (fwd, (w, h)) = rotation_canvas(img.dims(), deg);
    let back = fwd.invert().expect("rotations are invertible");
    warp(img, &back, w, h, fill)
}

/// Map from unrotated moving coordinates into the canonical frame of sweep
/// angle `angle_deg`, with the canonical canvas size.
pub fn canonical_rotation(
    moving_dims: (usize, usize),
    angle_deg: f64,
) -> (AffineTransform2D, (usize, usize)) {
    rotation_canvas(moving_dims, -angle_deg)
}

/// Produces fixed <-> canonical-moving correspondences for one sweep angle.
pub trait PairMatcher: Sync {
    /// `canonical` is the moving image rotated by `-angle_deg`;
    /// `to_canonical` maps unrotated moving coordinates into it. Returned
    /// matches use canonical coordinates for the moving side.
    fn match_canonical(
        &self,
        canonical: &ScalarImage,
        angle_deg: f64,
        to_canonical: &AffineTransform2D,
    ) -> Result<MatchSet>;
}

/// Harris + patch-descriptor matcher with the fixed keypoints computed once.
pub struct BuiltinMatcher {
    fixed: KeypointSet,
    detector: DetectorConfig,
    ratio: f64,
}

impl BuiltinMatcher {
    pub fn new(fixed: &ScalarImage, detector: DetectorConfig, ratio: f64) -> Result<Self> {
        let fixed = detect_keypoints(fixed, &detector)?;
        Ok(Self::with_keypoints(fixed, detector, ratio))
    }

    pub fn with_keypoints(fixed: KeypointSet, detector: DetectorConfig, ratio: f64) -> Self {
        Self {
            fixed,
            detector,
            ratio,
        }
    }

    pub fn fixed_keypoints(&self) -> &KeypointSet {
        &self.fixed
    }
}

impl PairMatcher for BuiltinMatcher {
    fn match_canonical(
        &self,
        canonical: &ScalarImage,
        _angle_deg: f64,
        _to_canonical: &AffineTransform2D,
    ) -> Result<MatchSet> {
        let moving = detect_keypoints(canonical, &self.detector)?;
        Ok(match_descriptors(&self.fixed, &moving, self.ratio))
    }
}

/// Externally computed matches, one set per candidate angle, with moving
/// coordinates in the unrotated moving frame.
#[derive(Debug, Clone, Default)]
pub struct ImportedPerAngle {
    sets: BTreeMap<i64, MatchSet>,
}

fn angle_key(deg: f64) -> i64 {
    (deg * 1000.0).round() as i64
}

impl ImportedPerAngle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, angle_deg: f64, matches: MatchSet) {
        self.sets.insert(angle_key(angle_deg), matches);
    }
}

impl PairMatcher for ImportedPerAngle {
    fn match_canonical(
        &self,
        canonical: &ScalarImage,
        angle_deg: f64,
        to_canonical: &AffineTransform2D,
    ) -> Result<MatchSet> {
        let set = self.sets.get(&angle_key(angle_deg)).ok_or_else(|| {
            Error::InvalidArgument(format!("no imported matches for angle {angle_deg}"))
        })?;
        Ok(set.map_moving(canonical.dims(), |x, y| to_canonical.apply(x, y)))
    }
}

#[derive(Debug, Clone)]
pub struct RotationSweepResult {
    pub best_angle: f64,
    /// RANSAC consensus size per candidate, in candidate order.
    pub per_angle_counts: Vec<(f64, usize)>,
    /// Winning matches with moving points in the unrotated moving frame.
    pub best_matches: MatchSet,
    /// The same matches in the canonical (rotated) frame.
    pub canonical_matches: MatchSet,
    /// Unrotated moving -> canonical frame for the winning angle.
    pub to_canonical: AffineTransform2D,
}

impl RotationSweepResult {
    pub fn count_for(&self, angle: f64) -> Option<usize> {
        self.per_angle_counts
            .iter()
            .find(|(a, _)| angle_key(*a) == angle_key(angle))
            .map(|(_, c)| *c)
    }
}

fn normalized(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r > 180.0 {
        r - 360.0
    } else {
        r
    }
}

/// Whether candidate `a` should win over `b` (count, then smaller absolute
/// angle, then positive before negative, then candidate order).
fn preferred(a: (f64, usize, usize), b: (f64, usize, usize)) -> bool {
    let (na, nb) = (normalized(a.0), normalized(b.0));
    if a.1 != b.1 {
        return a.1 > b.1;
    }
    if na.abs() != nb.abs() {
        return na.abs() < nb.abs();
    }
    if (na > 0.0) != (nb > 0.0) {
        return na > 0.0;
    }
    a.2 < b.2
}

struct AngleTrial {
    angle: f64,
    count: usize,
    matches: MatchSet,
    to_canonical: AffineTransform2D,
}

pub fn rotation_sweep(
    fixed: &ScalarImage,
    moving: &ScalarImage,
    angles: &[f64],
    matcher: &dyn PairMatcher,
    ransac: &RansacConfig,
    fill: f64,
) -> Result<RotationSweepResult> {
    if angles.is_empty() {
        return Err(Error::InvalidArgument("rotation sweep needs angles".into()));
    }
    let trials: Vec<AngleTrial> = angles
        .par_iter()
        .map(|&angle| {
            let (to_canonical, (cw, ch)) = canonical_rotation(moving.dims(), angle);
            let canonical = if angle_key(angle).rem_euclid(360_000) == 0 {
                moving.clone()
            } else {
                let back = to_canonical.invert().expect("rotations are invertible");
                warp(moving, &back, cw, ch, fill)
            };
            let matches = matcher
                .match_canonical(&canonical, angle, &to_canonical)
                .unwrap_or_else(|_| MatchSet::empty(fixed.dims(), canonical.dims()));
            let count = if matches.len() >= 3 {
                ransac_best(&matches, ransac)
                    .map(|o| o.inliers.len())
                    .unwrap_or(0)
            } else {
                0
            };
            AngleTrial {
                angle,
                count,
                matches,
                to_canonical,
            }
        })
        .collect();

    let mut best = 0;
    for i in 1..trials.len() {
        let (a, b) = (&trials[i], &trials[best]);
        if preferred((a.angle, a.count, i), (b.angle, b.count, best)) {
            best = i;
        }
    }
    let per_angle_counts: Vec<(f64, usize)> = trials.iter().map(|t| (t.angle, t.count)).collect();
    let winner = trials.into_iter().nth(best).expect("non-empty");
    if winner.count < MIN_SWEEP_INLIERS {
        return Err(Error::Unregistrable(format!(
            "no candidate angle reached {MIN_SWEEP_INLIERS} inliers; per-angle counts: {}",
            per_angle_counts
                .iter()
                .map(|(a, c)| format!("{a}:{c}"))
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }
    let back = winner.to_canonical.invert()?;
    let best_matches = winner
        .matches
        .map_moving(moving.dims(), |x, y| back.apply(x, y));
    Ok(RotationSweepResult {
        best_angle: winner.angle,
        per_angle_counts,
        best_matches,
        canonical_matches: winner.matches,
        to_canonical: winner.to_canonical,
    })
}
