//! Seeded synthetic serial-section sequences with exact ground truth.
//!
//! Slice 0 is the reference. Every other slice `t` is the (slowly drifting)
//! base texture seen through a true map `F_t = A_t . D_t` from reference
//! coordinates to slice coordinates, where `D_t` is a cubic B-spline field
//! and `A_t` a small affine about the image centre. Pixels are rendered by
//! sampling the continuous texture at `F_t^-1(y)`, so there is no
//! interpolation error in the ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::affine::AffineTransform2D;
use crate::bspline::{basis_cubic, BSplineField};
use crate::error::{Error, Result};
use crate::imaging::ScalarImage;
use crate::metrics::{Landmark, LandmarkSet};
use crate::transform::Transform;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineJitter {
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    pub max_log_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_slices: usize,
    pub dims: (usize, usize),
    /// Blob size of the coarsest texture octave, in pixels.
    pub texture_scale: f64,
    pub affine_jitter: AffineJitter,
    /// Largest control-point displacement of the true field, in pixels.
    pub deform_amplitude: f64,
    pub deform_spacing: f64,
    pub noise_sigma: f64,
    /// Per-slice structural change relative to the reference.
    pub drift: f64,
    pub landmark_grid: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_slices: 10,
            dims: (256, 256),
            texture_scale: 12.0,
            affine_jitter: AffineJitter {
                max_rotation_deg: 5.0,
                max_translation: 8.0,
                max_log_scale: 0.03,
            },
            deform_amplitude: 6.0,
            deform_spacing: 64.0,
            noise_sigma: 0.01,
            drift: 0.02,
            landmark_grid: (8, 8),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_slices < 2 {
            return Err(Error::Config("num_slices must be >= 2".into()));
        }
        if self.dims.0 < 32 || self.dims.1 < 32 {
            return Err(Error::Config("synthetic slices must be at least 32x32".into()));
        }
        if !(self.texture_scale > 0.0) {
            return Err(Error::Config("texture_scale must be > 0".into()));
        }
        if !(self.deform_spacing > 0.0) || !(self.deform_amplitude >= 0.0) {
            return Err(Error::Config("deformation spacing must be > 0 and amplitude >= 0".into()));
        }
        if self.deform_amplitude > self.deform_spacing / 2.0 {
            return Err(Error::Config(format!(
                "deform_amplitude {} exceeds half the deform_spacing {}",
                self.deform_amplitude, self.deform_spacing
            )));
        }
        let j = &self.affine_jitter;
        if !(j.max_rotation_deg >= 0.0 && j.max_translation >= 0.0 && j.max_log_scale >= 0.0) {
            return Err(Error::Config("affine jitter bounds must be >= 0".into()));
        }
        if !(self.noise_sigma >= 0.0) || !(self.drift >= 0.0) {
            return Err(Error::Config("noise_sigma and drift must be >= 0".into()));
        }
        if self.landmark_grid.0 == 0 || self.landmark_grid.1 == 0 {
            return Err(Error::Config("landmark grid must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub slice_ids: Vec<String>,
    /// Reference coordinates to slice coordinates, per slice.
    pub maps: Vec<Transform>,
    pub landmarks: Vec<LandmarkSet>,
}

pub fn slice_id(t: usize) -> String {
    format!("slice_{t:03}")
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random lattice values blended by cubic B-splines.
struct NoiseLayer {
    origin: f64,
    spacing: f64,
    n: usize,
    values: Vec<f64>,
}

impl NoiseLayer {
    fn new(rng: &mut ChaCha8Rng, extent: f64, margin: f64, spacing: f64) -> Self {
        let n = ((extent + 2.0 * margin) / spacing).ceil() as usize + 4;
        let normal = Normal::new(0.0, 1.0).unwrap();
        let values = (0..n * n).map(|_| normal.sample(rng)).collect();
        Self {
            origin: -margin - spacing,
            spacing,
            n,
            values,
        }
    }

    fn eval(&self, x: f64, y: f64) -> f64 {
        let hi = (self.n - 3) as f64 - 1e-9;
        let tx = ((x - self.origin) / self.spacing).clamp(1.0, hi);
        let ty = ((y - self.origin) / self.spacing).clamp(1.0, hi);
        let (cx, cy) = (tx.floor(), ty.floor());
        let bu = basis_cubic(tx - cx);
        let bv = basis_cubic(ty - cy);
        let (ix, iy) = (cx as usize - 1, cy as usize - 1);
        let mut acc = 0.0;
        for (j, wy) in bv.iter().enumerate() {
            let row = (iy + j) * self.n + ix;
            for (i, wx) in bu.iter().enumerate() {
                acc += wx * wy * self.values[row + i];
            }
        }
        acc
    }
}

/// Band-limited random texture over the plane.
struct Texture {
    octaves: Vec<(f64, NoiseLayer)>,
    drift: NoiseLayer,
    gain: f64,
}

impl Texture {
    fn new(cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1));
        let extent = cfg.dims.0.max(cfg.dims.1) as f64;
        let margin = 0.25 * extent + 4.0 * cfg.texture_scale;
        let octaves = (0..3)
            .map(|o| {
                let s = cfg.texture_scale / (1u32 << o) as f64;
                let amp = 0.5f64.powi(o);
                (amp, NoiseLayer::new(&mut rng, extent, margin, s.max(2.0)))
            })
            .collect();
        let drift = NoiseLayer::new(&mut rng, extent, margin, cfg.texture_scale);
        // cubic blending of unit-variance lattice values has a standard
        // deviation of about 0.6 per octave
        let gain = 1.6 / (0.6 * (1.0f64 + 0.25 + 0.0625).sqrt());
        Self {
            octaves,
            drift,
            gain,
        }
    }

    fn eval(&self, x: f64, y: f64, drift_weight: f64) -> f64 {
        let mut v: f64 = self.octaves.iter().map(|(a, l)| a * l.eval(x, y)).sum();
        v += drift_weight * self.drift.eval(x, y);
        0.5 + 0.4 * (self.gain * v).tanh()
    }
}

fn true_map(cfg: &SynthConfig, t: usize) -> Result<Transform> {
    if t == 0 {
        return Ok(Transform::Identity);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 1000 + t as u64));
    let j = &cfg.affine_jitter;
    let (w, h) = cfg.dims;
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    let sym = |rng: &mut ChaCha8Rng, b: f64| if b > 0.0 { rng.random_range(-b..=b) } else { 0.0 };
    let deg = sym(&mut rng, j.max_rotation_deg);
    let s = sym(&mut rng, j.max_log_scale).exp();
    let (tx, ty) = (sym(&mut rng, j.max_translation), sym(&mut rng, j.max_translation));
    let about_centre = AffineTransform2D::compose(
        &AffineTransform2D::rotation_about(deg, cx, cy),
        &AffineTransform2D::compose(
            &AffineTransform2D::translation(cx, cy),
            &AffineTransform2D::compose(
                &AffineTransform2D::scale(s),
                &AffineTransform2D::translation(-cx, -cy),
            ),
        ),
    );
    let affine = AffineTransform2D::compose(&AffineTransform2D::translation(tx, ty), &about_centre);

    let mut field = BSplineField::covering(w, h, cfg.deform_spacing)?;
    let a = cfg.deform_amplitude;
    for c in field.coeffs_mut() {
        let v = [sym(&mut rng, a), sym(&mut rng, a)];
        let n = v[0].hypot(v[1]);
        *c = if n > a { [v[0] * a / n, v[1] * a / n] } else { v };
    }
    Ok(Transform::chain([
        Transform::BSpline(field),
        Transform::Affine(affine),
    ]))
}

fn reference_landmarks(cfg: &SynthConfig) -> Vec<(f64, f64)> {
    let (w, h) = cfg.dims;
    let (gx, gy) = cfg.landmark_grid;
    let axis = |n: usize, size: usize| -> Vec<f64> {
        let (lo, hi) = (0.15 * (size - 1) as f64, 0.85 * (size - 1) as f64);
        if n == 1 {
            return vec![(lo + hi) / 2.0];
        }
        (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
    };
    let (xs, ys) = (axis(gx, w), axis(gy, h));
    ys.iter().flat_map(|&y| xs.iter().map(move |&x| (x, y))).collect()
}

pub fn generate_sequence(cfg: &SynthConfig) -> Result<(Vec<ScalarImage>, GroundTruth)> {
    cfg.validate()?;
    let texture = Texture::new(cfg);
    let maps: Vec<Transform> = (0..cfg.num_slices).map(|t| true_map(cfg, t)).collect::<Result<_>>()?;
    let (w, h) = cfg.dims;

    let slices: Vec<ScalarImage> = (0..cfg.num_slices)
        .into_par_iter()
        .map(|t| -> Result<ScalarImage> {
            let inv = maps[t].inverse()?;
            let drift = cfg.drift * t as f64;
            let clean = ScalarImage::from_fn(w, h, |x, y| {
                let (rx, ry) = inv.apply(x as f64, y as f64);
                texture.eval(rx, ry, drift)
            });
            if cfg.noise_sigma == 0.0 {
                return Ok(clean);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, 5000 + t as u64));
            let normal = Normal::new(0.0, cfg.noise_sigma)
                .map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
            let pixels = clean
                .pixels()
                .iter()
                .map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 1.0))
                .collect();
            ScalarImage::new(w, h, pixels)
        })
        .collect::<Result<_>>()?;

    let reference = reference_landmarks(cfg);
    let slice_ids: Vec<String> = (0..cfg.num_slices).map(slice_id).collect();
    let landmarks = maps
        .iter()
        .zip(&slice_ids)
        .map(|(m, id)| {
            let points = reference
                .iter()
                .enumerate()
                .map(|(k, &(x, y))| {
                    let (px, py) = m.apply(x, y);
                    Landmark {
                        id: format!("L{k:03}"),
                        x: px,
                        y: py,
                    }
                })
                .collect();
            LandmarkSet::new(id.clone(), points)
        })
        .collect::<Result<_>>()?;

    Ok((
        slices,
        GroundTruth {
            slice_ids,
            maps,
            landmarks,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Degradation {
    pub tear_count: usize,
    pub fold_count: usize,
    /// Relative illumination change from the left to the right edge.
    pub illum_gradient: f64,
    pub seed: u64,
}

// distance from p to the segment ab
fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p.0 - a.0 - t * dx).hypot(p.1 - a.1 - t * dy)
}

/// Sectioning artefacts: dark tear polylines, high-contrast fold bands and
/// a horizontal illumination ramp. Each tear is confined to its own
/// horizontal band so tears never touch.
pub fn degrade(slice: &ScalarImage, d: &Degradation) -> ScalarImage {
    let (w, h) = slice.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(d.seed, 77));
    let mut px = slice.pixels().to_vec();
    let (wf, hf) = (w as f64, h as f64);

    for _ in 0..d.fold_count {
        let x0 = rng.random_range(0.1..0.9) * wf;
        let slope = rng.random_range(-0.3..0.3);
        let half = (0.02 * wf).max(1.5);
        let inside = |x: usize, y: usize| ((x as f64 - (x0 + slope * y as f64)).abs()) <= half;
        let (mut sum, mut n) = (0.0, 0usize);
        for y in 0..h {
            for x in 0..w {
                if inside(x, y) {
                    sum += px[y * w + x];
                    n += 1;
                }
            }
        }
        if n == 0 {
            continue;
        }
        let mean = sum / n as f64;
        for y in 0..h {
            for x in 0..w {
                if inside(x, y) {
                    let v = &mut px[y * w + x];
                    *v = (mean + 2.0 * (*v - mean)).clamp(0.0, 1.0);
                }
            }
        }
    }

    if d.tear_count > 0 {
        let band = hf / d.tear_count as f64;
        for k in 0..d.tear_count {
            let (lo, hi) = (k as f64 * band + 0.3 * band, k as f64 * band + 0.7 * band);
            let verts: Vec<(f64, f64)> = (0..5)
                .map(|v| {
                    let x = wf * (0.1 + 0.8 * v as f64 / 4.0) + rng.random_range(-0.03..0.03) * wf;
                    (x, rng.random_range(lo..=hi))
                })
                .collect();
            let (ylo, yhi) = ((lo - 2.0).max(0.0) as usize, ((hi + 2.0) as usize).min(h - 1));
            for y in ylo..=yhi {
                for x in 0..w {
                    let p = (x as f64, y as f64);
                    let near = verts.windows(2).any(|s| segment_distance(p, s[0], s[1]) <= 1.0);
                    if near {
                        px[y * w + x] *= 0.05;
                    }
                }
            }
        }
    }

    if d.illum_gradient != 0.0 {
        for y in 0..h {
            for x in 0..w {
                let f = 1.0 + d.illum_gradient * (x as f64 / (wf - 1.0).max(1.0) - 0.5);
                let v = &mut px[y * w + x];
                *v = (*v * f).clamp(0.0, 1.0);
            }
        }
    }
    ScalarImage::new(w, h, px).expect("values clamped into range")
}
