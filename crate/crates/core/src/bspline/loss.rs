//! Local NCC similarity and diffusion regularization of a B-spline field,
//! with gradients with respect to the control coefficients.
//!
//! NCC windows are centred on a strided lattice and must lie fully inside the
//! image. The NCC term is the negated mean over all such windows; windows
//! with a (near) zero-variance side contribute 0 but still count.
//!
//! The moving image is sampled with a one-pixel ring of the fill value
//! around it so that the objective stays continuous when warped positions
//! cross the image border.
//!
//! The regularizer is evaluated on the full pixel lattice:
//! `0.5 * (Nx^2 E[|u(x+1,y) - u(x,y)|^2] + Ny^2 E[|u(x,y+1) - u(x,y)|^2])`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{basis_cubic, locate, BSplineField, OptimizerConfig};
use crate::error::{Error, Result};
use crate::imaging::ScalarImage;

/// Windows whose variance sum falls below this contribute zero.
pub const DEGENERATE_VARIANCE: f64 = 1e-10;

const STRIP_ROWS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ncc_term: f64,
    pub reg_term: f64,
    /// Number of NCC windows evaluated (the mean's denominator).
    pub valid_pixel_count: usize,
}

impl LossBreakdown {
    /// The NCC term as a sum over windows rather than a mean.
    pub fn ncc_sum(&self) -> f64 {
        self.ncc_term * self.valid_pixel_count as f64
    }
}

#[derive(Clone, Copy)]
struct Span {
    start: usize,
    w: [f64; 4],
}

fn spans(n_pixels: usize, origin: f64, spacing: f64, n_ctrl: usize) -> Result<Vec<Span>> {
    (0..n_pixels)
        .map(|p| {
            let t = (p as f64 - origin) / spacing;
            locate(t, n_ctrl)
                .map(|(start, u)| Span {
                    start,
                    w: basis_cubic(u),
                })
                .ok_or(Error::OutsideSupport {
                    x: p as f64,
                    y: p as f64,
                })
        })
        .collect()
}

/// Caches everything about a (fixed, moving, grid geometry, config) problem
/// that does not depend on the coefficient values.
pub struct LossEvaluator<'a> {
    fixed: &'a ScalarImage,
    moving: &'a ScalarImage,
    cfg: OptimizerConfig,
    nx: usize,
    ny: usize,
    geometry: (f64, f64, f64, f64),
    cols: Vec<Span>,
    rows: Vec<Span>,
    centers_x: Vec<usize>,
    centers_y: Vec<usize>,
    fixed_box: Vec<f64>,
    fixed_sq_box: Vec<f64>,
}

struct Dense {
    /// displacement per pixel
    u: Vec<[f64; 2]>,
    /// warped moving intensity per pixel
    m: Vec<f64>,
    /// spatial gradient of the moving image at the warped position
    g: Vec<[f64; 2]>,
}

impl<'a> LossEvaluator<'a> {
    pub fn new(
        fixed: &'a ScalarImage,
        moving: &'a ScalarImage,
        field: &BSplineField,
        cfg: &OptimizerConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if fixed.dims() != moving.dims() {
            return Err(Error::InvalidArgument(format!(
                "fixed {:?} and moving {:?} differ in size",
                fixed.dims(),
                moving.dims()
            )));
        }
        let (w, h) = fixed.dims();
        let r = cfg.ncc_window_radius;
        let side = 2 * r + 1;
        if w < side || h < side {
            return Err(Error::NoValidWindows {
                width: w,
                height: h,
                window: side,
            });
        }
        if !field.covers(w, h) {
            let (x0, y0, _, _) = field.support();
            return Err(Error::OutsideSupport { x: x0, y: y0 });
        }
        let (sx, sy) = field.spacing();
        let (ox, oy) = field.origin();
        let cols = spans(w, ox, sx, field.nx())?;
        let rows = spans(h, oy, sy, field.ny())?;
        let stride = cfg.sample_stride;
        let centers_x: Vec<usize> = (r..w - r).step_by(stride).collect();
        let centers_y: Vec<usize> = (r..h - r).step_by(stride).collect();
        let fixed_sq: Vec<f64> = fixed.pixels().iter().map(|v| v * v).collect();
        Ok(Self {
            fixed,
            moving,
            cfg: cfg.clone(),
            nx: field.nx(),
            ny: field.ny(),
            geometry: (sx, sy, ox, oy),
            cols,
            rows,
            centers_x,
            centers_y,
            fixed_box: box_sum(fixed.pixels(), w, h, r),
            fixed_sq_box: box_sum(&fixed_sq, w, h, r),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.cfg
    }

    pub fn window_count(&self) -> usize {
        self.centers_x.len() * self.centers_y.len()
    }

    fn check_geometry(&self, field: &BSplineField) -> Result<()> {
        let (sx, sy) = field.spacing();
        let (ox, oy) = field.origin();
        if field.nx() != self.nx || field.ny() != self.ny || (sx, sy, ox, oy) != self.geometry {
            return Err(Error::InvalidArgument(
                "field geometry differs from the evaluator's".into(),
            ));
        }
        Ok(())
    }

    fn dense(&self, field: &BSplineField, with_gradient: bool) -> Dense {
        let (w, h) = self.fixed.dims();
        let coeffs = field.coeffs();
        let nx = self.nx;
        let fill = self.cfg.fill;
        let mut u = vec![[0.0; 2]; w * h];
        let mut m = vec![0.0; w * h];
        let mut g = if with_gradient {
            vec![[0.0; 2]; w * h]
        } else {
            Vec::new()
        };
        let row_work = |y: usize, u_row: &mut [[f64; 2]], m_row: &mut [f64], g_row: Option<&mut [[f64; 2]]>| {
            let ry = self.rows[y];
            let mut g_row = g_row;
            for x in 0..w {
                let cx = self.cols[x];
                let (mut dx, mut dy) = (0.0, 0.0);
                for (n, wy) in ry.w.iter().enumerate() {
                    let base = (ry.start + n) * nx + cx.start;
                    for (k, wx) in cx.w.iter().enumerate() {
                        let c = coeffs[base + k];
                        let wgt = wx * wy;
                        dx += wgt * c[0];
                        dy += wgt * c[1];
                    }
                }
                u_row[x] = [dx, dy];
                let (px, py) = (x as f64 + dx, y as f64 + dy);
                let (v, gx, gy) = self.moving.sample_padded_with_gradient(px, py, fill);
                m_row[x] = v;
                if let Some(gr) = g_row.as_deref_mut() {
                    gr[x] = [gx, gy];
                }
            }
        };
        if with_gradient {
            u.par_chunks_mut(w)
                .zip(m.par_chunks_mut(w))
                .zip(g.par_chunks_mut(w))
                .enumerate()
                .for_each(|(y, ((ur, mr), gr))| row_work(y, ur, mr, Some(gr)));
        } else {
            u.par_chunks_mut(w)
                .zip(m.par_chunks_mut(w))
                .enumerate()
                .for_each(|(y, (ur, mr))| row_work(y, ur, mr, None));
        }
        Dense { u, m, g }
    }

    pub fn evaluate(&self, field: &BSplineField) -> Result<LossBreakdown> {
        self.check_geometry(field)?;
        let dense = self.dense(field, false);
        let (ncc, _) = self.ncc(&dense, false);
        let reg = reg_from_dense(&dense.u, self.fixed.width(), self.fixed.height());
        Ok(self.breakdown(ncc, reg))
    }

    pub fn evaluate_with_gradient(
        &self,
        field: &BSplineField,
    ) -> Result<(LossBreakdown, Vec<[f64; 2]>)> {
        self.check_geometry(field)?;
        let (w, h) = self.fixed.dims();
        let dense = self.dense(field, true);
        let (ncc, adj_m) = self.ncc(&dense, true);
        let reg = reg_from_dense(&dense.u, w, h);
        let lambda = self.cfg.lambda;
        let adj_u = if lambda != 0.0 {
            reg_adjoint(&dense.u, w, h)
        } else {
            Vec::new()
        };

        // per-pixel adjoint of the displacement, scattered through the basis
        let strips: Vec<Vec<[f64; 2]>> = (0..h.div_ceil(STRIP_ROWS))
            .into_par_iter()
            .map(|s| {
                let mut grad = vec![[0.0; 2]; self.nx * self.ny];
                for y in s * STRIP_ROWS..((s + 1) * STRIP_ROWS).min(h) {
                    let ry = self.rows[y];
                    for x in 0..w {
                        let i = y * w + x;
                        let (mut vx, mut vy) = (0.0, 0.0);
                        if let Some(a) = adj_m.as_ref() {
                            vx += a[i] * dense.g[i][0];
                            vy += a[i] * dense.g[i][1];
                        }
                        if !adj_u.is_empty() {
                            vx += lambda * adj_u[i][0];
                            vy += lambda * adj_u[i][1];
                        }
                        if vx == 0.0 && vy == 0.0 {
                            continue;
                        }
                        let cx = self.cols[x];
                        for (n, wy) in ry.w.iter().enumerate() {
                            let base = (ry.start + n) * self.nx + cx.start;
                            for (k, wx) in cx.w.iter().enumerate() {
                                let wgt = wx * wy;
                                grad[base + k][0] += wgt * vx;
                                grad[base + k][1] += wgt * vy;
                            }
                        }
                    }
                }
                grad
            })
            .collect();
        let mut grad = vec![[0.0; 2]; self.nx * self.ny];
        for strip in strips {
            for (g, s) in grad.iter_mut().zip(strip) {
                g[0] += s[0];
                g[1] += s[1];
            }
        }
        Ok((self.breakdown(ncc, reg), grad))
    }

    fn breakdown(&self, ncc: f64, reg: f64) -> LossBreakdown {
        LossBreakdown {
            total: ncc + self.cfg.lambda * reg,
            ncc_term: ncc,
            reg_term: reg,
            valid_pixel_count: self.window_count(),
        }
    }

    /// NCC term and, optionally, its derivative w.r.t. each warped intensity.
    fn ncc(&self, dense: &Dense, with_adjoint: bool) -> (f64, Option<Vec<f64>>) {
        let (w, h) = self.fixed.dims();
        let r = self.cfg.ncc_window_radius;
        let n = ((2 * r + 1) * (2 * r + 1)) as f64;
        let f = self.fixed.pixels();
        let m = &dense.m;
        let mm: Vec<f64> = m.iter().map(|v| v * v).collect();
        let fm: Vec<f64> = f.iter().zip(m).map(|(a, b)| a * b).collect();
        let m_box = box_sum(m, w, h, r);
        let mm_box = box_sum(&mm, w, h, r);
        let fm_box = box_sum(&fm, w, h, r);

        let windows = self.window_count() as f64;
        let mut sum = 0.0;
        // impulse images for the adjoint, non-zero only at window centres
        let mut imp = if with_adjoint {
            vec![[0.0f64; 4]; w * h]
        } else {
            Vec::new()
        };
        for &cy in &self.centers_y {
            for &cx in &self.centers_x {
                let i = cy * w + cx;
                let (sf, sff) = (self.fixed_box[i], self.fixed_sq_box[i]);
                let (sm, smm, sfm) = (m_box[i], mm_box[i], fm_box[i]);
                let s1 = sff - sf * sf / n;
                let s2 = smm - sm * sm / n;
                if s1 < DEGENERATE_VARIANCE || s2 < DEGENERATE_VARIANCE {
                    continue;
                }
                let snum = sfm - sf * sm / n;
                let denom = (s1 * s2).sqrt();
                sum += snum / denom;
                if with_adjoint {
                    let a = -1.0 / (windows * denom);
                    let b = a * snum / s2;
                    imp[i] = [a, a * sf / n, b, b * sm / n];
                }
            }
        }
        let loss = -sum / windows;
        if !with_adjoint {
            return (loss, None);
        }
        let split = |k: usize| -> Vec<f64> { imp.iter().map(|v| v[k]).collect() };
        let a_box = box_sum(&split(0), w, h, r);
        let af_box = box_sum(&split(1), w, h, r);
        let b_box = box_sum(&split(2), w, h, r);
        let bm_box = box_sum(&split(3), w, h, r);
        let adj: Vec<f64> = (0..w * h)
            .map(|i| f[i] * a_box[i] - af_box[i] - m[i] * b_box[i] + bm_box[i])
            .collect();
        (loss, Some(adj))
    }
}

/// Square box sum of radius `r` at every pixel, zero outside the image.
pub(crate) fn box_sum(src: &[f64], w: usize, h: usize, r: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; w * h];
    tmp.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let s = &src[y * w..(y + 1) * w];
        for (x, out) in row.iter_mut().enumerate() {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            *out = s[lo..=hi].iter().sum();
        }
    });
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for (x, o) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for yy in lo..=hi {
                acc += tmp[yy * w + x];
            }
            *o = acc;
        }
    });
    out
}

fn reg_from_dense(u: &[[f64; 2]], w: usize, h: usize) -> f64 {
    let (nxf, nyf) = (w as f64, h as f64);
    let mut ex = 0.0;
    let mut ey = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let d = [u[i + 1][0] - u[i][0], u[i + 1][1] - u[i][1]];
                ex += d[0] * d[0] + d[1] * d[1];
            }
            if y + 1 < h {
                let d = [u[i + w][0] - u[i][0], u[i + w][1] - u[i][1]];
                ey += d[0] * d[0] + d[1] * d[1];
            }
        }
    }
    let cx = ((w - 1) * h) as f64;
    let cy = (w * (h - 1)) as f64;
    let tx = if cx > 0.0 { nxf * nxf * ex / cx } else { 0.0 };
    let ty = if cy > 0.0 { nyf * nyf * ey / cy } else { 0.0 };
    0.5 * (tx + ty)
}

/// Derivative of the regularizer w.r.t. the dense displacement.
fn reg_adjoint(u: &[[f64; 2]], w: usize, h: usize) -> Vec<[f64; 2]> {
    let (nxf, nyf) = (w as f64, h as f64);
    let cx = ((w - 1) * h) as f64;
    let cy = (w * (h - 1)) as f64;
    let kx = if cx > 0.0 { nxf * nxf / cx } else { 0.0 };
    let ky = if cy > 0.0 { nyf * nyf / cy } else { 0.0 };
    let mut adj = vec![[0.0; 2]; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for c in 0..2 {
                if x + 1 < w {
                    let d = kx * (u[i + 1][c] - u[i][c]);
                    adj[i + 1][c] += d;
                    adj[i][c] -= d;
                }
                if y + 1 < h {
                    let d = ky * (u[i + w][c] - u[i][c]);
                    adj[i + w][c] += d;
                    adj[i][c] -= d;
                }
            }
        }
    }
    adj
}

/// The NCC term of the objective.
pub fn ncc_loss(
    fixed: &ScalarImage,
    moving: &ScalarImage,
    field: &BSplineField,
    cfg: &OptimizerConfig,
) -> Result<f64> {
    Ok(loss(fixed, moving, field, cfg)?.ncc_term)
}

/// The regularization term (before weighting) on a `width x height` lattice.
pub fn reg_loss(field: &BSplineField, dims: (usize, usize)) -> Result<f64> {
    let (w, h) = dims;
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("zero-sized lattice".into()));
    }
    let mut u = vec![[0.0; 2]; w * h];
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = field.displacement(x as f64, y as f64)?;
            u[y * w + x] = [dx, dy];
        }
    }
    Ok(reg_from_dense(&u, w, h))
}

pub fn loss(
    fixed: &ScalarImage,
    moving: &ScalarImage,
    field: &BSplineField,
    cfg: &OptimizerConfig,
) -> Result<LossBreakdown> {
    LossEvaluator::new(fixed, moving, field, cfg)?.evaluate(field)
}

pub fn loss_and_gradient(
    fixed: &ScalarImage,
    moving: &ScalarImage,
    field: &BSplineField,
    cfg: &OptimizerConfig,
) -> Result<(LossBreakdown, Vec<[f64; 2]>)> {
    LossEvaluator::new(fixed, moving, field, cfg)?.evaluate_with_gradient(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn texture(w: usize, h: usize, seed: usize) -> ScalarImage {
        ScalarImage::from_fn(w, h, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            let s = seed as f64;
            0.5 + 0.2 * (0.31 * xf + 0.7 * s).sin() * (0.23 * yf - s).cos()
                + 0.15 * (0.17 * xf + 0.29 * yf + 1.3 * s).sin()
                + 0.1 * (0.05 * xf * yf / 8.0 + s).cos()
        })
    }

    fn faded(img: &ScalarImage) -> ScalarImage {
        let (w, h) = img.dims();
        let ramp = |p: usize, n: usize| ((p.min(n - 1 - p) as f64) / 8.0).min(1.0);
        ScalarImage::from_fn(w, h, |x, y| img.get(x, y) * ramp(x, w) * ramp(y, h))
    }

    // Direct per-window evaluation, independent of the box-sum path.
    fn brute_ncc(f: &ScalarImage, m: &ScalarImage, r: usize, stride: usize) -> f64 {
        let (w, h) = f.dims();
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut cy = r;
        while cy + r < h {
            let mut cx = r;
            while cx + r < w {
                let mut vals = Vec::new();
                for y in cy - r..=cy + r {
                    for x in cx - r..=cx + r {
                        vals.push((f.get(x, y), m.get(x, y)));
                    }
                }
                let n = vals.len() as f64;
                let mf = vals.iter().map(|v| v.0).sum::<f64>() / n;
                let mm = vals.iter().map(|v| v.1).sum::<f64>() / n;
                let num: f64 = vals.iter().map(|v| (v.0 - mf) * (v.1 - mm)).sum();
                let d1: f64 = vals.iter().map(|v| (v.0 - mf).powi(2)).sum();
                let d2: f64 = vals.iter().map(|v| (v.1 - mm).powi(2)).sum();
                if d1 >= DEGENERATE_VARIANCE && d2 >= DEGENERATE_VARIANCE {
                    sum += num / (d1.sqrt() * d2.sqrt());
                }
                count += 1;
                cx += stride;
            }
            cy += stride;
        }
        -sum / count as f64
    }

    #[test]
    fn ncc_matches_brute_force_window_loop() {
        let f = texture(48, 40, 1);
        let m = texture(48, 40, 2);
        let field = BSplineField::covering(48, 40, 16.0).unwrap();
        let cfg = OptimizerConfig::default();
        let fast = ncc_loss(&f, &m, &field, &cfg).unwrap();
        let slow = brute_ncc(&f, &m, cfg.ncc_window_radius, cfg.sample_stride);
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    }

    #[test]
    fn ncc_anchor_values() {
        let f = texture(64, 64, 3);
        let inv = ScalarImage::from_fn(64, 64, |x, y| 1.0 - f.get(x, y));
        let field = BSplineField::covering(64, 64, 16.0).unwrap();
        let cfg = OptimizerConfig::default();
        assert!((ncc_loss(&f, &f, &field, &cfg).unwrap() + 1.0).abs() < 1e-9);
        assert!((ncc_loss(&f, &inv, &field, &cfg).unwrap() - 1.0).abs() < 1e-9);
        let flat = ScalarImage::constant(64, 64, 0.3);
        assert_eq!(ncc_loss(&f, &flat, &field, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn no_valid_windows() {
        let f = texture(10, 10, 0);
        let field = BSplineField::covering(10, 10, 4.0).unwrap();
        assert!(matches!(
            ncc_loss(&f, &f, &field, &OptimizerConfig::default()),
            Err(Error::NoValidWindows { .. })
        ));
    }

    #[test]
    fn reg_examples() {
        let dims = (64, 48);
        let mut field = BSplineField::covering(64, 48, 16.0).unwrap();
        assert_eq!(reg_loss(&field, dims).unwrap(), 0.0);
        for c in field.coeffs_mut() {
            *c = [3.0, -1.0];
        }
        assert!(reg_loss(&field, dims).unwrap().abs() < 1e-20);
        // linear ramp u_x = x / Nx: cubic B-splines reproduce linear functions
        for j in 0..field.ny() {
            for i in 0..field.nx() {
                let (px, _) = field.control_position(i, j);
                field.set_coeff(i, j, [px / 64.0, 0.0]);
            }
        }
        assert!((reg_loss(&field, dims).unwrap() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn box_sum_matches_naive() {
        let src: Vec<f64> = (0..35).map(|i| (i * 7 % 11) as f64).collect();
        let out = box_sum(&src, 7, 5, 2);
        for y in 0..5usize {
            for x in 0..7usize {
                let mut s = 0.0;
                for yy in y.saturating_sub(2)..=(y + 2).min(4) {
                    for xx in x.saturating_sub(2)..=(x + 2).min(6) {
                        s += src[yy * 7 + xx];
                    }
                }
                assert_eq!(out[y * 7 + x], s);
            }
        }
    }

    #[test]
    fn self_similarity_gradient_vanishes() {
        let f = texture(64, 64, 5);
        let field = BSplineField::covering(64, 64, 16.0).unwrap();
        let cfg = OptimizerConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let (_, g) = loss_and_gradient(&f, &f, &field, &cfg).unwrap();
        assert!(g.iter().flatten().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn constant_images_zero_field_reg_gradient_is_zero() {
        let f = ScalarImage::constant(48, 48, 0.5);
        let field = BSplineField::covering(48, 48, 16.0).unwrap();
        let (l, g) = loss_and_gradient(&f, &f, &field, &OptimizerConfig::default()).unwrap();
        assert_eq!(l.total, 0.0);
        assert!(g.iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        // faded to the fill value at the border so the objective is continuous
        let f = faded(&texture(64, 64, 7));
        let m = faded(&texture(64, 64, 8));
        let mut field = BSplineField::covering(64, 64, 16.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for c in field.coeffs_mut() {
            *c = [rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)];
        }
        let cfg = OptimizerConfig {
            lambda: 1e-3,
            ..Default::default()
        };
        let eval = LossEvaluator::new(&f, &m, &field, &cfg).unwrap();
        let (_, g) = eval.evaluate_with_gradient(&field).unwrap();
        // small step: bilinear sampling has kinks at pixel lines
        let h = 1e-5;
        let scale = g.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        for k in 0..field.coeffs().len() {
            for c in 0..2 {
                let mut p = field.clone();
                p.coeffs_mut()[k][c] += h;
                let mut q = field.clone();
                q.coeffs_mut()[k][c] -= h;
                let fd = (eval.evaluate(&p).unwrap().total - eval.evaluate(&q).unwrap().total) / (2.0 * h);
                let err = (fd - g[k][c]).abs() / fd.abs().max(g[k][c].abs()).max(1e-3 * scale);
                assert!(err < 1e-4, "coeff {k}/{c}: fd {fd} analytic {}", g[k][c]);
            }
        }
    }
}
