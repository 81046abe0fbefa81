use serde::{Deserialize, Serialize};

use super::{BSplineField, LossBreakdown, LossEvaluator, OptimizerConfig};
use crate::error::{Error, Result};
use crate::imaging::ScalarImage;

/// One row of the loss trace. Row 0 is the initial field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub total: f64,
    pub ncc: f64,
    pub reg: f64,
    /// Step size actually applied to reach this iterate (0 for row 0).
    pub alpha_used: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Converged,
    MaxIterations,
    /// Backtracking ran out of halvings without finding a decrease.
    StepExhausted,
    /// The gradient vanished.
    Stationary,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub field: BSplineField,
    pub initial: LossBreakdown,
    pub best: LossBreakdown,
    pub trace: Vec<TraceEntry>,
    pub stop: StopReason,
}

impl OptimizeOutcome {
    pub fn iterations(&self) -> usize {
        self.trace.len() - 1
    }
}

fn entry(iteration: usize, l: &LossBreakdown, alpha_used: f64) -> TraceEntry {
    TraceEntry {
        iteration,
        total: l.total,
        ncc: l.ncc_term,
        reg: l.reg_term,
        alpha_used,
    }
}

fn clamp_norm(coeffs: &mut [[f64; 2]], bound: f64) {
    for c in coeffs {
        let n = c[0].hypot(c[1]);
        if n > bound {
            let k = bound / n;
            c[0] *= k;
            c[1] *= k;
        }
    }
}

/// Gradient descent on the control coefficients, starting at `init`.
pub fn optimize(
    fixed: &ScalarImage,
    moving: &ScalarImage,
    init: &BSplineField,
    cfg: &OptimizerConfig,
) -> Result<OptimizeOutcome> {
    let eval = LossEvaluator::new(fixed, moving, init, cfg)?;
    let bound = 0.25 * fixed.width().min(fixed.height()) as f64;

    let mut current = init.clone();
    clamp_norm(current.coeffs_mut(), bound);
    let (mut cur_loss, mut grad) = eval.evaluate_with_gradient(&current)?;
    if !cur_loss.total.is_finite() {
        return Err(Error::NonFiniteLoss { iteration: 0 });
    }
    let initial = cur_loss;
    let mut trace = vec![entry(0, &cur_loss, 0.0)];
    let mut best = (current.clone(), cur_loss);
    let mut alpha = cfg.alpha;
    let mut stop = StopReason::MaxIterations;

    'outer: for it in 1..=cfg.max_iterations {
        let scale = if cfg.normalize_gradient {
            let max = grad.iter().map(|g| g[0].abs().max(g[1].abs())).fold(0.0, f64::max);
            if !(max > 0.0) {
                stop = StopReason::Stationary;
                break;
            }
            1.0 / max
        } else {
            1.0
        };

        let mut halvings = 0;
        let (next, next_loss, next_grad) = loop {
            let mut coeffs = current.coeffs().to_vec();
            for (c, g) in coeffs.iter_mut().zip(&grad) {
                c[0] -= alpha * scale * g[0];
                c[1] -= alpha * scale * g[1];
            }
            clamp_norm(&mut coeffs, bound);
            if coeffs.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { iteration: it });
            }
            let cand = current.with_coeffs(coeffs)?;
            let (l, g) = eval.evaluate_with_gradient(&cand)?;
            if !l.total.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: it });
            }
            if !cfg.backtracking || l.total <= cur_loss.total {
                break (cand, l, g);
            }
            if halvings == cfg.max_halvings {
                stop = StopReason::StepExhausted;
                break 'outer;
            }
            halvings += 1;
            alpha *= 0.5;
        };

        let delta = (next_loss.total - cur_loss.total).abs();
        trace.push(entry(it, &next_loss, alpha));
        current = next;
        cur_loss = next_loss;
        grad = next_grad;
        if cur_loss.total < best.1.total {
            best = (current.clone(), cur_loss);
        }
        if delta < cfg.epsilon {
            stop = StopReason::Converged;
            break;
        }
    }

    Ok(OptimizeOutcome {
        field: best.0,
        initial,
        best: best.1,
        trace,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::warp;

    fn texture(w: usize, h: usize) -> ScalarImage {
        ScalarImage::from_fn(w, h, |x, y| {
            let (xf, yf) = (x as f64, y as f64);
            0.5 + 0.18 * (0.21 * xf).sin() * (0.17 * yf).cos()
                + 0.12 * (0.09 * xf + 0.13 * yf).sin()
                + 0.1 * (0.31 * yf - 0.05 * xf).cos()
        })
    }

    #[test]
    fn identical_images_stay_at_identity() {
        let f = texture(64, 64);
        let field = BSplineField::covering(64, 64, 16.0).unwrap();
        let out = optimize(&f, &f, &field, &OptimizerConfig::default()).unwrap();
        assert!(out.field.max_coefficient_norm() < 1e-3);
        assert!((out.best.total + 1.0).abs() < 1e-4);
    }

    #[test]
    fn single_iteration_trace() {
        let f = texture(64, 64);
        let m = warp(&f, &crate::affine::AffineTransform2D::translation(1.0, 0.5), 64, 64, 0.0);
        let field = BSplineField::covering(64, 64, 16.0).unwrap();
        let cfg = OptimizerConfig {
            max_iterations: 1,
            lambda: 1e-6,
            alpha: 0.1,
            ..Default::default()
        };
        let out = optimize(&f, &m, &field, &cfg).unwrap();
        assert_eq!(out.trace.len(), 2);
        assert_eq!(out.trace[0].iteration, 0);
        assert!(out.trace[1].total <= out.trace[0].total);
    }

    #[test]
    fn trace_is_non_increasing_with_backtracking() {
        let f = texture(64, 64);
        let m = warp(&f, &crate::affine::AffineTransform2D::translation(-1.5, 1.0), 64, 64, 0.0);
        let field = BSplineField::covering(64, 64, 16.0).unwrap();
        let cfg = OptimizerConfig {
            max_iterations: 40,
            lambda: 1e-6,
            ..Default::default()
        };
        let out = optimize(&f, &m, &field, &cfg).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1].total <= w[0].total);
        }
        assert!(out.best.total <= out.initial.total);
    }

    #[test]
    fn recovers_a_smooth_synthetic_field() {
        let cfg = crate::synth::SynthConfig {
            num_slices: 2,
            dims: (128, 128),
            noise_sigma: 0.0,
            ..Default::default()
        };
        let (slices, _) = crate::synth::generate_sequence(&cfg).unwrap();
        let fixed = &slices[0];
        let mut truth = BSplineField::covering(128, 128, 32.0).unwrap();
        for j in 0..truth.ny() {
            for i in 0..truth.nx() {
                let (a, b) = (i as f64 * 0.8, j as f64 * 0.6);
                truth.set_coeff(i, j, [5.0 * (a + b).sin(), 5.0 * (a - 0.5 * b).cos()]);
            }
        }
        let moving = warp(fixed, &crate::transform::Transform::BSpline(truth.clone()).inverse().unwrap(), 128, 128, 0.0);
        let init = BSplineField::covering(128, 128, 16.0).unwrap();
        let out = optimize(fixed, &moving, &init, &OptimizerConfig::default()).unwrap();
        let (mut before, mut after, mut n) = (0.0, 0.0, 0.0);
        for y in (24..=104).step_by(8) {
            for x in (24..=104).step_by(8) {
                let (px, py) = (x as f64, y as f64);
                let (tx, ty) = truth.transform_point(px, py).unwrap();
                let (ex, ey) = out.field.transform_point(px, py).unwrap();
                before += (tx - px).hypot(ty - py);
                after += (tx - ex).hypot(ty - ey);
                n += 1.0;
            }
        }
        assert!(before / n > 3.0, "deformation too small to test: {}", before / n);
        assert!(after / n < 1.0, "mean error {} px (from {})", after / n, before / n);
    }
}
