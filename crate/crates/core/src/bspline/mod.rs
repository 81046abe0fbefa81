//! Cubic B-spline free-form deformation: the control grid, its local-NCC +
//! diffusion objective with analytic gradients, and the descent loop.

mod loss;
mod optimize;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::CoordinateMap;

pub use loss::{loss, loss_and_gradient, ncc_loss, reg_loss, LossBreakdown, LossEvaluator};
pub use optimize::{optimize, OptimizeOutcome, StopReason, TraceEntry};

/// Uniform cubic B-spline weights for the four control points spanning a
/// cell, at normalized offset `u` within the cell.
#[inline]
pub fn basis_cubic(u: f64) -> [f64; 4] {
    let u2 = u * u;
    let u3 = u2 * u;
    let v = 1.0 - u;
    [
        v * v * v / 6.0,
        (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
        (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
        u3 / 6.0,
    ]
}

// tolerance on the support boundary, in control-grid units
const SUPPORT_EPS: f64 = 1e-9;

/// Cubic B-spline displacement field over a regular control grid.
///
/// Control point `(i, j)` sits at `origin + (i * spacing_x, j * spacing_y)`.
/// A point is supported when it has a full 4x4 neighbourhood of control
/// points, i.e. its grid coordinate lies in `[1, n - 2]` along each axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BSplineField {
    nx: usize,
    ny: usize,
    spacing_x: f64,
    spacing_y: f64,
    origin_x: f64,
    origin_y: f64,
    /// Row-major (`j * nx + i`) displacement vectors in pixels.
    coeffs: Vec<[f64; 2]>,
}

/// Start index of the 4 spanning control points and the in-cell offset.
#[inline]
pub(crate) fn locate(t: f64, n: usize) -> Option<(usize, f64)> {
    let hi = (n - 2) as f64;
    if !(t >= 1.0 - SUPPORT_EPS && t <= hi + SUPPORT_EPS) {
        return None;
    }
    let t = t.clamp(1.0, hi);
    let cell = (t.floor() as usize).min(n - 3);
    Some((cell - 1, t - cell as f64))
}

impl BSplineField {
    pub fn new(
        nx: usize,
        ny: usize,
        spacing: (f64, f64),
        origin: (f64, f64),
        coeffs: Vec<[f64; 2]>,
    ) -> Result<Self> {
        if nx < 4 || ny < 4 {
            return Err(Error::InvalidArgument(format!(
                "cubic B-spline grid needs at least 4x4 control points, got {nx}x{ny}"
            )));
        }
        if !(spacing.0 > 0.0 && spacing.1 > 0.0 && spacing.0.is_finite() && spacing.1.is_finite())
        {
            return Err(Error::InvalidArgument(format!(
                "control spacing must be positive, got {spacing:?}"
            )));
        }
        if !(origin.0.is_finite() && origin.1.is_finite()) {
            return Err(Error::InvalidArgument("non-finite grid origin".into()));
        }
        if coeffs.len() != nx * ny {
            return Err(Error::InvalidArgument(format!(
                "expected {} coefficients, got {}",
                nx * ny,
                coeffs.len()
            )));
        }
        if coeffs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite coefficient".into()));
        }
        Ok(Self {
            nx,
            ny,
            spacing_x: spacing.0,
            spacing_y: spacing.1,
            origin_x: origin.0,
            origin_y: origin.1,
            coeffs,
        })
    }

    pub fn zeros(nx: usize, ny: usize, spacing: (f64, f64), origin: (f64, f64)) -> Result<Self> {
        Self::new(nx, ny, spacing, origin, vec![[0.0; 2]; nx * ny])
    }

    /// Zero field whose support covers `[0, width-1] x [0, height-1]`, with
    /// one ring of control points beyond each image edge.
    pub fn covering(width: usize, height: usize, spacing: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("zero-sized image".into()));
        }
        if !(spacing > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "control spacing must be positive, got {spacing}"
            )));
        }
        let cells = |n: usize| (((n - 1) as f64 / spacing) - 1e-9).ceil().max(1.0) as usize;
        Self::zeros(
            cells(width) + 3,
            cells(height) + 3,
            (spacing, spacing),
            (-spacing, -spacing),
        )
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn spacing(&self) -> (f64, f64) {
        (self.spacing_x, self.spacing_y)
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.origin_x, self.origin_y)
    }

    pub fn coeffs(&self) -> &[[f64; 2]] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [[f64; 2]] {
        &mut self.coeffs
    }

    pub fn coeff(&self, i: usize, j: usize) -> [f64; 2] {
        self.coeffs[j * self.nx + i]
    }

    pub fn set_coeff(&mut self, i: usize, j: usize, c: [f64; 2]) {
        self.coeffs[j * self.nx + i] = c;
    }

    /// Position of control point `(i, j)` in pixels.
    pub fn control_position(&self, i: usize, j: usize) -> (f64, f64) {
        (
            self.origin_x + i as f64 * self.spacing_x,
            self.origin_y + j as f64 * self.spacing_y,
        )
    }

    /// Same geometry, coefficients replaced.
    pub fn with_coeffs(&self, coeffs: Vec<[f64; 2]>) -> Result<Self> {
        Self::new(
            self.nx,
            self.ny,
            self.spacing(),
            self.origin(),
            coeffs,
        )
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| c[0] == 0.0 && c[1] == 0.0)
    }

    pub fn max_coefficient_norm(&self) -> f64 {
        self.coeffs
            .iter()
            .map(|c| c[0].hypot(c[1]))
            .fold(0.0, f64::max)
    }

    /// Supported rectangle `(x_min, y_min, x_max, y_max)` in pixels.
    pub fn support(&self) -> (f64, f64, f64, f64) {
        (
            self.origin_x + self.spacing_x,
            self.origin_y + self.spacing_y,
            self.origin_x + (self.nx - 2) as f64 * self.spacing_x,
            self.origin_y + (self.ny - 2) as f64 * self.spacing_y,
        )
    }

    pub fn covers(&self, width: usize, height: usize) -> bool {
        let (x0, y0, x1, y1) = self.support();
        let tol = 1e-9 * self.spacing_x.max(self.spacing_y);
        x0 <= tol && y0 <= tol && x1 >= (width - 1) as f64 - tol && y1 >= (height - 1) as f64 - tol
    }

    #[inline]
    pub(crate) fn grid_coords(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (x - self.origin_x) / self.spacing_x,
            (y - self.origin_y) / self.spacing_y,
        )
    }

    /// Displacement at a supported point.
    pub fn displacement(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let (tx, ty) = self.grid_coords(x, y);
        match (locate(tx, self.nx), locate(ty, self.ny)) {
            (Some(lx), Some(ly)) => Ok(self.eval_cell(lx, ly)),
            _ => Err(Error::OutsideSupport { x, y }),
        }
    }

    /// Displacement with the query clamped onto the supported rectangle, so
    /// points outside take the value at the nearest supported point.
    pub fn displacement_clamped(&self, x: f64, y: f64) -> (f64, f64) {
        let (tx, ty) = self.grid_coords(x, y);
        let clamp = |t: f64, n: usize| {
            if t.is_nan() {
                1.0
            } else {
                t.clamp(1.0, (n - 2) as f64)
            }
        };
        let lx = locate(clamp(tx, self.nx), self.nx).expect("clamped into support");
        let ly = locate(clamp(ty, self.ny), self.ny).expect("clamped into support");
        self.eval_cell(lx, ly)
    }

    #[inline]
    fn eval_cell(&self, (ix, u): (usize, f64), (iy, v): (usize, f64)) -> (f64, f64) {
        let bu = basis_cubic(u);
        let bv = basis_cubic(v);
        let (mut dx, mut dy) = (0.0, 0.0);
        for (n, wy) in bv.iter().enumerate() {
            let row = (iy + n) * self.nx + ix;
            for (m, wx) in bu.iter().enumerate() {
                let w = wx * wy;
                let c = self.coeffs[row + m];
                dx += w * c[0];
                dy += w * c[1];
            }
        }
        (dx, dy)
    }

    /// `T(x) = x + sum c_ij B_i(u) B_j(v)`.
    pub fn transform_point(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let (dx, dy) = self.displacement(x, y)?;
        Ok((x + dx, y + dy))
    }

    /// Numerical inverse of `T` by fixed-point iteration `p <- q - d(p)`.
    /// Converges when the field's Jacobian norm stays below one.
    pub fn inverse_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (mut px, mut py) = (x, y);
        for _ in 0..200 {
            let (dx, dy) = self.displacement_clamped(px, py);
            let (nx, ny) = (x - dx, y - dy);
            let step = (nx - px).abs().max((ny - py).abs());
            px = nx;
            py = ny;
            if step < 1e-11 {
                break;
            }
        }
        (px, py)
    }
}

impl CoordinateMap for BSplineField {
    fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = self.displacement_clamped(x, y);
        (x + dx, y + dy)
    }
}

/// Settings of the non-rigid stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// Regularization weight.
    pub lambda: f64,
    /// Step size; with gradient normalization this is the largest coefficient
    /// change per iteration in pixels.
    pub alpha: f64,
    pub max_iterations: usize,
    /// Stop when the total loss changes by less than this.
    pub epsilon: f64,
    /// NCC window half-width; windows are `2r+1` pixels square.
    pub ncc_window_radius: usize,
    /// Spacing of NCC window centres in pixels.
    pub sample_stride: usize,
    /// Divide the gradient by its max-norm before scaling by `alpha`.
    pub normalize_gradient: bool,
    /// Halve `alpha` on loss increase (at most `max_halvings` times per step).
    pub backtracking: bool,
    pub max_halvings: usize,
    /// Intensity used when sampling outside the moving image.
    pub fill: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            alpha: 0.5,
            max_iterations: 300,
            epsilon: 1e-6,
            ncc_window_radius: 7,
            sample_stride: 2,
            normalize_gradient: true,
            backtracking: true,
            max_halvings: 5,
            fill: crate::imaging::DEFAULT_FILL,
        }
    }
}

/// Default regularization weight for pixel-unit displacements.
pub const DEFAULT_LAMBDA: f64 = 1e-4;

impl OptimizerConfig {
    /// Settings with the descent helpers off: fixed `alpha`, raw gradient.
    pub fn plain(self) -> Self {
        Self {
            normalize_gradient: false,
            backtracking: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        if self.ncc_window_radius < 2 {
            return Err(Error::Config("ncc_window_radius must be >= 2".into()));
        }
        if self.sample_stride == 0 {
            return Err(Error::Config("sample_stride must be >= 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config("epsilon must be >= 0".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Cox-de Boor recursion for the uniform cubic B-spline on knots 0..=4,
    // evaluated at x = u + 3 - k for the k-th weight.
    fn cox_de_boor(i: i32, k: u32, x: f64) -> f64 {
        if k == 0 {
            return if (i as f64) <= x && x < (i + 1) as f64 { 1.0 } else { 0.0 };
        }
        let kf = k as f64;
        let a = (x - i as f64) / kf * cox_de_boor(i, k - 1, x);
        let b = ((i as f64 + kf + 1.0) - x) / kf * cox_de_boor(i + 1, k - 1, x);
        a + b
    }

    #[test]
    fn basis_matches_recursive_definition() {
        for &u in &[0.0, 0.1, 0.25, 0.5, 0.77, 0.999] {
            let w = basis_cubic(u);
            for (k, wk) in w.iter().enumerate() {
                let oracle = cox_de_boor(0, 3, u + 3.0 - k as f64);
                assert!((wk - oracle).abs() < 1e-14, "u={u} k={k}");
            }
        }
    }

    #[test]
    fn basis_examples() {
        assert_eq!(basis_cubic(0.0), [1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0, 0.0]);
        let h = basis_cubic(0.5);
        let want = [1.0 / 48.0, 23.0 / 48.0, 23.0 / 48.0, 1.0 / 48.0];
        for k in 0..4 {
            assert!((h[k] - want[k]).abs() < 1e-15);
        }
        for i in 0..100 {
            let u = i as f64 / 100.0;
            assert!((basis_cubic(u).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn covering_grid_supports_image() {
        let f = BSplineField::covering(256, 200, 32.0).unwrap();
        assert!(f.covers(256, 200));
        assert_eq!((f.nx(), f.ny()), (11, 10));
        assert!(f.displacement(0.0, 0.0).is_ok());
        assert!(f.displacement(255.0, 199.0).is_ok());
        assert!(matches!(
            f.displacement(-40.0, 5.0),
            Err(Error::OutsideSupport { .. })
        ));
        // exact multiple of the spacing still has a full cell
        let g = BSplineField::covering(65, 65, 16.0).unwrap();
        assert!(g.covers(65, 65));
        assert!(g.displacement(64.0, 64.0).is_ok());
    }

    #[test]
    fn single_coefficient_probe() {
        let mut f = BSplineField::covering(64, 64, 16.0).unwrap();
        f.set_coeff(2, 3, [2.0, -1.0]);
        // (20, 37): grid coords (2.25, 3.3125) -> cells 2 and 3
        let (x, y) = (20.0, 37.0);
        let bu = basis_cubic(0.25);
        let bv = basis_cubic(0.3125);
        // control i=2 is index 1 of the span starting at 1; j=3 is index 1 of the span starting at 2
        let w = bu[1] * bv[1];
        let (dx, dy) = f.displacement(x, y).unwrap();
        assert!((dx - 2.0 * w).abs() < 1e-14);
        assert!((dy + w).abs() < 1e-14);
    }

    #[test]
    fn zero_field_is_identity_and_constant_is_translation() {
        let mut f = BSplineField::covering(100, 80, 20.0).unwrap();
        assert_eq!(f.transform_point(37.3, 11.9).unwrap(), (37.3, 11.9));
        for c in f.coeffs_mut() {
            *c = [1.5, -2.25];
        }
        let (x, y) = f.transform_point(37.3, 11.9).unwrap();
        assert!((x - 38.8).abs() < 1e-12 && (y - 9.65).abs() < 1e-12);
    }

    #[test]
    fn inverse_point_round_trips() {
        let mut f = BSplineField::covering(128, 128, 32.0).unwrap();
        for (k, c) in f.coeffs_mut().iter_mut().enumerate() {
            *c = [((k * 7) % 5) as f64 - 2.0, ((k * 3) % 7) as f64 / 2.0 - 1.5];
        }
        for &(x, y) in &[(10.0, 20.0), (64.5, 77.25), (120.0, 3.0)] {
            let (qx, qy) = f.map_point(x, y);
            let (px, py) = f.inverse_point(qx, qy);
            assert!((px - x).abs() < 1e-8 && (py - y).abs() < 1e-8);
        }
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig::default().validate().is_ok());
        let bad = OptimizerConfig {
            ncc_window_radius: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = OptimizerConfig {
            alpha: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(BSplineField::zeros(3, 5, (1.0, 1.0), (0.0, 0.0)).is_err());
    }
}
