//! Composable coordinate maps built from the affine and B-spline models.

use serde::{Deserialize, Serialize};

use crate::affine::AffineTransform2D;
use crate::bspline::BSplineField;
use crate::error::Result;
use crate::imaging::CoordinateMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Transform {
    Identity,
    Affine(AffineTransform2D),
    /// `p -> p + u(p)`.
    BSpline(BSplineField),
    /// Applied first element first: `Chain[a, b]` maps `p` to `b(a(p))`.
    Chain(Vec<Transform>),
    /// Evaluated numerically for B-spline members.
    Inverse(Box<Transform>),
}

impl Transform {
    pub fn chain(parts: impl IntoIterator<Item = Transform>) -> Self {
        let mut flat = Vec::new();
        for p in parts {
            match p {
                Transform::Identity => {}
                Transform::Chain(inner) => flat.extend(inner),
                other => flat.push(other),
            }
        }
        match flat.len() {
            0 => Transform::Identity,
            1 => flat.pop().unwrap(),
            _ => Transform::Chain(flat),
        }
    }

    /// Structural inverse. Affine parts are inverted exactly; B-spline
    /// parts are wrapped for numerical inversion at evaluation time.
    pub fn inverse(&self) -> Result<Self> {
        Ok(match self {
            Transform::Identity => Transform::Identity,
            Transform::Affine(a) => Transform::Affine(a.invert()?),
            Transform::BSpline(_) => Transform::Inverse(Box::new(self.clone())),
            Transform::Chain(parts) => {
                let mut inv = Vec::with_capacity(parts.len());
                for p in parts.iter().rev() {
                    inv.push(p.inverse()?);
                }
                Transform::chain(inv)
            }
            Transform::Inverse(inner) => (**inner).clone(),
        })
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Transform::Identity => (x, y),
            Transform::Affine(a) => a.apply(x, y),
            Transform::BSpline(f) => f.map_point(x, y),
            Transform::Chain(parts) => parts.iter().fold((x, y), |(px, py), t| t.apply(px, py)),
            Transform::Inverse(inner) => inner.apply_inverse(x, y),
        }
    }

    fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Transform::Identity => (x, y),
            Transform::Affine(a) => match a.invert() {
                Ok(inv) => inv.apply(x, y),
                Err(_) => (f64::NAN, f64::NAN),
            },
            Transform::BSpline(f) => f.inverse_point(x, y),
            Transform::Chain(parts) => parts
                .iter()
                .rev()
                .fold((x, y), |(px, py), t| t.apply_inverse(px, py)),
            Transform::Inverse(inner) => inner.apply(x, y),
        }
    }

    /// Collapses to a single affine when no B-spline part is involved.
    pub fn as_affine(&self) -> Option<AffineTransform2D> {
        match self {
            Transform::Identity => Some(AffineTransform2D::identity()),
            Transform::Affine(a) => Some(*a),
            Transform::BSpline(_) => None,
            Transform::Chain(parts) => parts.iter().try_fold(AffineTransform2D::identity(), |acc, p| {
                p.as_affine().map(|a| AffineTransform2D::compose(&a, &acc))
            }),
            Transform::Inverse(inner) => inner.as_affine().and_then(|a| a.invert().ok()),
        }
    }
}

impl CoordinateMap for Transform {
    fn map_point(&self, x: f64, y: f64) -> (f64, f64) {
        self.apply(x, y)
    }
}
