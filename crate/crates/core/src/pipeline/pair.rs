use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PipelineConfig;
use crate::affine::{ransac_affine, AffineTransform2D};
use crate::bspline::{optimize, BSplineField, LossEvaluator, TraceEntry};
use crate::error::{Error, Result};
use crate::imaging::{warp, ScalarImage};
use crate::matching::{rotation_sweep, BuiltinMatcher, MatchSet};
use crate::transform::Transform;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairStatus {
    Ok,
    AffineOnly,
    Unregistrable,
}

impl PairStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            PairStatus::Ok => "ok",
            PairStatus::AffineOnly => "affine-only",
            PairStatus::Unregistrable => "unregistrable",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairRegistration {
    pub fixed_id: String,
    pub moving_id: String,
    pub fixed_dims: (usize, usize),
    pub moving_dims: (usize, usize),
    /// Winning sweep angle; 0 when matches were imported.
    pub rotation_deg: f64,
    /// Moving -> fixed, with the sweep rotation folded in.
    pub affine: AffineTransform2D,
    /// Fixed frame -> affine-prewarped moving frame.
    pub field: Option<BSplineField>,
    pub trace: Vec<TraceEntry>,
    pub inlier_count: usize,
    pub per_angle_counts: Vec<(f64, usize)>,
    /// NCC term with the zero field and with the shipped field.
    pub ncc_affine: Option<f64>,
    pub ncc_final: Option<f64>,
    pub status: PairStatus,
    pub seed: u64,
    pub diagnostic: Option<String>,
}

impl PairRegistration {
    pub fn unregistrable(
        fixed_id: &str,
        moving_id: &str,
        fixed_dims: (usize, usize),
        moving_dims: (usize, usize),
        seed: u64,
        diagnostic: String,
    ) -> Self {
        Self {
            fixed_id: fixed_id.into(),
            moving_id: moving_id.into(),
            fixed_dims,
            moving_dims,
            rotation_deg: 0.0,
            affine: AffineTransform2D::identity(),
            field: None,
            trace: Vec::new(),
            inlier_count: 0,
            per_angle_counts: Vec::new(),
            ncc_affine: None,
            ncc_final: None,
            status: PairStatus::Unregistrable,
            seed,
            diagnostic: Some(diagnostic),
        }
    }

    /// Fixed-frame coordinates to moving-frame coordinates:
    /// `p -> A^-1 (p + u(p))`.
    pub fn fixed_to_moving(&self) -> Result<Transform> {
        if self.status == PairStatus::Unregistrable {
            return Err(Error::Unregistrable(format!(
                "{} -> {} has no transform",
                self.fixed_id, self.moving_id
            )));
        }
        let inv = Transform::Affine(self.affine.invert()?);
        Ok(match &self.field {
            Some(f) => Transform::chain([Transform::BSpline(f.clone()), inv]),
            None => inv,
        })
    }

    pub fn stem(&self) -> String {
        pair_stem(&self.fixed_id, &self.moving_id)
    }
}

pub fn pair_stem(fixed_id: &str, moving_id: &str) -> String {
    format!("{fixed_id}__{moving_id}")
}

/// Rotation sweep (or imported matches), RANSAC affine, affine prewarp and
/// B-spline refinement of one pair.
pub fn register_pair(
    fixed_id: &str,
    moving_id: &str,
    fixed: &ScalarImage,
    moving: &ScalarImage,
    cfg: &PipelineConfig,
    external_matches: Option<&MatchSet>,
) -> Result<PairRegistration> {
    cfg.validate()?;
    let fill = cfg.optimizer.fill;

    let (rotation_deg, affine, inlier_count, per_angle_counts) = match external_matches {
        Some(ms) => {
            if ms.fixed_dims() != fixed.dims() || ms.moving_dims() != moving.dims() {
                return Err(Error::InvalidArgument(format!(
                    "imported matches are for {:?}/{:?}, images are {:?}/{:?}",
                    ms.fixed_dims(),
                    ms.moving_dims(),
                    fixed.dims(),
                    moving.dims()
                )));
            }
            let out = ransac_affine(ms, &cfg.ransac)?;
            (0.0, out.transform, out.inliers.len(), Vec::new())
        }
        None => {
            let matcher = BuiltinMatcher::new(fixed, cfg.detector.clone(), cfg.match_ratio)
                .map_err(|e| Error::Unregistrable(format!("fixed image: {e}")))?;
            let sweep = rotation_sweep(fixed, moving, &cfg.rotation_angles, &matcher, &cfg.ransac, fill)?;
            let out = ransac_affine(&sweep.canonical_matches, &cfg.ransac).map_err(|e| {
                Error::Unregistrable(format!("{e}; per-angle counts: {:?}", sweep.per_angle_counts))
            })?;
            let affine = AffineTransform2D::compose(&out.transform, &sweep.to_canonical);
            (sweep.best_angle, affine, out.inliers.len(), sweep.per_angle_counts)
        }
    };
    if !affine.is_finite() || !affine.is_sane() {
        return Err(Error::Unregistrable(format!(
            "estimated affine is degenerate (det = {:e})",
            affine.det()
        )));
    }

    let mut reg = PairRegistration {
        fixed_id: fixed_id.into(),
        moving_id: moving_id.into(),
        fixed_dims: fixed.dims(),
        moving_dims: moving.dims(),
        rotation_deg,
        affine,
        field: None,
        trace: Vec::new(),
        inlier_count,
        per_angle_counts,
        ncc_affine: None,
        ncc_final: None,
        status: PairStatus::AffineOnly,
        seed: cfg.ransac.seed,
        diagnostic: None,
    };
    if !cfg.bspline_enabled {
        return Ok(reg);
    }

    let (fw, fh) = fixed.dims();
    let prewarped = warp(moving, &affine.invert()?, fw, fh, fill);
    let init = BSplineField::covering(fw, fh, cfg.bspline_spacing)?;
    match optimize(fixed, &prewarped, &init, &cfg.optimizer) {
        Ok(out) => {
            reg.ncc_affine = Some(out.initial.ncc_term);
            reg.trace = out.trace;
            if out.best.ncc_term <= out.initial.ncc_term {
                reg.ncc_final = Some(out.best.ncc_term);
                reg.field = Some(out.field);
                reg.status = PairStatus::Ok;
            } else {
                reg.ncc_final = Some(out.initial.ncc_term);
                reg.diagnostic = Some("B-spline stage did not improve NCC".into());
            }
        }
        Err(e) => {
            if let Ok(ev) = LossEvaluator::new(fixed, &prewarped, &init, &cfg.optimizer) {
                if let Ok(l) = ev.evaluate(&init) {
                    reg.ncc_affine = Some(l.ncc_term);
                    reg.ncc_final = Some(l.ncc_term);
                }
            }
            reg.diagnostic = Some(format!("B-spline stage failed: {e}"));
        }
    }
    Ok(reg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TransformFile {
    fixed_id: String,
    moving_id: String,
    status: PairStatus,
    fixed_dims: [usize; 2],
    moving_dims: [usize; 2],
    rotation_deg: f64,
    a11: f64,
    a12: f64,
    a21: f64,
    a22: f64,
    tx: f64,
    ty: f64,
    inlier_count: usize,
    seed: u64,
    has_field: bool,
    ncc_affine: Option<f64>,
    ncc_final: Option<f64>,
    per_angle_counts: Vec<(f64, usize)>,
    diagnostic: Option<String>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("iteration,total,ncc,reg,alpha_used\n");
    for t in trace {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{:.16e}",
            t.iteration, t.total, t.ncc, t.reg, t.alpha_used
        );
    }
    out
}

impl PairRegistration {
    /// Writes `<stem>.transform.json`, plus `<stem>.field.json` and
    /// `<stem>.trace.csv` when present, into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let stem = self.stem();
        let a = self.affine;
        let file = TransformFile {
            fixed_id: self.fixed_id.clone(),
            moving_id: self.moving_id.clone(),
            status: self.status,
            fixed_dims: [self.fixed_dims.0, self.fixed_dims.1],
            moving_dims: [self.moving_dims.0, self.moving_dims.1],
            rotation_deg: self.rotation_deg,
            a11: a.a11,
            a12: a.a12,
            a21: a.a21,
            a22: a.a22,
            tx: a.tx,
            ty: a.ty,
            inlier_count: self.inlier_count,
            seed: self.seed,
            has_field: self.field.is_some(),
            ncc_affine: self.ncc_affine,
            ncc_final: self.ncc_final,
            per_angle_counts: self.per_angle_counts.clone(),
            diagnostic: self.diagnostic.clone(),
        };
        let json = serde_json::to_string_pretty(&file).expect("serializable");
        write_text(&dir.join(format!("{stem}.transform.json")), &(json + "\n"))?;
        if let Some(f) = &self.field {
            let json = serde_json::to_string_pretty(f).expect("serializable");
            write_text(&dir.join(format!("{stem}.field.json")), &(json + "\n"))?;
        }
        if !self.trace.is_empty() {
            write_text(&dir.join(format!("{stem}.trace.csv")), &trace_csv(&self.trace))?;
        }
        Ok(())
    }

    /// Reads back what [`save`](Self::save) wrote (the loss trace is not
    /// reloaded).
    pub fn load(dir: &Path, fixed_id: &str, moving_id: &str) -> Result<Self> {
        let stem = pair_stem(fixed_id, moving_id);
        let path = dir.join(format!("{stem}.transform.json"));
        let f: TransformFile = read_json(&path)?;
        let field = if f.has_field {
            let fp = dir.join(format!("{stem}.field.json"));
            let field: BSplineField = read_json(&fp)?;
            // re-validate through the checked constructor
            Some(BSplineField::new(
                field.nx(),
                field.ny(),
                field.spacing(),
                field.origin(),
                field.coeffs().to_vec(),
            )?)
        } else {
            None
        };
        Ok(Self {
            fixed_id: f.fixed_id,
            moving_id: f.moving_id,
            fixed_dims: (f.fixed_dims[0], f.fixed_dims[1]),
            moving_dims: (f.moving_dims[0], f.moving_dims[1]),
            rotation_deg: f.rotation_deg,
            affine: AffineTransform2D::new(f.a11, f.a12, f.a21, f.a22, f.tx, f.ty),
            field,
            trace: Vec::new(),
            inlier_count: f.inlier_count,
            per_angle_counts: f.per_angle_counts,
            ncc_affine: f.ncc_affine,
            ncc_final: f.ncc_final,
            status: f.status,
            seed: f.seed,
            diagnostic: f.diagnostic,
        })
    }
}
