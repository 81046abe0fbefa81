//! Landmark-based registration accuracy: per-landmark relative errors and
//! their per-pair and dataset aggregates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::CoordinateMap;

/// Physical pixel size at 40x magnification, in micrometres.
pub const DEFAULT_PIXEL_SIZE_UM: f64 = 0.25;

pub const LANDMARK_FILE_HEADER: &str = "landmark_id,x,y";

fn diagonal(dims: (usize, usize)) -> f64 {
    (dims.0 as f64).hypot(dims.1 as f64)
}

/// Registration error of one landmark, normalized by the image diagonal.
pub fn rtre(estimated: (f64, f64), truth: (f64, f64), image_dims: (usize, usize)) -> f64 {
    (estimated.0 - truth.0).hypot(estimated.1 - truth.1) / diagonal(image_dims)
}

/// Same formula as [`rtre`], on positions before registration.
pub fn rire(initial: (f64, f64), truth: (f64, f64), image_dims: (usize, usize)) -> f64 {
    rtre(initial, truth, image_dims)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub image_id: String,
    points: Vec<Landmark>,
}

impl LandmarkSet {
    pub fn new(image_id: impl Into<String>, points: Vec<Landmark>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &points {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate landmark id `{}`", p.id)));
            }
            if !(p.x.is_finite() && p.y.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "landmark `{}` has non-finite coordinates",
                    p.id
                )));
            }
        }
        Ok(Self {
            image_id: image_id.into(),
            points,
        })
    }

    pub fn points(&self) -> &[Landmark] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<(f64, f64)> {
        self.points.iter().find(|p| p.id == id).map(|p| (p.x, p.y))
    }

    /// Every point pushed through `map`, ids preserved.
    pub fn mapped(&self, map: &dyn CoordinateMap, image_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            points: self
                .points
                .iter()
                .map(|p| {
                    let (x, y) = map.map_point(p.x, p.y);
                    Landmark {
                        id: p.id.clone(),
                        x,
                        y,
                    }
                })
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>, image_id: impl Into<String>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut points = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || (idx == 0 && line == LANDMARK_FILE_HEADER) {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(err(idx + 1, format!("expected 3 fields, found {}", fields.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(idx + 1, format!("`{s}` is not a finite number")))
            };
            points.push(Landmark {
                id: fields[0].to_string(),
                x: num(fields[1])?,
                y: num(fields[2])?,
            });
        }
        Self::new(image_id, points).map_err(|e| err(0, e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = format!("{LANDMARK_FILE_HEADER}\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{:.16e},{:.16e}", p.id, p.x, p.y);
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub fixed_id: String,
    pub moving_id: String,
    pub rtre_per_landmark: BTreeMap<String, f64>,
    pub rire_per_landmark: BTreeMap<String, f64>,
    pub median_rtre: f64,
    pub max_rtre: f64,
    pub mean_rtre: f64,
    /// Fraction of landmarks with rTRE strictly below rIRE.
    pub robustness: f64,
    pub improved: usize,
    pub evaluated: usize,
    /// Mean landmark distance after registration, in pixels.
    pub mean_distance: f64,
}

/// Sorted-order mean, so the result does not depend on input order.
fn mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Median; an even count takes the mean of the two central values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Maps landmarks of image `i` through `map` (i-frame to j-frame) and
/// compares them with the landmarks of image `j`.
pub fn evaluate_pair(
    landmarks_i: &LandmarkSet,
    landmarks_j: &LandmarkSet,
    map: &dyn CoordinateMap,
    image_dims_j: (usize, usize),
) -> Result<PairEvaluation> {
    let truth: BTreeMap<&str, (f64, f64)> = landmarks_j
        .points
        .iter()
        .map(|p| (p.id.as_str(), (p.x, p.y)))
        .collect();
    let mut rtre_map = BTreeMap::new();
    let mut rire_map = BTreeMap::new();
    let mut dists = Vec::new();
    let mut improved = 0;
    for p in &landmarks_i.points {
        let Some(&t) = truth.get(p.id.as_str()) else {
            continue;
        };
        let est = map.map_point(p.x, p.y);
        let e = rtre(est, t, image_dims_j);
        let i = rire((p.x, p.y), t, image_dims_j);
        if e < i {
            improved += 1;
        }
        dists.push((est.0 - t.0).hypot(est.1 - t.1));
        rtre_map.insert(p.id.clone(), e);
        rire_map.insert(p.id.clone(), i);
    }
    if rtre_map.is_empty() {
        return Err(Error::Evaluation(format!(
            "landmarks of `{}` and `{}` share no ids",
            landmarks_i.image_id, landmarks_j.image_id
        )));
    }
    let values: Vec<f64> = rtre_map.values().copied().collect();
    let n = values.len();
    Ok(PairEvaluation {
        fixed_id: landmarks_i.image_id.clone(),
        moving_id: landmarks_j.image_id.clone(),
        median_rtre: median(&values),
        max_rtre: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_rtre: mean(&values),
        robustness: improved as f64 / n as f64,
        improved,
        evaluated: n,
        mean_distance: mean(&dists),
        rtre_per_landmark: rtre_map,
        rire_per_landmark: rire_map,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub amrtre: f64,
    pub mmrtre: f64,
    /// Mean over pairs of the per-pair mean rTRE.
    pub amean_rtre: f64,
    pub amean_rtre_definition_inferred: bool,
    pub amxrtre: f64,
    pub r_avg: f64,
    pub amean_d_px: f64,
    pub amean_d_um: f64,
    pub pixel_size_um: f64,
    pub pairs: Vec<PairEvaluation>,
}

pub fn aggregate(pairs: &[PairEvaluation], pixel_size_um: f64) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Evaluation("no pairs to aggregate".into()));
    }
    if !(pixel_size_um > 0.0 && pixel_size_um.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "pixel size must be positive, got {pixel_size_um}"
        )));
    }
    let col = |f: fn(&PairEvaluation) -> f64| pairs.iter().map(f).collect::<Vec<_>>();
    let medians = col(|p| p.median_rtre);
    let amean_d_px = mean(&col(|p| p.mean_distance));
    Ok(MetricsReport {
        amrtre: mean(&medians),
        mmrtre: median(&medians),
        amean_rtre: mean(&col(|p| p.mean_rtre)),
        amean_rtre_definition_inferred: true,
        amxrtre: mean(&col(|p| p.max_rtre)),
        r_avg: mean(&col(|p| p.robustness)),
        amean_d_px,
        amean_d_um: amean_d_px * pixel_size_um,
        pixel_size_um,
        pairs: pairs.to_vec(),
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "fixed_id,moving_id,landmarks,improved,median_rtre,max_rtre,mean_rtre,robustness,mean_distance_px,mean_distance_um\n",
        );
        for p in &self.pairs {
            let _ = writeln!(
                out,
                "{},{},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
                p.fixed_id,
                p.moving_id,
                p.evaluated,
                p.improved,
                p.median_rtre,
                p.max_rtre,
                p.mean_rtre,
                p.robustness,
                p.mean_distance,
                p.mean_distance * self.pixel_size_um
            );
        }
        out
    }

    /// Per-landmark values, for external paired statistics.
    pub fn landmarks_csv(&self) -> String {
        let mut out = String::from("fixed_id,moving_id,landmark_id,rtre,rire\n");
        for p in &self.pairs {
            for (id, e) in &p.rtre_per_landmark {
                let _ = writeln!(
                    out,
                    "{},{},{},{:e},{:e}",
                    p.fixed_id, p.moving_id, id, e, p.rire_per_landmark[id]
                );
            }
        }
        out
    }
}
