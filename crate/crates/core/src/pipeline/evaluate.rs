use std::path::Path;

use super::{PairStatus, SequenceRegistration};
use crate::error::{Error, Result};
use crate::imaging::IdentityMap;
use crate::metrics::{aggregate, evaluate_pair, LandmarkSet, MetricsReport};

/// Landmark file of a slice: `<landmark_dir>/<slice_id>.csv`.
pub fn landmark_path(landmark_dir: &Path, slice_id: &str) -> std::path::PathBuf {
    landmark_dir.join(format!("{slice_id}.csv"))
}

/// Scores every consecutive pair whose two landmark files exist. A pair
/// without a transform is scored with the identity, so it counts as not
/// improved rather than being left out.
pub fn evaluate_run(
    seq: &SequenceRegistration,
    landmark_dir: &Path,
    pixel_size_um: f64,
) -> Result<MetricsReport> {
    let mut sets: Vec<Option<LandmarkSet>> = Vec::with_capacity(seq.slice_ids.len());
    for id in &seq.slice_ids {
        let path = landmark_path(landmark_dir, id);
        sets.push(if path.exists() {
            Some(LandmarkSet::load(&path, id.as_str())?)
        } else {
            None
        });
    }
    let mut evaluations = Vec::new();
    for (t, pair) in seq.pairs.iter().enumerate() {
        let (Some(li), Some(lj)) = (&sets[t], &sets[t + 1]) else {
            continue;
        };
        let ev = if pair.status == PairStatus::Unregistrable {
            evaluate_pair(li, lj, &IdentityMap, pair.moving_dims)?
        } else {
            evaluate_pair(li, lj, &pair.fixed_to_moving()?, pair.moving_dims)?
        };
        evaluations.push(ev);
    }
    if evaluations.is_empty() {
        return Err(Error::Evaluation(format!(
            "no consecutive pair has landmark files in {}",
            landmark_dir.display()
        )));
    }
    aggregate(&evaluations, pixel_size_um)
}

/// Mean distance, per slice, between the reference landmarks mapped
/// through the composed map and the slice's own landmarks. `None` for
/// unplaced slices.
pub fn reference_frame_errors(
    seq: &SequenceRegistration,
    landmarks: &[LandmarkSet],
) -> Result<Vec<Option<f64>>> {
    if landmarks.len() != seq.slice_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "{} landmark sets for {} slices",
            landmarks.len(),
            seq.slice_ids.len()
        )));
    }
    let reference = &landmarks[seq.reference_index];
    seq.composed
        .iter()
        .zip(landmarks)
        .map(|(map, truth)| {
            map.as_ref()
                .map(|m| mean_landmark_distance(reference, truth, m))
                .transpose()
        })
        .collect()
}

/// Mean distance between `from` mapped through `map` and `to`, over
/// shared ids.
pub fn mean_landmark_distance(
    from: &LandmarkSet,
    to: &LandmarkSet,
    map: &dyn crate::imaging::CoordinateMap,
) -> Result<f64> {
    let mut d: Vec<f64> = from
        .points()
        .iter()
        .filter_map(|p| {
            to.get(&p.id).map(|(tx, ty)| {
                let (x, y) = map.map_point(p.x, p.y);
                (x - tx).hypot(y - ty)
            })
        })
        .collect();
    if d.is_empty() {
        return Err(Error::Evaluation(format!(
            "landmarks of `{}` and `{}` share no ids",
            from.image_id, to.image_id
        )));
    }
    d.sort_by(f64::total_cmp);
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}
