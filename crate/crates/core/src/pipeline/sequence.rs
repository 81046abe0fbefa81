use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{pair_stem, register_pair, PairRegistration, PairStatus, PipelineConfig};
use crate::error::{Error, Result};
use crate::imaging::ScalarImage;
use crate::matching::MatchSet;
use crate::transform::Transform;

#[derive(Debug, Clone)]
pub struct SequenceRegistration {
    pub slice_ids: Vec<String>,
    pub slice_dims: Vec<(usize, usize)>,
    pub reference_index: usize,
    /// `pairs[t]` registers slice `t + 1` (moving) onto slice `t` (fixed).
    pub pairs: Vec<PairRegistration>,
    /// Reference-frame -> slice-frame map, `None` for slices cut off by a
    /// break in the chain.
    pub composed: Vec<Option<Transform>>,
}

impl SequenceRegistration {
    pub fn reference_id(&self) -> &str {
        &self.slice_ids[self.reference_index]
    }

    pub fn index_of(&self, slice_id: &str) -> Option<usize> {
        self.slice_ids.iter().position(|s| s == slice_id)
    }

    pub fn is_placed(&self, index: usize) -> bool {
        self.composed[index].is_some()
    }

    /// Pairs that failed, as `(fixed_id, moving_id, diagnostic)`.
    pub fn breaks(&self) -> Vec<(String, String, String)> {
        self.pairs
            .iter()
            .filter(|p| p.status == PairStatus::Unregistrable)
            .map(|p| {
                (
                    p.fixed_id.clone(),
                    p.moving_id.clone(),
                    p.diagnostic.clone().unwrap_or_default(),
                )
            })
            .collect()
    }

    /// Rebuilds the composed maps from `pairs` (e.g. after loading them).
    pub fn from_pairs(
        slice_ids: Vec<String>,
        slice_dims: Vec<(usize, usize)>,
        reference_index: usize,
        pairs: Vec<PairRegistration>,
    ) -> Result<Self> {
        let n = slice_ids.len();
        if n < 2 || pairs.len() != n - 1 || slice_dims.len() != n || reference_index >= n {
            return Err(Error::InvalidArgument(format!(
                "{n} slices need {} pairs and a reference index below {n}",
                n.saturating_sub(1)
            )));
        }
        let links: Vec<Option<Transform>> = pairs.iter().map(|p| p.fixed_to_moving().ok()).collect();
        let mut composed: Vec<Option<Transform>> = vec![None; n];
        composed[reference_index] = Some(Transform::Identity);
        // forward: ref -> t is ref -> t-1 followed by link t-1
        for t in reference_index + 1..n {
            composed[t] = match (&composed[t - 1], &links[t - 1]) {
                (Some(prev), Some(link)) => Some(Transform::chain([prev.clone(), link.clone()])),
                _ => None,
            };
        }
        // backward: ref -> t is ref -> t+1 followed by the inverse of link t
        for t in (0..reference_index).rev() {
            composed[t] = match (&composed[t + 1], &links[t]) {
                (Some(prev), Some(link)) => Some(Transform::chain([prev.clone(), link.inverse()?])),
                _ => None,
            };
        }
        Ok(Self {
            slice_ids,
            slice_dims,
            reference_index,
            pairs,
            composed,
        })
    }
}

/// Registers every consecutive pair (in parallel on `cfg.workers` threads)
/// and chains the results outward from the reference slice. A failed pair
/// is recorded as unregistrable and cuts the chain; it is not fatal.
pub fn register_sequence(
    slices: &[(String, ScalarImage)],
    cfg: &PipelineConfig,
    external_matches: Option<&BTreeMap<String, MatchSet>>,
) -> Result<SequenceRegistration> {
    cfg.validate()?;
    if slices.len() < 2 {
        return Err(Error::InvalidArgument("a sequence needs at least 2 slices".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;

    let pairs: Vec<PairRegistration> = pool.install(|| {
        (0..slices.len() - 1)
            .into_par_iter()
            .map(|t| {
                let (fid, fixed) = &slices[t];
                let (mid, moving) = &slices[t + 1];
                let ext = external_matches.and_then(|m| m.get(&pair_stem(fid, mid)));
                match register_pair(fid, mid, fixed, moving, cfg, ext) {
                    Ok(r) => r,
                    Err(e) => PairRegistration::unregistrable(
                        fid,
                        mid,
                        fixed.dims(),
                        moving.dims(),
                        cfg.ransac.seed,
                        e.to_string(),
                    ),
                }
            })
            .collect()
    });

    SequenceRegistration::from_pairs(
        slices.iter().map(|(id, _)| id.clone()).collect(),
        slices.iter().map(|(_, s)| s.dims()).collect(),
        cfg.reference.index(slices.len()),
        pairs,
    )
}

/// Reference-frame coordinates to the native frame of `slice_id`.
pub fn compose_to_reference(seq: &SequenceRegistration, slice_id: &str) -> Result<Transform> {
    let idx = seq
        .index_of(slice_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown slice `{slice_id}`")))?;
    seq.composed[idx]
        .clone()
        .ok_or_else(|| Error::UnplacedSlice(slice_id.to_string()))
}
