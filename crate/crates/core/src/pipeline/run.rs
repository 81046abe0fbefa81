use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PairRegistration, SequenceRegistration};
use crate::error::{Error, Result};

pub const RUN_FILE: &str = "run.json";

#[derive(Debug, Serialize, Deserialize)]
struct RunFile {
    slice_ids: Vec<String>,
    slice_dims: Vec<[usize; 2]>,
    reference_id: String,
}

/// Writes `run.json` plus one transform file set per pair under
/// `dir/pairs`.
pub fn save_run(seq: &SequenceRegistration, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let run = RunFile {
        slice_ids: seq.slice_ids.clone(),
        slice_dims: seq.slice_dims.iter().map(|&(w, h)| [w, h]).collect(),
        reference_id: seq.reference_id().to_string(),
    };
    let path = dir.join(RUN_FILE);
    let json = serde_json::to_string_pretty(&run).expect("serializable") + "\n";
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let pairs = dir.join("pairs");
    for p in &seq.pairs {
        p.save(&pairs)?;
    }
    Ok(())
}

pub fn load_run(dir: &Path) -> Result<SequenceRegistration> {
    let path = dir.join(RUN_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let run: RunFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let reference_index = run
        .slice_ids
        .iter()
        .position(|s| *s == run.reference_id)
        .ok_or_else(|| Error::Format {
            path: path.clone(),
            message: format!("reference `{}` is not among the slices", run.reference_id),
        })?;
    let pairs_dir = dir.join("pairs");
    let pairs = run
        .slice_ids
        .windows(2)
        .map(|w| PairRegistration::load(&pairs_dir, &w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    SequenceRegistration::from_pairs(
        run.slice_ids,
        run.slice_dims.iter().map(|d| (d[0], d[1])).collect(),
        reference_index,
        pairs,
    )
}
