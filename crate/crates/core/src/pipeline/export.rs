use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{PipelineConfig, SequenceRegistration};
use crate::error::{Error, Result};
use crate::imaging::{save_png, to_u8, warp, ScalarImage};
use crate::transform::Transform;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const RAW_VOLUME_FILE: &str = "volume.raw";
pub const RAW_HEADER_FILE: &str = "volume.nhdr";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportMode {
    SinglePass,
    LegacyTwoPass,
}

impl ExportMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ExportMode::SinglePass => "single-pass",
            ExportMode::LegacyTwoPass => "legacy-two-pass",
        }
    }
}

#[derive(Debug, Clone)]
pub struct VolumeStack {
    pub slice_ids: Vec<String>,
    pub slices: Vec<ScalarImage>,
    pub spacing: [f64; 3],
}

#[derive(Debug, Serialize)]
struct ManifestSlice {
    index: usize,
    id: String,
    placed: bool,
    file: Option<String>,
}

#[derive(Debug, Serialize)]
struct ManifestPair {
    fixed_id: String,
    moving_id: String,
    status: &'static str,
    rotation_deg: f64,
    inlier_count: usize,
    diagnostic: Option<String>,
}

#[derive(Debug, Serialize)]
struct ManifestBreak {
    fixed_id: String,
    moving_id: String,
    diagnostic: String,
}

#[derive(Debug, Serialize)]
struct Manifest {
    reference_id: String,
    dims: [usize; 2],
    spacing: [f64; 3],
    spacing_unit: String,
    export_mode: &'static str,
    placed_count: usize,
    slices: Vec<ManifestSlice>,
    pairs: Vec<ManifestPair>,
    breaks: Vec<ManifestBreak>,
    raw_volume: Option<String>,
    config: Vec<(String, String)>,
}

/// Resamples slice `index` into the reference grid. In two-pass mode the
/// last link of the composed chain is applied as its own resample onto the
/// neighbouring slice's grid before the rest of the chain.
pub fn warp_to_reference(
    seq: &SequenceRegistration,
    slices: &[ScalarImage],
    index: usize,
    mode: ExportMode,
    fill: f64,
) -> Result<ScalarImage> {
    let map = seq.composed[index]
        .as_ref()
        .ok_or_else(|| Error::UnplacedSlice(seq.slice_ids[index].clone()))?;
    let (rw, rh) = seq.slice_dims[seq.reference_index];
    let src = &slices[index];
    let parts = match map {
        Transform::Chain(parts) if mode == ExportMode::LegacyTwoPass => parts,
        _ => return Ok(warp(src, map, rw, rh, fill)),
    };
    let (last, head) = parts.split_last().expect("chains have at least two parts");
    let (iw, ih) = if index > seq.reference_index {
        seq.slice_dims[index - 1]
    } else {
        seq.slice_dims[index]
    };
    let intermediate = warp(src, last, iw, ih, fill);
    let head = Transform::chain(head.iter().cloned());
    Ok(warp(&intermediate, &head, rw, rh, fill))
}

/// Warps every placed slice into the reference frame and writes
/// `slice_NNNN.png`, the manifest and optionally a raw 8-bit block with a
/// detached NRRD header.
pub fn export_volume(
    seq: &SequenceRegistration,
    slices: &[ScalarImage],
    cfg: &PipelineConfig,
    out_dir: &Path,
) -> Result<VolumeStack> {
    if slices.len() != seq.slice_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "{} images for {} registered slices",
            slices.len(),
            seq.slice_ids.len()
        )));
    }
    for (k, s) in slices.iter().enumerate() {
        if s.dims() != seq.slice_dims[k] {
            return Err(Error::InvalidArgument(format!(
                "slice {} is {:?}, registered as {:?}",
                seq.slice_ids[k],
                s.dims(),
                seq.slice_dims[k]
            )));
        }
    }
    if !seq.composed.iter().any(Option::is_some) {
        return Err(Error::InvalidArgument("no placed slices to export".into()));
    }
    if cfg.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config("spacing must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mode = if cfg.legacy_two_pass {
        ExportMode::LegacyTwoPass
    } else {
        ExportMode::SinglePass
    };
    let (rw, rh) = seq.slice_dims[seq.reference_index];
    let mut stack = VolumeStack {
        slice_ids: Vec::new(),
        slices: Vec::new(),
        spacing: cfg.spacing,
    };
    let mut manifest_slices = Vec::new();
    for k in 0..slices.len() {
        let mut entry = ManifestSlice {
            index: k,
            id: seq.slice_ids[k].clone(),
            placed: seq.is_placed(k),
            file: None,
        };
        if entry.placed {
            let out = warp_to_reference(seq, slices, k, mode, cfg.optimizer.fill)?;
            let name = format!("slice_{:04}.png", stack.slices.len());
            save_png(&out, out_dir.join(&name))?;
            entry.file = Some(name);
            stack.slice_ids.push(seq.slice_ids[k].clone());
            stack.slices.push(out);
        }
        manifest_slices.push(entry);
    }

    let raw_volume = if cfg.raw_volume {
        write_raw_volume(&stack, &cfg.spacing_unit, out_dir)?;
        Some(RAW_VOLUME_FILE.to_string())
    } else {
        None
    };

    let manifest = Manifest {
        reference_id: seq.reference_id().to_string(),
        dims: [rw, rh],
        spacing: cfg.spacing,
        spacing_unit: cfg.spacing_unit.clone(),
        export_mode: mode.as_str(),
        placed_count: stack.slices.len(),
        slices: manifest_slices,
        pairs: seq
            .pairs
            .iter()
            .map(|p| ManifestPair {
                fixed_id: p.fixed_id.clone(),
                moving_id: p.moving_id.clone(),
                status: p.status.as_str(),
                rotation_deg: p.rotation_deg,
                inlier_count: p.inlier_count,
                diagnostic: p.diagnostic.clone(),
            })
            .collect(),
        breaks: seq
            .breaks()
            .into_iter()
            .map(|(fixed_id, moving_id, diagnostic)| ManifestBreak {
                fixed_id,
                moving_id,
                diagnostic,
            })
            .collect(),
        raw_volume,
        config: cfg.echo(),
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("serializable") + "\n";
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(stack)
}

/// Voxels are x-fastest, then y, then slice.
pub fn raw_volume_bytes(stack: &VolumeStack) -> Vec<u8> {
    stack
        .slices
        .iter()
        .flat_map(|s| s.pixels().iter().map(|&v| to_u8(v)))
        .collect()
}

fn write_raw_volume(stack: &VolumeStack, unit: &str, out_dir: &Path) -> Result<PathBuf> {
    let (w, h) = stack.slices[0].dims();
    let path = out_dir.join(RAW_VOLUME_FILE);
    std::fs::write(&path, raw_volume_bytes(stack)).map_err(|e| Error::io(&path, e))?;
    let [sx, sy, sz] = stack.spacing;
    let mut header = String::from("NRRD0004\ntype: uint8\ndimension: 3\n");
    let _ = writeln!(header, "sizes: {w} {h} {}", stack.slices.len());
    let _ = writeln!(header, "spacings: {sx} {sy} {sz}");
    let _ = writeln!(header, "units: \"{unit}\" \"{unit}\" \"{unit}\"");
    let _ = writeln!(header, "encoding: raw\ndata file: {RAW_VOLUME_FILE}");
    let hpath = out_dir.join(RAW_HEADER_FILE);
    std::fs::write(&hpath, header).map_err(|e| Error::io(&hpath, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::AffineTransform2D;
    use crate::imaging::{load_image, LoadOptions};
    use crate::pipeline::sequence::tests::affine_pair;
    use crate::pipeline::PairRegistration;

    fn quantized(seed: usize) -> ScalarImage {
        ScalarImage::from_fn(64, 48, |x, y| ((x * 31 + y * 17 + seed * 7) % 256) as f64 / 255.0)
    }

    fn identity_sequence(n: usize) -> SequenceRegistration {
        let ids: Vec<String> = (0..n).map(|k| format!("s{k}")).collect();
        let pairs = (0..n - 1)
            .map(|k| affine_pair(&ids[k], &ids[k + 1], AffineTransform2D::identity()))
            .collect();
        SequenceRegistration::from_pairs(ids, vec![(64, 48); n], 0, pairs).unwrap()
    }

    #[test]
    fn identity_sequence_exports_inputs_unchanged() {
        let seq = identity_sequence(3);
        let slices: Vec<_> = (0..3).map(quantized).collect();
        for legacy in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            let cfg = PipelineConfig {
                legacy_two_pass: legacy,
                ..Default::default()
            };
            let stack = export_volume(&seq, &slices, &cfg, dir.path()).unwrap();
            assert_eq!(stack.slices.len(), 3);
            for (k, s) in slices.iter().enumerate() {
                let back = load_image(dir.path().join(format!("slice_{k:04}.png")), LoadOptions::default()).unwrap();
                assert_eq!(back.pixels(), s.pixels());
            }
        }
    }

    #[test]
    fn manifest_echoes_spacing_and_raw_block_has_one_byte_per_voxel() {
        let mut seq = identity_sequence(4);
        seq.pairs[2] = PairRegistration::unregistrable("s2", "s3", (64, 48), (64, 48), 0, "blank".into());
        let seq = SequenceRegistration::from_pairs(seq.slice_ids, seq.slice_dims, 0, seq.pairs).unwrap();
        let slices: Vec<_> = (0..4).map(quantized).collect();
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            raw_volume: true,
            ..Default::default()
        };
        export_volume(&seq, &slices, &cfg, dir.path()).unwrap();

        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert_eq!(manifest["spacing"], serde_json::json!([1.0, 1.0, 8.0]));
        assert_eq!(manifest["spacing_unit"], "mm");
        assert_eq!(manifest["placed_count"], 3);
        assert_eq!(manifest["breaks"][0]["moving_id"], "s3");
        assert_eq!(manifest["slices"][3]["placed"], false);

        let raw = std::fs::read(dir.path().join(RAW_VOLUME_FILE)).unwrap();
        assert_eq!(raw.len(), 64 * 48 * 3);
        assert_eq!(raw[64 * 48 + 5], to_u8(slices[1].get(5, 0)));
        let header = std::fs::read_to_string(dir.path().join(RAW_HEADER_FILE)).unwrap();
        assert!(header.contains("sizes: 64 48 3\n") && header.contains("spacings: 1 1 8\n"));
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let seq = identity_sequence(2);
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig::default();
        assert!(export_volume(&seq, &[quantized(0)], &cfg, dir.path()).is_err());
        let small = ScalarImage::constant(8, 8, 0.5);
        assert!(export_volume(&seq, &[quantized(0), small], &cfg, dir.path()).is_err());
    }
}
