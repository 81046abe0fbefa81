use std::collections::HashMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use serialreg_core::bspline::basis_cubic;
use serialreg_core::error::Error;
use serialreg_core::imaging::{load_image as core_load_image, LoadOptions, ScalarImage};
use serialreg_core::metrics;
use serialreg_core::pipeline::{self, PairStatus, PipelineConfig, CONFIG_KEYS};
use serialreg_core::synth::{generate_sequence, SynthConfig};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::ImageEncode { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFiniteLoss { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn make_config(config: Option<HashMap<String, String>>) -> PyResult<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    if let Some(map) = config {
        // sorted so that error messages do not depend on dict order
        let mut entries: Vec<_> = map.into_iter().collect();
        entries.sort();
        for (k, v) in entries {
            cfg.set(&k, &v).map_err(to_py)?;
        }
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn load(path: &str) -> PyResult<ScalarImage> {
    core_load_image(path, LoadOptions::default()).map_err(to_py)
}

fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string())
}

/// Grayscale image as `(width, height, pixels)` with row-major intensities in [0, 1].
#[pyfunction]
fn load_image(path: &str) -> PyResult<(usize, usize, Vec<f64>)> {
    let img = load(path)?;
    let (w, h) = img.dims();
    Ok((w, h, img.into_pixels()))
}

/// Cubic B-spline weights at local coordinate `u`.
#[pyfunction]
fn bspline_weights(u: f64) -> [f64; 4] {
    basis_cubic(u)
}

#[pyfunction]
fn rtre(estimated: (f64, f64), truth: (f64, f64), image_dims: (usize, usize)) -> f64 {
    metrics::rtre(estimated, truth, image_dims)
}

#[pyfunction]
fn config_keys() -> Vec<(&'static str, &'static str)> {
    CONFIG_KEYS.to_vec()
}

#[pyfunction]
fn default_config() -> HashMap<String, String> {
    let cfg = PipelineConfig::default();
    CONFIG_KEYS
        .iter()
        .map(|(k, _)| (k.to_string(), cfg.get(k).expect("declared key")))
        .collect()
}

/// Registers `moving` onto `fixed`. Writes the transform files when
/// `out_dir` is given. Returns a summary dict.
#[pyfunction]
#[pyo3(signature = (fixed, moving, config=None, out_dir=None))]
fn register_pair(
    py: Python<'_>,
    fixed: &str,
    moving: &str,
    config: Option<HashMap<String, String>>,
    out_dir: Option<PathBuf>,
) -> PyResult<HashMap<String, Py<PyAny>>> {
    let cfg = make_config(config)?;
    let (f, m) = (load(fixed)?, load(moving)?);
    let (fid, mid) = (stem(fixed), stem(moving));
    let reg = py
        .detach(|| pipeline::register_pair(&fid, &mid, &f, &m, &cfg, None))
        .map_err(to_py)?;
    if let Some(dir) = out_dir {
        reg.save(&dir).map_err(to_py)?;
    }
    let mut out = HashMap::new();
    out.insert("status".into(), reg.status.as_str().into_pyobject(py)?.into_any().unbind());
    out.insert("rotation_deg".into(), reg.rotation_deg.into_pyobject(py)?.into_any().unbind());
    out.insert("affine".into(), reg.affine.to_array().into_pyobject(py)?.into_any().unbind());
    out.insert("inlier_count".into(), reg.inlier_count.into_pyobject(py)?.into_any().unbind());
    out.insert("ncc_affine".into(), reg.ncc_affine.into_pyobject(py)?.into_any().unbind());
    out.insert("ncc_final".into(), reg.ncc_final.into_pyobject(py)?.into_any().unbind());
    out.insert("has_field".into(), reg.field.is_some().into_pyobject(py)?.to_owned().into_any().unbind());
    Ok(out)
}

/// Registers the slices in order and saves the run (plus the exported
/// volume unless `export=False`) under `out_dir`. Returns
/// `(placed, breaks)`: a per-slice placed flag and `(fixed, moving, why)`
/// tuples.
#[pyfunction]
#[pyo3(signature = (slices, out_dir, config=None, export=true))]
#[allow(clippy::type_complexity)]
fn register_sequence(
    py: Python<'_>,
    slices: Vec<String>,
    out_dir: PathBuf,
    config: Option<HashMap<String, String>>,
    export: bool,
) -> PyResult<(Vec<bool>, Vec<(String, String, String)>)> {
    let cfg = make_config(config)?;
    let mut loaded = Vec::with_capacity(slices.len());
    for p in &slices {
        loaded.push((stem(p), load(p)?));
    }
    py.detach(|| -> Result<_, Error> {
        let seq = pipeline::register_sequence(&loaded, &cfg, None)?;
        pipeline::save_run(&seq, &out_dir)?;
        if export {
            let images: Vec<ScalarImage> = loaded.iter().map(|(_, s)| s.clone()).collect();
            pipeline::export_volume(&seq, &images, &cfg, &out_dir.join("volume"))?;
        }
        let placed = (0..seq.slice_ids.len()).map(|k| seq.is_placed(k)).collect();
        Ok((placed, seq.breaks()))
    })
    .map_err(to_py)
}

/// Landmark metrics of a saved run, as the report's JSON text.
#[pyfunction]
#[pyo3(signature = (run_dir, landmark_dir, pixel_size_um=metrics::DEFAULT_PIXEL_SIZE_UM))]
fn evaluate_run(run_dir: PathBuf, landmark_dir: PathBuf, pixel_size_um: f64) -> PyResult<String> {
    let seq = pipeline::load_run(&run_dir).map_err(to_py)?;
    let report = pipeline::evaluate_run(&seq, &landmark_dir, pixel_size_um).map_err(to_py)?;
    Ok(report.to_json())
}

/// Writes a synthetic sequence: `slices/<id>.png` and
/// `landmarks/<id>.csv`. Returns the slice paths in order.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=7, num_slices=10, width=256, height=256))]
fn synth(out_dir: PathBuf, seed: u64, num_slices: usize, width: usize, height: usize) -> PyResult<Vec<String>> {
    let cfg = SynthConfig {
        seed,
        num_slices,
        dims: (width, height),
        ..Default::default()
    };
    let (slices, truth) = generate_sequence(&cfg).map_err(to_py)?;
    let (sdir, ldir) = (out_dir.join("slices"), out_dir.join("landmarks"));
    for d in [&sdir, &ldir] {
        std::fs::create_dir_all(d).map_err(|e| PyOSError::new_err(format!("{}: {e}", d.display())))?;
    }
    let mut paths = Vec::new();
    for ((id, img), lm) in truth.slice_ids.iter().zip(&slices).zip(&truth.landmarks) {
        let p = sdir.join(format!("{id}.png"));
        serialreg_core::imaging::save_png(img, &p).map_err(to_py)?;
        lm.save(ldir.join(format!("{id}.csv"))).map_err(to_py)?;
        paths.push(p.to_string_lossy().into_owned());
    }
    Ok(paths)
}

#[pyfunction]
fn pair_status_names() -> Vec<&'static str> {
    [PairStatus::Ok, PairStatus::AffineOnly, PairStatus::Unregistrable]
        .iter()
        .map(|s| s.as_str())
        .collect()
}

#[pymodule]
fn serialreg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(bspline_weights, m)?)?;
    m.add_function(wrap_pyfunction!(rtre, m)?)?;
    m.add_function(wrap_pyfunction!(config_keys, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(register_pair, m)?)?;
    m.add_function(wrap_pyfunction!(register_sequence, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_run, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(pair_status_names, m)?)?;
    Ok(())
}
