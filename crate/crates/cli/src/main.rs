use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use serialreg::error::Error;
use serialreg::imaging::{load_image, save_png, warp, LoadOptions, ScalarImage};
use serialreg::matching::import_matches;
use serialreg::metrics::MetricsReport;
use serialreg::pipeline::{
    evaluate_run, export_volume, load_run, pair_stem, register_pair, register_sequence, save_run,
    warp_to_reference, ExportMode, PairRegistration, PairStatus, PipelineConfig, CONFIG_KEYS,
};
use serialreg::synth::{degrade, generate_sequence, AffineJitter, Degradation, SynthConfig};

const EXIT_PARTIAL: u8 = 2;
const EXIT_INVALID: u8 = 3;

const BOOL_KEYS: &[&str] = &[
    "bspline",
    "bspline-normalize-gradient",
    "bspline-backtracking",
    "legacy-two-pass",
    "raw-volume",
];

enum Failure {
    Invalid(String),
    Other(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Io { .. } | Error::ImageEncode { .. } => Failure::Other(e.to_string()),
            _ => Failure::Invalid(e.to_string()),
        }
    }
}

type CmdResult = Result<u8, Failure>;

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .help("key = value configuration file; flags below override it")];
    for &(key, help) in CONFIG_KEYS {
        let mut arg = Arg::new(key).long(key).help(help).help_heading("Configuration");
        if BOOL_KEYS.contains(&key) {
            arg = arg
                .value_name("BOOL")
                .num_args(0..=1)
                .require_equals(true)
                .default_missing_value("true");
        } else {
            arg = arg.value_name("VALUE");
        }
        args.push(arg);
    }
    args
}

fn build_config(m: &ArgMatches) -> Result<PipelineConfig, Failure> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => {
            require_exists(p)?;
            PipelineConfig::load(p)?
        }
        None => PipelineConfig::default(),
    };
    for &(key, _) in CONFIG_KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn require_exists(p: &Path) -> Result<(), Failure> {
    if p.exists() {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("{} does not exist", p.display())))
    }
}

fn slice_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn load(path: &Path) -> Result<ScalarImage, Failure> {
    require_exists(path)?;
    Ok(load_image(path, LoadOptions::default())?)
}

/// Positional slice paths, or the PNG/TIFF files of `--input-dir` sorted
/// by name.
fn slice_paths(m: &ArgMatches) -> Result<Vec<PathBuf>, Failure> {
    let mut paths: Vec<PathBuf> = m
        .get_many::<PathBuf>("slices")
        .map(|v| v.cloned().collect())
        .unwrap_or_default();
    if let Some(dir) = m.get_one::<PathBuf>("input-dir") {
        require_exists(dir)?;
        let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Failure::Other(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|x| {
                        let x = x.to_string_lossy().to_ascii_lowercase();
                        matches!(x.as_str(), "png" | "tif" | "tiff")
                    })
                    .unwrap_or(false)
            })
            .collect();
        found.sort();
        paths.extend(found);
    }
    Ok(paths)
}

fn load_slices(paths: &[PathBuf]) -> Result<Vec<(String, ScalarImage)>, Failure> {
    let mut out: Vec<(String, ScalarImage)> = Vec::with_capacity(paths.len());
    for p in paths {
        let id = slice_id(p);
        if out.iter().any(|(other, _)| *other == id) {
            return Err(Failure::Invalid(format!("duplicate slice id `{id}`")));
        }
        out.push((id, load(p)?));
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Failure::Other(format!("{}: {e}", parent.display())))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::Other(format!("{}: {e}", path.display())))
}

fn write_metrics(report: &MetricsReport, dir: &Path) -> Result<(), Failure> {
    write_text(&dir.join("metrics.json"), &report.to_json())?;
    write_text(&dir.join("metrics.csv"), &report.to_csv())?;
    write_text(&dir.join("metrics_landmarks.csv"), &report.landmarks_csv())?;
    println!(
        "AMrTRE {:.6}  MMrTRE {:.6}  AMxrTRE {:.6}  R_avg {:.4}  AMean_D {:.4} px ({:.4} um)",
        report.amrtre, report.mmrtre, report.amxrtre, report.r_avg, report.amean_d_px, report.amean_d_um
    );
    Ok(())
}

fn cmd_register_pair(m: &ArgMatches) -> CmdResult {
    let cfg = build_config(m)?;
    let fixed_path = m.get_one::<PathBuf>("fixed").unwrap();
    let moving_path = m.get_one::<PathBuf>("moving").unwrap();
    let out = m.get_one::<PathBuf>("out").unwrap();
    let fixed = load(fixed_path)?;
    let moving = load(moving_path)?;
    let (fid, mid) = (slice_id(fixed_path), slice_id(moving_path));
    let matches = match m.get_one::<PathBuf>("matches") {
        Some(p) => {
            require_exists(p)?;
            Some(import_matches(p, fixed.dims(), moving.dims())?)
        }
        None => None,
    };
    let reg = match register_pair(&fid, &mid, &fixed, &moving, &cfg, matches.as_ref()) {
        Ok(r) => r,
        Err(e @ (Error::Unregistrable(_) | Error::DegenerateConfiguration(_) | Error::DegenerateContent(_))) => {
            PairRegistration::unregistrable(&fid, &mid, fixed.dims(), moving.dims(), cfg.ransac.seed, e.to_string())
        }
        Err(e) => return Err(e.into()),
    };
    reg.save(out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    if reg.status == PairStatus::Unregistrable {
        eprintln!("error: {}", reg.diagnostic.as_deref().unwrap_or("pair unregistrable"));
        return Ok(EXIT_INVALID);
    }
    if let Some(path) = m.get_one::<PathBuf>("warped") {
        let map = reg.fixed_to_moving()?;
        let (w, h) = fixed.dims();
        save_png(&warp(&moving, &map, w, h, cfg.optimizer.fill), path)?;
    }
    println!(
        "{}: {} rotation {} deg, {} inliers, NCC {:?} -> {:?}",
        reg.stem(),
        reg.status.as_str(),
        reg.rotation_deg,
        reg.inlier_count,
        reg.ncc_affine,
        reg.ncc_final
    );
    Ok(0)
}

fn cmd_register_sequence(m: &ArgMatches) -> CmdResult {
    let cfg = build_config(m)?;
    let out = m.get_one::<PathBuf>("out").unwrap();
    let paths = slice_paths(m)?;
    if paths.len() < 2 {
        return Err(Failure::Invalid("register-sequence needs at least two slices".into()));
    }
    let slices = load_slices(&paths)?;
    let external = match m.get_one::<PathBuf>("matches-dir") {
        Some(dir) => {
            require_exists(dir)?;
            let mut map = BTreeMap::new();
            for w in slices.windows(2) {
                let stem = pair_stem(&w[0].0, &w[1].0);
                let p = dir.join(format!("{stem}.csv"));
                if p.exists() {
                    map.insert(stem, import_matches(&p, w[0].1.dims(), w[1].1.dims())?);
                }
            }
            Some(map)
        }
        None => None,
    };

    let seq = register_sequence(&slices, &cfg, external.as_ref())?;
    save_run(&seq, out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    for p in &seq.pairs {
        println!(
            "{}: {} rotation {} deg, {} inliers",
            p.stem(),
            p.status.as_str(),
            p.rotation_deg,
            p.inlier_count
        );
    }
    if !m.get_flag("no-export") {
        let images: Vec<ScalarImage> = slices.into_iter().map(|(_, s)| s).collect();
        let stack = export_volume(&seq, &images, &cfg, &out.join("volume"))?;
        println!("exported {} of {} slices", stack.slices.len(), images.len());
    }
    if let Some(dir) = m.get_one::<PathBuf>("landmarks") {
        require_exists(dir)?;
        write_metrics(&evaluate_run(&seq, dir, cfg.pixel_size_um)?, out)?;
    }
    let breaks = seq.breaks();
    for (f, mv, why) in &breaks {
        eprintln!("chain break at {f} -> {mv}: {why}");
    }
    Ok(if breaks.is_empty() { 0 } else { EXIT_PARTIAL })
}

fn cmd_warp(m: &ArgMatches) -> CmdResult {
    let cfg = build_config(m)?;
    let run = m.get_one::<PathBuf>("run").unwrap();
    require_exists(run)?;
    let out = m.get_one::<PathBuf>("out").unwrap();
    let seq = load_run(run)?;
    let paths = slice_paths(m)?;
    let slices = load_slices(&paths)?;
    let ids: Vec<&str> = slices.iter().map(|(id, _)| id.as_str()).collect();
    if ids != seq.slice_ids.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Failure::Invalid(format!(
            "slices {:?} do not match the run's {:?}",
            ids, seq.slice_ids
        )));
    }
    let images: Vec<ScalarImage> = slices.into_iter().map(|(_, s)| s).collect();
    if let Some(id) = m.get_one::<String>("slice") {
        let k = seq
            .index_of(id)
            .ok_or_else(|| Failure::Invalid(format!("unknown slice `{id}`")))?;
        let mode = if cfg.legacy_two_pass {
            ExportMode::LegacyTwoPass
        } else {
            ExportMode::SinglePass
        };
        save_png(&warp_to_reference(&seq, &images, k, mode, cfg.optimizer.fill)?, out)?;
        return Ok(0);
    }
    let stack = export_volume(&seq, &images, &cfg, out)?;
    println!("exported {} of {} slices", stack.slices.len(), images.len());
    Ok(if seq.breaks().is_empty() { 0 } else { EXIT_PARTIAL })
}

fn cmd_evaluate(m: &ArgMatches) -> CmdResult {
    let run = m.get_one::<PathBuf>("run").unwrap();
    let landmarks = m.get_one::<PathBuf>("landmarks").unwrap();
    require_exists(run)?;
    require_exists(landmarks)?;
    let pixel_size = *m.get_one::<f64>("pixel-size-um").unwrap();
    let seq = load_run(run)?;
    let report = evaluate_run(&seq, landmarks, pixel_size)?;
    let out = m.get_one::<PathBuf>("out").unwrap_or(run);
    write_metrics(&report, out)?;
    Ok(0)
}

fn cmd_synth(m: &ArgMatches) -> CmdResult {
    let out = m.get_one::<PathBuf>("out").unwrap();
    let get = |k: &str| *m.get_one::<f64>(k).unwrap();
    let grid = *m.get_one::<usize>("landmark-grid").unwrap();
    let cfg = SynthConfig {
        seed: *m.get_one::<u64>("seed").unwrap(),
        num_slices: *m.get_one::<usize>("num-slices").unwrap(),
        dims: (*m.get_one::<usize>("width").unwrap(), *m.get_one::<usize>("height").unwrap()),
        texture_scale: get("texture-scale"),
        affine_jitter: AffineJitter {
            max_rotation_deg: get("max-rotation"),
            max_translation: get("max-translation"),
            max_log_scale: get("max-log-scale"),
        },
        deform_amplitude: get("deform-amplitude"),
        deform_spacing: get("deform-spacing"),
        noise_sigma: get("noise-sigma"),
        drift: get("drift"),
        landmark_grid: (grid, grid),
    };
    let (mut slices, truth) = generate_sequence(&cfg)?;
    let tears = *m.get_one::<usize>("tears").unwrap();
    let folds = *m.get_one::<usize>("folds").unwrap();
    let illum = get("illum-gradient");
    if tears > 0 || folds > 0 || illum != 0.0 {
        for (t, s) in slices.iter_mut().enumerate() {
            let d = Degradation {
                tear_count: tears,
                fold_count: folds,
                illum_gradient: illum,
                seed: cfg.seed.wrapping_add(t as u64),
            };
            *s = degrade(s, &d);
        }
    }
    let slice_dir = out.join("slices");
    let lm_dir = out.join("landmarks");
    std::fs::create_dir_all(&slice_dir).map_err(|e| Failure::Other(e.to_string()))?;
    std::fs::create_dir_all(&lm_dir).map_err(|e| Failure::Other(e.to_string()))?;
    for ((id, s), lm) in truth.slice_ids.iter().zip(&slices).zip(&truth.landmarks) {
        save_png(s, slice_dir.join(format!("{id}.png")))?;
        lm.save(lm_dir.join(format!("{id}.csv")))?;
    }
    let truth_json = serde_json_string(&truth)?;
    write_text(&out.join("truth.json"), &truth_json)?;
    let manifest = serde_json_string(&serde_json::json!({
        "generator": "synth",
        "config": cfg,
        "degradation": { "tears": tears, "folds": folds, "illum_gradient": illum },
        "slices": truth.slice_ids,
    }))?;
    write_text(&out.join("manifest.json"), &manifest)?;
    println!("wrote {} slices to {}", slices.len(), slice_dir.display());
    Ok(0)
}

fn serde_json_string<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v)
        .map(|s| s + "\n")
        .map_err(|e| Failure::Other(e.to_string()))
}

fn slice_args() -> [Arg; 2] {
    [
        Arg::new("slices")
            .value_name("SLICE")
            .num_args(0..)
            .value_parser(value_parser!(PathBuf))
            .help("slice images in stack order; ids are the file stems"),
        Arg::new("input-dir")
            .long("input-dir")
            .value_name("DIR")
            .value_parser(value_parser!(PathBuf))
            .help("take every PNG/TIFF in DIR, sorted by file name"),
    ]
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("PATH")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn num_arg<T: Clone + Send + Sync + std::str::FromStr + 'static>(name: &'static str, default: &'static str, help: &'static str) -> Arg
where
    <T as std::str::FromStr>::Err: std::error::Error + Send + Sync + 'static,
{
    Arg::new(name)
        .long(name)
        .value_name("N")
        .default_value(default)
        .value_parser(clap::builder::ValueParser::new(|s: &str| s.parse::<T>()))
        .help(help)
}

fn cli() -> Command {
    Command::new("serialreg")
        .about("Register serial-section images into a 3D stack")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("register-pair")
                .about("Register MOVING onto FIXED and write the transform files")
                .arg(path_arg("fixed", "fixed image").required(true))
                .arg(path_arg("moving", "moving image").required(true))
                .arg(path_arg("out", "output directory").required(true))
                .arg(path_arg("matches", "import correspondences from CSV instead of the rotation sweep"))
                .arg(path_arg("warped", "also write the moving image resampled onto the fixed grid"))
                .args(config_args()),
        )
        .subcommand(
            Command::new("register-sequence")
                .about("Register consecutive slices, chain them to the reference and export the stack")
                .arg(path_arg("out", "run directory").required(true))
                .args(slice_args())
                .arg(path_arg("matches-dir", "per-pair match CSVs named <fixed>__<moving>.csv"))
                .arg(path_arg("landmarks", "landmark directory; also evaluate the run"))
                .arg(
                    Arg::new("no-export")
                        .long("no-export")
                        .action(ArgAction::SetTrue)
                        .help("skip writing the volume"),
                )
                .args(config_args()),
        )
        .subcommand(
            Command::new("warp")
                .about("Resample the slices of a saved run into the reference frame")
                .arg(path_arg("run", "run directory written by register-sequence").required(true))
                .arg(path_arg("out", "output directory, or PNG path with --slice").required(true))
                .arg(Arg::new("slice").long("slice").value_name("ID").help("warp only this slice"))
                .args(slice_args())
                .args(config_args()),
        )
        .subcommand(
            Command::new("evaluate")
                .about("Landmark metrics of a saved run")
                .arg(path_arg("run", "run directory written by register-sequence").required(true))
                .arg(path_arg("landmarks", "directory of <slice_id>.csv landmark files").required(true))
                .arg(path_arg("out", "where to write metrics files (default: the run directory)"))
                .arg(num_arg::<f64>("pixel-size-um", "0.25", "pixel size in micrometres")),
        )
        .subcommand(
            Command::new("synth")
                .about("Generate a synthetic sequence with ground truth")
                .arg(path_arg("out", "output directory").required(true))
                .arg(num_arg::<u64>("seed", "7", "random seed"))
                .arg(num_arg::<usize>("num-slices", "10", "number of slices"))
                .arg(num_arg::<usize>("width", "256", "slice width"))
                .arg(num_arg::<usize>("height", "256", "slice height"))
                .arg(num_arg::<f64>("texture-scale", "12", "blob size of the base texture in pixels"))
                .arg(num_arg::<f64>("max-rotation", "5", "rotation jitter bound in degrees"))
                .arg(num_arg::<f64>("max-translation", "8", "translation jitter bound in pixels"))
                .arg(num_arg::<f64>("max-log-scale", "0.03", "log-scale jitter bound"))
                .arg(num_arg::<f64>("deform-amplitude", "6", "largest control displacement in pixels"))
                .arg(num_arg::<f64>("deform-spacing", "64", "control spacing of the true field"))
                .arg(num_arg::<f64>("noise-sigma", "0.01", "additive Gaussian noise"))
                .arg(num_arg::<f64>("drift", "0.02", "per-slice structural change"))
                .arg(num_arg::<usize>("landmark-grid", "8", "landmarks per side"))
                .arg(num_arg::<usize>("tears", "0", "tear artefacts per slice"))
                .arg(num_arg::<usize>("folds", "0", "fold artefacts per slice"))
                .arg(num_arg::<f64>("illum-gradient", "0", "illumination ramp across x")),
        )
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let result = match matches.subcommand() {
        Some(("register-pair", m)) => cmd_register_pair(m),
        Some(("register-sequence", m)) => cmd_register_sequence(m),
        Some(("warp", m)) => cmd_warp(m),
        Some(("evaluate", m)) => cmd_evaluate(m),
        Some(("synth", m)) => cmd_synth(m),
        _ => unreachable!("subcommand required"),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_INVALID)
        }
        Err(Failure::Other(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
