//! On-disk designs: a JSON manifest listing per-curve CSV files.
//!
//! ```json
//! {"format_version": 1, "step": 0.03125, "lags": [1.0],
//!  "observations": [{"y": "obs0_y.csv", "x": ["obs0_x0.csv"], "z": [0.3]}]}
//! ```
//!
//! Curve paths are relative to the manifest's directory. Values are written
//! in shortest round-trip form, so save/load reproduces a design exactly.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{FcmError, Result};
use crate::grids::{read_csv, write_csv, GridFunction, GRID_MULTIPLE_TOL};
use crate::model::{Design, Observation};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationEntry {
    pub y: PathBuf,
    pub x: Vec<PathBuf>,
    #[serde(default)]
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub step: f64,
    pub lags: Vec<f64>,
    pub observations: Vec<ObservationEntry>,
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| FcmError::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| FcmError::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| FcmError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| FcmError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| FcmError::InvalidArgument(format!("serialization failed: {e}")))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn save_curve(path: &Path, f: &GridFunction) -> Result<()> {
    let mut buf = Vec::new();
    write_csv(f, &mut buf)?;
    write_atomic(path, &buf)
}

/// Writes one CSV per curve into `dir` plus `dir/manifest.json`; returns the
/// manifest path.
pub fn save_design(design: &Design, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| FcmError::io(dir, e))?;
    let mut entries = Vec::with_capacity(design.n_obs());
    for (i, o) in design.observations().iter().enumerate() {
        let y = PathBuf::from(format!("obs{i}_y.csv"));
        save_curve(&dir.join(&y), &o.y)?;
        let mut xs = Vec::with_capacity(o.x.len());
        for (j, x) in o.x.iter().enumerate() {
            let p = PathBuf::from(format!("obs{i}_x{j}.csv"));
            save_curve(&dir.join(&p), x)?;
            xs.push(p);
        }
        entries.push(ObservationEntry {
            y,
            x: xs,
            z: o.z.clone(),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        step: design.step(),
        lags: design.lags().to_vec(),
        observations: entries,
    };
    let path = dir.join("manifest.json");
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| FcmError::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| FcmError::Manifest {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(FcmError::Manifest {
            path: path.display().to_string(),
            message: format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                manifest.format_version
            ),
        });
    }
    Ok(manifest)
}

/// Reads a curve and puts it on the manifest's exact step (the CSV spacing
/// must agree to within the grid tolerance).
fn load_curve(path: &Path, step: f64) -> Result<GridFunction> {
    let f = read_csv(path)?;
    if (f.step() - step).abs() > GRID_MULTIPLE_TOL * step {
        return Err(FcmError::GridMismatch(format!(
            "{}: spacing {} differs from manifest step {step}",
            path.display(),
            f.step()
        )));
    }
    let start = f.start();
    GridFunction::new(if start.abs() < GRID_MULTIPLE_TOL * step { 0.0 } else { start }, step, f.into_values())
}

pub fn load_design(path: &Path) -> Result<Design> {
    let manifest = read_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let observations = manifest
        .observations
        .iter()
        .map(|e| {
            let y = load_curve(&base.join(&e.y), manifest.step)?;
            let x = e
                .x
                .iter()
                .map(|p| load_curve(&base.join(p), manifest.step))
                .collect::<Result<Vec<_>>>()?;
            Ok(Observation::new(y, x, e.z.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Design::new(observations, manifest.lags, manifest.step)
}
