//! Line-delimited JSON manifests.
//!
//! An optional first line `{"format_version": 1, "split": "query"}` is the
//! header; every other non-blank line is one [`Sample`]. Records may omit
//! `vehicle_id` and `camera_id` when the file name follows the
//! `0001_c001_...` convention.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::EvalError;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Query,
    Gallery,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<Vec<f64>>,
    pub vehicle_id: usize,
    pub camera_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub view_id: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// From the header line, if present.
    pub split: Option<Split>,
    pub samples: Vec<Sample>,
    /// Directory that relative image paths resolve against.
    pub root: PathBuf,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    #[serde(default)]
    split: Option<Split>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    #[serde(default)]
    path: Option<String>,
    #[serde(default)]
    feature: Option<Vec<f64>>,
    #[serde(default)]
    vehicle_id: Option<i64>,
    #[serde(default)]
    camera_id: Option<i64>,
    #[serde(default)]
    view_id: Option<i64>,
}

static VERI_NAME: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\d+)_c(\d+)_").expect("valid regex"));

/// `(vehicle_id, camera_id)` from a name such as `0001_c001_00016450_0.jpg`.
pub fn parse_veri_filename(path: &str) -> Option<(usize, usize)> {
    let name = Path::new(path).file_name()?.to_str()?;
    let caps = VERI_NAME.captures(name)?;
    Some((caps[1].parse().ok()?, caps[2].parse().ok()?))
}

fn non_negative(v: i64, what: &str) -> Result<usize, String> {
    usize::try_from(v).map_err(|_| format!("{what} must be non-negative, got {v}"))
}

fn parse_record(text: &str) -> Result<Sample, String> {
    let r: Record = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if r.path.is_none() && r.feature.is_none() {
        return Err("record needs a path or a feature".into());
    }
    if let Some(f) = &r.feature {
        if f.is_empty() {
            return Err("feature is empty".into());
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err("feature has non-finite values".into());
        }
    }
    let parsed = r.path.as_deref().and_then(parse_veri_filename);
    let vehicle_id = match (r.vehicle_id, parsed) {
        (Some(v), _) => non_negative(v, "vehicle_id")?,
        (None, Some((v, _))) => v,
        (None, None) => return Err("missing vehicle_id".into()),
    };
    let camera_id = match (r.camera_id, parsed) {
        (Some(v), _) => non_negative(v, "camera_id")?,
        (None, Some((_, c))) => c,
        (None, None) => return Err("missing camera_id".into()),
    };
    let view_id = r.view_id.map(|v| non_negative(v, "view_id")).transpose()?;
    Ok(Sample {
        path: r.path,
        feature: r.feature,
        vehicle_id,
        camera_id,
        view_id,
    })
}

/// Parses manifest text; `root` is recorded for resolving image paths.
pub fn parse_manifest(text: &str, root: &Path) -> Result<Manifest, EvalError> {
    let err = |line: usize, message: String| EvalError::Manifest { line, message };
    let mut split = None;
    let mut samples = Vec::new();
    let mut seen_paths = HashSet::new();
    let mut dim: Option<(usize, usize)> = None;
    let mut first = true;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        if std::mem::take(&mut first) && raw.contains("\"format_version\"") {
            let h: Header = serde_json::from_str(raw).map_err(|e| err(line, format!("bad header: {e}")))?;
            if h.format_version != MANIFEST_FORMAT_VERSION {
                return Err(err(
                    line,
                    format!(
                        "unsupported format_version {} (expected {MANIFEST_FORMAT_VERSION})",
                        h.format_version
                    ),
                ));
            }
            split = h.split;
            continue;
        }
        let s = parse_record(raw).map_err(|m| err(line, m))?;
        if let Some(p) = &s.path {
            if !seen_paths.insert(p.clone()) {
                return Err(err(line, format!("duplicate path {p}")));
            }
        }
        if let Some(f) = &s.feature {
            match dim {
                None => dim = Some((f.len(), line)),
                Some((d, at)) if d != f.len() => {
                    return Err(err(
                        line,
                        format!("feature dim {} differs from {d} on line {at}", f.len()),
                    ));
                }
                _ => {}
            }
        }
        samples.push(s);
    }
    if samples.is_empty() {
        return Err(EvalError::EmptyManifest);
    }
    Ok(Manifest {
        split,
        samples,
        root: root.to_path_buf(),
    })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest, EvalError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, &root)
}

/// Serialises with a header line.
pub fn format_manifest(split: Option<Split>, samples: &[Sample]) -> String {
    let header = serde_json::json!({ "format_version": MANIFEST_FORMAT_VERSION, "split": split });
    let mut out = header.to_string();
    out.push('\n');
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serialises"));
        out.push('\n');
    }
    out
}
