//! JSON-lines dataset manifests.
//!
//! One object per line with `video_id`, exactly one of `features` (file)
//! or `frames` (directory), `captions`, and optional `action` and
//! `justification`. Relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use capcore::data::{CaptionRecord, VisualSource};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

const FIELDS: [&str; 6] = ["video_id", "features", "frames", "captions", "action", "justification"];

#[derive(Serialize, Deserialize)]
struct Line {
    video_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    features: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    frames: Option<String>,
    captions: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    action: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    justification: Option<String>,
}

/// Parses manifest text. Unknown fields are dropped with a warning.
pub fn parse_manifest(text: &str, origin: &str) -> CliResult<Vec<CaptionRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let at = || format!("{origin}:{}", n + 1);
        if line.trim().is_empty() {
            continue;
        }
        let mut obj: Map<String, Value> = serde_json::from_str(line).map_err(|e| CliError::data(at(), e))?;
        let unknown: Vec<String> = obj.keys().filter(|k| !FIELDS.contains(&k.as_str())).cloned().collect();
        for k in unknown {
            log::warn!("{}: ignoring unknown field {k:?}", at());
            obj.remove(&k);
        }
        let l: Line = serde_json::from_value(Value::Object(obj)).map_err(|e| CliError::data(at(), e))?;
        let source = match (l.features, l.frames) {
            (Some(f), None) => VisualSource::Features(f),
            (None, Some(d)) => VisualSource::Frames(d),
            _ => return Err(CliError::data(at(), "exactly one of features or frames is required")),
        };
        let record = CaptionRecord {
            video_id: l.video_id,
            source,
            captions: l.captions,
            action: l.action,
            justification: l.justification,
        };
        record.validate().map_err(|e| CliError::data(at(), e))?;
        out.push(record);
    }
    let mut seen = std::collections::BTreeSet::new();
    for r in &out {
        if !seen.insert(&r.video_id) {
            return Err(CliError::Data(format!("{origin}: duplicate video_id {:?}", r.video_id)));
        }
    }
    Ok(out)
}

/// Canonical text: fixed field order, one record per LF-terminated line.
pub fn format_manifest(records: &[CaptionRecord]) -> String {
    let mut s = String::new();
    for r in records {
        let (features, frames) = match &r.source {
            VisualSource::Features(p) => (Some(p.clone()), None),
            VisualSource::Frames(p) => (None, Some(p.clone())),
        };
        let line = Line {
            video_id: r.video_id.clone(),
            features,
            frames,
            captions: r.captions.clone(),
            action: r.action.clone(),
            justification: r.justification.clone(),
        };
        s.push_str(&serde_json::to_string(&line).expect("manifest lines serialize"));
        s.push('\n');
    }
    s
}

pub fn read_manifest(path: &Path) -> CliResult<Vec<CaptionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::data(path.display(), e))?;
    parse_manifest(&text, &path.display().to_string())
}

pub fn write_manifest(path: &Path, records: &[CaptionRecord]) -> CliResult<()> {
    std::fs::write(path, format_manifest(records)).map_err(|e| CliError::data(path.display(), e))
}

/// Resolves a record path relative to the manifest that named it.
pub fn resolve(manifest: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}
