//! Files written by the pipeline and the command-line tool.
//!
//! JSON artifacts carry `kind`, `tool` and `config_hash` at top level. Model
//! files keep the model format and record the same two values under
//! `training`. JSONL and CSV files get a `<file>.meta.json` sidecar with the
//! provenance and, for CSV, the expected columns.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::load_model;
use crate::provenance::TOOL_VERSION;

pub const SIDECAR_SUFFIX: &str = ".meta.json";

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(SIDECAR_SUFFIX);
    PathBuf::from(s)
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn pretty(value: &Value) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("json values serialize");
    text.push('\n');
    text
}

/// `payload` (an object) with `kind`, `tool` and `config_hash` prepended.
pub fn stamp(kind: &str, config_hash: &str, payload: Value) -> Value {
    let mut out = Map::new();
    out.insert("kind".into(), kind.into());
    out.insert("tool".into(), TOOL_VERSION.into());
    out.insert("config_hash".into(), config_hash.into());
    match payload {
        Value::Object(fields) => out.extend(fields),
        other => {
            out.insert("value".into(), other);
        }
    }
    Value::Object(out)
}

pub fn write_json(path: &Path, kind: &str, config_hash: &str, payload: Value) -> Result<()> {
    write_text(path, &pretty(&stamp(kind, config_hash, payload)))
}

/// Writes `content` and its sidecar. `columns` is the CSV header, if any.
pub fn write_with_sidecar(
    path: &Path,
    kind: &str,
    config_hash: &str,
    content: &str,
    columns: Option<&[&str]>,
    extra: Value,
) -> Result<()> {
    write_text(path, content)?;
    let mut meta = json!({
        "format": if columns.is_some() { "csv" } else { "jsonl" },
    });
    if let Some(cols) = columns {
        meta["columns"] = json!(cols);
    }
    if let (Value::Object(m), Value::Object(e)) = (&mut meta, extra) {
        m.extend(e);
    }
    write_text(&sidecar_path(path), &pretty(&stamp(kind, config_hash, meta)))
}

/// Required top-level keys per JSON artifact kind, beyond the stamp.
fn required_keys(kind: &str) -> &'static [&'static str] {
    match kind {
        "stability" => &["direction", "reports", "has_relevant"],
        "fim" => &["entries"],
        "poison_report" => &["budget", "entries"],
        "clone_report" => &["clean", "poisoned", "clean_summary", "detectability"],
        "summary" => &["vulnerability", "defence", "attack"],
        "report" => &["artifacts"],
        _ => &[],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactInfo {
    pub path: PathBuf,
    pub kind: String,
    pub config_hash: String,
}

fn field<'a>(value: &'a Value, key: &str, path: &Path) -> Result<&'a Value> {
    value
        .get(key)
        .ok_or_else(|| Error::schema(format!("{}:{key}", path.display()), "missing field"))
}

fn str_field(value: &Value, key: &str, path: &Path) -> Result<String> {
    field(value, key, path)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| Error::schema(format!("{}:{key}", path.display()), "expected a string"))
}

fn parse_json(path: &Path, text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| Error::schema(path.display().to_string(), e.to_string()))
}

/// Validates one artifact against its schema and returns its provenance.
///
/// Sidecars are validated together with the file they describe; passing a
/// sidecar directly validates the described file.
pub fn validate_artifact(path: &Path) -> Result<ArtifactInfo> {
    let name = path.to_string_lossy();
    if let Some(data) = name.strip_suffix(SIDECAR_SUFFIX) {
        return validate_tabular(Path::new(data));
    }
    if name.ends_with(".jsonl") || name.ends_with(".csv") {
        return validate_tabular(path);
    }
    let text = read_text(path)?;
    let value = parse_json(path, &text)?;
    if value.get("format_version").is_some() {
        let stack = load_model(&text)?;
        return Ok(ArtifactInfo {
            path: path.to_path_buf(),
            kind: "model".into(),
            config_hash: stack.meta.training.config_hash,
        });
    }
    let kind = str_field(&value, "kind", path)?;
    str_field(&value, "tool", path)?;
    let config_hash = str_field(&value, "config_hash", path)?;
    for key in required_keys(&kind) {
        field(&value, key, path)?;
    }
    Ok(ArtifactInfo {
        path: path.to_path_buf(),
        kind,
        config_hash,
    })
}

fn validate_tabular(path: &Path) -> Result<ArtifactInfo> {
    let meta_path = sidecar_path(path);
    let meta = parse_json(&meta_path, &read_text(&meta_path)?)?;
    let kind = str_field(&meta, "kind", &meta_path)?;
    str_field(&meta, "tool", &meta_path)?;
    let config_hash = str_field(&meta, "config_hash", &meta_path)?;
    let text = read_text(path)?;
    match str_field(&meta, "format", &meta_path)?.as_str() {
        "jsonl" => {
            Dataset::from_jsonl(&text)?;
        }
        "csv" => {
            let columns: Vec<String> = field(&meta, "columns", &meta_path)?
                .as_array()
                .and_then(|a| a.iter().map(|c| c.as_str().map(str::to_string)).collect())
                .ok_or_else(|| Error::schema(format!("{}:columns", meta_path.display()), "expected strings"))?;
            validate_csv(path, &text, &columns)?;
        }
        other => {
            return Err(Error::schema(
                format!("{}:format", meta_path.display()),
                format!("unknown format `{other}`"),
            ))
        }
    }
    Ok(ArtifactInfo {
        path: path.to_path_buf(),
        kind,
        config_hash,
    })
}

/// Header must match `columns`; every cell must be a number, empty, or (in
/// a `condition` column) a word.
fn validate_csv(path: &Path, text: &str, columns: &[String]) -> Result<()> {
    let at = |line: Option<csv::Position>| match line {
        Some(p) => format!("{}:line {}", path.display(), p.line()),
        None => path.display().to_string(),
    };
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::schema(at(None), e.to_string()))?.clone();
    if header.iter().ne(columns.iter().map(String::as_str)) {
        return Err(Error::schema(
            format!("{}:header", path.display()),
            format!("expected {columns:?}, found {:?}", header.iter().collect::<Vec<_>>()),
        ));
    }
    for record in reader.records() {
        let record = record.map_err(|e| Error::schema(at(e.position().cloned()), e.to_string()))?;
        let line = record.position().cloned();
        if record.len() != columns.len() {
            return Err(Error::schema(at(line), format!("{} cells, expected {}", record.len(), columns.len())));
        }
        for (cell, col) in record.iter().zip(columns) {
            let ok = cell.is_empty() || cell.parse::<f64>().is_ok() || col == "condition";
            if !ok {
                return Err(Error::schema(at(line), format!("column {col}: `{cell}` is not a number")));
            }
        }
    }
    Ok(())
}

/// Every artifact in `dir` (sidecars folded into their data files), sorted
/// by file name.
pub fn scan_bundle(dir: &Path) -> Result<Vec<ArtifactInfo>> {
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    names.sort();
    names
        .iter()
        .filter(|p| p.is_file())
        .filter(|p| {
            let s = p.to_string_lossy();
            !s.ends_with(SIDECAR_SUFFIX)
                && (s.ends_with(".json") || s.ends_with(".jsonl") || s.ends_with(".csv"))
        })
        .map(|p| validate_artifact(p))
        .collect()
}

/// The single config hash shared by `artifacts`.
pub fn common_hash(artifacts: &[ArtifactInfo]) -> Result<String> {
    let first = artifacts
        .first()
        .ok_or_else(|| Error::InvalidArgument("bundle contains no artifacts".into()))?;
    for a in artifacts {
        if a.config_hash != first.config_hash {
            return Err(Error::HashMismatch(format!(
                "{} has {}, {} has {}",
                first.path.display(),
                first.config_hash,
                a.path.display(),
                a.config_hash
            )));
        }
    }
    Ok(first.config_hash.clone())
}
