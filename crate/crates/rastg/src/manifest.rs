//! Versioned JSON dataset manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rastg_core::dataset::{DatasetManifest, Group, SampleRecord};
use rastg_core::skeleton::{JointLayout, LayoutVariant};
use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fsutil;

pub const FORMAT: &str = "rastg-manifest";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize)]
struct ManifestDoc<'a> {
    format: &'static str,
    version: u32,
    layout: LayoutVariant,
    #[serde(skip_serializing_if = "Option::is_none")]
    joint_layout: Option<&'a JointLayout>,
    counts: BTreeMap<Group, usize>,
    records: &'a [SampleRecord],
}

/// A validated manifest together with where it was read from.
#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub path: PathBuf,
    pub manifest: DatasetManifest,
    pub layout: JointLayout,
}

impl LoadedManifest {
    /// Absolute location of a record's sequence file.
    pub fn file_of(&self, record: &SampleRecord) -> PathBuf {
        fsutil::sibling(&self.path, &record.file)
    }
}

pub fn to_json(manifest: &DatasetManifest, layout: &JointLayout) -> Result<String> {
    let doc = ManifestDoc {
        format: FORMAT,
        version: VERSION,
        layout: manifest.layout,
        joint_layout: (manifest.layout == LayoutVariant::Custom).then_some(layout),
        counts: manifest.counts_by_group(),
        records: &manifest.records,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    s.push('\n');
    Ok(s)
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest, layout: &JointLayout) -> Result<()> {
    manifest.validate()?;
    fsutil::write_atomic(path, to_json(manifest, layout)?.as_bytes())
}

/// Parses and validates a manifest document without touching sequence files.
pub fn parse_manifest(path: &Path, text: &str) -> Result<(DatasetManifest, JointLayout)> {
    let bad = |reason: String| Error::format(path, reason);
    let doc: Value = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
    let obj = doc
        .as_object()
        .ok_or_else(|| bad("manifest must be a JSON object".into()))?;
    match obj.get("format").and_then(Value::as_str) {
        Some(FORMAT) => {}
        other => return Err(bad(format!("field format: expected \"{FORMAT}\", found {other:?}"))),
    }
    match obj.get("version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(VERSION) => {}
        other => return Err(bad(format!("field version: unsupported {other:?}, expected {VERSION}"))),
    }
    for key in obj.keys() {
        if !["format", "version", "layout", "joint_layout", "counts", "records"].contains(&key.as_str()) {
            return Err(bad(format!("unknown field `{key}`")));
        }
    }
    let variant: LayoutVariant = serde_json::from_value(obj.get("layout").cloned().unwrap_or(Value::Null))
        .map_err(|e| bad(format!("field layout: {e}")))?;
    let layout = match (variant, obj.get("joint_layout")) {
        (LayoutVariant::Custom, Some(v)) => {
            let l: JointLayout =
                serde_json::from_value(v.clone()).map_err(|e| bad(format!("field joint_layout: {e}")))?;
            l.validate()?;
            l
        }
        (LayoutVariant::Custom, None) => return Err(bad("custom layout requires field joint_layout".into())),
        (v, _) => JointLayout::build(v)?,
    };
    let raw = obj
        .get("records")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("field records: expected an array".into()))?;
    let mut records = Vec::with_capacity(raw.len());
    for (i, r) in raw.iter().enumerate() {
        let id = r
            .get("id")
            .and_then(Value::as_str)
            .map_or_else(|| format!("#{i}"), |s| format!("`{s}`"));
        let rec: SampleRecord = serde_json::from_value(r.clone()).map_err(|e| bad(format!("record {id}: {e}")))?;
        records.push(rec);
    }
    let manifest = DatasetManifest::new(variant, records)?;
    if let Some(counts) = obj.get("counts") {
        let declared: BTreeMap<Group, usize> =
            serde_json::from_value(counts.clone()).map_err(|e| bad(format!("field counts: {e}")))?;
        let actual = manifest.counts_by_group();
        if declared.iter().filter(|(_, n)| **n > 0).ne(actual.iter()) {
            return Err(bad(format!(
                "field counts: declared {declared:?}, records give {actual:?}"
            )));
        }
    }
    Ok((manifest, layout))
}

/// Loads, validates and checks that every referenced sequence file exists.
pub fn load_manifest(path: &Path) -> Result<LoadedManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (manifest, layout) = parse_manifest(path, &text)?;
    let loaded = LoadedManifest {
        path: path.to_path_buf(),
        manifest,
        layout,
    };
    for r in &loaded.manifest.records {
        let f = loaded.file_of(r);
        if !f.is_file() {
            return Err(Error::MissingFile(f));
        }
    }
    Ok(loaded)
}
