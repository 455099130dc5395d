//! Per-sample score sheet: `id,item1,…,item10,total`.

use std::collections::BTreeMap;
use std::path::Path;

use rastg_core::dataset::{DatasetManifest, ScoreAnnotation, NUM_ITEMS};

use crate::error::{Error, Result};
use crate::fsutil;

fn header() -> Vec<String> {
    let mut h = vec!["id".to_string()];
    h.extend((1..=NUM_ITEMS).map(|i| format!("item{i}")));
    h.push("total".into());
    h
}

pub fn write_annotations(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::format(path, e.to_string());
    w.write_record(header()).map_err(fail)?;
    for r in &manifest.records {
        let mut row = vec![r.id.clone()];
        row.extend(r.annotation.items().iter().map(u8::to_string));
        row.push(r.annotation.total().to_string());
        w.write_record(&row).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    fsutil::write_atomic(path, &bytes)
}

/// Reads a score sheet; every row must satisfy the annotation invariants.
pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, ScoreAnnotation>> {
    let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_slice());
    let found: Vec<String> = r
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != header() {
        return Err(Error::format(
            path,
            format!("expected columns {:?}, found {found:?}", header()),
        ));
    }
    let mut out = BTreeMap::new();
    for (line, row) in r.records().enumerate() {
        let row = row.map_err(|e| Error::format(path, e.to_string()))?;
        let id = row[0].to_string();
        let field = |i: usize| -> Result<u8> {
            row[i].trim().parse().map_err(|_| {
                Error::format(
                    path,
                    format!(
                        "row {} (`{id}`): column {}: {:?} is not a score",
                        line + 2,
                        found[i],
                        &row[i]
                    ),
                )
            })
        };
        let items = (1..=NUM_ITEMS).map(field).collect::<Result<Vec<u8>>>()?;
        let total = field(NUM_ITEMS + 1)?;
        let ann = ScoreAnnotation::new(&items, total)
            .map_err(|e| Error::format(path, format!("row {} (`{id}`): {e}", line + 2)))?;
        if out.insert(id.clone(), ann).is_some() {
            return Err(Error::format(path, format!("duplicate id `{id}`")));
        }
    }
    Ok(out)
}
