use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Deserializer, Serialize};

use super::aggregate::AggregatedInstance;
use super::schema::AuxSchema;
use super::DataError;
use crate::{Error, Result};

/// One exposure of an ad image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpressionRecord {
    pub image_id: String,
    pub attributes: BTreeMap<String, String>,
    #[serde(deserialize_with = "bool_or_bit")]
    pub clicked: bool,
}

fn bool_or_bit<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<bool, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum B {
        Bool(bool),
        Int(u8),
    }
    match B::deserialize(d)? {
        B::Bool(b) => Ok(b),
        B::Int(0) => Ok(false),
        B::Int(1) => Ok(true),
        B::Int(v) => Err(serde::de::Error::custom(format!("clicked must be 0 or 1, got {v}"))),
    }
}

impl ImpressionRecord {
    /// Every attribute the schema declares must be present.
    pub fn check(&self, schema: &AuxSchema) -> std::result::Result<(), String> {
        if self.image_id.is_empty() {
            return Err("empty image_id".into());
        }
        for a in &schema.attributes {
            if !self.attributes.contains_key(&a.name) {
                return Err(format!("missing attribute `{}`", a.name));
            }
        }
        Ok(())
    }
}

/// A line that could not be turned into a record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReadReport {
    pub accepted: u64,
    pub rejects: Vec<Reject>,
}

impl ReadReport {
    fn reject(&mut self, line: usize, reason: String) {
        log::warn!("{}", DataError::Malformed { line, reason: reason.clone() });
        self.rejects.push(Reject { line, reason });
    }
}

/// Streams JSON Lines records into `sink`. Malformed lines (and records
/// missing schema attributes) are counted and skipped; blank lines are
/// ignored. Line numbers are 1-based.
pub fn read_jsonl<R: BufRead>(
    reader: R,
    schema: Option<&AuxSchema>,
    mut sink: impl FnMut(ImpressionRecord),
) -> Result<ReadReport> {
    let empty = AuxSchema::default();
    let mut report = ReadReport::default();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = match serde_json::from_str::<ImpressionRecord>(&line) {
            Ok(r) => r,
            Err(e) => {
                report.reject(i + 1, e.to_string());
                continue;
            }
        };
        if let Err(reason) = rec.check(schema.unwrap_or(&empty)) {
            report.reject(i + 1, reason);
            continue;
        }
        report.accepted += 1;
        sink(rec);
    }
    Ok(report)
}

/// Streams CSV records into `sink`. The header must contain `image_id` and
/// `clicked`; every other column is an attribute. Line numbers count the
/// header as line 1.
pub fn read_csv<R: std::io::Read>(
    reader: R,
    schema: Option<&AuxSchema>,
    mut sink: impl FnMut(ImpressionRecord),
) -> Result<ReadReport> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Format(format!("csv header: {e}")))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (id_col, click_col) = match (col("image_id"), col("clicked")) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(DataError::Schema("csv header needs `image_id` and `clicked` columns".into()).into()),
    };
    let empty = AuxSchema::default();
    let mut report = ReadReport::default();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                report.reject(line, e.to_string());
                continue;
            }
        };
        let clicked = match row.get(click_col).map(str::trim) {
            Some("1") | Some("true") => true,
            Some("0") | Some("false") => false,
            other => {
                report.reject(line, format!("clicked must be 0/1/true/false, got {other:?}"));
                continue;
            }
        };
        let attributes = headers
            .iter()
            .zip(row.iter())
            .enumerate()
            .filter(|(j, _)| *j != id_col && *j != click_col)
            .map(|(_, (h, v))| (h.to_string(), v.to_string()))
            .collect();
        let rec = ImpressionRecord {
            image_id: row.get(id_col).unwrap_or_default().to_string(),
            attributes,
            clicked,
        };
        if let Err(reason) = rec.check(schema.unwrap_or(&empty)) {
            report.reject(line, reason);
            continue;
        }
        report.accepted += 1;
        sink(rec);
    }
    Ok(report)
}

pub fn write_jsonl<'a, W: Write>(mut w: W, records: impl IntoIterator<Item = &'a ImpressionRecord>) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

pub fn write_instances_jsonl<W: Write>(mut w: W, instances: &[AggregatedInstance]) -> Result<()> {
    for r in instances {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

/// Reads aggregated instances, rejecting any whose `y` is not exactly
/// `clicks / w`.
pub fn read_instances_jsonl<R: BufRead>(reader: R) -> Result<Vec<AggregatedInstance>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: AggregatedInstance = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: i + 1,
            reason: e.to_string(),
        })?;
        inst.check().map_err(|reason| DataError::Malformed { line: i + 1, reason })?;
        out.push(inst);
    }
    Ok(out)
}
