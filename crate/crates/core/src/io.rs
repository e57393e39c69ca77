//! File formats: JSON-lines instance and solution files, and the CSV of
//! externally computed reference lengths.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::instance::Instance;
use crate::solution::Route;

/// Reads one instance per non-blank line.
pub fn read_instances(path: impl AsRef<Path>) -> Result<Vec<Instance>> {
    parse_lines(BufReader::new(File::open(path)?))
}

pub fn parse_lines<T: for<'de> Deserialize<'de>>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_instances(path: impl AsRef<Path>, instances: &[Instance]) -> Result<()> {
    write_lines(path, instances)
}

fn write_lines<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| CoreError::Internal(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// One solved instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolutionRecord {
    pub instance_id: usize,
    pub sequence: Route,
    pub length: f64,
}

pub fn read_solutions(path: impl AsRef<Path>) -> Result<Vec<SolutionRecord>> {
    parse_lines(BufReader::new(File::open(path)?))
}

pub fn write_solutions(path: impl AsRef<Path>, records: &[SolutionRecord]) -> Result<()> {
    write_lines(path, records)
}

/// A row of the external reference file (`instance_id,method,length`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub instance_id: usize,
    pub method: String,
    pub length: f64,
}

/// Reference lengths grouped by method, in first-appearance order of methods.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct References {
    pub methods: Vec<(String, BTreeMap<usize, f64>)>,
}

impl References {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut refs = References::default();
        for (idx, row) in rdr.deserialize::<ReferenceRow>().enumerate() {
            // header occupies line 1
            let row = row.map_err(|e| CoreError::Parse { line: idx + 2, message: e.to_string() })?;
            let slot = match refs.methods.iter().position(|(m, _)| *m == row.method) {
                Some(p) => p,
                None => {
                    refs.methods.push((row.method.clone(), BTreeMap::new()));
                    refs.methods.len() - 1
                }
            };
            if refs.methods[slot].1.insert(row.instance_id, row.length).is_some() {
                return Err(CoreError::Parse {
                    line: idx + 2,
                    message: format!("duplicate entry for instance {} / {}", row.instance_id, row.method),
                });
            }
        }
        Ok(refs)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for (method, lengths) in &self.methods {
            for (&instance_id, &length) in lengths {
                w.serialize(ReferenceRow { instance_id, method: method.clone(), length })
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Per-instance lengths of one method, checked to cover exactly `0..count`.
    pub fn lengths_for(&self, method: &str, count: usize) -> Result<Vec<f64>> {
        let (_, lengths) = self
            .methods
            .iter()
            .find(|(m, _)| m == method)
            .ok_or_else(|| CoreError::Domain(format!("no reference rows for method {method}")))?;
        if lengths.len() != count || lengths.keys().next_back().is_some_and(|&k| k + 1 != count) {
            return Err(CoreError::Domain(format!(
                "method {method} has {} reference rows for {count} instances",
                lengths.len()
            )));
        }
        Ok(lengths.values().copied().collect())
    }
}

fn csv_err(e: csv::Error) -> CoreError {
    CoreError::Internal(e.to_string())
}
