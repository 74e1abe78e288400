// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::circuit::Method;
use crate::error::{Error, Result};
use crate::influence::InfluenceTable;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub(crate) fn write_file(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn fixed3(v: f64) -> String {
    let s = format!("{v:.3}");
    if s == "-0.000" {
        "0.000".into()
    } else {
        s
    }
}

/// Header `token,L0,...,L{n-1}`, then one row per token position with values
/// at three decimals. Repeated words keep their own rows.
pub fn influence_csv(table: &InfluenceTable) -> Result<String> {
    table.validate()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["token".to_string()];
    header.extend((0..table.n_layers).map(|l| format!("L{l}")));
    w.write_record(&header)?;
    for (token, row) in table.tokens.iter().zip(&table.values) {
        let mut rec = vec![token.clone()];
        rec.extend(row.iter().map(|&v| fixed3(v)));
        w.write_record(&rec)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Input(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

pub fn export_influence_csv(table: &InfluenceTable, path: impl AsRef<Path>) -> Result<()> {
    write_file(path, influence_csv(table)?.as_bytes())
}

/// Parses the layout written by [`influence_csv`]. Values carry the file's
/// three-decimal precision; method, empty-layer flags and damping are not
/// stored.
pub fn parse_influence_csv(text: &str) -> Result<InfluenceTable> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.get(0) != Some("token") {
        return Err(Error::Input(
            "influence csv must start with a `token` column".into(),
        ));
    }
    for (i, h) in header.iter().skip(1).enumerate() {
        if h != format!("L{i}") {
            return Err(Error::Input(format!(
                "unexpected influence csv column `{h}`"
            )));
        }
    }
    let n_layers = header.len() - 1;
    let mut tokens = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        tokens.push(rec[0].to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|e| Error::Input(format!("influence value `{v}`: {e}")))
            })
            .collect::<Result<Vec<f64>>>()?;
        values.push(row);
    }
    let table = InfluenceTable {
        tokens,
        n_layers,
        values,
        method: None,
        empty_layers: Vec::new(),
        damping: vec![None; n_layers],
    };
    table.validate()?;
    Ok(table)
}

pub fn load_influence_csv(path: impl AsRef<Path>) -> Result<InfluenceTable> {
    parse_influence_csv(&read_text(path)?)
}

/// One row of `faithfulness.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessRow {
    pub method: Method,
    pub n_requested: usize,
    pub n_raw_edges: usize,
    pub n_pruned_edges: usize,
    pub n_nodes: usize,
    pub faithfulness_raw: f64,
    pub faithfulness_normalized: f64,
}

pub fn faithfulness_csv(rows: &[FaithfulnessRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record([
            "method",
            "n_requested",
            "n_raw_edges",
            "n_pruned_edges",
            "n_nodes",
            "faithfulness_raw",
            "faithfulness_normalized",
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Input(format!("csv buffer: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

pub fn parse_faithfulness_csv(text: &str) -> Result<Vec<FaithfulnessRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Every table of a batch at full precision.
pub fn influence_tables_json(tables: &[InfluenceTable]) -> Result<String> {
    Ok(serde_json::to_string_pretty(tables)?)
}

pub fn parse_influence_tables_json(text: &str) -> Result<Vec<InfluenceTable>> {
    let tables: Vec<InfluenceTable> = serde_json::from_str(text)?;
    for t in &tables {
        t.validate()?;
    }
    Ok(tables)
}
