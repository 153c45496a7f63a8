//! Result records and their CSV / JSON encodings.
//!
//! CSV column order: `scenario,estimator,distance,angle_deg,snr_db,metric,value,stderr,provenance,trials`.
//! Empty `snr_db`, `stderr` or `trials` cells mean "not applicable".

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Analytic,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub scenario: String,
    /// Estimator or bound tag, or `sim` / `channel` for cell-level quantities.
    pub estimator: String,
    pub distance: f64,
    pub angle_deg: f64,
    pub snr_db: Option<f64>,
    pub metric: String,
    pub value: f64,
    pub stderr: Option<f64>,
    pub provenance: Provenance,
    pub trials: Option<usize>,
}

pub const CSV_HEADER: [&str; 10] = [
    "scenario", "estimator", "distance", "angle_deg", "snr_db", "metric", "value", "stderr", "provenance", "trials",
];

pub fn write_csv<W: std::io::Write>(records: &[ResultRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let io = |e: std::io::Error| Error::io("csv output", e);
    w.write_record(CSV_HEADER).map_err(|e| Error::io("csv output", e.into()))?;
    for r in records {
        w.serialize(r).map_err(|e| Error::io("csv output", e.into()))?;
    }
    w.flush().map_err(io)
}

pub fn save_csv(records: &[ResultRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_csv(records, std::io::BufWriter::new(f))
}

pub fn read_csv<R: std::io::Read>(input: R, path: &Path) -> Result<Vec<ResultRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(|e| parse_err(path, e))?.clone();
    if headers.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            reason: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    r.deserialize().map(|row| row.map_err(|e| parse_err(path, e))).collect()
}

pub fn load_csv(path: &Path) -> Result<Vec<ResultRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(std::io::BufReader::new(f), path)
}

fn parse_err(path: &Path, e: csv::Error) -> Error {
    Error::Parse { path: path.to_path_buf(), reason: e.to_string() }
}

pub fn save_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Numerical(format!("JSON encoding: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// File name of the per-angle table.
pub fn table_name(angle_deg: f64) -> String {
    let s = format!("{angle_deg:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    format!("angle_{}.csv", s.replace('-', "m").replace('.', "p"))
}

/// Split records into one table per bearing angle, rows sorted by
/// (estimator, metric, provenance, snr, distance). `angles_deg` lists the
/// tables that must exist even when they receive no rows.
pub fn split_by_angle(records: &[ResultRecord], angles_deg: &[f64]) -> Vec<(f64, Vec<ResultRecord>)> {
    let mut tables: BTreeMap<u64, (f64, Vec<ResultRecord>)> = BTreeMap::new();
    let key = |a: f64| ((a * 1e9).round() + 0.0).to_bits();
    for &a in angles_deg {
        tables.entry(key(a)).or_insert((a, Vec::new()));
    }
    for r in records {
        tables.entry(key(r.angle_deg)).or_insert((r.angle_deg, Vec::new())).1.push(r.clone());
    }
    let mut out: Vec<(f64, Vec<ResultRecord>)> = tables.into_values().collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (_, rows) in &mut out {
        rows.sort_by(|a, b| {
            (a.estimator.as_str(), a.metric.as_str(), a.provenance as u8)
                .cmp(&(b.estimator.as_str(), b.metric.as_str(), b.provenance as u8))
                .then(a.snr_db.unwrap_or(f64::NEG_INFINITY).total_cmp(&b.snr_db.unwrap_or(f64::NEG_INFINITY)))
                .then(a.distance.total_cmp(&b.distance))
        });
    }
    out
}

/// Write the per-angle tables into `dir` and return their paths.
pub fn write_tables(records: &[ResultRecord], angles_deg: &[f64], dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (angle, rows) in split_by_angle(records, angles_deg) {
        let path = dir.join(table_name(angle));
        save_csv(&rows, &path)?;
        paths.push(path);
    }
    Ok(paths)
}
