//! Dataset CSV ingestion and emission.
//!
//! The canonical schema is a header row `x1,...,xp,s,t,v` with UTF-8 text,
//! `.` decimals, and 0/1 study and treatment indicators. Ingestion accepts
//! any column order through an explicit mapping. Emission uses shortest
//! round-trip float formatting so identical samples produce identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::dgp::{Observation, Sample};
use crate::error::{Error, Result};

/// Maps schema roles to CSV header names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMapping {
    pub x: Vec<String>,
    pub s: String,
    pub t: String,
    pub v: String,
}

impl ColumnMapping {
    /// Canonical mapping for covariate dimension `p`: `x1..xp, s, t, v`.
    pub fn canonical(p: usize) -> Self {
        ColumnMapping {
            x: (1..=p).map(|i| format!("x{i}")).collect(),
            s: "s".into(),
            t: "t".into(),
            v: "v".into(),
        }
    }
}

fn parse_cell(raw: &str, row: usize, col: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| {
        Error::Ingestion(format!("row {row}: column '{col}' holds non-numeric value '{raw}'"))
    })
}

fn parse_indicator(raw: &str, row: usize, col: &str) -> Result<u8> {
    let x = parse_cell(raw, row, col)?;
    if x == 0.0 {
        Ok(0)
    } else if x == 1.0 {
        Ok(1)
    } else {
        Err(Error::Ingestion(format!(
            "row {row}: column '{col}' must be 0 or 1, got {x}"
        )))
    }
}

/// Reads a dataset from CSV with the given column mapping. Data rows are
/// numbered from 1 (the header is row 0) in error messages.
pub fn ingest_csv_reader<R: Read>(reader: R, mapping: &ColumnMapping) -> Result<Sample> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let locate = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Ingestion(format!("missing column '{name}'")))
    };
    let x_idx: Vec<usize> = mapping.x.iter().map(|n| locate(n)).collect::<Result<_>>()?;
    let s_idx = locate(&mapping.s)?;
    let t_idx = locate(&mapping.t)?;
    let v_idx = locate(&mapping.v)?;

    let mut observations = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record?;
        let get = |idx: usize, col: &str| -> Result<&str> {
            record
                .get(idx)
                .ok_or_else(|| Error::Ingestion(format!("row {row}: missing cell for '{col}'")))
        };
        let mut x = Vec::with_capacity(x_idx.len());
        for (j, &idx) in x_idx.iter().enumerate() {
            let value = parse_cell(get(idx, &mapping.x[j])?, row, &mapping.x[j])?;
            if !value.is_finite() {
                return Err(Error::Ingestion(format!(
                    "row {row}: column '{}' is not finite",
                    mapping.x[j]
                )));
            }
            x.push(value);
        }
        let s = parse_indicator(get(s_idx, &mapping.s)?, row, &mapping.s)?;
        let t = parse_indicator(get(t_idx, &mapping.t)?, row, &mapping.t)?;
        let v = parse_cell(get(v_idx, &mapping.v)?, row, &mapping.v)?;
        if !v.is_finite() {
            return Err(Error::Ingestion(format!(
                "row {row}: column '{}' is not finite",
                mapping.v
            )));
        }
        observations.push(Observation { x, s, t, v });
    }
    if observations.is_empty() {
        return Err(Error::Ingestion("no data rows".into()));
    }
    let sample = Sample::from_observations(observations)
        .map_err(|e| Error::Ingestion(e.to_string()))?;
    if sample.n0() == 0 || sample.n1() == 0 {
        return Err(Error::Ingestion(format!(
            "empty stratum: n0 = {}, n1 = {}",
            sample.n0(),
            sample.n1()
        )));
    }
    Ok(sample)
}

pub fn ingest_csv(path: &Path, mapping: &ColumnMapping) -> Result<Sample> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Ingestion(format!("cannot open {}: {e}", path.display())))?;
    ingest_csv_reader(file, mapping)
}

/// Writes a dataset in the canonical schema.
pub fn write_sample_csv<W: Write>(sample: &Sample, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mapping = ColumnMapping::canonical(sample.p());
    let mut header: Vec<&str> = mapping.x.iter().map(String::as_str).collect();
    header.extend(["s", "t", "v"]);
    wtr.write_record(&header)?;
    let mut record = Vec::with_capacity(sample.p() + 3);
    for i in 0..sample.n() {
        record.clear();
        for &c in sample.x_row(i) {
            record.push(format_float(c));
        }
        record.push(sample.s(i).to_string());
        record.push(sample.t(i).to_string());
        record.push(format_float(sample.v(i)));
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_sample_csv_path(sample: &Sample, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_sample_csv(sample, std::io::BufWriter::new(file))
}

/// Shortest representation that parses back to the identical double.
pub fn format_float(x: f64) -> String {
    let mut s = format!("{x}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}
