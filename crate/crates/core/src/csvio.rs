//! CSV helpers shared by batch export and diagnostics reports.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Formats like C's `%.8e`: eight fractional digits and a signed exponent
/// with at least two digits.
pub fn fmt_e8(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{x:.8e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

/// Writes a header and rows of already-formatted fields.
pub fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(|e| Error::Csv(e.to_string()))?;
    for row in rows {
        w.write_record(row).map_err(|e| Error::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a CSV file with a header row into the header and string rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r
        .headers()
        .map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::Csv(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    Ok((header, rows))
}

pub fn parse_f64(field: &str) -> Result<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Csv(format!("not a number: `{field}`")))
}
