//! Tabular report emission. Columns keep a fixed order and floats print
//! with nine significant digits, which round-trips every `f32`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

use crate::error::{PackError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = PackError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(PackError::Usage(format!("unknown report format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
    Bool(bool),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => sig9(*v),
            Cell::Text(s) => s.clone(),
            Cell::Bool(b) => b.to_string(),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> Value {
        match self {
            Cell::Int(v) => Value::from(*v),
            Cell::Float(v) => sig9(*v)
                .parse::<f64>()
                .ok()
                .and_then(Number::from_f64)
                .map_or(Value::Null, Value::Number),
            Cell::Text(s) => Value::String(s.clone()),
            Cell::Bool(b) => Value::Bool(*b),
            Cell::Empty => Value::Null,
        }
    }
}

impl From<f32> for Cell {
    fn from(v: f32) -> Self {
        Cell::Float(v as f64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

/// A row type that knows its columns.
pub trait ReportRow {
    fn columns() -> &'static [&'static str];
    fn cells(&self) -> Vec<Cell>;
}

/// `%.9g`: nine significant digits, trailing zeros trimmed, exponent form
/// outside `[1e-4, 1e9)`.
pub fn sig9(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    if !v.is_finite() {
        return v.to_string();
    }
    let sci = format!("{v:.8e}");
    let (mant, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..9).contains(&exp) {
        let mant = trim_zeros(mant);
        return format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn render_csv<R: ReportRow>(rows: &[R]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| PackError::Io(std::io::Error::other(e));
    w.write_record(R::columns()).map_err(io)?;
    for r in rows {
        w.write_record(r.cells().iter().map(Cell::render))
            .map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| PackError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn render_json<R: ReportRow>(rows: &[R]) -> String {
    let arr: Vec<Value> = rows
        .iter()
        .map(|r| {
            let mut m = Map::new();
            for (k, c) in R::columns().iter().zip(r.cells()) {
                m.insert((*k).to_string(), c.json());
            }
            Value::Object(m)
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&Value::Array(arr)).expect("json values serialize");
    s.push('\n');
    s
}

pub fn render<R: ReportRow>(rows: &[R], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => render_csv(rows),
        ReportFormat::Json => Ok(render_json(rows)),
    }
}

pub fn emit_report<R: ReportRow>(rows: &[R], format: ReportFormat, path: &Path) -> Result<()> {
    fs::write(path, render(rows, format)?)?;
    Ok(())
}

/// Parse a CSV report back into rows.
pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut rd =
        csv::Reader::from_path(path).map_err(|e| PackError::Io(std::io::Error::other(e)))?;
    rd.deserialize()
        .map(|r| r.map_err(|e| PackError::input(format!("malformed report row: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_matches_printf_g() {
        assert_eq!(sig9(1.0), "1");
        assert_eq!(sig9(12.5), "12.5");
        assert_eq!(sig9(0.1f32 as f64), "0.100000001");
        assert_eq!(sig9(123456789.0), "123456789");
        assert_eq!(sig9(1234567890.0), "1.23456789e+09");
        assert_eq!(sig9(0.000012345), "1.2345e-05");
        assert_eq!(sig9(0.00012345), "0.00012345");
        assert_eq!(sig9(-2.0 / 3.0), "-0.666666667");
    }

    #[test]
    fn sig9_round_trips_f32() {
        for &v in &[
            0.1f32,
            1.0 / 3.0,
            33.3333f32,
            1e-7,
            7.5e10,
            f32::MIN_POSITIVE,
        ] {
            assert_eq!(
                sig9(v as f64).parse::<f32>().unwrap().to_bits(),
                v.to_bits()
            );
        }
    }
}
