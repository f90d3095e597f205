//! Minimal CSV emitter: `#` header comments, then one header row and data rows.
//! Floats use 17 significant digits so every `f64` round-trips.

use std::fmt::Write;

pub const SCHEMA_VERSION: u32 = 1;

/// One CSV cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell<'a> {
    Float(f64),
    Int(u64),
    Text(&'a str),
    Empty,
}

impl From<f64> for Cell<'_> {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell<'_> {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl<'a> From<&'a str> for Cell<'a> {
    fn from(v: &'a str) -> Self {
        Cell::Text(v)
    }
}

impl From<Option<f64>> for Cell<'_> {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Float)
    }
}

pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.16e}")
    }
}

/// Comment lines may be added until the first row is written.
#[derive(Debug, Clone)]
pub struct CsvDocument {
    text: String,
    header: Option<String>,
    columns: usize,
}

impl CsvDocument {
    /// Starts a document for `experiment` with the schema and seed lines.
    pub fn new(experiment: &str, seed: u64, columns: &[&str]) -> Self {
        let mut text = String::new();
        writeln!(text, "# kl-control csv schema {SCHEMA_VERSION}").unwrap();
        writeln!(text, "# experiment: {experiment}").unwrap();
        writeln!(text, "# seed: {seed}").unwrap();
        Self { text, header: Some(columns.join(",")), columns: columns.len() }
    }

    pub fn comment(&mut self, line: impl AsRef<str>) {
        assert!(self.header.is_some(), "comments must precede the data rows");
        for part in line.as_ref().lines() {
            writeln!(self.text, "# {part}").unwrap();
        }
    }

    pub fn row(&mut self, cells: &[Cell<'_>]) {
        assert_eq!(cells.len(), self.columns, "row width does not match the header");
        if let Some(header) = self.header.take() {
            self.text.push_str(&header);
            self.text.push('\n');
        }
        for (i, cell) in cells.iter().enumerate() {
            if i > 0 {
                self.text.push(',');
            }
            match *cell {
                Cell::Float(v) => self.text.push_str(&format_float(v)),
                Cell::Int(v) => write!(self.text, "{v}").unwrap(),
                Cell::Text(t) => self.text.push_str(t),
                Cell::Empty => {}
            }
        }
        self.text.push('\n');
    }

    pub fn finish(mut self) -> String {
        if let Some(header) = self.header.take() {
            self.text.push_str(&header);
            self.text.push('\n');
        }
        self.text
    }
}
