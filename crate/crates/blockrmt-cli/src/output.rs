//! Output plumbing: tabular files (CSV and/or JSON-lines from the same row
//! stream), declarative plot descriptions, and the binary eigenvalue
//! sidecar. Everything is written atomically enough for single-process use:
//! create directory, write whole files, no appends across commands.

use blockrmt::{Error, Result};
use serde::Serialize;
use serde_json::json;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

/// One table, emitted as `name.csv` and/or `name.jsonl` depending on the
/// requested formats. Rows are formatted with enough digits to round-trip.
pub struct Table {
    name: String,
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Table {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// Write the table in the selected formats and return the paths written.
    pub fn write(&self, dir: &Path, csv: bool, jsonl: bool) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        if csv {
            let path = dir.join(format!("{}.csv", self.name));
            let mut text = self.columns.join(",");
            text.push('\n');
            for row in &self.rows {
                let cells: Vec<String> = row.iter().map(|v| format_cell(*v)).collect();
                text.push_str(&cells.join(","));
                text.push('\n');
            }
            write_text(&path, &text)?;
            written.push(path);
        }
        if jsonl {
            let path = dir.join(format!("{}.jsonl", self.name));
            let mut text = String::new();
            for row in &self.rows {
                let obj: serde_json::Map<String, serde_json::Value> = self
                    .columns
                    .iter()
                    .zip(row.iter())
                    .map(|(c, v)| (c.clone(), json!(v)))
                    .collect();
                text.push_str(&serde_json::Value::Object(obj).to_string());
                text.push('\n');
            }
            write_text(&path, &text)?;
            written.push(path);
        }
        Ok(written)
    }
}

fn format_cell(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{v}")
    } else {
        // 17 significant digits reproduce any f64 exactly.
        format!("{v:.17e}")
    }
}

/// Declarative plot description: what to draw from which columns, with
/// optional reference curves and threshold markers. No rendering here —
/// this file tells a plotting script what the tables mean.
#[derive(Serialize)]
pub struct PlotDescription {
    pub title: String,
    pub kind: String,
    pub data_file: String,
    pub x: Axis,
    pub y: Axis,
    pub series: Vec<Series>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub reference_curves: Vec<Series>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub markers: Vec<Marker>,
}

#[derive(Serialize)]
pub struct Axis {
    pub label: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log: Option<bool>,
}

#[derive(Serialize)]
pub struct Series {
    pub label: String,
    pub file: String,
    pub x_column: String,
    pub y_column: String,
}

#[derive(Serialize)]
pub struct Marker {
    pub label: String,
    pub axis: String,
    pub value: f64,
    pub color: String,
}

impl PlotDescription {
    pub fn write(&self, dir: &Path, name: &str) -> Result<()> {
        write_json(&dir.join(format!("{name}.plot.json")), self)
    }
}

/// Write little-endian f64 values and return how many were written.
pub struct SidecarWriter {
    file: fs::File,
    path: PathBuf,
    count: usize,
}

impl SidecarWriter {
    pub fn create(path: PathBuf) -> Result<SidecarWriter> {
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        Ok(SidecarWriter {
            file,
            path,
            count: 0,
        })
    }

    pub fn append(&mut self, values: &[f64]) -> Result<usize> {
        let offset = self.count;
        let mut bytes = Vec::with_capacity(values.len() * 8);
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        self.file.write_all(&bytes).map_err(io_err(&self.path))?;
        self.count += values.len();
        Ok(offset)
    }

    pub fn finish(self) -> Result<usize> {
        self.file.sync_all().map_err(io_err(&self.path))?;
        Ok(self.count)
    }
}
