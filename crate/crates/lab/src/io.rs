//! Token files, metrics streams and report files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sts_core::lds::ScheduleRow;
use sts_core::{MetricsRecord, Tensor};

use crate::LabError;

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
    move |source| LabError::Write { path: path.to_path_buf(), source }
}

/// Reads a token matrix: one token per line, comma-separated components, no header.
pub fn read_tokens(path: &Path) -> Result<Tensor, LabError> {
    let fmt = |message: String| LabError::Format { path: path.to_path_buf(), message };
    let mut reader =
        csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path).map_err(|e| {
            match e.into_kind() {
                csv::ErrorKind::Io(source) => LabError::Read { path: path.to_path_buf(), source },
                other => fmt(format!("{other:?}")),
            }
        })?;
    let mut rows = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| fmt(e.to_string()))?;
        let row = record
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| fmt(format!("row {}: `{f}` is not a number", line + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(fmt("no tokens".into()));
    }
    Tensor::from_rows(&rows).map_err(|e| fmt(e.to_string()))
}

pub fn write_tokens(path: &Path, t: &Tensor) -> Result<(), LabError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| LabError::Format { path: path.to_path_buf(), message: e.to_string() })?;
    for i in 0..t.dims()[0] {
        w.write_record(t.row(i).iter().map(|v| v.to_string()))
            .map_err(|e| LabError::Format { path: path.to_path_buf(), message: e.to_string() })?;
    }
    w.flush().map_err(write_err(path))
}

/// `step,layer,p_skip` rows.
pub fn write_schedule<W: Write>(out: W, rows: &[ScheduleRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), LabError> {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(write_err(path))
}

/// Appends one JSON object per record.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, LabError> {
        let file = File::create(path).map_err(write_err(path))?;
        Ok(MetricsWriter { path: path.to_path_buf(), out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<(), LabError> {
        serde_json::to_writer(&mut self.out, record).expect("records serialize");
        self.out.write_all(b"\n").map_err(write_err(&self.path))
    }

    pub fn finish(mut self) -> Result<(), LabError> {
        self.out.flush().map_err(write_err(&self.path))
    }
}
