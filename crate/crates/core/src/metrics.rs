//! Training metrics as CSV rows: `epoch,phase,iter,split,path,metric,value`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{PqkError, Result};
use crate::model::Phase;

pub const HEADER: &str = "epoch,phase,iter,split,path,metric,value";

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub epoch: usize,
    pub phase: Phase,
    pub iter: u64,
    pub split: String,
    pub path: String,
    pub metric: String,
    pub value: f64,
}

impl Row {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch,
            self.phase.label(),
            self.iter,
            self.split,
            self.path,
            self.metric,
            self.value
        )
    }

    pub fn parse(line: &str) -> Result<Row> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || PqkError::Data(format!("malformed metrics row {line:?}"));
        if f.len() != 7 {
            return Err(bad());
        }
        let phase = match f[1] {
            "1" => Phase::Phase1,
            "2" => Phase::Phase2,
            "finetune" => Phase::Finetune,
            _ => return Err(bad()),
        };
        Ok(Row {
            epoch: f[0].parse().map_err(|_| bad())?,
            phase,
            iter: f[2].parse().map_err(|_| bad())?,
            split: f[3].to_string(),
            path: f[4].to_string(),
            metric: f[5].to_string(),
            value: f[6].parse().map_err(|_| bad())?,
        })
    }
}

/// Collects rows in memory and, when attached to a file, appends them to it
/// at every [`Metrics::flush`].
#[derive(Debug, Default)]
pub struct Metrics {
    rows: Vec<Row>,
    flushed: usize,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl Metrics {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates (truncating) `path` and writes the header.
    pub fn to_file(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| PqkError::io(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{HEADER}").map_err(|e| PqkError::io(path, e))?;
        Ok(Metrics {
            rows: Vec::new(),
            flushed: 0,
            sink: Some((path.to_path_buf(), w)),
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn push(&mut self, epoch: usize, phase: Phase, iter: u64, split: &str, path: &str, metric: &str, value: f64) {
        self.rows.push(Row {
            epoch,
            phase,
            iter,
            split: split.to_string(),
            path: path.to_string(),
            metric: metric.to_string(),
            value,
        });
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((path, w)) = &mut self.sink {
            for row in &self.rows[self.flushed..] {
                writeln!(w, "{}", row.to_csv()).map_err(|e| PqkError::io(path.as_path(), e))?;
            }
            w.flush().map_err(|e| PqkError::io(path.as_path(), e))?;
        }
        self.flushed = self.rows.len();
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.to_csv());
            s.push('\n');
        }
        s
    }
}

/// Parses a metrics file written by [`Metrics`].
pub fn read_metrics(path: &Path) -> Result<Vec<Row>> {
    let text = std::fs::read_to_string(path).map_err(|e| PqkError::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(HEADER) {
        return Err(PqkError::Data(format!("{} lacks the metrics header", path.display())));
    }
    lines.map(Row::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let mut m = Metrics::to_file(&p).unwrap();
        m.push(1, Phase::Phase1, 10, "dev", "student", "accuracy", 0.8125);
        m.flush().unwrap();
        m.push(2, Phase::Phase2, 20, "train", "-", "beta", 0.5);
        m.push(0, Phase::Finetune, 0, "train", "student", "step_size:conv0", f32::MAX as f64);
        m.flush().unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, m.to_csv());
        assert!(text.starts_with("epoch,phase,iter,split,path,metric,value\n1,1,10,dev,student,accuracy,0.8125\n"));
        assert!(!text.contains('\r'));
        assert_eq!(read_metrics(&p).unwrap(), m.rows());
    }

    #[test]
    fn malformed_rows_rejected() {
        assert!(Row::parse("1,1,1,dev,student,accuracy").is_err());
        assert!(Row::parse("1,3,1,dev,student,accuracy,0.5").is_err());
        assert!(Row::parse("x,1,1,dev,student,accuracy,0.5").is_err());
    }
}
