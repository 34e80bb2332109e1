use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::{MetricsRecord, MetricsSink};
use crate::autodiff::Tensor;

use super::HarnessError;

/// Samples on disk as JSON: row-major values plus optional per-row annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub richness: Option<Vec<f64>>,
}

impl DataFile {
    pub fn from_tensor(t: &Tensor<f64>) -> Self {
        Self { shape: t.shape().to_vec(), data: t.data().to_vec(), labels: None, richness: None }
    }

    pub fn tensor(&self) -> Result<Tensor<f64>, HarnessError> {
        Tensor::new(self.shape.clone(), self.data.clone()).map_err(|e| HarnessError::Input(format!("data file: {e}")))
    }
}

pub fn write_data_file(path: &Path, file: &DataFile) -> Result<(), HarnessError> {
    let text = serde_json::to_string(file).expect("data serializes");
    std::fs::write(path, text + "\n").map_err(HarnessError::io(path))
}

pub fn read_data_file(path: &Path) -> Result<DataFile, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Input(format!("{}: {e}", path.display())))
}

/// Appends one JSON record per line, flushing after each so a crash loses at most the last line.
pub struct JsonlSink {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlSink {
    pub fn create(path: &Path) -> Result<Self, HarnessError> {
        let f = File::create(path).map_err(HarnessError::io(path))?;
        Ok(Self { path: path.to_path_buf(), out: BufWriter::new(f) })
    }

    /// Keeps the records up to and including `step` and appends after them.
    pub fn resume(path: &Path, step: usize) -> Result<Self, HarnessError> {
        let kept: Vec<MetricsRecord> = read_metrics(path)?.into_iter().filter(|r| r.step <= step).collect();
        let mut sink = Self::create(path)?;
        for r in &kept {
            sink.emit(r).map_err(HarnessError::Input)?;
        }
        Ok(sink)
    }
}

impl MetricsSink for JsonlSink {
    fn emit(&mut self, record: &MetricsRecord) -> Result<(), String> {
        let line = serde_json::to_string(record).map_err(|e| e.to_string())?;
        writeln!(self.out, "{line}").and_then(|_| self.out.flush()).map_err(|e| format!("{}: {e}", self.path.display()))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let f = File::open(path).map_err(HarnessError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(HarnessError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| HarnessError::Log { path: path.to_path_buf(), line: i + 1, detail: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub const FILE: &'static str = "run.lock";

    pub fn acquire(dir: &Path) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
        let path = dir.join(Self::FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(HarnessError::Locked(dir.to_path_buf())),
            Err(e) => Err(HarnessError::Io { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize) -> MetricsRecord {
        MetricsRecord {
            step,
            loss_d: (step > 0).then_some(1.25),
            loss_g_adv: None,
            loss_g_mse: None,
            loss_g_perc: None,
            d_logit_real_mean: None,
            d_logit_fake_mean: None,
            grad_norm_g: Some(0.1 * step as f64),
            grad_norm_d: None,
            w2_eval: 1.0 / (1 + step) as f64,
            mode_mass_gap: 0.0,
            tv_eval: None,
            wall_ms: None,
        }
    }

    #[test]
    fn jsonl_round_trip_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let mut sink = JsonlSink::create(&path).unwrap();
        for s in [0, 5, 10] {
            sink.emit(&rec(s)).unwrap();
        }
        drop(sink);
        assert_eq!(read_metrics(&path).unwrap(), vec![rec(0), rec(5), rec(10)]);
        let mut sink = JsonlSink::resume(&path, 5).unwrap();
        sink.emit(&rec(7)).unwrap();
        drop(sink);
        assert_eq!(read_metrics(&path).unwrap(), vec![rec(0), rec(5), rec(7)]);
    }

    #[test]
    fn partial_line_is_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, format!("{}\n{{\"step\": 3,", serde_json::to_string(&rec(0)).unwrap())).unwrap();
        assert!(matches!(read_metrics(&path), Err(HarnessError::Log { line: 2, .. })));
    }

    #[test]
    fn second_lock_fails_until_release() {
        let dir = tempfile::tempdir().unwrap();
        let a = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(HarnessError::Locked(_))));
        drop(a);
        RunLock::acquire(dir.path()).unwrap();
    }
}
