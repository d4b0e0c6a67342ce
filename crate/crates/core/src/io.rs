//! Plain-text persistence for datasets, ledgers, checkpoints and metrics.
//!
//! Floats are written with the shortest representation that parses back to
//! the same bits. Every writer goes through [`atomic_write`], so a reader
//! never sees a half-written file.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DetectionCurve;
use crate::model::{EmbeddingModel, Matrix};
use crate::noisegen::{NoiseEntry, NoiseLedger, NoisyDataset, VerificationPair};
use crate::trainer::{IterationMetrics, MetricsLog};

pub const METRICS_HEADER: [&str; 8] = [
    "epoch",
    "iter",
    "loss",
    "lr",
    "detected",
    "correct_corrections",
    "wrong_corrections",
    "hard_count",
];
pub const CURVE_HEADER: [&str; 6] = ["epoch", "detected", "correct", "wrong", "precision", "recall"];
pub const COMPARISON_HEADER: [&str; 5] = ["run", "head", "seed", "accuracy", "best_threshold"];

const CHECKPOINT_MAGIC: &str = "checkpoint v1";

/// Round-trip float formatting.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("not a number: '{s}'")))
}

fn parse_usize(s: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("not a non-negative integer: '{s}'")))
}

/// Writes `contents` to a sibling temp file, syncs it and renames it over
/// `path`.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Parse(format!("not a file path: {}", path.display())))?;
    let tmp: PathBuf = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(contents)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// `dataset <num_classes> <len> <dim>` then one `label,x1,...,xD` line per
/// sample.
pub fn write_dataset(path: &Path, data: &NoisyDataset) -> Result<()> {
    let mut out = format!("dataset {} {} {}\n", data.num_classes, data.len(), data.dim());
    for (x, l) in data.inputs.iter().zip(&data.labels) {
        let _ = write!(out, "{l}");
        for v in x {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_dataset(path: &Path) -> Result<NoisyDataset> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap_or("").split_whitespace().collect();
    let [tag, classes, len, dim] = header[..] else {
        return Err(Error::Parse(format!("{}: bad dataset header", path.display())));
    };
    if tag != "dataset" {
        return Err(Error::Parse(format!("{}: not a dataset file", path.display())));
    }
    let (classes, len, dim) = (parse_usize(classes)?, parse_usize(len)?, parse_usize(dim)?);
    let mut inputs = Vec::with_capacity(len);
    let mut labels = Vec::with_capacity(len);
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut fields = line.split(',');
        labels.push(parse_usize(fields.next().unwrap_or(""))?);
        let x = fields.map(parse_f64).collect::<Result<Vec<_>>>()?;
        if x.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: x.len(),
            });
        }
        inputs.push(x);
    }
    if inputs.len() != len {
        return Err(Error::Parse(format!(
            "{}: header promises {len} samples, found {}",
            path.display(),
            inputs.len()
        )));
    }
    NoisyDataset::new(classes, inputs, labels)
}

/// CSV `index,kind,original_label,assigned_label,distractor_index`; absent
/// fields are empty.
pub fn write_ledger(path: &Path, ledger: &NoiseLedger) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for e in ledger.entries() {
        w.serialize(e)?;
    }
    if ledger.is_empty() {
        w.write_record(["index", "kind", "original_label", "assigned_label", "distractor_index"])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    atomic_write(path, &bytes)
}

pub fn read_ledger(path: &Path) -> Result<NoiseLedger> {
    let mut r = csv::Reader::from_path(path)?;
    let entries = r.deserialize::<NoiseEntry>().collect::<std::result::Result<Vec<_>, _>>()?;
    NoiseLedger::new(entries)
}

pub fn write_pairs(path: &Path, pairs: &[VerificationPair]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in pairs {
        w.serialize(p)?;
    }
    if pairs.is_empty() {
        w.write_record(["a", "b", "same_identity"])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    atomic_write(path, &bytes)
}

pub fn read_pairs(path: &Path) -> Result<Vec<VerificationPair>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}

/// ```text
/// checkpoint v1
/// tensor output.weight 16 12
/// <16 lines of 12 space-separated values>
/// ...
/// ```
pub fn write_checkpoint(path: &Path, model: &EmbeddingModel) -> Result<()> {
    let mut out = format!("{CHECKPOINT_MAGIC}\n");
    for (name, m) in model.tensors() {
        let _ = writeln!(out, "tensor {name} {} {}", m.rows(), m.cols());
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|&v| fmt_f64(v)).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<EmbeddingModel> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(Error::Parse(format!("{}: not a checkpoint", path.display())));
    }
    let mut tensors = Vec::new();
    while let Some(header) = lines.next() {
        if header.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = header.split_whitespace().collect();
        let ["tensor", name, rows, cols] = parts[..] else {
            return Err(Error::Parse(format!("{}: bad tensor header '{header}'", path.display())));
        };
        let (rows, cols) = (parse_usize(rows)?, parse_usize(cols)?);
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| Error::Parse(format!("{}: tensor {name} truncated", path.display())))?;
            data.extend(line.split_whitespace().map(parse_f64).collect::<Result<Vec<_>>>()?);
        }
        tensors.push((name.to_string(), Matrix::from_vec(rows, cols, data)?));
    }
    EmbeddingModel::from_tensors(tensors)
}

pub fn write_metrics(path: &Path, log: &MetricsLog) -> Result<()> {
    let rows = log.iterations.iter().map(|it| {
        vec![
            it.epoch.to_string(),
            it.iteration.to_string(),
            fmt_f64(it.loss),
            fmt_f64(it.lr),
            it.detected.to_string(),
            it.correct_corrections.to_string(),
            it.wrong_corrections.to_string(),
            it.hard_count.to_string(),
        ]
    });
    atomic_write(path, &csv_bytes(&METRICS_HEADER, rows)?)
}

/// Reads iteration rows back. Batch sizes are not stored, so each row gets
/// weight 1 and epoch losses become unweighted means.
pub fn read_metrics(path: &Path, ledger_attached: bool) -> Result<MetricsLog> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::Parse(format!("{}: unexpected metrics header", path.display())));
    }
    let mut iterations = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        iterations.push(IterationMetrics {
            epoch: parse_usize(f(0))?,
            iteration: parse_usize(f(1))?,
            loss: parse_f64(f(2))?,
            lr: parse_f64(f(3))?,
            batch_size: 1,
            detected: parse_usize(f(4))?,
            correct_corrections: parse_usize(f(5))?,
            wrong_corrections: parse_usize(f(6))?,
            hard_count: parse_usize(f(7))?,
        });
    }
    Ok(MetricsLog {
        epochs: MetricsLog::aggregate_epochs(&iterations),
        iterations,
        ledger_attached,
    })
}

pub fn write_detection_curve(path: &Path, curve: &DetectionCurve) -> Result<()> {
    let rows = curve.points.iter().map(|p| {
        vec![
            p.epoch.to_string(),
            p.detected.to_string(),
            p.correct.to_string(),
            p.wrong.to_string(),
            fmt_f64(p.precision),
            fmt_f64(p.recall),
        ]
    });
    atomic_write(path, &csv_bytes(&CURVE_HEADER, rows)?)
}

/// One row of the cross-head comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub run: String,
    pub head: String,
    pub seed: u64,
    pub accuracy: f64,
    pub best_threshold: f64,
}

pub fn write_comparison(path: &Path, rows: &[ComparisonRow]) -> Result<()> {
    let rows = rows.iter().map(|r| {
        vec![
            r.run.clone(),
            r.head.clone(),
            r.seed.to_string(),
            fmt_f64(r.accuracy),
            fmt_f64(r.best_threshold),
        ]
    });
    atomic_write(path, &csv_bytes(&COMPARISON_HEADER, rows)?)
}

pub fn read_comparison(path: &Path) -> Result<Vec<ComparisonRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
}
