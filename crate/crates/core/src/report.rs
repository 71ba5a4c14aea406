// SPDX-License-Identifier: Apache-2.0

//! Aggregates pipeline CSVs into per-strategy series for external plots.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::pipeline::{METRICS_CSV, SIZES_CSV};

pub const PRECISION_SERIES: &str = "precision_series.csv";
pub const VOLUME_SERIES: &str = "volume_series.csv";
pub const TIME_SERIES: &str = "time_series.csv";

#[derive(Debug, Clone, Deserialize)]
struct MetricsRow {
    scenario: String,
    strategy: String,
    bucket: String,
    precision: Option<f64>,
    detections: u64,
    bytes: u64,
    ms: f64,
}

#[derive(Debug, Clone, Deserialize)]
struct SizesRow {
    strategy: String,
    logical_bytes: u64,
    wire_bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrecisionPoint {
    pub runs: usize,
    /// Mean over runs where the bucket had detections, percent.
    pub mean_precision: Option<f64>,
    pub detections: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct VolumePoint {
    pub messages: usize,
    pub mean_logical_bytes: f64,
    pub mean_wire_bytes: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimePoint {
    pub runs: usize,
    pub mean_ms: f64,
    pub mean_bytes: f64,
}

/// Series keyed by strategy label (and bucket for precision).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report {
    pub runs: usize,
    pub precision: BTreeMap<(String, String), PrecisionPoint>,
    pub volume: BTreeMap<String, VolumePoint>,
    pub time: BTreeMap<String, TimePoint>,
}

fn find(dir: &Path, name: &str) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == name)
        .map(|e| e.into_path())
        .collect();
    out.sort();
    out
}

fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Reads every `metrics.csv` and `sizes.csv` below `dir`.
pub fn aggregate(dir: impl AsRef<Path>) -> Result<Report> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let metrics = find(dir, METRICS_CSV);
    if metrics.is_empty() {
        return Err(Error::Config(format!("no {METRICS_CSV} found under {}", dir.display())));
    }

    let mut prec: BTreeMap<(String, String), (usize, Vec<f64>, u64)> = BTreeMap::new();
    let mut time: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut runs = 0;
    for path in &metrics {
        let rows: Vec<MetricsRow> = read(path)?;
        runs += 1;
        let mut seen = std::collections::BTreeSet::new();
        for r in rows {
            let e = prec.entry((r.strategy.clone(), r.bucket.clone())).or_default();
            e.0 += 1;
            e.1.extend(r.precision);
            e.2 += r.detections;
            // ms and bytes repeat on each bucket row of a run.
            if seen.insert((r.scenario, r.strategy.clone())) {
                let t = time.entry(r.strategy).or_default();
                t.0.push(r.ms);
                t.1.push(r.bytes as f64);
            }
        }
    }

    let mut volume: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for path in find(dir, SIZES_CSV) {
        for r in read::<SizesRow>(&path)? {
            let v = volume.entry(r.strategy).or_default();
            v.0.push(r.logical_bytes as f64);
            v.1.push(r.wire_bytes as f64);
        }
    }

    Ok(Report {
        runs,
        precision: prec
            .into_iter()
            .map(|(k, (n, p, d))| {
                let point = PrecisionPoint {
                    runs: n,
                    mean_precision: (!p.is_empty()).then(|| mean(&p)),
                    detections: d,
                };
                (k, point)
            })
            .collect(),
        volume: volume
            .into_iter()
            .map(|(k, (l, w))| {
                let point = VolumePoint {
                    messages: l.len(),
                    mean_logical_bytes: mean(&l),
                    mean_wire_bytes: mean(&w),
                };
                (k, point)
            })
            .collect(),
        time: time
            .into_iter()
            .map(|(k, (ms, b))| {
                let point = TimePoint {
                    runs: ms.len(),
                    mean_ms: mean(&ms),
                    mean_bytes: mean(&b),
                };
                (k, point)
            })
            .collect(),
    })
}

impl Report {
    /// Writes the three series files into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let paths: Vec<PathBuf> = [PRECISION_SERIES, VOLUME_SERIES, TIME_SERIES]
            .iter()
            .map(|n| dir.join(n))
            .collect();

        let mut w = csv::Writer::from_path(&paths[0])?;
        w.write_record(["strategy", "bucket", "runs", "mean_precision", "detections"])?;
        for ((s, b), p) in &self.precision {
            let mp = p.mean_precision.map_or_else(String::new, |v| format!("{v:.2}"));
            w.write_record([s, b, &p.runs.to_string(), &mp, &p.detections.to_string()])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(&paths[1])?;
        w.write_record(["strategy", "messages", "mean_logical_bytes", "mean_wire_bytes"])?;
        for (s, v) in &self.volume {
            w.write_record([
                s.clone(),
                v.messages.to_string(),
                format!("{:.1}", v.mean_logical_bytes),
                format!("{:.1}", v.mean_wire_bytes),
            ])?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(&paths[2])?;
        w.write_record(["strategy", "runs", "mean_ms", "mean_bytes"])?;
        for (s, t) in &self.time {
            w.write_record([
                s.clone(),
                t.runs.to_string(),
                format!("{:.3}", t.mean_ms),
                format!("{:.1}", t.mean_bytes),
            ])?;
        }
        w.flush()?;
        Ok(paths)
    }
}
