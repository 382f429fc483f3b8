//! CSV reports with a JSON-lines mirror (`<name>.csv` and `<name>.jsonl`).

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::eval::FpsReport;
use super::metrics::MetricReport;
use super::quadrant::QuadrantReport;
use super::train::StepLog;
use crate::accounting::CostTable;
use crate::error::{Error, Result};

/// Writes `rows` to `path` as CSV and to `path` with a `.jsonl` extension.
pub fn write_rows<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut jsonl = String::new();
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        jsonl += &serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        jsonl.push('\n');
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let j = path.with_extension("jsonl");
    fs::write(&j, jsonl).map_err(|e| Error::io(&j, e))
}

#[derive(Serialize)]
struct MetricRow<'a> {
    id: &'a str,
    dice: f64,
    iou: f64,
    recall: f64,
    threshold: f64,
}

/// One row per sample, then a `mean` row.
pub fn write_metrics(path: &Path, r: &MetricReport) -> Result<()> {
    let mut rows: Vec<MetricRow> = r
        .per_sample
        .iter()
        .map(|s| MetricRow {
            id: &s.id,
            dice: s.metrics.dice,
            iou: s.metrics.iou,
            recall: s.metrics.recall,
            threshold: r.threshold,
        })
        .collect();
    rows.push(MetricRow {
        id: "mean",
        dice: r.mean.dice,
        iou: r.mean.iou,
        recall: r.mean.recall,
        threshold: r.threshold,
    });
    write_rows(path, &rows)
}

#[derive(Serialize)]
struct QuadrantRow {
    train: String,
    test: String,
    dice: f64,
    iou: f64,
    recall: f64,
    count: usize,
    delta_r: f64,
    delta_h: f64,
}

pub fn write_quadrant(path: &Path, q: &QuadrantReport) -> Result<()> {
    let rows: Vec<QuadrantRow> = q
        .cells
        .iter()
        .map(|(tr, te, r)| QuadrantRow {
            train: tr.to_string(),
            test: te.to_string(),
            dice: r.mean.dice,
            iou: r.mean.iou,
            recall: r.mean.recall,
            count: r.count,
            delta_r: q.delta_r,
            delta_h: q.delta_h,
        })
        .collect();
    write_rows(path, &rows)
}

pub fn write_log(path: &Path, log: &[StepLog]) -> Result<()> {
    write_rows(path, log)
}

pub fn write_fps(path: &Path, r: &FpsReport) -> Result<()> {
    write_rows(path, std::slice::from_ref(r))
}

#[derive(Serialize)]
struct CostRow<'a> {
    layer: &'a str,
    subsystem: &'a str,
    params: u64,
    macs: u64,
}

pub fn write_costs(path: &Path, t: &CostTable) -> Result<()> {
    let rows: Vec<CostRow> = t
        .rows
        .iter()
        .map(|r| CostRow {
            layer: &r.name,
            subsystem: crate::accounting::Subsystem::of(&r.name).map_or("other", |s| s.as_str()),
            params: r.params,
            macs: r.macs,
        })
        .collect();
    write_rows(path, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics::{Metrics, SampleScore};

    #[test]
    fn csv_and_jsonl_mirror() {
        let dir = tempfile::tempdir().unwrap();
        let r = MetricReport::new(
            vec![SampleScore {
                id: "a".into(),
                metrics: Metrics {
                    dice: 0.5,
                    iou: 1.0 / 3.0,
                    recall: 0.5,
                },
            }],
            0.5,
        );
        let p = dir.path().join("out/m.csv");
        write_metrics(&p, &r).unwrap();
        let csv = fs::read_to_string(&p).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "id,dice,iou,recall,threshold");
        assert_eq!(csv.lines().count(), 3);
        let j = fs::read_to_string(p.with_extension("jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(j.lines().next().unwrap()).unwrap();
        assert_eq!(first["dice"], 0.5);
        assert!(j.lines().nth(1).unwrap().contains("\"mean\""));
    }
}
