//! CSV and JSON artifact writers.
//!
//! CSV files carry a header row and RFC 4180 quoting (fields containing
//! commas, quotes, or newlines are quoted, quotes doubled). Floats print in
//! Rust's shortest round-trip form, so fixed-seed reruns emit identical
//! bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::eval::EvalReport;
use crate::numerics::Matrix;
use crate::sample::SampleRun;
use crate::train::TrainReport;

fn csv_field(raw: &str) -> String {
    if raw.contains(',') || raw.contains('"') || raw.contains('\n') || raw.contains('\r') {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    out.push_str(
        &header
            .iter()
            .map(|h| csv_field(h))
            .collect::<Vec<_>>()
            .join(","),
    );
    out.push('\n');
    for row in rows {
        out.push_str(
            &row.iter()
                .map(|f| csv_field(f))
                .collect::<Vec<_>>()
                .join(","),
        );
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// `step,loss` trace CSV.
pub fn write_loss_csv(path: &Path, report: &TrainReport) -> Result<()> {
    let rows = report
        .trace
        .iter()
        .map(|r| vec![r.step.to_string(), r.loss.to_string()])
        .collect::<Vec<_>>();
    write_csv(path, &["step", "loss"], &rows)
}

/// One generated vector per row, columns x0..x{d-1}.
pub fn write_samples_csv(path: &Path, samples: &Matrix) -> Result<()> {
    let header: Vec<String> = (0..samples.rows()).map(|i| format!("x{i}")).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..samples.cols())
        .map(|s| {
            (0..samples.rows())
                .map(|i| samples.get(i, s).to_string())
                .collect()
        })
        .collect::<Vec<_>>();
    write_csv(path, &header_refs, &rows)
}

/// Expert-selection log: which interval was active per step and scale.
pub fn write_expert_csv(path: &Path, run: &SampleRun) -> Result<()> {
    let rows = run
        .expert_log
        .iter()
        .map(|r| {
            vec![
                r.t.to_string(),
                r.scale.to_string(),
                r.interval.to_string(),
            ]
        })
        .collect::<Vec<_>>();
    write_csv(path, &["t", "scale", "interval"], &rows)
}

/// Gate log: batch-mean gate vector per step per adapted layer.
pub fn write_gate_csv(path: &Path, run: &SampleRun) -> Result<()> {
    let width = run.gate_log.iter().map(|g| g.gates.len()).max().unwrap_or(0);
    let mut header = vec!["t".to_string(), "layer".to_string()];
    for j in 0..width {
        header.push(format!("g{}", j + 2));
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = run
        .gate_log
        .iter()
        .map(|g| {
            let mut row = vec![g.t.to_string(), g.layer.to_string()];
            row.extend(g.gates.iter().map(|v| v.to_string()));
            row
        })
        .collect::<Vec<_>>();
    write_csv(path, &header_refs, &rows)
}

/// Per-timestep drift statistic.
pub fn write_drift_csv(path: &Path, drift: &[(usize, f64)]) -> Result<()> {
    let rows = drift
        .iter()
        .map(|(t, v)| vec![t.to_string(), v.to_string()])
        .collect::<Vec<_>>();
    write_csv(path, &["t", "statistic"], &rows)
}

/// Per-interval loss table with bounds.
pub fn write_interval_loss_csv(
    path: &Path,
    partition: &crate::schedule::IntervalPartition,
    losses: &[f64],
) -> Result<()> {
    let mut rows = Vec::new();
    for (i, loss) in losses.iter().enumerate() {
        let (lo, hi) = partition.bounds(i + 1)?;
        rows.push(vec![
            (i + 1).to_string(),
            lo.to_string(),
            hi.to_string(),
            loss.to_string(),
        ]);
    }
    write_csv(path, &["interval", "lo", "hi", "loss"], &rows)
}

pub fn eval_summary_text(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "aggregate_loss      {:.6}", report.aggregate_loss);
    let _ = writeln!(s, "energy_distance     {:.6}", report.energy_distance);
    let _ = writeln!(s, "total_scalars       {}", report.total_scalars);
    let _ = writeln!(s, "trainable_scalars   {}", report.trainable_scalars);
    s
}
