//! CSV output. Every file starts with a header row.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

use super::experiments::{ExperimentRecord, PassAtKCurve};
use super::metrics::TraceMetrics;

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

#[derive(Serialize)]
struct StepRow {
    trajectory: usize,
    d: usize,
    count: usize,
    mean_position: Option<f64>,
    /// min committed position of the step
    front_min: Option<usize>,
    /// max committed position of the step
    back_max: Option<usize>,
    eos_count: usize,
    eos_ratio: f64,
}

/// One row per (trajectory, step).
pub fn write_step_metrics_csv<W: Write>(w: W, metrics: &[TraceMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (i, m) in metrics.iter().enumerate() {
        for s in &m.steps {
            out.serialize(StepRow {
                trajectory: i,
                d: s.d,
                count: s.count,
                mean_position: s.mean_position,
                front_min: s.front,
                back_max: s.back,
                eos_count: s.eos_count,
                eos_ratio: s.eos_ratio,
            })
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Dense `T x L` matrix; the header names the window positions.
pub fn write_heatmap_csv<W: Write>(w: W, heatmap: &ndarray::Array2<f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["d".to_string()];
    header.extend((0..heatmap.ncols()).map(|p| format!("pos{p}")));
    out.write_record(&header).map_err(csv_err)?;
    for (i, row) in heatmap.rows().into_iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct PassRow<'a> {
    variant: &'a str,
    k: usize,
    pass_at_k: f64,
    ci_lo: f64,
    ci_hi: f64,
    instances: usize,
}

pub fn write_pass_at_k_csv<W: Write>(w: W, curves: &[PassAtKCurve]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for c in curves {
        for p in &c.points {
            out.serialize(PassRow {
                variant: &c.variant,
                k: p.k,
                pass_at_k: p.estimate.mean,
                ci_lo: p.estimate.lo,
                ci_hi: p.estimate.hi,
                instances: p.estimate.n,
            })
            .map_err(csv_err)?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RecordRow<'a> {
    kind: &'a str,
    grid_point: String,
    mean: f64,
    ci_lo: f64,
    ci_hi: f64,
    n: usize,
    seed: u64,
}

/// One row per grid point.
pub fn write_records_csv<W: Write>(w: W, records: &[ExperimentRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(RecordRow {
            kind: &r.kind,
            grid_point: r.grid_point.to_string(),
            mean: r.aggregate.mean,
            ci_lo: r.aggregate.lo,
            ci_hi: r.aggregate.hi,
            n: r.aggregate.n,
            seed: r.seed,
        })
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Any serializable row type, one CSV row per element.
pub fn write_rows_csv<W: Write, T: Serialize>(w: W, rows: &[T]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
