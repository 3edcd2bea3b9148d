use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::decode::Trajectory;
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub d: usize,
    pub count: usize,
    /// Mean committed position (window-relative); `None` for empty steps.
    pub mean_position: Option<f64>,
    /// Smallest and largest committed position of the step.
    pub front: Option<usize>,
    pub back: Option<usize>,
    pub eos_count: usize,
    /// EOS share of this step's commits (0 for empty steps).
    pub eos_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceMetrics {
    pub steps: Vec<StepMetrics>,
    pub effective_tokens: usize,
    pub eos_tokens: usize,
    /// Mean distance from each commit to the nearest commit of the previous step.
    pub proximity: Option<f64>,
    /// Step-weighted mean of EOS commits (`sum d * eos_d / sum eos_d`).
    pub eos_centroid: Option<f64>,
    /// `T x L` raw top-1 probabilities; absent for trajectories read back from disk.
    pub heatmap: Option<Array2<f64>>,
}

/// Mean distance between each position of `cur` and its nearest neighbour in `prev`.
pub fn nearest_distances(prev: &[usize], cur: &[usize]) -> Vec<f64> {
    if prev.is_empty() {
        return Vec::new();
    }
    cur.iter()
        .map(|&p| prev.iter().map(|&q| p.abs_diff(q)).min().expect("non-empty") as f64)
        .collect()
}

pub fn trace_metrics(traj: &Trajectory, vocab: &Vocabulary) -> Result<TraceMetrics> {
    traj.validate()?;
    let l = traj.config.gen_len;
    let mut steps = Vec::with_capacity(traj.steps.len());
    let mut dists = Vec::new();
    let mut eos_tokens = 0;
    let mut weighted = 0.0;
    for (i, s) in traj.steps.iter().enumerate() {
        let eos_count = s.tokens.iter().filter(|&&t| t == vocab.eos_id).count();
        eos_tokens += eos_count;
        weighted += (s.d * eos_count) as f64;
        let n = s.positions.len();
        steps.push(StepMetrics {
            d: s.d,
            count: n,
            mean_position: (n > 0).then(|| s.positions.iter().sum::<usize>() as f64 / n as f64),
            front: s.positions.iter().min().copied(),
            back: s.positions.iter().max().copied(),
            eos_count,
            eos_ratio: if n > 0 { eos_count as f64 / n as f64 } else { 0.0 },
        });
        if i > 0 {
            dists.extend(nearest_distances(&traj.steps[i - 1].positions, &s.positions));
        }
    }
    let heatmap = if traj.steps.iter().all(|s| s.top1.len() == l) {
        let mut h = Array2::zeros((traj.steps.len(), l));
        for (i, s) in traj.steps.iter().enumerate() {
            h.row_mut(i).assign(&ndarray::ArrayView1::from(&s.top1[..]));
        }
        Some(h)
    } else {
        None
    };
    if eos_tokens > l {
        return Err(Error::Integrity("more EOS commits than positions".into()));
    }
    Ok(TraceMetrics {
        steps,
        effective_tokens: l - eos_tokens,
        eos_tokens,
        proximity: (!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64),
        eos_centroid: (eos_tokens > 0).then(|| weighted / eos_tokens as f64),
        heatmap,
    })
}

/// Expected proximity statistic when every step commits one position drawn uniformly
/// from the still-masked ones: consecutive draws form a uniform ordered pair of distinct
/// positions, whose mean distance is `(L + 1) / 3`.
pub fn uniform_proximity(gen_len: usize) -> f64 {
    (gen_len as f64 + 1.0) / 3.0
}

/// Per-step EOS-commit ratio averaged over trajectories sharing one `T`.
pub fn mean_eos_curve(metrics: &[TraceMetrics]) -> Vec<f64> {
    let t = metrics.first().map_or(0, |m| m.steps.len());
    (0..t)
        .map(|d| metrics.iter().map(|m| m.steps[d].eos_ratio).sum::<f64>() / metrics.len() as f64)
        .collect()
}

/// 1-based index of the largest value (earliest on ties).
pub fn peak_step(curve: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in curve.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i + 1, v));
        }
    }
    best.map(|(i, _)| i)
}
