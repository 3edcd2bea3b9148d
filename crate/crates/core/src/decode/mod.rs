//! Reverse-process decoding: per-step token budgets, position and token selection, EOS
//! annealing, and semi-autoregressive block decoding.
//!
//! Steps are indexed `d = 1..=T`; step `d` moves from time `(T-d+1)/T` to `(T-d)/T`, so
//! `d = 1` acts on the fully masked window.

mod engine;
mod trajectory;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::PredictionGrid;
use crate::error::{Error, Result};

pub use engine::{decode, decode_with_prefix, semi_ar_decode, InitialPlanner};
pub use trajectory::{snapshot_digest, StepRecord, Trajectory, TrajectoryHeader};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Allocation {
    /// Counts as equal as possible; the remainder goes to the latest steps.
    Linear,
    /// `w` tokens every step plus the residual `L - wT` apportioned proportional to `(d/T)^v`.
    Progressive { w: usize, v: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PositionStrategy {
    Top1Confidence,
    ProbabilityMargin,
    Ancestral,
    RandomInitial,
    PlannerGuided,
    DelayedRandom { step: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenMode {
    Greedy,
    Temperature { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiAr {
    pub block_length: usize,
    pub steps_per_block: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub steps: usize,
    pub gen_len: usize,
    pub allocation: Allocation,
    pub position: PositionStrategy,
    pub token: TokenMode,
    /// Initial EOS temperature `lambda_init`; `None` disables annealing.
    #[serde(default)]
    pub eos_annealing: Option<f64>,
    #[serde(default)]
    pub semi_ar: Option<SemiAr>,
    #[serde(default)]
    pub seed: u64,
}

impl DecodeConfig {
    /// Greedy top-1 confidence decoding with a linear allocation.
    pub fn new(steps: usize, gen_len: usize) -> Self {
        DecodeConfig {
            steps,
            gen_len,
            allocation: Allocation::Linear,
            position: PositionStrategy::Top1Confidence,
            token: TokenMode::Greedy,
            eos_annealing: None,
            semi_ar: None,
            seed: 0,
        }
    }

    pub fn semi_ar(gen_len: usize, block_length: usize, steps_per_block: usize, seed: u64) -> Self {
        let mut c = DecodeConfig::new(steps_per_block * gen_len / block_length.max(1), gen_len);
        c.semi_ar = Some(SemiAr {
            block_length,
            steps_per_block,
        });
        c.seed = seed;
        c
    }

    pub fn with_position(mut self, position: PositionStrategy) -> Self {
        self.position = position;
        self
    }

    pub fn with_token(mut self, token: TokenMode) -> Self {
        self.token = token;
        self
    }

    pub fn with_allocation(mut self, allocation: Allocation) -> Self {
        self.allocation = allocation;
        self
    }

    pub fn with_annealing(mut self, lambda_init: Option<f64>) -> Self {
        self.eos_annealing = lambda_init;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.gen_len == 0 {
            return Err(Error::Config("steps and gen_len must be at least 1".into()));
        }
        if self.steps > self.gen_len {
            return Err(Error::Config(format!(
                "steps {} exceed gen_len {}",
                self.steps, self.gen_len
            )));
        }
        if let Allocation::Progressive { w, v } = self.allocation {
            if w * self.steps > self.gen_len {
                return Err(Error::InfeasibleSchedule {
                    required: w * self.steps,
                    length: self.gen_len,
                });
            }
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("progressive exponent v = {v} must be >= 0")));
            }
        }
        if let PositionStrategy::DelayedRandom { step } = self.position {
            if step == 0 || step > self.steps {
                return Err(Error::Config(format!(
                    "delayed_random step {step} outside 1..={}",
                    self.steps
                )));
            }
        }
        if let TokenMode::Temperature { tau } = self.token {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Config(format!("temperature {tau} must be positive")));
            }
        }
        if let Some(l) = self.eos_annealing {
            if !(l >= 1.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda_init {l} must be >= 1")));
            }
        }
        if let Some(sa) = self.semi_ar {
            if sa.block_length == 0 || !self.gen_len.is_multiple_of(sa.block_length) {
                return Err(Error::Config(format!(
                    "block_length {} must divide gen_len {}",
                    sa.block_length, self.gen_len
                )));
            }
            if sa.steps_per_block == 0
                || sa.steps_per_block > sa.block_length
                || sa.steps_per_block * (self.gen_len / sa.block_length) != self.steps
            {
                return Err(Error::Config(format!(
                    "steps_per_block {} x {} blocks must equal steps {} (and not exceed block_length)",
                    sa.steps_per_block,
                    self.gen_len / sa.block_length,
                    self.steps
                )));
            }
        }
        Ok(())
    }
}

/// Per-step unmask counts `n_1..n_T`, summing to `gen_len`.
pub fn allocate_tokens(allocation: &Allocation, steps: usize, gen_len: usize) -> Result<Vec<usize>> {
    if steps == 0 {
        return Err(Error::Config("steps must be at least 1".into()));
    }
    match *allocation {
        Allocation::Linear => {
            let base = gen_len / steps;
            let extra = gen_len % steps;
            Ok((0..steps)
                .map(|i| base + usize::from(i >= steps - extra))
                .collect())
        }
        Allocation::Progressive { w, v } => {
            if w * steps > gen_len {
                return Err(Error::InfeasibleSchedule {
                    required: w * steps,
                    length: gen_len,
                });
            }
            let resid = gen_len - w * steps;
            let shares = apportion(resid, steps, v);
            Ok(shares.into_iter().map(|s| w + s).collect())
        }
    }
}

/// Largest-remainder apportionment of `total` over steps `d = 1..=steps` with weights
/// `d^v`; equal remainders favour later steps. Integer exponents use exact arithmetic.
fn apportion(total: usize, steps: usize, v: f64) -> Vec<usize> {
    if total == 0 {
        return vec![0; steps];
    }
    let mut shares = vec![0usize; steps];
    // (remainder key, step index) sorted descending by key then index
    let mut order: Vec<(f64, u128, usize)> = Vec::with_capacity(steps);
    let exact = v.fract() == 0.0 && (0.0..=6.0).contains(&v);
    if exact {
        let e = v as u32;
        let weights: Vec<u128> = (1..=steps as u128).map(|d| d.pow(e)).collect();
        let sum: u128 = weights.iter().sum();
        for (i, &wt) in weights.iter().enumerate() {
            let num = total as u128 * wt;
            shares[i] = (num / sum) as usize;
            order.push((0.0, num % sum, i));
        }
    } else {
        let weights: Vec<f64> = (1..=steps).map(|d| (d as f64).powf(v)).collect();
        let sum: f64 = weights.iter().sum();
        for (i, &wt) in weights.iter().enumerate() {
            let q = total as f64 * wt / sum;
            shares[i] = q.floor() as usize;
            order.push((q - q.floor(), 0, i));
        }
    }
    let assigned: usize = shares.iter().sum();
    order.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(b.1.cmp(&a.1))
            .then(b.2.cmp(&a.2))
    });
    for &(_, _, i) in order.iter().take(total - assigned) {
        shares[i] += 1;
    }
    shares
}

/// EOS temperature at step `d`: linear decay from `lambda_init` (at `d = 0`) to 1 at `d = T`.
pub fn eos_lambda(d: usize, steps: usize, lambda_init: f64) -> Result<f64> {
    if !(lambda_init >= 1.0 && lambda_init.is_finite()) {
        return Err(Error::Config(format!("lambda_init {lambda_init} must be >= 1")));
    }
    if d == 0 || d > steps {
        return Err(Error::Domain(format!("step {d} outside 1..={steps}")));
    }
    Ok(1.0 + (lambda_init - 1.0) * (steps - d) as f64 / steps as f64)
}

/// Distribution used for ranking at `pos`: the raw one when `lambda == 1`, otherwise the
/// softmax of the logits with the EOS logit divided by `lambda`.
pub fn ranking_distribution(grid: &PredictionGrid, pos: usize, lambda: f64, eos_id: usize) -> Vec<f64> {
    if lambda == 1.0 {
        return grid.probs.row(pos).to_vec();
    }
    let mut z = grid.logits.row(pos).to_vec();
    z[eos_id] /= lambda;
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

fn top2(p: &[f64]) -> (f64, f64) {
    let mut a = f64::NEG_INFINITY;
    let mut b = f64::NEG_INFINITY;
    for &x in p {
        if x > a {
            b = a;
            a = x;
        } else if x > b {
            b = x;
        }
    }
    (a, b)
}

/// Top-1 probability of the (possibly EOS-annealed) ranking distribution per position.
pub fn ranking_confidence(grid: &PredictionGrid, positions: &[usize], lambda: f64, eos_id: usize) -> Vec<f64> {
    positions
        .iter()
        .map(|&p| top2(&ranking_distribution(grid, p, lambda, eos_id)).0)
        .collect()
}

/// `p1 - p2` of the ranking distribution per position.
pub fn ranking_margin(grid: &PredictionGrid, positions: &[usize], lambda: f64, eos_id: usize) -> Vec<f64> {
    positions
        .iter()
        .map(|&p| {
            let (a, b) = top2(&ranking_distribution(grid, p, lambda, eos_id));
            a - b.max(0.0)
        })
        .collect()
}

/// The `n` highest-scoring candidates; ties go to the lowest position. Output is sorted.
pub fn top_by_score(candidates: &[usize], scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if n > candidates.len() {
        return Err(Error::Allocation {
            requested: n,
            available: candidates.len(),
        });
    }
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(candidates[a].cmp(&candidates[b]))
    });
    let mut out: Vec<usize> = idx[..n].iter().map(|&i| candidates[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// `n` candidates drawn uniformly without replacement. Output is sorted.
pub fn uniform_subset<R: Rng + ?Sized>(candidates: &[usize], n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n > candidates.len() {
        return Err(Error::Allocation {
            requested: n,
            available: candidates.len(),
        });
    }
    let mut out: Vec<usize> = index::sample(rng, candidates.len(), n)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Chooses `U_d` among the masked positions for every strategy except the planner, which
/// the engine handles at `d = 1` (it falls back to top-1 confidence afterwards).
#[allow(clippy::too_many_arguments)]
pub fn select_positions<R: Rng + ?Sized>(
    strategy: &PositionStrategy,
    grid: &PredictionGrid,
    masked: &[usize],
    n: usize,
    d: usize,
    lambda: f64,
    eos_id: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n > masked.len() {
        return Err(Error::Allocation {
            requested: n,
            available: masked.len(),
        });
    }
    let uniform = match *strategy {
        PositionStrategy::Ancestral => true,
        PositionStrategy::RandomInitial => d == 1,
        PositionStrategy::DelayedRandom { step } => d == step,
        _ => false,
    };
    if uniform {
        return uniform_subset(masked, n, rng);
    }
    let scores = match strategy {
        PositionStrategy::ProbabilityMargin => ranking_margin(grid, masked, lambda, eos_id),
        _ => ranking_confidence(grid, masked, lambda, eos_id),
    };
    top_by_score(masked, &scores, n)
}

/// Tokens committed at `positions`, always from the raw (never annealed) logits.
pub fn select_tokens<R: Rng + ?Sized>(
    grid: &PredictionGrid,
    positions: &[usize],
    mode: &TokenMode,
    rng: &mut R,
) -> Vec<usize> {
    positions
        .iter()
        .map(|&p| match *mode {
            TokenMode::Greedy => grid.top1(p).0,
            TokenMode::Temperature { tau } => sample_tempered(&grid.logits.row(p).to_vec(), tau, rng),
        })
        .collect()
}

/// Samples from `softmax(logits / tau)`; `-inf` logits have zero mass.
pub fn sample_tempered<R: Rng + ?Sized>(logits: &[f64], tau: f64, rng: &mut R) -> usize {
    let p = tempered_probs(logits, tau);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            acc += pi;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

pub fn tempered_probs(logits: &[f64], tau: f64) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&z| ((z - m) / tau).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}
