use crate::diffusion::{Denoiser, LatentState, PredictionGrid};
use crate::error::{Error, Result};
use crate::rng::{stream, StreamRng};

use super::trajectory::{snapshot_digest, StepRecord, Trajectory};
use super::{
    allocate_tokens, eos_lambda, select_positions, select_tokens, top_by_score, ranking_confidence,
    Allocation, DecodeConfig, PositionStrategy,
};

/// Picks the first-step unmask set from the fully masked state's predictions.
pub trait InitialPlanner: Sync {
    /// Returns `budget` absolute positions, all masked in `state`.
    fn plan(
        &self,
        state: &LatentState,
        grid: &PredictionGrid,
        budget: usize,
        rng: &mut StreamRng,
    ) -> Result<Vec<usize>>;

    /// Identifier recorded in trajectory headers.
    fn digest(&self) -> String;
}

/// Decodes `config.gen_len` tokens after `prompt`.
pub fn decode(
    model: &dyn Denoiser,
    prompt: &[usize],
    config: &DecodeConfig,
    planner: Option<&dyn InitialPlanner>,
) -> Result<Trajectory> {
    decode_with_prefix(model, prompt, config, &[], planner)
}

/// Like [`decode`], but steps `1..=prefix.len()` commit exactly the positions and tokens of
/// `prefix` (window-relative) instead of choosing them.
pub fn decode_with_prefix(
    model: &dyn Denoiser,
    prompt: &[usize],
    config: &DecodeConfig,
    prefix: &[StepRecord],
    planner: Option<&dyn InitialPlanner>,
) -> Result<Trajectory> {
    config.validate()?;
    if config.semi_ar.is_some() {
        return semi_ar_run(model, prompt, config, prefix);
    }
    if config.position == PositionStrategy::PlannerGuided && planner.is_none() && prefix.is_empty() {
        return Err(Error::Config("planner_guided decoding requires a trained planner".into()));
    }
    let counts = allocate_tokens(&config.allocation, config.steps, config.gen_len)?;
    run(model, prompt, config, &counts, prefix, planner, |_, masked| masked.to_vec())
}

/// Semi-autoregressive decoding; `config.semi_ar` must be set.
pub fn semi_ar_decode(model: &dyn Denoiser, prompt: &[usize], config: &DecodeConfig) -> Result<Trajectory> {
    if config.semi_ar.is_none() {
        return Err(Error::Config("semi_ar settings missing".into()));
    }
    decode_with_prefix(model, prompt, config, &[], None)
}

fn semi_ar_run(
    model: &dyn Denoiser,
    prompt: &[usize],
    config: &DecodeConfig,
    prefix: &[StepRecord],
) -> Result<Trajectory> {
    let sa = config.semi_ar.expect("checked by caller");
    let per_block = allocate_tokens(&Allocation::Linear, sa.steps_per_block, sa.block_length)?;
    let blocks = config.gen_len / sa.block_length;
    let counts: Vec<usize> = (0..blocks).flat_map(|_| per_block.iter().copied()).collect();
    let plen = prompt.len();
    let mut inner = config.clone();
    inner.position = PositionStrategy::Top1Confidence;
    run(model, prompt, &inner, &counts, prefix, None, |d, masked| {
        let b = (d - 1) / sa.steps_per_block;
        let lo = plen + b * sa.block_length;
        let hi = lo + sa.block_length;
        masked.iter().copied().filter(|&p| p >= lo && p < hi).collect()
    })
    .map(|mut t| {
        t.config = config.clone();
        t
    })
}

fn run(
    model: &dyn Denoiser,
    prompt: &[usize],
    config: &DecodeConfig,
    counts: &[usize],
    prefix: &[StepRecord],
    planner: Option<&dyn InitialPlanner>,
    eligible: impl Fn(usize, &[usize]) -> Vec<usize>,
) -> Result<Trajectory> {
    let vocab = model.vocab();
    let t_total = config.steps;
    if prefix.len() > t_total {
        return Err(Error::InvalidInput(format!(
            "forced prefix of {} steps exceeds T = {t_total}",
            prefix.len()
        )));
    }
    let mut state = LatentState::fully_masked(prompt, config.gen_len, &vocab)?;
    let plen = state.prompt_len();
    let mut rng = stream(config.seed, "decode", 0);
    let mut steps = Vec::with_capacity(t_total);
    let mut eos_committed = 0usize;
    for d in 1..=t_total {
        let rec = decode_step(
            model,
            config,
            &mut state,
            d,
            counts[d - 1],
            prefix.get(d - 1),
            planner,
            &eligible,
            &mut rng,
        )
        .map_err(|e| Error::at_step(d, e))?;
        eos_committed += rec.tokens.iter().filter(|&&t| t == vocab.eos_id).count();
        steps.push(StepRecord {
            eos_committed,
            ..rec
        });
    }
    if !state.masked().is_empty() {
        return Err(Error::Allocation {
            requested: config.gen_len,
            available: config.gen_len - state.masked().len(),
        });
    }
    Ok(Trajectory {
        config: config.clone(),
        prompt: prompt.to_vec(),
        planner_digest: planner.map(|p| p.digest()),
        steps,
        final_tokens: state.tokens()[plen..].to_vec(),
    })
}

#[allow(clippy::too_many_arguments)]
fn decode_step(
    model: &dyn Denoiser,
    config: &DecodeConfig,
    state: &mut LatentState,
    d: usize,
    n: usize,
    forced: Option<&StepRecord>,
    planner: Option<&dyn InitialPlanner>,
    eligible: &impl Fn(usize, &[usize]) -> Vec<usize>,
    rng: &mut StreamRng,
) -> Result<StepRecord> {
    let vocab = model.vocab();
    let t_total = config.steps;
    let plen = state.prompt_len();
    state.step = d;
    state.time = (t_total - d + 1) as f64 / t_total as f64;
    let grid = model.predict(state)?;
    if grid.len() != state.len() {
        return Err(Error::InvalidInput(format!(
            "model returned {} rows for a sequence of {}",
            grid.len(),
            state.len()
        )));
    }
    let top1: Vec<f64> = (plen..state.len()).map(|p| grid.top1(p).1).collect();
    let (positions, tokens) = if let Some(f) = forced {
        if f.positions.len() != n || f.tokens.len() != n {
            return Err(Error::InvalidInput(format!(
                "forced step commits {} positions, allocation requires {n}",
                f.positions.len()
            )));
        }
        let abs: Vec<usize> = f.positions.iter().map(|&p| p + plen).collect();
        (abs, f.tokens.clone())
    } else {
        let masked: Vec<usize> = state.masked().iter().copied().collect();
        let candidates = eligible(d, &masked);
        let lambda = match config.eos_annealing {
            Some(l) => eos_lambda(d, t_total, l)?,
            None => 1.0,
        };
        let positions = match (config.position, d, planner) {
            (PositionStrategy::PlannerGuided, 1, Some(p)) => {
                let mut pos = p.plan(state, &grid, n, rng)?;
                pos.sort_unstable();
                pos.dedup();
                if pos.len() != n || pos.iter().any(|q| !state.masked().contains(q)) {
                    return Err(Error::InvalidInput(format!(
                        "planner returned an invalid set of {} positions (budget {n})",
                        pos.len()
                    )));
                }
                pos
            }
            (PositionStrategy::PlannerGuided, _, _) => {
                let scores = ranking_confidence(&grid, &candidates, lambda, vocab.eos_id);
                top_by_score(&candidates, &scores, n)?
            }
            (strategy, _, _) => {
                select_positions(&strategy, &grid, &candidates, n, d, lambda, vocab.eos_id, rng)?
            }
        };
        let tokens = select_tokens(&grid, &positions, &config.token, rng);
        (positions, tokens)
    };
    for (&p, &tok) in positions.iter().zip(&tokens) {
        if p < plen || p >= state.len() {
            return Err(Error::Range {
                position: p,
                max: state.len(),
            });
        }
        state.unmask(p, tok)?;
    }
    Ok(StepRecord {
        d,
        positions: positions.iter().map(|&p| p - plen).collect(),
        tokens,
        top1_digest: snapshot_digest(&top1),
        top1,
        eos_committed: 0,
    })
}
