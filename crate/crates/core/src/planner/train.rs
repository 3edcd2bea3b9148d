use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{AdamW, Parameters};
use crate::rng::stream;

use super::{bce_with_logit, sigmoid, PlannerConfig, PlannerDataset, PlannerParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_bce: f64,
    pub val_bce: f64,
    pub val_reranking_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_val_reranking_accuracy: f64,
    /// Expected accuracy of picking a validation candidate uniformly at random.
    pub random_pick_baseline: f64,
    pub train_prompts: Vec<usize>,
    pub val_prompts: Vec<usize>,
    pub param_count: usize,
}

fn group_by_prompt(ds: &PlannerDataset) -> BTreeMap<usize, Vec<usize>> {
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in ds.examples.iter().enumerate() {
        g.entry(e.prompt_id).or_default().push(i);
    }
    g
}

/// Mean label of the top-scored candidate per prompt (ties: earliest example). With
/// binary labels this is the fraction of prompts where the pick is correct.
pub fn reranking_accuracy(params: &PlannerParams, ds: &PlannerDataset, prompts: &[usize]) -> Result<f64> {
    let groups = group_by_prompt(ds);
    let l = ds.meta.gen_len;
    let mut total = 0.0;
    let mut n = 0usize;
    for pid in prompts {
        let Some(idx) = groups.get(pid) else { continue };
        let off = ds.examples[idx[0]].hidden_offset;
        let window = ds.hidden.slice(s![off..off + l, ..]);
        let sets: Vec<Vec<usize>> = idx.iter().map(|&i| ds.examples[i].positions.clone()).collect();
        let scores = params.score_sets(&window, &sets)?;
        let mut best = 0;
        for (k, &sc) in scores.iter().enumerate() {
            if sc > scores[best] {
                best = k;
            }
        }
        total += ds.examples[idx[best]].label;
        n += 1;
    }
    if n == 0 {
        return Err(Error::DegenerateData("no validation prompts with examples".into()));
    }
    Ok(total / n as f64)
}

fn gather(ds: &PlannerDataset, idx: &[usize]) -> (Array2<f64>, Vec<usize>, Array1<f64>) {
    let b = ds.meta.budget;
    let mut h = Array2::zeros((idx.len() * b, ds.meta.input_dim));
    let mut pos = Vec::with_capacity(idx.len() * b);
    let mut y = Array1::zeros(idx.len());
    for (k, &i) in idx.iter().enumerate() {
        let e = &ds.examples[i];
        h.slice_mut(s![k * b..(k + 1) * b, ..]).assign(&ds.candidate_hidden(e));
        pos.extend_from_slice(&e.positions);
        y[k] = e.label;
    }
    (h, pos, y)
}

fn mean_bce(params: &PlannerParams, ds: &PlannerDataset, idx: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in idx.chunks(1024) {
        let (h, pos, y) = gather(ds, chunk);
        let c = params.forward(h, &pos, ds.meta.budget, None)?;
        total += c.logits.iter().zip(&y).map(|(&z, &t)| bce_with_logit(z, t)).sum::<f64>();
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Trains on a prompt-level split and returns the epoch with the best validation
/// reranking accuracy (earliest on ties).
pub fn train_planner(ds: &PlannerDataset, config: &PlannerConfig, seed: u64) -> Result<(PlannerParams, PlannerReport)> {
    config.validate()?;
    ds.validate()?;
    if config.input_dim != ds.meta.input_dim {
        return Err(Error::Config(format!(
            "planner input_dim {} but dataset hidden width {}",
            config.input_dim, ds.meta.input_dim
        )));
    }
    if config.budget != ds.meta.budget {
        return Err(Error::Config(format!(
            "planner budget {} but dataset sets have size {}",
            config.budget, ds.meta.budget
        )));
    }
    if config.max_positions < ds.meta.gen_len {
        return Err(Error::Config(format!(
            "max_positions {} below window length {}",
            config.max_positions, ds.meta.gen_len
        )));
    }
    let groups = group_by_prompt(ds);
    let mut ids: Vec<usize> = groups.keys().copied().collect();
    if ids.len() < 2 {
        return Err(Error::DegenerateData(format!(
            "{} prompt(s) with examples; a train/validation split needs two",
            ids.len()
        )));
    }
    ids.shuffle(&mut stream(seed, "planner-split", 0));
    let n_val = ((ids.len() as f64 * config.val_fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut val_prompts = ids[..n_val].to_vec();
    let mut train_prompts = ids[n_val..].to_vec();
    val_prompts.sort_unstable();
    train_prompts.sort_unstable();
    let train_idx: Vec<usize> = train_prompts.iter().flat_map(|p| groups[p].iter().copied()).collect();
    let val_idx: Vec<usize> = val_prompts.iter().flat_map(|p| groups[p].iter().copied()).collect();
    let (lo, hi) = train_idx
        .iter()
        .map(|&i| ds.examples[i].label)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), y| (a.min(y), b.max(y)));
    if hi - lo < 1e-12 {
        return Err(Error::DegenerateData(format!(
            "every training label equals {lo}; nothing to learn"
        )));
    }
    let random_pick_baseline = val_prompts
        .iter()
        .map(|p| groups[p].iter().map(|&i| ds.examples[i].label).sum::<f64>() / groups[p].len() as f64)
        .sum::<f64>()
        / val_prompts.len() as f64;

    let mut params = PlannerParams::init(config, &mut stream(seed, "planner-init", 0))?;
    let mut opt = AdamW::new(config.lr, (0.9, 0.999), config.weight_decay, params.decay_mask());
    let mut flat = params.to_flat();
    let mut best: Option<(PlannerParams, usize, f64)> = None;
    let mut epochs = Vec::new();
    for epoch in 1..=config.max_epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut stream(seed, "planner-epoch", epoch as u64));
        let mut drop_rng = stream(seed, "planner-dropout", epoch as u64);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (h, pos, y) = gather(ds, chunk);
            let cache = params.forward(h, &pos, config.budget, Some(&mut drop_rng))?;
            let n = chunk.len() as f64;
            let loss: f64 = cache.logits.iter().zip(&y).map(|(&z, &t)| bce_with_logit(z, t)).sum();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { index: epoch });
            }
            total += loss;
            let dl = Array1::from_iter(cache.logits.iter().zip(&y).map(|(&z, &t)| (sigmoid(z) - t) / n));
            let g = params.backward(&cache, &dl).to_flat();
            opt.step(&mut flat, &g);
            params.load_flat(&flat);
        }
        let acc = reranking_accuracy(&params, ds, &val_prompts)?;
        epochs.push(EpochReport {
            epoch,
            train_bce: total / train_idx.len() as f64,
            val_bce: mean_bce(&params, ds, &val_idx)?,
            val_reranking_accuracy: acc,
        });
        if best.as_ref().is_none_or(|b| acc > b.2) {
            best = Some((params.clone(), epoch, acc));
        }
    }
    let (best_params, best_epoch, best_acc) = best.expect("max_epochs >= 1");
    let report = PlannerReport {
        epochs,
        best_epoch,
        best_val_reranking_accuracy: best_acc,
        random_pick_baseline,
        train_prompts,
        val_prompts,
        param_count: best_params.param_count(),
    };
    Ok((best_params, report))
}
