//! NELBO loss/gradient and the training loop.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::BackboneParams;
use crate::decode::{self, DecodeConfig};
use crate::diffusion::{self, forward_mask, NoiseSchedule, MC_TIME_EPS};
use crate::error::{Error, Result};
use crate::nn::{clip_grad_norm, AdamW, Parameters};
use crate::rng;
use crate::tasks::TaskInstance;

/// Clean sequences sharing one length and prompt length, with their corruption times.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub sequences: Vec<Vec<usize>>,
    pub prompt_len: usize,
    pub times: Vec<f64>,
}

impl TrainBatch {
    /// Samples `size` instances with replacement and a time `t ~ U(eps, 1]` for each.
    pub fn sample<R: Rng + ?Sized>(corpus: &[TaskInstance], size: usize, rng: &mut R) -> Self {
        let mut sequences = Vec::with_capacity(size);
        let mut times = Vec::with_capacity(size);
        for _ in 0..size {
            let inst = &corpus[rng.random_range(0..corpus.len())];
            sequences.push(inst.sequence());
            times.push(MC_TIME_EPS + (1.0 - MC_TIME_EPS) * (1.0 - rng.random::<f64>()));
        }
        TrainBatch {
            sequences,
            prompt_len: corpus[0].prompt.len(),
            times,
        }
    }
}

/// Loss on already-corrupted sequences: mean over the batch of
/// `w(t) * sum_{masked l} -log p(x_l)`, plus `dL/dlogits`.
fn loss_on(
    params: &BackboneParams,
    clean: &[Vec<usize>],
    corrupted: &[Vec<usize>],
    times: &[f64],
    schedule: &NoiseSchedule,
) -> Result<(f64, Array2<f64>, super::ForwardCache)> {
    let views: Vec<&[usize]> = corrupted.iter().map(Vec::as_slice).collect();
    let cache = params.forward(&views, times)?;
    let seq_len = cache.seq_len;
    let mask_id = params.config.vocab.mask_id;
    let mut probs = cache.logits.clone();
    crate::nn::softmax_rows(&mut probs);
    let mut dlogits = Array2::zeros(probs.raw_dim());
    let scale = 1.0 / clean.len() as f64;
    let mut total = 0.0;
    for (si, (x, z)) in clean.iter().zip(corrupted).enumerate() {
        let masked: Vec<usize> = (0..seq_len).filter(|&p| z[p] == mask_id).collect();
        if masked.is_empty() {
            continue;
        }
        let w = schedule.loss_weight(times[si])?;
        let mut seq_loss = 0.0;
        for &p in &masked {
            let r = si * seq_len + p;
            seq_loss -= probs[[r, x[p]]].ln();
            let mut drow = dlogits.row_mut(r);
            drow.assign(&probs.row(r));
            drow[x[p]] -= 1.0;
            drow *= w * scale;
        }
        let contrib = w * seq_loss;
        if !contrib.is_finite() {
            return Err(Error::NonFiniteLoss { index: si });
        }
        total += contrib;
    }
    Ok((total * scale, dlogits, cache))
}

fn corrupt<R: Rng + ?Sized>(
    params: &BackboneParams,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if batch.sequences.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let vocab = params.config.vocab;
    batch
        .sequences
        .iter()
        .zip(&batch.times)
        .map(|(x, &t)| {
            Ok(forward_mask(x, batch.prompt_len, t, schedule, &vocab, rng)?
                .tokens()
                .to_vec())
        })
        .collect()
}

/// Samples masks for `batch` and returns the NELBO estimate with its gradient.
pub fn loss_and_grad<R: Rng + ?Sized>(
    params: &BackboneParams,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, BackboneParams)> {
    let corrupted = corrupt(params, batch, schedule, rng)?;
    let (loss, dlogits, cache) = loss_on(params, &batch.sequences, &corrupted, &batch.times, schedule)?;
    Ok((loss, params.backward(&cache, &dlogits)))
}

/// Loss only, for the same mask draws `loss_and_grad` would make with an identical `rng`.
pub fn batch_loss<R: Rng + ?Sized>(
    params: &BackboneParams,
    batch: &TrainBatch,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64> {
    let corrupted = corrupt(params, batch, schedule, rng)?;
    Ok(loss_on(params, &batch.sequences, &corrupted, &batch.times, schedule)?.0)
}

fn default_batch_size() -> usize {
    32
}
fn default_lr() -> f64 {
    3e-4
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_grad_clip() -> f64 {
    1.0
}
fn default_eval_instances() -> usize {
    64
}
fn default_nelbo_samples() -> usize {
    4
}
fn default_block_length() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_grad_clip")]
    pub grad_clip: f64,
    /// Evaluate held-out NELBO and exact match every this many steps (0 = only at the end).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_instances")]
    pub eval_instances: usize,
    #[serde(default = "default_nelbo_samples")]
    pub nelbo_samples: usize,
    /// Block length of the semi-AR decode used for exact match.
    #[serde(default = "default_block_length")]
    pub eval_block_length: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainOptions {
    pub fn new(steps: usize, seed: u64) -> Self {
        TrainOptions {
            steps,
            batch_size: default_batch_size(),
            lr: default_lr(),
            betas: default_betas(),
            weight_decay: default_weight_decay(),
            grad_clip: default_grad_clip(),
            eval_every: 0,
            eval_instances: default_eval_instances(),
            nelbo_samples: default_nelbo_samples(),
            eval_block_length: default_block_length(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: usize,
    pub train_loss: f64,
    pub heldout_loss: f64,
    pub exact_match: f64,
}

/// Mean Monte Carlo NELBO per held-out sequence.
pub fn heldout_nelbo(
    params: &BackboneParams,
    instances: &[TaskInstance],
    samples: usize,
    seed: u64,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, inst) in instances.iter().enumerate() {
        let mut r = rng::stream(seed, "heldout-nelbo", i as u64);
        let v = diffusion::nelbo_samples(params, &inst.sequence(), inst.prompt.len(), samples, schedule, &mut r)?;
        total += v.iter().sum::<f64>() / v.len() as f64;
    }
    Ok(total / instances.len().max(1) as f64)
}

/// Fraction of instances solved exactly under semi-AR decoding with one token per step.
pub fn semi_ar_exact_match(
    params: &BackboneParams,
    instances: &[TaskInstance],
    block_length: usize,
) -> Result<f64> {
    let mut hits = 0usize;
    for inst in instances {
        let l = inst.gold.len();
        let cfg = DecodeConfig::semi_ar(l, block_length.min(l), block_length.min(l), 0);
        let traj = decode::semi_ar_decode(params, &inst.prompt, &cfg)?;
        if inst.reward(traj.generated()) >= 1.0 {
            hits += 1;
        }
    }
    Ok(hits as f64 / instances.len().max(1) as f64)
}

/// Trains a fresh backbone on `corpus`, evaluating on `heldout`.
///
/// Aborts when the training loss stays above 10x its initial level for 100 consecutive
/// steps.
pub fn train_backbone(
    config: &super::BackboneConfig,
    corpus: &[TaskInstance],
    heldout: &[TaskInstance],
    opts: &TrainOptions,
    schedule: &NoiseSchedule,
) -> Result<(BackboneParams, Vec<TrainLogRow>)> {
    let mut params = BackboneParams::init(config, &mut rng::stream(opts.seed, "backbone-init", 0))?;
    let mut log = Vec::new();
    if opts.steps == 0 {
        return Ok((params, log));
    }
    if corpus.is_empty() {
        return Err(Error::InvalidInput("empty training corpus".into()));
    }
    let len = corpus[0].sequence().len();
    if corpus.iter().any(|c| c.sequence().len() != len) {
        return Err(Error::InvalidInput(
            "training instances must share one layout".into(),
        ));
    }
    let mut opt = AdamW::new(opts.lr, opts.betas, opts.weight_decay, params.decay_mask());
    let mut data_rng = rng::stream(opts.seed, "backbone-batches", 0);
    let mut mask_rng = rng::stream(opts.seed, "backbone-masks", 0);
    let eval_set = &heldout[..opts.eval_instances.min(heldout.len())];
    let mut initial: Option<f64> = None;
    let mut warm = Vec::new();
    let mut above = 0usize;
    let mut recent = 0.0;
    let mut recent_n = 0usize;
    for step in 1..=opts.steps {
        let batch = TrainBatch::sample(corpus, opts.batch_size, &mut data_rng);
        let (loss, grads) = loss_and_grad(&params, &batch, schedule, &mut mask_rng).map_err(|e| match e {
            Error::NonFiniteLoss { index } => Error::Training {
                batch: step,
                message: format!("non-finite loss at sequence {index}"),
            },
            other => other,
        })?;
        let mut g = grads.to_flat();
        clip_grad_norm(&mut g, opts.grad_clip);
        let mut flat = params.to_flat();
        opt.step(&mut flat, &g);
        params.load_flat(&flat);

        if initial.is_none() {
            warm.push(loss);
            if warm.len() == 10.min(opts.steps) {
                initial = Some(warm.iter().sum::<f64>() / warm.len() as f64);
            }
        }
        if let Some(init) = initial {
            if loss > 10.0 * init {
                above += 1;
                if above >= 100 {
                    return Err(Error::Training {
                        batch: step,
                        message: format!(
                            "diverged: loss {loss:.4} above 10x initial {init:.4} for 100 steps"
                        ),
                    });
                }
            } else {
                above = 0;
            }
        }
        recent += loss;
        recent_n += 1;
        let due = (opts.eval_every > 0 && step % opts.eval_every == 0) || step == opts.steps;
        if due && !eval_set.is_empty() {
            log.push(TrainLogRow {
                step,
                train_loss: recent / recent_n as f64,
                heldout_loss: heldout_nelbo(&params, eval_set, opts.nelbo_samples, opts.seed, schedule)?,
                exact_match: semi_ar_exact_match(&params, eval_set, opts.eval_block_length)?,
            });
            recent = 0.0;
            recent_n = 0;
        }
    }
    Ok((params, log))
}
