use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decode::{
    decode, decode_with_prefix, DecodeConfig, InitialPlanner, PositionStrategy, TokenMode, Trajectory,
};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::planner::PlannerParams;
use crate::rng::{derive_seed, stream};
use crate::tasks::TaskInstance;

use super::stats::{mean, pass_at_k_outcomes, Estimate};

/// Bootstrap resamples used by the experiment reports.
pub const RESAMPLES: usize = 2000;

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Seed of sample `j` of instance `i` under experiment seed `seed`.
pub fn sample_seed(seed: u64, instance: usize, sample: usize) -> u64 {
    derive_seed(derive_seed(seed, "instance", instance as u64), "sample", sample as u64)
}

/// Decodes `samples` trajectories per instance. Output is indexed `[instance][sample]`
/// and does not depend on the worker count.
pub fn sample_trajectories<M: Denoiser + Sync>(
    model: &M,
    planner: Option<&dyn InitialPlanner>,
    instances: &[TaskInstance],
    config: &DecodeConfig,
    samples: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<Vec<Trajectory>>> {
    config.validate()?;
    let jobs: Vec<(usize, usize)> = (0..instances.len())
        .flat_map(|i| (0..samples).map(move |j| (i, j)))
        .collect();
    let flat: Vec<Result<Trajectory>> = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|&(i, j)| {
                let cfg = config.clone().with_seed(sample_seed(seed, i, j));
                decode(model, &instances[i].prompt, &cfg, planner)
            })
            .collect()
    });
    let mut out: Vec<Vec<Trajectory>> = (0..instances.len()).map(|_| Vec::with_capacity(samples)).collect();
    for ((i, _), t) in jobs.into_iter().zip(flat) {
        out[i].push(t?);
    }
    Ok(out)
}

/// Rewards of one trajectory per instance.
pub fn evaluate<M: Denoiser + Sync>(
    model: &M,
    planner: Option<&dyn InitialPlanner>,
    instances: &[TaskInstance],
    config: &DecodeConfig,
    seed: u64,
    workers: usize,
) -> Result<(Vec<f64>, Vec<Trajectory>)> {
    let trajs: Vec<Trajectory> = sample_trajectories(model, planner, instances, config, 1, seed, workers)?
        .into_iter()
        .map(|mut v| v.remove(0))
        .collect();
    let rewards = instances
        .iter()
        .zip(&trajs)
        .map(|(inst, t)| inst.reward(t.generated()))
        .collect();
    Ok((rewards, trajs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    pub position: PositionStrategy,
    pub token: TokenMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKPoint {
    pub k: usize,
    pub estimate: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassAtKCurve {
    pub variant: String,
    pub points: Vec<PassAtKPoint>,
    /// Success flags, `[instance][sample]`.
    pub successes: Vec<Vec<bool>>,
}

impl PassAtKCurve {
    /// Per-instance pass@k values.
    pub fn per_instance(&self, k: usize) -> Result<Vec<f64>> {
        self.successes.iter().map(|s| pass_at_k_outcomes(s, k)).collect()
    }
}

/// `1, 2, 4, ...` up to `samples`, with `samples` itself always included.
pub fn k_grid(samples: usize) -> Vec<usize> {
    let mut ks: Vec<usize> = std::iter::successors(Some(1usize), |k| Some(k * 2))
        .take_while(|&k| k <= samples)
        .collect();
    if ks.last() != Some(&samples) && samples > 0 {
        ks.push(samples);
    }
    ks
}

/// pass@k curves for several decoding variants sharing `base`'s schedule.
pub fn randomness_comparison<M: Denoiser + Sync>(
    model: &M,
    instances: &[TaskInstance],
    base: &DecodeConfig,
    variants: &[Variant],
    samples: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<PassAtKCurve>> {
    if samples == 0 || instances.is_empty() {
        return Err(Error::Domain("need at least one instance and one sample".into()));
    }
    let mut curves = Vec::with_capacity(variants.len());
    for (vi, v) in variants.iter().enumerate() {
        let cfg = base.clone().with_position(v.position).with_token(v.token);
        let trajs = sample_trajectories(model, None, instances, &cfg, samples, derive_seed(seed, "variant", vi as u64), workers)?;
        let successes: Vec<Vec<bool>> = instances
            .iter()
            .zip(&trajs)
            .map(|(inst, ts)| ts.iter().map(|t| inst.reward(t.generated()) >= 1.0).collect())
            .collect();
        let mut points = Vec::new();
        for k in k_grid(samples) {
            let per: Vec<f64> = successes
                .iter()
                .map(|s| pass_at_k_outcomes(s, k))
                .collect::<Result<_>>()?;
            points.push(PassAtKPoint {
                k,
                estimate: Estimate::from_values(&per, RESAMPLES, derive_seed(seed, "passk-ci", k as u64))?,
            });
        }
        curves.push(PassAtKCurve {
            variant: v.name.clone(),
            points,
            successes,
        });
    }
    Ok(curves)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BranchMode {
    /// Uniform position selection after the anchored prefix, greedy tokens.
    Positional,
    /// Top-1 positions with temperature token sampling.
    Token { tau: f64 },
    /// Greedy top-1 continuation (no stochasticity).
    Deterministic,
}

fn default_n_initial() -> usize {
    32
}
fn default_anchor_count() -> usize {
    4
}
fn default_continuations() -> usize {
    8
}
fn default_anchor_depth() -> usize {
    4
}
fn default_branch() -> BranchMode {
    BranchMode::Positional
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnchoringOptions {
    #[serde(default = "default_n_initial")]
    pub n_initial: usize,
    #[serde(default = "default_anchor_count")]
    pub anchor_count: usize,
    #[serde(default = "default_continuations")]
    pub continuations: usize,
    #[serde(default = "default_anchor_depth")]
    pub anchor_depth: usize,
    #[serde(default = "default_branch")]
    pub branch: BranchMode,
}

impl AnchoringOptions {
    pub fn new(branch: BranchMode) -> Self {
        AnchoringOptions {
            n_initial: default_n_initial(),
            anchor_count: default_anchor_count(),
            continuations: default_continuations(),
            anchor_depth: default_anchor_depth(),
            branch,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub instance: usize,
    pub anchor_seed: u64,
    pub anchor_reward: f64,
    pub branch_rewards: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub correct: bool,
    pub anchors: Vec<AnchorRecord>,
    /// Mean branch accuracy, bootstrapped over anchors; `None` when the category is empty.
    pub estimate: Option<Estimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchoringReport {
    pub options: AnchoringOptions,
    pub stage1_correct: usize,
    pub stage1_total: usize,
    pub correct: CategoryReport,
    pub incorrect: CategoryReport,
}

/// Two-stage anchoring: random-first-step greedy runs are split by correctness, a few per
/// category are replayed exactly through `anchor_depth` steps and then branched.
pub fn anchoring_experiment<M: Denoiser + Sync>(
    model: &M,
    instances: &[TaskInstance],
    base: &DecodeConfig,
    opts: &AnchoringOptions,
    seed: u64,
    workers: usize,
) -> Result<AnchoringReport> {
    if opts.n_initial < 2 * opts.anchor_count || opts.continuations == 0 {
        return Err(Error::Config(format!(
            "n_initial {} must be at least twice anchor_count {}, continuations >= 1",
            opts.n_initial, opts.anchor_count
        )));
    }
    if opts.anchor_depth == 0 || opts.anchor_depth >= base.steps {
        return Err(Error::Config(format!(
            "anchor_depth {} must lie in 1..{}",
            opts.anchor_depth, base.steps
        )));
    }
    let stage1_cfg = base
        .clone()
        .with_position(PositionStrategy::RandomInitial)
        .with_token(TokenMode::Greedy);
    let stage1 = sample_trajectories(model, None, instances, &stage1_cfg, opts.n_initial, seed, workers)?;
    let branch_cfg = match opts.branch {
        BranchMode::Positional => base
            .clone()
            .with_position(PositionStrategy::Ancestral)
            .with_token(TokenMode::Greedy),
        BranchMode::Token { tau } => base
            .clone()
            .with_position(PositionStrategy::Top1Confidence)
            .with_token(TokenMode::Temperature { tau }),
        BranchMode::Deterministic => base
            .clone()
            .with_position(PositionStrategy::Top1Confidence)
            .with_token(TokenMode::Greedy),
    };
    // (instance, anchor trajectory, correct?)
    let mut anchors: Vec<(usize, &Trajectory, bool)> = Vec::new();
    let mut stage1_correct = 0;
    for (i, (inst, runs)) in instances.iter().zip(&stage1).enumerate() {
        let (good, bad): (Vec<&Trajectory>, Vec<&Trajectory>) =
            runs.iter().partition(|t| inst.reward(t.generated()) >= 1.0);
        stage1_correct += good.len();
        let mut rng = stream(seed, "anchor-pick", i as u64);
        for (group, correct) in [(good, true), (bad, false)] {
            let take = opts.anchor_count.min(group.len());
            let mut picked = index::sample(&mut rng, group.len(), take).into_vec();
            picked.sort_unstable();
            anchors.extend(picked.into_iter().map(|k| (i, group[k], correct)));
        }
    }
    let jobs: Vec<(usize, usize)> = (0..anchors.len())
        .flat_map(|a| (0..opts.continuations).map(move |c| (a, c)))
        .collect();
    let results: Vec<Result<f64>> = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|&(a, c)| {
                let (i, anchor, _) = anchors[a];
                let cfg = branch_cfg
                    .clone()
                    .with_seed(derive_seed(anchor.config.seed, "branch", c as u64));
                let prefix = &anchor.steps[..opts.anchor_depth];
                let t = decode_with_prefix(model, &instances[i].prompt, &cfg, prefix, None)?;
                for (x, y) in t.steps.iter().zip(prefix) {
                    if x.positions != y.positions || x.tokens != y.tokens {
                        return Err(Error::Integrity(format!(
                            "branch diverged from its anchor at step {}",
                            x.d
                        )));
                    }
                }
                Ok(instances[i].reward(t.generated()))
            })
            .collect()
    });
    let mut branch: Vec<Vec<f64>> = vec![Vec::with_capacity(opts.continuations); anchors.len()];
    for ((a, _), r) in jobs.into_iter().zip(results) {
        branch[a].push(r?);
    }
    let mut cats = [Vec::new(), Vec::new()];
    for ((i, t, correct), rewards) in anchors.iter().zip(branch) {
        cats[usize::from(*correct)].push(AnchorRecord {
            instance: *i,
            anchor_seed: t.config.seed,
            anchor_reward: instances[*i].reward(t.generated()),
            branch_rewards: rewards,
        });
    }
    let report = |records: Vec<AnchorRecord>, correct: bool| -> Result<CategoryReport> {
        let per_anchor: Vec<f64> = records.iter().map(|r| mean(&r.branch_rewards)).collect();
        let estimate = if per_anchor.is_empty() {
            None
        } else {
            Some(Estimate::from_values(
                &per_anchor,
                RESAMPLES,
                derive_seed(seed, "anchor-ci", u64::from(correct)),
            )?)
        };
        Ok(CategoryReport {
            correct,
            anchors: records,
            estimate,
        })
    };
    let [bad, good] = cats;
    Ok(AnchoringReport {
        options: opts.clone(),
        stage1_correct,
        stage1_total: instances.len() * opts.n_initial,
        correct: report(good, true)?,
        incorrect: report(bad, false)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub kind: String,
    pub grid_point: serde_json::Value,
    pub config: DecodeConfig,
    pub outcomes: Vec<f64>,
    pub aggregate: Estimate,
    pub seed: u64,
    pub runtime_secs: f64,
}

impl ExperimentRecord {
    /// Recomputes the aggregate from the stored outcomes and compares it exactly.
    pub fn check_aggregate(&self) -> Result<()> {
        let again = Estimate::from_values(&self.outcomes, RESAMPLES, derive_seed(self.seed, "record-ci", 0))?;
        if again != self.aggregate {
            return Err(Error::Integrity(format!("{} aggregate does not match outcomes", self.kind)));
        }
        Ok(())
    }
}

/// A named decoding setup for composition sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedConfig {
    pub name: String,
    pub config: DecodeConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "axis", content = "values", rename_all = "snake_case")]
pub enum AblationAxis {
    /// Planner candidate pool sizes `P`.
    Candidates(Vec<usize>),
    /// Step budgets `T`, reusing the planner trained at the base `T`.
    Steps(Vec<usize>),
    /// Alternative strategy compositions.
    Strategies(Vec<NamedConfig>),
}

#[allow(clippy::too_many_arguments)]
fn record<M: Denoiser + Sync>(
    kind: &str,
    grid_point: serde_json::Value,
    model: &M,
    planner: Option<&dyn InitialPlanner>,
    instances: &[TaskInstance],
    config: &DecodeConfig,
    seed: u64,
    workers: usize,
) -> Result<ExperimentRecord> {
    let start = Instant::now();
    let (outcomes, _) = evaluate(model, planner, instances, config, seed, workers)?;
    let aggregate = Estimate::from_values(&outcomes, RESAMPLES, derive_seed(seed, "record-ci", 0))?;
    Ok(ExperimentRecord {
        kind: kind.to_string(),
        grid_point,
        config: config.clone(),
        outcomes,
        aggregate,
        seed,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// One record per grid point along `axis`.
pub fn ablation_sweep<M: Denoiser + Sync>(
    model: &M,
    planner: Option<&PlannerParams>,
    instances: &[TaskInstance],
    base: &DecodeConfig,
    axis: &AblationAxis,
    seed: u64,
    workers: usize,
) -> Result<Vec<ExperimentRecord>> {
    let need_planner = || {
        planner.ok_or_else(|| Error::Config("this sweep needs a planner checkpoint".into()))
    };
    let mut out = Vec::new();
    match axis {
        AblationAxis::Candidates(ps) => {
            let p = need_planner()?;
            let cfg = base.clone().with_position(PositionStrategy::PlannerGuided);
            for &count in ps {
                let mut q = p.clone();
                q.config.candidate_count = count;
                q.config.validate()?;
                out.push(record(
                    "candidates",
                    serde_json::json!({ "candidates": count }),
                    model,
                    Some(&q),
                    instances,
                    &cfg,
                    seed,
                    workers,
                )?);
            }
        }
        AblationAxis::Steps(ts) => {
            let guided = base.position == PositionStrategy::PlannerGuided;
            let p = if guided { Some(need_planner()?) } else { planner };
            for &t in ts {
                let mut cfg = base.clone();
                cfg.steps = t;
                out.push(record(
                    "steps",
                    serde_json::json!({ "steps": t }),
                    model,
                    p.map(|x| x as &dyn InitialPlanner),
                    instances,
                    &cfg,
                    seed,
                    workers,
                )?);
            }
        }
        AblationAxis::Strategies(named) => {
            for n in named {
                let p = if n.config.position == PositionStrategy::PlannerGuided {
                    Some(need_planner()?)
                } else {
                    None
                };
                out.push(record(
                    "strategy",
                    serde_json::json!({ "strategy": n.name }),
                    model,
                    p.map(|x| x as &dyn InitialPlanner),
                    instances,
                    &n.config,
                    seed,
                    workers,
                )?);
            }
        }
    }
    Ok(out)
}
