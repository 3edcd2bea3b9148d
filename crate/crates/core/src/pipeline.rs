//! Commands that chain the library into runnable experiments.
//!
//! Every command reads and writes inside one run directory:
//!
//! ```text
//! tasks/         train.jsonl test.jsonl
//! backbone/      backbone.ckpt train_log.csv
//! planner_data/  dataset.jsonl hidden.bin
//! planner/       planner.ckpt report.json epochs.csv
//! decode/        trajectories/i0000_s000.jsonl ... heatmap_mean.csv
//! eval/          eval.json outcomes.csv
//! analyze/       step_metrics.csv summary.json
//! passk/         pass_at_k.csv curves.json
//! anchor/        report.json
//! ablate/        records.jsonl records.csv
//! ```
//!
//! Each command directory also receives `config.toml` (the resolved configuration) and
//! `manifest.json` (every input and output file with its SHA-256).

use std::collections::BTreeMap;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::backbone::{train_backbone, BackboneParams};
use crate::decode::{DecodeConfig, InitialPlanner, PositionStrategy, TokenMode, Trajectory};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::io::{load_backbone, load_planner, save_planner, Manifest, RunConfig};
use crate::lab::{self, Estimate, Variant, RESAMPLES};
use crate::nn::Parameters;
use crate::planner::{build_training_set, train_planner, PlannerDataset, PlannerParams};
use crate::rng::{derive_seed, stream};
use crate::tasks::{self, TaskInstance};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenTasks,
    TrainBackbone,
    GenPlannerData,
    TrainPlanner,
    Decode,
    Eval,
    Analyze,
    PassAtK,
    Anchor,
    Ablate,
}

impl Command {
    pub const ALL: [Command; 10] = [
        Command::GenTasks,
        Command::TrainBackbone,
        Command::GenPlannerData,
        Command::TrainPlanner,
        Command::Decode,
        Command::Eval,
        Command::Analyze,
        Command::PassAtK,
        Command::Anchor,
        Command::Ablate,
    ];

    /// Output directory name inside the run directory.
    pub fn dir(&self) -> &'static str {
        match self {
            Command::GenTasks => "tasks",
            Command::TrainBackbone => "backbone",
            Command::GenPlannerData => "planner_data",
            Command::TrainPlanner => "planner",
            Command::Decode => "decode",
            Command::Eval => "eval",
            Command::Analyze => "analyze",
            Command::PassAtK => "passk",
            Command::Anchor => "anchor",
            Command::Ablate => "ablate",
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Command::GenTasks => "gen-tasks",
            Command::TrainBackbone => "train-backbone",
            Command::GenPlannerData => "gen-planner-data",
            Command::TrainPlanner => "train-planner",
            Command::Decode => "decode",
            Command::Eval => "eval",
            Command::Analyze => "analyze",
            Command::PassAtK => "passk",
            Command::Anchor => "anchor",
            Command::Ablate => "ablate",
        }
    }
}

/// The command sequence of a full run, from task generation to evaluation.
pub const QUICKSTART: [Command; 6] = [
    Command::GenTasks,
    Command::TrainBackbone,
    Command::GenPlannerData,
    Command::TrainPlanner,
    Command::Decode,
    Command::Eval,
];

/// Accuracy summary written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub accuracy: f64,
    pub estimate: Estimate,
    pub instances: usize,
    pub trajectories: usize,
    /// Mean reward over the samples of each instance.
    pub per_instance: Vec<f64>,
}

/// Trace statistics written by `analyze`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub trajectories: usize,
    pub mean_proximity: Option<f64>,
    pub uniform_proximity: f64,
    pub mean_effective_tokens: f64,
    pub mean_eos_centroid: Option<f64>,
    pub eos_curve: Vec<f64>,
    pub eos_peak_step: Option<usize>,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    root: PathBuf,
    dir: PathBuf,
    manifest: Manifest,
}

fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{name}: section required by this command")))
}

impl<'a> Run<'a> {
    fn new(cfg: &'a RunConfig, root: &Path, cmd: Command) -> Result<Self> {
        let dir = root.join(cmd.dir());
        std::fs::create_dir_all(&dir)?;
        Ok(Run {
            cfg,
            root: root.to_path_buf(),
            dir,
            manifest: Manifest::new(cmd.name(), cfg.seed, cfg.workers, cfg.to_toml()?),
        })
    }

    fn upstream(&self, cmd: Command, file: &str) -> PathBuf {
        self.root.join(cmd.dir()).join(file)
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::Config(format!(
                "missing upstream artifact {}",
                path.display()
            )));
        }
        self.manifest.input(&self.root, path)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.manifest.output(&self.root, &path)?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn finish(mut self) -> Result<Manifest> {
        let resolved = self.manifest.resolved_config.clone();
        self.write("config.toml", resolved.as_bytes())?;
        self.manifest.save(&self.dir.join("manifest.json"))?;
        Ok(self.manifest)
    }

    fn tasks(&mut self) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
        let mut read = |name: &str| -> Result<Vec<TaskInstance>> {
            let p = self.upstream(Command::GenTasks, name);
            self.input(&p)?;
            tasks::from_jsonl(BufReader::new(std::fs::File::open(&p)?))
        };
        Ok((read("train.jsonl")?, read("test.jsonl")?))
    }

    fn eval_instances(&mut self) -> Result<Vec<TaskInstance>> {
        let (_, test) = self.tasks()?;
        let n = self.cfg.eval.as_ref().and_then(|e| e.instances).unwrap_or(test.len());
        Ok(test.into_iter().take(n).collect())
    }

    fn samples(&self) -> usize {
        self.cfg.eval.as_ref().map_or(1, |e| e.samples)
    }

    fn backbone(&mut self) -> Result<BackboneParams> {
        let p = self.upstream(Command::TrainBackbone, "backbone.ckpt");
        self.input(&p)?;
        load_backbone(&p)
    }

    /// Loads the planner and refuses it when it was trained against another backbone.
    fn planner(&mut self, backbone: &BackboneParams) -> Result<PlannerParams> {
        let p = self.upstream(Command::TrainPlanner, "planner.ckpt");
        self.input(&p)?;
        let (planner, digest) = load_planner(&p)?;
        if digest != backbone.digest() {
            return Err(Error::Integrity(format!(
                "planner checkpoint was trained against backbone {digest}, found {}",
                backbone.digest()
            )));
        }
        Ok(planner)
    }

    fn trajectories(&mut self) -> Result<BTreeMap<(usize, usize), Trajectory>> {
        let dir = self.upstream(Command::Decode, "trajectories");
        let mut names: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::Config(format!("missing upstream artifact {}: {e}", dir.display())))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        let mut out = BTreeMap::new();
        for p in names {
            let key = p
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(parse_trajectory_name)
                .ok_or_else(|| Error::Integrity(format!("unexpected file {}", p.display())))?;
            self.input(&p)?;
            out.insert(key, Trajectory::read_jsonl(BufReader::new(std::fs::File::open(&p)?))?);
        }
        if out.is_empty() {
            return Err(Error::Integrity(format!("{} holds no trajectories", dir.display())));
        }
        Ok(out)
    }
}

pub fn trajectory_name(instance: usize, sample: usize) -> String {
    format!("i{instance:04}_s{sample:03}")
}

fn parse_trajectory_name(stem: &str) -> Option<(usize, usize)> {
    let (i, s) = stem.strip_prefix('i')?.split_once("_s")?;
    Some((i.parse().ok()?, s.parse().ok()?))
}

/// Runs one command against the run directory `root`.
pub fn run(cmd: Command, cfg: &RunConfig, root: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let cfg = cfg.resolved();
    let mut r = Run::new(&cfg, root, cmd)?;
    match cmd {
        Command::GenTasks => gen_tasks(&mut r)?,
        Command::TrainBackbone => cmd_train_backbone(&mut r)?,
        Command::GenPlannerData => gen_planner_data(&mut r)?,
        Command::TrainPlanner => cmd_train_planner(&mut r)?,
        Command::Decode => cmd_decode(&mut r)?,
        Command::Eval => {
            cmd_eval(&mut r)?;
        }
        Command::Analyze => cmd_analyze(&mut r)?,
        Command::PassAtK => cmd_passk(&mut r)?,
        Command::Anchor => cmd_anchor(&mut r)?,
        Command::Ablate => cmd_ablate(&mut r)?,
    }
    r.finish()
}

/// Runs [`QUICKSTART`] and returns the evaluation summary.
pub fn quickstart(cfg: &RunConfig, root: &Path) -> Result<EvalSummary> {
    for cmd in QUICKSTART {
        run(cmd, cfg, root)?;
    }
    read_eval(root)
}

pub fn read_eval(root: &Path) -> Result<EvalSummary> {
    let p = root.join(Command::Eval.dir()).join("eval.json");
    Ok(serde_json::from_slice(&std::fs::read(p)?)?)
}

fn gen_tasks(r: &mut Run) -> Result<()> {
    let t = require(&r.cfg.task, "task")?;
    let (train, test) = tasks::generate_split(
        t.kind,
        &t.difficulty(),
        &mut stream(r.cfg.seed, "tasks", 0),
        t.train,
        t.test,
        t.test_fraction,
    )?;
    r.write("train.jsonl", tasks::to_jsonl(&train)?.as_bytes())?;
    r.write("test.jsonl", tasks::to_jsonl(&test)?.as_bytes())?;
    Ok(())
}

fn cmd_train_backbone(r: &mut Run) -> Result<()> {
    let bc = require(&r.cfg.backbone, "backbone")?.clone();
    let opts = require(&r.cfg.train, "train")?.clone();
    let (train, test) = r.tasks()?;
    if let Some(first) = train.first() {
        let need = first.sequence().len();
        if bc.max_len < need {
            return Err(Error::Config(format!(
                "backbone.max_len: {} is shorter than the task sequence length {need}",
                bc.max_len
            )));
        }
    }
    let (params, log) = train_backbone(&bc, &train, &test, &opts, &NoiseSchedule::linear())?;
    let ck = crate::io::backbone_checkpoint(&params)?;
    r.write("backbone.ckpt", &ck.to_bytes()?)?;
    let mut csv = Vec::new();
    lab::write_rows_csv(&mut csv, &log)?;
    r.write("train_log.csv", &csv)?;
    Ok(())
}

fn gen_planner_data(r: &mut Run) -> Result<()> {
    let dc = require(&r.cfg.decode, "decode")?.clone();
    let pd = require(&r.cfg.planner_data, "planner_data")?.clone();
    let (train, _) = r.tasks()?;
    let bb = r.backbone()?;
    let prompts: Vec<TaskInstance> = train.into_iter().take(pd.prompts).collect();
    let ds = build_training_set(&prompts, &bb, &dc, pd.sets_per_prompt, r.cfg.seed, r.cfg.workers)?;
    let mut jsonl = Vec::new();
    ds.write_jsonl(&mut jsonl)?;
    r.write("dataset.jsonl", &jsonl)?;
    r.write("hidden.bin", &crate::planner::encode_hidden_blob(&ds.hidden))?;
    Ok(())
}

fn cmd_train_planner(r: &mut Run) -> Result<()> {
    let pc = require(&r.cfg.planner, "planner")?.clone();
    let bb = r.backbone()?;
    for f in ["dataset.jsonl", "hidden.bin"] {
        let p = r.upstream(Command::GenPlannerData, f);
        r.input(&p)?;
    }
    let ds = PlannerDataset::load(&r.root.join(Command::GenPlannerData.dir()))?;
    if ds.meta.backbone_digest != bb.digest() {
        return Err(Error::Integrity(format!(
            "planner dataset was built from backbone {}, found {}",
            ds.meta.backbone_digest,
            bb.digest()
        )));
    }
    let (params, report) = train_planner(&ds, &pc, r.cfg.seed)?;
    let path = r.dir.join("planner.ckpt");
    save_planner(&params, &bb.digest(), &path)?;
    r.manifest.output(&r.root, &path)?;
    r.write_json("report.json", &report)?;
    let mut csv = Vec::new();
    lab::write_rows_csv(&mut csv, &report.epochs)?;
    r.write("epochs.csv", &csv)?;
    Ok(())
}

fn cmd_decode(r: &mut Run) -> Result<()> {
    let dc = require(&r.cfg.decode, "decode")?.clone();
    let instances = r.eval_instances()?;
    let bb = r.backbone()?;
    let planner = if dc.position == PositionStrategy::PlannerGuided && dc.semi_ar.is_none() {
        Some(r.planner(&bb)?)
    } else {
        None
    };
    let trajs = lab::sample_trajectories(
        &bb,
        planner.as_ref().map(|p| p as &dyn InitialPlanner),
        &instances,
        &dc,
        r.samples(),
        r.cfg.seed,
        r.cfg.workers,
    )?;
    let mut heat: Option<Array2<f64>> = None;
    let mut count = 0usize;
    for (i, per) in trajs.iter().enumerate() {
        for (j, t) in per.iter().enumerate() {
            let name = format!("trajectories/{}.jsonl", trajectory_name(i, j));
            r.write(&name, t.to_jsonl().as_bytes())?;
            if let Some(h) = lab::trace_metrics(t, &bb.config.vocab)?.heatmap {
                match &mut heat {
                    Some(acc) if acc.dim() == h.dim() => *acc += &h,
                    Some(_) => {}
                    None => heat = Some(h),
                }
                count += 1;
            }
        }
    }
    if let Some(h) = heat {
        let mut csv = Vec::new();
        lab::write_heatmap_csv(&mut csv, &(h / count as f64))?;
        r.write("heatmap_mean.csv", &csv)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct OutcomeRow {
    instance: usize,
    sample: usize,
    reward: f64,
}

fn cmd_eval(r: &mut Run) -> Result<EvalSummary> {
    let instances = r.eval_instances()?;
    let trajs = r.trajectories()?;
    let planner_digest = {
        let p = r.upstream(Command::TrainPlanner, "planner.ckpt");
        if trajs.values().any(|t| t.planner_digest.is_some()) {
            r.input(&p)?;
            Some(InitialPlanner::digest(&load_planner(&p)?.0))
        } else {
            None
        }
    };
    let mut rows = Vec::new();
    let mut per: Vec<Vec<f64>> = vec![Vec::new(); instances.len()];
    for (&(i, j), t) in &trajs {
        let inst = instances.get(i).ok_or_else(|| {
            Error::Integrity(format!("trajectory for instance {i} but only {} instances", instances.len()))
        })?;
        if t.prompt != inst.prompt {
            return Err(Error::Integrity(format!("trajectory {i}/{j} was decoded from another prompt")));
        }
        if t.planner_digest.is_some() && t.planner_digest != planner_digest {
            return Err(Error::Integrity(format!(
                "trajectory {i}/{j} used a planner other than the current checkpoint"
            )));
        }
        let reward = inst.reward(t.generated());
        per[i].push(reward);
        rows.push(OutcomeRow { instance: i, sample: j, reward });
    }
    if per.iter().any(|v| v.is_empty()) {
        return Err(Error::Integrity("some evaluation instances have no trajectory".into()));
    }
    let per_instance: Vec<f64> = per.iter().map(|v| lab::mean(v)).collect();
    let estimate = Estimate::from_values(&per_instance, RESAMPLES, derive_seed(r.cfg.seed, "eval-ci", 0))?;
    let summary = EvalSummary {
        accuracy: estimate.mean,
        estimate,
        instances: instances.len(),
        trajectories: rows.len(),
        per_instance,
    };
    let mut csv = Vec::new();
    lab::write_rows_csv(&mut csv, &rows)?;
    r.write("outcomes.csv", &csv)?;
    r.write_json("eval.json", &summary)?;
    Ok(summary)
}

fn cmd_analyze(r: &mut Run) -> Result<()> {
    let trajs = r.trajectories()?;
    let vocab = Vocabulary::standard();
    let metrics: Vec<_> = trajs
        .values()
        .map(|t| lab::trace_metrics(t, &vocab))
        .collect::<Result<_>>()?;
    let mut csv = Vec::new();
    lab::write_step_metrics_csv(&mut csv, &metrics)?;
    r.write("step_metrics.csv", &csv)?;
    let n = metrics.len() as f64;
    let mean_opt = |xs: Vec<f64>| (!xs.is_empty()).then(|| lab::mean(&xs));
    let same_t = metrics.iter().all(|m| m.steps.len() == metrics[0].steps.len());
    let eos_curve = if same_t { lab::mean_eos_curve(&metrics) } else { Vec::new() };
    let gen_len = trajs.values().next().map_or(0, |t| t.config.gen_len);
    let summary = AnalysisSummary {
        trajectories: metrics.len(),
        mean_proximity: mean_opt(metrics.iter().filter_map(|m| m.proximity).collect()),
        uniform_proximity: lab::uniform_proximity(gen_len),
        mean_effective_tokens: metrics.iter().map(|m| m.effective_tokens as f64).sum::<f64>() / n,
        mean_eos_centroid: mean_opt(metrics.iter().filter_map(|m| m.eos_centroid).collect()),
        eos_peak_step: lab::peak_step(&eos_curve),
        eos_curve,
    };
    r.write_json("summary.json", &summary)?;
    Ok(())
}

/// The four randomness variants compared by `passk`, sharing `base`'s schedule.
pub fn default_variants(base: &DecodeConfig) -> Vec<Variant> {
    let delayed = base.steps / 2 + 1;
    vec![
        Variant {
            name: "top1_confidence".into(),
            position: PositionStrategy::Top1Confidence,
            token: TokenMode::Greedy,
        },
        Variant {
            name: "random_initial".into(),
            position: PositionStrategy::RandomInitial,
            token: TokenMode::Greedy,
        },
        Variant {
            name: "temperature_0.9".into(),
            position: PositionStrategy::Top1Confidence,
            token: TokenMode::Temperature { tau: 0.9 },
        },
        Variant {
            name: format!("delayed_random_{delayed}"),
            position: PositionStrategy::DelayedRandom { step: delayed },
            token: TokenMode::Greedy,
        },
    ]
}

fn cmd_passk(r: &mut Run) -> Result<()> {
    let dc = require(&r.cfg.decode, "decode")?.clone();
    let instances = r.eval_instances()?;
    let bb = r.backbone()?;
    let variants: Vec<Variant> = default_variants(&dc)
        .into_iter()
        .filter(|v| dc.clone().with_position(v.position).validate().is_ok())
        .collect();
    let curves = lab::randomness_comparison(&bb, &instances, &dc, &variants, r.samples(), r.cfg.seed, r.cfg.workers)?;
    let mut csv = Vec::new();
    lab::write_pass_at_k_csv(&mut csv, &curves)?;
    r.write("pass_at_k.csv", &csv)?;
    r.write_json("curves.json", &curves)?;
    Ok(())
}

fn cmd_anchor(r: &mut Run) -> Result<()> {
    let dc = require(&r.cfg.decode, "decode")?.clone();
    let opts = require(&r.cfg.anchoring, "anchoring")?.clone();
    let instances = r.eval_instances()?;
    let bb = r.backbone()?;
    let report = lab::anchoring_experiment(&bb, &instances, &dc, &opts, r.cfg.seed, r.cfg.workers)?;
    r.write_json("report.json", &report)?;
    Ok(())
}

fn cmd_ablate(r: &mut Run) -> Result<()> {
    let dc = require(&r.cfg.decode, "decode")?.clone();
    let axis = require(&r.cfg.ablation, "ablation")?.clone();
    let instances = r.eval_instances()?;
    let bb = r.backbone()?;
    let planner = if r.upstream(Command::TrainPlanner, "planner.ckpt").exists() {
        Some(r.planner(&bb)?)
    } else {
        None
    };
    let records = lab::ablation_sweep(&bb, planner.as_ref(), &instances, &dc, &axis, r.cfg.seed, r.cfg.workers)?;
    let mut jsonl = Vec::new();
    for rec in &records {
        serde_json::to_writer(&mut jsonl, rec)?;
        writeln!(jsonl)?;
    }
    r.write("records.jsonl", &jsonl)?;
    let mut csv = Vec::new();
    lab::write_records_csv(&mut csv, &records)?;
    r.write("records.csv", &csv)?;
    Ok(())
}
