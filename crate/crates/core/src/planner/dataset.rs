use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneParams;
use crate::decode::{
    allocate_tokens, decode_with_prefix, uniform_subset, DecodeConfig, PositionStrategy, StepRecord, TokenMode,
};
use crate::diffusion::{Denoiser, LatentState};
use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::rng::stream;
use crate::tasks::TaskInstance;

/// Leading bytes of the hidden-state blob.
pub const HIDDEN_MAGIC: &[u8; 8] = b"UNMKHID1";
const BLOB_HEADER: usize = 8 + 4 + 4 + 8 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub input_dim: usize,
    pub gen_len: usize,
    pub budget: usize,
    pub sets_per_prompt: usize,
    pub seed: u64,
    pub backbone_digest: String,
    pub decode: DecodeConfig,
}

/// One prompt and where its window hidden states start in the blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptRecord {
    pub prompt_id: usize,
    pub instance: TaskInstance,
    pub hidden_offset: usize,
}

/// A candidate first-step set with the outcome of its greedy completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerExample {
    pub prompt_id: usize,
    /// Window-relative, sorted.
    pub positions: Vec<usize>,
    pub label: f64,
    /// First blob row of this prompt's window hidden states.
    pub hidden_offset: usize,
    /// Final generated window, kept so the label can be recomputed.
    pub output: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DroppedExample {
    pub prompt_id: usize,
    pub candidate: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerDataset {
    pub meta: DatasetMeta,
    pub prompts: Vec<PromptRecord>,
    pub examples: Vec<PlannerExample>,
    pub dropped: Vec<DroppedExample>,
    /// Window hidden states, `gen_len` rows per prompt.
    pub hidden: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Meta(DatasetMeta),
    Prompt(PromptRecord),
    Example(PlannerExample),
    Dropped(DroppedExample),
}

struct PromptOutcome {
    hidden: Array2<f64>,
    examples: Vec<PlannerExample>,
    dropped: Vec<DroppedExample>,
}

/// Samples `sets_per_prompt` uniform first-step sets per prompt, completes each greedily,
/// and labels it with the task reward. Hidden states come from one backbone call on the
/// fully masked state of each prompt.
pub fn build_training_set(
    instances: &[TaskInstance],
    backbone: &BackboneParams,
    config: &DecodeConfig,
    sets_per_prompt: usize,
    seed: u64,
    workers: usize,
) -> Result<PlannerDataset> {
    config.validate()?;
    if config.semi_ar.is_some() {
        return Err(Error::Config("planner data needs a non-blockwise schedule".into()));
    }
    if let Some(bad) = instances.iter().find(|i| i.gen_len() != config.gen_len) {
        return Err(Error::Config(format!(
            "instance {} has gen_len {} but decoding uses {}",
            bad.hash,
            bad.gen_len(),
            config.gen_len
        )));
    }
    let budget = allocate_tokens(&config.allocation, config.steps, config.gen_len)?[0];
    let mut completion = config.clone();
    completion.position = PositionStrategy::Top1Confidence;
    completion.token = TokenMode::Greedy;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<PromptOutcome>> = pool.install(|| {
        instances
            .par_iter()
            .enumerate()
            .map(|(id, inst)| prompt_examples(id, inst, backbone, &completion, budget, sets_per_prompt, seed))
            .collect()
    });
    let l = config.gen_len;
    let d = backbone.hidden_dim();
    let mut hidden = Array2::zeros((instances.len() * l, d));
    let mut prompts = Vec::with_capacity(instances.len());
    let mut examples = Vec::new();
    let mut dropped = Vec::new();
    for (id, (inst, out)) in instances.iter().zip(outcomes).enumerate() {
        let out = out?;
        hidden.slice_mut(s![id * l..(id + 1) * l, ..]).assign(&out.hidden);
        prompts.push(PromptRecord {
            prompt_id: id,
            instance: inst.clone(),
            hidden_offset: id * l,
        });
        examples.extend(out.examples);
        dropped.extend(out.dropped);
    }
    Ok(PlannerDataset {
        meta: DatasetMeta {
            input_dim: d,
            gen_len: l,
            budget,
            sets_per_prompt,
            seed,
            backbone_digest: backbone.digest(),
            decode: config.clone(),
        },
        prompts,
        examples,
        dropped,
        hidden,
    })
}

fn prompt_examples(
    id: usize,
    inst: &TaskInstance,
    backbone: &BackboneParams,
    completion: &DecodeConfig,
    budget: usize,
    sets: usize,
    seed: u64,
) -> Result<PromptOutcome> {
    let l = completion.gen_len;
    let state = LatentState::fully_masked(&inst.prompt, l, &backbone.config.vocab)?;
    let grid = backbone.predict(&state)?;
    let plen = inst.prompt.len();
    let hidden = grid.hidden.slice(s![plen.., ..]).to_owned();
    let mut rng = stream(seed, "planner-data", id as u64);
    let window: Vec<usize> = (0..l).collect();
    let mut examples = Vec::with_capacity(sets);
    let mut dropped = Vec::new();
    for j in 0..sets {
        let positions = uniform_subset(&window, budget, &mut rng)?;
        let tokens = positions.iter().map(|&p| grid.top1(p + plen).0).collect();
        let first = StepRecord {
            d: 1,
            positions: positions.clone(),
            tokens,
            top1: Vec::new(),
            top1_digest: String::new(),
            eos_committed: 0,
        };
        let mut cfg = completion.clone();
        cfg.seed = crate::rng::derive_seed(seed, "planner-completion", (id * sets + j) as u64);
        match decode_with_prefix(backbone, &inst.prompt, &cfg, &[first], None) {
            Ok(traj) => {
                let label = inst.reward(traj.generated());
                if !(0.0..=1.0).contains(&label) {
                    dropped.push(DroppedExample {
                        prompt_id: id,
                        candidate: j,
                        reason: format!("verifier returned {label}"),
                    });
                    continue;
                }
                examples.push(PlannerExample {
                    prompt_id: id,
                    positions,
                    label,
                    hidden_offset: id * l,
                    output: traj.final_tokens,
                });
            }
            Err(e) => dropped.push(DroppedExample {
                prompt_id: id,
                candidate: j,
                reason: e.to_string(),
            }),
        }
    }
    Ok(PromptOutcome {
        hidden,
        examples,
        dropped,
    })
}

/// Blob layout (little-endian): magic `UNMKHID1`, `u32` version (1), `u32` element width
/// in bytes (8), `u64` rows, `u64` columns, then `rows * columns` `f64` values row-major.
pub fn encode_hidden_blob(hidden: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(BLOB_HEADER + hidden.len() * 8);
    out.extend_from_slice(HIDDEN_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&8u32.to_le_bytes());
    out.extend_from_slice(&(hidden.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(hidden.ncols() as u64).to_le_bytes());
    for x in hidden.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_hidden_blob(bytes: &[u8]) -> Result<Array2<f64>> {
    if bytes.len() < BLOB_HEADER || &bytes[..8] != HIDDEN_MAGIC {
        return Err(Error::Format("not a hidden-state blob".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    if u32_at(8) != 1 {
        return Err(Error::Format(format!("unsupported blob version {}", u32_at(8))));
    }
    if u32_at(12) != 8 {
        return Err(Error::Format(format!("unsupported element width {}", u32_at(12))));
    }
    let rows = u64_at(16);
    let cols = u64_at(24);
    let body = &bytes[BLOB_HEADER..];
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::Format("blob dimensions overflow".into()))?;
    if expected != body.len() as u64 {
        return Err(Error::Format(format!(
            "blob holds {} bytes, header promises {expected}",
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((rows as usize, cols as usize), data)
        .map_err(|e| Error::Format(format!("blob shape: {e}")))
}

/// Parses the record file against an already decoded hidden-state matrix.
pub fn parse_dataset_jsonl<R: BufRead>(reader: R, hidden: Array2<f64>) -> Result<PlannerDataset> {
    let mut meta = None;
    let mut prompts = Vec::new();
    let mut examples = Vec::new();
    let mut dropped = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Line =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
        match rec {
            Line::Meta(m) if meta.is_none() && i == 0 => meta = Some(m),
            Line::Meta(_) => return Err(Error::Format(format!("line {}: misplaced meta record", i + 1))),
            Line::Prompt(p) => prompts.push(p),
            Line::Example(e) => examples.push(e),
            Line::Dropped(d) => dropped.push(d),
        }
    }
    let meta = meta.ok_or_else(|| Error::Format("missing meta record".into()))?;
    let ds = PlannerDataset {
        meta,
        prompts,
        examples,
        dropped,
        hidden,
    };
    ds.validate()?;
    Ok(ds)
}

impl PlannerDataset {
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if self.hidden.ncols() != m.input_dim {
            return Err(Error::Format(format!(
                "blob width {} but meta says {}",
                self.hidden.ncols(),
                m.input_dim
            )));
        }
        if m.budget == 0 || m.budget > m.gen_len {
            return Err(Error::Format(format!("budget {} for window {}", m.budget, m.gen_len)));
        }
        let mut offsets = BTreeMap::new();
        for p in &self.prompts {
            if p.hidden_offset.checked_add(m.gen_len).is_none_or(|e| e > self.hidden.nrows()) {
                return Err(Error::Format(format!("prompt {} points past the blob", p.prompt_id)));
            }
            if offsets.insert(p.prompt_id, p.hidden_offset).is_some() {
                return Err(Error::Format(format!("prompt {} listed twice", p.prompt_id)));
            }
        }
        for e in &self.examples {
            let Some(&off) = offsets.get(&e.prompt_id) else {
                return Err(Error::Format(format!("example for unknown prompt {}", e.prompt_id)));
            };
            if off != e.hidden_offset {
                return Err(Error::Format(format!("example offset mismatch for prompt {}", e.prompt_id)));
            }
            let distinct: BTreeSet<_> = e.positions.iter().collect();
            if e.positions.len() != m.budget || distinct.len() != m.budget {
                return Err(Error::Format(format!(
                    "example for prompt {} has {} distinct positions, budget {}",
                    e.prompt_id,
                    distinct.len(),
                    m.budget
                )));
            }
            if let Some(&p) = e.positions.iter().find(|&&p| p >= m.gen_len) {
                return Err(Error::Range {
                    position: p,
                    max: m.gen_len,
                });
            }
            if !(0.0..=1.0).contains(&e.label) {
                return Err(Error::Format(format!("label {} outside [0, 1]", e.label)));
            }
            if e.output.len() != m.gen_len {
                return Err(Error::Format("stored output has the wrong length".into()));
            }
        }
        Ok(())
    }

    /// Candidate hidden states `h_S` (`budget x D`).
    pub fn candidate_hidden(&self, e: &PlannerExample) -> Array2<f64> {
        let rows: Vec<usize> = e.positions.iter().map(|&p| e.hidden_offset + p).collect();
        self.hidden.select(Axis(0), &rows)
    }

    /// Re-runs every verifier on the stored outputs; returns the indices of mismatches.
    pub fn relabel_mismatches(&self) -> Vec<usize> {
        let by_id: BTreeMap<usize, &PromptRecord> = self.prompts.iter().map(|p| (p.prompt_id, p)).collect();
        self.examples
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                by_id
                    .get(&e.prompt_id)
                    .is_none_or(|p| p.instance.reward(&e.output) != e.label)
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &Line::Meta(self.meta.clone()))?;
        writeln!(w)?;
        for p in &self.prompts {
            serde_json::to_writer(&mut w, &Line::Prompt(p.clone()))?;
            writeln!(w)?;
        }
        for e in &self.examples {
            serde_json::to_writer(&mut w, &Line::Example(e.clone()))?;
            writeln!(w)?;
        }
        for d in &self.dropped {
            serde_json::to_writer(&mut w, &Line::Dropped(d.clone()))?;
            writeln!(w)?;
        }
        Ok(())
    }

    /// Writes `dataset.jsonl` and `hidden.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("dataset.jsonl"))?);
        self.write_jsonl(&mut f)?;
        f.flush()?;
        std::fs::write(dir.join("hidden.bin"), encode_hidden_blob(&self.hidden))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let hidden = decode_hidden_blob(&std::fs::read(dir.join("hidden.bin"))?)?;
        let f = std::io::BufReader::new(std::fs::File::open(dir.join("dataset.jsonl"))?);
        parse_dataset_jsonl(f, hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    #[test]
    fn blob_round_trip_and_rejections() {
        let h = crate::nn::gaussian(3, 2, 1.0, &mut from_seed(0));
        let b = encode_hidden_blob(&h);
        assert_eq!(decode_hidden_blob(&b).unwrap(), h);
        assert!(decode_hidden_blob(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[12] = 4;
        assert!(decode_hidden_blob(&bad).is_err());
        assert!(decode_hidden_blob(b"short").is_err());
    }
}
