use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::DecodeConfig;

/// What happened at one reverse step. Positions are window-relative (0-based within the
/// generation window) and sorted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub d: usize,
    pub positions: Vec<usize>,
    pub tokens: Vec<usize>,
    /// Raw top-1 probability at every window position before this step's commit.
    /// Only kept in memory; files carry the digest.
    #[serde(skip)]
    pub top1: Vec<f64>,
    pub top1_digest: String,
    /// EOS tokens committed so far, this step included.
    pub eos_committed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryHeader {
    pub config: DecodeConfig,
    pub prompt: Vec<usize>,
    #[serde(default)]
    pub planner_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub config: DecodeConfig,
    pub prompt: Vec<usize>,
    pub planner_digest: Option<String>,
    pub steps: Vec<StepRecord>,
    pub final_tokens: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Header(TrajectoryHeader),
    Step(StepRecord),
}

/// Hex SHA-256 of the little-endian bytes of a top-1 snapshot.
pub fn snapshot_digest(top1: &[f64]) -> String {
    let mut h = Sha256::new();
    for x in top1 {
        h.update(x.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Trajectory {
    pub fn generated(&self) -> &[usize] {
        &self.final_tokens
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Window position -> step at which it was committed.
    pub fn commit_steps(&self) -> Vec<usize> {
        let mut out = vec![0; self.final_tokens.len()];
        for s in &self.steps {
            for &p in &s.positions {
                out[p] = s.d;
            }
        }
        out
    }

    /// Checks that the step sets partition the window and that committed tokens survive to
    /// the final sequence.
    pub fn validate(&self) -> Result<()> {
        let l = self.config.gen_len;
        if self.final_tokens.len() != l {
            return Err(Error::Integrity(format!(
                "final sequence has {} tokens, expected {l}",
                self.final_tokens.len()
            )));
        }
        if self.steps.len() != self.config.steps {
            return Err(Error::Integrity(format!(
                "{} step records for T = {}",
                self.steps.len(),
                self.config.steps
            )));
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.steps.iter().enumerate() {
            if s.d != i + 1 {
                return Err(Error::Integrity(format!("step record {i} has d = {}", s.d)));
            }
            if s.positions.len() != s.tokens.len() {
                return Err(Error::Integrity(format!("step {} positions/tokens mismatch", s.d)));
            }
            for (&p, &t) in s.positions.iter().zip(&s.tokens) {
                if p >= l {
                    return Err(Error::Range { position: p, max: l });
                }
                if !seen.insert(p) {
                    return Err(Error::Integrity(format!("position {p} committed twice")));
                }
                if self.final_tokens[p] != t {
                    return Err(Error::Integrity(format!("position {p} changed after commit")));
                }
            }
        }
        if seen.len() != l {
            return Err(Error::Integrity(format!(
                "{} of {l} positions committed",
                seen.len()
            )));
        }
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Line::Header(TrajectoryHeader {
            config: self.config.clone(),
            prompt: self.prompt.clone(),
            planner_digest: self.planner_digest.clone(),
        });
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for s in &self.steps {
            serde_json::to_writer(&mut w, &Line::Step(s.clone()))?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    /// Parses and validates a trajectory file; the final sequence is rebuilt from the steps.
    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Trajectory> {
        let mut header: Option<TrajectoryHeader> = None;
        let mut steps = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("line {}: {e}", i + 1)))?;
            match parsed {
                Line::Header(h) => {
                    if header.is_some() || !steps.is_empty() {
                        return Err(Error::Format(format!("line {}: unexpected header", i + 1)));
                    }
                    header = Some(h);
                }
                Line::Step(s) => {
                    if header.is_none() {
                        return Err(Error::Format("step record before header".into()));
                    }
                    steps.push(s);
                }
            }
        }
        let header = header.ok_or_else(|| Error::Format("missing header".into()))?;
        header.config.validate()?;
        let l = header.config.gen_len;
        let mut final_tokens = vec![usize::MAX; l];
        let mut eos_seen = None;
        for s in &steps {
            for (&p, &t) in s.positions.iter().zip(&s.tokens) {
                if p >= l {
                    return Err(Error::Range { position: p, max: l });
                }
                final_tokens[p] = t;
            }
            if let Some(prev) = eos_seen {
                if s.eos_committed < prev {
                    return Err(Error::Integrity("EOS count decreased".into()));
                }
            }
            eos_seen = Some(s.eos_committed);
        }
        let t = Trajectory {
            config: header.config,
            prompt: header.prompt,
            planner_digest: header.planner_digest,
            steps,
            final_tokens,
        };
        t.validate()?;
        Ok(t)
    }
}
