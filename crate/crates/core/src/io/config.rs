//! TOML run configuration shared by every command.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, TrainOptions};
use crate::decode::DecodeConfig;
use crate::error::{Error, Result};
use crate::lab::{AblationAxis, AnchoringOptions};
use crate::planner::PlannerConfig;
use crate::tasks::{Difficulty, TaskKind};

fn default_train_count() -> usize {
    4000
}
fn default_test_count() -> usize {
    200
}
fn default_test_fraction() -> f64 {
    0.1
}
fn one() -> usize {
    1
}
fn default_sets() -> usize {
    32
}
fn default_planner_prompts() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: TaskKind,
    #[serde(default)]
    pub difficulty: Option<Difficulty>,
    #[serde(default = "default_train_count")]
    pub train: usize,
    #[serde(default = "default_test_count")]
    pub test: usize,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

impl TaskSection {
    pub fn difficulty(&self) -> Difficulty {
        self.difficulty.unwrap_or_else(|| Difficulty::default_for(self.kind))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerDataSection {
    #[serde(default = "default_sets")]
    pub sets_per_prompt: usize,
    #[serde(default = "default_planner_prompts")]
    pub prompts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Samples per instance (pass@k uses every power of two up to this).
    #[serde(default = "one")]
    pub samples: usize,
    /// Evaluate on the first this many test instances (all when absent).
    #[serde(default)]
    pub instances: Option<usize>,
}

/// Every section is optional; commands check for the ones they need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub workers: usize,
    /// Run directory; the `--out` flag takes precedence.
    #[serde(default)]
    pub out: Option<std::path::PathBuf>,
    #[serde(default)]
    pub task: Option<TaskSection>,
    #[serde(default)]
    pub backbone: Option<BackboneConfig>,
    #[serde(default)]
    pub train: Option<TrainOptions>,
    #[serde(default)]
    pub decode: Option<DecodeConfig>,
    #[serde(default)]
    pub planner: Option<PlannerConfig>,
    #[serde(default)]
    pub planner_data: Option<PlannerDataSection>,
    #[serde(default)]
    pub eval: Option<EvalSection>,
    #[serde(default)]
    pub anchoring: Option<AnchoringOptions>,
    #[serde(default)]
    pub ablation: Option<AblationAxis>,
}

impl RunConfig {
    /// Parses TOML; errors name the offending field path.
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let de = toml::de::Deserializer::parse(s).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        RunConfig::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Copies the global seed into the sections that carry their own.
    pub fn resolved(&self) -> RunConfig {
        let mut c = self.clone();
        if let Some(t) = &mut c.train {
            t.seed = c.seed;
        }
        if let Some(d) = &mut c.decode {
            d.seed = c.seed;
        }
        c
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |section: &str, e: Error| Error::Config(format!("{section}: {e}"));
        if self.workers == 0 {
            return Err(Error::Config("workers: must be >= 1".into()));
        }
        if let Some(t) = &self.task {
            t.difficulty().validate(t.kind).map_err(|e| ctx("task", e))?;
        }
        if let Some(b) = &self.backbone {
            b.validate().map_err(|e| ctx("backbone", e))?;
        }
        if let Some(d) = &self.decode {
            d.validate().map_err(|e| ctx("decode", e))?;
        }
        if let Some(p) = &self.planner {
            p.validate().map_err(|e| ctx("planner", e))?;
            if let Some(b) = &self.backbone {
                if p.input_dim != b.embed_dim {
                    return Err(Error::Config(format!(
                        "planner.input_dim: {} differs from backbone.embed_dim {}",
                        p.input_dim, b.embed_dim
                    )));
                }
            }
        }
        if let (Some(p), Some(d)) = (&self.planner, &self.decode) {
            let first = crate::decode::allocate_tokens(&d.allocation, d.steps, d.gen_len)?[0];
            if p.budget != first {
                return Err(Error::Config(format!(
                    "planner.budget: {} differs from the first-step allocation {first} of [decode]",
                    p.budget
                )));
            }
        }
        if let (Some(t), Some(d)) = (&self.task, &self.decode) {
            if t.difficulty().gen_len != d.gen_len {
                return Err(Error::Config(format!(
                    "decode.gen_len: {} differs from the task window {}",
                    d.gen_len,
                    t.difficulty().gen_len
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_field_names_its_path() {
        let err = RunConfig::from_toml_str("[decode]\nsteps = 4\ngen_len = 8\nallocation = { kind = \"linear\" }\nposition = { kind = \"top1_confidence\" }\ntoken = { kind = \"greedy\" }\nbogus = 1\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("decode") && err.contains("bogus"), "{err}");
    }

    #[test]
    fn round_trip() {
        let src = r#"
seed = 3
[task]
kind = "copy"
[decode]
steps = 4
gen_len = 12
allocation = { kind = "progressive", w = 2, v = 1.0 }
position = { kind = "delayed_random", step = 3 }
token = { kind = "temperature", tau = 0.9 }
eos_annealing = 3.0
"#;
        let c = RunConfig::from_toml_str(src).unwrap();
        assert_eq!(c.seed, 3);
        let again = RunConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn cross_section_mismatch() {
        let src = "[task]\nkind = \"copy\"\n[decode]\nsteps = 4\ngen_len = 8\nallocation = { kind = \"linear\" }\nposition = { kind = \"top1_confidence\" }\ntoken = { kind = \"greedy\" }\n";
        assert!(RunConfig::from_toml_str(src).is_err());
    }
}
