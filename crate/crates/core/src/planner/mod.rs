//! First-step position planner: a small transformer encoder that scores candidate
//! unmask sets from the backbone's final hidden states at the fully masked state.

mod dataset;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decode::{uniform_subset, InitialPlanner};
use crate::diffusion::{LatentState, PredictionGrid};
use crate::error::{Error, Result};
use crate::nn::{
    self, block2, block2_mut, Attention, Block, BlockMut, LayerNorm, LayerNormCache, Linear, Parameters,
};
use crate::rng::StreamRng;

pub use dataset::{
    build_training_set, decode_hidden_blob, encode_hidden_blob, parse_dataset_jsonl, DatasetMeta,
    DroppedExample, PlannerDataset, PlannerExample, PromptRecord, HIDDEN_MAGIC,
};
pub use train::{reranking_accuracy, train_planner, EpochReport, PlannerReport};

fn default_d_model() -> usize {
    128
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_ffn_dim() -> usize {
    2048
}
fn default_d_pos() -> usize {
    16
}
fn default_dropout() -> f64 {
    0.3
}
fn default_max_positions() -> usize {
    256
}
fn default_candidates() -> usize {
    32
}
fn default_lr() -> f64 {
    1e-4
}
fn default_batch() -> usize {
    256
}
fn default_epochs() -> usize {
    5
}
fn default_weight_decay() -> f64 {
    0.01
}
fn default_val_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    /// Backbone hidden size `D`.
    pub input_dim: usize,
    /// First-step budget `B` the planner is trained and used with.
    pub budget: usize,
    #[serde(default = "default_d_model")]
    pub d_model: usize,
    #[serde(default = "default_layers")]
    pub encoder_layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn_dim")]
    pub ffn_dim: usize,
    #[serde(default = "default_d_pos")]
    pub d_pos: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    /// Candidate sets `P` scored at inference.
    #[serde(default = "default_candidates")]
    pub candidate_count: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

impl PlannerConfig {
    pub fn new(input_dim: usize, budget: usize) -> Self {
        PlannerConfig {
            input_dim,
            budget,
            d_model: default_d_model(),
            encoder_layers: default_layers(),
            heads: default_heads(),
            ffn_dim: default_ffn_dim(),
            d_pos: default_d_pos(),
            dropout: default_dropout(),
            max_positions: default_max_positions(),
            candidate_count: default_candidates(),
            lr: default_lr(),
            batch_size: default_batch(),
            max_epochs: default_epochs(),
            weight_decay: default_weight_decay(),
            val_fraction: default_val_fraction(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.budget == 0 || self.d_pos == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("planner dimensions and budget must be positive".into()));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.candidate_count == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("candidate_count, batch_size, max_epochs must be >= 1".into()));
        }
        if self.budget > self.max_positions {
            return Err(Error::Config(format!(
                "budget {} exceeds max_positions {}",
                self.budget, self.max_positions
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!(
                "val_fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Post-LN encoder layer with a ReLU feed-forward.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn: Attention,
    pub ln1: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ln2: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerParams {
    pub config: PlannerConfig,
    pub in_proj: Linear,
    pub pos_emb: Array2<f64>,
    pub pos_proj: Linear,
    pub layers: Vec<EncoderLayer>,
    pub head: Linear,
}

struct LayerCache {
    input: Array2<f64>,
    attn: nn::AttentionCache,
    drop1: Option<Array2<f64>>,
    ln1: LayerNormCache,
    y1: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    drop2: Option<Array2<f64>>,
    drop3: Option<Array2<f64>>,
    ln2: LayerNormCache,
}

pub(crate) struct PlannerCache {
    hidden: Array2<f64>,
    positions: Vec<usize>,
    pos_in: Array2<f64>,
    pre_relu: Array2<f64>,
    layers: Vec<LayerCache>,
    out: Array2<f64>,
    set_size: usize,
    /// Mean per-token scalar for each set (pre-logistic).
    pub(crate) logits: Array1<f64>,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl PlannerParams {
    pub fn init<R: Rng + ?Sized>(config: &PlannerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let m = config.d_model;
        let layers = (0..config.encoder_layers)
            .map(|_| EncoderLayer {
                attn: Attention::new(m, config.heads, rng),
                ln1: LayerNorm::new(m),
                fc1: Linear::new(m, config.ffn_dim, 1.0, rng),
                fc2: Linear::new(config.ffn_dim, m, 1.0, rng),
                ln2: LayerNorm::new(m),
            })
            .collect();
        Ok(PlannerParams {
            config: config.clone(),
            in_proj: Linear::new(config.input_dim, m, 1.0, rng),
            pos_emb: nn::gaussian(config.max_positions, config.d_pos, 1.0, rng),
            pos_proj: Linear::new(config.d_pos, m, 1.0, rng),
            layers,
            head: Linear::new(m, 1, 1.0, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        PlannerParams {
            config: self.config.clone(),
            in_proj: self.in_proj.zeros_like(),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            pos_proj: self.pos_proj.zeros_like(),
            layers: self
                .layers
                .iter()
                .map(|l| EncoderLayer {
                    attn: l.attn.zeros_like(),
                    ln1: l.ln1.zeros_like(),
                    fc1: l.fc1.zeros_like(),
                    fc2: l.fc2.zeros_like(),
                    ln2: l.ln2.zeros_like(),
                })
                .collect(),
            head: self.head.zeros_like(),
        }
    }

    /// Forward over `n` stacked candidate sets of `set_size` rows each. `hidden` is
    /// `(n * set_size) x D`; dropout is applied only when `rng` is given.
    pub(crate) fn forward(
        &self,
        hidden: Array2<f64>,
        positions: &[usize],
        set_size: usize,
        mut rng: Option<&mut StreamRng>,
    ) -> Result<PlannerCache> {
        let c = &self.config;
        if set_size == 0 || hidden.nrows() != positions.len() || !positions.len().is_multiple_of(set_size) {
            return Err(Error::InvalidInput(format!(
                "{} hidden rows / {} positions do not form sets of {set_size}",
                hidden.nrows(),
                positions.len()
            )));
        }
        if hidden.ncols() != c.input_dim {
            return Err(Error::InvalidInput(format!(
                "hidden width {} but planner expects {}",
                hidden.ncols(),
                c.input_dim
            )));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= c.max_positions) {
            return Err(Error::Range {
                position: p,
                max: c.max_positions,
            });
        }
        let mut pos_in = Array2::zeros((positions.len(), c.d_pos));
        for (r, &p) in positions.iter().enumerate() {
            pos_in.row_mut(r).assign(&self.pos_emb.row(p));
        }
        let mut pre_relu = self.in_proj.forward(&hidden.view());
        pre_relu += &self.pos_proj.forward(&pos_in.view());
        let mut x = nn::relu(&pre_relu);
        let p_drop = c.dropout;
        let mut mask = |rows: usize, cols: usize| -> Option<Array2<f64>> {
            match rng.as_deref_mut() {
                Some(r) if p_drop > 0.0 => Some(nn::dropout_mask(rows, cols, p_drop, r)),
                _ => None,
            }
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (mut att, ac) = l.attn.forward(&x.view(), set_size);
            let drop1 = mask(att.nrows(), att.ncols());
            if let Some(m) = &drop1 {
                att *= m;
            }
            let r1 = &x + &att;
            let (y1, ln1) = l.ln1.forward(&r1.view());
            let pre = l.fc1.forward(&y1.view());
            let mut act = nn::relu(&pre);
            let drop2 = mask(act.nrows(), act.ncols());
            if let Some(m) = &drop2 {
                act *= m;
            }
            let mut f = l.fc2.forward(&act.view());
            let drop3 = mask(f.nrows(), f.ncols());
            if let Some(m) = &drop3 {
                f *= m;
            }
            let r2 = &y1 + &f;
            let (y2, ln2) = l.ln2.forward(&r2.view());
            layers.push(LayerCache {
                input: x,
                attn: ac,
                drop1,
                ln1,
                y1,
                pre,
                act,
                drop2,
                drop3,
                ln2,
            });
            x = y2;
        }
        let s = self.head.forward(&x.view());
        let n = positions.len() / set_size;
        let logits = s
            .column(0)
            .to_owned()
            .into_shape_with_order((n, set_size))
            .expect("rows divide into sets")
            .mean_axis(Axis(1))
            .expect("set_size >= 1");
        Ok(PlannerCache {
            hidden,
            positions: positions.to_vec(),
            pos_in,
            pre_relu,
            layers,
            out: x,
            set_size,
            logits,
        })
    }

    /// Gradients given `dlogits` (derivative of the loss w.r.t. each set's pooled logit).
    pub(crate) fn backward(&self, cache: &PlannerCache, dlogits: &Array1<f64>) -> PlannerParams {
        let mut g = self.zeros_like();
        let b = cache.set_size;
        let ds = Array2::from_shape_fn((cache.positions.len(), 1), |(r, _)| dlogits[r / b] / b as f64);
        let mut dx = self.head.backward(&cache.out.view(), &ds.view(), &mut g.head);
        for (i, l) in self.layers.iter().enumerate().rev() {
            let c = &cache.layers[i];
            let gl = &mut g.layers[i];
            let dr2 = l.ln2.backward(&c.ln2, &dx.view(), &mut gl.ln2);
            let mut df = dr2.clone();
            if let Some(m) = &c.drop3 {
                df *= m;
            }
            let mut dact = l.fc2.backward(&c.act.view(), &df.view(), &mut gl.fc2);
            if let Some(m) = &c.drop2 {
                dact *= m;
            }
            let dpre = nn::relu_backward(&c.pre, &dact);
            let mut dy1 = dr2;
            dy1 += &l.fc1.backward(&c.y1.view(), &dpre.view(), &mut gl.fc1);
            let dr1 = l.ln1.backward(&c.ln1, &dy1.view(), &mut gl.ln1);
            let mut datt = dr1.clone();
            if let Some(m) = &c.drop1 {
                datt *= m;
            }
            let mut dinput = dr1;
            dinput += &l.attn.backward(&c.input.view(), &c.attn, &datt.view(), b, &mut gl.attn);
            dx = dinput;
        }
        let dpre = nn::relu_backward(&cache.pre_relu, &dx);
        self.in_proj.backward(&cache.hidden.view(), &dpre.view(), &mut g.in_proj);
        let dpos = self.pos_proj.backward(&cache.pos_in.view(), &dpre.view(), &mut g.pos_proj);
        for (r, &p) in cache.positions.iter().enumerate() {
            let mut row = g.pos_emb.row_mut(p);
            row += &dpos.row(r);
        }
        g
    }

    /// Mean BCE over `labels.len()` stacked sets and its gradient. With `dropout_seed` the
    /// dropout masks come from that seed, so repeated calls see identical masks.
    pub fn bce_loss_and_grad(
        &self,
        hidden: &Array2<f64>,
        positions: &[usize],
        set_size: usize,
        labels: &[f64],
        dropout_seed: Option<u64>,
    ) -> Result<(f64, PlannerParams)> {
        let mut rng = dropout_seed.map(|s| crate::rng::stream(s, "planner-dropout", 0));
        let cache = self.forward(hidden.clone(), positions, set_size, rng.as_mut())?;
        if cache.logits.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} sets but {} labels",
                cache.logits.len(),
                labels.len()
            )));
        }
        let n = labels.len() as f64;
        let loss = cache.logits.iter().zip(labels).map(|(&z, &y)| bce_with_logit(z, y)).sum::<f64>() / n;
        let dl = Array1::from_iter(cache.logits.iter().zip(labels).map(|(&z, &y)| (sigmoid(z) - y) / n));
        Ok((loss, self.backward(&cache, &dl)))
    }

    /// Scores one candidate set in evaluation mode: `sigmoid(mean_i head(encoder(...))_i)`.
    pub fn score(&self, hidden: &ArrayView2<f64>, positions: &[usize]) -> Result<f64> {
        if positions.is_empty() {
            return Err(Error::InvalidInput("empty candidate set".into()));
        }
        let cache = self.forward(hidden.to_owned(), positions, positions.len(), None)?;
        Ok(sigmoid(cache.logits[0]))
    }

    /// Evaluation-mode scores for many sets of equal size drawn from one window.
    pub fn score_sets(&self, window_hidden: &ArrayView2<f64>, sets: &[Vec<usize>]) -> Result<Vec<f64>> {
        let Some(first) = sets.first() else {
            return Ok(Vec::new());
        };
        let b = first.len();
        if b == 0 || sets.iter().any(|s| s.len() != b) {
            return Err(Error::InvalidInput("candidate sets must share one non-zero size".into()));
        }
        let positions: Vec<usize> = sets.iter().flatten().copied().collect();
        if let Some(&p) = positions.iter().find(|&&p| p >= window_hidden.nrows()) {
            return Err(Error::Range {
                position: p,
                max: window_hidden.nrows(),
            });
        }
        let hidden = window_hidden.select(Axis(0), &positions);
        let cache = self.forward(hidden, &positions, b, None)?;
        Ok(cache.logits.iter().map(|&z| sigmoid(z)).collect())
    }
}

impl Parameters for PlannerParams {
    fn blocks(&self) -> Vec<Block<'_>> {
        let mut out = Vec::new();
        self.in_proj.push_blocks("in_proj.", &mut out);
        out.push(block2("", "pos_emb", &self.pos_emb));
        self.pos_proj.push_blocks("pos_proj.", &mut out);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}.");
            l.attn.push_blocks(&format!("{p}attn."), &mut out);
            l.ln1.push_blocks(&format!("{p}ln1."), &mut out);
            l.fc1.push_blocks(&format!("{p}fc1."), &mut out);
            l.fc2.push_blocks(&format!("{p}fc2."), &mut out);
            l.ln2.push_blocks(&format!("{p}ln2."), &mut out);
        }
        self.head.push_blocks("head.", &mut out);
        out
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut out = Vec::new();
        self.in_proj.push_blocks_mut("in_proj.", &mut out);
        out.push(block2_mut("", "pos_emb", &mut self.pos_emb));
        self.pos_proj.push_blocks_mut("pos_proj.", &mut out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{i}.");
            l.attn.push_blocks_mut(&format!("{p}attn."), &mut out);
            l.ln1.push_blocks_mut(&format!("{p}ln1."), &mut out);
            l.fc1.push_blocks_mut(&format!("{p}fc1."), &mut out);
            l.fc2.push_blocks_mut(&format!("{p}fc2."), &mut out);
            l.ln2.push_blocks_mut(&format!("{p}ln2."), &mut out);
        }
        self.head.push_blocks_mut("head.", &mut out);
        out
    }
}

/// Anything that can score a candidate set of window positions.
pub trait SetScorer {
    fn score_sets(&self, window_hidden: &ArrayView2<f64>, sets: &[Vec<usize>]) -> Result<Vec<f64>>;
}

impl SetScorer for PlannerParams {
    fn score_sets(&self, window_hidden: &ArrayView2<f64>, sets: &[Vec<usize>]) -> Result<Vec<f64>> {
        PlannerParams::score_sets(self, window_hidden, sets)
    }
}

/// Draws `candidates` uniform `budget`-subsets of the `gen_len` window positions, scores
/// them and returns the best (first drawn wins ties). Sets may repeat across draws.
pub fn plan_initial_positions<S: SetScorer + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    window_hidden: &ArrayView2<f64>,
    gen_len: usize,
    candidates: usize,
    budget: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if budget > gen_len {
        return Err(Error::InfeasibleSchedule {
            required: budget,
            length: gen_len,
        });
    }
    if candidates == 0 {
        return Err(Error::Config("candidate_count must be >= 1".into()));
    }
    let window: Vec<usize> = (0..gen_len).collect();
    let mut sets = (0..candidates)
        .map(|_| uniform_subset(&window, budget, rng))
        .collect::<Result<Vec<_>>>()?;
    let scores = scorer.score_sets(window_hidden, &sets)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(sets.swap_remove(best))
}

impl InitialPlanner for PlannerParams {
    fn plan(
        &self,
        state: &LatentState,
        grid: &PredictionGrid,
        budget: usize,
        rng: &mut StreamRng,
    ) -> Result<Vec<usize>> {
        if budget != self.config.budget {
            return Err(Error::Config(format!(
                "planner was trained for first-step budget {} but the schedule asks for {budget}",
                self.config.budget
            )));
        }
        let plen = state.prompt_len();
        let window = grid.hidden.slice(ndarray::s![plen.., ..]);
        let picked = plan_initial_positions(
            self,
            &window,
            state.gen_len(),
            self.config.candidate_count,
            budget,
            rng,
        )?;
        Ok(picked.into_iter().map(|p| p + plen).collect())
    }

    fn digest(&self) -> String {
        Parameters::digest(self)
    }
}

/// Binary cross-entropy on a pooled logit, computed stably.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}
