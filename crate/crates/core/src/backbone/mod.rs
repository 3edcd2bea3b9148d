//! Small bidirectional transformer denoiser `x_hat(z_t, t)`.
//!
//! Pre-LayerNorm blocks (attention + GELU feed-forward), learned token and absolute
//! position embeddings, and an output head whose mask logit is pinned to `-inf`.
//! Everything runs in `f64` with hand-written backward passes.

mod train;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, LatentState, PredictionGrid};
use crate::error::{Error, Result};
use crate::nn::{self, block2, block2_mut, Attention, Block, BlockMut, LayerNorm, Linear, Parameters};
use crate::vocab::Vocabulary;

pub use train::{
    batch_loss, heldout_nelbo, loss_and_grad, semi_ar_exact_match, train_backbone, TrainBatch,
    TrainLogRow, TrainOptions,
};

/// Extra scale applied to the output head at initialisation so untrained predictions
/// are close to uniform.
pub const HEAD_INIT_SCALE: f64 = 0.1;

fn default_embed_dim() -> usize {
    64
}
fn default_layers() -> usize {
    2
}
fn default_heads() -> usize {
    4
}
fn default_hidden_dim() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default = "Vocabulary::standard")]
    pub vocab: Vocabulary,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub max_len: usize,
    #[serde(default = "default_hidden_dim")]
    pub hidden_dim: usize,
    #[serde(default)]
    pub time_conditioning: bool,
}

impl BackboneConfig {
    pub fn new(vocab: Vocabulary, max_len: usize) -> Self {
        BackboneConfig {
            vocab,
            embed_dim: default_embed_dim(),
            layers: default_layers(),
            heads: default_heads(),
            max_len,
            hidden_dim: default_hidden_dim(),
            time_conditioning: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.max_len == 0 || self.hidden_dim == 0 || self.layers == 0 {
            return Err(Error::Config(
                "max_len, hidden_dim and layers must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    fn new<R: Rng + ?Sized>(c: &BackboneConfig, rng: &mut R) -> Self {
        TransformerBlock {
            ln1: LayerNorm::new(c.embed_dim),
            attn: Attention::new(c.embed_dim, c.heads, rng),
            ln2: LayerNorm::new(c.embed_dim),
            fc1: Linear::new(c.embed_dim, c.hidden_dim, 1.0, rng),
            fc2: Linear::new(c.hidden_dim, c.embed_dim, 1.0, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        TransformerBlock {
            ln1: self.ln1.zeros_like(),
            attn: self.attn.zeros_like(),
            ln2: self.ln2.zeros_like(),
            fc1: self.fc1.zeros_like(),
            fc2: self.fc2.zeros_like(),
        }
    }
}

/// Backbone weights. Also used as the gradient container (same shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub tok_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    /// `1 x D` row added with weight `t`; present only with time conditioning.
    pub time_emb: Option<Array2<f64>>,
    pub blocks: Vec<TransformerBlock>,
    pub ln_f: LayerNorm,
    pub head: Linear,
}

struct BlockCache {
    ln1_out: Array2<f64>,
    ln1: nn::LayerNormCache,
    attn: nn::AttentionCache,
    ln2_out: Array2<f64>,
    ln2: nn::LayerNormCache,
    pre_act: Array2<f64>,
    act: Array2<f64>,
}

pub(crate) struct ForwardCache {
    tokens: Vec<usize>,
    times: Vec<f64>,
    seq_len: usize,
    blocks: Vec<BlockCache>,
    lnf: nn::LayerNormCache,
    pub(crate) hidden: Array2<f64>,
    pub(crate) logits: Array2<f64>,
}

impl BackboneParams {
    /// Scaled-Gaussian initialisation: every block has std `1/sqrt(fan_in)` (one-hot fan-in
    /// for embeddings); the output head is further scaled by [`HEAD_INIT_SCALE`].
    pub fn init<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let v = config.vocab.size;
        let tok_emb = nn::gaussian(v, d, 1.0 / (v as f64).sqrt(), rng);
        let pos_emb = nn::gaussian(config.max_len, d, 1.0 / (config.max_len as f64).sqrt(), rng);
        let time_emb = config
            .time_conditioning
            .then(|| nn::gaussian(1, d, 1.0, rng));
        let blocks = (0..config.layers)
            .map(|_| TransformerBlock::new(config, rng))
            .collect();
        Ok(BackboneParams {
            config: config.clone(),
            tok_emb,
            pos_emb,
            time_emb,
            blocks,
            ln_f: LayerNorm::new(d),
            head: Linear::new(d, v, HEAD_INIT_SCALE, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        BackboneParams {
            config: self.config.clone(),
            tok_emb: Array2::zeros(self.tok_emb.raw_dim()),
            pos_emb: Array2::zeros(self.pos_emb.raw_dim()),
            time_emb: self.time_emb.as_ref().map(|t| Array2::zeros(t.raw_dim())),
            blocks: self.blocks.iter().map(TransformerBlock::zeros_like).collect(),
            ln_f: self.ln_f.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    /// Output head applied to final-layer hidden states, with the mask logit at `-inf`.
    pub fn head_logits(&self, hidden: &ArrayView2<f64>) -> Array2<f64> {
        let mut logits = self.head.forward(hidden);
        logits
            .column_mut(self.config.vocab.mask_id)
            .fill(f64::NEG_INFINITY);
        logits
    }

    /// Forward pass over equal-length sequences stacked row-wise.
    pub(crate) fn forward(&self, sequences: &[&[usize]], times: &[f64]) -> Result<ForwardCache> {
        let seq_len = sequences.first().map_or(0, |s| s.len());
        if seq_len == 0 {
            return Err(Error::InvalidInput("empty batch or sequence".into()));
        }
        if seq_len > self.config.max_len {
            return Err(Error::Config(format!(
                "sequence length {seq_len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if sequences.iter().any(|s| s.len() != seq_len) {
            return Err(Error::InvalidInput(
                "sequences in a batch must share one length".into(),
            ));
        }
        let vsize = self.config.vocab.size;
        let d = self.config.embed_dim;
        let rows = sequences.len() * seq_len;
        let mut tokens = Vec::with_capacity(rows);
        let mut x = Array2::zeros((rows, d));
        for (si, seq) in sequences.iter().enumerate() {
            for (p, &tok) in seq.iter().enumerate() {
                if tok >= vsize {
                    return Err(Error::InvalidInput(format!("token {tok} outside vocabulary")));
                }
                let r = si * seq_len + p;
                let mut row = x.row_mut(r);
                row.assign(&self.tok_emb.row(tok));
                row += &self.pos_emb.row(p);
                if let Some(te) = &self.time_emb {
                    row.scaled_add(times[si], &te.row(0));
                }
                tokens.push(tok);
            }
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (ln1_out, ln1) = b.ln1.forward(&x.view());
            let (att, attn) = b.attn.forward(&ln1_out.view(), seq_len);
            let x_mid = &x + &att;
            let (ln2_out, ln2) = b.ln2.forward(&x_mid.view());
            let pre_act = b.fc1.forward(&ln2_out.view());
            let act = nn::gelu(&pre_act);
            let ff = b.fc2.forward(&act.view());
            let x_out = x_mid + &ff;
            caches.push(BlockCache {
                ln1_out,
                ln1,
                attn,
                ln2_out,
                ln2,
                pre_act,
                act,
            });
            x = x_out;
        }
        let (hidden, lnf) = self.ln_f.forward(&x.view());
        let logits = self.head_logits(&hidden.view());
        Ok(ForwardCache {
            tokens,
            times: times.to_vec(),
            seq_len,
            blocks: caches,
            lnf,
            hidden,
            logits,
        })
    }

    /// Backpropagates `dlogits` (mask column ignored) into a fresh gradient container.
    pub(crate) fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> BackboneParams {
        let mut g = self.zeros_like();
        let mut dl = dlogits.clone();
        dl.column_mut(self.config.vocab.mask_id).fill(0.0);
        let dhidden = self.head.backward(&cache.hidden.view(), &dl.view(), &mut g.head);
        let mut dx = self.ln_f.backward(&cache.lnf, &dhidden.view(), &mut g.ln_f);
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let c = &cache.blocks[i];
            let gb = &mut g.blocks[i];
            let dact = b.fc2.backward(&c.act.view(), &dx.view(), &mut gb.fc2);
            let dpre = nn::gelu_backward(&c.pre_act, &dact);
            let dln2 = b.fc1.backward(&c.ln2_out.view(), &dpre.view(), &mut gb.fc1);
            let mut dmid = dx;
            dmid += &b.ln2.backward(&c.ln2, &dln2.view(), &mut gb.ln2);
            let datt = b
                .attn
                .backward(&c.ln1_out.view(), &c.attn, &dmid.view(), cache.seq_len, &mut gb.attn);
            let mut din = dmid;
            din += &b.ln1.backward(&c.ln1, &datt.view(), &mut gb.ln1);
            dx = din;
        }
        for (r, &tok) in cache.tokens.iter().enumerate() {
            let row = dx.row(r);
            let mut te = g.tok_emb.row_mut(tok);
            te += &row;
            let mut pe = g.pos_emb.row_mut(r % cache.seq_len);
            pe += &row;
            if let Some(tg) = g.time_emb.as_mut() {
                tg.row_mut(0)
                    .scaled_add(cache.times[r / cache.seq_len], &row);
            }
        }
        g
    }

    /// Predictions for a single latent state.
    pub fn predict(&self, state: &LatentState) -> Result<PredictionGrid> {
        let cache = self.forward(&[state.tokens()], &[state.time])?;
        Ok(PredictionGrid::from_logits(
            cache.logits,
            cache.hidden,
            self.config.vocab.mask_id,
        ))
    }
}

impl Parameters for BackboneParams {
    fn blocks(&self) -> Vec<Block<'_>> {
        let mut out = vec![
            block2("", "tok_emb", &self.tok_emb),
            block2("", "pos_emb", &self.pos_emb),
        ];
        if let Some(t) = &self.time_emb {
            out.push(block2("", "time_emb", t));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}.");
            b.ln1.push_blocks(&format!("{p}ln1."), &mut out);
            b.attn.push_blocks(&format!("{p}attn."), &mut out);
            b.ln2.push_blocks(&format!("{p}ln2."), &mut out);
            b.fc1.push_blocks(&format!("{p}fc1."), &mut out);
            b.fc2.push_blocks(&format!("{p}fc2."), &mut out);
        }
        self.ln_f.push_blocks("ln_f.", &mut out);
        self.head.push_blocks("head.", &mut out);
        out
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut out = vec![
            block2_mut("", "tok_emb", &mut self.tok_emb),
            block2_mut("", "pos_emb", &mut self.pos_emb),
        ];
        if let Some(t) = self.time_emb.as_mut() {
            out.push(block2_mut("", "time_emb", t));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}.");
            b.ln1.push_blocks_mut(&format!("{p}ln1."), &mut out);
            b.attn.push_blocks_mut(&format!("{p}attn."), &mut out);
            b.ln2.push_blocks_mut(&format!("{p}ln2."), &mut out);
            b.fc1.push_blocks_mut(&format!("{p}fc1."), &mut out);
            b.fc2.push_blocks_mut(&format!("{p}fc2."), &mut out);
        }
        self.ln_f.push_blocks_mut("ln_f.", &mut out);
        self.head.push_blocks_mut("head.", &mut out);
        out
    }
}

impl Denoiser for BackboneParams {
    fn vocab(&self) -> Vocabulary {
        self.config.vocab
    }

    #[allow(clippy::misnamed_getters)]
    fn hidden_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn time_conditioned(&self) -> bool {
        self.config.time_conditioning
    }

    fn predict(&self, state: &LatentState) -> Result<PredictionGrid> {
        BackboneParams::predict(self, state)
    }
}

/// Row-wise entropy of a probability matrix, skipping zero entries.
pub fn row_entropy(probs: &Array2<f64>) -> Vec<f64> {
    probs
        .axis_iter(Axis(0))
        .map(|r| -r.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
        .collect()
}
