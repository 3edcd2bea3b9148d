//! Dense building blocks with hand-written backward passes, shared by the backbone and
//! the planner. Activations are row-major `(tokens, features)` matrices of `f64`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

pub const LN_EPS: f64 = 1e-5;

/// A named view of one parameter block.
pub struct Block<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct BlockMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// Uniform access to the parameter blocks of a model.
///
/// Block order is stable; flat vectors concatenate the blocks in that order.
pub trait Parameters {
    fn blocks(&self) -> Vec<Block<'_>>;
    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>>;

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in self.blocks() {
            out.extend_from_slice(b.data);
        }
        out
    }

    fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for b in self.blocks_mut() {
            let n = b.data.len();
            b.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter length mismatch");
    }

    /// One flag per scalar: true for matrices (weight decay applies), false for vectors.
    fn decay_mask(&self) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in self.blocks() {
            out.extend(std::iter::repeat_n(b.shape.len() >= 2, b.data.len()));
        }
        out
    }

    /// Hex SHA-256 over block names, shapes and little-endian values.
    fn digest(&self) -> String {
        let mut h = Sha256::new();
        for b in self.blocks() {
            h.update(b.name.as_bytes());
            for &d in &b.shape {
                h.update((d as u64).to_le_bytes());
            }
            for x in b.data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    fn all_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.data.iter().all(|x| x.is_finite()))
    }
}

pub(crate) fn block2<'a>(prefix: &str, name: &str, a: &'a Array2<f64>) -> Block<'a> {
    Block {
        name: format!("{prefix}{name}"),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    }
}

pub(crate) fn block1<'a>(prefix: &str, name: &str, a: &'a Array1<f64>) -> Block<'a> {
    Block {
        name: format!("{prefix}{name}"),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("standard layout"),
    }
}

pub(crate) fn block2_mut<'a>(prefix: &str, name: &str, a: &'a mut Array2<f64>) -> BlockMut<'a> {
    BlockMut {
        name: format!("{prefix}{name}"),
        shape: a.shape().to_vec(),
        data: a.as_slice_mut().expect("standard layout"),
    }
}

pub(crate) fn block1_mut<'a>(prefix: &str, name: &str, a: &'a mut Array1<f64>) -> BlockMut<'a> {
    BlockMut {
        name: format!("{prefix}{name}"),
        shape: a.shape().to_vec(),
        data: a.as_slice_mut().expect("standard layout"),
    }
}

pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Array2<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    /// Gaussian weights with std `scale / sqrt(fan_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, scale: f64, rng: &mut R) -> Self {
        Linear {
            w: gaussian(fan_in, fan_out, scale / (fan_in as f64).sqrt(), rng),
            b: Array1::zeros(fan_out),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Linear {
            w: Array2::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates weight gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &ArrayView2<f64>, dy: &ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut grad.w);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    pub(crate) fn push_blocks<'a>(&'a self, prefix: &str, out: &mut Vec<Block<'a>>) {
        out.push(block2(prefix, "weight", &self.w));
        out.push(block1(prefix, "bias", &self.b));
    }

    pub(crate) fn push_blocks_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<BlockMut<'a>>) {
        out.push(block2_mut(prefix, "weight", &mut self.w));
        out.push(block1_mut(prefix, "bias", &mut self.b));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        LayerNorm {
            gain: Array1::zeros(self.gain.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut xhat = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *r = 1.0 / (var + LN_EPS).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| v * rs);
        }
        let mut y = &xhat * &self.gain;
        y += &self.bias;
        (y, LayerNormCache { xhat, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        grad.gain += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.bias += &dy.sum_axis(Axis(0));
        let d = dy.ncols() as f64;
        let mut dx = dy * &self.gain;
        for ((mut row, xh), &r) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.xhat.rows())
            .zip(cache.rstd.iter())
        {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
            Zip::from(&mut row)
                .and(&xh)
                .for_each(|g, &x| *g = r * (*g - mean_g - x * mean_gx));
        }
        dx
    }

    pub(crate) fn push_blocks<'a>(&'a self, prefix: &str, out: &mut Vec<Block<'a>>) {
        out.push(block1(prefix, "gain", &self.gain));
        out.push(block1(prefix, "bias", &self.bias));
    }

    pub(crate) fn push_blocks_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<BlockMut<'a>>) {
        out.push(block1_mut(prefix, "gain", &mut self.gain));
        out.push(block1_mut(prefix, "bias", &mut self.bias));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
}

/// `dL/dx` of the tanh-approximated GELU given the pre-activation `x`.
pub fn gelu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        let u = GELU_C * (v + 0.044715 * v * v * v);
        let th = u.tanh();
        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
        *g *= 0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du;
    });
    dx
}

pub fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = dy.clone();
    Zip::from(&mut dx).and(x).for_each(|g, &v| {
        if v <= 0.0 {
            *g = 0.0;
        }
    });
    dx
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Inverted dropout mask: each entry is 0 with probability `p`, otherwise `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn((rows, cols), || {
        if rng.random::<f64>() < p {
            0.0
        } else {
            keep
        }
    })
}

/// Bidirectional multi-head self-attention over a stack of equal-length sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, rng: &mut R) -> Self {
        Attention {
            query: Linear::new(dim, dim, 1.0, rng),
            key: Linear::new(dim, dim, 1.0, rng),
            value: Linear::new(dim, dim, 1.0, rng),
            out: Linear::new(dim, dim, 1.0, rng),
            heads,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Attention {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            out: self.out.zeros_like(),
            heads: self.heads,
        }
    }

    /// `x` holds `x.nrows() / seq_len` sequences stacked along rows.
    pub fn forward(&self, x: &ArrayView2<f64>, seq_len: usize) -> (Array2<f64>, AttentionCache) {
        let q = self.query.forward(x);
        let k = self.key.forward(x);
        let v = self.value.forward(x);
        let dim = x.ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_seq = x.nrows() / seq_len;
        let mut context = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(n_seq * self.heads);
        for s in 0..n_seq {
            let rows = s * seq_len..(s + 1) * seq_len;
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = q.slice(s![rows.clone(), cols.clone()]);
                let kh = k.slice(s![rows.clone(), cols.clone()]);
                let vh = v.slice(s![rows.clone(), cols.clone()]);
                let mut a = qh.dot(&kh.t());
                a *= scale;
                softmax_rows(&mut a);
                general_mat_mul(
                    1.0,
                    &a,
                    &vh,
                    0.0,
                    &mut context.slice_mut(s![rows.clone(), cols.clone()]),
                );
                probs.push(a);
            }
        }
        let y = self.out.forward(&context.view());
        (
            y,
            AttentionCache {
                q,
                k,
                v,
                probs,
                context,
            },
        )
    }

    pub fn backward(
        &self,
        x: &ArrayView2<f64>,
        cache: &AttentionCache,
        dy: &ArrayView2<f64>,
        seq_len: usize,
        grad: &mut Attention,
    ) -> Array2<f64> {
        let dctx = self.out.backward(&cache.context.view(), dy, &mut grad.out);
        let dim = x.ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_seq = x.nrows() / seq_len;
        let mut dq = Array2::zeros(x.raw_dim());
        let mut dk = Array2::zeros(x.raw_dim());
        let mut dv = Array2::zeros(x.raw_dim());
        for s in 0..n_seq {
            let rows = s * seq_len..(s + 1) * seq_len;
            for h in 0..self.heads {
                let cols = h * dh..(h + 1) * dh;
                let a = &cache.probs[s * self.heads + h];
                let doh = dctx.slice(s![rows.clone(), cols.clone()]);
                let vh = cache.v.slice(s![rows.clone(), cols.clone()]);
                let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
                let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
                general_mat_mul(
                    1.0,
                    &a.t(),
                    &doh,
                    0.0,
                    &mut dv.slice_mut(s![rows.clone(), cols.clone()]),
                );
                let da = doh.dot(&vh.t());
                let mut dscore = a * &da;
                for (mut row, arow) in dscore.rows_mut().into_iter().zip(a.rows()) {
                    let dot = row.sum();
                    Zip::from(&mut row).and(&arow).for_each(|g, &p| *g -= p * dot);
                }
                // dscore now holds A * (dA - rowsum(A * dA))
                dscore *= scale;
                general_mat_mul(
                    1.0,
                    &dscore,
                    &kh,
                    0.0,
                    &mut dq.slice_mut(s![rows.clone(), cols.clone()]),
                );
                general_mat_mul(
                    1.0,
                    &dscore.t(),
                    &qh,
                    0.0,
                    &mut dk.slice_mut(s![rows.clone(), cols.clone()]),
                );
            }
        }
        let mut dx = self.query.backward(x, &dq.view(), &mut grad.query);
        dx += &self.key.backward(x, &dk.view(), &mut grad.key);
        dx += &self.value.backward(x, &dv.view(), &mut grad.value);
        dx
    }

    pub(crate) fn push_blocks<'a>(&'a self, prefix: &str, out: &mut Vec<Block<'a>>) {
        self.query.push_blocks(&format!("{prefix}query."), out);
        self.key.push_blocks(&format!("{prefix}key."), out);
        self.value.push_blocks(&format!("{prefix}value."), out);
        self.out.push_blocks(&format!("{prefix}out."), out);
    }

    pub(crate) fn push_blocks_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<BlockMut<'a>>) {
        self.query.push_blocks_mut(&format!("{prefix}query."), out);
        self.key.push_blocks_mut(&format!("{prefix}key."), out);
        self.value.push_blocks_mut(&format!("{prefix}value."), out);
        self.out.push_blocks_mut(&format!("{prefix}out."), out);
    }
}

/// Decoupled-weight-decay Adam over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    decay_mask: Vec<bool>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(lr: f64, betas: (f64, f64), weight_decay: f64, decay_mask: Vec<bool>) -> Self {
        let n = decay_mask.len();
        AdamW {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            decay_mask,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if self.decay_mask[i] {
                params[i] -= self.lr * self.weight_decay * params[i];
            }
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }
}

/// Rescales `grads` so that their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}
