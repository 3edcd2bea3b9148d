//! Continuous-time masked diffusion: schedules, forward corruption, the reverse
//! posterior and the negative ELBO.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// Lower end of the time interval sampled by the Monte Carlo NELBO estimator.
pub const MC_TIME_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Survival schedule `alpha(t)`: probability that a clean token is still unmasked at time `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

impl NoiseSchedule {
    pub fn linear() -> Self {
        NoiseSchedule {
            kind: ScheduleKind::Linear,
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(match self.kind {
            ScheduleKind::Linear => 1.0 - t,
        })
    }

    pub fn alpha_prime(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(match self.kind {
            ScheduleKind::Linear => -1.0,
        })
    }

    /// NELBO weight `-alpha'(t) / (1 - alpha(t))` (equal to `1/t` for the linear schedule).
    pub fn loss_weight(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        if t == 0.0 {
            return Err(Error::Domain("loss weight is singular at t = 0".into()));
        }
        Ok(match self.kind {
            ScheduleKind::Linear => 1.0 / t,
        })
    }

    /// Discretisation `t_i = i / T`, computed from the rational form for every `i`.
    pub fn time_at(step_index: usize, total_steps: usize) -> f64 {
        step_index as f64 / total_steps as f64
    }

    /// Time grid `[t_0, t_1, ..., t_T]` with `t_0 = 0` and `t_T = 1`.
    pub fn discretization(total_steps: usize) -> Vec<f64> {
        (0..=total_steps)
            .map(|i| Self::time_at(i, total_steps))
            .collect()
    }
}

pub fn alpha_at(schedule: &NoiseSchedule, t: f64) -> Result<f64> {
    schedule.alpha(t)
}

/// A partially masked sequence `z_t`.
///
/// The first `prompt_len` tokens are conditioning and are never masked; `masked` always
/// equals the set of generation positions holding `mask_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    tokens: Vec<usize>,
    masked: BTreeSet<usize>,
    prompt_len: usize,
    mask_id: usize,
    pub step: usize,
    pub time: f64,
}

impl LatentState {
    /// Prompt followed by `gen_len` mask tokens, at time 1.
    pub fn fully_masked(prompt: &[usize], gen_len: usize, vocab: &Vocabulary) -> Result<Self> {
        if prompt.contains(&vocab.mask_id) {
            return Err(Error::InvalidInput("prompt contains the mask token".into()));
        }
        let mut tokens = prompt.to_vec();
        tokens.extend(std::iter::repeat_n(vocab.mask_id, gen_len));
        Ok(LatentState {
            masked: (prompt.len()..tokens.len()).collect(),
            tokens,
            prompt_len: prompt.len(),
            mask_id: vocab.mask_id,
            step: 0,
            time: 1.0,
        })
    }

    /// Builds a state from raw tokens; masked positions are recomputed.
    pub fn from_tokens(tokens: Vec<usize>, prompt_len: usize, vocab: &Vocabulary) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::InvalidInput("prompt longer than sequence".into()));
        }
        if tokens[..prompt_len].contains(&vocab.mask_id) {
            return Err(Error::InvalidInput("prompt contains the mask token".into()));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.size) {
            return Err(Error::InvalidInput(format!("token {bad} outside vocabulary")));
        }
        let masked = (prompt_len..tokens.len())
            .filter(|&p| tokens[p] == vocab.mask_id)
            .collect();
        Ok(LatentState {
            tokens,
            masked,
            prompt_len,
            mask_id: vocab.mask_id,
            step: 0,
            time: 1.0,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn masked(&self) -> &BTreeSet<usize> {
        &self.masked
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn gen_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    /// Generation window tokens.
    pub fn generated(&self) -> &[usize] {
        &self.tokens[self.prompt_len..]
    }

    /// Commits `token` at absolute position `pos`. Only masked positions can be written.
    pub fn unmask(&mut self, pos: usize, token: usize) -> Result<()> {
        if token == self.mask_id {
            return Err(Error::InvalidInput("cannot commit the mask token".into()));
        }
        if !self.masked.remove(&pos) {
            return Err(Error::InvalidInput(format!(
                "position {pos} is not masked (absorbing state violated)"
            )));
        }
        self.tokens[pos] = token;
        Ok(())
    }

    /// Masks an unmasked generation position (used by the forward process only).
    fn mask(&mut self, pos: usize) {
        debug_assert!(pos >= self.prompt_len);
        self.tokens[pos] = self.mask_id;
        self.masked.insert(pos);
    }
}

/// Samples `z_t ~ q(z_t | x)`: each generation position is independently replaced by the
/// mask with probability `1 - alpha(t)`; prompt positions are untouched.
pub fn forward_mask<R: Rng + ?Sized>(
    x: &[usize],
    prompt_len: usize,
    t: f64,
    schedule: &NoiseSchedule,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<LatentState> {
    if x.contains(&vocab.mask_id) {
        return Err(Error::InvalidInput(
            "clean sequence contains the mask token".into(),
        ));
    }
    let alpha = schedule.alpha(t)?;
    let mut state = LatentState::from_tokens(x.to_vec(), prompt_len, vocab)?;
    state.time = t;
    for p in prompt_len..x.len() {
        if !rng.random_bool(alpha) {
            state.mask(p);
        }
    }
    Ok(state)
}

/// Continues corruption of an existing latent from time `s` to a later time `t`.
///
/// Masked tokens stay masked; each surviving token is masked with probability
/// `1 - alpha(t) / alpha(s)`, so the composition matches a single `forward_mask` to `t`.
pub fn forward_mask_from<R: Rng + ?Sized>(
    state: &LatentState,
    s: f64,
    t: f64,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LatentState> {
    if s > t {
        return Err(Error::Ordering { s, t });
    }
    let (a_s, a_t) = (schedule.alpha(s)?, schedule.alpha(t)?);
    let keep = if a_s == 0.0 { 0.0 } else { a_t / a_s };
    let mut next = state.clone();
    next.time = t;
    for p in state.prompt_len..state.len() {
        if state.tokens[p] != state.mask_id && !rng.random_bool(keep) {
            next.mask(p);
        }
    }
    Ok(next)
}

/// Probability that a masked token reveals its clean value when stepping from `t` back to `s`.
pub fn posterior_unmask_prob(schedule: &NoiseSchedule, t: f64, s: f64) -> Result<f64> {
    check_time(t)?;
    check_time(s)?;
    if s >= t {
        return Err(Error::Ordering { s, t });
    }
    let a_t = schedule.alpha(t)?;
    if a_t >= 1.0 {
        return Err(Error::Domain(format!("no masked mass at t = {t}")));
    }
    Ok((schedule.alpha(s)? - a_t) / (1.0 - a_t))
}

/// The complementary mass of [`posterior_unmask_prob`]: probability of staying masked.
pub fn posterior_stay_masked_prob(schedule: &NoiseSchedule, t: f64, s: f64) -> Result<f64> {
    posterior_unmask_prob(schedule, t, s)?;
    Ok((1.0 - schedule.alpha(s)?) / (1.0 - schedule.alpha(t)?))
}

/// Per-position categorical predictions `x_hat(z_t, t)` plus the final-layer hidden states.
///
/// Rows cover every position of the sequence, prompt included. The mask logit is `-inf`
/// and its probability exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionGrid {
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    pub hidden: Array2<f64>,
}

impl PredictionGrid {
    pub fn from_logits(mut logits: Array2<f64>, hidden: Array2<f64>, mask_id: usize) -> Self {
        logits.column_mut(mask_id).fill(f64::NEG_INFINITY);
        let mut probs = logits.clone();
        for mut row in probs.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        PredictionGrid {
            logits,
            probs,
            hidden,
        }
    }

    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    /// `(argmax token, top-1 probability)` of the raw distribution at `pos`; lowest id wins ties.
    pub fn top1(&self, pos: usize) -> (usize, f64) {
        let row = self.probs.row(pos);
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &p) in row.iter().enumerate() {
            if p > best.1 {
                best = (i, p);
            }
        }
        best
    }
}

/// A model `x_hat_theta(z_t, t)` over a fixed vocabulary.
pub trait Denoiser {
    fn vocab(&self) -> Vocabulary;

    fn hidden_dim(&self) -> usize;

    /// Whether predictions depend on `state.time` (otherwise only on the tokens).
    fn time_conditioned(&self) -> bool {
        false
    }

    fn predict(&self, state: &LatentState) -> Result<PredictionGrid>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn vocab(&self) -> Vocabulary {
        (**self).vocab()
    }
    fn hidden_dim(&self) -> usize {
        (**self).hidden_dim()
    }
    fn time_conditioned(&self) -> bool {
        (**self).time_conditioned()
    }
    fn predict(&self, state: &LatentState) -> Result<PredictionGrid> {
        (**self).predict(state)
    }
}

/// A loss that may overflow when the model assigns zero probability to a true token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossValue {
    Finite(f64),
    Overflow,
}

impl LossValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            LossValue::Finite(v) => Some(v),
            LossValue::Overflow => None,
        }
    }

    fn from_f64(v: f64) -> Self {
        if v.is_finite() {
            LossValue::Finite(v)
        } else {
            LossValue::Overflow
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NelboEstimator {
    MonteCarlo { samples: usize },
    ExactEnumeration,
}

/// Largest generation length accepted by [`NelboEstimator::ExactEnumeration`].
pub const EXACT_MAX_LEN: usize = 6;

/// Sum of `-log p(x_l)` over the masked generation positions of `state`.
fn masked_nll(model: &dyn Denoiser, x: &[usize], state: &LatentState) -> Result<f64> {
    if state.masked().is_empty() {
        return Ok(0.0);
    }
    let grid = model.predict(state)?;
    Ok(state
        .masked()
        .iter()
        .map(|&p| -grid.probs[[p, x[p]]].ln())
        .sum())
}

fn check_clean(x: &[usize], prompt_len: usize, vocab: &Vocabulary) -> Result<()> {
    if prompt_len > x.len() {
        return Err(Error::InvalidInput("prompt longer than sequence".into()));
    }
    if x.contains(&vocab.mask_id) {
        return Err(Error::InvalidInput(
            "clean sequence contains the mask token".into(),
        ));
    }
    Ok(())
}

/// Single-sample NELBO estimates: `t ~ U(eps, 1]`, `z_t ~ q(z_t|x)`, value
/// `w(t) * sum_{masked l} -log p(x_l)`.
pub fn nelbo_samples<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    x: &[usize],
    prompt_len: usize,
    samples: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let vocab = model.vocab();
    check_clean(x, prompt_len, &vocab)?;
    if samples == 0 {
        return Err(Error::Config("monte carlo NELBO needs at least one sample".into()));
    }
    (0..samples)
        .map(|_| {
            let t = MC_TIME_EPS + (1.0 - MC_TIME_EPS) * (1.0 - rng.random::<f64>());
            let state = forward_mask(x, prompt_len, t, schedule, &vocab, rng)?;
            Ok(schedule.loss_weight(t)? * masked_nll(model, x, &state)?)
        })
        .collect()
}

/// Negative ELBO of `x` (generation positions after `prompt_len`), smaller is better.
pub fn nelbo<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    x: &[usize],
    prompt_len: usize,
    estimator: NelboEstimator,
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<LossValue> {
    match estimator {
        NelboEstimator::MonteCarlo { samples } => {
            let v = nelbo_samples(model, x, prompt_len, samples, schedule, rng)?;
            Ok(LossValue::from_f64(v.iter().sum::<f64>() / v.len() as f64))
        }
        NelboEstimator::ExactEnumeration => nelbo_exact(model, x, prompt_len, schedule),
    }
}

/// Exact NELBO by enumerating all `2^L` mask patterns.
///
/// For the linear schedule a pattern with `m` masked positions has probability
/// `t^m (1-t)^(L-m)`; with weight `1/t` the time integral is `B(m, L-m+1)`. Time-conditioned
/// models integrate numerically with Gauss-Legendre quadrature instead.
fn nelbo_exact(
    model: &dyn Denoiser,
    x: &[usize],
    prompt_len: usize,
    schedule: &NoiseSchedule,
) -> Result<LossValue> {
    let vocab = model.vocab();
    check_clean(x, prompt_len, &vocab)?;
    let len = x.len() - prompt_len;
    if len > EXACT_MAX_LEN {
        return Err(Error::Config(format!(
            "exact NELBO enumeration limited to L <= {EXACT_MAX_LEN}, got {len}"
        )));
    }
    let ScheduleKind::Linear = schedule.kind;
    let nodes = if model.time_conditioned() {
        Some(gauss_legendre(48))
    } else {
        None
    };
    let mut total = 0.0;
    for pattern in 1u32..(1 << len) {
        let mut tokens = x.to_vec();
        for (i, tok) in tokens[prompt_len..].iter_mut().enumerate() {
            if pattern & (1 << i) != 0 {
                *tok = vocab.mask_id;
            }
        }
        let mut state = LatentState::from_tokens(tokens, prompt_len, &vocab)?;
        let m = pattern.count_ones() as i32;
        let rest = len as i32 - m;
        match &nodes {
            None => {
                total += beta_weight(m as usize, len) * masked_nll(model, x, &state)?;
            }
            Some(q) => {
                for &(node, w) in q {
                    state.time = node;
                    let density = node.powi(m - 1) * (1.0 - node).powi(rest);
                    total += w * density * masked_nll(model, x, &state)?;
                }
            }
        }
    }
    Ok(LossValue::from_f64(total))
}

/// `B(m, L-m+1) = (m-1)! (L-m)! / L!`.
fn beta_weight(m: usize, len: usize) -> f64 {
    let fact = |n: usize| (1..=n).map(|k| k as f64).product::<f64>();
    fact(m - 1) * fact(len - m) / fact(len)
}

/// Gauss-Legendre nodes and weights on [0, 1].
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 1..=n {
        let mut x = (std::f64::consts::PI * (i as f64 - 0.25) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        out.push(((x + 1.0) / 2.0, w / 2.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    /// Uniform over every non-mask token, independent of the input.
    struct Uniform(Vocabulary);

    impl Denoiser for Uniform {
        fn vocab(&self) -> Vocabulary {
            self.0
        }
        fn hidden_dim(&self) -> usize {
            0
        }
        fn predict(&self, state: &LatentState) -> Result<PredictionGrid> {
            let n = state.len();
            let logits = Array2::zeros((n, self.0.size));
            Ok(PredictionGrid::from_logits(
                logits,
                Array2::zeros((n, 0)),
                self.0.mask_id,
            ))
        }
    }

    /// Puts all its mass on a fixed token at every position.
    struct Oracle {
        vocab: Vocabulary,
        target: Vec<usize>,
    }

    impl Denoiser for Oracle {
        fn vocab(&self) -> Vocabulary {
            self.vocab
        }
        fn hidden_dim(&self) -> usize {
            0
        }
        fn predict(&self, state: &LatentState) -> Result<PredictionGrid> {
            let n = state.len();
            let mut logits = Array2::from_elem((n, self.vocab.size), f64::NEG_INFINITY);
            for (p, &t) in self.target.iter().enumerate() {
                logits[[p, t]] = 0.0;
            }
            Ok(PredictionGrid::from_logits(
                logits,
                Array2::zeros((n, 0)),
                self.vocab.mask_id,
            ))
        }
    }

    fn v5() -> Vocabulary {
        // mask + four predictable tokens
        Vocabulary::new(5, 0, 1).unwrap()
    }

    #[test]
    fn linear_alpha_values() {
        let s = NoiseSchedule::linear();
        assert_eq!(alpha_at(&s, 0.0).unwrap(), 1.0);
        assert_eq!(alpha_at(&s, 1.0).unwrap(), 0.0);
        assert_eq!(alpha_at(&s, 0.25).unwrap(), 0.75);
        assert_eq!(s.alpha_prime(0.3).unwrap(), -1.0);
        assert!(matches!(alpha_at(&s, 1.5), Err(Error::Domain(_))));
        assert!(matches!(alpha_at(&s, -0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn discretization_is_exact() {
        let grid = NoiseSchedule::discretization(32);
        assert_eq!(grid[0], 0.0);
        assert_eq!(grid[32], 1.0);
        for (i, &t) in grid.iter().enumerate() {
            assert_eq!(t, i as f64 / 32.0);
        }
        assert!(grid.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn forward_mask_boundaries() {
        let v = v5();
        let s = NoiseSchedule::linear();
        let x = [2, 3, 4, 1, 2];
        let mut rng = from_seed(1);
        let z = forward_mask(&x, 2, 0.0, &s, &v, &mut rng).unwrap();
        assert_eq!(z.tokens(), &x);
        assert!(z.masked().is_empty());
        let z = forward_mask(&x, 2, 1.0, &s, &v, &mut rng).unwrap();
        assert_eq!(z.tokens()[..2], x[..2]);
        assert_eq!(z.masked().iter().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn forward_mask_rejects_mask_in_input() {
        let v = v5();
        let r = forward_mask(&[2, 0, 3], 0, 0.5, &NoiseSchedule::linear(), &v, &mut from_seed(0));
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn posterior_examples() {
        let s = NoiseSchedule::linear();
        assert_eq!(posterior_unmask_prob(&s, 0.7, 0.0).unwrap(), 1.0);
        assert_eq!(posterior_unmask_prob(&s, 0.5, 0.25).unwrap(), 0.5);
        let near = posterior_unmask_prob(&s, 0.5, 0.5 - 1e-12).unwrap();
        assert!(near < 1e-10);
        assert!(matches!(
            posterior_unmask_prob(&s, 0.5, 0.5),
            Err(Error::Ordering { .. })
        ));
        assert!(matches!(
            posterior_unmask_prob(&s, 0.0, 0.0),
            Err(Error::Ordering { .. })
        ));
    }

    #[test]
    fn posterior_at_t_zero_is_a_domain_error() {
        // s < t = 0 is impossible inside [0, 1], so s = -0.0 style inputs fail on the domain
        let s = NoiseSchedule::linear();
        assert!(posterior_unmask_prob(&s, 0.0, -0.5).is_err());
    }

    #[test]
    fn posterior_normalizes() {
        let s = NoiseSchedule::linear();
        for i in 1..=16 {
            for j in 0..i {
                let (t, sm) = (i as f64 / 16.0, j as f64 / 16.0);
                let total = posterior_unmask_prob(&s, t, sm).unwrap()
                    + posterior_stay_masked_prob(&s, t, sm).unwrap();
                assert!((total - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn beta_weights_integrate_to_one_per_token() {
        // sum_m C(L,m) * m * B(m, L-m+1) = L
        for len in 1..=6usize {
            let choose = |n: usize, k: usize| {
                (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
            };
            let s: f64 = (1..=len)
                .map(|m| choose(len, m) * m as f64 * beta_weight(m, len))
                .sum();
            assert!((s - len as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let q = gauss_legendre(48);
        let total: f64 = q.iter().map(|&(_, w)| w).sum();
        assert!((total - 1.0).abs() < 1e-13);
        // int_0^1 t^2 (1-t)^3 dt = B(3, 4) = 2! 3! / 6! = 1/60
        let v: f64 = q.iter().map(|&(t, w)| w * t * t * (1.0 - t).powi(3)).sum();
        assert!((v - 1.0 / 60.0).abs() < 1e-14);
    }

    #[test]
    fn nelbo_perfect_model_is_zero() {
        let v = v5();
        let x = vec![2, 3, 4, 1];
        let m = Oracle {
            vocab: v,
            target: x.clone(),
        };
        let s = NoiseSchedule::linear();
        let exact = nelbo(&m, &x, 1, NelboEstimator::ExactEnumeration, &s, &mut from_seed(0));
        assert_eq!(exact.unwrap(), LossValue::Finite(0.0));
        let mc = nelbo(&m, &x, 1, NelboEstimator::MonteCarlo { samples: 50 }, &s, &mut from_seed(0));
        assert_eq!(mc.unwrap(), LossValue::Finite(0.0));
    }

    #[test]
    fn nelbo_zero_probability_reports_overflow() {
        let v = v5();
        let x = vec![2, 3, 4];
        let m = Oracle {
            vocab: v,
            target: vec![3, 3, 3],
        };
        let s = NoiseSchedule::linear();
        let exact = nelbo(&m, &x, 0, NelboEstimator::ExactEnumeration, &s, &mut from_seed(0));
        assert_eq!(exact.unwrap(), LossValue::Overflow);
    }

    #[test]
    fn nelbo_uniform_exact_matches_closed_form() {
        let v = v5();
        let m = Uniform(v);
        let x = vec![1, 2, 3];
        let s = NoiseSchedule::linear();
        let exact = nelbo(&m, &x, 0, NelboEstimator::ExactEnumeration, &s, &mut from_seed(0))
            .unwrap()
            .finite()
            .unwrap();
        assert!((exact - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((exact - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn nelbo_exact_rejects_long_sequences() {
        let m = Uniform(v5());
        let x = vec![2; 7];
        let r = nelbo(
            &m,
            &x,
            0,
            NelboEstimator::ExactEnumeration,
            &NoiseSchedule::linear(),
            &mut from_seed(0),
        );
        assert!(matches!(r, Err(Error::Config(_))));
        let r = nelbo(
            &m,
            &x,
            0,
            NelboEstimator::MonteCarlo { samples: 0 },
            &NoiseSchedule::linear(),
            &mut from_seed(0),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn unmask_enforces_absorbing_state() {
        let v = v5();
        let mut z = LatentState::fully_masked(&[2], 3, &v).unwrap();
        z.unmask(1, 3).unwrap();
        assert!(z.unmask(1, 4).is_err());
        assert!(z.unmask(0, 4).is_err());
        assert!(z.unmask(2, v.mask_id).is_err());
        assert_eq!(z.masked().len(), 2);
    }
}
