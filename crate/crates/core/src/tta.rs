//! Per-image test-time adaptation of patch tokens.
//!
//! The adapter attends from patch tokens `P` (queries) to a trainable
//! matrix `ω` (keys) and the prompt tokens `T` (values):
//!
//! ```text
//! P' = softmax(P ωᵀ) T + P
//! ```
//!
//! `ω` starts at `T` and is trained for a few AdamW steps on two
//! self-supervised losses. With `g = τ (t⁻ − t⁺)` and `σ` the logistic
//! function, the clean score of patch `i` is `S_i = σ(<P'_i/|P'_i|, g>)`
//! and the noisy score `Sn_i` is the same with `P'_i + δ_i`:
//!
//! ```text
//! L_d = −1/(2M) Σ [ln(1 − S_i) + ln Sn_i]
//! L_p = −1/M    Σ y_i ln S_i          (y = scores of the unadapted tokens)
//! ```
//!
//! Scores are clamped to `[1e-7, 1 − 1e-7]` inside the logarithms; a
//! clamped score contributes no gradient. The gradient with respect to `ω`
//! is written out by hand and verified against finite differences.

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompts::TextTokenPair;
use crate::rng::XorShift64Star;
use crate::tensor::Tensor;

pub const LOG_EPS: f64 = 1e-7;

/// Gaussian corruption parameters for [`corrupt_tokens`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    pub mu: f32,
    pub sigma: f32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtaConfig {
    pub epochs: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    pub noise_mu: f32,
    /// Absolute noise std. When unset, `noise_scale` times the RMS of the
    /// adapted tokens at each step is used.
    pub noise_sigma: Option<f32>,
    pub noise_scale: f32,
    pub seed: u64,
    pub tau: f32,
}

impl Default for TtaConfig {
    fn default() -> Self {
        TtaConfig {
            epochs: 5,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            noise_mu: 0.0,
            noise_sigma: None,
            noise_scale: 0.1,
            seed: 0,
            tau: 100.0,
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(s) = self.noise_sigma {
            if !(s >= 0.0) {
                return Err(Error::Config(format!("noise sigma must be non-negative, got {s}")));
            }
        }
        if !(self.noise_scale >= 0.0) || !(self.tau > 0.0) {
            return Err(Error::Config("noise scale must be >= 0 and tau > 0".into()));
        }
        Ok(())
    }
}

fn check_cols(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

/// `a · bᵀ` for row-major `a [m×k]`, `b [n×k]`.
fn mm_t<F: Float + Send + Sync>(a: &[F], b: &[F], k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); a.len() / k * n];
    out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(|(o, ar)| {
        for (j, br) in b.chunks(k).enumerate() {
            o[j] = ar.iter().zip(br).fold(F::zero(), |s, (&x, &y)| s + x * y);
        }
    });
    out
}

/// `a · b` for row-major `a [m×k]`, `b [k×n]`.
fn mm<F: Float + Send + Sync>(a: &[F], b: &[F], k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); a.len() / k * n];
    out.par_chunks_mut(n).zip(a.par_chunks(k)).for_each(|(o, ar)| {
        for (&x, br) in ar.iter().zip(b.chunks(n)) {
            for (oj, &y) in o.iter_mut().zip(br) {
                *oj = *oj + x * y;
            }
        }
    });
    out
}

fn transpose<F: Float>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

fn softmax_row<F: Float>(row: &mut [F]) {
    let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |s, (&x, &y)| s + x * y)
}

fn cast<F: Float>(v: f64) -> F {
    F::from(v).expect("representable constant")
}

/// Clamped score and whether clamping was active.
fn clamp_score<F: Float>(s: F) -> (F, bool) {
    let lo = cast::<F>(LOG_EPS);
    let hi = F::one() - lo;
    if s < lo {
        (lo, true)
    } else if s > hi {
        (hi, true)
    } else {
        (s, false)
    }
}

/// Adapter forward pass: attention weights `[M×2N]` and `P'` `[M×C]`.
fn adapter_forward<F: Float + Send + Sync>(p: &[F], omega: &[F], t: &[F], c: usize) -> (Vec<F>, Vec<F>) {
    let n2 = omega.len() / c;
    let mut w = mm_t(p, omega, c, n2);
    w.par_chunks_mut(n2).for_each(softmax_row);
    let mut adapted = mm(&w, t, n2, c);
    for (a, &x) in adapted.iter_mut().zip(p) {
        *a = *a + x;
    }
    (w, adapted)
}

/// Logits `<x_i/|x_i|, g>` with the unit rows and norms kept for backward.
fn cosine_logits<F: Float>(x: &[F], g: &[F], c: usize) -> Result<(Vec<F>, Vec<F>, Vec<F>)> {
    let m = x.len() / c;
    let (mut logits, mut norms, mut units) = (Vec::with_capacity(m), Vec::with_capacity(m), Vec::with_capacity(x.len()));
    for (i, row) in x.chunks(c).enumerate() {
        let n = dot(row, row).sqrt();
        if !(n.to_f64().unwrap_or(0.0) >= 1e-12) {
            return Err(Error::ZeroNorm { op: "tta logits", row: i });
        }
        units.extend(row.iter().map(|&v| v / n));
        logits.push(dot(&units[i * c..(i + 1) * c], g));
        norms.push(n);
    }
    Ok((logits, norms, units))
}

/// Loss values of one adaptation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses<F> {
    pub l_d: F,
    pub l_p: F,
}

impl<F: Float> Losses<F> {
    pub fn total(&self) -> F {
        self.l_d + self.l_p
    }
}

/// The adaptation objective for fixed `P`, `T`, pseudo-labels and noise,
/// as a function of `ω`. Generic so that gradients can be checked in f64.
#[derive(Clone, Debug)]
pub struct Objective<F> {
    /// `[M×C]` unadapted patch tokens.
    pub p: Vec<F>,
    /// `[2N×C]` prompt tokens.
    pub t: Vec<F>,
    /// `τ (t⁻ − t⁺)`, `[C]`.
    pub g: Vec<F>,
    /// `[M]` pseudo-labels.
    pub pseudo: Vec<F>,
    /// `[M×C]` noise added to the adapted tokens.
    pub delta: Vec<F>,
    pub c: usize,
}

impl<F: Float + Send + Sync> Objective<F> {
    pub fn m(&self) -> usize {
        self.p.len() / self.c
    }

    pub fn loss(&self, omega: &[F]) -> Result<Losses<F>> {
        Ok(self.evaluate(omega, false)?.0)
    }

    pub fn loss_and_grad(&self, omega: &[F]) -> Result<(Losses<F>, Vec<F>)> {
        let (l, g) = self.evaluate(omega, true)?;
        Ok((l, g.expect("requested")))
    }

    fn evaluate(&self, omega: &[F], want_grad: bool) -> Result<(Losses<F>, Option<Vec<F>>)> {
        let c = self.c;
        let m = self.m();
        let n2 = self.t.len() / c;
        let (w, adapted) = adapter_forward(&self.p, omega, &self.t, c);
        let noisy: Vec<F> = adapted.iter().zip(&self.delta).map(|(&a, &d)| a + d).collect();
        let (d, dn, du) = cosine_logits(&adapted, &self.g, c)?;
        let (e, en, eu) = cosine_logits(&noisy, &self.g, c)?;

        let mf = cast::<F>(m as f64);
        let two_m = mf + mf;
        let (mut l_d, mut l_p) = (F::zero(), F::zero());
        // dL/dd_i and dL/de_i.
        let mut gd = vec![F::zero(); m];
        let mut ge = vec![F::zero(); m];
        for i in 0..m {
            let (s, s_clamped) = clamp_score(sigmoid(d[i]));
            let (sn, sn_clamped) = clamp_score(sigmoid(e[i]));
            l_d = l_d - ((F::one() - s).ln() + sn.ln()) / two_m;
            l_p = l_p - self.pseudo[i] * s.ln() / mf;
            if !s_clamped {
                gd[i] = s / two_m - self.pseudo[i] * (F::one() - s) / mf;
            }
            if !sn_clamped {
                ge[i] = -(F::one() - sn) / two_m;
            }
        }
        let losses = Losses { l_d, l_p };
        if !want_grad {
            return Ok((losses, None));
        }

        // Through the row normalization: dd/dx = (g − u <u, g>) / |x|.
        let mut g_adapted = vec![F::zero(); m * c];
        for i in 0..m {
            let row = &mut g_adapted[i * c..(i + 1) * c];
            let (u, un) = (&du[i * c..(i + 1) * c], &eu[i * c..(i + 1) * c]);
            let (a, b) = (gd[i] / dn[i], ge[i] / en[i]);
            for k in 0..c {
                row[k] = a * (self.g[k] - u[k] * d[i]) + b * (self.g[k] - un[k] * e[i]);
            }
        }
        // Through the attention weights, then the softmax.
        let g_w = mm_t(&g_adapted, &self.t, c, n2);
        let mut g_a = vec![F::zero(); m * n2];
        for i in 0..m {
            let (wr, gr) = (&w[i * n2..(i + 1) * n2], &g_w[i * n2..(i + 1) * n2]);
            let inner = dot(wr, gr);
            for j in 0..n2 {
                g_a[i * n2 + j] = wr[j] * (gr[j] - inner);
            }
        }
        let grad = mm(&transpose(&g_a, m, n2), &self.p, m, c);
        Ok((losses, Some(grad)))
    }
}

/// `softmax(P ωᵀ) T + P`, unnormalized.
pub fn adapt_tokens(p: &Tensor, omega: &Tensor, t: &Tensor) -> Result<Tensor> {
    check_cols("adapt_tokens", p, omega)?;
    check_cols("adapt_tokens", p, t)?;
    if omega.rows() != t.rows() {
        return Err(Error::Shape {
            op: "adapt_tokens",
            lhs: omega.shape().to_vec(),
            rhs: t.shape().to_vec(),
        });
    }
    let (_, adapted) = adapter_forward(p.data(), omega.data(), t.data(), p.cols());
    Tensor::matrix(p.rows(), p.cols(), adapted)
}

fn gaussian(rng: &mut XorShift64Star, count: usize, mu: f32, sigma: f32) -> Vec<f32> {
    (0..count)
        .map(|_| (mu as f64 + sigma as f64 * rng.standard_normal()) as f32)
        .collect()
}

/// Adds i.i.d. `N(μ, σ²)` draws, seeded from `noise.seed`. `σ = 0` returns
/// the input unchanged.
pub fn corrupt_tokens(p_adapted: &Tensor, noise: NoiseSpec) -> Result<Tensor> {
    if !(noise.sigma >= 0.0) {
        return Err(Error::Config(format!("noise sigma must be non-negative, got {}", noise.sigma)));
    }
    if noise.sigma == 0.0 {
        return Ok(p_adapted.clone());
    }
    let mut rng = XorShift64Star::new(noise.seed);
    let delta = gaussian(&mut rng, p_adapted.len(), noise.mu, noise.sigma);
    let data = p_adapted.data().iter().zip(delta).map(|(a, d)| a + d).collect();
    Tensor::new(p_adapted.shape().to_vec(), data)
}

fn clamped_ln(s: f32) -> f64 {
    (s as f64).clamp(LOG_EPS, 1.0 - LOG_EPS).ln()
}

/// Discrimination loss between clean and corrupted scores.
pub fn loss_d(clean: &[f32], noisy: &[f32]) -> Result<f32> {
    if clean.len() != noisy.len() || clean.is_empty() {
        return Err(Error::Shape {
            op: "loss_d",
            lhs: vec![clean.len()],
            rhs: vec![noisy.len()],
        });
    }
    let sum: f64 = clean
        .iter()
        .zip(noisy)
        .map(|(&s, &n)| (1.0 - (s as f64).clamp(LOG_EPS, 1.0 - LOG_EPS)).ln() + clamped_ln(n))
        .sum();
    Ok((-sum / (2 * clean.len()) as f64) as f32)
}

/// Pseudo-label loss.
pub fn loss_p(pseudo: &[f32], adapted: &[f32]) -> Result<f32> {
    if pseudo.len() != adapted.len() || pseudo.is_empty() {
        return Err(Error::Shape {
            op: "loss_p",
            lhs: vec![pseudo.len()],
            rhs: vec![adapted.len()],
        });
    }
    let sum: f64 = pseudo.iter().zip(adapted).map(|(&y, &s)| y as f64 * clamped_ln(s)).sum();
    Ok((-sum / pseudo.len() as f64) as f32)
}

/// `τ (t⁻ − t⁺)`.
pub fn logit_direction(pair: &TextTokenPair, tau: f32) -> Vec<f32> {
    pair.t_minus
        .data()
        .iter()
        .zip(pair.t_plus.data())
        .map(|(m, p)| tau * (m - p))
        .collect()
}

/// Scores of unadapted tokens, used as fixed soft targets.
pub fn pseudo_labels(p: &Tensor, g: &[f32]) -> Result<Vec<f32>> {
    let (logits, _, _) = cosine_logits(p.data(), g, p.cols())?;
    Ok(logits.into_iter().map(sigmoid).collect())
}

/// Gradient of `L_d + L_p` with respect to `ω` for a fixed noise draw.
pub fn grad_omega(
    p: &Tensor,
    pair: &TextTokenPair,
    omega: &Tensor,
    pseudo: &[f32],
    delta: &Tensor,
    tau: f32,
) -> Result<Tensor> {
    check_cols("grad_omega", p, &pair.tokens)?;
    check_cols("grad_omega", p, omega)?;
    if delta.shape() != p.shape() || pseudo.len() != p.rows() || omega.rows() != pair.tokens.rows() {
        return Err(Error::Shape {
            op: "grad_omega",
            lhs: p.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    let obj = Objective {
        p: p.data().to_vec(),
        t: pair.tokens.data().to_vec(),
        g: logit_direction(pair, tau),
        pseudo: pseudo.to_vec(),
        delta: delta.data().to_vec(),
        c: p.cols(),
    };
    let (_, g) = obj.loss_and_grad(omega.data())?;
    Tensor::new(omega.shape().to_vec(), g)
}

/// Trainable adapter matrix with AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterState {
    pub omega: Tensor,
    pub adam_m: Tensor,
    pub adam_v: Tensor,
    pub step_count: u32,
}

impl AdapterState {
    /// Fresh state with `ω = T` and zero moments.
    pub fn reset(t: &Tensor) -> Self {
        AdapterState {
            omega: t.clone(),
            adam_m: Tensor::zeros(t.shape()),
            adam_v: Tensor::zeros(t.shape()),
            step_count: 0,
        }
    }
}

/// Decoupled weight decay followed by a bias-corrected Adam update.
pub fn adamw_step(mut state: AdapterState, grad: &Tensor, config: &TtaConfig) -> Result<AdapterState> {
    if grad.shape() != state.omega.shape() {
        return Err(Error::Shape {
            op: "adamw_step",
            lhs: state.omega.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = config.learning_rate;
    let decay = 1.0 - lr * config.weight_decay;
    let g = grad.data();
    let m = state.adam_m.data_mut();
    for (mi, &gi) in m.iter_mut().zip(g) {
        *mi = b1 * *mi + (1.0 - b1) * gi;
    }
    let v = state.adam_v.data_mut();
    for (vi, &gi) in v.iter_mut().zip(g) {
        *vi = b2 * *vi + (1.0 - b2) * gi * gi;
    }
    let (m, v) = (state.adam_m.data().to_vec(), state.adam_v.data().to_vec());
    for ((w, mi), vi) in state.omega.data_mut().iter_mut().zip(m).zip(v) {
        *w = *w * decay - lr * (mi / c1) / ((vi / c2).sqrt() + config.eps);
    }
    if !state.omega.is_finite() {
        return Err(Error::NonFinite { op: "adamw_step" });
    }
    Ok(state)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub epoch: usize,
    pub l_d: f32,
    pub l_p: f32,
    pub loss: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TtaOutput {
    /// Adapted tokens `P'` after the last step, unnormalized.
    pub adapted: Tensor,
    /// Row `k` holds the losses at `ω` after `k` steps, so there are
    /// `epochs + 1` rows. Training draws fresh noise every step; the trace
    /// reuses one fixed draw (rescaled to each step's σ) so that rows differ
    /// only through `ω`.
    pub trace: Vec<TraceRow>,
}

/// Renders a loss trace as CSV.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("epoch,l_d,l_p,l\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{}\n", r.epoch, r.l_d, r.l_p, r.loss));
    }
    s
}

fn rms(x: &[f32]) -> f32 {
    ((x.iter().map(|&v| v as f64 * v as f64).sum::<f64>()) / x.len() as f64).sqrt() as f32
}

/// Adapts `ω` on one image's patch tokens and returns the adapted tokens.
pub fn run_tta(p: &Tensor, pair: &TextTokenPair, config: &TtaConfig) -> Result<TtaOutput> {
    config.validate()?;
    check_cols("run_tta", p, &pair.tokens)?;
    let g = logit_direction(pair, config.tau);
    let mut obj = Objective {
        p: p.data().to_vec(),
        t: pair.tokens.data().to_vec(),
        pseudo: pseudo_labels(p, &g)?,
        g,
        delta: Vec::new(),
        c: p.cols(),
    };
    let mut state = AdapterState::reset(&pair.tokens);
    let mut rng = XorShift64Star::new(config.seed);
    // Unit draws for the monitoring loss, shared by every trace row.
    let probe = gaussian(&mut rng, p.len(), 0.0, 1.0);
    let mut trace = Vec::with_capacity(config.epochs + 1);
    for epoch in 0..=config.epochs {
        let (_, adapted) = adapter_forward(&obj.p, state.omega.data(), &obj.t, obj.c);
        let sigma = config.noise_sigma.unwrap_or_else(|| config.noise_scale * rms(&adapted));
        obj.delta = probe.iter().map(|z| config.noise_mu + sigma * z).collect();
        let losses = obj.loss(state.omega.data())?;
        if !losses.total().is_finite() {
            return Err(Error::NonFinite { op: "tta loss" });
        }
        trace.push(TraceRow {
            epoch,
            l_d: losses.l_d,
            l_p: losses.l_p,
            loss: losses.total(),
        });
        if epoch < config.epochs {
            obj.delta = gaussian(&mut rng, adapted.len(), config.noise_mu, sigma);
            let (_, grad) = obj.loss_and_grad(state.omega.data())?;
            let grad = Tensor::new(state.omega.shape().to_vec(), grad)?;
            state = adamw_step(state, &grad, config)?;
        }
    }
    Ok(TtaOutput {
        adapted: adapt_tokens(p, &state.omega, &pair.tokens)?,
        trace,
    })
}
