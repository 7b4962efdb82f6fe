//! A small recurrent navigation policy with exact gradients.
//!
//! Each step the policy reads the range scan, the previous action and an
//! instruction context (mean token embedding together with an embedding
//! weighted toward the token position matching episode progress), projects it
//! through a tanh layer into a GRU cell, and emits logits for the four
//! actions. Parameters live in one flat vector; gradients of the
//! cross-entropy loss come from hand-written back-propagation through time.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episodes::Token;
use crate::sensors::LabelSet;
use crate::worldsim::{ActionType, Observation};

const N_ACT: usize = ActionType::COUNT;
/// Previous-action slots: the four actions plus "none" at the first step.
const N_PREV: usize = N_ACT + 1;
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("non-finite loss in episode {0}")]
    NonFinite(String),
    #[error("checkpoint shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Input projection, GRU cell and output layer.
    Recurrent,
    /// Logits are an affine function of the input features.
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub arch: Arch,
    pub vocab: usize,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub hidden: usize,
    pub n_rays: usize,
    pub max_range: f64,
    /// Step count mapped to full instruction progress.
    pub horizon: f64,
    /// Width (in tokens) of the progress-weighted attention window.
    pub context_width: f64,
    pub init_scale: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            arch: Arch::Recurrent,
            vocab: Token::VOCAB_SIZE,
            embed_dim: 16,
            proj_dim: 32,
            hidden: 32,
            n_rays: 9,
            max_range: 5.0,
            horizon: 200.0,
            context_width: 1.0,
            init_scale: 0.08,
        }
    }
}

impl PolicyConfig {
    pub fn input_dim(&self) -> usize {
        self.n_rays + N_PREV + 2 * self.embed_dim
    }

    /// Named tensor shapes in storage order.
    pub fn shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (v, e, i, p, h) = (
            self.vocab,
            self.embed_dim,
            self.input_dim(),
            self.proj_dim,
            self.hidden,
        );
        match self.arch {
            Arch::Recurrent => vec![
                ("embedding", vec![v, e]),
                ("proj_w", vec![p, i]),
                ("proj_b", vec![p]),
                ("gru_wz", vec![h, p]),
                ("gru_uz", vec![h, h]),
                ("gru_bz", vec![h]),
                ("gru_wr", vec![h, p]),
                ("gru_ur", vec![h, h]),
                ("gru_br", vec![h]),
                ("gru_wn", vec![h, p]),
                ("gru_un", vec![h, h]),
                ("gru_bn", vec![h]),
                ("out_w", vec![N_ACT, h]),
                ("out_b", vec![N_ACT]),
            ],
            Arch::Linear => vec![
                ("embedding", vec![v, e]),
                ("out_w", vec![N_ACT, i]),
                ("out_b", vec![N_ACT]),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Offsets of each tensor in the flat parameter vector.
#[derive(Clone, Copy, Debug)]
struct Layout {
    emb: usize,
    proj_w: usize,
    proj_b: usize,
    wz: usize,
    uz: usize,
    bz: usize,
    wr: usize,
    ur: usize,
    br: usize,
    wn: usize,
    un: usize,
    bn: usize,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    fn new(cfg: &PolicyConfig) -> Layout {
        let mut offsets = std::collections::HashMap::new();
        let mut acc = 0;
        for (name, shape) in cfg.shapes() {
            offsets.insert(name, acc);
            acc += shape.iter().product::<usize>();
        }
        let at = |n: &str| offsets.get(n).copied().unwrap_or(usize::MAX);
        Layout {
            emb: at("embedding"),
            proj_w: at("proj_w"),
            proj_b: at("proj_b"),
            wz: at("gru_wz"),
            uz: at("gru_uz"),
            bz: at("gru_bz"),
            wr: at("gru_wr"),
            ur: at("gru_ur"),
            br: at("gru_br"),
            wn: at("gru_wn"),
            un: at("gru_un"),
            bn: at("gru_bn"),
            out_w: at("out_w"),
            out_b: at("out_b"),
        }
    }
}

/// The learnable parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub data: Vec<f64>,
}

pub fn init_params(seed: u64, config: &PolicyConfig) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = config.init_scale;
    let data = (0..config.param_count())
        .map(|_| rng.gen_range(-s..=s))
        .collect();
    PolicyParams {
        config: config.clone(),
        data,
    }
}

/// Recurrent state carried across the steps of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyState {
    pub hidden: Vec<f64>,
    pub step: usize,
}

impl PolicyState {
    pub fn new(config: &PolicyConfig) -> Self {
        PolicyState {
            hidden: vec![0.0; config.hidden],
            step: 0,
        }
    }
}

/// Policy input for one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepInput {
    pub ranges: Vec<f64>,
    pub prev_action: Option<ActionType>,
    pub step_index: usize,
}

impl From<&Observation> for StepInput {
    fn from(o: &Observation) -> Self {
        StepInput {
            ranges: o.ranges.clone(),
            prev_action: o.prev_action,
            step_index: o.step_index,
        }
    }
}

/// One episode's inputs and oracle labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSample {
    pub id: String,
    pub tokens: Vec<usize>,
    pub steps: Vec<StepInput>,
    pub labels: Vec<LabelSet>,
}

pub fn token_ids(tokens: &[Token]) -> Vec<usize> {
    tokens.iter().map(Token::id).collect()
}

// out[i] += sum_j w[i, j] x[j]
#[inline]
fn gemv(w: &[f64], cols: usize, x: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

// out[j] += sum_i w[i, j] y[i]
#[inline]
fn gemv_t(w: &[f64], cols: usize, y: &[f64], out: &mut [f64]) {
    for (yi, row) in y.iter().zip(w.chunks_exact(cols)) {
        if *yi != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * yi;
            }
        }
    }
}

// g[i, j] += y[i] x[j]
#[inline]
fn outer_add(g: &mut [f64], cols: usize, y: &[f64], x: &[f64]) {
    for (yi, row) in y.iter().zip(g.chunks_exact_mut(cols)) {
        if *yi != 0.0 {
            for (o, b) in row.iter_mut().zip(x) {
                *o += yi * b;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(logits: &[f64]) -> [f64; N_ACT] {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p = [0.0; N_ACT];
    let mut z = 0.0;
    for (pi, l) in p.iter_mut().zip(logits) {
        *pi = (l - m).exp();
        z += *pi;
    }
    for pi in &mut p {
        *pi /= z;
    }
    p
}

/// Attention weights over token positions for a step: a Gaussian bump
/// centered where `step / horizon` falls along the instruction.
fn attention(cfg: &PolicyConfig, n_tokens: usize, step: usize) -> Vec<f64> {
    let progress = (step as f64 / cfg.horizon).clamp(0.0, 1.0);
    let center = progress * (n_tokens.saturating_sub(1)) as f64;
    let s2 = 2.0 * cfg.context_width * cfg.context_width;
    let raw: Vec<f64> = (0..n_tokens)
        .map(|i| (-(i as f64 - center).powi(2) / s2).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    raw.into_iter().map(|a| a / z).collect()
}

impl PolicyParams {
    fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    fn slice(&self, off: usize, len: usize) -> &[f64] {
        &self.data[off..off + len]
    }

    /// Mean embedding followed by the progress-weighted embedding.
    pub fn instruction_context(&self, tokens: &[usize], step: usize) -> Vec<f64> {
        let cfg = &self.config;
        let e = cfg.embed_dim;
        let lay = self.layout();
        let mut ctx = vec![0.0; 2 * e];
        if tokens.is_empty() {
            return ctx;
        }
        let att = attention(cfg, tokens.len(), step);
        let inv_n = 1.0 / tokens.len() as f64;
        for (&t, a) in tokens.iter().zip(&att) {
            let row = self.slice(lay.emb + t * e, e);
            for k in 0..e {
                ctx[k] += row[k] * inv_n;
                ctx[e + k] += row[k] * a;
            }
        }
        ctx
    }

    fn features(&self, input: &StepInput, tokens: &[usize]) -> Vec<f64> {
        let cfg = &self.config;
        let mut x = Vec::with_capacity(cfg.input_dim());
        x.extend(input.ranges.iter().map(|r| r / cfg.max_range));
        let mut onehot = [0.0; N_PREV];
        onehot[input.prev_action.map_or(N_ACT, ActionType::index)] = 1.0;
        x.extend(onehot);
        x.extend(self.instruction_context(tokens, input.step_index));
        assert_eq!(
            x.len(),
            cfg.input_dim(),
            "observation has the wrong ray count"
        );
        x
    }
}

/// Forward intermediates for one step.
struct StepCache {
    x: Vec<f64>,
    u: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
    rh: Vec<f64>,
    h: Vec<f64>,
    p: [f64; N_ACT],
}

fn forward_step(params: &PolicyParams, lay: &Layout, x: Vec<f64>, h_prev: &[f64]) -> StepCache {
    let cfg = &params.config;
    let (i_dim, p_dim, h_dim) = (cfg.input_dim(), cfg.proj_dim, cfg.hidden);
    match cfg.arch {
        Arch::Linear => {
            let mut logits = params.slice(lay.out_b, N_ACT).to_vec();
            gemv(
                params.slice(lay.out_w, N_ACT * i_dim),
                i_dim,
                &x,
                &mut logits,
            );
            StepCache {
                x,
                u: Vec::new(),
                h_prev: Vec::new(),
                z: Vec::new(),
                r: Vec::new(),
                n: Vec::new(),
                rh: Vec::new(),
                h: Vec::new(),
                p: softmax(&logits),
            }
        }
        Arch::Recurrent => {
            let mut u = params.slice(lay.proj_b, p_dim).to_vec();
            gemv(params.slice(lay.proj_w, p_dim * i_dim), i_dim, &x, &mut u);
            u.iter_mut().for_each(|v| *v = v.tanh());
            let gate = |w: usize, uu: usize, b: usize, hin: &[f64]| {
                let mut a = params.slice(b, h_dim).to_vec();
                gemv(params.slice(w, h_dim * p_dim), p_dim, &u, &mut a);
                gemv(params.slice(uu, h_dim * h_dim), h_dim, hin, &mut a);
                a
            };
            let z: Vec<f64> = gate(lay.wz, lay.uz, lay.bz, h_prev)
                .into_iter()
                .map(sigmoid)
                .collect();
            let r: Vec<f64> = gate(lay.wr, lay.ur, lay.br, h_prev)
                .into_iter()
                .map(sigmoid)
                .collect();
            let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
            let n: Vec<f64> = gate(lay.wn, lay.un, lay.bn, &rh)
                .into_iter()
                .map(f64::tanh)
                .collect();
            let h: Vec<f64> = (0..h_dim)
                .map(|k| (1.0 - z[k]) * n[k] + z[k] * h_prev[k])
                .collect();
            let mut logits = params.slice(lay.out_b, N_ACT).to_vec();
            gemv(
                params.slice(lay.out_w, N_ACT * h_dim),
                h_dim,
                &h,
                &mut logits,
            );
            StepCache {
                x,
                u,
                h_prev: h_prev.to_vec(),
                z,
                r,
                n,
                rh,
                h,
                p: softmax(&logits),
            }
        }
    }
}

/// One policy step: action distribution (Forward, Left, Right, Stop) and
/// the next state.
pub fn policy_step(
    params: &PolicyParams,
    state: &PolicyState,
    obs: &Observation,
    tokens: &[usize],
) -> ([f64; N_ACT], PolicyState) {
    let lay = params.layout();
    let x = params.features(&StepInput::from(obs), tokens);
    let c = forward_step(params, &lay, x, &state.hidden);
    let hidden = if params.config.arch == Arch::Recurrent {
        c.h
    } else {
        state.hidden.clone()
    };
    (
        c.p,
        PolicyState {
            hidden,
            step: state.step + 1,
        },
    )
}

/// Summed (not averaged) loss and gradient of one episode.
fn episode_loss_grad(params: &PolicyParams, ep: &EpisodeSample) -> (f64, Vec<f64>) {
    let cfg = &params.config;
    let lay = params.layout();
    let (i_dim, p_dim, h_dim, e) = (cfg.input_dim(), cfg.proj_dim, cfg.hidden, cfg.embed_dim);
    let mut grad = vec![0.0; params.data.len()];
    let mut h = vec![0.0; h_dim];
    let mut caches = Vec::with_capacity(ep.steps.len());
    let mut loss = 0.0;
    for (input, labels) in ep.steps.iter().zip(&ep.labels) {
        let x = params.features(input, &ep.tokens);
        let c = forward_step(params, &lay, x, &h);
        for &(a, w) in &labels.entries {
            loss -= w * c.p[a.index()].ln();
        }
        if cfg.arch == Arch::Recurrent {
            h = c.h.clone();
        }
        caches.push(c);
    }

    let mut dh_next = vec![0.0; h_dim];
    for (t, c) in caches.iter().enumerate().rev() {
        let labels = &ep.labels[t];
        let wsum: f64 = labels.entries.iter().map(|(_, w)| w).sum();
        let mut dlog: Vec<f64> = c.p.iter().map(|p| wsum * p).collect();
        for &(a, w) in &labels.entries {
            dlog[a.index()] -= w;
        }
        let mut dx = vec![0.0; i_dim];
        match cfg.arch {
            Arch::Linear => {
                outer_add(
                    &mut grad[lay.out_w..lay.out_w + N_ACT * i_dim],
                    i_dim,
                    &dlog,
                    &c.x,
                );
                grad[lay.out_b..lay.out_b + N_ACT]
                    .iter_mut()
                    .zip(&dlog)
                    .for_each(|(g, d)| *g += d);
                gemv_t(
                    params.slice(lay.out_w, N_ACT * i_dim),
                    i_dim,
                    &dlog,
                    &mut dx,
                );
            }
            Arch::Recurrent => {
                outer_add(
                    &mut grad[lay.out_w..lay.out_w + N_ACT * h_dim],
                    h_dim,
                    &dlog,
                    &c.h,
                );
                grad[lay.out_b..lay.out_b + N_ACT]
                    .iter_mut()
                    .zip(&dlog)
                    .for_each(|(g, d)| *g += d);
                let mut dh = dh_next.clone();
                gemv_t(
                    params.slice(lay.out_w, N_ACT * h_dim),
                    h_dim,
                    &dlog,
                    &mut dh,
                );

                let mut dh_prev: Vec<f64> = (0..h_dim).map(|k| dh[k] * c.z[k]).collect();
                let dn_pre: Vec<f64> = (0..h_dim)
                    .map(|k| dh[k] * (1.0 - c.z[k]) * (1.0 - c.n[k] * c.n[k]))
                    .collect();
                let dz_pre: Vec<f64> = (0..h_dim)
                    .map(|k| dh[k] * (c.h_prev[k] - c.n[k]) * c.z[k] * (1.0 - c.z[k]))
                    .collect();
                let mut du = vec![0.0; p_dim];
                // Candidate gate.
                outer_add(
                    &mut grad[lay.wn..lay.wn + h_dim * p_dim],
                    p_dim,
                    &dn_pre,
                    &c.u,
                );
                outer_add(
                    &mut grad[lay.un..lay.un + h_dim * h_dim],
                    h_dim,
                    &dn_pre,
                    &c.rh,
                );
                grad[lay.bn..lay.bn + h_dim]
                    .iter_mut()
                    .zip(&dn_pre)
                    .for_each(|(g, d)| *g += d);
                gemv_t(params.slice(lay.wn, h_dim * p_dim), p_dim, &dn_pre, &mut du);
                let mut drh = vec![0.0; h_dim];
                gemv_t(
                    params.slice(lay.un, h_dim * h_dim),
                    h_dim,
                    &dn_pre,
                    &mut drh,
                );
                let dr_pre: Vec<f64> = (0..h_dim)
                    .map(|k| drh[k] * c.h_prev[k] * c.r[k] * (1.0 - c.r[k]))
                    .collect();
                for k in 0..h_dim {
                    dh_prev[k] += drh[k] * c.r[k];
                }
                // Update and reset gates.
                for (d, w, uu, b) in [
                    (&dz_pre, lay.wz, lay.uz, lay.bz),
                    (&dr_pre, lay.wr, lay.ur, lay.br),
                ] {
                    outer_add(&mut grad[w..w + h_dim * p_dim], p_dim, d, &c.u);
                    outer_add(&mut grad[uu..uu + h_dim * h_dim], h_dim, d, &c.h_prev);
                    grad[b..b + h_dim]
                        .iter_mut()
                        .zip(d.iter())
                        .for_each(|(g, v)| *g += v);
                    gemv_t(params.slice(w, h_dim * p_dim), p_dim, d, &mut du);
                    gemv_t(params.slice(uu, h_dim * h_dim), h_dim, d, &mut dh_prev);
                }
                let du_pre: Vec<f64> = (0..p_dim)
                    .map(|k| du[k] * (1.0 - c.u[k] * c.u[k]))
                    .collect();
                outer_add(
                    &mut grad[lay.proj_w..lay.proj_w + p_dim * i_dim],
                    i_dim,
                    &du_pre,
                    &c.x,
                );
                grad[lay.proj_b..lay.proj_b + p_dim]
                    .iter_mut()
                    .zip(&du_pre)
                    .for_each(|(g, d)| *g += d);
                gemv_t(
                    params.slice(lay.proj_w, p_dim * i_dim),
                    i_dim,
                    &du_pre,
                    &mut dx,
                );
                dh_next = dh_prev;
            }
        }
        // Instruction context back into the embeddings.
        if !ep.tokens.is_empty() {
            let dctx = &dx[cfg.n_rays + N_PREV..];
            let att = attention(cfg, ep.tokens.len(), ep.steps[t].step_index);
            let inv_n = 1.0 / ep.tokens.len() as f64;
            for (&tok, a) in ep.tokens.iter().zip(&att) {
                let row = &mut grad[lay.emb + tok * e..lay.emb + (tok + 1) * e];
                for k in 0..e {
                    row[k] += dctx[k] * inv_n + dctx[e + k] * a;
                }
            }
        }
    }
    (loss, grad)
}

/// Mean cross-entropy over all labeled steps of the batch and its exact
/// gradient. Episodes are reduced in batch order.
pub fn loss_and_grad(
    params: &PolicyParams,
    batch: &[EpisodeSample],
) -> Result<(f64, Vec<f64>), PolicyError> {
    let n_steps: usize = batch.iter().map(|e| e.steps.len()).sum();
    let mut grad = vec![0.0; params.data.len()];
    if n_steps == 0 {
        return Ok((0.0, grad));
    }
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|ep| episode_loss_grad(params, ep))
        .collect();
    let mut loss = 0.0;
    for (ep, (l, g)) in batch.iter().zip(parts) {
        if !l.is_finite() {
            return Err(PolicyError::NonFinite(ep.id.clone()));
        }
        loss += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let scale = 1.0 / n_steps as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, grad))
}

/// Mean loss only.
pub fn loss(params: &PolicyParams, batch: &[EpisodeSample]) -> Result<f64, PolicyError> {
    let n_steps: usize = batch.iter().map(|e| e.steps.len()).sum();
    if n_steps == 0 {
        return Ok(0.0);
    }
    let lay = params.layout();
    let mut total = 0.0;
    for ep in batch {
        let mut h = vec![0.0; params.config.hidden];
        let mut l = 0.0;
        for (input, labels) in ep.steps.iter().zip(&ep.labels) {
            let c = forward_step(params, &lay, params.features(input, &ep.tokens), &h);
            for &(a, w) in &labels.entries {
                l -= w * c.p[a.index()].ln();
            }
            if params.config.arch == Arch::Recurrent {
                h = c.h;
            }
        }
        if !l.is_finite() {
            return Err(PolicyError::NonFinite(ep.id.clone()));
        }
        total += l;
    }
    Ok(total / n_steps as f64)
}

/// Largest relative error between `analytic` and central differences of the
/// loss on a random subset of up to 200 coordinates. Relative error is
/// `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn compare_gradient(
    params: &PolicyParams,
    batch: &[EpisodeSample],
    analytic: &[f64],
    eps: f64,
    seed: u64,
) -> Result<f64, PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.data.len();
    let coords = rand::seq::index::sample(&mut rng, n, n.min(200));
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for i in coords.iter() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = loss(&probe, batch)?;
        probe.data[i] = orig - eps;
        let down = loss(&probe, batch)?;
        probe.data[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / (analytic[i].abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn grad_check(
    params: &PolicyParams,
    batch: &[EpisodeSample],
    eps: f64,
    seed: u64,
) -> Result<f64, PolicyError> {
    let (_, g) = loss_and_grad(params, batch)?;
    compare_gradient(params, batch, &g, eps, seed)
}

/// Highest-probability action; ties go to the lowest action index.
pub fn argmax_action(probs: &[f64; N_ACT]) -> ActionType {
    let mut best = 0;
    for i in 1..N_ACT {
        if probs[i] > probs[best] {
            best = i;
        }
    }
    ActionType::ALL[best]
}

pub fn sample_action<R: Rng>(probs: &[f64; N_ACT], rng: &mut R) -> ActionType {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return ActionType::ALL[i];
        }
    }
    ActionType::ALL[N_ACT - 1]
}

/// SGD with momentum and global gradient-norm clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub clip: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr: 0.01,
            momentum: 0.9,
            clip: 5.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(config: SgdConfig, n_params: usize) -> Self {
        Sgd {
            config,
            velocity: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut PolicyParams, grad: &[f64]) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if norm > self.config.clip {
            self.config.clip / norm
        } else {
            1.0
        };
        for ((v, g), p) in self
            .velocity
            .iter_mut()
            .zip(grad)
            .zip(params.data.iter_mut())
        {
            *v = self.config.momentum * *v + scale * g;
            *p -= self.config.lr * *v;
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    version: u32,
    config: PolicyConfig,
    tensors: Vec<TensorRecord>,
}

impl PolicyParams {
    pub fn to_json(&self) -> String {
        let mut off = 0;
        let tensors = self
            .config
            .shapes()
            .into_iter()
            .map(|(name, shape)| {
                let len: usize = shape.iter().product();
                let values = self.data[off..off + len].to_vec();
                off += len;
                TensorRecord {
                    name: name.to_string(),
                    shape,
                    values,
                }
            })
            .collect();
        serde_json::to_string(&CheckpointRecord {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors,
        })
        .expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PolicyError> {
        let rec: CheckpointRecord = serde_json::from_str(text)
            .map_err(|e| PolicyError::InvalidCheckpoint(e.to_string()))?;
        if rec.version != CHECKPOINT_VERSION {
            return Err(PolicyError::InvalidCheckpoint(format!(
                "version {}",
                rec.version
            )));
        }
        let shapes = rec.config.shapes();
        if shapes.len() != rec.tensors.len() {
            return Err(PolicyError::InvalidCheckpoint(format!(
                "{} tensors, expected {}",
                rec.tensors.len(),
                shapes.len()
            )));
        }
        let mut data = Vec::with_capacity(rec.config.param_count());
        for ((name, shape), t) in shapes.into_iter().zip(rec.tensors) {
            if t.name != name
                || t.shape != shape
                || t.values.len() != shape.iter().product::<usize>()
            {
                return Err(PolicyError::ShapeMismatch {
                    name: t.name,
                    expected: shape,
                    found: t.shape,
                });
            }
            if t.values.iter().any(|v| !v.is_finite()) {
                return Err(PolicyError::InvalidCheckpoint(format!(
                    "non-finite values in {name}"
                )));
            }
            data.extend(t.values);
        }
        Ok(PolicyParams {
            config: rec.config,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        std::fs::write(path, self.to_json()).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path).map_err(|source| PolicyError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
