//! Recurrent discard policy: stacked LSTM layers, a dense trunk with a
//! per-unit affine normalization, and an 11-way output over tile kinds.
//!
//! Parameters live in one flat vector. Canonical order:
//!
//! 1. each LSTM layer: gate weights `[4 * hidden, in + hidden]` row-major
//!    (gate blocks in the order input, forget, cell, output; columns are the
//!    layer input followed by the previous hidden state), then gate biases
//!    `[4 * hidden]`;
//! 2. each dense layer: weights `[width, in]`, bias `[width]`, then, when
//!    normalization is enabled, scale `[width]` and shift `[width]`;
//! 3. output layer: weights `[output, in]`, bias `[output]`;
//! 4. value head (PPO only): weights `[1, in]`, bias `[1]`.
//!
//! A dense layer computes `relu(scale * (W x + b) + shift)`; dropout (train
//! mode only) follows the activation. The output layer is linear.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoding::{Observation, OBS_DIM};
use crate::engine::{KindSet, NUM_KINDS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("architecture input must be {OBS_DIM} and output {NUM_KINDS}")]
    Shape,
    #[error("no legal action to select")]
    NoLegalAction,
    #[error("non-finite logits")]
    NonFinite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub recurrent_layers: usize,
    pub hidden: usize,
    pub dense_layers: usize,
    pub width: usize,
    pub output_dim: usize,
    pub normalization: bool,
    pub value_head: bool,
}

/// Dropout rate applied in train mode.
pub const DEFAULT_DROPOUT: f64 = 0.1;

impl ArchSpec {
    /// Three LSTM layers of 32 and eight dense layers of 32.
    pub const fn full() -> Self {
        ArchSpec {
            input_dim: OBS_DIM,
            recurrent_layers: 3,
            hidden: 32,
            dense_layers: 8,
            width: 32,
            output_dim: NUM_KINDS,
            normalization: true,
            value_head: false,
        }
    }

    /// Desk-scale preset: one LSTM layer of 8 and two dense layers of 8.
    pub const fn small() -> Self {
        ArchSpec {
            input_dim: OBS_DIM,
            recurrent_layers: 1,
            hidden: 8,
            dense_layers: 2,
            width: 8,
            output_dim: NUM_KINDS,
            normalization: true,
            value_head: false,
        }
    }

    pub const fn with_value_head(self) -> Self {
        ArchSpec { value_head: true, ..self }
    }

    pub const fn policy_only(self) -> Self {
        ArchSpec { value_head: false, ..self }
    }

    pub fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut take = |n: usize| {
            let r = offset..offset + n;
            offset += n;
            r
        };
        let mut lstm = Vec::with_capacity(self.recurrent_layers);
        let mut input = self.input_dim;
        for _ in 0..self.recurrent_layers {
            let cols = input + self.hidden;
            lstm.push(LstmSlots {
                input,
                weights: take(4 * self.hidden * cols),
                bias: take(4 * self.hidden),
            });
            input = self.hidden;
        }
        let mut dense = Vec::with_capacity(self.dense_layers);
        for _ in 0..self.dense_layers {
            let w = take(self.width * input);
            let b = take(self.width);
            let (scale, shift) = if self.normalization {
                (Some(take(self.width)), Some(take(self.width)))
            } else {
                (None, None)
            };
            dense.push(DenseSlots {
                input,
                weights: w,
                bias: b,
                scale,
                shift,
            });
            input = self.width;
        }
        let output = AffineSlots {
            input,
            weights: take(self.output_dim * input),
            bias: take(self.output_dim),
        };
        let value = self.value_head.then(|| AffineSlots {
            input,
            weights: take(input),
            bias: take(1),
        });
        Layout {
            lstm,
            dense,
            output,
            value,
            total: offset,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }

    /// Number of parameters of the policy alone (value head excluded).
    pub fn policy_param_count(&self) -> usize {
        self.policy_only().param_count()
    }
}

type Slot = std::ops::Range<usize>;

#[derive(Clone, Debug)]
pub struct LstmSlots {
    pub input: usize,
    pub weights: Slot,
    pub bias: Slot,
}

#[derive(Clone, Debug)]
pub struct DenseSlots {
    pub input: usize,
    pub weights: Slot,
    pub bias: Slot,
    pub scale: Option<Slot>,
    pub shift: Option<Slot>,
}

#[derive(Clone, Debug)]
pub struct AffineSlots {
    pub input: usize,
    pub weights: Slot,
    pub bias: Slot,
}

/// Where each tensor sits inside the flat parameter vector.
#[derive(Clone, Debug)]
pub struct Layout {
    pub lstm: Vec<LstmSlots>,
    pub dense: Vec<DenseSlots>,
    pub output: AffineSlots,
    pub value: Option<AffineSlots>,
    pub total: usize,
}

/// Zero-mean Gaussian weights with standard deviation `1/sqrt(fan_in)`; zero
/// biases and shifts; unit normalization scales.
pub fn init_params(arch: ArchSpec, seed: u64) -> Vec<f64> {
    let layout = arch.layout();
    let mut params = vec![0.0; layout.total];
    let mut rng = crate::rng::stream(seed, 0, crate::rng::LANE_AUX);
    let mut fill = |slot: &Slot, fan_in: usize, params: &mut [f64]| {
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        for p in &mut params[slot.clone()] {
            *p = normal.sample(&mut rng);
        }
    };
    for l in &layout.lstm {
        fill(&l.weights, l.input + arch.hidden, &mut params);
    }
    for d in &layout.dense {
        fill(&d.weights, d.input, &mut params);
        if let Some(scale) = &d.scale {
            params[scale.clone()].fill(1.0);
        }
    }
    fill(&layout.output.weights, layout.output.input, &mut params);
    if let Some(v) = &layout.value {
        fill(&v.weights, v.input, &mut params);
    }
    params
}

/// Per-layer LSTM hidden and cell activations.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl HiddenState {
    pub fn zeros(arch: ArchSpec) -> Self {
        HiddenState {
            h: vec![vec![0.0; arch.hidden]; arch.recurrent_layers],
            c: vec![vec![0.0; arch.hidden]; arch.recurrent_layers],
        }
    }
}

pub enum Mode<'r> {
    Eval,
    /// Inverted dropout on every dense activation.
    Train { dropout: f64, rng: &'r mut dyn rand::RngCore },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    Greedy,
    Sample,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out = W x + b` for row-major `W[rows, x.len()]`.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Everything the backward pass needs from one forward step.
#[derive(Clone, Debug)]
pub struct StepCache {
    lstm: Vec<LstmCache>,
    dense: Vec<DenseCache>,
    trunk: Vec<f64>,
    pub logits: Vec<f64>,
    pub value: Option<f64>,
}

impl StepCache {
    /// Which dense-layer units are active, in layer order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.dense.iter().flat_map(|d| d.normed.iter().map(|&v| v > 0.0)).collect()
    }
}

#[derive(Clone, Debug)]
struct LstmCache {
    concat: Vec<f64>,
    gates: Vec<f64>,
    c_prev: Vec<f64>,
    tanh_c: Vec<f64>,
}

#[derive(Clone, Debug)]
struct DenseCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    normed: Vec<f64>,
    mask: Option<Vec<f64>>,
}

/// Dropout keep-masks, one per dense layer, already scaled by `1/(1-p)`.
pub type DropoutMasks = Vec<Vec<f64>>;

pub fn sample_dropout_masks(arch: ArchSpec, rate: f64, rng: &mut dyn rand::RngCore) -> DropoutMasks {
    (0..arch.dense_layers)
        .map(|_| {
            (0..arch.width)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 / (1.0 - rate) })
                .collect()
        })
        .collect()
}

/// Parameter vector bound to its architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    arch: ArchSpec,
    layout_total: usize,
    params: Vec<f64>,
}

impl Network {
    pub fn new(arch: ArchSpec, params: Vec<f64>) -> Result<Self, NetError> {
        let expected = arch.param_count();
        if params.len() != expected {
            return Err(NetError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        if arch.input_dim != OBS_DIM || arch.output_dim != NUM_KINDS {
            return Err(NetError::Shape);
        }
        Ok(Network {
            arch,
            layout_total: expected,
            params,
        })
    }

    pub fn arch(&self) -> ArchSpec {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    /// Drop the value head, keeping the policy parameters unchanged.
    pub fn policy_only(&self) -> Network {
        let arch = self.arch.policy_only();
        let n = arch.param_count();
        Network {
            arch,
            layout_total: n,
            params: self.params[..n].to_vec(),
        }
    }

    pub fn forward(&self, obs: &Observation, hidden: &HiddenState, mode: Mode<'_>) -> Result<(Vec<f64>, HiddenState), NetError> {
        let masks = match mode {
            Mode::Eval => None,
            Mode::Train { dropout, rng } => Some(sample_dropout_masks(self.arch, dropout, rng)),
        };
        let (cache, next) = forward_step(self.arch, &self.params, &obs.as_f64(), hidden, masks.as_ref());
        Ok((cache.logits, next))
    }

    /// Logits and value estimate (value head required for the latter).
    pub fn forward_with_value(&self, obs: &Observation, hidden: &HiddenState) -> (Vec<f64>, Option<f64>, HiddenState) {
        let (cache, next) = forward_step(self.arch, &self.params, &obs.as_f64(), hidden, None);
        (cache.logits, cache.value, next)
    }
}

/// One recurrent step, keeping the intermediates for a backward pass.
pub fn forward_step(
    arch: ArchSpec,
    params: &[f64],
    x: &[f64],
    hidden: &HiddenState,
    masks: Option<&DropoutMasks>,
) -> (StepCache, HiddenState) {
    let layout = arch.layout();
    debug_assert_eq!(params.len(), layout.total);
    let hsz = arch.hidden;
    let mut next = hidden.clone();
    let mut input: Vec<f64> = x.to_vec();
    let mut lstm_caches = Vec::with_capacity(arch.recurrent_layers);
    for (l, slots) in layout.lstm.iter().enumerate() {
        let mut concat = input.clone();
        concat.extend_from_slice(&hidden.h[l]);
        let mut z = vec![0.0; 4 * hsz];
        affine(&params[slots.weights.clone()], &params[slots.bias.clone()], &concat, &mut z);
        for j in 0..hsz {
            z[j] = sigmoid(z[j]);
            z[hsz + j] = sigmoid(z[hsz + j]);
            z[2 * hsz + j] = z[2 * hsz + j].tanh();
            z[3 * hsz + j] = sigmoid(z[3 * hsz + j]);
        }
        let c_prev = hidden.c[l].clone();
        let mut tanh_c = vec![0.0; hsz];
        for j in 0..hsz {
            let c = z[hsz + j] * c_prev[j] + z[j] * z[2 * hsz + j];
            next.c[l][j] = c;
            tanh_c[j] = c.tanh();
            next.h[l][j] = z[3 * hsz + j] * tanh_c[j];
        }
        input = next.h[l].clone();
        lstm_caches.push(LstmCache {
            concat,
            gates: z,
            c_prev,
            tanh_c,
        });
    }
    let mut dense_caches = Vec::with_capacity(arch.dense_layers);
    for (d, slots) in layout.dense.iter().enumerate() {
        let mut pre = vec![0.0; arch.width];
        affine(&params[slots.weights.clone()], &params[slots.bias.clone()], &input, &mut pre);
        let normed: Vec<f64> = match (&slots.scale, &slots.shift) {
            (Some(sc), Some(sh)) => pre
                .iter()
                .zip(&params[sc.clone()])
                .zip(&params[sh.clone()])
                .map(|((a, s), t)| a * s + t)
                .collect(),
            _ => pre.clone(),
        };
        let mask = masks.map(|m| m[d].clone());
        let mut out: Vec<f64> = normed.iter().map(|&v| v.max(0.0)).collect();
        if let Some(m) = &mask {
            for (o, k) in out.iter_mut().zip(m) {
                *o *= k;
            }
        }
        dense_caches.push(DenseCache {
            input: std::mem::replace(&mut input, out),
            pre,
            normed,
            mask,
        });
    }
    let mut logits = vec![0.0; arch.output_dim];
    affine(
        &params[layout.output.weights.clone()],
        &params[layout.output.bias.clone()],
        &input,
        &mut logits,
    );
    let value = layout.value.as_ref().map(|v| {
        let mut out = [0.0];
        affine(&params[v.weights.clone()], &params[v.bias.clone()], &input, &mut out);
        out[0]
    });
    (
        StepCache {
            lstm: lstm_caches,
            dense: dense_caches,
            trunk: input,
            logits,
            value,
        },
        next,
    )
}

/// Backpropagation through time over one game's steps. `dlogits[t]` and
/// `dvalue[t]` are loss gradients at step `t`; gradients accumulate into
/// `grad`.
pub fn backward_sequence(arch: ArchSpec, params: &[f64], caches: &[StepCache], dlogits: &[Vec<f64>], dvalue: &[f64], grad: &mut [f64]) {
    let layout = arch.layout();
    let hsz = arch.hidden;
    let nl = arch.recurrent_layers;
    let mut dh_next = vec![vec![0.0; hsz]; nl];
    let mut dc_next = vec![vec![0.0; hsz]; nl];
    for t in (0..caches.len()).rev() {
        let cache = &caches[t];
        let out = &layout.output;
        let mut dx = vec![0.0; out.input];
        affine_backward(params, grad, out.weights.clone(), out.bias.clone(), &cache.trunk, &dlogits[t], &mut dx);
        if let Some(v) = &layout.value {
            affine_backward(params, grad, v.weights.clone(), v.bias.clone(), &cache.trunk, &[dvalue[t]], &mut dx);
        }
        for (slots, dc) in layout.dense.iter().zip(&cache.dense).rev() {
            let mut dpre: Vec<f64> = dx
                .iter()
                .enumerate()
                .map(|(j, &g)| {
                    let keep = dc.mask.as_ref().map_or(1.0, |m| m[j]);
                    if dc.normed[j] > 0.0 {
                        g * keep
                    } else {
                        0.0
                    }
                })
                .collect();
            if let (Some(sc), Some(sh)) = (&slots.scale, &slots.shift) {
                for j in 0..dpre.len() {
                    grad[sc.start + j] += dpre[j] * dc.pre[j];
                    grad[sh.start + j] += dpre[j];
                    dpre[j] *= params[sc.start + j];
                }
            }
            let mut din = vec![0.0; slots.input];
            affine_backward(params, grad, slots.weights.clone(), slots.bias.clone(), &dc.input, &dpre, &mut din);
            dx = din;
        }
        for l in (0..nl).rev() {
            let slots = &layout.lstm[l];
            let lc = &cache.lstm[l];
            let gates = &lc.gates;
            let mut dz = vec![0.0; 4 * hsz];
            for j in 0..hsz {
                let (i, f, g, o) = (gates[j], gates[hsz + j], gates[2 * hsz + j], gates[3 * hsz + j]);
                let dh = dx[j] + dh_next[l][j];
                let tc = lc.tanh_c[j];
                let dc = dc_next[l][j] + dh * o * (1.0 - tc * tc);
                dz[j] = dc * g * i * (1.0 - i);
                dz[hsz + j] = dc * lc.c_prev[j] * f * (1.0 - f);
                dz[2 * hsz + j] = dc * i * (1.0 - g * g);
                dz[3 * hsz + j] = dh * tc * o * (1.0 - o);
                dc_next[l][j] = dc * f;
            }
            let mut dconcat = vec![0.0; slots.input + hsz];
            affine_backward(params, grad, slots.weights.clone(), slots.bias.clone(), &lc.concat, &dz, &mut dconcat);
            dh_next[l].copy_from_slice(&dconcat[slots.input..]);
            dconcat.truncate(slots.input);
            dx = dconcat;
        }
    }
}

/// Accumulate the gradients of `out = W x + b` given `dout`; adds `Wᵀ dout`
/// into `dx`.
fn affine_backward(params: &[f64], grad: &mut [f64], w: Slot, b: Slot, x: &[f64], dout: &[f64], dx: &mut [f64]) {
    let cols = x.len();
    for (r, &g) in dout.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grad[b.start + r] += g;
        let row = w.start + r * cols;
        for c in 0..cols {
            grad[row + c] += g * x[c];
            dx[c] += g * params[row + c];
        }
    }
}

/// Log-probabilities of the softmax restricted to `legal`; illegal kinds get
/// negative infinity. Index `k - 1` holds kind `k`.
pub fn masked_log_softmax(logits: &[f64], legal: KindSet) -> Vec<f64> {
    let max = legal.iter().map(|k| logits[k as usize - 1]).fold(f64::NEG_INFINITY, f64::max);
    let lse = max + legal.iter().map(|k| (logits[k as usize - 1] - max).exp()).sum::<f64>().ln();
    (1..=logits.len() as u8)
        .map(|k| if legal.contains(k) { logits[k as usize - 1] - lse } else { f64::NEG_INFINITY })
        .collect()
}

pub fn mask_and_select(logits: &[f64], legal: KindSet, selection: Selection, rng: &mut impl Rng) -> Result<u8, NetError> {
    if legal.is_empty() {
        return Err(NetError::NoLegalAction);
    }
    match selection {
        Selection::Greedy => {
            let mut best = None;
            for k in legal.iter() {
                let v = logits[k as usize - 1];
                match best {
                    Some((_, b)) if !(v > b) => {}
                    _ => best = Some((k, v)),
                }
            }
            Ok(best.expect("non-empty").0)
        }
        Selection::Sample => {
            let logp = masked_log_softmax(logits, legal);
            if legal.iter().any(|k| !logp[k as usize - 1].is_finite()) {
                return Err(NetError::NonFinite);
            }
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut last = 0;
            for k in legal.iter() {
                acc += logp[k as usize - 1].exp();
                last = k;
                if u < acc {
                    return Ok(k);
                }
            }
            Ok(last)
        }
    }
}
