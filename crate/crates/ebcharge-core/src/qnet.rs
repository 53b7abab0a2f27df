//! Fully-connected value-function approximator.
//!
//! Rectified-linear hidden layers, a linear output layer (one value per
//! discrete action or charging-target slot), adaptive-moment gradient
//! updates on the squared double-Q error, and hard target-network copies.
//! Everything is plain `f64` so runs are bit-reproducible for a fixed seed.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::config::FeatureRange;
use crate::env::{EnvState, Scenario};
use crate::error::{Error, Result};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Layer {
    /// Row-major `out x in`.
    w: Vec<f64>,
    b: Vec<f64>,
    n_in: usize,
    n_out: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// One training sample for a double-Q update.
#[derive(Debug, Clone)]
pub struct TdSample {
    pub features: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    /// No bootstrap term: the reward already carries the terminal value.
    pub done: bool,
    pub next_features: Vec<f64>,
    /// Output slots selectable in the next state; the target argmax is
    /// restricted to these.
    pub next_feasible: Vec<usize>,
}

/// Multilayer Q-value estimator with its own optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QNet {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
    adam: Vec<AdamSlot>,
    steps: u64,
    pub learning_rate: f64,
}

impl QNet {
    /// `sizes` runs input, hidden..., output. Weights start fan-in-scaled
    /// uniform from the given seed, biases at zero.
    pub fn new(sizes: &[usize], learning_rate: f64, seed: u64) -> QNet {
        assert!(sizes.len() >= 2, "need at least input and output sizes");
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut adam = Vec::new();
        for pair in sizes.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            let limit = (3.0 / n_in as f64).sqrt();
            let w = (0..n_in * n_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect::<Vec<f64>>();
            layers.push(Layer {
                w,
                b: vec![0.0; n_out],
                n_in,
                n_out,
            });
            adam.push(AdamSlot {
                m: vec![0.0; n_in * n_out + n_out],
                v: vec![0.0; n_in * n_out + n_out],
            });
        }
        QNet {
            sizes: sizes.to_vec(),
            layers,
            adam,
            steps: 0,
            learning_rate,
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn train_steps(&self) -> u64 {
        self.steps
    }

    /// Deterministic forward pass: affine layers with rectified-linear hidden
    /// activations and a linear output.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_len(), "feature length mismatch");
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = layer.b.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                let mut acc = 0.0;
                for (wi, ai) in row.iter().zip(a.iter()) {
                    acc += wi * ai;
                }
                *zo += acc;
            }
            if i != last {
                for zo in z.iter_mut() {
                    if *zo < 0.0 {
                        *zo = 0.0;
                    }
                }
            }
            a = z;
        }
        a
    }

    /// Forward pass keeping post-activation values per layer (input first).
    fn forward_cached(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let a = acts.last().unwrap();
            let mut z = layer.b.clone();
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                let mut acc = 0.0;
                for (wi, ai) in row.iter().zip(a.iter()) {
                    acc += wi * ai;
                }
                *zo += acc;
            }
            if i != last {
                for zo in z.iter_mut() {
                    if *zo < 0.0 {
                        *zo = 0.0;
                    }
                }
            }
            acts.push(z);
        }
        acts
    }

    /// Double-Q targets: the next action is chosen by this (online) network
    /// and valued by the target network. Terminal samples carry their full
    /// value in the reward.
    pub fn td_targets(&self, target: &QNet, batch: &[TdSample]) -> Vec<f64> {
        batch
            .iter()
            .map(|s| {
                if s.done {
                    s.reward
                } else {
                    let online_next = self.forward(&s.next_features);
                    let best = argmax_over(&online_next, &s.next_feasible);
                    s.reward + target.forward(&s.next_features)[best]
                }
            })
            .collect()
    }

    /// Mean squared error of the batch against fixed targets.
    pub fn loss_given_targets(&self, batch: &[TdSample], ys: &[f64]) -> f64 {
        let mut loss = 0.0;
        for (s, y) in batch.iter().zip(ys) {
            let q = self.forward(&s.features)[s.action];
            loss += (y - q) * (y - q);
        }
        loss / batch.len() as f64
    }

    /// Gradient of [`QNet::loss_given_targets`] in [`QNet::params_flat`]
    /// order, with the targets held constant.
    pub fn gradient_given_targets(&self, batch: &[TdSample], ys: &[f64]) -> Vec<f64> {
        let mut grads: Vec<Vec<f64>> = self
            .layers
            .iter()
            .map(|l| vec![0.0; l.w.len() + l.b.len()])
            .collect();
        let n = batch.len() as f64;
        for (s, y) in batch.iter().zip(ys) {
            let acts = self.forward_cached(&s.features);
            let out = acts.last().unwrap();
            let mut delta = vec![0.0; out.len()];
            delta[s.action] = 2.0 * (out[s.action] - y) / n;
            for li in (0..self.layers.len()).rev() {
                let layer = &self.layers[li];
                let a_prev = &acts[li];
                let g = &mut grads[li];
                for o in 0..layer.n_out {
                    let d = delta[o];
                    if d != 0.0 {
                        let row = &mut g[o * layer.n_in..(o + 1) * layer.n_in];
                        for (gi, ai) in row.iter_mut().zip(a_prev.iter()) {
                            *gi += d * ai;
                        }
                        g[layer.w.len() + o] += d;
                    }
                }
                if li > 0 {
                    // Propagate through the rectifier: hidden activations are
                    // zero exactly where the pre-activation was clamped.
                    let mut prev_delta = vec![0.0; layer.n_in];
                    for o in 0..layer.n_out {
                        let d = delta[o];
                        if d != 0.0 {
                            let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                            for (pd, wi) in prev_delta.iter_mut().zip(row.iter()) {
                                *pd += d * wi;
                            }
                        }
                    }
                    for (pd, ai) in prev_delta.iter_mut().zip(a_prev.iter()) {
                        if *ai <= 0.0 {
                            *pd = 0.0;
                        }
                    }
                    delta = prev_delta;
                }
            }
        }
        grads.concat()
    }

    /// One double-Q gradient step on the minibatch; returns the pre-step loss.
    pub fn td_update(&mut self, target: &QNet, batch: &[TdSample]) -> f64 {
        assert!(!batch.is_empty(), "minibatch must be non-empty");
        let ys = self.td_targets(target, batch);
        let loss = self.loss_given_targets(batch, &ys);
        let grads = self.gradient_given_targets(batch, &ys);
        self.apply_adam(&grads);
        debug_assert!(self.params_flat().iter().all(|p| p.is_finite()));
        loss
    }

    fn apply_adam(&mut self, grads: &[f64]) {
        self.steps += 1;
        let t = self.steps as f64;
        let bc1 = 1.0 - ADAM_BETA1.powf(t);
        let bc2 = 1.0 - ADAM_BETA2.powf(t);
        let mut offset = 0;
        for (layer, slot) in self.layers.iter_mut().zip(self.adam.iter_mut()) {
            let count = layer.w.len() + layer.b.len();
            let g = &grads[offset..offset + count];
            for i in 0..count {
                slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g[i];
                slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                let step = self.learning_rate * m_hat / (v_hat.sqrt() + ADAM_EPS);
                if i < layer.w.len() {
                    layer.w[i] -= step;
                } else {
                    layer.b[i - layer.w.len()] -= step;
                }
            }
            offset += count;
        }
    }

    /// Copies parameters from `online`, making this an exact snapshot.
    pub fn sync_from(&mut self, online: &QNet) {
        assert_eq!(self.sizes, online.sizes, "architecture mismatch");
        for (dst, src) in self.layers.iter_mut().zip(online.layers.iter()) {
            dst.w.copy_from_slice(&src.w);
            dst.b.copy_from_slice(&src.b);
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&params[offset..offset + nw]);
            offset += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&params[offset..offset + nb]);
            offset += nb;
        }
    }

    /// Structural integrity check used when loading checkpoints.
    pub fn validate_shapes(&self, expected_sizes: Option<&[usize]>) -> Result<()> {
        if let Some(exp) = expected_sizes {
            if exp != self.sizes.as_slice() {
                return Err(Error::Contract(format!(
                    "checkpoint architecture {:?} does not match configured {:?}",
                    self.sizes, exp
                )));
            }
        }
        if self.layers.len() + 1 != self.sizes.len() {
            return Err(Error::Contract("checkpoint layer count mismatch".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.n_in != self.sizes[i]
                || l.n_out != self.sizes[i + 1]
                || l.w.len() != l.n_in * l.n_out
                || l.b.len() != l.n_out
            {
                return Err(Error::Contract(format!("checkpoint layer {i} malformed")));
            }
        }
        if self.adam.len() != self.layers.len() {
            return Err(Error::Contract("checkpoint optimizer state mismatch".into()));
        }
        Ok(())
    }
}

/// Index of the largest value among `feasible` slots, lowest slot on ties.
pub fn argmax_over(values: &[f64], feasible: &[usize]) -> usize {
    assert!(!feasible.is_empty(), "feasible set must be non-empty");
    let mut best = feasible[0];
    for &i in &feasible[1..] {
        if values[i] > values[best] {
            best = i;
        }
    }
    best
}

/// Min-max scaling bounds for state features.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureBounds {
    pub e_min: f64,
    pub e_max: f64,
    pub tau_max: f64,
    pub k_max: f64,
    pub price_min: f64,
    pub price_max: f64,
    pub range: FeatureRange,
}

impl FeatureBounds {
    pub fn from_scenario(sc: &Scenario, price_min: f64, price_max: f64, range: FeatureRange) -> FeatureBounds {
        let tau_max = sc
            .schedule
            .periods
            .iter()
            .map(|p| p.t_d)
            .max()
            .unwrap_or(1) as f64;
        FeatureBounds {
            e_min: sc.e_min,
            e_max: sc.e_max,
            tau_max,
            k_max: (sc.num_periods() - 1).max(1) as f64,
            price_min,
            price_max,
            range,
        }
    }

    fn scale(&self, v: f64, lo: f64, hi: f64) -> f64 {
        let t = if hi - lo <= f64::EPSILON {
            0.5
        } else {
            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
        };
        match self.range {
            FeatureRange::Symmetric => 2.0 * t - 1.0,
            FeatureRange::Unit => t,
        }
    }

    /// Feature vector length for a window of `w_p` past prices.
    pub fn feature_len(&self, price_window: usize, with_option: bool) -> usize {
        4 + price_window + 1 + usize::from(with_option)
    }
}

/// Encodes a state (and, for the low-level network, the active charging
/// target) as normalized features: battery level, period flag, departure
/// countdown, period index, the price window, then the target.
pub fn encode_state(state: &EnvState, option: Option<f64>, b: &FeatureBounds) -> Vec<f64> {
    let mut out = Vec::with_capacity(b.feature_len(state.price_window.len() - 1, option.is_some()));
    out.push(b.scale(state.soc, b.e_min, b.e_max));
    out.push(b.scale(f64::from(state.period.flag()), 0.0, 1.0));
    out.push(b.scale(f64::from(state.steps_to_departure), 0.0, b.tau_max));
    out.push(b.scale(f64::from(state.period_index), 0.0, b.k_max));
    for &p in &state.price_window {
        out.push(b.scale(p, b.price_min, b.price_max));
    }
    if let Some(w) = option {
        out.push(b.scale(w, b.e_min, b.e_max));
    }
    out
}
