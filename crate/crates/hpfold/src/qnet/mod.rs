//! Transformer-based dueling Q-network.
//!
//! The network maps a flat conformation observation to five Q-values:
//! residue tokens (coordinates, type embedding, normalized index) are
//! projected to the model width, sinusoidal positional encodings are
//! added, a learned CLS token is prepended, and the sequence runs through
//! post-norm encoder layers. The CLS hidden state feeds a dueling head,
//! Q(s,a) = V(s) + A(s,a) - mean_a' A(s,a').
//!
//! Everything is implemented directly on `ndarray` buffers with
//! hand-derived backward passes; parameters live in one flat vector so the
//! optimizer, target sync, checkpointing, and finite-difference checks all
//! see the same layout.

mod backward;
mod checkpoint;
mod forward;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, ExtraBlock};
pub use forward::ForwardCache;

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::env::{Action, ActionMask, Observation, ACTION_COUNT, ALL_ACTIONS};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid network config: {0}")]
    BadConfig(String),
    #[error("malformed observation: {0}")]
    BadObservation(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("all actions masked; the episode should have terminated")]
    AllMasked,
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Embedding width of the encoder.
    pub d_model: usize,
    /// Encoder layer count.
    pub n_layers: usize,
    /// Attention head count; must divide `d_model`.
    pub n_heads: usize,
    /// Feed-forward hidden width.
    pub d_ff: usize,
    /// Residue-type embedding width.
    pub d_type: usize,
    /// Size of the action space (always 5 here).
    pub action_count: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            d_model: 64,
            n_layers: 1,
            n_heads: 4,
            d_ff: 128,
            d_type: 8,
            action_count: ACTION_COUNT,
        }
    }
}

impl NetworkConfig {
    /// Small network used by smoke tests and short chains.
    pub fn tiny() -> Self {
        NetworkConfig {
            d_model: 32,
            n_layers: 1,
            n_heads: 2,
            d_ff: 64,
            d_type: 4,
            action_count: ACTION_COUNT,
        }
    }

    pub fn token_width(&self) -> usize {
        4 + self.d_type
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 || self.d_type == 0 {
            return Err(NetError::BadConfig("all widths must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(NetError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(NetError::BadConfig(format!(
                "d_model {} must be even for the sinusoidal encoding",
                self.d_model
            )));
        }
        if self.action_count != ACTION_COUNT {
            return Err(NetError::BadConfig(format!(
                "action_count {} unsupported (environment has {ACTION_COUNT})",
                self.action_count
            )));
        }
        Ok(())
    }
}

/// Initialization family of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ParamKind {
    /// Linear map: uniform in +-1/sqrt(fan_in).
    Projection,
    /// Zero-initialized.
    Bias,
    /// One-initialized (layer-norm gain).
    Gain,
    /// Normal(0, 1) * 0.02 (CLS, type table).
    Embedding,
}

#[derive(Debug, Clone)]
pub(crate) struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerIds {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
}

/// Flat layout of every learnable tensor: entry metadata plus fast ids.
#[derive(Debug, Clone)]
pub(crate) struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
    pub type_embed: usize,
    pub in_w: usize,
    pub in_b: usize,
    pub cls: usize,
    pub layers: Vec<LayerIds>,
    pub value_w: usize,
    pub value_b: usize,
    pub adv_w: usize,
    pub adv_b: usize,
}

impl ParamLayout {
    fn build(config: &NetworkConfig) -> ParamLayout {
        let d = config.d_model;
        let mut entries: Vec<ParamEntry> = Vec::new();
        let mut offset = 0usize;
        let mut push = |name: String, rows: usize, cols: usize, kind: ParamKind| -> usize {
            let id = entries.len();
            entries.push(ParamEntry {
                name,
                offset,
                rows,
                cols,
                kind,
            });
            offset += rows * cols;
            id
        };

        let type_embed = push("type_embed".into(), 2, config.d_type, ParamKind::Embedding);
        let in_w = push(
            "input_proj.weight".into(),
            config.token_width(),
            d,
            ParamKind::Projection,
        );
        let in_b = push("input_proj.bias".into(), 1, d, ParamKind::Bias);
        let cls = push("cls".into(), 1, d, ParamKind::Embedding);

        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            layers.push(LayerIds {
                wq: push(p("attn.wq"), d, d, ParamKind::Projection),
                bq: push(p("attn.bq"), 1, d, ParamKind::Bias),
                wk: push(p("attn.wk"), d, d, ParamKind::Projection),
                bk: push(p("attn.bk"), 1, d, ParamKind::Bias),
                wv: push(p("attn.wv"), d, d, ParamKind::Projection),
                bv: push(p("attn.bv"), 1, d, ParamKind::Bias),
                wo: push(p("attn.wo"), d, d, ParamKind::Projection),
                bo: push(p("attn.bo"), 1, d, ParamKind::Bias),
                ln1_g: push(p("ln1.gain"), 1, d, ParamKind::Gain),
                ln1_b: push(p("ln1.bias"), 1, d, ParamKind::Bias),
                w1: push(p("ffn.w1"), d, config.d_ff, ParamKind::Projection),
                b1: push(p("ffn.b1"), 1, config.d_ff, ParamKind::Bias),
                w2: push(p("ffn.w2"), config.d_ff, d, ParamKind::Projection),
                b2: push(p("ffn.b2"), 1, d, ParamKind::Bias),
                ln2_g: push(p("ln2.gain"), 1, d, ParamKind::Gain),
                ln2_b: push(p("ln2.bias"), 1, d, ParamKind::Bias),
            });
        }

        let value_w = push("value.weight".into(), d, 1, ParamKind::Projection);
        let value_b = push("value.bias".into(), 1, 1, ParamKind::Bias);
        let adv_w = push("advantage.weight".into(), d, ACTION_COUNT, ParamKind::Projection);
        let adv_b = push("advantage.bias".into(), 1, ACTION_COUNT, ParamKind::Bias);

        ParamLayout {
            total: offset,
            entries,
            type_embed,
            in_w,
            in_b,
            cls,
            layers,
            value_w,
            value_b,
            adv_w,
            adv_b,
        }
    }
}

/// Float type the network math runs in. Training uses `f32`; verification
/// against finite differences uses `f64`.
pub trait NetFloat: ndarray::NdFloat + num_traits::Float {
    fn from_f64(v: f64) -> Self;
}

impl NetFloat for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl NetFloat for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// The Q-network: a config, a shared layout, and one flat parameter
/// vector.
#[derive(Debug, Clone)]
pub struct QNetwork<F: NetFloat> {
    config: NetworkConfig,
    pub(crate) layout: Arc<ParamLayout>,
    data: Vec<F>,
}

impl<F: NetFloat> QNetwork<F> {
    /// Seeded initialization: projections uniform in +-1/sqrt(fan_in),
    /// biases zero, layer-norm gains one, CLS and type table N(0,1)*0.02.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let layout = Arc::new(ParamLayout::build(&config));
        let mut data = vec![F::zero(); layout.total];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        for entry in &layout.entries {
            let slice = &mut data[entry.offset..entry.offset + entry.len()];
            match entry.kind {
                ParamKind::Projection => {
                    let scale = 1.0 / (entry.rows as f64).sqrt();
                    for v in slice {
                        *v = F::from_f64((rng.random::<f64>() * 2.0 - 1.0) * scale);
                    }
                }
                ParamKind::Bias => {}
                ParamKind::Gain => slice.fill(F::one()),
                ParamKind::Embedding => {
                    for v in slice {
                        let n: f64 = rng.sample(StandardNormal);
                        *v = F::from_f64(n * 0.02);
                    }
                }
            }
        }
        Ok(QNetwork {
            config,
            layout,
            data,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    /// Flat parameter vector (optimizer surface).
    pub fn params(&self) -> &[F] {
        &self.data
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    /// Bitwise copy of another network's parameters (target sync).
    pub fn copy_params_from(&mut self, other: &QNetwork<F>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.copy_from_slice(&other.data);
    }

    /// Zero buffer shaped like the parameter vector (gradient storage).
    pub fn zero_gradients(&self) -> Vec<F> {
        vec![F::zero(); self.data.len()]
    }

    pub(crate) fn view(&self, id: usize) -> ArrayView2<'_, F> {
        let e = &self.layout.entries[id];
        ArrayView2::from_shape((e.rows, e.cols), &self.data[e.offset..e.offset + e.len()])
            .expect("layout shapes are consistent")
    }

    /// Named parameter tensor by layout name (used by tests and tools).
    pub fn tensor(&self, name: &str) -> Option<ArrayView2<'_, F>> {
        let id = self.layout.entries.iter().position(|e| e.name == name)?;
        Some(self.view(id))
    }

    /// Mutable named tensor.
    pub fn tensor_mut(&mut self, name: &str) -> Option<ArrayViewMut2<'_, F>> {
        let id = self.layout.entries.iter().position(|e| e.name == name)?;
        let e = self.layout.entries[id].clone();
        Some(
            ArrayViewMut2::from_shape(
                (e.rows, e.cols),
                &mut self.data[e.offset..e.offset + e.len()],
            )
            .expect("layout shapes are consistent"),
        )
    }
}

/// Sinusoidal positional encoding table: entry (i, 2k) = sin(i / 10000^(2k/d)),
/// entry (i, 2k+1) = cos of the same angle.
pub fn positional_encoding<F: NetFloat>(len: usize, d_model: usize) -> Array2<F> {
    assert!(len >= 1, "need at least one position");
    assert!(d_model >= 2 && d_model.is_multiple_of(2), "d_model must be even and >= 2");
    let mut pe = Array2::zeros((len, d_model));
    for i in 0..len {
        for k in 0..d_model / 2 {
            let angle = i as f64 / 10000f64.powf(2.0 * k as f64 / d_model as f64);
            pe[[i, 2 * k]] = F::from_f64(angle.sin());
            pe[[i, 2 * k + 1]] = F::from_f64(angle.cos());
        }
    }
    pe
}

/// Highest-Q permitted action; ties break toward the lowest action code.
pub fn masked_argmax<F: PartialOrd + Copy>(
    q_values: &[F],
    mask: &ActionMask,
) -> Result<Action, NetError> {
    debug_assert_eq!(q_values.len(), ACTION_COUNT);
    let mut best: Option<(Action, F)> = None;
    for action in ALL_ACTIONS {
        if !mask.allows(action) {
            continue;
        }
        let q = q_values[action.code() as usize];
        match best {
            Some((_, bq)) if q <= bq => {}
            _ => best = Some((action, q)),
        }
    }
    best.map(|(a, _)| a).ok_or(NetError::AllMasked)
}

/// Loss, per-sample TD errors, and parameter gradients for one weighted
/// squared-error batch.
#[derive(Debug, Clone)]
pub struct LossGrad<F> {
    /// Sum over the batch of w_j * delta_j^2.
    pub loss: F,
    /// delta_j = y_j - Q(s_j, a_j).
    pub td_errors: Vec<F>,
    /// Q(s_j, a_j) as predicted.
    pub q_taken: Vec<F>,
    /// Flat gradient aligned with `QNetwork::params`.
    pub gradients: Vec<F>,
}

impl<F: NetFloat> QNetwork<F> {
    /// Weighted squared-error loss of the batch and its exact gradient
    /// with respect to every parameter.
    pub fn loss_and_gradient(
        &self,
        observations: &[&Observation],
        actions: &[Action],
        targets: &[F],
        weights: &[F],
    ) -> Result<LossGrad<F>, NetError> {
        debug_assert_eq!(observations.len(), actions.len());
        debug_assert_eq!(observations.len(), targets.len());
        debug_assert_eq!(observations.len(), weights.len());
        let (q, cache) = self.forward_cached(observations)?;
        let batch = observations.len();
        let mut d_q = Array2::<F>::zeros((batch, ACTION_COUNT));
        let mut loss = F::zero();
        let mut td_errors = Vec::with_capacity(batch);
        let mut q_taken = Vec::with_capacity(batch);
        let two = F::from_f64(2.0);
        for j in 0..batch {
            let a = actions[j].code() as usize;
            let predicted = q[[j, a]];
            let delta = targets[j] - predicted;
            loss += weights[j] * delta * delta;
            d_q[[j, a]] = -two * weights[j] * delta;
            td_errors.push(delta);
            q_taken.push(predicted);
        }
        if !loss.is_finite() {
            return Err(NetError::NonFinite("batch loss".into()));
        }
        let gradients = self.backward(&cache, &d_q);
        Ok(LossGrad {
            loss,
            td_errors,
            q_taken,
            gradients,
        })
    }
}
