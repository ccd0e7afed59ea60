//! A small stack of LoRA-adapted linear layers with a loss head.
//!
//! Hidden layers apply the activation after the linear map; the last layer is
//! linear and feeds the head. Only the adapter factors are trainable and the
//! trainable vector is the per-layer `flatten_delta` layouts concatenated in
//! layer order.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::lora::LoraAdapter;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Head {
    #[default]
    Mse,
    SoftmaxXent,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative as a function of the pre-activation.
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Mse => "mse",
            Head::SoftmaxXent => "softmax_xent",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Parse(format!("unknown activation {other:?}"))),
        }
    }
}

impl FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Head::Mse),
            "softmax_xent" => Ok(Head::SoftmaxXent),
            other => Err(Error::Parse(format!("unknown head {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    /// Input dimension, hidden widths, output dimension.
    pub layer_dims: Vec<usize>,
    pub rank: usize,
    pub activation: Activation,
    pub head: Head,
    /// Std of the Gaussian `B` initialization.
    pub init_scale: f64,
    /// Multiplier on every low-rank term.
    pub lora_scale: f64,
    /// Base weights are `N(0, base_scale² / fan_in)`.
    pub base_scale: f64,
}

impl ModelSpec {
    pub fn new(layer_dims: Vec<usize>, rank: usize) -> Self {
        Self {
            layer_dims,
            rank,
            activation: Activation::Tanh,
            head: Head::Mse,
            init_scale: 0.02,
            lora_scale: 1.0,
            base_scale: 1.0,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn with_init_scale(mut self, init_scale: f64) -> Self {
        self.init_scale = init_scale;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    /// Largest rank every layer admits.
    pub fn max_rank(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0].min(w[1]))
            .min()
            .unwrap_or(0)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }

    /// `Σ (d·r + r·v)` over layers.
    pub fn trainable_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| self.rank * (w[0] + w[1]))
            .sum()
    }

    /// `Σ d·v` over layers.
    pub fn frozen_count(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "model needs at least one layer (two dims)".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::InvalidConfig("layer dims must be positive".into()));
        }
        let max = self.max_rank();
        if self.rank == 0 || self.rank > max {
            return Err(Error::RankOutOfRange {
                rank: self.rank,
                max,
            });
        }
        if !(self.init_scale > 0.0) || !self.init_scale.is_finite() {
            return Err(Error::InvalidConfig("init_scale must be positive".into()));
        }
        if !self.lora_scale.is_finite() || !self.base_scale.is_finite() {
            return Err(Error::InvalidConfig("scales must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    spec: ModelSpec,
    layers: Vec<LoraAdapter>,
    version: u64,
}

/// Activations kept by [`AdaptedModel::forward_loss`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    inputs: Vec<Array2<f64>>,
    projected: Vec<Array2<f64>>,
    pre_activations: Vec<Array2<f64>>,
    output_grad: Array2<f64>,
}

/// Draw the frozen base matrices for `spec` from `base_seed`.
pub fn draw_bases(spec: &ModelSpec, base_seed: u64) -> Vec<Array2<f64>> {
    let mut rng = seed::rng(base_seed);
    spec.layer_dims
        .windows(2)
        .map(|w| {
            let (v, d) = (w[0], w[1]);
            let std = spec.base_scale / (v as f64).sqrt();
            Array2::from_shape_simple_fn((d, v), || std * rng.sample::<f64, _>(StandardNormal))
        })
        .collect()
}

impl AdaptedModel {
    pub fn build(spec: ModelSpec, base_seed: u64, adapter_seed: u64) -> Result<Self> {
        spec.validate()?;
        let layers = draw_bases(&spec, base_seed)
            .into_iter()
            .enumerate()
            .map(|(l, base)| {
                LoraAdapter::init(
                    base,
                    spec.rank,
                    spec.init_scale,
                    seed::derive(adapter_seed, l as u64),
                )
                .map(|ad| ad.with_scale(spec.lora_scale))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            layers,
            version: 0,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LoraAdapter] {
        &self.layers
    }

    pub fn trainable_count(&self) -> usize {
        self.spec.trainable_count()
    }

    pub fn frozen_count(&self) -> usize {
        self.spec.frozen_count()
    }

    /// Copies of every frozen base matrix, for invariance checks.
    pub fn bases(&self) -> Vec<Array2<f64>> {
        self.layers.iter().map(|l| l.base().clone()).collect()
    }

    fn check_batch(&self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<()> {
        if x.nrows() == 0 {
            return Err(Error::DimensionMismatch {
                context: "batch size",
                expected: 1,
                got: 0,
            });
        }
        if x.ncols() != self.spec.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "model input",
                expected: self.spec.input_dim(),
                got: x.ncols(),
            });
        }
        if y.ncols() != self.spec.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "model target",
                expected: self.spec.output_dim(),
                got: y.ncols(),
            });
        }
        if y.nrows() != x.nrows() {
            return Err(Error::DimensionMismatch {
                context: "target rows",
                expected: x.nrows(),
                got: y.nrows(),
            });
        }
        Ok(())
    }

    /// Raw outputs (logits for the softmax head) for each row of `x`.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (mut out, _) = layer.forward_batch(h.view())?;
            if l < last {
                out.mapv_inplace(|v| self.spec.activation.apply(v));
            }
            h = out;
        }
        Ok(h)
    }

    /// Mean loss over the batch and the cache for [`AdaptedModel::backward`].
    pub fn forward_loss(
        &self,
        x: ArrayView2<f64>,
        y: ArrayView2<f64>,
    ) -> Result<(f64, ForwardCache)> {
        self.check_batch(x, y)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut projected = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let (out, proj) = layer.forward_batch(h.view())?;
            inputs.push(h);
            projected.push(proj);
            if l < last {
                h = out.mapv(|v| self.spec.activation.apply(v));
                pre_activations.push(out);
            } else {
                h = out;
            }
        }
        let (loss, output_grad) = head_loss(self.spec.head, h.view(), y);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok((
            loss,
            ForwardCache {
                version: self.version,
                inputs,
                projected,
                pre_activations,
                output_grad,
            },
        ))
    }

    /// Mean loss only.
    pub fn loss(&self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
        self.check_batch(x, y)?;
        let out = self.predict(x)?;
        let (loss, _) = head_loss(self.spec.head, out.view(), y);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok(loss)
    }

    /// Gradient of the mean loss with respect to the trainable vector.
    pub fn backward(&self, cache: &ForwardCache) -> Result<Vec<f64>> {
        if cache.version != self.version || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache);
        }
        let offsets = self.layer_offsets();
        let mut grad = vec![0.0; self.trainable_count()];
        let mut upstream = cache.output_grad.clone();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let g = layer.backward_batch(
                cache.inputs[l].view(),
                cache.projected[l].view(),
                upstream.view(),
            )?;
            let start = offsets[l];
            let nb = g.b.len();
            for (dst, src) in grad[start..start + nb].iter_mut().zip(g.b.iter()) {
                *dst = *src;
            }
            for (dst, src) in grad[start + nb..start + layer.delta_len()]
                .iter_mut()
                .zip(g.a.iter())
            {
                *dst = *src;
            }
            if l > 0 {
                let act = self.spec.activation;
                let mut next = g.input;
                Zip::from(&mut next)
                    .and(&cache.pre_activations[l - 1])
                    .for_each(|gx, &pre| *gx *= act.derivative(pre));
                upstream = next;
            }
        }
        Ok(grad)
    }

    fn layer_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.delta_len();
        }
        offsets
    }

    /// `θ ← θ − lr·grad` on the trainable vector.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.trainable_count() {
            return Err(Error::LengthMismatch {
                expected: self.trainable_count(),
                got: grad.len(),
            });
        }
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be non-negative, got {lr}"
            )));
        }
        if lr == 0.0 {
            return Ok(());
        }
        let mut start = 0;
        for layer in &mut self.layers {
            let n = layer.delta_len();
            layer.apply_step(&grad[start..start + n], lr);
            start += n;
        }
        self.version += 1;
        Ok(())
    }

    pub fn trainable_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_count());
        for layer in &self.layers {
            layer.write_delta(&mut out);
        }
        out
    }

    pub fn load_trainable(&mut self, vector: &[f64]) -> Result<()> {
        if vector.len() != self.trainable_count() {
            return Err(Error::LengthMismatch {
                expected: self.trainable_count(),
                got: vector.len(),
            });
        }
        let mut start = 0;
        for layer in &mut self.layers {
            let n = layer.delta_len();
            layer.load_delta(&vector[start..start + n])?;
            start += n;
        }
        self.version += 1;
        Ok(())
    }

    /// Checkpoint bytes: a text header describing the spec, a blank line, then
    /// the trainable vector as little-endian `f64`s.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let mut out = checkpoint_header(&self.spec).into_bytes();
        out.extend(crate::lora::delta_to_le_bytes(&self.trainable_vector()));
        out
    }

    /// Load a checkpoint written for an identical spec.
    pub fn load_checkpoint(&mut self, bytes: &[u8]) -> Result<()> {
        let header = checkpoint_header(&self.spec);
        if !bytes.starts_with(header.as_bytes()) {
            return Err(Error::Parse(
                "checkpoint header does not match model spec".into(),
            ));
        }
        let vector = crate::lora::delta_from_le_bytes(&bytes[header.len()..])?;
        self.load_trainable(&vector)
    }
}

fn checkpoint_header(spec: &ModelSpec) -> String {
    let dims: Vec<String> = spec.layer_dims.iter().map(ToString::to_string).collect();
    format!(
        "mira-checkpoint 1\ndims={}\nrank={}\nhead={}\nactivation={}\ncount={}\n\n",
        dims.join(","),
        spec.rank,
        spec.head,
        spec.activation,
        spec.trainable_count()
    )
}

/// Mean loss and its gradient with respect to the outputs.
fn head_loss(head: Head, out: ArrayView2<f64>, y: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = out.nrows() as f64;
    match head {
        Head::Mse => {
            let resid = &out - &y;
            let loss = resid.iter().map(|r| r * r).sum::<f64>() * 0.5 / n;
            (loss, resid / n)
        }
        Head::SoftmaxXent => {
            let mut grad = Array2::zeros(out.raw_dim());
            let mut total = 0.0;
            for ((logits, target), mut g) in out
                .axis_iter(Axis(0))
                .zip(y.axis_iter(Axis(0)))
                .zip(grad.axis_iter_mut(Axis(0)))
            {
                let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = logits.iter().map(|z| (z - max).exp()).sum();
                let log_norm = max + sum_exp.ln();
                let mass: f64 = target.sum();
                for ((gi, &z), &t) in g.iter_mut().zip(logits).zip(target) {
                    total += t * (log_norm - z);
                    *gi = ((z - log_norm).exp() * mass - t) / n;
                }
            }
            (total / n, grad)
        }
    }
}
