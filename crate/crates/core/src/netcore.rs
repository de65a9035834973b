//! Dense layers with hand-written forward/backward passes and Adam.
//!
//! Parameters live in flat `f64` buffers; an [`MlpLayout`] describes how a
//! buffer splits into per-layer `weights` (row-major, out x in) followed by
//! `biases`. The same layout code serves owned networks and the SIREN
//! parameters emitted by the hypernetwork.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("tape holds {have} layers, network has {want}")]
    TapeMismatch { have: usize, want: usize },
    #[error("non-finite gradient at parameter {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    /// `sin(omega * (Wx + b))`
    Sine { omega: f64 },
    Relu,
    LeakyRelu { slope: f64 },
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Sine { omega } => (omega * z).sin(),
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Activation::Linear => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Sine { omega } => omega * (omega * z).cos(),
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu { slope } => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Linear => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self { inputs, outputs, activation }
    }

    pub fn weight_count(&self) -> usize {
        self.inputs * self.outputs
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.outputs
    }
}

/// A layer borrowed from a flat parameter buffer.
#[derive(Debug, Clone)]
pub struct DenseLayer<'a> {
    pub weights: ArrayView2<'a, f64>,
    pub biases: ArrayView1<'a, f64>,
    pub activation: Activation,
}

impl<'a> DenseLayer<'a> {
    pub fn from_flat(spec: &LayerSpec, params: &'a [f64]) -> Self {
        let (w, b) = params[..spec.param_count()].split_at(spec.weight_count());
        Self {
            weights: ArrayView2::from_shape((spec.outputs, spec.inputs), w).expect("layout"),
            biases: ArrayView1::from(b),
            activation: spec.activation,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub layers: Vec<LayerSpec>,
}

impl MlpLayout {
    pub fn new(layers: Vec<LayerSpec>) -> Self {
        Self { layers }
    }

    /// `dims = [in, h1, ..., out]`; `hidden` applies to all but the last layer.
    pub fn chain(dims: &[usize], hidden: Activation, last: Activation) -> Self {
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| LayerSpec::new(dims[i], dims[i + 1], if i + 1 == n { last } else { hidden }))
            .collect();
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    /// Offset of each layer's block in the flat buffer.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.layers
            .iter()
            .map(|l| {
                let o = off;
                off += l.param_count();
                o
            })
            .collect()
    }

    pub fn views<'a>(&self, params: &'a [f64]) -> Vec<DenseLayer<'a>> {
        assert_eq!(params.len(), self.param_count(), "parameter buffer size");
        self.layers
            .iter()
            .zip(self.offsets())
            .map(|(spec, off)| DenseLayer::from_flat(spec, &params[off..]))
            .collect()
    }
}

/// Cached per-layer inputs and pre-activations of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.pre.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pre.is_empty()
    }
}

/// Batched forward pass; rows of `input` are independent samples.
pub fn forward(
    layers: &[DenseLayer<'_>],
    input: ArrayView2<'_, f64>,
    mut tape: Option<&mut Tape>,
) -> Result<Array2<f64>, NetError> {
    if let Some(t) = tape.as_deref_mut() {
        *t = Tape::new();
    }
    let mut x = input.to_owned();
    for (i, layer) in layers.iter().enumerate() {
        if x.ncols() != layer.inputs() {
            return Err(NetError::Shape(format!(
                "layer {i} expects {} inputs, got {}",
                layer.inputs(),
                x.ncols()
            )));
        }
        let mut z = x.dot(&layer.weights.t());
        z += &layer.biases;
        let act = layer.activation;
        let y = z.mapv(|v| act.apply(v));
        if let Some(t) = tape.as_deref_mut() {
            t.inputs.push(x);
            t.pre.push(z);
        }
        x = y;
    }
    Ok(x)
}

/// Reverse pass over a tape produced by [`forward`] on the same layers.
///
/// Parameter gradients are *added* into `param_grads` (flat, same layout as
/// the layers) when given. Returns the gradient with respect to the input.
pub fn backward(
    layers: &[DenseLayer<'_>],
    tape: &mut Tape,
    output_grad: ArrayView2<'_, f64>,
    mut param_grads: Option<&mut [f64]>,
) -> Result<Array2<f64>, NetError> {
    if tape.consumed {
        return Err(NetError::TapeConsumed);
    }
    if tape.len() != layers.len() {
        return Err(NetError::TapeMismatch { have: tape.len(), want: layers.len() });
    }
    tape.consumed = true;
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0;
    for l in layers {
        offsets.push(off);
        off += l.outputs() * (l.inputs() + 1);
    }
    if let Some(g) = param_grads.as_deref() {
        if g.len() != off {
            return Err(NetError::Shape(format!("gradient buffer {} != {}", g.len(), off)));
        }
    }
    let mut grad = output_grad.to_owned();
    for i in (0..layers.len()).rev() {
        let layer = &layers[i];
        let z = &tape.pre[i];
        if grad.dim() != z.dim() {
            return Err(NetError::Shape(format!(
                "layer {i} output grad {:?} vs {:?}",
                grad.dim(),
                z.dim()
            )));
        }
        let act = layer.activation;
        if act != Activation::Linear {
            ndarray::Zip::from(&mut grad).and(z).for_each(|g, &zv| *g *= act.derivative(zv));
        }
        if let Some(g) = param_grads.as_deref_mut() {
            let (o, n) = (layer.outputs(), layer.inputs());
            let block = &mut g[offsets[i]..offsets[i] + o * (n + 1)];
            let (gw, gb) = block.split_at_mut(o * n);
            let dw = grad.t().dot(&tape.inputs[i]);
            for (dst, src) in gw.iter_mut().zip(dw.iter()) {
                *dst += src;
            }
            for (dst, src) in gb.iter_mut().zip(grad.sum_axis(Axis(0)).iter()) {
                *dst += src;
            }
        }
        grad = grad.dot(&layer.weights);
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1.0e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { config, m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Parameters are untouched if any
    /// gradient entry is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<(), NetError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NetError::Shape(format!(
                "adam state {} vs params {} / grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(NetError::NonFinite { index });
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / c1;
            let vhat = *v / c2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// SIREN scheme: first layer `U(-1/in, 1/in)`, later layers
    /// `U(-sqrt(6/in)/omega, sqrt(6/in)/omega)`.
    Siren { omega: f64 },
    /// `U(-sqrt(6/in), sqrt(6/in))`, for ReLU layers.
    KaimingUniform,
    /// `U(-1/sqrt(in), 1/sqrt(in))`.
    Fan,
}

/// Weight bound for layer `index` of a network under `init`.
pub fn weight_bound(init: Init, index: usize, inputs: usize) -> f64 {
    let n = inputs as f64;
    match init {
        Init::Siren { omega } => {
            if index == 0 {
                1.0 / n
            } else {
                (6.0 / n).sqrt() / omega
            }
        }
        Init::KaimingUniform => (6.0 / n).sqrt(),
        Init::Fan => 1.0 / n.sqrt(),
    }
}

/// Fresh parameters for `layout`. Biases are always `U(-1/sqrt(in), 1/sqrt(in))`.
pub fn init_params<R: Rng + ?Sized>(layout: &MlpLayout, init: Init, rng: &mut R) -> Vec<f64> {
    let mut out = Vec::with_capacity(layout.param_count());
    for (i, spec) in layout.layers.iter().enumerate() {
        let wb = weight_bound(init, i, spec.inputs);
        out.extend((0..spec.weight_count()).map(|_| rng.random_range(-wb..=wb)));
        let bb = 1.0 / (spec.inputs as f64).sqrt();
        out.extend((0..spec.outputs).map(|_| rng.random_range(-bb..=bb)));
    }
    out
}
