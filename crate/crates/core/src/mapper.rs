//! The fuzzy mapping: a small feed-forward network taking an entity embedding
//! to a fuzzy set embedding in `[0, 1]^d`.
//!
//! Hidden layers use `tanh`; the last layer is followed by the output
//! normalisation, which is what keeps every output a valid [`FuzzyVec`].

use std::fmt;

use rand::Rng;
use thiserror::Error;

use crate::algebra::{sigmoid, FuzzyVec};

/// Variance floor inside layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapperError {
    #[error("input has dimension {got}, expected {expected}")]
    InputDimension { expected: usize, got: usize },

    #[error("upstream gradient has dimension {got}, expected {expected}")]
    UpstreamDimension { expected: usize, got: usize },

    #[error("non-finite value produced at layer {layer}")]
    NonFinite { layer: usize },

    #[error("invalid architecture: {0}")]
    Architecture(String),
}

pub type Result<T> = std::result::Result<T, MapperError>;

/// Precomputed entity vector, e.g. from a pretrained language model.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityEmbedding(Vec<f64>);

impl EntityEmbedding {
    pub fn new(values: Vec<f64>) -> std::result::Result<Self, String> {
        if values.is_empty() {
            return Err("entity embedding must not be empty".into());
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(format!("entity embedding has non-finite entry at {i}"));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputNorm {
    #[default]
    Sigmoid,
    Clamp01,
    /// Layer normalisation (no affine part) followed by a sigmoid.
    LayerNormSigmoid,
}

impl fmt::Display for OutputNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutputNorm::Sigmoid => "sigmoid",
            OutputNorm::Clamp01 => "clamp01",
            OutputNorm::LayerNormSigmoid => "layernorm-sigmoid",
        })
    }
}

impl std::str::FromStr for OutputNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(OutputNorm::Sigmoid),
            "clamp01" | "clamp" => Ok(OutputNorm::Clamp01),
            "layernorm-sigmoid" | "layernorm" => Ok(OutputNorm::LayerNormSigmoid),
            other => Err(format!("unknown output normalization '{other}'")),
        }
    }
}

/// Dense layer, weights stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, weights: vec![0.0; in_dim * out_dim], bias: vec![0.0; out_dim] }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` for weights and bias.
    pub fn random<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || rng.random_range(-bound..=bound);
        let weights = (0..in_dim * out_dim).map(|_| draw()).collect();
        let bias = (0..out_dim).map(|_| draw()).collect();
        Self { in_dim, out_dim, weights, bias }
    }

    fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapperParams {
    pub layers: Vec<Layer>,
    pub output_norm: OutputNorm,
}

impl MapperParams {
    fn dims(input_dim: usize, hidden: &[usize], d: usize) -> Vec<usize> {
        std::iter::once(input_dim).chain(hidden.iter().copied()).chain([d]).collect()
    }

    pub fn random<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        d: usize,
        output_norm: OutputNorm,
        rng: &mut R,
    ) -> Self {
        let dims = Self::dims(input_dim, hidden, d);
        let layers = dims.windows(2).map(|w| Layer::random(w[0], w[1], rng)).collect();
        Self { layers, output_norm }
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], d: usize, output_norm: OutputNorm) -> Self {
        let dims = Self::dims(input_dim, hidden, d);
        let layers = dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect();
        Self { layers, output_norm }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(Layer::n_params).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(MapperError::Architecture("no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.in_dim == 0 || l.out_dim == 0 {
                return Err(MapperError::Architecture(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.in_dim * l.out_dim || l.bias.len() != l.out_dim {
                return Err(MapperError::Architecture(format!("layer {i} has inconsistent shapes")));
            }
            if !l.weights.iter().chain(&l.bias).all(|v| v.is_finite()) {
                return Err(MapperError::NonFinite { layer: i });
            }
        }
        for (i, w) in self.layers.windows(2).enumerate() {
            if w[0].out_dim != w[1].in_dim {
                return Err(MapperError::Architecture(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    w[0].out_dim,
                    i + 1,
                    w[1].in_dim
                )));
            }
        }
        Ok(())
    }

    /// Appends every parameter to `out`: per layer, weights then bias.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    /// Inverse of [`flatten_into`](Self::flatten_into); returns the number of values consumed.
    pub fn assign_from(&mut self, flat: &[f64]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        at
    }
}

/// Gradients mirroring the shapes of [`MapperParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<Layer>,
    pub input: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros_like(params: &MapperParams) -> Self {
        Self {
            layers: params.layers.iter().map(|l| Layer::zeros(l.in_dim, l.out_dim)).collect(),
            input: vec![0.0; params.input_dim()],
        }
    }

    /// Adds `other`'s parameter gradients into `self`; input gradients are not summed.
    pub fn accumulate(&mut self, other: &GradientBundle) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(&l.bias)).chain(&self.input).all(|v| v.is_finite())
    }
}

/// Intermediate values kept by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input to each layer (`activations[0]` is the entity embedding).
    activations: Vec<Vec<f64>>,
    /// Pre-activation of the last layer.
    logits: Vec<f64>,
    /// Layer-normalised logits, for `LayerNormSigmoid`.
    normalized: Vec<f64>,
    inv_std: f64,
    output: Vec<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> FuzzyVec {
        FuzzyVec::from_unit_values(self.output.clone())
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
}

fn check_finite(values: &[f64], layer: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MapperError::NonFinite { layer })
    }
}

pub fn forward(x: &[f64], params: &MapperParams) -> Result<ForwardTrace> {
    if x.len() != params.input_dim() {
        return Err(MapperError::InputDimension { expected: params.input_dim(), got: x.len() });
    }
    let last = params.layers.len() - 1;
    let mut activations = Vec::with_capacity(params.layers.len());
    let mut current = x.to_vec();
    let mut logits = Vec::new();
    for (i, layer) in params.layers.iter().enumerate() {
        let z = layer.apply(&current);
        check_finite(&z, i)?;
        activations.push(std::mem::take(&mut current));
        if i == last {
            logits = z;
        } else {
            current = z.into_iter().map(f64::tanh).collect();
        }
    }
    let (normalized, inv_std, output): (Vec<f64>, f64, Vec<f64>) = match params.output_norm {
        OutputNorm::Sigmoid => (Vec::new(), 0.0, logits.iter().map(|&z| sigmoid(z)).collect()),
        OutputNorm::Clamp01 => (Vec::new(), 0.0, logits.iter().map(|&z| z.clamp(0.0, 1.0)).collect()),
        OutputNorm::LayerNormSigmoid => {
            let n = logits.len() as f64;
            let mean = logits.iter().sum::<f64>() / n;
            let var = logits.iter().map(|z| (z - mean) * (z - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let normalized: Vec<f64> = logits.iter().map(|z| (z - mean) * inv_std).collect();
            let output = normalized.iter().map(|&v| sigmoid(v)).collect();
            (normalized, inv_std, output)
        }
    };
    check_finite(&output, last)?;
    Ok(ForwardTrace { activations, logits, normalized, inv_std, output })
}

/// `M(x; θ)`.
pub fn map_entity(x: &[f64], params: &MapperParams) -> Result<FuzzyVec> {
    forward(x, params).map(|t| t.output())
}

/// Gradients of `upstream · M(x; θ)` with respect to θ and `x`.
pub fn map_entity_backward(x: &[f64], params: &MapperParams, upstream: &[f64]) -> Result<GradientBundle> {
    let trace = forward(x, params)?;
    backward(&trace, params, upstream)
}

pub fn backward(trace: &ForwardTrace, params: &MapperParams, upstream: &[f64]) -> Result<GradientBundle> {
    let d = params.output_dim();
    if upstream.len() != d {
        return Err(MapperError::UpstreamDimension { expected: d, got: upstream.len() });
    }
    // gradient w.r.t. the last layer's pre-activation
    let mut delta: Vec<f64> = match params.output_norm {
        OutputNorm::Sigmoid => trace.output.iter().zip(upstream).map(|(&s, &g)| g * s * (1.0 - s)).collect(),
        OutputNorm::Clamp01 => {
            trace.logits.iter().zip(upstream).map(|(&z, &g)| if z > 0.0 && z < 1.0 { g } else { 0.0 }).collect()
        }
        OutputNorm::LayerNormSigmoid => {
            let g_hat: Vec<f64> = trace.output.iter().zip(upstream).map(|(&s, &g)| g * s * (1.0 - s)).collect();
            let n = d as f64;
            let mean_g = g_hat.iter().sum::<f64>() / n;
            let mean_gx = g_hat.iter().zip(&trace.normalized).map(|(g, x)| g * x).sum::<f64>() / n;
            g_hat.iter().zip(&trace.normalized).map(|(g, xh)| trace.inv_std * (g - mean_g - xh * mean_gx)).collect()
        }
    };

    let mut grads: Vec<Layer> = Vec::with_capacity(params.layers.len());
    let mut input_grad = Vec::new();
    for (i, layer) in params.layers.iter().enumerate().rev() {
        let a = &trace.activations[i];
        let mut g = Layer::zeros(layer.in_dim, layer.out_dim);
        for (o, &dz) in delta.iter().enumerate() {
            g.bias[o] = dz;
            if dz != 0.0 {
                let row = &mut g.weights[o * layer.in_dim..(o + 1) * layer.in_dim];
                row.iter_mut().zip(a).for_each(|(w, &ai)| *w = dz * ai);
            }
        }
        let mut da = vec![0.0; layer.in_dim];
        for (row, &dz) in layer.weights.chunks_exact(layer.in_dim).zip(&delta) {
            if dz != 0.0 {
                da.iter_mut().zip(row).for_each(|(acc, w)| *acc += w * dz);
            }
        }
        check_finite(&da, i)?;
        grads.push(g);
        if i == 0 {
            input_grad = da;
        } else {
            // `a` is tanh of the previous pre-activation
            delta = da.iter().zip(a).map(|(g, t)| g * (1.0 - t * t)).collect();
        }
    }
    grads.reverse();
    Ok(GradientBundle { layers: grads, input: input_grad })
}
