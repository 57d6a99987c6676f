//! Minimal differentiable classifier: a fully connected MLP trained with
//! softmax cross-entropy on prior-adjusted logits.
//!
//! Parameters live in one flat vector. Layers are laid out in order, and each
//! layer stores its weight matrix row-major with shape `(out, in)` followed by
//! its bias of length `out`. Aggregation relies on this layout being identical
//! for every client.

use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    layer_widths: Vec<usize>,
    activation: Activation,
}

impl MlpArchitecture {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidArchitecture(format!(
                "need at least input and output widths, got {layer_widths:?}"
            )));
        }
        if layer_widths.contains(&0) {
            return Err(Error::InvalidArchitecture(format!(
                "all widths must be >= 1, got {layer_widths:?}"
            )));
        }
        Ok(Self {
            layer_widths,
            activation,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().expect("validated non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.layer_widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// `(weight offset, bias offset, fan_in, fan_out)` for each layer.
    fn layer_offsets(&self) -> Vec<(usize, usize, usize, usize)> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset;
                let bias = offset + fan_in * fan_out;
                offset = bias + fan_out;
                (weights, bias, fan_in, fan_out)
            })
            .collect()
    }

    fn check_params(&self, params: &ParameterVector) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                expected: self.num_params(),
                actual: params.len(),
                context: "parameter vector",
            });
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
                context: "feature vector",
            });
        }
        Ok(())
    }
}

/// Flat model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    values: Vec<f64>,
}

/// Flat gradient with the same layout as [`ParameterVector`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    values: Vec<f64>,
}

macro_rules! flat_vector {
    ($ty:ident) => {
        impl $ty {
            pub fn new(values: Vec<f64>) -> Self {
                Self { values }
            }

            pub fn zeros(len: usize) -> Self {
                Self {
                    values: vec![0.0; len],
                }
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.values
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.values
            }

            pub fn norm(&self) -> f64 {
                self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
            }

            pub fn is_finite(&self) -> bool {
                self.values.iter().all(|v| v.is_finite())
            }
        }

        impl From<Vec<f64>> for $ty {
            fn from(values: Vec<f64>) -> Self {
                Self { values }
            }
        }
    };
}

flat_vector!(ParameterVector);
flat_vector!(GradientVector);

impl ParameterVector {
    /// `self + scale * direction`.
    pub fn offset(&self, direction: &[f64], scale: f64) -> ParameterVector {
        debug_assert_eq!(self.values.len(), direction.len());
        ParameterVector::new(self.values.iter().zip(direction).map(|(p, d)| p + scale * d).collect())
    }
}

/// Class prior probabilities used by logit adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPriors {
    pi: Vec<f64>,
}

impl ClassPriors {
    pub fn new(pi: Vec<f64>) -> Result<Self> {
        if pi.is_empty() {
            return Err(Error::InvalidArgument("priors must be non-empty".into()));
        }
        if pi.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "priors must be positive and finite, got {pi:?}"
            )));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("priors must sum to 1, got {total}")));
        }
        Ok(Self { pi })
    }

    pub fn uniform(num_classes: usize) -> Self {
        Self {
            pi: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    /// Laplace-smoothed label frequencies, so classes absent from a shard
    /// still get a positive prior.
    pub fn from_labels(labels: impl IntoIterator<Item = usize>, num_classes: usize) -> Self {
        let mut counts = vec![1.0; num_classes];
        for y in labels {
            counts[y] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        Self {
            pi: counts.into_iter().map(|c| c / total).collect(),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.pi
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }
}

/// Fan-in scaled Gaussian weights (He for ReLU, LeCun for tanh), zero biases.
pub fn init_params(arch: &MlpArchitecture, seed: u64) -> ParameterVector {
    let mut rng = SimRng::seed_from_u64(seed);
    let mut values = vec![0.0; arch.num_params()];
    let gain = match arch.activation() {
        Activation::Relu => 2.0,
        Activation::Tanh => 1.0,
    };
    for (w_off, _, fan_in, fan_out) in arch.layer_offsets() {
        let std = (gain / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("std is positive");
        for v in &mut values[w_off..w_off + fan_in * fan_out] {
            *v = normal.sample(&mut rng);
        }
    }
    ParameterVector::new(values)
}

/// Per-layer pre-activations and activations for one sample.
struct Trace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

fn forward_trace(arch: &MlpArchitecture, params: &[f64], x: &[f64]) -> Trace {
    let layers = arch.layer_offsets();
    let last = layers.len() - 1;
    let mut pre = Vec::with_capacity(layers.len());
    let mut post: Vec<Vec<f64>> = Vec::with_capacity(layers.len() + 1);
    post.push(x.to_vec());
    for (l, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate() {
        let input = &post[l];
        let weights = &params[w_off..w_off + fan_in * fan_out];
        let z: Vec<f64> = (0..fan_out)
            .map(|o| {
                let row = &weights[o * fan_in..(o + 1) * fan_in];
                params[b_off + o] + row.iter().zip(input).map(|(w, a)| w * a).sum::<f64>()
            })
            .collect();
        let a = if l == last {
            z.clone()
        } else {
            z.iter().map(|&v| arch.activation().apply(v)).collect()
        };
        pre.push(z);
        post.push(a);
    }
    Trace { pre, post }
}

pub fn forward(arch: &MlpArchitecture, params: &ParameterVector, x: &[f64]) -> Result<Vec<f64>> {
    arch.check_params(params)?;
    arch.check_input(x)?;
    let mut trace = forward_trace(arch, params.as_slice(), x);
    let logits = trace.post.pop().expect("at least one layer");
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(logits)
}

/// Training-time logit adjustment: `z_c + tau * ln(pi_c)`.
pub fn adjust_logits(logits: &[f64], priors: &ClassPriors, tau: f64) -> Vec<f64> {
    logits
        .iter()
        .zip(priors.as_slice())
        .map(|(z, p)| z + tau * p.ln())
        .collect()
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in z.iter_mut() {
        *v /= total;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    p
}

/// `-log softmax(logits)[y]`, computed with max subtraction.
pub fn ce_loss(logits: &[f64], y: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    (lse - logits[y]).max(0.0)
}

fn check_batch(arch: &MlpArchitecture, batch: &[&Sample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    for s in batch {
        arch.check_input(&s.x)?;
        if s.y >= arch.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                s.y,
                arch.num_classes()
            )));
        }
    }
    Ok(())
}

/// Mean adjusted cross-entropy over the batch.
pub fn batch_loss(
    arch: &MlpArchitecture,
    params: &ParameterVector,
    batch: &[&Sample],
    priors: &ClassPriors,
    tau: f64,
) -> Result<f64> {
    arch.check_params(params)?;
    check_batch(arch, batch)?;
    let total: f64 = batch
        .iter()
        .map(|s| {
            let trace = forward_trace(arch, params.as_slice(), &s.x);
            let logits = trace.post.last().expect("output layer");
            ce_loss(&adjust_logits(logits, priors, tau), s.y)
        })
        .sum();
    Ok(total / batch.len() as f64)
}

/// Mean adjusted cross-entropy and its backpropagated gradient.
pub fn batch_loss_and_grad(
    arch: &MlpArchitecture,
    params: &ParameterVector,
    batch: &[&Sample],
    priors: &ClassPriors,
    tau: f64,
) -> Result<(f64, GradientVector)> {
    arch.check_params(params)?;
    check_batch(arch, batch)?;
    let layers = arch.layer_offsets();
    let p = params.as_slice();
    let mut grad = vec![0.0; p.len()];
    let mut total = 0.0;

    for s in batch {
        let trace = forward_trace(arch, p, &s.x);
        let logits = trace.post.last().expect("output layer");
        let mut delta = adjust_logits(logits, priors, tau);
        total += ce_loss(&delta, s.y);
        // dL/dz for softmax cross-entropy; the prior shift is constant in z.
        softmax_in_place(&mut delta);
        delta[s.y] -= 1.0;

        for (l, &(w_off, b_off, fan_in, fan_out)) in layers.iter().enumerate().rev() {
            let input = &trace.post[l];
            for o in 0..fan_out {
                let d = delta[o];
                grad[b_off + o] += d;
                let row = &mut grad[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let z_prev = &trace.pre[l - 1];
                let a_prev = &trace.post[l];
                let mut next = vec![0.0; fan_in];
                for (o, &d) in delta.iter().enumerate() {
                    let row = &p[w_off + o * fan_in..w_off + (o + 1) * fan_in];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += w * d;
                    }
                }
                for i in 0..fan_in {
                    next[i] *= arch.activation().derivative(z_prev[i], a_prev[i]);
                }
                delta = next;
            }
        }
    }

    let n = batch.len() as f64;
    for g in &mut grad {
        *g /= n;
    }
    let grad = GradientVector::new(grad);
    if !grad.is_finite() || !total.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    Ok((total / n, grad))
}

/// Central-difference gradient of any objective.
pub fn finite_diff_grad(objective: &dyn Objective, params: &ParameterVector, h: f64) -> Result<GradientVector> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step h must be > 0, got {h}")));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = objective.loss(&probe)?;
        probe.as_mut_slice()[i] = orig - h;
        let down = objective.loss(&probe)?;
        probe.as_mut_slice()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(GradientVector::new(grad))
}

/// A differentiable scalar loss over a flat parameter vector.
///
/// The sharpness estimator, the local update rules and the landscape slicer
/// only see this trait, so closed-form toys can stand in for the MLP.
pub trait Objective: Sync {
    fn num_params(&self) -> usize;
    fn loss(&self, params: &ParameterVector) -> Result<f64>;
    fn loss_and_grad(&self, params: &ParameterVector) -> Result<(f64, GradientVector)>;
}

/// Mean adjusted cross-entropy of an MLP over a fixed set of samples.
pub struct MlpObjective<'a> {
    pub arch: &'a MlpArchitecture,
    pub samples: Vec<&'a Sample>,
    pub priors: &'a ClassPriors,
    pub tau: f64,
}

impl<'a> MlpObjective<'a> {
    pub fn new(arch: &'a MlpArchitecture, samples: Vec<&'a Sample>, priors: &'a ClassPriors, tau: f64) -> Self {
        Self {
            arch,
            samples,
            priors,
            tau,
        }
    }
}

impl Objective for MlpObjective<'_> {
    fn num_params(&self) -> usize {
        self.arch.num_params()
    }

    fn loss(&self, params: &ParameterVector) -> Result<f64> {
        batch_loss(self.arch, params, &self.samples, self.priors, self.tau)
    }

    fn loss_and_grad(&self, params: &ParameterVector) -> Result<(f64, GradientVector)> {
        batch_loss_and_grad(self.arch, params, &self.samples, self.priors, self.tau)
    }
}

/// Per-coordinate comparison used by gradient checks: relative error where
/// either side exceeds `abs_floor`, absolute error otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientDiscrepancy {
    pub max_relative: f64,
    pub max_absolute_small: f64,
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> GradientDiscrepancy {
    let mut out = GradientDiscrepancy {
        max_relative: 0.0,
        max_absolute_small: 0.0,
    };
    for (a, n) in analytic.iter().zip(numeric) {
        let scale = a.abs().max(n.abs());
        let diff = (a - n).abs();
        if scale < abs_floor {
            out.max_absolute_small = out.max_absolute_small.max(diff);
        } else {
            out.max_relative = out.max_relative.max(diff / scale);
        }
    }
    out
}
