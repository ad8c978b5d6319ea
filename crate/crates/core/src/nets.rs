//! Multilayer perceptrons for the victim policy, value functions and the
//! adversary's mask network.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Mask logits are clamped to this magnitude so probabilities stay inside (0, 1).
pub const MASK_LOGIT_BOUND: f64 = 12.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Head {
    GaussianPolicy,
    ScalarValue,
    MaskProbability,
}

impl Head {
    pub fn tag(self) -> u8 {
        match self {
            Head::GaussianPolicy => 1,
            Head::ScalarValue => 2,
            Head::MaskProbability => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Head> {
        match tag {
            1 => Some(Head::GaussianPolicy),
            2 => Some(Head::ScalarValue),
            3 => Some(Head::MaskProbability),
            _ => None,
        }
    }
}

/// Layer sizes and head of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub head: Head,
}

impl NetSpec {
    pub const VICTIM_HIDDEN: [usize; 2] = [128, 128];
    pub const ADVERSARY_HIDDEN: [usize; 3] = [64, 64, 64];

    pub fn victim_policy(state_dim: usize, action_dim: usize) -> Self {
        NetSpec {
            input_dim: state_dim,
            hidden: Self::VICTIM_HIDDEN.to_vec(),
            output_dim: action_dim,
            head: Head::GaussianPolicy,
        }
    }

    pub fn victim_value(state_dim: usize) -> Self {
        NetSpec {
            input_dim: state_dim,
            hidden: Self::VICTIM_HIDDEN.to_vec(),
            output_dim: 1,
            head: Head::ScalarValue,
        }
    }

    pub fn adversary_mask(state_dim: usize) -> Self {
        NetSpec {
            input_dim: state_dim,
            hidden: Self::ADVERSARY_HIDDEN.to_vec(),
            output_dim: state_dim,
            head: Head::MaskProbability,
        }
    }

    pub fn adversary_value(state_dim: usize) -> Self {
        NetSpec {
            input_dim: state_dim,
            hidden: Self::ADVERSARY_HIDDEN.to_vec(),
            output_dim: 1,
            head: Head::ScalarValue,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `out x in`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

/// Parameters of a tanh MLP with a linear output layer.
///
/// Flat layout (used by gradients, optimizers and checkpoints): for each layer
/// the row-major weight followed by the bias, then `log_std` for Gaussian
/// policies.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T> {
    pub layers: Vec<Layer<T>>,
    pub head: Head,
    pub log_std: Option<Array1<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskOutput<T> {
    pub probs: Vec<T>,
}

/// Weights ~ U(-1/√fan_in, 1/√fan_in), zero biases; the policy's output layer
/// is scaled by 0.01 and `log_std` starts at 0.
pub fn init_params<T: Scalar, R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> MlpParams<T> {
    let mut dims = vec![spec.input_dim];
    dims.extend(&spec.hidden);
    dims.push(spec.output_dim);
    let n_layers = dims.len() - 1;
    let layers = (0..n_layers)
        .map(|l| {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let mut bound = T::one() / T::lit(fan_in as f64).sqrt();
            if l + 1 == n_layers && spec.head == Head::GaussianPolicy {
                bound *= T::lit(0.01);
            }
            let weight =
                Array2::from_shape_fn((fan_out, fan_in), |_| T::sample_uniform(rng, -bound, bound));
            Layer {
                weight,
                bias: Array1::zeros(fan_out),
            }
        })
        .collect();
    let log_std = (spec.head == Head::GaussianPolicy).then(|| Array1::zeros(spec.output_dim));
    MlpParams {
        layers,
        head: spec.head,
        log_std,
    }
}

impl<T: Scalar> MlpParams<T> {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.weight.nrows()).unwrap_or(0)
    }

    pub fn spec(&self) -> NetSpec {
        NetSpec {
            input_dim: self.input_dim(),
            hidden: self.layers[..self.layers.len() - 1]
                .iter()
                .map(|l| l.weight.nrows())
                .collect(),
            output_dim: self.output_dim(),
            head: self.head,
        }
    }

    /// Number of weights and biases (excludes `log_std`).
    pub fn num_weights(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn num_params(&self) -> usize {
        self.num_weights() + self.log_std.as_ref().map_or(0, |v| v.len())
    }

    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        if let Some(ls) = &self.log_std {
            out.extend(ls.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                context: "flat parameters",
                expected: self.num_params(),
                actual: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        if let Some(ls) = &mut self.log_std {
            ls.iter_mut().for_each(|v| *v = it.next().unwrap());
        }
        self.clamp_log_std();
        Ok(())
    }

    pub fn clamp_log_std(&mut self) {
        if let Some(ls) = &mut self.log_std {
            ls.mapv_inplace(|v| v.max(T::lit(LOG_STD_MIN)).min(T::lit(LOG_STD_MAX)));
        }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U + Copy) -> MlpParams<U> {
        MlpParams {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.mapv(f),
                    bias: l.bias.mapv(f),
                })
                .collect(),
            head: self.head,
            log_std: self.log_std.as_ref().map(|v| v.mapv(f)),
        }
    }

    /// Raw network output (before the head transform) for a batch of rows.
    pub fn forward_batch(&self, x: ArrayView2<'_, T>) -> Result<Array2<T>> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = h.dot(&l.weight.t());
            y += &l.bias.view().insert_axis(Axis(0));
            if i < last {
                y.mapv_inplace(|v| v.tanh());
            }
            h = y;
        }
        Ok(h)
    }

    fn forward_one(&self, s: &[T]) -> Result<Vec<T>> {
        let view = ArrayView2::from_shape((1, s.len()), s).expect("row view");
        Ok(self.forward_batch(view)?.into_iter().collect())
    }

    /// Appends the network to `graph`, reading from node `x`, and returns
    /// the raw output node. Parameters are declared layer by layer (weight
    /// then bias), matching the flat layout.
    pub fn attach(&self, graph: &mut Graph<T>, x: NodeId) -> NodeId {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, l) in self.layers.iter().enumerate() {
            let w = graph.param(l.weight.clone());
            let b = graph.param(l.bias.clone().insert_axis(Axis(0)));
            h = graph.affine(h, w, b);
            if i < last {
                h = graph.tanh(h);
            }
        }
        h
    }

    /// A graph `input -> raw output` over this network.
    pub fn graph(&self) -> Graph<T> {
        let mut g = Graph::new();
        let x = g.input(self.input_dim());
        let y = self.attach(&mut g, x);
        g.set_output(y);
        g
    }

    pub fn std(&self) -> Vec<T> {
        self.log_std
            .as_ref()
            .map(|ls| ls.iter().map(|v| v.exp()).collect())
            .unwrap_or_default()
    }
}

pub fn policy_forward<T: Scalar>(params: &MlpParams<T>, s: &[T]) -> Result<PolicyOutput<T>> {
    let mean = params.forward_one(s)?;
    let std = match &params.log_std {
        Some(_) => params.std(),
        None => vec![T::one(); mean.len()],
    };
    Ok(PolicyOutput { mean, std })
}

pub fn value_forward<T: Scalar>(params: &MlpParams<T>, s: &[T]) -> Result<T> {
    Ok(params.forward_one(s)?[0])
}

pub fn value_batch<T: Scalar>(params: &MlpParams<T>, x: ArrayView2<'_, T>) -> Result<Vec<T>> {
    Ok(params.forward_batch(x)?.column(0).to_vec())
}

#[inline]
pub fn clamp_mask_logit<T: Scalar>(z: T) -> T {
    let b = T::lit(MASK_LOGIT_BOUND);
    z.max(-b).min(b)
}

pub fn mask_forward<T: Scalar>(params: &MlpParams<T>, s: &[T]) -> Result<MaskOutput<T>> {
    let probs = params
        .forward_one(s)?
        .into_iter()
        .map(|z| scalar::sigmoid(clamp_mask_logit(z)))
        .collect();
    Ok(MaskOutput { probs })
}

/// Diagonal-Gaussian log density.
pub fn gaussian_log_prob<T: Scalar>(out: &PolicyOutput<T>, a: &[T]) -> T {
    out.mean
        .iter()
        .zip(&out.std)
        .zip(a)
        .map(|((&m, &sd), &x)| {
            let z = (x - m) / sd;
            -T::lit(0.5) * z * z - sd.ln() - T::lit(HALF_LN_2PI)
        })
        .sum()
}

/// Draws `a = mean + std ⊙ z` and returns it with its log density.
pub fn sample_action<T: Scalar, R: Rng + ?Sized>(
    out: &PolicyOutput<T>,
    rng: &mut R,
) -> (Vec<T>, T) {
    let a: Vec<T> = out
        .mean
        .iter()
        .zip(&out.std)
        .map(|(&m, &sd)| m + sd * T::sample_normal(rng))
        .collect();
    let lp = gaussian_log_prob(out, &a);
    (a, lp)
}

/// Deterministic mode: the mean action and its log density.
pub fn mean_action<T: Scalar>(out: &PolicyOutput<T>) -> (Vec<T>, T) {
    let lp = gaussian_log_prob(out, &out.mean);
    (out.mean.clone(), lp)
}

/// Closed-form `KL(p ‖ q)` between diagonal Gaussians.
pub fn gaussian_kl<T: Scalar>(p: &PolicyOutput<T>, q: &PolicyOutput<T>) -> T {
    let half = T::lit(0.5);
    (0..p.mean.len())
        .map(|i| {
            let (mp, sp, mq, sq) = (p.mean[i], p.std[i], q.mean[i], q.std[i]);
            let d = mp - mq;
            (sq / sp).ln() + (sp * sp + d * d) / (T::lit(2.0) * sq * sq) - half
        })
        .sum()
}

pub fn gaussian_entropy<T: Scalar>(std: &[T]) -> T {
    std.iter()
        .map(|&s| s.ln() + T::lit(HALF_LN_2PI + 0.5))
        .sum()
}
