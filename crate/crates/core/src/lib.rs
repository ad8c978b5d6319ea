//! Adversarial-robustness lab for small continuous-control policies.
//!
//! The crate trains a PPO victim, attacks its observations with gradient
//! methods (including a learned soft-masked attacker), fine-tunes the victim
//! against that attacker and evaluates the results.
//!
//! Differentiable code is generic over [`Scalar`] (`f32` or `f64`). The
//! environments, rollouts and training loops run in `f64`; checkpoints
//! store `f32`.

// `!(x > 0.0)` in validators is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agmr;
pub mod attacks;
pub mod autodiff;
pub mod envs;
pub mod error;
pub mod harness;
pub mod nets;
pub mod optim;
pub mod ppo;
pub mod rng;
pub mod rollout;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Graph64 = autodiff::Graph<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Mlp64 = nets::MlpParams<f64>;
pub type Mlp32 = nets::MlpParams<f32>;
pub type Policy64 = nets::PolicyOutput<f64>;
pub type Victim64 = attacks::VictimModel<f64>;
