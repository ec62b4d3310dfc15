//! Minimal deterministic engine for the spectral CNN.
//!
//! Layers are written out by hand with explicit backward passes. Everything is
//! generic over [`Scalar`] so the same code runs in `f32` for training and in
//! `f64` for finite-difference checks.

mod arch;
mod io;
mod layers;
mod model;
mod optim;

use std::collections::BTreeMap;
use std::fmt::Debug;

use num_traits::Float;
use crate::error::{Error, Result};

pub use arch::{ArchSpec, ConvBlock, FlopsCount, LayerFlops};
pub use io::{MODEL_MAGIC, MODEL_VERSION};
pub use model::{backward, commit_bn_stats, forward, softmax_cross_entropy, Cache, Mode, Model, BN_EPS, BN_MOMENTUM};
pub use optim::{l2_sp, LrMap, Sgd};

pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    fn lift(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn lift(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn lift(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lift(v.as_f64())).collect(),
        }
    }
}

/// Named tensors in name order.
pub type TensorMap<T> = BTreeMap<String, Tensor<T>>;

/// True for tensors the optimizer updates; batch-norm running statistics are
/// state, not parameters.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

/// Named parameter store plus a version tag.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    pub version: u64,
    pub tensors: TensorMap<T>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            version: self.version,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.tensors.keys().filter(|k| is_trainable(k)).cloned().collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Euclidean distance over the trainable tensors.
    pub fn distance(&self, other: &ModelParams<T>) -> f64 {
        let mut s = 0.0;
        for (name, t) in &self.tensors {
            if !is_trainable(name) {
                continue;
            }
            if let Some(o) = other.tensors.get(name) {
                s += t
                    .data
                    .iter()
                    .zip(&o.data)
                    .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
                    .sum::<f64>();
            }
        }
        s.sqrt()
    }
}

/// Gradients keyed like [`ModelParams`], trainable tensors only.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T = f32> {
    pub tensors: TensorMap<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Gradients {
            tensors: params
                .tensors
                .iter()
                .filter(|(k, _)| is_trainable(k))
                .map(|(k, v)| (k.clone(), Tensor::zeros(&v.shape)))
                .collect(),
        }
    }

    /// `self += k * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Gradients<T>, k: T) {
        for (name, g) in self.tensors.iter_mut() {
            if let Some(o) = other.tensors.get(name) {
                for (a, &b) in g.data.iter_mut().zip(&o.data) {
                    *a = *a + k * b;
                }
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }
}
