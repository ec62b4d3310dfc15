use std::collections::BTreeMap;

use super::{is_trainable, Gradients, ModelParams, Scalar, Tensor, TensorMap};
use crate::error::{Error, Result};

/// Learning rate per trainable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct LrMap(BTreeMap<String, f64>);

impl LrMap {
    pub fn uniform<T: Scalar>(params: &ModelParams<T>, lr: f64) -> Self {
        LrMap(params.trainable_names().into_iter().map(|n| (n, lr)).collect())
    }

    /// `head.*` at `head_lr`, everything else at `head_lr * backbone_ratio`.
    pub fn layerwise<T: Scalar>(params: &ModelParams<T>, head_lr: f64, backbone_ratio: f64) -> Self {
        LrMap(
            params
                .trainable_names()
                .into_iter()
                .map(|n| {
                    let lr = if n.starts_with("head.") { head_lr } else { head_lr * backbone_ratio };
                    (n, lr)
                })
                .collect(),
        )
    }

    pub fn empty() -> Self {
        LrMap(BTreeMap::new())
    }

    pub fn set(&mut self, name: impl Into<String>, lr: f64) {
        self.0.insert(name.into(), lr);
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.0.values_mut() {
            *v *= k;
        }
    }

    pub fn head_lr(&self) -> Option<f64> {
        self.get("head.weight")
    }

    pub fn backbone_lr(&self) -> Option<f64> {
        self.get("fc1.weight")
    }
}

/// SGD with heavy-ball momentum: `v = mu v + g + wd w; w -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    pub momentum: f64,
    velocity: TensorMap<T>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Self {
        Sgd {
            momentum,
            velocity: TensorMap::new(),
        }
    }

    /// Updates every trainable tensor that has a gradient. Running
    /// statistics are never touched. Fails before any update if a tensor has
    /// no learning rate.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &Gradients<T>, lr: &LrMap, weight_decay: f64) -> Result<()> {
        for name in grads.tensors.keys() {
            if lr.get(name).is_none() {
                return Err(Error::MissingLearningRate(name.clone()));
            }
        }
        let mu = T::lift(self.momentum);
        let wd = T::lift(weight_decay);
        for (name, g) in &grads.tensors {
            if !is_trainable(name) {
                continue;
            }
            let rate = T::lift(lr.get(name).unwrap_or(0.0));
            let w = params.get_mut(name)?;
            if w.data.len() != g.data.len() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: w.shape.clone(),
                    got: g.shape.clone(),
                });
            }
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(&w.shape));
            for ((wv, vv), &gv) in w.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
                *vv = mu * *vv + gv + wd * *wv;
                *wv = *wv - rate * *vv;
            }
        }
        Ok(())
    }
}

/// Anchored L2 penalty `sum ||w - w0||^2` over `trainable`, with gradient
/// `2 (w - w0)`.
pub fn l2_sp<T: Scalar>(params: &ModelParams<T>, anchor: &ModelParams<T>, trainable: &[String]) -> Result<(f64, Gradients<T>)> {
    let mut penalty = 0.0;
    let mut grads = Gradients::zeros_like(params);
    for name in trainable {
        let w = params.get(name)?;
        let w0 = anchor.get(name)?;
        if w.shape != w0.shape {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: w.shape.clone(),
                got: w0.shape.clone(),
            });
        }
        let Some(g) = grads.tensors.get_mut(name) else {
            continue;
        };
        for ((gv, &a), &b) in g.data.iter_mut().zip(&w.data).zip(&w0.data) {
            let d = a.as_f64() - b.as_f64();
            penalty += d * d;
            *gv = T::lift(2.0 * d);
        }
    }
    Ok((penalty, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ArchSpec, Model};

    fn scalar(v: f64) -> ModelParams<f64> {
        let mut tensors = TensorMap::new();
        tensors.insert("w".to_string(), Tensor { shape: vec![1], data: vec![v] });
        ModelParams { version: 0, tensors }
    }

    fn grad(v: f64) -> Gradients<f64> {
        let mut tensors = TensorMap::new();
        tensors.insert("w".to_string(), Tensor { shape: vec![1], data: vec![v] });
        Gradients { tensors }
    }

    #[test]
    fn plain_step() {
        let mut p = scalar(1.0);
        let mut lr = LrMap::empty();
        lr.set("w", 0.1);
        Sgd::new(0.0).step(&mut p, &grad(1.0), &lr, 0.0).unwrap();
        assert!((p.tensors["w"].data[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_and_missing_lr() {
        let m = Model::init(&ArchSpec::default(), 1).unwrap();
        let mut p = m.params.clone();
        let g = Gradients::zeros_like(&p);
        let mut g2 = g.clone();
        for t in g2.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v = 1.0);
        }
        let zero = LrMap::uniform(&p, 0.0);
        Sgd::new(0.9).step(&mut p, &g2, &zero, 0.0).unwrap();
        assert_eq!(p, m.params);
        let err = Sgd::new(0.9).step(&mut p, &g, &LrMap::empty(), 0.0).unwrap_err();
        assert!(matches!(err, Error::MissingLearningRate(_)));
    }

    #[test]
    fn layerwise_rates_scale_updates() {
        let m = Model::init(&ArchSpec::default(), 1).unwrap();
        let mut p = m.params.clone();
        let mut g = Gradients::zeros_like(&p);
        for t in g.tensors.values_mut() {
            t.data.iter_mut().for_each(|v| *v = 1.0);
        }
        let lr = LrMap::layerwise(&p, 0.01, 0.1);
        Sgd::new(0.9).step(&mut p, &g, &lr, 0.0).unwrap();
        let moved = |n: &str| (p.tensors[n].data[0] - m.params.tensors[n].data[0]).abs() as f64;
        let ratio = moved("head.weight") / moved("fc1.weight");
        assert!((ratio - 10.0).abs() < 1e-3, "{ratio}");
        assert_eq!(p.tensors["bn1.running_mean"], m.params.tensors["bn1.running_mean"]);
    }

    #[test]
    fn l2_sp_scalar_and_identity() {
        let names = vec!["w".to_string()];
        let (pen, g) = l2_sp(&scalar(3.0), &scalar(1.0), &names).unwrap();
        assert_eq!(pen, 4.0);
        assert_eq!(g.tensors["w"].data[0], 4.0);
        let (pen, g) = l2_sp(&scalar(3.0), &scalar(3.0), &names).unwrap();
        assert_eq!(pen, 0.0);
        assert_eq!(g.tensors["w"].data[0], 0.0);
    }

    #[test]
    fn l2_sp_gradient_matches_finite_differences() {
        let arch = ArchSpec::default();
        let anchor = Model::init(&arch, 1).unwrap().params.cast::<f64>();
        let p = Model::init(&arch, 2).unwrap().params.cast::<f64>();
        let names = p.trainable_names();
        let (_, g) = l2_sp(&p, &anchor, &names).unwrap();
        let eps = 1e-3;
        for name in ["conv2.weight", "bn1.gamma", "fc1.bias", "head.weight"] {
            for k in [0, 3] {
                let mut hi = p.clone();
                hi.get_mut(name).unwrap().data[k] += eps;
                let mut lo = p.clone();
                lo.get_mut(name).unwrap().data[k] -= eps;
                let fd = (l2_sp(&hi, &anchor, &names).unwrap().0 - l2_sp(&lo, &anchor, &names).unwrap().0) / (2.0 * eps);
                let an = g.tensors[name].data[k];
                assert!((fd - an).abs() <= 1e-4 * fd.abs().max(1e-3), "{name}: {fd} vs {an}");
            }
        }
    }
}
