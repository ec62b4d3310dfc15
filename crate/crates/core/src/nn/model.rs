use rand::Rng;

use super::layers::{self, BnBatch, ConvDims};
use super::{ArchSpec, Gradients, ModelParams, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::{self, SimRng};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

pub enum Mode<'a> {
    /// Running statistics, no dropout.
    Infer,
    /// Batch statistics; dropout masks are drawn from `rng`.
    Train { rng: Option<&'a mut SimRng> },
}

impl<'a> Mode<'a> {
    pub fn train(rng: &'a mut SimRng) -> Self {
        Mode::Train { rng: Some(rng) }
    }
}

struct BlockCache<T> {
    input: Vec<T>,
    bn: BnBatch<T>,
    pre_activation: Vec<T>,
    relu_out: Vec<T>,
    mask: Option<Vec<T>>,
    arg: Vec<u32>,
}

/// Activations kept by a train-mode forward for the backward pass.
pub struct Cache<T> {
    pub logits: Vec<T>,
    batch: usize,
    train: Option<TrainCache<T>>,
}

struct TrainCache<T> {
    blocks: Vec<BlockCache<T>>,
    flat: Vec<T>,
    hidden_relu: Vec<T>,
    hidden_mask: Option<Vec<T>>,
    hidden: Vec<T>,
}

impl<T: Scalar> Cache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Batch-norm output of conv block `i` (before ReLU); train mode only.
    pub fn pre_activation(&self, i: usize) -> Option<&[T]> {
        self.train.as_ref().map(|t| t.blocks[i].pre_activation.as_slice())
    }

    /// `P(arc)` per sample.
    pub fn probabilities(&self) -> Vec<T> {
        self.logits
            .chunks_exact(2)
            .map(|l| {
                let d = (l[0] - l[1]).as_f64();
                T::lift(1.0 / (1.0 + d.exp()))
            })
            .collect()
    }
}

fn check_shapes<T: Scalar>(arch: &ArchSpec, params: &ModelParams<T>) -> Result<()> {
    for (name, shape) in arch.tensor_shapes() {
        let t = params.get(&name)?;
        if t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch {
                name,
                expected: shape,
                got: t.shape.clone(),
            });
        }
    }
    Ok(())
}

fn data<'p, T: Scalar>(params: &'p ModelParams<T>, name: &str) -> &'p [T] {
    &params.tensors[name].data
}

/// Runs the network on `batch` rows of `x` (row-major, `input_dim` wide).
pub fn forward<T: Scalar>(
    arch: &ArchSpec,
    params: &ModelParams<T>,
    x: &[T],
    batch: usize,
    mode: Mode<'_>,
) -> Result<Cache<T>> {
    if batch == 0 {
        return Err(Error::EmptyInput { needed: 1, got: 0 });
    }
    if x.len() != batch * arch.input_dim {
        return Err(Error::ShapeMismatch {
            name: "input".into(),
            expected: vec![batch, arch.input_dim],
            got: vec![x.len()],
        });
    }
    check_shapes(arch, params)?;
    let (train, mut rng) = match mode {
        Mode::Infer => (false, None),
        Mode::Train { rng } => {
            if arch.dropout_p > 0.0 && rng.is_none() {
                return Err(Error::MissingRng);
            }
            (true, rng)
        }
    };
    let p = arch.dropout_p;
    let mut blocks = Vec::new();
    let mut act = x.to_vec();

    for (i, b) in arch.blocks().iter().enumerate() {
        let n = i + 1;
        let dims = ConvDims {
            batch,
            in_ch: b.in_ch,
            out_ch: b.out_ch,
            len: b.len,
            kernel: b.kernel,
        };
        let conv = layers::conv_forward(&act, data(params, &format!("conv{n}.weight")), &dims);
        let gamma = data(params, &format!("bn{n}.gamma"));
        let beta = data(params, &format!("bn{n}.beta"));
        let rows = batch * b.out_ch;
        if train {
            let (pre, bn) = layers::bn_forward_train(&conv, gamma, beta, batch, b.out_ch, b.len, BN_EPS);
            let mut relu = pre.clone();
            layers::relu_inplace(&mut relu);
            let mut dropped = relu.clone();
            let mask = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => {
                    let m = layers::dropout_mask(dropped.len(), p, r);
                    layers::mul_inplace(&mut dropped, &m);
                    Some(m)
                }
                _ => None,
            };
            let (pooled, arg) = layers::maxpool_forward(&dropped, rows, b.len, b.pool);
            blocks.push(BlockCache {
                input: std::mem::replace(&mut act, pooled),
                bn,
                pre_activation: pre,
                relu_out: relu,
                mask,
                arg,
            });
        } else {
            let mut y = layers::bn_forward_infer(
                &conv,
                gamma,
                beta,
                data(params, &format!("bn{n}.running_mean")),
                data(params, &format!("bn{n}.running_var")),
                batch,
                b.out_ch,
                b.len,
                BN_EPS,
            );
            layers::relu_inplace(&mut y);
            act = layers::maxpool_forward(&y, rows, b.len, b.pool).0;
        }
    }

    let flat_dim = arch.flat_dim();
    let mut h = layers::fc_forward(
        &act,
        data(params, "fc1.weight"),
        data(params, "fc1.bias"),
        batch,
        flat_dim,
        arch.fc_hidden,
    );
    layers::relu_inplace(&mut h);
    let hidden_relu = if train { h.clone() } else { Vec::new() };
    let mut hidden_mask = None;
    if train && p > 0.0 {
        if let Some(r) = rng.as_deref_mut() {
            let m = layers::dropout_mask(h.len(), p, r);
            layers::mul_inplace(&mut h, &m);
            hidden_mask = Some(m);
        }
    }
    let logits = layers::fc_forward(
        &h,
        data(params, "head.weight"),
        data(params, "head.bias"),
        batch,
        arch.fc_hidden,
        arch.num_classes,
    );
    Ok(Cache {
        logits,
        batch,
        train: train.then_some(TrainCache {
            blocks,
            flat: act,
            hidden_relu,
            hidden_mask,
            hidden: h,
        }),
    })
}

/// Weighted softmax cross-entropy over two-class logits.
///
/// With `weights = None` every sample weighs `1/batch`, giving the mean loss.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], labels: &[u8], weights: Option<&[T]>) -> Result<(T, Vec<T>)> {
    let batch = labels.len();
    if logits.len() != 2 * batch {
        return Err(Error::ShapeMismatch {
            name: "logits".into(),
            expected: vec![batch, 2],
            got: vec![logits.len()],
        });
    }
    if let Some(w) = weights {
        if w.len() != batch {
            return Err(Error::ShapeMismatch {
                name: "sample weights".into(),
                expected: vec![batch],
                got: vec![w.len()],
            });
        }
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(2 * batch);
    for (i, &y) in labels.iter().enumerate() {
        if y > 1 {
            return Err(Error::InvalidLabel(y));
        }
        let w = weights.map_or(1.0 / batch as f64, |w| w[i].as_f64());
        let (a, b) = (logits[2 * i].as_f64(), logits[2 * i + 1].as_f64());
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        let pa = (a - lse).exp();
        let pb = (b - lse).exp();
        loss += w * (lse - if y == 0 { a } else { b });
        grad.push(T::lift(w * (pa - if y == 0 { 1.0 } else { 0.0 })));
        grad.push(T::lift(w * (pb - if y == 1 { 1.0 } else { 0.0 })));
    }
    Ok((T::lift(loss), grad))
}

/// Loss and gradients for every trainable tensor from a train-mode cache.
pub fn backward<T: Scalar>(
    arch: &ArchSpec,
    params: &ModelParams<T>,
    cache: &Cache<T>,
    labels: &[u8],
    weights: Option<&[T]>,
) -> Result<(T, Gradients<T>)> {
    let tc = cache
        .train
        .as_ref()
        .ok_or_else(|| Error::Precondition("backward needs a train-mode forward cache".into()))?;
    let batch = cache.batch;
    if labels.len() != batch {
        return Err(Error::ShapeMismatch {
            name: "labels".into(),
            expected: vec![batch],
            got: vec![labels.len()],
        });
    }
    let (loss, dlogits) = softmax_cross_entropy(&cache.logits, labels, weights)?;
    let mut grads = Gradients::zeros_like(params);
    let mut put = |name: &str, g: Vec<T>| {
        grads.tensors.get_mut(name).expect("trainable tensor").data = g;
    };

    let (dw, db, mut dh) = layers::fc_backward(
        &tc.hidden,
        data(params, "head.weight"),
        &dlogits,
        batch,
        arch.fc_hidden,
        arch.num_classes,
    );
    put("head.weight", dw);
    put("head.bias", db);
    if let Some(m) = &tc.hidden_mask {
        layers::mul_inplace(&mut dh, m);
    }
    layers::relu_backward_inplace(&mut dh, &tc.hidden_relu);
    let flat_dim = arch.flat_dim();
    let (dw, db, mut dact) = layers::fc_backward(&tc.flat, data(params, "fc1.weight"), &dh, batch, flat_dim, arch.fc_hidden);
    put("fc1.weight", dw);
    put("fc1.bias", db);

    let shapes = arch.blocks();
    for (i, b) in shapes.iter().enumerate().rev() {
        let n = i + 1;
        let bc = &tc.blocks[i];
        let mut d = layers::maxpool_backward(&dact, &bc.arg, batch * b.out_ch * b.len);
        if let Some(m) = &bc.mask {
            layers::mul_inplace(&mut d, m);
        }
        layers::relu_backward_inplace(&mut d, &bc.relu_out);
        let gamma = data(params, &format!("bn{n}.gamma"));
        let (dconv, dgamma, dbeta) = layers::bn_backward(&d, &bc.bn, gamma, batch, b.out_ch, b.len);
        put(&format!("bn{n}.gamma"), dgamma);
        put(&format!("bn{n}.beta"), dbeta);
        let dims = ConvDims {
            batch,
            in_ch: b.in_ch,
            out_ch: b.out_ch,
            len: b.len,
            kernel: b.kernel,
        };
        let (dw, dx) = layers::conv_backward(&bc.input, data(params, &format!("conv{n}.weight")), &dconv, &dims, i > 0);
        put(&format!("conv{n}.weight"), dw);
        if let Some(dx) = dx {
            dact = dx;
        }
    }
    Ok((loss, grads))
}

/// Folds the batch statistics of a train-mode forward into the running
/// statistics (exponential average, unbiased variance).
pub fn commit_bn_stats<T: Scalar>(params: &mut ModelParams<T>, cache: &Cache<T>) -> Result<()> {
    let tc = cache
        .train
        .as_ref()
        .ok_or_else(|| Error::Precondition("batch statistics need a train-mode forward".into()))?;
    let m = BN_MOMENTUM;
    for (i, bc) in tc.blocks.iter().enumerate() {
        let n = i + 1;
        let unbias = if bc.bn.count > 1 {
            bc.bn.count as f64 / (bc.bn.count - 1) as f64
        } else {
            1.0
        };
        let rm = params.get_mut(&format!("bn{n}.running_mean"))?;
        for (r, &s) in rm.data.iter_mut().zip(&bc.bn.mean) {
            *r = T::lift((1.0 - m) * r.as_f64() + m * s);
        }
        let rv = params.get_mut(&format!("bn{n}.running_var"))?;
        for (r, &s) in rv.data.iter_mut().zip(&bc.bn.var) {
            *r = T::lift((1.0 - m) * r.as_f64() + m * s * unbias);
        }
    }
    Ok(())
}

/// Architecture plus `f32` parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: ArchSpec,
    pub params: ModelParams<f32>,
}

/// Rows per inference chunk.
const INFER_CHUNK: usize = 512;

impl Model {
    /// Kaiming-uniform weights for ReLU layers (`±sqrt(6/fan_in)`),
    /// `±1/sqrt(fan_in)` for the head, zero biases, identity batch norm.
    pub fn init(arch: &ArchSpec, seed: u64) -> Result<Model> {
        arch.validate()?;
        let mut r = rng::derive_rng(seed, 0x1417);
        let mut tensors = super::TensorMap::new();
        for (name, shape) in arch.tensor_shapes() {
            let t = if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = if name.starts_with("head") {
                    1.0 / (fan_in as f64).sqrt()
                } else {
                    (6.0 / fan_in as f64).sqrt()
                };
                let mut t = Tensor::zeros(&shape);
                for v in t.data.iter_mut() {
                    *v = r.random_range(-bound..bound) as f32;
                }
                t
            } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
                Tensor::filled(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(name, t);
        }
        Ok(Model {
            arch: arch.clone(),
            params: ModelParams { version: 0, tensors },
        })
    }

    pub fn version(&self) -> u64 {
        self.params.version
    }

    pub fn flops(&self) -> super::FlopsCount {
        self.arch.flops()
    }

    /// Infer-mode `P(arc)` for `rows.len() / input_dim` samples.
    pub fn predict_proba(&self, rows: &[f32]) -> Result<Vec<f32>> {
        let dim = self.arch.input_dim;
        if rows.len() % dim != 0 {
            return Err(Error::ShapeMismatch {
                name: "input".into(),
                expected: vec![rows.len() / dim, dim],
                got: vec![rows.len()],
            });
        }
        let mut out = Vec::with_capacity(rows.len() / dim);
        for chunk in rows.chunks(INFER_CHUNK * dim) {
            let c = forward(&self.arch, &self.params, chunk, chunk.len() / dim, Mode::Infer)?;
            out.extend(c.probabilities());
        }
        Ok(out)
    }

    /// Infer-mode logits, two per sample.
    pub fn logits(&self, rows: &[f32]) -> Result<Vec<f32>> {
        let dim = self.arch.input_dim;
        let mut out = Vec::with_capacity(2 * rows.len() / dim);
        for chunk in rows.chunks(INFER_CHUNK * dim) {
            out.extend(forward(&self.arch, &self.params, chunk, chunk.len() / dim, Mode::Infer)?.logits);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ConvBlock;

    fn tiny_arch(dropout_p: f64) -> ArchSpec {
        ArchSpec {
            input_dim: 12,
            conv_blocks: vec![
                ConvBlock { kernel: 3, channels: 2, pool: 2 },
                ConvBlock { kernel: 3, channels: 3, pool: 2 },
            ],
            dropout_p,
            fc_hidden: 5,
            num_classes: 2,
        }
    }

    fn rand_input(n: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::seeded(seed);
        (0..n).map(|_| r.random_range(-2.0..2.0)).collect()
    }

    fn perturbed(params: &ModelParams<f64>, seed: u64) -> ModelParams<f64> {
        let mut p = params.clone();
        let mut r = rng::seeded(seed);
        for (name, t) in p.tensors.iter_mut() {
            if name.contains("running") {
                continue;
            }
            for v in t.data.iter_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        p
    }

    fn loss_at(arch: &ArchSpec, p: &ModelParams<f64>, x: &[f64], labels: &[u8], seed: u64) -> f64 {
        let mut r = rng::seeded(seed);
        let c = forward(arch, p, x, labels.len(), Mode::train(&mut r)).unwrap();
        backward(arch, p, &c, labels, None).unwrap().0
    }

    fn gradient_check(dropout_p: f64) {
        let arch = tiny_arch(dropout_p);
        let base = Model::init(&arch, 3).unwrap().params.cast::<f64>();
        let p = perturbed(&base, 4);
        let labels = [0u8, 1, 1, 0];
        let x = rand_input(4 * 12, 9);
        let mut r = rng::seeded(77);
        let c = forward(&arch, &p, &x, 4, Mode::train(&mut r)).unwrap();
        let (_, g) = backward(&arch, &p, &c, &labels, None).unwrap();
        let eps = 1e-3;
        let mut worst: f64 = 0.0;
        for (name, gt) in &g.tensors {
            for k in 0..gt.data.len() {
                let mut hi = p.clone();
                hi.tensors.get_mut(name).unwrap().data[k] += eps;
                let mut lo = p.clone();
                lo.tensors.get_mut(name).unwrap().data[k] -= eps;
                let fd = (loss_at(&arch, &hi, &x, &labels, 77) - loss_at(&arch, &lo, &x, &labels, 77)) / (2.0 * eps);
                let an = gt.data[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                if (fd - an).abs() > 1e-7 {
                    worst = worst.max(rel);
                }
                assert!(rel < 1e-4 || (fd - an).abs() < 1e-7, "{name}[{k}]: fd {fd} analytic {an}");
            }
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(0.0);
    }

    #[test]
    fn gradients_match_finite_differences_with_dropout() {
        gradient_check(0.3);
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let (l, _) = softmax_cross_entropy(&[0.0f64, 0.0, 1.5, 1.5], &[0, 1], None).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(matches!(
            softmax_cross_entropy(&[0.0f64, 0.0], &[2], None),
            Err(Error::InvalidLabel(2))
        ));
    }

    #[test]
    fn zero_head_bias_gradient_is_mean_residual() {
        let arch = tiny_arch(0.0);
        let mut p = Model::init(&arch, 1).unwrap().params.cast::<f64>();
        for v in p.get_mut("head.weight").unwrap().data.iter_mut() {
            *v = 0.0;
        }
        let x = rand_input(24, 2);
        let mut r = rng::seeded(0);
        let c = forward(&arch, &p, &x, 2, Mode::train(&mut r)).unwrap();
        let (_, g) = backward(&arch, &p, &c, &[1, 0], None).unwrap();
        // Zero weights and zero bias: softmax is (0.5, 0.5) for both samples.
        let gb = &g.get("head.bias").unwrap().data;
        let expect = [((0.5 - 0.0) + (0.5 - 1.0)) / 2.0, ((0.5 - 1.0) + (0.5 - 0.0)) / 2.0];
        assert!((gb[0] - expect[0]).abs() < 1e-12 && (gb[1] - expect[1]).abs() < 1e-12);
    }

    #[test]
    fn delta_kernel_block_reproduces_input() {
        let arch = ArchSpec {
            input_dim: 16,
            conv_blocks: vec![ConvBlock { kernel: 5, channels: 1, pool: 1 }],
            dropout_p: 0.0,
            fc_hidden: 2,
            num_classes: 2,
        };
        let mut p = Model::init(&arch, 0).unwrap().params.cast::<f64>();
        p.get_mut("conv1.weight").unwrap().data = vec![0.0, 0.0, 1.0, 0.0, 0.0];
        // Standardized input so batch statistics are (0, 1).
        let mut x = rand_input(16, 5);
        let m = x.iter().sum::<f64>() / 16.0;
        let s = (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 16.0).sqrt();
        x.iter_mut().for_each(|v| *v = (*v - m) / s);
        let c = forward(&arch, &p, &x, 1, Mode::Train { rng: None }).unwrap();
        for (a, b) in c.pre_activation(0).unwrap().iter().zip(&x) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn infer_is_deterministic_and_train_needs_rng() {
        let arch = ArchSpec::default();
        let m = Model::init(&arch, 11).unwrap();
        let x: Vec<f32> = (0..512).map(|i| (i as f32 * 0.37).sin() * 20.0 - 60.0).collect();
        let a = m.logits(&x).unwrap();
        let b = m.logits(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let err = forward(&arch, &m.params, &x, 2, Mode::Train { rng: None });
        assert!(matches!(err, Err(Error::MissingRng)));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let m = Model::init(&ArchSpec::default(), 1).unwrap();
        let mut other = ArchSpec::default();
        other.fc_hidden = 32;
        let x = vec![0.0f32; 256];
        let err = forward(&other, &m.params, &x, 1, Mode::Infer).err().unwrap();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let arch = tiny_arch(0.0);
        let mut p = Model::init(&arch, 2).unwrap().params.cast::<f64>();
        let x: Vec<f64> = rand_input(8 * 12, 3).iter().map(|v| v + 5.0).collect();
        let c = forward(&arch, &p, &x, 8, Mode::Train { rng: None }).unwrap();
        let before = p.get("bn1.running_mean").unwrap().clone();
        commit_bn_stats(&mut p, &c).unwrap();
        assert_ne!(&before, p.get("bn1.running_mean").unwrap());
        let c2 = forward(&arch, &p, &x, 8, Mode::Infer).unwrap();
        assert!(commit_bn_stats(&mut p, &c2).is_err());
    }
}
