//! Layer primitives on row-major slices. Activations are laid out
//! `[batch][channel][position]`.

use super::Scalar;

/// Dot product with eight independent accumulators so the loop vectorizes;
/// the summation order is fixed, so results stay reproducible.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] = acc[k] + x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Valid output range `[lo, hi)` for a tap whose input offset is `shift`.
#[inline]
fn tap_range(len: usize, shift: isize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo, hi.max(lo))
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub len: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn pad(&self) -> isize {
        ((self.kernel - 1) / 2) as isize
    }
}

/// "Same" 1-D convolution without bias (cross-correlation, zero padding).
pub(crate) fn conv_forward<T: Scalar>(x: &[T], w: &[T], d: &ConvDims) -> Vec<T> {
    let (l, k) = (d.len, d.kernel);
    let mut y = vec![T::zero(); d.batch * d.out_ch * l];
    for b in 0..d.batch {
        for o in 0..d.out_ch {
            let yrow = &mut y[(b * d.out_ch + o) * l..][..l];
            for i in 0..d.in_ch {
                let xrow = &x[(b * d.in_ch + i) * l..][..l];
                let wrow = &w[(o * d.in_ch + i) * k..][..k];
                for (j, &wv) in wrow.iter().enumerate() {
                    let s = j as isize - d.pad();
                    let (lo, hi) = tap_range(l, s);
                    let xs = &xrow[(lo as isize + s) as usize..(hi as isize + s) as usize];
                    for (yv, &xv) in yrow[lo..hi].iter_mut().zip(xs) {
                        *yv = *yv + wv * xv;
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dw, dx)`; `dx` is skipped when `need_dx` is false.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &ConvDims,
    need_dx: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let (l, k) = (d.len, d.kernel);
    let mut dw = vec![T::zero(); d.out_ch * d.in_ch * k];
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    for b in 0..d.batch {
        for o in 0..d.out_ch {
            let dyrow = &dy[(b * d.out_ch + o) * l..][..l];
            for i in 0..d.in_ch {
                let xoff = (b * d.in_ch + i) * l;
                let xrow = &x[xoff..][..l];
                for j in 0..k {
                    let s = j as isize - d.pad();
                    let (lo, hi) = tap_range(l, s);
                    let xs_lo = (lo as isize + s) as usize;
                    let xs_hi = (hi as isize + s) as usize;
                    let widx = (o * d.in_ch + i) * k + j;
                    dw[widx] = dw[widx] + dot(&dyrow[lo..hi], &xrow[xs_lo..xs_hi]);
                    if let Some(dx) = dx.as_mut() {
                        let wv = w[widx];
                        for (dxv, &g) in dx[xoff + xs_lo..xoff + xs_hi].iter_mut().zip(&dyrow[lo..hi]) {
                            *dxv = *dxv + wv * g;
                        }
                    }
                }
            }
        }
    }
    (dw, dx)
}

pub(crate) struct BnBatch<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub mean: Vec<f64>,
    /// Biased variance of the batch.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

/// Training-mode batch norm over `(batch, position)` per channel.
pub(crate) fn bn_forward_train<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    ch: usize,
    len: usize,
    eps: f64,
) -> (Vec<T>, BnBatch<T>) {
    let n = batch * len;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut s = 0.0;
        for b in 0..batch {
            s += x[(b * ch + c) * len..][..len].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let m = s / n as f64;
        let mut q = 0.0;
        for b in 0..batch {
            q += x[(b * ch + c) * len..][..len]
                .iter()
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = q / n as f64;
    }
    let inv_std: Vec<T> = var.iter().map(|v| T::lift(1.0 / (v + eps).sqrt())).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * len;
            let m = T::lift(mean[c]);
            for t in off..off + len {
                let h = (x[t] - m) * inv_std[c];
                xhat[t] = h;
                y[t] = gamma[c] * h + beta[c];
            }
        }
    }
    (y, BnBatch { xhat, inv_std, mean, var, count: n })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_forward_infer<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    running_mean: &[T],
    running_var: &[T],
    batch: usize,
    ch: usize,
    len: usize,
    eps: f64,
) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for c in 0..ch {
        let scale = gamma[c].as_f64() / (running_var[c].as_f64() + eps).sqrt();
        let shift = beta[c].as_f64() - running_mean[c].as_f64() * scale;
        let (scale, shift) = (T::lift(scale), T::lift(shift));
        for b in 0..batch {
            let off = (b * ch + c) * len;
            for t in off..off + len {
                y[t] = x[t] * scale + shift;
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn bn_backward<T: Scalar>(
    dy: &[T],
    cache: &BnBatch<T>,
    gamma: &[T],
    batch: usize,
    ch: usize,
    len: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = cache.count as f64;
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    for c in 0..ch {
        let (mut sg, mut sgx) = (0.0, 0.0);
        for b in 0..batch {
            let off = (b * ch + c) * len;
            for t in off..off + len {
                let g = dy[t].as_f64();
                sg += g;
                sgx += g * cache.xhat[t].as_f64();
            }
        }
        dbeta[c] = T::lift(sg);
        dgamma[c] = T::lift(sgx);
        let g = gamma[c].as_f64();
        let k = T::lift(g * cache.inv_std[c].as_f64() / n);
        let (a, bq) = (T::lift(sg), T::lift(sgx));
        let nn = T::lift(n);
        for b in 0..batch {
            let off = (b * ch + c) * len;
            for t in off..off + len {
                dx[t] = k * (nn * dy[t] - a - cache.xhat[t] * bq);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub(crate) fn relu_inplace<T: Scalar>(x: &mut [T]) {
    for v in x.iter_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Gradient through ReLU given its output.
pub(crate) fn relu_backward_inplace<T: Scalar>(dy: &mut [T], y: &[T]) {
    for (g, &v) in dy.iter_mut().zip(y) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
}

/// Inverted dropout mask: 0 with probability `p`, else `1/(1-p)`.
pub(crate) fn dropout_mask<T: Scalar>(n: usize, p: f64, rng: &mut impl rand::RngCore) -> Vec<T> {
    let keep = T::lift(1.0 / (1.0 - p));
    let cut = (p * 4_294_967_296.0) as u64;
    (0..n)
        .map(|_| if (rng.next_u32() as u64) < cut { T::zero() } else { keep })
        .collect()
}

pub(crate) fn mul_inplace<T: Scalar>(x: &mut [T], mask: &[T]) {
    for (v, &m) in x.iter_mut().zip(mask) {
        *v = *v * m;
    }
}

/// Non-overlapping max-pool over each row; trailing elements are dropped.
/// Returns the pooled rows and the flat argmax index for each output.
pub(crate) fn maxpool_forward<T: Scalar>(x: &[T], rows: usize, len: usize, pool: usize) -> (Vec<T>, Vec<u32>) {
    let out_len = len / pool;
    let mut y = Vec::with_capacity(rows * out_len);
    let mut arg = Vec::with_capacity(rows * out_len);
    for r in 0..rows {
        let row = &x[r * len..][..len];
        for o in 0..out_len {
            let mut best = o * pool;
            for i in o * pool + 1..(o + 1) * pool {
                if row[i] > row[best] {
                    best = i;
                }
            }
            y.push(row[best]);
            arg.push((r * len + best) as u32);
        }
    }
    (y, arg)
}

pub(crate) fn maxpool_backward<T: Scalar>(dy: &[T], arg: &[u32], in_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); in_len];
    for (&g, &i) in dy.iter().zip(arg) {
        dx[i as usize] = dx[i as usize] + g;
    }
    dx
}

/// `y[b] = W x[b] + bias` with `W` stored `[out][in]`.
pub(crate) fn fc_forward<T: Scalar>(x: &[T], w: &[T], bias: &[T], batch: usize, inp: usize, out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(batch * out);
    for b in 0..batch {
        let xr = &x[b * inp..][..inp];
        for o in 0..out {
            let wr = &w[o * inp..][..inp];
            y.push(dot(wr, xr) + bias[o]);
        }
    }
    y
}

/// Returns `(dw, dbias, dx)`.
pub(crate) fn fc_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    batch: usize,
    inp: usize,
    out: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); out * inp];
    let mut db = vec![T::zero(); out];
    let mut dx = vec![T::zero(); batch * inp];
    for b in 0..batch {
        let xr = &x[b * inp..][..inp];
        let dxr = &mut dx[b * inp..][..inp];
        for o in 0..out {
            let g = dy[b * out + o];
            db[o] = db[o] + g;
            let wr = &w[o * inp..][..inp];
            let dwr = &mut dw[o * inp..][..inp];
            for ((dwv, &xv), (dxv, &wv)) in dwr.iter_mut().zip(xr).zip(dxr.iter_mut().zip(wr)) {
                *dwv = *dwv + g * xv;
                *dxv = *dxv + g * wv;
            }
        }
    }
    (dw, db, dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn delta_kernel_is_identity() {
        let x: Vec<f64> = (0..10).map(|v| v as f64 - 3.0).collect();
        let d = ConvDims { batch: 1, in_ch: 1, out_ch: 1, len: 10, kernel: 5 };
        let y = conv_forward(&x, &[0.0, 0.0, 1.0, 0.0, 0.0], &d);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let d = ConvDims { batch: 2, in_ch: 3, out_ch: 2, len: 9, kernel: 3 };
        let x: Vec<f64> = (0..54).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..18).map(|v| ((v * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let y = conv_forward(&x, &w, &d);
        for b in 0..2 {
            for o in 0..2 {
                for t in 0..9isize {
                    let mut s = 0.0;
                    for i in 0..3 {
                        for j in 0..3isize {
                            let p = t + j - 1;
                            if (0..9).contains(&p) {
                                s += w[(o * 3 + i) * 3 + j as usize] * x[(b * 3 + i) * 9 + p as usize];
                            }
                        }
                    }
                    assert!((y[(b * 2 + o) * 9 + t as usize] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn pool_drops_tail_and_routes_gradient() {
        let x = [1.0f64, 3.0, 2.0, 0.0, 5.0];
        let (y, arg) = maxpool_forward(&x, 1, 5, 2);
        assert_eq!(y, vec![3.0, 2.0]);
        let dx = maxpool_backward(&[1.0, 2.0], &arg, 5);
        assert_eq!(dx, vec![0.0, 1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_rate_is_close_to_p() {
        let mut r = rng::seeded(5);
        let m: Vec<f32> = dropout_mask(10_000, 0.2, &mut r);
        let zeros = m.iter().filter(|&&v| v == 0.0).count() as f64 / 1e4;
        assert!((zeros - 0.2).abs() < 0.02, "{zeros}");
        assert!(m.iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-6));
    }

    #[test]
    fn bn_train_normalizes() {
        let x: Vec<f64> = (0..24).map(|v| (v as f64).sin() * 3.0 + 1.0).collect();
        let (y, c) = bn_forward_train(&x, &[1.0, 1.0], &[0.0, 0.0], 3, 2, 4, 0.0);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y[(b * 2 + ch) * 4..][..4].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 12.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 12.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
        assert_eq!(c.count, 12);
    }
}
