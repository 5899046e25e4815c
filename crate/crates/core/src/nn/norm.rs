//! Instance and batch normalization.
//!
//! Both normalize per channel with biased variance and share the backward
//! formula; they differ in which axes the statistics pool over. Batch norm in
//! training mode couples the whole mini-batch and maintains running statistics
//! that are carried inside the parameter vector.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Variance guard. The simulator runs in f64, so this can sit well below the
/// usual single-precision 1e-5 and keeps normalization nearly shift-exact.
pub const NORM_EPS: f64 = 1e-9;

/// Fraction of the fresh batch statistic blended into the running value.
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel statistics frozen at forward time, reused by backward.
#[derive(Debug, Clone)]
pub struct NormCache<F> {
    pub mean: Vec<F>,
    pub invstd: Vec<F>,
}

fn channel_stats<F: Scalar>(values: &[&[F]]) -> (F, F) {
    let n = values.iter().map(|s| s.len()).sum::<usize>();
    let inv_n = F::one() / F::from_f64_lossy(n as f64);
    let mut sum = F::zero();
    for s in values {
        for &v in *s {
            sum += v;
        }
    }
    let mean = sum * inv_n;
    let mut sq = F::zero();
    for s in values {
        for &v in *s {
            let d = v - mean;
            sq += d * d;
        }
    }
    (mean, sq * inv_n)
}

/// Normalizes each channel of one sample over its own spatial extent.
/// Returns the output and the cache needed for backward.
pub fn instance_norm_forward<F: Scalar>(x: &Tensor<F>, gamma: &[F], beta: &[F]) -> (Tensor<F>, NormCache<F>) {
    let c = x.dims()[0];
    let eps = F::from_f64_lossy(NORM_EPS);
    let mut out = Tensor::zeros(x.dims());
    let mut cache = NormCache { mean: Vec::with_capacity(c), invstd: Vec::with_capacity(c) };
    for ch in 0..c {
        let (mean, var) = channel_stats(&[x.channel(ch)]);
        let invstd = F::one() / (var + eps).sqrt();
        cache.mean.push(mean);
        cache.invstd.push(invstd);
        let (g, b) = (gamma[ch], beta[ch]);
        for (o, &v) in out.channel_mut(ch).iter_mut().zip(x.channel(ch)) {
            *o = g * (v - mean) * invstd + b;
        }
    }
    (out, cache)
}

/// The normalized pre-affine activations; exposed for shift-invariance checks.
pub fn instance_normalize<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let c = x.dims()[0];
    let ones = vec![F::one(); c];
    let zeros = vec![F::zero(); c];
    instance_norm_forward(x, &ones, &zeros).0
}

pub fn instance_norm_backward<F: Scalar>(
    x: &Tensor<F>,
    gamma: &[F],
    cache: &NormCache<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let c = x.dims()[0];
    let n = x.dims()[1] * x.dims()[2];
    let inv_n = F::one() / F::from_f64_lossy(n as f64);
    let mut dx = Tensor::zeros(x.dims());
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for ch in 0..c {
        let (mean, invstd, g) = (cache.mean[ch], cache.invstd[ch], gamma[ch]);
        let xs = x.channel(ch);
        let dys = dy.channel(ch);
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for (&xv, &dyv) in xs.iter().zip(dys) {
            let xhat = (xv - mean) * invstd;
            let dxhat = g * dyv;
            dgamma[ch] += dyv * xhat;
            dbeta[ch] += dyv;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let m1 = sum_dxhat * inv_n;
        let m2 = sum_dxhat_xhat * inv_n;
        for ((dst, &xv), &dyv) in dx.channel_mut(ch).iter_mut().zip(xs).zip(dys) {
            let xhat = (xv - mean) * invstd;
            *dst = invstd * (g * dyv - m1 - xhat * m2);
        }
    }
    (dx, dgamma, dbeta)
}

/// Batch statistics produced by a training-mode batch-norm forward; the
/// trainer folds them into the running entries of the parameter vector.
#[derive(Debug, Clone)]
pub struct BatchStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

/// Training-mode batch norm over a whole mini-batch (statistics pool over
/// batch and space). Returns outputs, the backward cache and batch statistics.
pub fn batch_norm_forward_train<F: Scalar>(
    xs: &[Tensor<F>],
    gamma: &[F],
    beta: &[F],
) -> (Vec<Tensor<F>>, NormCache<F>, BatchStats<F>) {
    let c = xs[0].dims()[0];
    let eps = F::from_f64_lossy(NORM_EPS);
    let mut cache = NormCache { mean: Vec::with_capacity(c), invstd: Vec::with_capacity(c) };
    let mut stats = BatchStats { mean: Vec::with_capacity(c), var: Vec::with_capacity(c) };
    let mut outs: Vec<Tensor<F>> = xs.iter().map(|x| Tensor::zeros(x.dims())).collect();
    for ch in 0..c {
        let planes: Vec<&[F]> = xs.iter().map(|x| x.channel(ch)).collect();
        let (mean, var) = channel_stats(&planes);
        let invstd = F::one() / (var + eps).sqrt();
        cache.mean.push(mean);
        cache.invstd.push(invstd);
        stats.mean.push(mean);
        stats.var.push(var);
        let (g, b) = (gamma[ch], beta[ch]);
        for (x, out) in xs.iter().zip(outs.iter_mut()) {
            for (o, &v) in out.channel_mut(ch).iter_mut().zip(x.channel(ch)) {
                *o = g * (v - mean) * invstd + b;
            }
        }
    }
    (outs, cache, stats)
}

/// Evaluation-mode batch norm: normalizes with the stored running statistics.
pub fn batch_norm_forward_eval<F: Scalar>(
    x: &Tensor<F>,
    gamma: &[F],
    beta: &[F],
    running_mean: &[F],
    running_var: &[F],
) -> (Tensor<F>, NormCache<F>) {
    let c = x.dims()[0];
    let eps = F::from_f64_lossy(NORM_EPS);
    let mut out = Tensor::zeros(x.dims());
    let mut cache = NormCache { mean: Vec::with_capacity(c), invstd: Vec::with_capacity(c) };
    for ch in 0..c {
        let mean = running_mean[ch];
        let invstd = F::one() / (running_var[ch] + eps).sqrt();
        cache.mean.push(mean);
        cache.invstd.push(invstd);
        let (g, b) = (gamma[ch], beta[ch]);
        for (o, &v) in out.channel_mut(ch).iter_mut().zip(x.channel(ch)) {
            *o = g * (v - mean) * invstd + b;
        }
    }
    (out, cache)
}

/// Training-mode backward across the batch; statistics gradients flow to every
/// sample that contributed to them.
pub fn batch_norm_backward_train<F: Scalar>(
    xs: &[Tensor<F>],
    gamma: &[F],
    cache: &NormCache<F>,
    dys: &[Tensor<F>],
) -> (Vec<Tensor<F>>, Vec<F>, Vec<F>) {
    let c = xs[0].dims()[0];
    let n: usize = xs.iter().map(|x| x.dims()[1] * x.dims()[2]).sum();
    let inv_n = F::one() / F::from_f64_lossy(n as f64);
    let mut dxs: Vec<Tensor<F>> = xs.iter().map(|x| Tensor::zeros(x.dims())).collect();
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for ch in 0..c {
        let (mean, invstd, g) = (cache.mean[ch], cache.invstd[ch], gamma[ch]);
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for (x, dy) in xs.iter().zip(dys) {
            for (&xv, &dyv) in x.channel(ch).iter().zip(dy.channel(ch)) {
                let xhat = (xv - mean) * invstd;
                dgamma[ch] += dyv * xhat;
                dbeta[ch] += dyv;
                sum_dxhat += g * dyv;
                sum_dxhat_xhat += g * dyv * xhat;
            }
        }
        let m1 = sum_dxhat * inv_n;
        let m2 = sum_dxhat_xhat * inv_n;
        for ((x, dy), dx) in xs.iter().zip(dys).zip(dxs.iter_mut()) {
            for ((dst, &xv), &dyv) in dx.channel_mut(ch).iter_mut().zip(x.channel(ch)).zip(dy.channel(ch)) {
                let xhat = (xv - mean) * invstd;
                *dst = invstd * (g * dyv - m1 - xhat * m2);
            }
        }
    }
    (dxs, dgamma, dbeta)
}

/// Evaluation-mode backward: running statistics are constants.
pub fn batch_norm_backward_eval<F: Scalar>(
    x: &Tensor<F>,
    gamma: &[F],
    cache: &NormCache<F>,
    dy: &Tensor<F>,
) -> (Tensor<F>, Vec<F>, Vec<F>) {
    let c = x.dims()[0];
    let mut dx = Tensor::zeros(x.dims());
    let mut dgamma = vec![F::zero(); c];
    let mut dbeta = vec![F::zero(); c];
    for ch in 0..c {
        let (mean, invstd, g) = (cache.mean[ch], cache.invstd[ch], gamma[ch]);
        for ((dst, &xv), &dyv) in dx.channel_mut(ch).iter_mut().zip(x.channel(ch)).zip(dy.channel(ch)) {
            let xhat = (xv - mean) * invstd;
            dgamma[ch] += dyv * xhat;
            dbeta[ch] += dyv;
            *dst = g * dyv * invstd;
        }
    }
    (dx, dgamma, dbeta)
}
