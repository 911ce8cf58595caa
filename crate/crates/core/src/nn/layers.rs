use rand::Rng;

use super::params::BatchNormParams;
use super::ForwardMode;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running statistic in the moving average.
pub const BN_MOMENTUM: f64 = 0.9;

/// Batch-statistics intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnBatchCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<f64>,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
    pub count: f64,
}

/// Splits `[N, C, ...]` into (N, C, spatial).
fn bn_layout<T: Element>(x: &Tensor<T>, features: usize) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 || x.shape()[1] != features {
        return Err(Error::dim(format!(
            "batch norm over {features} features cannot take input {:?}",
            x.shape()
        )));
    }
    let n = x.shape()[0];
    Ok((n, features, x.len() / (n * features)))
}

/// Normalizes `x` in place with batch statistics.
pub(crate) fn bn_train_in_place<T: Element>(
    x: &mut [T],
    n: usize,
    c: usize,
    s: usize,
    bn: &BatchNormParams<T>,
) -> BnBatchCache<T> {
    let count = (n * s) as f64;
    let mut inv_std = vec![0.0; c];
    let mut means = vec![0.0; c];
    let mut vars = vec![0.0; c];
    let mut xhat = vec![T::zero(); x.len()];
    for ch in 0..c {
        let mut sum = 0.0;
        for b in 0..n {
            sum += x[(b * c + ch) * s..(b * c + ch + 1) * s].iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mean = sum / count;
        let mut sq = 0.0;
        for b in 0..n {
            sq += x[(b * c + ch) * s..(b * c + ch + 1) * s]
                .iter()
                .map(|v| (v.as_f64() - mean).powi(2))
                .sum::<f64>();
        }
        let var = sq / count;
        let istd = 1.0 / (var + BN_EPSILON).sqrt();
        inv_std[ch] = istd;
        means[ch] = mean;
        vars[ch] = var;
        let (g, bt) = (bn.gamma.data()[ch], bn.beta.data()[ch]);
        let (mean_t, istd_t) = (T::from_f64(mean), T::from_f64(istd));
        for b in 0..n {
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            for (v, h) in x[range.clone()].iter_mut().zip(&mut xhat[range]) {
                *h = (*v - mean_t) * istd_t;
                *v = *h * g + bt;
            }
        }
    }
    BnBatchCache {
        xhat,
        inv_std,
        means,
        vars,
        count,
    }
}

/// Moves the running statistics towards the batch statistics of `cache`.
pub(crate) fn update_running_stats<T: Element>(bn: &mut BatchNormParams<T>, cache: &BnBatchCache<T>) {
    let count = cache.count;
    for ch in 0..bn.features() {
        let var = cache.vars[ch];
        let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
        let rm = &mut bn.running_mean.data_mut()[ch];
        *rm = T::from_f64(BN_MOMENTUM * rm.as_f64() + (1.0 - BN_MOMENTUM) * cache.means[ch]);
        let rv = &mut bn.running_var.data_mut()[ch];
        *rv = T::from_f64(BN_MOMENTUM * rv.as_f64() + (1.0 - BN_MOMENTUM) * unbiased);
    }
}

/// Affine normalization with the running statistics.
pub(crate) fn bn_running_in_place<T: Element>(x: &mut [T], n: usize, c: usize, s: usize, bn: &BatchNormParams<T>) {
    for ch in 0..c {
        let (scale, shift) = running_affine(bn, ch);
        for b in 0..n {
            for v in &mut x[(b * c + ch) * s..(b * c + ch + 1) * s] {
                *v = *v * scale + shift;
            }
        }
    }
}

fn running_affine<T: Element>(bn: &BatchNormParams<T>, ch: usize) -> (T, T) {
    let istd = 1.0 / (bn.running_var.data()[ch].as_f64() + BN_EPSILON).sqrt();
    let g = bn.gamma.data()[ch].as_f64();
    let scale = g * istd;
    let shift = bn.beta.data()[ch].as_f64() - bn.running_mean.data()[ch].as_f64() * scale;
    (T::from_f64(scale), T::from_f64(shift))
}

/// Backward through batch-statistics normalization. Replaces `grad` (w.r.t.
/// the normalized output) with the gradient w.r.t. the input and returns
/// (d gamma, d beta).
pub(crate) fn bn_train_backward<T: Element>(
    grad: &mut [T],
    n: usize,
    c: usize,
    s: usize,
    cache: &BnBatchCache<T>,
    gamma: &Tensor<T>,
) -> (Vec<T>, Vec<T>) {
    let count = (n * s) as f64;
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mut sum_g, mut sum_gx) = (0.0, 0.0);
        for b in 0..n {
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            for (g, h) in grad[range.clone()].iter().zip(&cache.xhat[range]) {
                sum_g += g.as_f64();
                sum_gx += g.as_f64() * h.as_f64();
            }
        }
        dgamma[ch] = T::from_f64(sum_gx);
        dbeta[ch] = T::from_f64(sum_g);
        let k = gamma.data()[ch].as_f64() * cache.inv_std[ch] / count;
        for b in 0..n {
            let range = (b * c + ch) * s..(b * c + ch + 1) * s;
            for (g, h) in grad[range.clone()].iter_mut().zip(&cache.xhat[range]) {
                let v = k * (count * g.as_f64() - sum_g - h.as_f64() * sum_gx);
                *g = T::from_f64(v);
            }
        }
    }
    (dgamma, dbeta)
}

/// Backward through running-statistics normalization, input gradient only.
pub(crate) fn bn_running_backward<T: Element>(grad: &mut [T], n: usize, c: usize, s: usize, bn: &BatchNormParams<T>) {
    for ch in 0..c {
        let (scale, _) = running_affine(bn, ch);
        for b in 0..n {
            for g in &mut grad[(b * c + ch) * s..(b * c + ch + 1) * s] {
                *g *= scale;
            }
        }
    }
}

/// Batch normalization over the feature axis (axis 1) of `[N, C]` or
/// `[N, C, H, W]` input.
///
/// Train mode normalizes with batch statistics and updates the running
/// statistics; infer mode applies the running statistics.
pub fn batchnorm_forward<T: Element>(
    x: &Tensor<T>,
    bn: &mut BatchNormParams<T>,
    mode: ForwardMode,
) -> Result<Tensor<T>> {
    let (n, c, s) = bn_layout(x, bn.features())?;
    let mut y = x.clone();
    match mode {
        ForwardMode::Train => {
            if n < 2 {
                return Err(Error::param("train-mode batch normalization needs at least 2 samples"));
            }
            let cache = bn_train_in_place(y.data_mut(), n, c, s, bn);
            update_running_stats(bn, &cache);
        }
        ForwardMode::Infer => bn_running_in_place(y.data_mut(), n, c, s, bn),
    }
    Ok(y)
}

pub(crate) fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::param(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1-rate)`.
pub(crate) fn dropout_mask<T: Element, R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

/// Inverted dropout; identity in infer mode or at rate 0.
pub fn dropout<T: Element, R: Rng + ?Sized>(
    x: &Tensor<T>,
    rate: f64,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    check_dropout_rate(rate)?;
    if mode == ForwardMode::Infer || rate == 0.0 {
        return Ok(x.clone());
    }
    let mask: Vec<T> = dropout_mask(x.len(), rate, rng);
    let mut y = x.clone();
    for (v, m) in y.data_mut().iter_mut().zip(mask) {
        *v *= m;
    }
    Ok(y)
}

/// Row-wise softmax of `[N, K]` logits.
pub fn softmax_rows<T: Element>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}
