use std::collections::BTreeMap;

use rand::Rng;

use super::layers::{
    bn_running_backward, bn_running_in_place, bn_train_backward, bn_train_in_place, check_dropout_rate,
    dropout_mask, softmax_rows, update_running_stats, BnBatchCache,
};
use super::params::{Layer, ParamSet, TensorRole};
use super::spec::LayerKind;
use crate::error::{Error, Result};
use crate::tensor::{conv_backward_raw, conv_forward_raw, gemm, ConvGeometry, Element, Tensor};

/// Samples per chunk when scoring large patch sets in infer mode.
const INFER_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics for trainable BN layers, dropout active.
    Train,
    /// Running statistics everywhere, no dropout.
    Infer,
}

#[derive(Debug, Clone)]
enum BnCache<T> {
    Batch(BnBatchCache<T>),
    Running,
}

#[derive(Debug, Clone)]
struct LayerCache<T> {
    input: Tensor<T>,
    bn: Option<BnCache<T>>,
    activated: Option<Vec<T>>,
    dropout: Option<Vec<T>>,
}

/// Intermediates of a forward pass needed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    mode: ForwardMode,
    first_cached: usize,
    layers: Vec<LayerCache<T>>,
}

impl<T> ForwardCache<T> {
    pub fn mode(&self) -> ForwardMode {
        self.mode
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Option<Tensor<T>>,
    pub beta: Option<Tensor<T>>,
}

impl<T: Element> LayerGrads<T> {
    pub fn get(&self, role: TensorRole) -> Option<&Tensor<T>> {
        match role {
            TensorRole::Weight => Some(&self.weight),
            TensorRole::Bias => Some(&self.bias),
            TensorRole::Gamma => self.gamma.as_ref(),
            TensorRole::Beta => self.beta.as_ref(),
            TensorRole::RunningMean | TensorRole::RunningVar => None,
        }
    }
}

/// Gradients keyed by (0-based) layer index; frozen layers have no entry.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients<T = f32> {
    pub layers: BTreeMap<usize, LayerGrads<T>>,
}

impl<T: Element> Gradients<T> {
    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn get(&self, layer: usize, role: TensorRole) -> Option<&Tensor<T>> {
        self.layers.get(&layer).and_then(|g| g.get(role))
    }

    pub fn is_finite(&self) -> bool {
        self.layers.values().all(|g| {
            [Some(&g.weight), Some(&g.bias), g.gamma.as_ref(), g.beta.as_ref()]
                .into_iter()
                .flatten()
                .all(|t| t.is_finite())
        })
    }
}

fn check_batch<T: Element>(params: &ParamSet<T>, batch: &Tensor<T>) -> Result<()> {
    let spec = params.spec();
    let p = spec.patch_side;
    match *batch.shape() {
        [_, c, h, w] if c == spec.input_channels && h == p && w == p => Ok(()),
        _ => Err(Error::dim(format!(
            "expected batch [N, {}, {p}, {p}], got {:?}",
            spec.input_channels,
            batch.shape()
        ))),
    }
}

/// Linear part of a layer: convolution or dense product, bias included.
fn linear_forward<T: Element>(layer: &Layer<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    match layer.kind {
        LayerKind::Conv => {
            let geo = conv_geometry(layer, x)?;
            let mut out = vec![T::zero(); geo.out_len()];
            conv_forward_raw(&geo, x.data(), layer.weight.data(), layer.bias.data(), &mut out);
            Tensor::from_vec(&[geo.batch, geo.out_channels, geo.out_height(), geo.out_width()], out)
        }
        LayerKind::Dense => {
            let (out_f, in_f) = (layer.weight.shape()[0], layer.weight.shape()[1]);
            let n = x.shape()[0];
            if x.len() != n * in_f {
                return Err(Error::dim(format!(
                    "dense layer expects {in_f} features per sample, input is {:?}",
                    x.shape()
                )));
            }
            let mut out = vec![T::zero(); n * out_f];
            for row in out.chunks_exact_mut(out_f) {
                row.copy_from_slice(layer.bias.data());
            }
            gemm(false, true, n, out_f, in_f, x.data(), layer.weight.data(), T::one(), &mut out);
            Tensor::from_vec(&[n, out_f], out)
        }
    }
}

fn conv_geometry<T: Element>(layer: &Layer<T>, x: &Tensor<T>) -> Result<ConvGeometry> {
    let w = layer.weight.shape();
    match *x.shape() {
        [n, c, h, wd] if c == w[1] && h >= w[2] && wd >= w[3] => Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: wd,
            out_channels: w[0],
            kernel: w[2],
        }),
        _ => Err(Error::dim(format!(
            "convolution with kernels {w:?} cannot take input {:?}",
            x.shape()
        ))),
    }
}

/// Outcome of running one layer forward.
struct Step<T> {
    output: Tensor<T>,
    cache: Option<LayerCache<T>>,
    batch_stats: Option<BnBatchCache<T>>,
}

#[allow(clippy::too_many_arguments)]
fn layer_forward<T: Element, R: Rng + ?Sized>(
    params: &ParamSet<T>,
    index: usize,
    x: Tensor<T>,
    mode: ForwardMode,
    dropout_rate: f64,
    rng: &mut R,
    keep: bool,
) -> Result<Step<T>> {
    let spec = params.spec();
    let layer = params.layer(index);
    let mut z = linear_forward(layer, &x)?;
    let n = z.shape()[0];
    let c = z.shape()[1];
    let s = z.len() / (n * c);

    let mut bn_cache = None;
    let mut batch_stats = None;
    if let Some(bn) = &layer.bn {
        if mode == ForwardMode::Train && !layer.frozen {
            if n < 2 {
                return Err(Error::param("train-mode batch normalization needs at least 2 samples"));
            }
            let cache = bn_train_in_place(z.data_mut(), n, c, s, bn);
            if keep {
                bn_cache = Some(BnCache::Batch(cache.clone()));
            }
            batch_stats = Some(cache);
        } else {
            bn_running_in_place(z.data_mut(), n, c, s, bn);
            bn_cache = Some(BnCache::Running);
        }
    }

    let hidden = index + 1 < spec.depth();
    let mut activated = None;
    let mut mask = None;
    if hidden {
        for v in z.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        if keep {
            activated = Some(z.data().to_vec());
        }
        if spec.has_dropout(index) && mode == ForwardMode::Train && dropout_rate > 0.0 {
            let m: Vec<T> = dropout_mask(z.len(), dropout_rate, rng);
            for (v, &k) in z.data_mut().iter_mut().zip(&m) {
                *v *= k;
            }
            if keep {
                mask = Some(m);
            }
        }
    }

    let cache = keep.then(|| LayerCache {
        input: x,
        bn: bn_cache,
        activated,
        dropout: mask,
    });
    Ok(Step {
        output: z,
        cache,
        batch_stats,
    })
}

/// Runs layers `start..` on activations `x` (the input of layer `start`).
/// Returns logits, per-layer caches from `first_cached` on, and batch
/// statistics to fold into running averages.
#[allow(clippy::type_complexity)]
fn run_from<T: Element, R: Rng + ?Sized>(
    params: &ParamSet<T>,
    mut x: Tensor<T>,
    start: usize,
    mode: ForwardMode,
    dropout_rate: f64,
    rng: &mut R,
    first_cached: usize,
) -> Result<(Tensor<T>, Vec<LayerCache<T>>, Vec<(usize, BnBatchCache<T>)>)> {
    check_dropout_rate(dropout_rate)?;
    let mut caches = Vec::new();
    let mut stats = Vec::new();
    for index in start..params.depth() {
        let step = layer_forward(params, index, x, mode, dropout_rate, rng, index >= first_cached)?;
        if let Some(c) = step.cache {
            caches.push(c);
        }
        if let Some(bs) = step.batch_stats {
            stats.push((index, bs));
        }
        x = step.output;
    }
    Ok((x, caches, stats))
}

/// Full forward pass on a `[N, C, P, P]` patch batch, returning `[N, 2]`
/// class probabilities and the cache for [`backward`].
///
/// In train mode non-frozen BN layers use batch statistics and update their
/// running averages; frozen layers always use their running statistics.
pub fn forward<T: Element, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    batch: &Tensor<T>,
    mode: ForwardMode,
    dropout_rate: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    check_batch(params, batch)?;
    forward_from(params, batch.clone(), 0, mode, dropout_rate, rng)
}

/// Forward pass starting at layer `start`, given that layer's input
/// activations (for instance precomputed frozen features).
pub fn forward_from<T: Element, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    input: Tensor<T>,
    start: usize,
    mode: ForwardMode,
    dropout_rate: f64,
    rng: &mut R,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let first_cached = match mode {
        ForwardMode::Train => params.first_trainable().unwrap_or(params.depth()).max(start),
        ForwardMode::Infer => params.depth(),
    };
    let (logits, layers, stats) = run_from(params, input, start, mode, dropout_rate, rng, first_cached)?;
    for (index, cache) in &stats {
        if let Some(bn) = params.layers_mut()[*index].bn.as_mut() {
            update_running_stats(bn, cache);
        }
    }
    let probs = softmax_rows(&logits);
    Ok((
        probs,
        ForwardCache {
            mode,
            first_cached,
            layers,
        },
    ))
}

/// Infer mode never draws random numbers; this satisfies the signature.
fn unused_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

/// Infer-mode activations entering layer `end` (running statistics, no
/// dropout). `features(params, batch, 0)` is the batch itself.
pub fn features<T: Element>(params: &ParamSet<T>, batch: &Tensor<T>, end: usize) -> Result<Tensor<T>> {
    check_batch(params, batch)?;
    let mut x = batch.clone();
    let mut rng = unused_rng();
    for index in 0..end.min(params.depth()) {
        x = layer_forward(params, index, x, ForwardMode::Infer, 0.0, &mut rng, false)?.output;
    }
    Ok(x)
}

/// Infer-mode class probabilities for activations entering layer `start`,
/// processed in bounded chunks.
pub fn predict_from<T: Element>(params: &ParamSet<T>, input: &Tensor<T>, start: usize) -> Result<Tensor<T>> {
    let n = input.shape()[0];
    let per = input.len() / n;
    let mut rng = unused_rng();
    let mut out = Vec::with_capacity(n * 2);
    for lo in (0..n).step_by(INFER_CHUNK) {
        let hi = (lo + INFER_CHUNK).min(n);
        let mut shape = input.shape().to_vec();
        shape[0] = hi - lo;
        let chunk = Tensor::from_vec(&shape, input.data()[lo * per..hi * per].to_vec())?;
        let (logits, _, _) = run_from(params, chunk, start, ForwardMode::Infer, 0.0, &mut rng, params.depth())?;
        out.extend_from_slice(softmax_rows(&logits).data());
    }
    Tensor::from_vec(&[n, 2], out)
}

/// Infer-mode class probabilities for a patch batch.
pub fn predict<T: Element>(params: &ParamSet<T>, batch: &Tensor<T>) -> Result<Tensor<T>> {
    check_batch(params, batch)?;
    predict_from(params, batch, 0)
}

/// Gradients of the loss with respect to every non-frozen parameter, given
/// the loss gradient with respect to the pre-softmax logits.
pub fn backward<T: Element>(
    params: &ParamSet<T>,
    cache: &ForwardCache<T>,
    grad_logits: &Tensor<T>,
) -> Result<Gradients<T>> {
    if cache.mode != ForwardMode::Train {
        return Err(Error::state("backward needs the cache of a train-mode forward pass"));
    }
    let Some(lowest) = params.first_trainable() else {
        return Ok(Gradients::default());
    };
    if lowest < cache.first_cached || cache.first_cached + cache.layers.len() != params.depth() {
        return Err(Error::state(format!(
            "cache covers layers {}.. but layer {} is trainable",
            cache.first_cached + 1,
            lowest + 1
        )));
    }

    let mut grads = Gradients::default();
    let mut g = grad_logits.data().to_vec();
    for index in (lowest..params.depth()).rev() {
        let layer = params.layer(index);
        let lc = &cache.layers[index - cache.first_cached];
        if let Some(mask) = &lc.dropout {
            for (v, &m) in g.iter_mut().zip(mask) {
                *v *= m;
            }
        }
        if let Some(act) = &lc.activated {
            for (v, &a) in g.iter_mut().zip(act) {
                if a <= T::zero() {
                    *v = T::zero();
                }
            }
        }
        let out_c = layer.bias.len();
        let n = lc.input.shape()[0];
        let s = g.len() / (n * out_c);
        let (mut dgamma, mut dbeta) = (None, None);
        match (&lc.bn, &layer.bn) {
            (Some(BnCache::Batch(bc)), Some(bn)) => {
                let (dg, db) = bn_train_backward(&mut g, n, out_c, s, bc, &bn.gamma);
                dgamma = Some(Tensor::from_vec(&[out_c], dg)?);
                dbeta = Some(Tensor::from_vec(&[out_c], db)?);
            }
            (Some(BnCache::Running), Some(bn)) => bn_running_backward(&mut g, n, out_c, s, bn),
            _ => {}
        }

        let need_input = index > lowest;
        let mut gw = vec![T::zero(); layer.weight.len()];
        let mut gb = vec![T::zero(); out_c];
        let mut gin = need_input.then(|| vec![T::zero(); lc.input.len()]);
        match layer.kind {
            LayerKind::Conv => {
                let geo = conv_geometry(layer, &lc.input)?;
                conv_backward_raw(
                    &geo,
                    lc.input.data(),
                    layer.weight.data(),
                    &g,
                    gin.as_deref_mut(),
                    &mut gw,
                    &mut gb,
                );
            }
            LayerKind::Dense => {
                let in_f = layer.weight.shape()[1];
                for row in g.chunks_exact(out_c) {
                    for (b, &v) in gb.iter_mut().zip(row) {
                        *b += v;
                    }
                }
                // dW[out, in] = dZ^T[out, N] * X[N, in]
                gemm(true, false, out_c, in_f, n, &g, lc.input.data(), T::zero(), &mut gw);
                if let Some(gi) = gin.as_deref_mut() {
                    // dX[N, in] = dZ[N, out] * W[out, in]
                    gemm(false, false, n, in_f, out_c, &g, layer.weight.data(), T::zero(), gi);
                }
            }
        }
        if !layer.frozen {
            grads.layers.insert(
                index,
                LayerGrads {
                    weight: Tensor::from_vec(layer.weight.shape(), gw)?,
                    bias: Tensor::from_vec(&[out_c], gb)?,
                    gamma: dgamma,
                    beta: dbeta,
                },
            );
        }
        match gin {
            Some(gi) => g = gi,
            None => break,
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, NetworkSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec() -> NetworkSpec {
        NetworkSpec {
            input_channels: 2,
            patch_side: 12,
            kernel: 3,
            conv_widths: vec![3, 3],
            dense_widths: vec![8, 4, 2],
        }
    }

    fn random_batch<T: Element>(n: usize, c: usize, side: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
        let len = n * c * side * side;
        Tensor::from_vec(&[n, c, side, side], (0..len).map(|_| T::from_f64(rng.random_range(0.0..1.0))).collect())
            .unwrap()
    }

    #[test]
    fn probabilities_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = NetworkSpec::standard(vec![4; 12]).unwrap();
        let mut p: ParamSet = build_network(&spec, &mut rng).unwrap();
        let x = random_batch::<f32>(5, 2, 32, &mut rng);
        for mode in [ForwardMode::Train, ForwardMode::Infer] {
            let (probs, _) = forward(&mut p, &x, mode, 0.3, &mut rng).unwrap();
            assert_eq!(probs.shape(), &[5, 2]);
            for row in probs.data().chunks(2) {
                assert!((row[0] + row[1] - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v > 0.0 && v < 1.0));
            }
        }
    }

    #[test]
    fn equal_logits_give_half_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p: ParamSet<f64> = build_network(&tiny_spec(), &mut rng).unwrap();
        let last = p.depth() - 1;
        p.layers_mut()[last].weight = Tensor::zeros(&[2, 4]);
        let x = random_batch::<f64>(3, 2, 12, &mut rng);
        let probs = predict(&p, &x).unwrap();
        assert!(probs.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn infer_mode_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = NetworkSpec::standard(vec![4; 12]).unwrap();
        let mut p: ParamSet = build_network(&spec, &mut rng).unwrap();
        let x = random_batch::<f32>(4, 2, 32, &mut rng);
        let (a, _) = forward(&mut p, &x, ForwardMode::Infer, 0.3, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let (b, _) = forward(&mut p, &x, ForwardMode::Infer, 0.3, &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        assert_eq!(a, b);
        assert_eq!(predict(&p, &x).unwrap(), a);
    }

    #[test]
    fn wrong_spatial_size_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p: ParamSet = build_network(&NetworkSpec::default(), &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 2, 30, 30]);
        assert!(matches!(
            forward(&mut p, &x, ForwardMode::Infer, 0.0, &mut rng),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p: ParamSet<f64> = build_network(&tiny_spec(), &mut rng).unwrap();
        let x = random_batch::<f64>(4, 2, 12, &mut rng);
        let (probs, cache) = forward(&mut p, &x, ForwardMode::Train, 0.3, &mut rng).unwrap();
        let grads = backward(&p, &cache, &Tensor::zeros(probs.shape())).unwrap();
        assert_eq!(grads.layers.len(), p.depth());
        for g in grads.layers.values() {
            assert!(g.weight.data().iter().chain(g.bias.data()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn all_frozen_gives_empty_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p: ParamSet<f64> = build_network(&tiny_spec(), &mut rng).unwrap();
        for l in 0..p.depth() {
            p.set_frozen(l, true);
        }
        let x = random_batch::<f64>(4, 2, 12, &mut rng);
        let (probs, cache) = forward(&mut p, &x, ForwardMode::Train, 0.0, &mut rng).unwrap();
        assert!(backward(&p, &cache, &probs).unwrap().is_empty());
    }

    #[test]
    fn infer_cache_is_a_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p: ParamSet<f64> = build_network(&tiny_spec(), &mut rng).unwrap();
        let x = random_batch::<f64>(4, 2, 12, &mut rng);
        let (probs, cache) = forward(&mut p, &x, ForwardMode::Infer, 0.0, &mut rng).unwrap();
        assert!(matches!(backward(&p, &cache, &probs), Err(Error::State(_))));
    }

    #[test]
    fn frozen_layers_get_no_gradient_and_keep_running_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p: ParamSet<f64> = build_network(&tiny_spec(), &mut rng).unwrap();
        p.set_frozen(0, true);
        p.set_frozen(1, true);
        let before = p.clone();
        let x = random_batch::<f64>(4, 2, 12, &mut rng);
        let (probs, cache) = forward(&mut p, &x, ForwardMode::Train, 0.0, &mut rng).unwrap();
        assert!(p.layer_bits_equal(&before, 0) && p.layer_bits_equal(&before, 1));
        assert!(!p.layer_bits_equal(&before, 2), "trainable BN statistics should move");
        let grads = backward(&p, &cache, &probs).unwrap();
        assert_eq!(grads.layers.keys().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
    }

    #[test]
    fn forward_from_features_matches_full_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = NetworkSpec::standard(vec![4; 12]).unwrap();
        let mut p: ParamSet = build_network(&spec, &mut rng).unwrap();
        for l in 0..12 {
            p.set_frozen(l, true);
        }
        let x = random_batch::<f32>(3, 2, 32, &mut rng);
        let feats = features(&p, &x, 12).unwrap();
        let mut q = p.clone();
        let (a, _) = forward(&mut p, &x, ForwardMode::Train, 0.0, &mut rng).unwrap();
        let (b, _) = forward_from(&mut q, feats.clone(), 12, ForwardMode::Train, 0.0, &mut rng).unwrap();
        assert_eq!(a, b);
        assert_eq!(predict(&p, &x).unwrap(), predict_from(&p, &feats, 12).unwrap());
    }
}
