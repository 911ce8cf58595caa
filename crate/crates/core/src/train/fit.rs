use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{adam_step, cross_entropy_loss, lr_at, AdamState, TrainConfig};
use crate::data::PatchSet;
use crate::error::{Error, Result};
use crate::infer::roc_auc;
use crate::nn::{backward, features, forward_from, predict_from, ForwardMode, ParamSet};
use crate::tensor::Tensor;

/// Precomputed frozen-prefix activations are kept only below this many
/// floats; larger sets recompute the prefix per mini-batch.
const FEATURE_CACHE_FLOATS: usize = 1 << 27;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters at the best validation AUC.
    pub best: ParamSet<f32>,
    pub history: Vec<EpochRecord>,
    /// Epoch of `best`; 0 when no epoch ran.
    pub best_epoch: usize,
    /// Validation AUC of `best`.
    pub best_val_auc: f64,
}

impl FitOutcome {
    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Verdict {
    Improved,
    Continue,
    Stop,
}

/// Best-so-far tracking on validation AUC with a patience counter.
#[derive(Debug, Clone)]
struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    epochs: usize,
    stale: usize,
}

impl EarlyStopping {
    fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: None, epochs: 0, stale: 0 }
    }

    fn observe(&mut self, auc: f64) -> Verdict {
        self.epochs += 1;
        if self.best.is_none_or(|(_, b)| auc > b) {
            self.best = Some((self.epochs, auc));
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }

    #[cfg(test)]
    fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Activations of a patch set entering layer `start`, either held in memory
/// or recomputed from the raw patches when needed.
enum Inputs<'a> {
    Cached(Tensor<f32>),
    Raw(&'a Tensor<f32>),
}

impl<'a> Inputs<'a> {
    fn prepare(params: &ParamSet<f32>, patches: &'a Tensor<f32>, start: usize) -> Result<Self> {
        if start == 0 {
            return Ok(Inputs::Raw(patches));
        }
        let spec = params.spec();
        let side = spec.patch_side - start * (spec.kernel - 1);
        let per = spec.out_width(start - 1) * side * side;
        if patches.shape()[0].saturating_mul(per) > FEATURE_CACHE_FLOATS {
            return Ok(Inputs::Raw(patches));
        }
        Ok(Inputs::Cached(features(params, patches, start)?))
    }

    fn gather(&self, params: &ParamSet<f32>, rows: &[usize], start: usize) -> Result<Tensor<f32>> {
        let source = match self {
            Inputs::Cached(t) => t,
            Inputs::Raw(t) => *t,
        };
        let per = source.len() / source.shape()[0];
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(source.outer(r));
        }
        let mut shape = source.shape().to_vec();
        shape[0] = rows.len();
        let batch = Tensor::from_vec(&shape, data)?;
        match self {
            Inputs::Cached(_) => Ok(batch),
            Inputs::Raw(_) if start == 0 => Ok(batch),
            Inputs::Raw(_) => features(params, &batch, start),
        }
    }

    fn all(&self, params: &ParamSet<f32>, start: usize) -> Result<Tensor<f32>> {
        match self {
            Inputs::Cached(t) => Ok(t.clone()),
            Inputs::Raw(t) if start == 0 => Ok((*t).clone()),
            Inputs::Raw(t) => features(params, t, start),
        }
    }
}

fn validation_auc(params: &ParamSet<f32>, val: &Inputs<'_>, labels: &[u8], start: usize) -> Result<f64> {
    let input = val.all(params, start)?;
    let probs = predict_from(params, &input, start)?;
    let scores: Vec<f64> = probs.data().chunks_exact(2).map(|p| p[1] as f64).collect();
    roc_auc(&scores, labels)
}

/// Mini-batch Adam training with per-epoch validation AUC, early stopping
/// and best-snapshot selection (strict improvement, earliest epoch wins).
///
/// Frozen layers are never updated. When no layer is trainable the input
/// parameters are returned with an empty history.
pub fn fit(params: &ParamSet<f32>, train: &PatchSet, val: &PatchSet, config: &TrainConfig) -> Result<FitOutcome> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data(format!(
            "training needs non-empty sets, got {} training and {} validation patches",
            train.len(),
            val.len()
        )));
    }
    let spec = params.spec();
    let expected = [spec.input_channels, spec.patch_side, spec.patch_side];
    for (name, set) in [("training", train), ("validation", val)] {
        if set.patches().shape()[1..] != expected {
            return Err(Error::dim(format!(
                "{name} patches {:?} do not fit the network input {expected:?}",
                set.patches().shape()
            )));
        }
    }
    let mut current = params.clone();
    let Some(first_trainable) = current.first_trainable() else {
        let auc = validation_auc(&current, &Inputs::Raw(val.patches()), val.labels(), 0)?;
        return Ok(FitOutcome { best: current, history: Vec::new(), best_epoch: 0, best_val_auc: auc });
    };
    // Frozen layers up to here see no dropout and no BN updates, so their
    // output can be computed once.
    let start = first_trainable.min(current.spec().conv_layers());
    let train_in = Inputs::prepare(&current, train.patches(), start)?;
    let val_in = Inputs::prepare(&current, val.patches(), start)?;

    let initial_auc = validation_auc(&current, &val_in, val.labels(), start)?;
    let mut best = FitOutcome { best: current.clone(), history: Vec::new(), best_epoch: 0, best_val_auc: initial_auc };
    if config.max_epochs == 0 {
        return Ok(best);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stopping = EarlyStopping::new(config.patience);
    for epoch in 0..config.max_epochs {
        let lr = lr_at(epoch, config);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            if rows.len() < 2 {
                continue;
            }
            let input = train_in.gather(&current, rows, start)?;
            let labels: Vec<u8> = rows.iter().map(|&r| train.labels()[r]).collect();
            let (probs, cache) =
                forward_from(&mut current, input, start, ForwardMode::Train, config.dropout, &mut rng)?;
            let (loss, grad) = cross_entropy_loss(&probs, &labels)?;
            if !loss.is_finite() || !probs.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss} in epoch {}, batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            let grads = backward(&current, &cache, &grad)?;
            if !grads.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in epoch {}, batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            adam_step(&mut current, &grads, &mut adam, lr, config.l2_lambda)?;
            loss_sum += loss * rows.len() as f64;
            seen += rows.len();
        }
        let val_auc = validation_auc(&current, &val_in, val.labels(), start)?;
        best.history.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: if seen > 0 { loss_sum / seen as f64 } else { f64::NAN },
            val_auc,
            lr,
        });
        match stopping.observe(val_auc) {
            Verdict::Improved => {
                best.best = current.clone();
                best.best_epoch = epoch + 1;
                best.best_val_auc = val_auc;
            }
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{build_network, predict, NetworkSpec};
    use rand_distr::{Distribution, Normal};

    fn small_spec() -> NetworkSpec {
        NetworkSpec {
            input_channels: 2,
            patch_side: 8,
            kernel: 3,
            conv_widths: vec![4, 4],
            dense_widths: vec![8, 4, 2],
        }
    }

    /// Two classes of noisy patches whose means differ by `gap`.
    fn blobs(n: usize, gap: f64, seed: u64) -> PatchSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::with_capacity(n * 128);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i % 2) as u8;
            let mean = if label == 1 { gap } else { 0.0 };
            for _ in 0..128 {
                data.push((mean + noise.sample(&mut rng)) as f32);
            }
            labels.push(label);
        }
        PatchSet::new(Tensor::from_vec(&[n, 2, 8, 8], data).unwrap(), labels).unwrap()
    }

    fn config(seed: u64) -> TrainConfig {
        TrainConfig {
            lr0: 1e-2,
            lr_decay: 0.97,
            batch_size: 16,
            dropout: 0.3,
            l2_lambda: 1e-4,
            max_epochs: 20,
            patience: 20,
            seed,
        }
    }

    fn init(seed: u64) -> ParamSet<f32> {
        build_network(&small_spec(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn separable_blobs_reach_high_auc() {
        let out = fit(&init(1), &blobs(128, 0.6, 2), &blobs(64, 0.6, 3), &config(4)).unwrap();
        assert!(out.best_val_auc > 0.95, "val AUC {} {:?}", out.best_val_auc, out.history);
        assert!(out.epochs_run() <= 20);
    }

    #[test]
    fn best_snapshot_is_the_argmax_of_history() {
        let out = fit(&init(5), &blobs(64, 0.2, 6), &blobs(32, 0.2, 7), &config(8)).unwrap();
        let max = out.history.iter().map(|r| r.val_auc).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(out.best_val_auc, max);
        let first = out.history.iter().find(|r| r.val_auc == max).unwrap();
        assert_eq!(first.epoch, out.best_epoch);
        // the snapshot really scores that AUC
        let val = blobs(32, 0.2, 7);
        let probs = predict(&out.best, val.patches()).unwrap();
        let scores: Vec<f64> = probs.data().chunks(2).map(|p| p[1] as f64).collect();
        assert!((roc_auc(&scores, val.labels()).unwrap() - max).abs() < 1e-12);
    }

    #[test]
    fn history_records_epochs_and_rates() {
        let cfg = TrainConfig { max_epochs: 4, ..config(9) };
        let out = fit(&init(9), &blobs(40, 0.5, 1), &blobs(20, 0.5, 2), &cfg).unwrap();
        assert_eq!(out.history.iter().map(|r| r.epoch).collect::<Vec<_>>(), [1, 2, 3, 4]);
        for r in &out.history {
            assert!((r.lr - lr_at(r.epoch - 1, &cfg)).abs() < 1e-18);
            assert!(r.train_loss.is_finite());
        }
    }

    #[test]
    fn zero_epochs_return_the_initial_parameters() {
        let p = init(2);
        let cfg = TrainConfig { max_epochs: 0, ..config(0) };
        let out = fit(&p, &blobs(8, 1.0, 1), &blobs(8, 1.0, 2), &cfg).unwrap();
        assert!(out.history.is_empty());
        assert!(out.best.bits_equal(&p));
    }

    #[test]
    fn fully_frozen_network_is_a_no_op() {
        let mut p = init(2);
        for l in 0..p.depth() {
            p.set_frozen(l, true);
        }
        let out = fit(&p, &blobs(8, 1.0, 1), &blobs(8, 1.0, 2), &config(0)).unwrap();
        assert!(out.history.is_empty());
        assert!(out.best.bits_equal(&p));
    }

    #[test]
    fn empty_sets_cannot_be_built() {
        assert!(Tensor::<f32>::from_vec(&[0, 2, 8, 8], vec![]).is_err());
        assert!(PatchSet::concat(&[]).is_err());
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let (train, val) = (blobs(48, 0.4, 1), blobs(24, 0.4, 2));
        let cfg = TrainConfig { max_epochs: 3, ..config(11) };
        let a = fit(&init(3), &train, &val, &cfg).unwrap();
        let b = fit(&init(3), &train, &val, &cfg).unwrap();
        assert!(a.best.bits_equal(&b.best));
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn frozen_layers_keep_their_bits() {
        let (train, val) = (blobs(48, 0.4, 1), blobs(24, 0.4, 2));
        for frozen in 1..5 {
            let mut p = init(3);
            for l in 0..frozen {
                p.set_frozen(l, true);
            }
            let cfg = TrainConfig { max_epochs: 2, ..config(1) };
            let out = fit(&p, &train, &val, &cfg).unwrap();
            for l in 0..p.depth() {
                assert_eq!(out.best.layer_bits_equal(&p, l), l < frozen, "freeze {frozen}, layer {l}");
            }
        }
    }

    /// The cached-prefix path must agree with training through the full
    /// network when the prefix is frozen.
    #[test]
    fn cached_prefix_matches_uncached_training() {
        let (train, val) = (blobs(40, 0.4, 1), blobs(20, 0.4, 2));
        let mut p = init(4);
        p.set_frozen(0, true);
        let cfg = TrainConfig { max_epochs: 2, ..config(6) };
        let out = fit(&p, &train, &val, &cfg).unwrap();

        // same loop, written without any feature caching
        let mut cur = p.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = AdamState::default();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut aucs = Vec::new();
        for epoch in 0..2 {
            order.shuffle(&mut rng);
            for rows in order.chunks(cfg.batch_size) {
                let mut data = Vec::new();
                for &r in rows {
                    data.extend_from_slice(train.patches().outer(r));
                }
                let x = Tensor::from_vec(&[rows.len(), 2, 8, 8], data).unwrap();
                let labels: Vec<u8> = rows.iter().map(|&r| train.labels()[r]).collect();
                let (probs, cache) = crate::nn::forward(&mut cur, &x, ForwardMode::Train, cfg.dropout, &mut rng).unwrap();
                let (_, g) = cross_entropy_loss(&probs, &labels).unwrap();
                let grads = backward(&cur, &cache, &g).unwrap();
                adam_step(&mut cur, &grads, &mut adam, lr_at(epoch, &cfg), cfg.l2_lambda).unwrap();
            }
            let probs = predict(&cur, val.patches()).unwrap();
            let scores: Vec<f64> = probs.data().chunks(2).map(|p| p[1] as f64).collect();
            aucs.push(roc_auc(&scores, val.labels()).unwrap());
        }
        assert_eq!(out.history.iter().map(|r| r.val_auc).collect::<Vec<_>>(), aucs);
        if out.best_epoch == 2 {
            assert!(out.best.bits_equal(&cur));
        }
    }

    /// Average loss on a fixed batch should not rise over the first epochs.
    #[test]
    fn fixed_batch_loss_decreases_on_average() {
        let probe = blobs(32, 0.6, 99);
        let loss_of = |p: &ParamSet<f32>| {
            let probs = predict(p, probe.patches()).unwrap();
            cross_entropy_loss(&probs, probe.labels()).unwrap().0
        };
        let (mut before, mut after) = (0.0, 0.0);
        for seed in 0..5 {
            let p = init(seed);
            before += loss_of(&p);
            let cfg = TrainConfig { max_epochs: 3, patience: 3, ..config(seed) };
            let out = fit(&p, &blobs(96, 0.6, seed + 10), &blobs(32, 0.6, seed + 20), &cfg).unwrap();
            after += loss_of(&out.best);
        }
        assert!(after <= before, "mean loss {} -> {}", before / 5.0, after / 5.0);
    }

    #[test]
    fn patience_one_stops_after_the_first_miss() {
        let mut stop = EarlyStopping::new(1);
        assert_eq!(stop.observe(0.9), Verdict::Improved);
        assert_eq!(stop.observe(0.8), Verdict::Stop);
        assert_eq!(stop.best(), Some((1, 0.9)));
    }

    #[test]
    fn ties_keep_the_earliest_epoch() {
        let mut stop = EarlyStopping::new(3);
        for auc in [0.7, 0.8, 0.8, 0.75] {
            assert_ne!(stop.observe(auc), Verdict::Stop);
        }
        assert_eq!(stop.best(), Some((2, 0.8)));
        assert_eq!(stop.observe(0.8), Verdict::Stop);
    }
}
