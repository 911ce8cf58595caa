//! The DSK1 checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "DSK1" | u32 version | u32 n | n bytes of UTF-8 spec block
//! then per tensor: u32 name length | name | u32 rank | rank x u32 dims | f32 data
//! ```
//!
//! The spec block holds `key=value` lines: network shape, freeze flags,
//! optimizer step, provenance, seed and the training history.

use std::fs;
use std::path::Path;

use wmh_transfer::nn::{parse_tensor_name, BatchNormParams, Layer, NetworkSpec, ParamSet, TensorRole};
use wmh_transfer::train::{EpochRecord, FitOutcome};
use wmh_transfer::transfer::ModelProvenance;
use wmh_transfer::Tensor;

use crate::error::{CliError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DSK1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ParamSet<f32>,
    pub provenance: ModelProvenance,
    pub seed: u64,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

fn join<T: ToString>(items: impl IntoIterator<Item = T>) -> String {
    items.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl Checkpoint {
    pub fn from_outcome(outcome: FitOutcome, provenance: ModelProvenance, seed: u64) -> Self {
        Checkpoint {
            params: outcome.best,
            provenance,
            seed,
            history: outcome.history,
            best_epoch: outcome.best_epoch,
            best_val_auc: outcome.best_val_auc,
        }
    }

    fn spec_block(&self) -> String {
        let spec = self.params.spec();
        let mut lines = vec![
            format!("input_channels={}", spec.input_channels),
            format!("patch_side={}", spec.patch_side),
            format!("kernel={}", spec.kernel),
            format!("conv_widths={}", join(&spec.conv_widths)),
            format!("dense_widths={}", join(&spec.dense_widths)),
            format!("frozen={}", join(self.params.frozen_flags().iter().map(|&f| f as u8))),
            format!("step={}", self.params.step()),
            format!("provenance={}", self.provenance),
            format!("seed={}", self.seed),
            format!("best_epoch={}", self.best_epoch),
            format!("best_val_auc={}", self.best_val_auc),
        ];
        for r in &self.history {
            lines.push(format!("epoch={},{},{},{}", r.epoch, r.train_loss, r.val_auc, r.lr));
        }
        lines.join("\n")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let block = self.spec_block();
        out.extend_from_slice(&(block.len() as u32).to_le_bytes());
        out.extend_from_slice(block.as_bytes());
        for (name, t) in self.params.named_tensors() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.error(0, "bad magic, expected DSK1"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CliError::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
        }
        let block_len = r.u32()? as usize;
        let block_at = r.pos;
        let block = std::str::from_utf8(r.take(block_len)?).map_err(|_| r.error(block_at, "spec block is not UTF-8"))?;
        let meta = Meta::parse(block).map_err(|m| r.error(block_at, &m))?;

        let mut slots: Vec<[Option<Tensor<f32>>; 6]> = (0..meta.spec.depth()).map(|_| Default::default()).collect();
        while r.pos < bytes.len() {
            let at = r.pos;
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.error(at, "tensor name is not UTF-8"))?;
            let (layer, role) = parse_tensor_name(name)
                .filter(|(l, _)| *l < slots.len())
                .ok_or_else(|| r.error(at, &format!("unexpected tensor name {name:?}")))?;
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = dims.iter().product::<usize>();
            let raw = r.take(count.checked_mul(4).ok_or_else(|| r.error(at, "tensor size overflows"))?)?;
            let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::from_vec(&dims, data).map_err(|e| r.error(at, &e.to_string()))?;
            let slot = &mut slots[layer][role as usize];
            if slot.replace(t).is_some() {
                return Err(r.error(at, &format!("tensor {name} appears twice")));
            }
        }

        let end = bytes.len();
        let mut layers = Vec::with_capacity(slots.len());
        for (l, mut slot) in slots.into_iter().enumerate() {
            let mut get = |role: TensorRole| {
                slot[role as usize]
                    .take()
                    .ok_or_else(|| CliError::Checkpoint { offset: end as u64, message: format!("missing tensor {}", wmh_transfer::nn::tensor_name(l, role)) })
            };
            let weight = get(TensorRole::Weight)?;
            let bias = get(TensorRole::Bias)?;
            let bn = if meta.spec.has_batchnorm(l) {
                Some(BatchNormParams {
                    gamma: get(TensorRole::Gamma)?,
                    beta: get(TensorRole::Beta)?,
                    running_mean: get(TensorRole::RunningMean)?,
                    running_var: get(TensorRole::RunningVar)?,
                })
            } else {
                None
            };
            if slot.iter().any(Option::is_some) {
                return Err(CliError::Checkpoint {
                    offset: end as u64,
                    message: format!("layer {} carries batch-norm tensors it does not use", l + 1),
                });
            }
            layers.push(Layer { kind: meta.spec.layer_kind(l), weight, bias, bn, frozen: meta.frozen[l] });
        }
        let params = ParamSet::from_layers(meta.spec, layers, meta.step)?;
        Ok(Checkpoint {
            params,
            provenance: meta.provenance,
            seed: meta.seed,
            history: meta.history,
            best_epoch: meta.best_epoch,
            best_val_auc: meta.best_val_auc,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, message: &str) -> CliError {
        CliError::Checkpoint { offset: offset as u64, message: message.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.error(self.pos, &format!("truncated: need {n} bytes, {} left", self.bytes.len() - self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

struct Meta {
    spec: NetworkSpec,
    frozen: Vec<bool>,
    step: u64,
    provenance: ModelProvenance,
    seed: u64,
    best_epoch: usize,
    best_val_auc: f64,
    history: Vec<EpochRecord>,
}

impl Meta {
    fn parse(block: &str) -> std::result::Result<Meta, String> {
        let mut fields = std::collections::BTreeMap::new();
        let mut history = Vec::new();
        for line in block.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("malformed spec line {line:?}"))?;
            if k == "epoch" {
                let parts: Vec<&str> = v.split(',').collect();
                let [e, loss, auc, lr] = parts[..] else { return Err(format!("malformed epoch record {v:?}")) };
                let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?} in epoch record"));
                history.push(EpochRecord {
                    epoch: e.parse().map_err(|_| format!("bad epoch {e:?}"))?,
                    train_loss: num(loss)?,
                    val_auc: num(auc)?,
                    lr: num(lr)?,
                });
            } else if fields.insert(k, v).is_some() {
                return Err(format!("duplicate spec key {k}"));
            }
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| format!("spec block lacks {k}"));
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("bad value {v:?} for {k}"))
        }
        let list = |k: &str| -> std::result::Result<Vec<usize>, String> {
            get(k)?.split(',').filter(|s| !s.is_empty()).map(|s| num(k, s)).collect()
        };
        let spec = NetworkSpec {
            input_channels: num("input_channels", get("input_channels")?)?,
            patch_side: num("patch_side", get("patch_side")?)?,
            kernel: num("kernel", get("kernel")?)?,
            conv_widths: list("conv_widths")?,
            dense_widths: list("dense_widths")?,
        };
        spec.validate().map_err(|e| e.to_string())?;
        let frozen: Vec<bool> = list("frozen")?.into_iter().map(|f| f == 1).collect();
        if frozen.len() != spec.depth() {
            return Err(format!("{} freeze flags for {} layers", frozen.len(), spec.depth()));
        }
        Ok(Meta {
            spec,
            frozen,
            step: num("step", get("step")?)?,
            provenance: get("provenance")?.parse().map_err(|e: wmh_transfer::Error| e.to_string())?,
            seed: num("seed", get("seed")?)?,
            best_epoch: num("best_epoch", get("best_epoch")?)?,
            best_val_auc: num("best_val_auc", get("best_val_auc")?)?,
            history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use wmh_transfer::nn::{build_network, predict};
    use wmh_transfer::transfer::TransferPlan;

    fn sample(seed: u64) -> Checkpoint {
        let spec = NetworkSpec { input_channels: 2, patch_side: 10, kernel: 3, conv_widths: vec![3, 2], dense_widths: vec![5, 2] };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params: ParamSet<f32> = build_network(&spec, &mut rng).unwrap();
        params.set_frozen(0, true);
        let history = vec![
            EpochRecord { epoch: 1, train_loss: 0.7, val_auc: 0.5, lr: 1e-3 },
            EpochRecord { epoch: 2, train_loss: 0.1 + 0.2, val_auc: 0.875, lr: 9.7e-4 },
        ];
        Checkpoint {
            params,
            provenance: ModelProvenance::Adapted { source: "runs/source.dsk".into(), plan: TransferPlan::new(1, 3).unwrap() },
            seed,
            history,
            best_epoch: 2,
            best_val_auc: 0.875,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample(4);
        let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
        assert!(back.params.bits_equal(&c.params));
        assert_eq!(back.params.frozen_flags(), c.params.frozen_flags());
        assert_eq!(back.params.step(), c.params.step());
        assert_eq!(back.provenance, c.provenance);
        assert_eq!(back.history, c.history);
        assert_eq!((back.seed, back.best_epoch, back.best_val_auc), (4, 2, 0.875));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::from_vec(&[3, 2, 10, 10], (0..600).map(|_| rng.random::<f32>()).collect()).unwrap();
        let (a, b) = (predict(&c.params, &x).unwrap(), predict(&back.params, &x).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn header_layout() {
        let bytes = sample(1).to_bytes();
        assert_eq!(&bytes[..4], b"DSK1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let block = std::str::from_utf8(&bytes[12..12 + n]).unwrap();
        assert!(block.starts_with("input_channels=2\n"));
        let first = &bytes[12 + n..];
        let name_len = u32::from_le_bytes(first[..4].try_into().unwrap()) as usize;
        assert_eq!(&first[4..4 + name_len], b"layer01.weight");
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = sample(2).to_bytes();
        for cut in 0..bytes.len() {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn wrong_magic_and_version() {
        let mut bytes = sample(2).to_bytes();
        bytes[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CliError::CheckpointVersion { found: 2, expected: 1 })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CliError::Checkpoint { offset: 0, .. })));
    }

    #[test]
    fn duplicate_tensor_is_rejected() {
        let c = sample(3);
        let mut bytes = c.to_bytes();
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let start = 12 + n;
        let name_len = u32::from_le_bytes(bytes[start..start + 4].try_into().unwrap()) as usize;
        let shape = c.params.layer(0).weight.shape().to_vec();
        let record_len = 4 + name_len + 4 + 4 * shape.len() + 4 * shape.iter().product::<usize>();
        let record = bytes[start..start + record_len].to_vec();
        bytes.extend_from_slice(&record);
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CliError::Checkpoint { .. })));
    }

    proptest::proptest! {
        #[test]
        fn metadata_round_trips(
            seed in proptest::prelude::any::<u64>(),
            rows in proptest::collection::vec((0.0f64..10.0, 0.0f64..=1.0, 1e-6f64..1.0), 0..6),
            frozen in proptest::collection::vec(proptest::prelude::any::<bool>(), 4),
        ) {
            let mut c = sample(seed);
            for (k, f) in frozen.iter().enumerate() {
                c.params.set_frozen(k, *f);
            }
            c.history = rows
                .iter()
                .enumerate()
                .map(|(k, &(train_loss, val_auc, lr))| EpochRecord { epoch: k + 1, train_loss, val_auc, lr })
                .collect();
            let back = Checkpoint::from_bytes(&c.to_bytes()).unwrap();
            proptest::prop_assert_eq!(back.seed, seed);
            proptest::prop_assert_eq!(back.params.frozen_flags(), c.params.frozen_flags());
            proptest::prop_assert_eq!(back.history, c.history);
            proptest::prop_assert!(back.params.bits_equal(&c.params));
        }
    }
}
