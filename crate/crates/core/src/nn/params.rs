use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::spec::{LayerKind, NetworkSpec};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Per-feature batch-normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Element> BatchNormParams<T> {
    pub fn new(features: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full(&[features], T::one()),
            beta: Tensor::zeros(&[features]),
            running_mean: Tensor::zeros(&[features]),
            running_var: Tensor::full(&[features], T::one()),
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    fn cast<U: Element>(&self) -> BatchNormParams<U> {
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T = f32> {
    pub kind: LayerKind,
    /// `[cout, cin, k, k]` for convolutions, `[out, in]` for dense layers.
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: Option<BatchNormParams<T>>,
    pub frozen: bool,
}

/// All parameters and statistics of a network, with per-layer freeze flags.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T = f32> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
    step: u64,
}

/// Identifies one tensor of a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TensorRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorRole {
    pub const ALL: [TensorRole; 6] = [
        TensorRole::Weight,
        TensorRole::Bias,
        TensorRole::Gamma,
        TensorRole::Beta,
        TensorRole::RunningMean,
        TensorRole::RunningVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TensorRole::Weight => "weight",
            TensorRole::Bias => "bias",
            TensorRole::Gamma => "bn.gamma",
            TensorRole::Beta => "bn.beta",
            TensorRole::RunningMean => "bn.running_mean",
            TensorRole::RunningVar => "bn.running_var",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name() == name)
    }
}

/// Draws i.i.d. `N(0, sqrt(2 / fan_in))` samples.
pub fn he_init<T: Element, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::param("He initialization needs a positive fan-in"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::param(e.to_string()))?;
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::from_f64(normal.sample(rng))).collect();
    Tensor::from_vec(shape, data)
}

/// Fresh network: He-initialized weights, zero biases, identity BN.
pub fn build_network<T: Element, R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<ParamSet<T>> {
    spec.validate()?;
    let layers = (0..spec.depth())
        .map(|l| {
            let out = spec.out_width(l);
            Ok(Layer {
                kind: spec.layer_kind(l),
                weight: he_init(&spec.weight_shape(l), spec.fan_in(l), rng)?,
                bias: Tensor::zeros(&[out]),
                bn: spec.has_batchnorm(l).then(|| BatchNormParams::new(out)),
                frozen: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamSet {
        spec: spec.clone(),
        layers,
        step: 0,
    })
}

impl<T: Element> ParamSet<T> {
    /// Assembles a parameter set from existing layers, checking every shape
    /// against the spec.
    pub fn from_layers(spec: NetworkSpec, layers: Vec<Layer<T>>, step: u64) -> Result<Self> {
        spec.validate()?;
        if layers.len() != spec.depth() {
            return Err(Error::Compatibility(format!(
                "spec has {} layers, parameter set has {}",
                spec.depth(),
                layers.len()
            )));
        }
        let set = ParamSet { spec, layers, step };
        let diffs = set.shape_mismatches(&set.spec);
        if !diffs.is_empty() {
            return Err(Error::Compatibility(format!(
                "tensor shapes disagree with spec in layers {diffs:?}"
            )));
        }
        Ok(set)
    }

    /// Layers (1-based) whose tensors do not have the shapes `spec` prescribes.
    pub fn shape_mismatches(&self, spec: &NetworkSpec) -> Vec<usize> {
        (0..spec.depth().max(self.layers.len()))
            .filter(|&l| {
                let Some(layer) = self.layers.get(l) else { return true };
                if l >= spec.depth() {
                    return true;
                }
                let out = spec.out_width(l);
                let bn_ok = match (&layer.bn, spec.has_batchnorm(l)) {
                    (Some(bn), true) => [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                        .iter()
                        .all(|t| t.shape() == [out]),
                    (None, false) => true,
                    _ => false,
                };
                layer.kind != spec.layer_kind(l)
                    || layer.weight.shape() != spec.weight_shape(l).as_slice()
                    || layer.bias.shape() != [out]
                    || !bn_ok
            })
            .map(|l| l + 1)
            .collect()
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn layer(&self, index: usize) -> &Layer<T> {
        &self.layers[index]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Number of optimizer steps applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn advance_step(&mut self) {
        self.step += 1;
    }

    pub fn set_frozen(&mut self, layer: usize, frozen: bool) {
        self.layers[layer].frozen = frozen;
    }

    pub fn frozen_flags(&self) -> Vec<bool> {
        self.layers.iter().map(|l| l.frozen).collect()
    }

    pub fn frozen_count(&self) -> usize {
        self.layers.iter().filter(|l| l.frozen).count()
    }

    pub fn clear_frozen(&mut self) {
        for layer in &mut self.layers {
            layer.frozen = false;
        }
    }

    /// Index of the shallowest layer that is not frozen.
    pub fn first_trainable(&self) -> Option<usize> {
        self.layers.iter().position(|l| !l.frozen)
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !l.frozen)
            .map(|l| {
                l.weight.len()
                    + l.bias.len()
                    + l.bn.as_ref().map_or(0, |bn| bn.gamma.len() + bn.beta.len())
            })
            .sum()
    }

    pub fn tensor(&self, layer: usize, role: TensorRole) -> Option<&Tensor<T>> {
        let l = self.layers.get(layer)?;
        match role {
            TensorRole::Weight => Some(&l.weight),
            TensorRole::Bias => Some(&l.bias),
            TensorRole::Gamma => l.bn.as_ref().map(|b| &b.gamma),
            TensorRole::Beta => l.bn.as_ref().map(|b| &b.beta),
            TensorRole::RunningMean => l.bn.as_ref().map(|b| &b.running_mean),
            TensorRole::RunningVar => l.bn.as_ref().map(|b| &b.running_var),
        }
    }

    pub(crate) fn tensor_mut(&mut self, layer: usize, role: TensorRole) -> Option<&mut Tensor<T>> {
        let l = self.layers.get_mut(layer)?;
        match role {
            TensorRole::Weight => Some(&mut l.weight),
            TensorRole::Bias => Some(&mut l.bias),
            TensorRole::Gamma => l.bn.as_mut().map(|b| &mut b.gamma),
            TensorRole::Beta => l.bn.as_mut().map(|b| &mut b.beta),
            TensorRole::RunningMean => l.bn.as_mut().map(|b| &mut b.running_mean),
            TensorRole::RunningVar => l.bn.as_mut().map(|b| &mut b.running_var),
        }
    }

    /// Every tensor with a stable name such as `layer03.bn.gamma` (1-based layers).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for l in 0..self.layers.len() {
            for role in TensorRole::ALL {
                if let Some(t) = self.tensor(l, role) {
                    out.push((tensor_name(l, role), t));
                }
            }
        }
        out
    }

    /// True when every tensor of `layer` is bit-identical in both sets.
    pub fn layer_bits_equal(&self, other: &ParamSet<T>, layer: usize) -> bool {
        TensorRole::ALL.iter().all(|&role| {
            match (self.tensor(layer, role), other.tensor(layer, role)) {
                (Some(a), Some(b)) => {
                    a.shape() == b.shape()
                        && a.data().iter().zip(b.data()).all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
                }
                (None, None) => true,
                _ => false,
            }
        })
    }

    pub fn bits_equal(&self, other: &ParamSet<T>) -> bool {
        self.spec == other.spec
            && self.layers.len() == other.layers.len()
            && (0..self.layers.len()).all(|l| self.layer_bits_equal(other, l))
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    kind: l.kind,
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                    bn: l.bn.as_ref().map(|b| b.cast()),
                    frozen: l.frozen,
                })
                .collect(),
            step: self.step,
        }
    }

    /// Order-sensitive FNV-1a digest over every tensor's bits; used to audit
    /// that shared models are not mutated.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                for byte in v.as_f64().to_bits().to_le_bytes() {
                    hash ^= byte as u64;
                    hash = hash.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        hash
    }
}

pub fn tensor_name(layer: usize, role: TensorRole) -> String {
    format!("layer{:02}.{}", layer + 1, role.name())
}

/// Parses `layer03.bn.gamma` into (2, Gamma).
pub fn parse_tensor_name(name: &str) -> Option<(usize, TensorRole)> {
    let rest = name.strip_prefix("layer")?;
    let (num, role) = rest.split_once('.')?;
    let layer: usize = num.parse().ok()?;
    if layer == 0 {
        return None;
    }
    Some((layer - 1, TensorRole::from_name(role)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn he_init_unit_fan_in_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = he_init(&[100_000], 2, &mut rng).unwrap();
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn he_init_variance_for_fan_in_800() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t: Tensor<f32> = he_init(&[100_000], 800, &mut rng).unwrap();
        let n = t.len() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var - 0.0025).abs() / 0.0025 < 0.05, "variance {var}");
    }

    #[test]
    fn he_init_is_seeded_and_rejects_zero_fan_in() {
        let a: Tensor<f32> = he_init(&[4, 4], 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b: Tensor<f32> = he_init(&[4, 4], 16, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(
            he_init::<f32, _>(&[2], 0, &mut ChaCha8Rng::seed_from_u64(5)),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn build_network_shapes_and_defaults() {
        let spec = NetworkSpec::standard(vec![16; 12]).unwrap();
        let p: ParamSet = build_network(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(p.layer(0).weight.shape(), &[16, 2, 3, 3]);
        assert_eq!(p.layer(12).weight.shape(), &[256, 16 * 8 * 8]);
        assert_eq!(p.frozen_count(), 0);
        assert!(p.layer(14).bn.is_none());
        let bn = p.layer(3).bn.as_ref().unwrap();
        assert!(bn.gamma.data().iter().all(|&g| g == 1.0));
        assert!(bn.running_var.data().iter().all(|&g| g == 1.0));
        assert!(bn.beta.data().iter().chain(bn.running_mean.data()).all(|&g| g == 0.0));
        assert_eq!(p.trainable_parameter_count(), spec.parameter_count());
        assert!(p.shape_mismatches(&spec).is_empty());
    }

    #[test]
    fn tensor_names_round_trip() {
        for l in [0, 9, 14] {
            for role in TensorRole::ALL {
                assert_eq!(parse_tensor_name(&tensor_name(l, role)), Some((l, role)));
            }
        }
        assert_eq!(parse_tensor_name("layer00.weight"), None);
        assert_eq!(parse_tensor_name("layer01.nope"), None);
    }
}
