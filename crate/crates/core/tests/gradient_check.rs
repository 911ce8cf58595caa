//! Central finite differences against backpropagation on the reduced
//! network, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wmh_transfer::nn::{backward, build_network, forward, ForwardMode, NetworkSpec, ParamSet, TensorRole};
use wmh_transfer::train::cross_entropy_loss;
use wmh_transfer::Tensor;

fn reduced_spec() -> NetworkSpec {
    NetworkSpec {
        input_channels: 2,
        patch_side: 12,
        kernel: 3,
        conv_widths: vec![3, 3],
        dense_widths: vec![8, 4, 2],
    }
}

fn loss(params: &ParamSet<f64>, x: &Tensor<f64>, labels: &[u8]) -> f64 {
    let mut p = params.clone();
    let (probs, _) = forward(&mut p, x, ForwardMode::Train, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    cross_entropy_loss(&probs, labels).unwrap().0
}

fn setup(seed: u64) -> (ParamSet<f64>, Tensor<f64>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: ParamSet<f64> = build_network::<f32, _>(&reduced_spec(), &mut rng).unwrap().cast();
    // move BN scale/shift and biases off their trivial initial values
    let params = {
        let mut layers = base.layers().to_vec();
        for layer in &mut layers {
            layer.bias.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
            if let Some(bn) = layer.bn.as_mut() {
                bn.gamma.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.6..1.4));
                bn.beta.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.2..0.2));
            }
        }
        ParamSet::from_layers(reduced_spec(), layers, 0).unwrap()
    };
    let n = 6;
    let x = Tensor::from_vec(&[n, 2, 12, 12], (0..n * 288).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let labels = (0..n).map(|i| (i % 2) as u8).collect();
    (params, x, labels)
}

fn with_entry(params: &ParamSet<f64>, layer: usize, role: TensorRole, index: usize, delta: f64) -> ParamSet<f64> {
    let mut layers = params.layers().to_vec();
    let l = &mut layers[layer];
    let t = match role {
        TensorRole::Weight => &mut l.weight,
        TensorRole::Bias => &mut l.bias,
        TensorRole::Gamma => &mut l.bn.as_mut().unwrap().gamma,
        TensorRole::Beta => &mut l.bn.as_mut().unwrap().beta,
        _ => unreachable!(),
    };
    t.data_mut()[index] += delta;
    ParamSet::from_layers(params.spec().clone(), layers, 0).unwrap()
}

#[test]
fn every_parameter_gradient_matches_finite_differences() {
    let start = std::time::Instant::now();
    for seed in [1, 2] {
        let (params, x, labels) = setup(seed);
        let mut p = params.clone();
        let (probs, cache) = forward(&mut p, &x, ForwardMode::Train, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (_, g) = cross_entropy_loss(&probs, &labels).unwrap();
        let grads = backward(&params, &cache, &g).unwrap();

        let h = 1e-6;
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        for layer in 0..params.depth() {
            for role in [TensorRole::Weight, TensorRole::Bias, TensorRole::Gamma, TensorRole::Beta] {
                let Some(analytic) = grads.get(layer, role) else { continue };
                for i in 0..analytic.len() {
                    let up = loss(&with_entry(&params, layer, role, i, h), &x, &labels);
                    let down = loss(&with_entry(&params, layer, role, i, -h), &x, &labels);
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic.data()[i];
                    let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
                    // bias before batch normalization has zero true gradient
                    if a.abs().max(numeric.abs()) < 1e-9 {
                        continue;
                    }
                    worst = worst.max(rel);
                    assert!(rel < 1e-3, "layer {} {} [{i}]: analytic {a}, numeric {numeric}", layer + 1, role.name());
                    checked += 1;
                }
            }
        }
        assert!(checked > 300, "only {checked} entries checked");
        eprintln!("seed {seed}: {checked} entries, worst relative error {worst:.2e}");
    }
    assert!(start.elapsed().as_secs() < 60);
}
