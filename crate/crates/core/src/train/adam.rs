use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Gradients, ParamSet, TensorRole};
use crate::tensor::{Element, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
struct Moments<T> {
    m: Tensor<T>,
    v: Tensor<T>,
}

/// First and second moment estimates per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    moments: BTreeMap<(usize, TensorRole), Moments<T>>,
}

impl<T: Element> Default for AdamState<T> {
    fn default() -> Self {
        AdamState {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            t: 0,
            moments: BTreeMap::new(),
        }
    }
}

impl<T: Element> AdamState<T> {
    pub fn timestep(&self) -> u64 {
        self.t
    }

    pub fn moment(&self, layer: usize, role: TensorRole) -> Option<(&Tensor<T>, &Tensor<T>)> {
        self.moments.get(&(layer, role)).map(|mo| (&mo.m, &mo.v))
    }
}

/// One bias-corrected Adam update of `w` in place.
#[allow(clippy::too_many_arguments)]
pub(crate) fn adam_update<T: Element>(
    w: &mut [T],
    g: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    l2: f64,
    hp: (f64, f64, f64),
) {
    let (b1, b2, eps) = hp;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for (((wi, &gi), mi), vi) in w.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
        let grad = gi.as_f64() + l2 * wi.as_f64();
        let m_new = b1 * mi.as_f64() + (1.0 - b1) * grad;
        let v_new = b2 * vi.as_f64() + (1.0 - b2) * grad * grad;
        *mi = T::from_f64(m_new);
        *vi = T::from_f64(v_new);
        let step = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
        *wi = T::from_f64(wi.as_f64() - step);
    }
}

/// Applies one Adam step to every tensor present in `grads`. The L2 term
/// `l2 * w` is added to conv/dense weight gradients only.
pub fn adam_step<T: Element>(
    params: &mut ParamSet<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
    l2: f64,
) -> Result<()> {
    for (&layer, lg) in &grads.layers {
        if layer >= params.depth() {
            return Err(Error::state(format!("gradient for nonexistent layer {}", layer + 1)));
        }
        if params.layer(layer).frozen {
            return Err(Error::state(format!("gradient supplied for frozen layer {}", layer + 1)));
        }
        for role in [TensorRole::Weight, TensorRole::Bias, TensorRole::Gamma, TensorRole::Beta] {
            let (Some(g), Some(p)) = (lg.get(role), params.tensor(layer, role)) else {
                if lg.get(role).is_some() {
                    return Err(Error::state(format!("layer {} has no {} tensor", layer + 1, role.name())));
                }
                continue;
            };
            if g.shape() != p.shape() {
                return Err(Error::state(format!(
                    "gradient {:?} does not match layer {} {} {:?}",
                    g.shape(),
                    layer + 1,
                    role.name(),
                    p.shape()
                )));
            }
            if let Some(mo) = state.moments.get(&(layer, role)) {
                if mo.m.shape() != p.shape() {
                    return Err(Error::state(format!(
                        "optimizer moments for layer {} {} have shape {:?}",
                        layer + 1,
                        role.name(),
                        mo.m.shape()
                    )));
                }
            }
        }
    }

    state.t += 1;
    let hp = (state.beta1, state.beta2, state.epsilon);
    for (&layer, lg) in &grads.layers {
        for role in [TensorRole::Weight, TensorRole::Bias, TensorRole::Gamma, TensorRole::Beta] {
            let Some(g) = lg.get(role) else { continue };
            let p = params.tensor_mut(layer, role).expect("validated above");
            let mo = state.moments.entry((layer, role)).or_insert_with(|| Moments {
                m: Tensor::zeros(p.shape()),
                v: Tensor::zeros(p.shape()),
            });
            let decay = if role == TensorRole::Weight { l2 } else { 0.0 };
            adam_update(p.data_mut(), g.data(), mo.m.data_mut(), mo.v.data_mut(), state.t, lr, decay, hp);
        }
    }
    params.advance_step();
    Ok(())
}
