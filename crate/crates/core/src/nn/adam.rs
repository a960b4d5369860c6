use num_traits::Float;

use super::{config_error, Gradients, Network, NnError, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates mirroring a network's parameter layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub m: Vec<Vec<Tensor<T>>>,
    pub v: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(net: &Network<T>, config: AdamConfig) -> Self {
        let zeros = net.zero_gradients().layers;
        Self {
            config,
            step_count: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn matches(&self, net: &Network<T>) -> bool {
        self.m.len() == net.layers().len()
            && self.v.len() == net.layers().len()
            && net.layers().iter().enumerate().all(|(i, l)| {
                l.params.len() == self.m[i].len()
                    && l.params.len() == self.v[i].len()
                    && l.params
                        .iter()
                        .zip(&self.m[i])
                        .zip(&self.v[i])
                        .all(|((p, m), v)| p.shape() == m.shape() && p.shape() == v.shape())
            })
    }
}

/// One bias-corrected Adam update of every parameter in `net`.
///
/// Gradients are checked for finiteness before anything is modified, so a
/// failed step leaves both the network and the state untouched.
pub fn adam_step<T: Scalar>(
    net: &mut Network<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    if !state.matches(net) || grads.layers.len() != net.layers().len() {
        return Err(config_error(
            None,
            "optimizer state does not match network layout",
        ));
    }
    for (i, (layer, g)) in net.layers().iter().zip(&grads.layers).enumerate() {
        if g.len() != layer.params.len()
            || g.iter()
                .zip(&layer.params)
                .any(|(g, p)| g.shape() != p.shape())
        {
            return Err(config_error(
                Some(i),
                "gradient shape does not match parameters",
            ));
        }
        if g.iter().any(|t| !t.all_finite()) {
            return Err(NnError::NonFinite {
                layer: net.layer_name(i),
            });
        }
    }

    let c = state.config;
    state.step_count += 1;
    let t = state.step_count as i32;
    let b1 = T::from_f64_lossy(c.beta1);
    let b2 = T::from_f64_lossy(c.beta2);
    let one_m_b1 = T::from_f64_lossy(1.0 - c.beta1);
    let one_m_b2 = T::from_f64_lossy(1.0 - c.beta2);
    let bias1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
    let bias2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
    let lr = T::from_f64_lossy(c.learning_rate);
    let eps = T::from_f64_lossy(c.epsilon);

    for (li, layer) in net.layers_mut().iter_mut().enumerate() {
        for (pi, param) in layer.params.iter_mut().enumerate() {
            let g = grads.layers[li][pi].data();
            let m = state.m[li][pi].data_mut();
            let v = state.v[li][pi].data_mut();
            for (((theta, &g), m), v) in param.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *m = b1 * *m + one_m_b1 * g;
                *v = b2 * *v + one_m_b2 * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *theta = *theta - lr * m_hat / (Float::sqrt(v_hat) + eps);
            }
        }
    }
    Ok(())
}
