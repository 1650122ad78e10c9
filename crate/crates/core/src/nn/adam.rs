use super::network::{Gradients, SrcnnParams};

/// Adam moments for every parameter tensor, with per-layer learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
    pub learning_rates: [f64; 3],
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// Layers 1-2 learn at 1e-4, the reconstruction layer at 1e-5.
pub const DEFAULT_LEARNING_RATES: [f64; 3] = [1e-4, 1e-4, 1e-5];

impl AdamState {
    pub fn new(params: &SrcnnParams, learning_rates: [f64; 3]) -> Self {
        let shapes: Vec<usize> = params
            .layers
            .iter()
            .flat_map(|l| [l.weights.len(), l.bias.len()])
            .collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            learning_rates,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(params: &mut SrcnnParams, grads: &Gradients, state: &mut AdamState) {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (li, (layer, grad)) in params.layers.iter_mut().zip(&grads.layers).enumerate() {
        let lr = state.learning_rates[li];
        let tensors = [(&mut layer.weights, &grad.weights), (&mut layer.bias, &grad.bias)];
        for (ti, (param, g)) in tensors.into_iter().enumerate() {
            let slot = 2 * li + ti;
            let (m, v) = (&mut state.m[slot], &mut state.v[slot]);
            for i in 0..param.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
