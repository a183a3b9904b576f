//! Adam parameter updates over named tensors.

use std::collections::BTreeMap;

use ndarray::ArrayD;

pub const ADAM_EPS: f64 = 1e-8;

/// First/second moment accumulators, keyed like the weights.
pub type Moments = BTreeMap<String, (ArrayD<f64>, ArrayD<f64>)>;

/// Apply one Adam step to every parameter that received a gradient.
/// `t` is the 1-based update count for bias correction.
pub fn adam_update(
    weights: &mut BTreeMap<String, ArrayD<f64>>,
    grads: &BTreeMap<String, ArrayD<f64>>,
    moments: &mut Moments,
    t: u64,
    lr: f64,
    betas: (f64, f64),
) {
    let (b1, b2) = betas;
    let bc1 = 1.0 - b1.powi(t as i32);
    let bc2 = 1.0 - b2.powi(t as i32);
    for (name, grad) in grads {
        let param = weights
            .get_mut(name)
            .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
        let (m, v) = moments
            .entry(name.clone())
            .or_insert_with(|| (ArrayD::zeros(grad.raw_dim()), ArrayD::zeros(grad.raw_dim())));
        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            });
    }
}
