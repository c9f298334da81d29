use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::trainer::objective::{Gradients, Model, Trainability};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam accumulators. Only trainable tensors have an entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(model: &Model<T>, tr: Trainability) -> Self {
        let mut moments = BTreeMap::new();
        for (prefix, layer, trainable) in model.layers(tr) {
            if !trainable {
                continue;
            }
            for (suffix, len) in [("weight", layer.weight.len()), ("bias", layer.bias.len())] {
                moments.insert(
                    format!("{prefix}.{suffix}"),
                    Moments {
                        m: vec![T::zero(); len],
                        v: vec![T::zero(); len],
                    },
                );
            }
        }
        Self {
            step: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            moments,
        }
    }
}

fn update<T: Real>(
    params: &mut [T],
    grad: &[T],
    mom: &mut Moments<T>,
    lr: f64,
    state: (f64, f64, f64, u64),
) -> Result<()> {
    let (b1, b2, eps, t) = state;
    if grad.len() != params.len() {
        return Err(Error::GradientMismatch(format!(
            "gradient has {} entries for a tensor of {}",
            grad.len(),
            params.len()
        )));
    }
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grad[i].as_f64();
        let m = b1 * mom.m[i].as_f64() + (1.0 - b1) * g;
        let v = b2 * mom.v[i].as_f64() + (1.0 - b2) * g * g;
        mom.m[i] = T::from_f64_lossy(m);
        mom.v[i] = T::from_f64_lossy(v);
        let m_hat = m / c1;
        let v_hat = v / c2;
        let p = params[i].as_f64() - lr * m_hat / (v_hat.sqrt() + eps);
        params[i] = T::from_f64_lossy(p);
    }
    Ok(())
}

/// Bias-corrected Adam update of every trainable tensor. The gradient map
/// must name exactly the trainable tensors.
pub fn adam_step<T: Real>(
    state: &mut AdamState<T>,
    model: &mut Model<T>,
    tr: Trainability,
    grads: &Gradients<T>,
    lr: f64,
) -> Result<()> {
    let expected = model.trainable_names(tr);
    let missing: Vec<&String> = expected.iter().filter(|n| !grads.contains_key(*n)).collect();
    let extra: Vec<&String> = grads.keys().filter(|n| !expected.contains(n)).collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::GradientMismatch(format!("missing {missing:?}, unexpected {extra:?}")));
    }
    state.step += 1;
    let hyper = (state.beta1, state.beta2, state.eps, state.step);
    for (prefix, layer, trainable) in model.layers_mut(tr) {
        if !trainable {
            continue;
        }
        for (suffix, params) in [("weight", &mut layer.weight), ("bias", &mut layer.bias)] {
            let name = format!("{prefix}.{suffix}");
            let mom = state
                .moments
                .get_mut(&name)
                .ok_or_else(|| Error::GradientMismatch(format!("no optimizer state for {name}")))?;
            update(params, &grads[&name], mom, lr, hyper)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_scalar_first_step() {
        let mut p = vec![0.0f64];
        let mut mom = Moments { m: vec![0.0], v: vec![0.0] };
        update(&mut p, &[1.0], &mut mom, 1e-3, (BETA1, BETA2, EPSILON, 1)).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let expect = -1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expect).abs() < 1e-18);
        assert!((p[0] + 9.99999e-4).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let mut p = vec![0.25f32, -1.0];
        let mut mom = Moments { m: vec![0.0; 2], v: vec![0.0; 2] };
        update(&mut p, &[0.0, 0.0], &mut mom, 1e-3, (BETA1, BETA2, EPSILON, 1)).unwrap();
        assert_eq!(p, vec![0.25, -1.0]);
    }
}
