use crate::model::ParameterStore;
use crate::tensor::Scalar;

use super::TrainError;

/// First and second moments per parameter tensor, plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParameterStore<T>) -> Self {
        let zeros: Vec<Vec<T>> = store.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// Bias-corrected Adam on one tensor. `t` is the 1-based step number.
#[allow(clippy::too_many_arguments)]
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) {
    let (b1, b2) = (T::cast_f64(beta1), T::cast_f64(beta2));
    let c1 = T::cast_f64(1.0 - beta1.powi(t as i32));
    let c2 = T::cast_f64(1.0 - beta2.powi(t as i32));
    let (lr, eps) = (T::cast_f64(lr), T::cast_f64(eps));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One update of every parameter from its accumulated gradient. A block
/// shared by several layers is a single tensor here, so it moves once.
///
/// All gradients are checked before anything is modified.
pub fn adam_step<T: Scalar>(
    store: &mut ParameterStore<T>,
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<(), TrainError> {
    for (i, (_, name, t)) in store.iter().enumerate() {
        if state.m[i].len() != t.numel() {
            return Err(TrainError::ShapeMismatch {
                name: name.to_string(),
                param: t.numel(),
                grad: state.m[i].len(),
            });
        }
        if let Some(g) = t.grad() {
            if g.len() != t.numel() {
                return Err(TrainError::ShapeMismatch {
                    name: name.to_string(),
                    param: t.numel(),
                    grad: g.len(),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFiniteGradient { name: name.to_string() });
            }
        }
    }
    state.step += 1;
    for (i, (_, t)) in store.tensors_mut().enumerate() {
        let Some(g) = t.grad().map(<[T]>::to_vec) else { continue };
        adam_update(t.data_mut(), &g, &mut state.m[i], &mut state.v[i], state.step, lr, beta1, beta2, eps);
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub(crate) fn clip_grad_norm<T: Scalar>(store: &mut ParameterStore<T>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, _, t)| t.grad())
        .flatten()
        .map(|g| g.as_f64() * g.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = T::cast_f64(max_norm / norm);
        for (_, t) in store.tensors_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= k);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [3.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        adam_update(&mut p, &[1.0], &mut m, &mut v, 1, 0.01, 0.9, 0.999, 1e-8);
        assert!((p[0] - (3.0 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = [0.5f64, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, 0.1, 0.9, 0.98, 1e-9);
        assert_eq!(p, [0.5, -2.0]);
    }

    #[test]
    fn two_steps_on_a_quadratic_match_reference() {
        // f(x) = (x - 2)^2, gradient 2(x - 2).
        let (lr, b1, b2, eps) = (0.1, 0.9, 0.98, 1e-9);
        let mut p = [5.0f64];
        let (mut m, mut v) = ([0.0], [0.0]);
        for t in 1..=2 {
            let g = [2.0 * (p[0] - 2.0)];
            adam_update(&mut p, &g, &mut m, &mut v, t, lr, b1, b2, eps);
        }

        let (mut x, mut mr, mut vr) = (5.0f64, 0.0f64, 0.0f64);
        for t in 1..=2i32 {
            let g = 2.0 * (x - 2.0);
            mr = b1 * mr + (1.0 - b1) * g;
            vr = b2 * vr + (1.0 - b2) * g * g;
            let mh = mr / (1.0 - b1.powi(t));
            let vh = vr / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((p[0] - x).abs() < 1e-12);
    }
}
