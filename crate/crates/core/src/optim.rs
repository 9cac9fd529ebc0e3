//! Adam with bias correction.

use crate::grad::GradientSet;
use crate::model::SubspaceModel;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: SubspaceModel<T>,
    pub v: SubspaceModel<T>,
    pub t: u64,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments with β1 = 0.9, β2 = 0.999, eps = 1e-8.
    pub fn new(model: &SubspaceModel<T>) -> Self {
        Self {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }
}

/// One in-place Adam update of `model`.
pub fn adam_step<T: Scalar>(model: &mut SubspaceModel<T>, state: &mut AdamState<T>, grads: &GradientSet<T>, lr: T) {
    state.t += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = T::one() - b1.powi(state.t as i32);
    let c2 = T::one() - b2.powi(state.t as i32);
    let params = model.groups_mut();
    let ms = state.m.groups_mut();
    let vs = state.v.groups_mut();
    for (((p, m), v), (_, g)) in params.into_iter().zip(ms).zip(vs).zip(grads.params.groups()) {
        for k in 0..p.len() {
            m[k] = b1 * m[k] + (T::one() - b1) * g[k];
            v[k] = b2 * v[k] + (T::one() - b2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] = p[k] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn setup() -> (SubspaceModel<f64>, GradientSet<f64>) {
        let model = init_model(4, 2, 3).unwrap();
        let mut grads = GradientSet::zeros_like(&model);
        for (k, g) in grads.params.groups_mut().into_iter().flat_map(|g| g.iter_mut()).enumerate() {
            *g = if k % 2 == 0 { 0.3 + k as f64 } else { -2.0 - k as f64 };
        }
        (model, grads)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (model, grads) = setup();
        let mut next = model.clone();
        adam_step(&mut next, &mut AdamState::new(&model), &grads, 1e-3);
        for ((_, a), ((_, b), (_, g))) in
            model.groups().into_iter().zip(next.groups().into_iter().zip(grads.params.groups()))
        {
            for k in 0..a.len() {
                let step = b[k] - a[k];
                assert!((step + 1e-3 * g[k].signum()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (model, _) = setup();
        let mut next = model.clone();
        let mut st = AdamState::new(&model);
        for _ in 0..3 {
            adam_step(&mut next, &mut st, &GradientSet::zeros_like(&model), 1e-2);
        }
        assert_eq!(next, model);
    }

    #[test]
    fn identical_steps_are_identical() {
        let (model, grads) = setup();
        let run = || {
            let mut m = model.clone();
            let mut st = AdamState::new(&model);
            adam_step(&mut m, &mut st, &grads, 1e-3);
            adam_step(&mut m, &mut st, &grads, 1e-3);
            (m, st)
        };
        assert_eq!(run(), run());
    }
}
