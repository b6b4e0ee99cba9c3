//! Signed gradient descent and Adam, with optional box constraints.

use crate::error::Result;
use crate::tensor::{check_same_shape, Scalar, Tensor};

/// Closed interval a parameter is clamped to after each step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> Bounds<T> {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self {
            lo: T::from_f64_lossy(lo),
            hi: T::from_f64_lossy(hi),
        }
    }

    pub fn unbounded() -> Self {
        Self {
            lo: T::neg_infinity(),
            hi: T::infinity(),
        }
    }

    #[inline]
    pub fn clamp(&self, v: T) -> T {
        v.max(self.lo).min(self.hi)
    }

    pub fn contains(&self, v: T) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// `sign` with `sign(0) = 0`.
#[inline]
pub fn sign<T: Scalar>(g: T) -> T {
    if g > T::zero() {
        T::one()
    } else if g < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// In-place `p ← clamp(p − lr·sign(g))`.
pub fn signsgd_update<T: Scalar>(param: &mut [T], grad: &[T], lr: T, bounds: Bounds<T>) {
    for (p, &g) in param.iter_mut().zip(grad) {
        *p = bounds.clamp(*p - lr * sign(g));
    }
}

pub fn signsgd_step<T: Scalar>(
    param: &Tensor<T>,
    grad: &Tensor<T>,
    lr: T,
    bounds: Bounds<T>,
) -> Result<Tensor<T>> {
    check_same_shape("signsgd_step", param.shape(), grad.shape())?;
    let mut data = param.data().to_vec();
    signsgd_update(&mut data, grad.data(), lr, bounds);
    Tensor::new(param.shape().to_vec(), data)
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
        }
    }
}

/// In-place bias-corrected Adam step followed by a clamp.
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamState<T>,
    lr: T,
    bounds: Bounds<T>,
) {
    debug_assert_eq!(param.len(), state.m.len());
    state.t += 1;
    let (b1, b2) = (T::from_f64_lossy(ADAM_BETA1), T::from_f64_lossy(ADAM_BETA2));
    let eps = T::from_f64_lossy(ADAM_EPS);
    let c1 = T::one() - b1.powi(state.t as i32);
    let c2 = T::one() - b2.powi(state.t as i32);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        param[i] = bounds.clamp(param[i] - lr * mh / (vh.sqrt() + eps));
    }
}

pub fn adam_step<T: Scalar>(
    param: &Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdamState<T>,
    lr: T,
    bounds: Bounds<T>,
) -> Result<Tensor<T>> {
    check_same_shape("adam_step", param.shape(), grad.shape())?;
    if state.m.len() != param.numel() {
        return Err(crate::error::dim_err(format!(
            "adam state holds {} moments for {} parameters",
            state.m.len(),
            param.numel()
        )));
    }
    let mut data = param.data().to_vec();
    adam_update(&mut data, grad.data(), state, lr, bounds);
    Tensor::new(param.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64([v.len()], v).unwrap()
    }

    #[test]
    fn signsgd_examples() {
        let free = Bounds::<f64>::unbounded();
        let p = signsgd_step(&t(&[0.2]), &t(&[-3.1]), 5e-3, free).unwrap();
        assert!((p.data()[0] - 0.205).abs() < 1e-15);
        let p = signsgd_step(&t(&[0.0]), &t(&[0.0]), 5e-3, free).unwrap();
        assert_eq!(p.data()[0], 0.0);
        let p = signsgd_step(&t(&[1.0]), &t(&[-0.2]), 5e-3, Bounds::new(1e-3, 1.0)).unwrap();
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn signsgd_moves_exactly_lr() {
        let free = Bounds::<f64>::unbounded();
        let p0 = t(&[0.1, -0.3, 0.25]);
        let p = signsgd_step(&p0, &t(&[1e-12, -7.0, 3.0]), 0.01, free).unwrap();
        for (a, b) in p.data().iter().zip(p0.data()) {
            assert!(((a - b).abs() - 0.01).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_first_step_is_lr_times_sign() {
        let mut st = AdamState::new(1);
        let lr = 5e-3;
        let p = adam_step(&t(&[0.0]), &t(&[2.0]), &mut st, lr, Bounds::unbounded()).unwrap();
        let moved = -p.data()[0];
        let want = lr * 2.0 / (2.0 + ADAM_EPS);
        assert!((moved - want).abs() < 1e-18);
        assert!((moved - 4.99999e-3).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_grad_and_oscillation() {
        let mut st = AdamState::new(1);
        let p = adam_step(&t(&[0.3]), &t(&[0.0]), &mut st, 1e-2, Bounds::unbounded()).unwrap();
        assert_eq!(p.data()[0], 0.3);

        let lr = 1e-2;
        let mut st = AdamState::new(1);
        let p1 = adam_step(&t(&[0.0]), &t(&[1.0]), &mut st, lr, Bounds::unbounded()).unwrap();
        let p2 = adam_step(&p1, &t(&[-1.0]), &mut st, lr, Bounds::unbounded()).unwrap();
        assert!(p2.data()[0].abs() < 2.0 * lr);
    }

    #[test]
    fn shape_mismatch() {
        assert!(signsgd_step(&t(&[0.0, 1.0]), &t(&[1.0]), 0.1, Bounds::unbounded()).is_err());
    }
}
