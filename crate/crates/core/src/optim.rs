//! Adam, He-uniform initialization and step-decay learning rates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPS: f64 = 1e-8;

    /// Fresh moments sized for `sizes[i]` parameters in slot `i`.
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            m: sizes.iter().map(|n| vec![T::zero(); *n]).collect(),
            v: sizes.iter().map(|n| vec![T::zero(); *n]).collect(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn with_defaults(sizes: &[usize]) -> Self {
        Self::new(sizes, Self::DEFAULT_BETA1, Self::DEFAULT_BETA2, Self::DEFAULT_EPS)
    }
}

/// One bias-corrected Adam update of every tensor in `params` from its
/// gradient buffer. Tensors without a gradient are treated as zero-gradient.
pub fn adam_step<T: Scalar>(params: &mut [&mut Tensor<T>], state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if params.len() != state.m.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer tracks {} slots, got {}",
            state.m.len(),
            params.len()
        )));
    }
    for (i, p) in params.iter().enumerate() {
        if p.values.len() != state.m[i].len() {
            return Err(Error::ShapeMismatch(format!(
                "slot {i}: optimizer has {} moments for {} values",
                state.m[i].len(),
                p.values.len()
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(grad) = p.grad.as_ref() else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..grad.len() {
            let g = grad[j].f64();
            let mj = b1 * m[j].f64() + (1.0 - b1) * g;
            let vj = b2 * v[j].f64() + (1.0 - b2) * g * g;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let step = lr * (mj / c1) / ((vj / c2).sqrt() + eps);
            p.values[j] = T::of(p.values[j].f64() - step);
        }
    }
    Ok(())
}

/// Samples `U(−L, L)` with `L = sqrt(6 / fan_in)`.
pub fn he_uniform<T: Scalar>(shape: Shape, fan_in: usize, seed: u64) -> Result<Tensor<T>> {
    if fan_in == 0 {
        return Err(Error::InvalidFanIn(fan_in));
    }
    let limit = (6.0 / fan_in as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..shape.len())
        .map(|_| T::of(rng.random_range(-limit..=limit)))
        .collect();
    Tensor::from_vec(shape, values)
}

/// `lr(e) = initial · 0.5^⌊e / halve_every⌋`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub halve_every: usize,
}

impl LrSchedule {
    pub fn new(initial: f64, halve_every: usize) -> Result<Self> {
        if !(initial > 0.0 && initial.is_finite()) || halve_every == 0 {
            return Err(Error::InvalidConfig(format!(
                "learning rate schedule needs initial > 0 and halve_every >= 1, got {initial}, {halve_every}"
            )));
        }
        Ok(LrSchedule { initial, halve_every })
    }

    /// Liver network: 1e-5 halved every 15 epochs.
    pub fn liver() -> Self {
        LrSchedule { initial: 1e-5, halve_every: 15 }
    }

    /// Lesion network: 3e-6 halved every 10 epochs.
    pub fn lesion() -> Self {
        LrSchedule { initial: 3e-6, halve_every: 10 }
    }
}

pub fn lr_at(s: &LrSchedule, epoch: usize) -> f64 {
    let halvings = (epoch / s.halve_every) as i32;
    s.initial * 0.5f64.powi(halvings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Tensor<f64> {
        Tensor::from_vec(Shape::new(1, 1, 1, 1), vec![v]).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = scalar_param(1.0);
        p.grad = Some(vec![-250.0]);
        let mut st = AdamState::<f64>::with_defaults(&[1]);
        adam_step(&mut [&mut p], &mut st, 0.01).unwrap();
        assert_eq!(st.t, 1);
        assert!((p.values[0] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(0.375);
        p.grad = Some(vec![0.0]);
        let mut st = AdamState::<f64>::with_defaults(&[1]);
        for _ in 0..50 {
            adam_step(&mut [&mut p], &mut st, 0.1).unwrap();
        }
        assert_eq!(p.values[0], 0.375);
        assert_eq!(st.t, 50);
    }

    #[test]
    fn minimizes_a_parabola() {
        let mut p = scalar_param(1.0);
        let mut st = AdamState::<f64>::with_defaults(&[1]);
        for _ in 0..100 {
            p.grad = Some(vec![2.0 * p.values[0]]);
            adam_step(&mut [&mut p], &mut st, 0.1).unwrap();
        }
        assert!(p.values[0].abs() < 0.05, "w = {}", p.values[0]);
    }

    /// Scalar re-simulation of the same recurrence, written out longhand.
    #[test]
    fn matches_scalar_recurrence() {
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.05f64);
        let (mut w, mut m, mut v) = (1.5f64, 0.0f64, 0.0f64);
        let mut p = scalar_param(1.5);
        let mut st = AdamState::<f64>::with_defaults(&[1]);
        for t in 1..=20 {
            let g = 3.0 * w * w - 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            w -= lr * mh / (vh.sqrt() + eps);

            p.grad = Some(vec![3.0 * p.values[0] * p.values[0] - 1.0]);
            adam_step(&mut [&mut p], &mut st, lr).unwrap();
            assert!((p.values[0] - w).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_equivariant_first_step() {
        let grads = [0.3, -2.0, 1e-3, 7.5];
        let run = |c: f64| {
            let mut p = Tensor::<f64>::zeros(Shape::new(1, 1, 1, 4));
            p.grad = Some(grads.iter().map(|g| g * c).collect());
            let mut st = AdamState::<f64>::new(&[4], 0.9, 0.999, 1e-12);
            adam_step(&mut [&mut p], &mut st, 0.1).unwrap();
            p.values
        };
        let (a, b) = (run(1.0), run(37.0));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut p = scalar_param(0.0);
        let mut st = AdamState::<f64>::with_defaults(&[2]);
        assert!(adam_step(&mut [&mut p], &mut st, 0.1).is_err());
    }

    #[test]
    fn he_uniform_bounds_and_determinism() {
        let s = Shape::new(100, 1, 1, 100);
        let a = he_uniform::<f64>(s, 6, 3).unwrap();
        assert!(a.values.iter().all(|v| (-1.0..=1.0).contains(v)));
        let b = he_uniform::<f64>(s, 6, 3).unwrap();
        assert_eq!(a, b);
        assert!(matches!(he_uniform::<f32>(s, 0, 3), Err(Error::InvalidFanIn(0))));
    }

    #[test]
    fn he_uniform_moments() {
        let a = he_uniform::<f64>(Shape::new(1, 1, 1, 100_000), 6, 11).unwrap();
        let n = a.values.len() as f64;
        let mean = a.values.iter().sum::<f64>() / n;
        let var = a.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01);
        // L = 1 => variance 1/3
        assert!((var - 1.0 / 3.0).abs() < 0.05 / 3.0);
    }

    #[test]
    fn schedules() {
        let liver = LrSchedule::liver();
        assert_eq!(lr_at(&liver, 0), 1e-5);
        assert_eq!(lr_at(&liver, 15), 5e-6);
        let lesion = LrSchedule::lesion();
        assert_eq!(lr_at(&lesion, 0), 3e-6);
        assert_eq!(lr_at(&lesion, 9), 3e-6);
        assert_eq!(lr_at(&lesion, 10), 1.5e-6);
        assert_eq!(lr_at(&lesion, 20), 7.5e-7);
        let mut prev = f64::INFINITY;
        for e in 0..100 {
            let lr = lr_at(&lesion, e);
            assert!(lr <= prev);
            prev = lr;
        }
        assert!(LrSchedule::new(0.0, 1).is_err());
        assert!(LrSchedule::new(1.0, 0).is_err());
    }
}
