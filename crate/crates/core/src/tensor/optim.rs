use std::f64::consts::PI;

use crate::error::{Error, Result};

use super::ParamVector;

/// Adam with bias correction. β₁ = 0.9, β₂ = 0.999, ε = 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub const BETA1: f64 = 0.9;
    pub const BETA2: f64 = 0.999;
    pub const EPS: f64 = 1e-8;

    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update in place. Nothing is modified if `grads` holds a
    /// non-finite entry.
    pub fn step(&mut self, params: &mut ParamVector, grads: &ParamVector, lr: f64) -> Result<()> {
        params.check_compatible(grads)?;
        if self.m.len() != params.len() {
            return Err(Error::LengthMismatch {
                expected: self.m.len(),
                actual: params.len(),
            });
        }
        if let Some(seg) = grads.first_non_finite_segment() {
            return Err(Error::NonFiniteGradient {
                segment: seg.to_string(),
            });
        }
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        let g = grads.values();
        for (((p, m), v), &gi) in params
            .values_mut()
            .iter_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
            .zip(g)
        {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gi;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gi * gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + Self::EPS);
        }
        Ok(())
    }
}

/// Cosine-annealed learning rate; `step` is clamped to `[0, total_steps]`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    let total = total_steps.max(1);
    let s = step.min(total);
    if s == total {
        return 0.0;
    }
    lr0 * (1.0 + (PI * s as f64 / total as f64).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::LayoutBuilder;

    fn single(len: usize, v: f64) -> ParamVector {
        let mut b = LayoutBuilder::new();
        b.push("w", &[len]);
        ParamVector::from_values(b.finish(), vec![v; len]).unwrap()
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = single(3, 0.7);
        let g = p.map(|_| 0.0);
        let mut adam = Adam::new(3);
        adam.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.values(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut b = LayoutBuilder::new();
        b.push("w", &[2]);
        let layout = b.finish();
        let mut p = ParamVector::from_values(layout.clone(), vec![1.0, 1.0]).unwrap();
        let g = ParamVector::from_values(layout, vec![3.0, -0.5]).unwrap();
        let mut adam = Adam::new(2);
        adam.step(&mut p, &g, 0.01).unwrap();
        assert!((p.values()[0] - (1.0 - 0.01)).abs() < 1e-8);
        assert!((p.values()[1] - (1.0 + 0.01)).abs() < 1e-8);
    }

    #[test]
    fn quadratic_descent_is_monotone() {
        // f(w) = w², gradient 2w.
        let mut p = single(1, 1.0);
        let mut adam = Adam::new(1);
        let mut last = 1.0_f64;
        for _ in 0..10 {
            let g = p.map(|w| 2.0 * w);
            adam.step(&mut p, &g, 0.1).unwrap();
            let w = p.values()[0].abs();
            assert!(w < last, "{w} !< {last}");
            last = w;
        }
    }

    #[test]
    fn nan_gradient_names_segment() {
        let mut b = LayoutBuilder::new();
        b.push("first", &[2]);
        b.push("second", &[2]);
        let layout = b.finish();
        let mut p = ParamVector::zeros(layout.clone());
        let g = ParamVector::from_values(layout, vec![0.0, 0.0, 1.0, f64::NAN]).unwrap();
        let err = Adam::new(4).step(&mut p, &g, 0.1).unwrap_err();
        assert!(err.to_string().contains("second"), "{err}");
        assert!(p.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3), 1e-3);
        assert_eq!(cosine_lr(100, 100, 1e-3), 0.0);
        assert!((cosine_lr(50, 100, 1e-3) - 5e-4).abs() < 1e-18);
        assert_eq!(cosine_lr(500, 100, 1e-3), 0.0);
        assert_eq!(cosine_lr(0, 0, 2.0), 2.0);
    }
}
