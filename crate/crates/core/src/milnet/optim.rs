use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Cosine annealing from `initial` down to 0 over `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(initial: f64, total_steps: u64) -> Result<Self> {
        if initial.is_nan() || initial <= 0.0 || !initial.is_finite() {
            return Err(Error::config(format!("learning rate must be > 0, got {initial}")));
        }
        if total_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        Ok(LrSchedule { initial, total_steps })
    }
}

/// `0.5 · lr₀ · (1 + cos(π·t/T))`.
pub fn cosine_lr(step: u64, schedule: &LrSchedule) -> Result<f64> {
    if step > schedule.total_steps {
        return Err(Error::config(format!(
            "step {step} beyond schedule length {}",
            schedule.total_steps
        )));
    }
    let frac = step as f64 / schedule.total_steps as f64;
    Ok(0.5 * schedule.initial * (1.0 + (PI * frac).cos()))
}

/// Adam moment accumulators for a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(sizes: &[usize]) -> Self {
        OptimizerState {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected Adam update.
    pub fn update(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], lr: f64) -> Result<()> {
        let shapes_ok = params.len() == self.m.len()
            && grads.len() == self.m.len()
            && params
                .iter()
                .zip(grads)
                .zip(&self.m)
                .all(|((p, g), m)| p.len() == m.len() && g.len() == m.len());
        if !shapes_ok {
            return Err(Error::config("parameter and gradient shapes do not match optimizer state"));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = LrSchedule::new(2e-4, 100).unwrap();
        assert_eq!(cosine_lr(0, &s).unwrap(), 2e-4);
        assert!(cosine_lr(100, &s).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, &s).unwrap() - 1e-4).abs() < 1e-18);
        assert!(cosine_lr(101, &s).is_err());
        assert!(LrSchedule::new(0.0, 10).is_err());
        assert!(LrSchedule::new(1e-3, 0).is_err());
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut state = OptimizerState::new(&[3]);
        let mut p = vec![1.0, -2.0, 3.0];
        state.update(&mut [&mut p], &[&[0.0, 0.0, 0.0]], 0.1).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut state = OptimizerState::new(&[1]);
        let mut p = vec![0.5];
        state.update(&mut [&mut p], &[&[1.0]], 0.1).unwrap();
        assert!((p[0] - 0.4).abs() < 1e-7);
    }

    #[test]
    fn minimizes_square() {
        let mut state = OptimizerState::new(&[1]);
        let mut x = vec![1.0];
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            state.update(&mut [&mut x], &[&g], 0.05).unwrap();
        }
        // Independent scalar recurrence.
        let (mut xr, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * xr;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            xr -= 0.05 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        }
        assert!((x[0] - xr).abs() < 1e-15);
        assert!(x[0].abs() < 0.05, "{}", x[0]);
    }

    #[test]
    fn shape_mismatch() {
        let mut state = OptimizerState::new(&[2]);
        let mut p = vec![0.0; 3];
        assert!(state.update(&mut [&mut p], &[&[0.0; 3]], 0.1).is_err());
    }
}
