//! Adam with bias correction, plus a staged learning-rate schedule.

use crate::module::{Module, StateKind};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params` (same order on every call) from `grads`.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        assert_eq!(params.len(), grads.len(), "adam: param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "adam: parameter set changed");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            assert_eq!(p.shape(), g.shape(), "adam: gradient shape");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *x -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Update every trainable parameter of `module`; `grads` in visiting order.
    pub fn step_module(&mut self, module: &mut dyn Module, grads: &[Tensor], lr: f64) {
        let mut params: Vec<&mut Tensor> = Vec::new();
        // Collect raw pointers first: visit_mut hands out short-lived borrows.
        let mut ptrs: Vec<*mut Tensor> = Vec::new();
        module.visit_mut(&mut |_, t, k| {
            if k == StateKind::Param {
                ptrs.push(t as *mut Tensor);
            }
        });
        for p in ptrs {
            // SAFETY: each pointer refers to a distinct field of `module`,
            // which stays mutably borrowed for the rest of this function.
            params.push(unsafe { &mut *p });
        }
        self.step(&mut params, grads, lr);
    }
}

/// Piecewise-constant schedule: the rate is multiplied by `factor` at
/// each milestone iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StagedLr {
    pub base: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl StagedLr {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    /// Milestones at the given fractions of `total` iterations.
    pub fn at_fractions(base: f64, total: usize, fractions: &[f64], factor: f64) -> Self {
        Self {
            base,
            milestones: fractions
                .iter()
                .map(|f| (f * total as f64).round() as usize)
                .collect(),
            factor,
        }
    }

    /// Rate for zero-based iteration `iter`.
    pub fn rate(&self, iter: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| iter >= m).count();
        self.base * self.factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]);
        let g = Tensor::new(vec![2], vec![0.5, -3.0]);
        let mut adam = Adam::new(0.9, 0.999);
        adam.step(&mut [&mut p], &[g], 0.1);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn staged_schedule_halves() {
        let s = StagedLr::at_fractions(0.1, 300, &[1.0 / 3.0, 2.0 / 3.0], 0.5);
        assert_eq!(s.milestones, vec![100, 200]);
        assert_eq!(s.rate(0), 0.1);
        assert_eq!(s.rate(99), 0.1);
        assert_eq!(s.rate(100), 0.05);
        assert_eq!(s.rate(250), 0.025);
    }
}
