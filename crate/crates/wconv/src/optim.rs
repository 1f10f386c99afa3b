//! Optimizers and schedules: SGD with momentum and L2 weight decay, Adam
//! with bias correction, cosine-annealed learning rate, early stopping.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimKind {
    Sgd,
    Adam,
}

/// Per-parameter optimizer state. Slots are allocated lazily on the first
/// step and mirror the parameter shapes from then on; the step counter
/// increases by one per [`OptimizerState::step`] call.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: OptimKind,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    steps: u64,
    slot_a: Vec<Tensor>, // momentum buffers / first moments
    slot_b: Vec<Tensor>, // second moments (Adam only)
}

impl OptimizerState {
    /// SGD: `v <- momentum * v + (g + weight_decay * theta); theta <- theta - lr * v`.
    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimKind::Sgd,
            lr,
            momentum,
            weight_decay,
            beta1: 0.0,
            beta2: 0.0,
            eps: 0.0,
            steps: 0,
            slot_a: Vec::new(),
            slot_b: Vec::new(),
        }
    }

    /// Bias-corrected Adam with `eps = 1e-8`.
    pub fn adam(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            kind: OptimKind::Adam,
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            beta1,
            beta2,
            eps: 1e-8,
            steps: 0,
            slot_a: Vec::new(),
            slot_b: Vec::new(),
        }
    }

    pub fn kind(&self) -> OptimKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Updates the learning rate (schedules call this between epochs).
    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update to every `(parameter, gradient)` slot, in slot
    /// order. Gradients are left untouched.
    pub fn step(&mut self, slots: &mut [(&mut Tensor, &mut Tensor)]) -> Result<()> {
        self.ensure_slots(slots)?;
        self.steps += 1;
        match self.kind {
            OptimKind::Sgd => self.sgd_step(slots),
            OptimKind::Adam => self.adam_step(slots),
        }
        Ok(())
    }

    fn ensure_slots(&mut self, slots: &[(&mut Tensor, &mut Tensor)]) -> Result<()> {
        if self.slot_a.is_empty() {
            self.slot_a = slots.iter().map(|(p, _)| p.zeros_like()).collect();
            if self.kind == OptimKind::Adam {
                self.slot_b = slots.iter().map(|(p, _)| p.zeros_like()).collect();
            }
            return Ok(());
        }
        if self.slot_a.len() != slots.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} parameters, got {}",
                self.slot_a.len(),
                slots.len()
            )));
        }
        for (buf, (p, g)) in self.slot_a.iter().zip(slots) {
            if buf.shape() != p.shape() || p.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "optimizer slot {:?} vs param {:?} vs grad {:?}",
                    buf.shape(),
                    p.shape(),
                    g.shape()
                )));
            }
        }
        Ok(())
    }

    fn sgd_step(&mut self, slots: &mut [(&mut Tensor, &mut Tensor)]) {
        for (i, (param, grad)) in slots.iter_mut().enumerate() {
            let v = self.slot_a[i].data_mut();
            let p = param.data_mut();
            let g = grad.data();
            for j in 0..p.len() {
                let gt = g[j] + self.weight_decay * p[j];
                v[j] = self.momentum * v[j] + gt;
                p[j] -= self.lr * v[j];
            }
        }
    }

    fn adam_step(&mut self, slots: &mut [(&mut Tensor, &mut Tensor)]) {
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (param, grad)) in slots.iter_mut().enumerate() {
            let m = self.slot_a[i].data_mut();
            let v = self.slot_b[i].data_mut();
            let p = param.data_mut();
            let g = grad.data();
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

/// Cosine-annealing schedule from `base_lr` down to `min_lr`.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl Schedule {
    pub fn cosine(base_lr: f64, total_epochs: usize) -> Self {
        Self { base_lr, total_epochs, min_lr: 0.0 }
    }
}

/// `lr = min + 0.5 (base - min) (1 + cos(pi * epoch / total))`.
pub fn cosine_lr(epoch: usize, schedule: &Schedule) -> Result<f64> {
    if epoch > schedule.total_epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} beyond schedule total {}",
            schedule.total_epochs
        )));
    }
    if schedule.total_epochs == 0 {
        return Ok(schedule.base_lr);
    }
    let t = epoch as f64 / schedule.total_epochs as f64;
    Ok(schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Stops training after `patience` consecutive epochs without improvement
/// of the validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    counter: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, counter: 0 }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records one epoch's validation loss; returns true when training
    /// should stop.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.counter = 0;
            false
        } else {
            self.counter += 1;
            self.counter >= self.patience
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    #[test]
    fn sgd_plain_gradient_descent() {
        let mut state = OptimizerState::sgd(0.1, 0.0, 0.0);
        let mut p = scalar(2.0);
        let mut g = scalar(3.0);
        state.step(&mut [(&mut p, &mut g)]).unwrap();
        assert!((p.data()[0] - (2.0 - 0.1 * 3.0)).abs() < 1e-15);
        assert_eq!(state.steps(), 1);
    }

    #[test]
    fn sgd_momentum_second_update_magnitude() {
        let mut state = OptimizerState::sgd(0.1, 0.9, 0.0);
        let mut p = scalar(0.0);
        let mut g = scalar(1.0);
        state.step(&mut [(&mut p, &mut g)]).unwrap();
        let after_first = p.data()[0];
        assert!((after_first - (-0.1)).abs() < 1e-15);
        state.step(&mut [(&mut p, &mut g)]).unwrap();
        let second_update = p.data()[0] - after_first;
        assert!((second_update - (-0.1 * 1.9)).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_is_a_fixed_point() {
        let mut state = OptimizerState::sgd(0.5, 0.9, 0.0);
        let mut p = scalar(1.25);
        let mut g = scalar(0.0);
        for _ in 0..5 {
            state.step(&mut [(&mut p, &mut g)]).unwrap();
        }
        assert_eq!(p.data()[0], 1.25);
    }

    #[test]
    fn sgd_weight_decay_pulls_towards_zero() {
        let mut state = OptimizerState::sgd(0.1, 0.0, 0.5);
        let mut p = scalar(1.0);
        let mut g = scalar(0.0);
        state.step(&mut [(&mut p, &mut g)]).unwrap();
        assert!((p.data()[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_roughly_lr_times_sign() {
        let mut state = OptimizerState::adam(0.1, 0.9, 0.999);
        let mut p = scalar(5.0);
        let mut g = scalar(3.0);
        state.step(&mut [(&mut p, &mut g)]).unwrap();
        let update = 5.0 - p.data()[0];
        assert!((update - 0.1).abs() < 1e-8, "update {update}");
    }

    #[test]
    fn adam_zero_gradient_no_movement() {
        let mut state = OptimizerState::adam(0.1, 0.9, 0.999);
        let mut p = scalar(-2.0);
        let mut g = scalar(0.0);
        for _ in 0..10 {
            state.step(&mut [(&mut p, &mut g)]).unwrap();
        }
        assert_eq!(p.data()[0], -2.0);
    }

    #[test]
    fn adam_matches_scalar_reference_recursion() {
        let mut state = OptimizerState::adam(0.01, 0.9, 0.999);
        let mut p = scalar(1.0);

        // independent scalar recursion with explicit bias-corrected step size
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = (t as f64 * 0.17).sin();
            let mut gt = scalar(g);
            state.step(&mut [(&mut p, &mut gt)]).unwrap();

            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
            assert!((p.data()[0] - theta).abs() <= 1e-12, "step {t}");
        }
    }

    #[test]
    fn zero_lr_freezes_parameters() {
        for mut state in [OptimizerState::sgd(0.0, 0.9, 0.1), OptimizerState::adam(0.0, 0.9, 0.999)] {
            let mut p = scalar(0.7);
            let mut g = scalar(2.0);
            for _ in 0..20 {
                state.step(&mut [(&mut p, &mut g)]).unwrap();
            }
            assert_eq!(p.data()[0], 0.7);
        }
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        let mut state = OptimizerState::sgd(0.1, 0.0, 0.0);
        let mut p = scalar(1.0);
        let mut last = 1.0f64;
        for step in 0..200 {
            let mut g = scalar(2.0 * p.data()[0]);
            state.step(&mut [(&mut p, &mut g)]).unwrap();
            let cur = p.data()[0].abs();
            assert!(cur <= last, "not monotone at step {step}");
            last = cur;
            if last < 1e-6 {
                return;
            }
        }
        panic!("did not reach 1e-6 within 200 steps, ended at {last}");
    }

    #[test]
    fn optimizer_rejects_shape_drift() {
        let mut state = OptimizerState::sgd(0.1, 0.9, 0.0);
        let mut p = scalar(1.0);
        let mut g = scalar(1.0);
        state.step(&mut [(&mut p, &mut g)]).unwrap();
        let mut p2 = Tensor::zeros(&[2]).unwrap();
        let mut g2 = Tensor::zeros(&[2]).unwrap();
        assert!(state.step(&mut [(&mut p2, &mut g2)]).is_err());
    }

    #[test]
    fn cosine_schedule_boundaries() {
        let s = Schedule::cosine(0.1, 100);
        assert_eq!(cosine_lr(0, &s).unwrap(), 0.1);
        assert!((cosine_lr(50, &s).unwrap() - 0.05).abs() < 1e-15);
        assert!(cosine_lr(100, &s).unwrap().abs() < 1e-17);
        assert!(cosine_lr(101, &s).is_err());
    }

    #[test]
    fn early_stopping_needs_consecutive_failures() {
        let mut es = EarlyStopping::new(3);
        assert!(!es.observe(1.0));
        assert!(!es.observe(0.9)); // improvement resets
        assert!(!es.observe(0.95));
        assert!(!es.observe(0.93));
        assert!(!es.observe(0.8)); // improvement again
        assert!(!es.observe(0.9));
        assert!(!es.observe(0.9));
        assert!(es.observe(0.9)); // third consecutive non-improvement
        assert_eq!(es.best(), 0.8);
    }
}
