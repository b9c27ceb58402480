//! Optimizers and learning-rate schedules.

use ndarray::ArrayD;

use super::Scalar;

/// SGD with momentum and L2 weight decay (decay added to the gradient).
pub struct SgdMomentum<F: Scalar> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<ArrayD<F>>,
}

impl<F: Scalar> SgdMomentum<F> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        SgdMomentum { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut ArrayD<F>>, grads: &[ArrayD<F>]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        let mu = F::from_f64(self.momentum);
        let wd = F::from_f64(self.weight_decay);
        let lr = F::from_f64(self.lr);
        for ((p, g), v) in params.into_iter().zip(grads).zip(self.velocity.iter_mut()) {
            ndarray::Zip::from(&mut *v).and(&*p).and(g).for_each(|v, &p, &g| {
                *v = *v * mu + (g + p * wd);
            });
            ndarray::Zip::from(p).and(&*v).for_each(|p, &v| {
                *p = *p - lr * v;
            });
        }
    }
}

/// RMSProp (square-average form, as in the common deep-learning
/// framework default: alpha 0.99, eps 1e-8).
pub struct RmsProp<F: Scalar> {
    pub lr: f64,
    pub alpha: f64,
    pub eps: f64,
    sq_avg: Vec<ArrayD<F>>,
}

impl<F: Scalar> RmsProp<F> {
    pub fn new(lr: f64) -> Self {
        RmsProp { lr, alpha: 0.99, eps: 1e-8, sq_avg: Vec::new() }
    }

    pub fn step(&mut self, params: Vec<&mut ArrayD<F>>, grads: &[ArrayD<F>]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.sq_avg.is_empty() {
            self.sq_avg = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        let alpha = F::from_f64(self.alpha);
        let one_minus = F::from_f64(1.0 - self.alpha);
        let eps = F::from_f64(self.eps);
        let lr = F::from_f64(self.lr);
        for ((p, g), v) in params.into_iter().zip(grads).zip(self.sq_avg.iter_mut()) {
            ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| {
                *v = *v * alpha + g * g * one_minus;
            });
            ndarray::Zip::from(p).and(&*v).and(g).for_each(|p, &v, &g| {
                *p = *p - lr * g / (v.sqrt() + eps);
            });
        }
    }
}

/// Step decay at fractional milestones of the total epoch budget.
#[derive(Debug, Clone)]
pub struct MultiStepLr {
    pub base_lr: f64,
    pub milestones: Vec<f64>,
    pub gamma: f64,
}

impl MultiStepLr {
    pub fn fixed(lr: f64) -> Self {
        MultiStepLr { base_lr: lr, milestones: Vec::new(), gamma: 1.0 }
    }

    pub fn at_progress(base_lr: f64, milestones: Vec<f64>, gamma: f64) -> Self {
        MultiStepLr { base_lr, milestones, gamma }
    }

    /// Learning rate for `epoch` out of `total` epochs.
    pub fn lr(&self, epoch: usize, total: usize) -> f64 {
        let progress = if total == 0 { 0.0 } else { epoch as f64 / total as f64 };
        let passed = self.milestones.iter().filter(|&&m| progress >= m).count();
        self.base_lr * self.gamma.powi(passed as i32)
    }
}
