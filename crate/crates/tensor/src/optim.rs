//! First-order optimizers with decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::params::{GradSet, ParamSet};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimMode {
    /// `v <- mu v + g; theta <- theta - lr v`.
    SgdMomentum { momentum: f64 },
    /// Adam moments with bias correction (AdamW when weight decay is set).
    Adaptive { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimMode {
    pub fn sgd(momentum: f64) -> Self {
        OptimMode::SgdMomentum { momentum }
    }

    pub fn adamw() -> Self {
        OptimMode::Adaptive { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub mode: OptimMode,
    pub weight_decay: f64,
    step: u64,
    /// Momentum buffer (sgd) or first moment (adaptive).
    first: Vec<Vec<T>>,
    /// Second moment; empty in sgd mode.
    second: Vec<Vec<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new(mode: OptimMode, weight_decay: f64, params: &ParamSet<T>) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.value.numel()]).collect::<Vec<_>>();
        let second = match mode {
            OptimMode::SgdMomentum { .. } => Vec::new(),
            OptimMode::Adaptive { .. } => zeros(),
        };
        Self { mode, weight_decay, step: 0, first: zeros(), second }
    }

    /// Rebuilds a state from stored buffers (checkpoint restore).
    pub fn from_parts(mode: OptimMode, weight_decay: f64, step: u64, first: Vec<Vec<T>>, second: Vec<Vec<T>>) -> Self {
        Self { mode, weight_decay, step, first, second }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.second
    }

    /// Applies one update to every parameter.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &GradSet<T>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(TensorError::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(TensorError::Contract(format!(
                "optimizer holds {} buffers, {} parameters, {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads.buffers()).zip(&self.first) {
            if p.value.numel() != g.len() || m.len() != g.len() {
                return Err(TensorError::Contract(format!(
                    "gradient for {} has {} elements, parameter has {}",
                    p.name,
                    g.len(),
                    p.value.numel()
                )));
            }
        }
        self.step += 1;
        let lr_t = T::c(lr);
        let decay_factor = T::c(1.0 - lr * self.weight_decay);
        match self.mode {
            OptimMode::SgdMomentum { momentum } => {
                let mu = T::c(momentum);
                for ((p, g), v) in params.iter_mut().zip(grads.buffers()).zip(&mut self.first) {
                    let decay = p.decay && self.weight_decay != 0.0;
                    for ((theta, &gi), vi) in p.value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                        if decay {
                            *theta *= decay_factor;
                        }
                        *vi = mu * *vi + gi;
                        *theta -= lr_t * *vi;
                    }
                }
            }
            OptimMode::Adaptive { beta1, beta2, eps } => {
                let t = self.step as i32;
                let bc1 = T::c(1.0 - beta1.powi(t));
                let bc2 = T::c(1.0 - beta2.powi(t));
                let (b1, b2, eps) = (T::c(beta1), T::c(beta2), T::c(eps));
                let one = T::one();
                for (((p, g), m), v) in
                    params.iter_mut().zip(grads.buffers()).zip(&mut self.first).zip(&mut self.second)
                {
                    let decay = p.decay && self.weight_decay != 0.0;
                    for (((theta, &gi), mi), vi) in
                        p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        if decay {
                            *theta *= decay_factor;
                        }
                        *mi = b1 * *mi + (one - b1) * gi;
                        *vi = b2 * *vi + (one - b2) * gi * gi;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *theta -= lr_t * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_set(v: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("theta", Tensor::from_f64(&[1], &[v]), true);
        p
    }

    fn grad(v: f64, params: &ParamSet<f64>) -> GradSet<f64> {
        let mut g = GradSet::zeros_like(params);
        g.get_mut(params.id("theta").unwrap())[0] = v;
        g
    }

    #[test]
    fn plain_gradient_step() {
        let mut p = scalar_set(1.0);
        let mut opt = OptimState::new(OptimMode::sgd(0.0), 0.0, &p);
        let gr = grad(0.5, &p);
            opt.step(&mut p, &gr, 0.1).unwrap();
        assert!((p.by_name("theta").unwrap().data()[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_identity_for_both_modes() {
        for mode in [OptimMode::sgd(0.9), OptimMode::adamw()] {
            let mut p = scalar_set(0.7);
            let mut opt = OptimState::new(mode, 0.05, &p);
            for _ in 0..3 {
                let gr = grad(1.3, &p);
            opt.step(&mut p, &gr, 0.0).unwrap();
            }
            assert_eq!(p.by_name("theta").unwrap().data()[0], 0.7);
        }
    }

    #[test]
    fn adaptive_matches_scalar_reference() {
        let (b1, b2, eps, wd, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.04f64, 0.01f64);
        let mut p = scalar_set(0.3);
        let mut opt = OptimState::new(OptimMode::Adaptive { beta1: b1, beta2: b2, eps }, wd, &p);
        let gs = [1.0, -0.4, 2.5];
        // hand-rolled reference of the same equations
        let (mut theta, mut m, mut v) = (0.3f64, 0.0f64, 0.0f64);
        for (t, &g) in gs.iter().enumerate() {
            let t = (t + 1) as i32;
            theta -= lr * wd * theta;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
            let gr = grad(g, &p);
            opt.step(&mut p, &gr, lr).unwrap();
            assert!((p.by_name("theta").unwrap().data()[0] - theta).abs() < 1e-12);
        }
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn sgd_weight_decay_precedes_momentum() {
        let mut p = scalar_set(2.0);
        let mut opt = OptimState::new(OptimMode::sgd(0.9), 0.5, &p);
        let gr = grad(1.0, &p);
            opt.step(&mut p, &gr, 0.1).unwrap();
        // 2 - 0.1*0.5*2 = 1.9, then v = 1, theta = 1.8
        assert!((p.by_name("theta").unwrap().data()[0] - 1.8).abs() < 1e-12);
        let gr = grad(1.0, &p);
            opt.step(&mut p, &gr, 0.1).unwrap();
        // 1.8*0.95 = 1.71, v = 1.9, theta = 1.52
        assert!((p.by_name("theta").unwrap().data()[0] - 1.52).abs() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut p = scalar_set(1.0);
        let mut opt = OptimState::new(OptimMode::sgd(0.9), 0.0, &p);
        let mut other = ParamSet::new();
        other.add("a", Tensor::<f64>::zeros(&[1]), true);
        other.add("b", Tensor::<f64>::zeros(&[1]), true);
        let g = GradSet::zeros_like(&other);
        assert!(matches!(opt.step(&mut p, &g, 0.1), Err(TensorError::Contract(_))));
        let gr = grad(1.0, &p);
        assert!(opt.step(&mut p, &gr, -1.0).is_err());
    }
}
