use super::Tensor;
use crate::error::{Error, Result};

/// SGD with classical momentum: `v <- momentum * v + grad`, `p <- p - lr * v`.
///
/// Velocities are keyed by position in the slice passed to [`Sgd::step`],
/// so callers must pass parameters in the same order every time. With
/// [`Sgd::with_clip`], the gradients of a step are rescaled together
/// whenever their joint L2 norm exceeds the limit.
#[derive(Debug, Clone)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    max_norm: Option<f64>,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Self {
            lr,
            momentum,
            max_norm: None,
            velocity: Vec::new(),
        })
    }

    pub fn with_clip(mut self, max_norm: f64) -> Result<Self> {
        if !(max_norm > 0.0 && max_norm.is_finite()) {
            return Err(Error::Config(format!("gradient clip must be positive, got {max_norm}")));
        }
        self.max_norm = Some(max_norm);
        Ok(self)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    /// Applies one update and zeroes the consumed gradients.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
            return Err(Error::OptimizerState(format!("parameter {i} has no gradient")));
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        } else if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.numel())
        {
            return Err(Error::OptimizerState(
                "parameter set changed between optimizer steps".into(),
            ));
        }
        let scale = match self.max_norm {
            Some(limit) => {
                let norm = params
                    .iter()
                    .flat_map(|p| p.grad().expect("checked above"))
                    .map(|g| g * g)
                    .sum::<f64>()
                    .sqrt();
                if norm > limit {
                    limit / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        for (p, v) in params.iter_mut().zip(self.velocity.iter_mut()) {
            let grad = p.grad().expect("checked above").to_vec();
            for ((vi, gi), pi) in v.iter_mut().zip(&grad).zip(p.data_mut()) {
                *vi = self.momentum * *vi + scale * gi;
                *pi -= self.lr * *vi;
            }
            p.zero_grad();
        }
        Ok(())
    }
}

/// Cosine decay from `base` at `step = 0` towards zero at `step = total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v).with_requires_grad();
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn clipping_rescales_the_joint_norm() {
        // grads (3, 4) have norm 5; clipped to 1 they become (0.6, 0.8)
        let (mut a, mut b) = (param(0.0, 3.0), param(0.0, 4.0));
        let mut opt = Sgd::new(1.0, 0.0).unwrap().with_clip(1.0).unwrap();
        opt.step(&mut [&mut a, &mut b]).unwrap();
        assert!((a.item() + 0.6).abs() < 1e-15 && (b.item() + 0.8).abs() < 1e-15);
        // below the limit nothing changes
        let mut c = param(0.0, 0.5);
        Sgd::new(1.0, 0.0).unwrap().with_clip(1.0).unwrap().step(&mut [&mut c]).unwrap();
        assert_eq!(c.item(), -0.5);
        assert!(Sgd::new(1.0, 0.0).unwrap().with_clip(0.0).is_err());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-15);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-15);
        assert_eq!(cosine_lr(0.1, 3, 0), 0.1);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = param(1.5, 3.0);
        Sgd::new(0.0, 0.9).unwrap().step(&mut [&mut p]).unwrap();
        assert_eq!(p.item(), 1.5);
    }

    #[test]
    fn plain_step() {
        let mut p = param(1.0, 0.5);
        Sgd::new(0.1, 0.0).unwrap().step(&mut [&mut p]).unwrap();
        assert!((p.item() - 0.95).abs() < 1e-15);
        assert_eq!(p.grad(), Some(&[0.0][..]));
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let mut p = param(0.0, 1.0);
        let mut opt = Sgd::new(0.1, 0.9).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((p.item() + 0.1).abs() < 1e-15);
        p.set_grad(vec![1.0]).unwrap();
        opt.step(&mut [&mut p]).unwrap();
        assert!((opt.velocity[0][0] - 1.9).abs() < 1e-15);
        assert!((p.item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_rejected() {
        let mut p = Tensor::scalar(1.0).with_requires_grad();
        let err = Sgd::new(0.1, 0.9).unwrap().step(&mut [&mut p]).unwrap_err();
        assert!(matches!(err, Error::OptimizerState(_)));
    }
}
