use super::{ParamSet, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    /// Contrastive-stage optimizer settings reported for the full-scale runs.
    pub const FULL_SCALE: SgdConfig = SgdConfig {
        lr: 5.566_694_5e-6,
        momentum: 0.9,
        weight_decay: 1e-6,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(
                "sgd",
                format!("learning rate must be positive, got {}", self.lr),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(
                "sgd",
                format!("momentum must lie in [0, 1), got {}", self.momentum),
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "sgd",
                format!("weight decay must be >= 0, got {}", self.weight_decay),
            ));
        }
        Ok(())
    }
}

/// Classic momentum SGD with L2 weight decay folded into the gradient:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
#[derive(Debug, Clone)]
pub struct SgdState<T: Scalar = f32> {
    pub config: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Vec<T>] {
        &self.velocity
    }

    /// Applies one update to every entry of `params` and clears their grads.
    /// Every entry must carry a gradient.
    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGrad(name.to_string()));
        }
        if self.velocity.is_empty() {
            self.velocity = params.tensors().map(|t| vec![T::zero(); t.len()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::Misaligned(format!(
                "optimizer holds {} velocity buffers for {} parameters",
                self.velocity.len(),
                params.len()
            )));
        }
        let lr = T::from_f64(self.config.lr);
        let mom = T::from_f64(self.config.momentum);
        let wd = T::from_f64(self.config.weight_decay);
        for ((name, t), v) in params.iter_mut().zip(&mut self.velocity) {
            if v.len() != t.len() {
                return Err(Error::Misaligned(format!("velocity for `{name}` has wrong size")));
            }
            let g = t.take_grad().expect("checked above");
            for ((p, vel), gv) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vel = mom * *vel + gv + wd * *p;
                *p = *p - lr * *vel;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one(v: f64, g: Option<f64>) -> ParamSet<f64> {
        let mut t = Tensor::<f64>::scalar(v).tracked();
        if let Some(g) = g {
            t.set_grad(vec![g]).unwrap();
        }
        let mut p = ParamSet::new();
        p.push("p", t);
        p
    }

    #[test]
    fn plain_step() {
        let mut p = one(1.0, Some(0.5));
        let mut s = SgdState::new(SgdConfig {
            lr: 1.0,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        s.step(&mut p).unwrap();
        assert_eq!(p.flat(), vec![0.5]);
        assert!(p.get("p").unwrap().grad().is_none());
    }

    #[test]
    fn zero_grad_decays_velocity() {
        let mut p = one(1.0, Some(1.0));
        let mut s = SgdState::new(SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        s.step(&mut p).unwrap();
        let after_first = p.flat()[0];
        p.get_mut("p").unwrap().set_grad(vec![0.0]).unwrap();
        s.step(&mut p).unwrap();
        assert!((s.velocity()[0][0] - 0.9).abs() < 1e-12);
        assert!((after_first - p.flat()[0] - 0.1 * 0.9).abs() < 1e-12);
        // With zero grad and no velocity the parameter does not move.
        let mut q = one(2.0, Some(0.0));
        let mut s = SgdState::new(SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        s.step(&mut q).unwrap();
        assert_eq!(q.flat(), vec![2.0]);
    }

    #[test]
    fn two_momentum_steps_unroll() {
        let (lr, g) = (0.01, 0.3);
        let mut p = one(0.0, Some(g));
        let mut s = SgdState::new(SgdConfig {
            lr,
            momentum: 0.9,
            weight_decay: 0.0,
        });
        s.step(&mut p).unwrap();
        p.get_mut("p").unwrap().set_grad(vec![g]).unwrap();
        s.step(&mut p).unwrap();
        let displacement = -p.flat()[0];
        assert!((displacement - lr * (g + 1.9 * g)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut p = one(1.0, None);
        let mut s = SgdState::new(SgdConfig::FULL_SCALE);
        assert!(matches!(s.step(&mut p), Err(Error::MissingGrad(n)) if n == "p"));
    }
}
