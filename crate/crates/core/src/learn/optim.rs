//! RMSProp and ADAM on flat parameter vectors.

use crate::domain::OptimizerKind;
use crate::error::{Error, Result};

pub const RMSPROP_DECAY: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Result<Self> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::InvalidParams(format!("learning rate {lr} must be >= 0")));
        }
        Ok(Self {
            kind,
            lr,
            first: vec![0.0; n_params],
            second: vec![0.0; n_params],
            t: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.second.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer holds {} accumulators, got {} params / {} grads",
                self.second.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        match self.kind {
            OptimizerKind::RmsProp => {
                for ((p, &g), v) in params.iter_mut().zip(grads).zip(&mut self.second) {
                    *v = RMSPROP_DECAY * *v + (1.0 - RMSPROP_DECAY) * g * g;
                    *p -= self.lr * g / (v.sqrt() + EPS);
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // loss = 0.5 * (p - 3)^2, grad = p - 3, p0 = 0, lr = 0.1; trajectories worked out by hand
    fn run(kind: OptimizerKind) -> Vec<f64> {
        let mut o = OptimizerState::new(kind, 0.1, 1).unwrap();
        let mut p = [0.0];
        (0..3)
            .map(|_| {
                let g = p[0] - 3.0;
                o.step(&mut p, &[g]).unwrap();
                p[0]
            })
            .collect()
    }

    #[test]
    fn rmsprop_three_steps() {
        let want = [0.31622776268350467, 0.5331792166690681, 0.7082342052627741];
        for (got, want) in run(OptimizerKind::RmsProp).iter().zip(want) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn adam_three_steps() {
        let want = [0.09999999966666677, 0.1998972922494483, 0.2996184760421759];
        for (got, want) in run(OptimizerKind::Adam).iter().zip(want) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        for kind in [OptimizerKind::RmsProp, OptimizerKind::Adam] {
            let mut o = OptimizerState::new(kind, 0.0, 3).unwrap();
            let mut p = [1.0, -2.0, 0.5];
            for _ in 0..5 {
                o.step(&mut p, &[0.3, -1.0, 7.0]).unwrap();
            }
            assert_eq!(p, [1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(OptimizerState::new(OptimizerKind::Adam, -1.0, 1).is_err());
        let mut o = OptimizerState::new(OptimizerKind::Adam, 0.1, 2).unwrap();
        assert!(o.step(&mut [0.0], &[0.0]).is_err());
    }
}
