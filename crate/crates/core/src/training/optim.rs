//! Step learning-rate schedule and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `base_lr * gamma^floor(epoch / step)`.
pub fn step_lr(epoch: usize, base_lr: f64, step: usize, gamma: f64) -> f64 {
    base_lr * gamma.powi((epoch / step.max(1)) as i32)
}

/// Adam over a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(shapes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            steps: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn state(&self) -> (&[Vec<f32>], &[Vec<f32>]) {
        (&self.m, &self.v)
    }

    pub fn from_state(steps: u64, m: Vec<Vec<f32>>, v: Vec<Vec<f32>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Checkpoint("optimizer moments have mismatched shapes".into()));
        }
        Ok(Adam {
            steps,
            m,
            v,
            ..Adam::new(&[])
        })
    }

    pub fn shapes(&self) -> Vec<usize> {
        self.m.iter().map(Vec::len).collect()
    }

    /// One bias-corrected update; `params` and `grads` follow the construction order.
    pub fn step(&mut self, lr: f64, params: Vec<&mut [f32]>, grads: Vec<&[f32]>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Model(format!(
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        let t = self.steps as i32;
        let b1 = self.beta1 as f32;
        let b2 = self.beta2 as f32;
        let c1 = (1.0 - self.beta1.powi(t)) as f32;
        let c2 = (1.0 - self.beta2.powi(t)) as f32;
        let lr = lr as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(Error::Model("parameter tensor changed size".into()));
            }
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_schedule() {
        assert_eq!(step_lr(0, 0.001, 40, 0.1), 0.001);
        assert_eq!(step_lr(39, 0.001, 40, 0.1), 0.001);
        assert!((step_lr(40, 0.001, 40, 0.1) - 1e-4).abs() < 1e-18);
        assert!((step_lr(80, 0.001, 40, 0.1) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut opt = Adam::new(&[2]);
        let mut p = [1.0f32, -1.0];
        opt.step(0.1, vec![&mut p], vec![&[3.0, -0.5]]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut opt = Adam::new(&[1]);
        let mut x = [5.0f32];
        for _ in 0..2000 {
            let g = [2.0 * (x[0] - 1.5)];
            opt.step(0.05, vec![&mut x], vec![&g]).unwrap();
        }
        assert!((x[0] - 1.5).abs() < 1e-2);
    }
}
