use crate::error::{Error, Result};

/// Bias-corrected Adam over a fixed, ordered list of parameter buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update. `params[i]` and `grads[i]` must keep the same lengths
    /// across calls.
    pub fn step(&mut self, params: &mut [&mut [f32]], grads: &[&[f32]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "adam: {} parameter buffers, {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape("adam: parameter list changed between steps"));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[i].len() {
                return Err(Error::shape(format!(
                    "adam: buffer {i} has {} values, gradient {}, state {}",
                    p.len(),
                    g.len(),
                    self.m[i].len()
                )));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for j in 0..p.len() {
                let gj = g[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut adam = Adam::new(1e-3);
        let mut p = vec![0.5f32, -0.25];
        adam.step(&mut [&mut p], &[&[1.0, -1.0]]).unwrap();
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-7);
        assert!((p[1] - (-0.25 + 1e-3)).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::new(1e-2);
        let mut p = vec![1.0f32, 2.0];
        for _ in 0..3 {
            adam.step(&mut [&mut p], &[&[0.0, 0.0]]).unwrap();
        }
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn identical_runs_are_identical() {
        let run = || {
            let mut adam = Adam::new(1e-2);
            let mut p = vec![0.3f32, -0.7, 1.1];
            for k in 0..10 {
                let g: Vec<f32> = p.iter().map(|x| 2.0 * x + k as f32 * 0.01).collect();
                adam.step(&mut [&mut p], &[&g]).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut adam = Adam::new(1e-3);
        let mut p = vec![0.0f32; 2];
        assert!(adam.step(&mut [&mut p], &[&[1.0]]).is_err());
    }
}
