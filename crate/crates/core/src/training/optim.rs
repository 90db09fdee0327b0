//! Adam over named parameter groups, each with a fixed learning rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First and second moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        AdamMoments {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Adam with bias correction and a shared step counter across groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Completed optimization steps; bias correction uses this.
    pub t: u64,
    pub groups: Vec<AdamMoments>,
}

impl Adam {
    pub fn new(group_sizes: &[usize]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
            t: 0,
            groups: group_sizes.iter().map(|&n| AdamMoments::zeros(n)).collect(),
        }
    }

    /// Starts one optimization step; every group update that follows shares
    /// the same bias-correction counter.
    pub fn advance(&mut self) {
        self.t += 1;
    }

    /// Applies one group's update in place. A non-finite gradient anywhere
    /// in the group skips it entirely (parameters and moments untouched) and
    /// returns `false` so the caller can report it.
    pub fn update_group(
        &mut self,
        group: usize,
        params: &mut [f64],
        grads: &[f64],
        lr: f64,
    ) -> Result<bool> {
        let moments = self
            .groups
            .get_mut(group)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {group}")))?;
        if params.len() != grads.len() || params.len() != moments.m.len() {
            return Err(Error::InvalidParameter(format!(
                "group {group}: {} parameters, {} gradients, {} moments",
                params.len(),
                grads.len(),
                moments.m.len()
            )));
        }
        if self.t == 0 {
            return Err(Error::InvalidParameter(
                "optimizer step counter not advanced before update".into(),
            ));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Ok(false);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            moments.m[i] = self.beta1 * moments.m[i] + (1.0 - self.beta1) * g;
            moments.v[i] = self.beta2 * moments.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = moments.m[i] / bc1;
            let v_hat = moments.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(true)
    }
}

/// Rescales every quaternion to unit norm, in place over a flat `wxyz` row
/// layout. Called after each optimizer step.
pub fn renormalize_quaternions(rotations: &mut [f64]) {
    for q in rotations.chunks_exact_mut(4) {
        let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
        if n > 0.0 {
            for v in q {
                *v /= n;
            }
        }
    }
}
