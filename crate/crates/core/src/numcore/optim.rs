use crate::error::{Error, Result};
use crate::numcore::params::ParamStore;
use crate::numcore::tensor::Tensor;

/// Adam with L2-style weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::shape("adam", format!("{} grads for {} params", grads.len(), params.len())));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                let gi = g.data()[i] + self.weight_decay * *w;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `threshold`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], threshold: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > threshold && norm > 0.0 {
        let s = threshold / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Learning-rate schedule shapes.
#[derive(Clone, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Constant until `start`, then geometric decay reaching `final_lr` at
    /// `end`, constant afterwards.
    Exponential {
        initial: f64,
        final_lr: f64,
        start: usize,
        end: usize,
    },
    /// Multiplied by `factor` at every milestone passed.
    Step {
        initial: f64,
        factor: f64,
        milestones: Vec<usize>,
    },
}

impl LrSchedule {
    pub fn at(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::Exponential {
                initial,
                final_lr,
                start,
                end,
            } => {
                if step <= *start || *initial == 0.0 {
                    *initial
                } else if step >= *end {
                    *final_lr
                } else {
                    let frac = (step - start) as f64 / (end - start) as f64;
                    initial * (final_lr / initial).powf(frac)
                }
            }
            LrSchedule::Step {
                initial,
                factor,
                milestones,
            } => {
                let passed = milestones.iter().filter(|&&m| step >= m).count();
                initial * factor.powi(passed as i32)
            }
        }
    }
}
