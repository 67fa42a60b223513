use super::param::ParamSet;

/// Linear warmup to `peak_lr`, then inverse square-root decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak_lr: f64,
    pub warmup_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64) -> Self {
        assert!(peak_lr > 0.0, "peak_lr must be positive");
        assert!(warmup_steps >= 1, "warmup_steps must be >= 1");
        LrSchedule {
            peak_lr,
            warmup_steps,
        }
    }

    /// Learning rate at 1-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.max(1) as f64;
        let warmup = self.warmup_steps as f64;
        if step <= warmup {
            self.peak_lr * step / warmup
        } else {
            self.peak_lr * (warmup / step).sqrt()
        }
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::new(0.005, 400)
    }
}

/// Adam with bias correction. Moments live on each [`super::Parameter`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
        }
    }
}

impl Adam {
    /// One update from the gradients stored in each parameter's `grad`.
    pub fn step(&self, params: &mut ParamSet, lr: f64) {
        params.step += 1;
        let t = params.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in params.iter_mut() {
            let value = p.value.data_mut();
            let (g, m, v) = (p.grad.data(), p.m.data_mut(), p.v.data_mut());
            for i in 0..value.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
