use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for an ordered list of parameter blocks.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, block_sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over every block. Gradients are
    /// validated before anything is touched, so a non-finite component leaves
    /// both parameters and moments as they were.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape {
                context: "AdamState::step blocks",
                expected: self.m.len(),
                got: params.len().min(grads.len()),
            });
        }
        for (b, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[b].len() || g.len() != self.m[b].len() {
                return Err(Error::Shape {
                    context: "AdamState::step block length",
                    expected: self.m[b].len(),
                    got: p.len().min(g.len()),
                });
            }
            if let Some((index, &value)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    block: b.to_string(),
                    index,
                    value,
                });
            }
        }

        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (b, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[b], &mut self.v[b]);
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
