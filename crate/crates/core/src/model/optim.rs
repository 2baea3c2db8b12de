use super::{ModelError, ModelParams};

/// Momentum SGD: `v ← μ·v + g`, `θ ← θ − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<ModelParams>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: None,
        }
    }

    /// Applies one update. A gradient with any non-finite entry is rejected
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<(), ModelError> {
        for (name, block) in grads.blocks() {
            if block.weight.iter().chain(&block.bias).any(|g| !g.is_finite()) {
                return Err(ModelError::NonFiniteGradient(name));
            }
        }
        let velocity = self.velocity.get_or_insert_with(|| grads.zeros_like());
        let (lr, mu) = (self.lr, self.momentum);
        for ((_, p), ((_, v), (_, g))) in params
            .blocks_mut()
            .into_iter()
            .zip(velocity.blocks_mut().into_iter().zip(grads.blocks()))
        {
            let pairs = p
                .weight
                .iter_mut()
                .zip(v.weight.iter_mut().zip(&g.weight))
                .chain(p.bias.iter_mut().zip(v.bias.iter_mut().zip(&g.bias)));
            for (theta, (vel, grad)) in pairs {
                *vel = mu * *vel + grad;
                *theta -= lr * *vel;
            }
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.velocity = None;
    }
}
