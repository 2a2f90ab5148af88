//! SGD with classical momentum: `v ← μ·v + g`, `w ← w − η·v`.

use crate::error::{Error, Result};
use crate::net::{EmbeddingNet, GradSet};

#[derive(Clone, Debug)]
pub struct Sgd {
    lr: f64,
    momentum: f64,
    velocity: Option<GradSet>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Spec(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Spec(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        Ok(Sgd {
            lr,
            momentum,
            velocity: None,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    /// Applies one update. The net is left untouched if any gradient is non-finite.
    pub fn step(&mut self, net: &mut EmbeddingNet, grads: &GradSet) -> Result<()> {
        if !grads.matches_shape_of(net) {
            return Err(Error::shape(
                "sgd gradients",
                "gradient shapes equal to parameter shapes",
                "mismatched GradSet",
            ));
        }
        if let Some(layer) = grads
            .layers
            .iter()
            .position(|g| !g.weight.is_finite() || g.bias.iter().any(|b| !b.is_finite()))
        {
            return Err(Error::Training {
                step: None,
                layer: Some(layer),
                message: "non-finite gradient".into(),
            });
        }

        let velocity = self.velocity.get_or_insert_with(|| GradSet::zeros_like(net));
        for ((layer, v), g) in net
            .layers_mut()
            .iter_mut()
            .zip(velocity.layers.iter_mut())
            .zip(&grads.layers)
        {
            let params = layer.weight.as_mut_slice().iter_mut().chain(layer.bias.iter_mut());
            let vel = v.weight.as_mut_slice().iter_mut().chain(v.bias.iter_mut());
            let grad = g.weight.as_slice().iter().chain(&g.bias);
            for ((w, v), g) in params.zip(vel).zip(grad) {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
        Ok(())
    }
}
