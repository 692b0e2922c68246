use crate::{GradStore, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient:
/// `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    /// Updates every trainable parameter that has a gradient and passes
    /// `filter`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradStore,
        lr: f64,
        filter: impl Fn(ParamId) -> bool,
    ) {
        if self.velocity.len() < store.len() {
            self.velocity.resize_with(store.len(), || None);
        }
        let SgdConfig {
            momentum,
            weight_decay,
        } = self.config;
        for (id, g) in grads.params() {
            if !store.is_trainable(id) || !filter(id) {
                continue;
            }
            let theta = store.get_mut(id);
            let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, gi), ti) in v.data_mut().iter_mut().zip(g.data()).zip(theta.data_mut()) {
                *vi = momentum * *vi + gi + weight_decay * *ti;
                *ti -= lr * *vi;
            }
        }
    }

    /// Momentum buffer of a parameter, if it has been updated at least once.
    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(id.0).and_then(|v| v.as_ref())
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Tensor) {
        if self.velocity.len() <= id.0 {
            self.velocity.resize_with(id.0 + 1, || None);
        }
        self.velocity[id.0] = Some(v);
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; step counts are tracked per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    state: Vec<Option<(Tensor, Tensor, u64)>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: Vec::new(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradStore,
        lr: f64,
        filter: impl Fn(ParamId) -> bool,
    ) {
        if self.state.len() < store.len() {
            self.state.resize_with(store.len(), || None);
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        for (id, g) in grads.params() {
            if !store.is_trainable(id) || !filter(id) {
                continue;
            }
            let (m, v, t) = self.state[id.0]
                .get_or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape()), 0));
            *t += 1;
            let c1 = 1.0 - beta1.powi(*t as i32);
            let c2 = 1.0 - beta2.powi(*t as i32);
            let theta = store.get_mut(id);
            for (((mi, vi), gi), ti) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
                .zip(theta.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *ti -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}
