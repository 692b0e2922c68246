//! Layer building blocks shared by the re-identification backbone and the
//! translation networks.

use agm_autograd::{BatchNormStats, Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

/// Forward-pass state: the tape, read access to parameters, and the batch
/// statistics that training-mode normalization layers want folded into their
/// running estimates once the step is committed.
pub struct Ctx<'a> {
    pub graph: Graph,
    pub store: &'a ParamStore,
    training: bool,
    frozen: bool,
    bn_updates: Vec<BnUpdate>,
}

#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BatchNormStats,
    count: usize,
}

impl<'a> Ctx<'a> {
    pub fn train(store: &'a ParamStore) -> Self {
        Self::with_mode(store, true)
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self::with_mode(store, false)
    }

    fn with_mode(store: &'a ParamStore, training: bool) -> Self {
        Ctx {
            graph: Graph::new(),
            store,
            training,
            frozen: false,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// While frozen, parameters enter the tape as constants and normalization
    /// layers use their running statistics.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if self.training && !self.frozen {
            self.graph.param(self.store, id)
        } else {
            self.graph.frozen_param(self.store, id)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.graph.value(v)
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        std::mem::take(&mut self.bn_updates)
    }
}

/// Folds batch statistics into running estimates with an exponential moving
/// average; the running variance uses the unbiased batch estimate.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate], momentum: f64) {
    for u in updates {
        let n = u.count as f64;
        let correction = if u.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, b) in store.get_mut(u.mean).data_mut().iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.stats.var) {
            *r = (1.0 - momentum) * *r + momentum * b * correction;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// He-normal for ReLU fan-in.
    Kaiming,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = match init {
            Init::Kaiming => Tensor::from_fn(&[c_out, c_in, kernel, kernel], |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            }),
            Init::Zero => Tensor::zeros(&[c_out, c_in, kernel, kernel]),
        };
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Conv {
            weight,
            bias,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.graph.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&[channels], 1.0)),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        if cx.training && !cx.frozen {
            let (n, _, h, w) = cx.value(x).dims4();
            let (y, stats) = cx.graph.batch_norm(x, gamma, beta, None, self.eps);
            cx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                stats,
                count: n * h * w,
            });
            y
        } else {
            let stats = BatchNormStats {
                mean: cx.store.get(self.running_mean).data().to_vec(),
                var: cx.store.get(self.running_var).data().to_vec(),
                eps: self.eps,
            };
            cx.graph.batch_norm(x, gamma, beta, Some(stats), self.eps).0
        }
    }
}

/// Dense map without bias: `x · Wᵀ` with `W` of shape `out × in`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let std = 0.001;
        let w = Tensor::from_fn(&[out_dim, in_dim], |_| std * rng.sample::<f64, _>(StandardNormal));
        Linear {
            weight: store.add(format!("{name}.weight"), w),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Var {
        let w = cx.param(self.weight);
        cx.graph.matmul_nt(x, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn running_stats_follow_the_moving_average() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 1);
        let x = Tensor::new(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]);
        let updates = {
            let mut cx = Ctx::train(&store);
            let xv = cx.graph.constant(x);
            bn.forward(&mut cx, xv);
            cx.take_bn_updates()
        };
        apply_bn_updates(&mut store, &updates, 0.1);
        // batch mean 4, biased var 5, unbiased 20/3
        assert!((store.get(bn.running_mean).item() - 0.4).abs() < 1e-12);
        let expected = 0.9 + 0.1 * 20.0 / 3.0;
        assert!((store.get(bn.running_var).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn frozen_context_takes_no_parameter_gradients() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv::new(&mut store, "c", 1, 2, 3, 1, true, Init::Kaiming, &mut rng);
        let mut cx = Ctx::train(&store);
        cx.set_frozen(true);
        let x = cx.graph.input_with_grad(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = conv.forward(&mut cx, x);
        let s = cx.graph.sum(y);
        let grads = cx.graph.backward(s);
        assert_eq!(grads.params().count(), 0);
        assert!(grads.wrt(x).is_some());
    }
}
