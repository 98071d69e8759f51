use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{BatchStats, Graph, Var};
use crate::params::{xavier, Bindings, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_DECAY: f64 = 0.9;

/// Whether batch norm uses batch statistics (and records them) or running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running-statistic update produced by a training-mode forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    mean: ParamId,
    var: ParamId,
    stats: BatchStats,
}

/// Folds batch statistics into running statistics with decay 0.9.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) -> Result<()> {
    for u in updates {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            let running = store.get(id);
            let next: Vec<f64> = running
                .data()
                .iter()
                .zip(batch)
                .map(|(r, b)| BN_DECAY * r + (1.0 - BN_DECAY) * b)
                .collect();
            let shape = running.shape().to_vec();
            store.set(id, Tensor::new(&shape, next)?)?;
        }
    }
    Ok(())
}

/// Everything a network needs while adding its layers to a graph.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    pub store: &'a ParamStore,
    pub bind: &'a Bindings,
    pub mode: Mode,
    pub updates: Vec<BnUpdate>,
}

impl<'a> Ctx<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, bind: &'a Bindings, mode: Mode) -> Self {
        Self {
            graph,
            store,
            bind,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.bind.var(id)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = xavier(&[k, k, cin, cout], k * k * cin, k * k * cout, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true),
            stride: 1,
            padding,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        ctx.graph.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct Deconv {
    pub weight: ParamId,
    pub stride: usize,
}

impl Deconv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        k: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = xavier(&[k, k, cout, cin], k * k * cin, k * k * cout, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w, true),
            stride,
        }
    }

    /// Upsamples to exactly `target` (height, width).
    pub fn forward_to(&self, ctx: &mut Ctx, x: Var, target: (usize, usize)) -> Result<Var> {
        let v = ctx.graph.value(x);
        let (_, h, w, _) = v.nhwc("deconv2d")?;
        let k = ctx.store.get(self.weight).shape()[0];
        let natural = ((h - 1) * self.stride + k, (w - 1) * self.stride + k);
        let pad = (
            target.0.checked_sub(natural.0).unwrap_or(usize::MAX),
            target.1.checked_sub(natural.1).unwrap_or(usize::MAX),
        );
        let wv = ctx.var(self.weight);
        ctx.graph.deconv2d_padded(x, wv, self.stride, pad)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c]), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[c]), false),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (ctx.var(self.gamma), ctx.var(self.beta));
        match ctx.mode {
            Mode::Train => {
                let (out, stats) = ctx.graph.batchnorm_train(x, g, b)?;
                ctx.updates.push(BnUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                });
                Ok(out)
            }
            Mode::Eval => {
                let mean = ctx.store.get(self.running_mean).data();
                let var = ctx.store.get(self.running_var).data();
                ctx.graph.batchnorm_eval(x, g, b, mean, var)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = xavier(&[n_in, n_out], n_in, n_out, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w, true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[n_out]), true),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.var(self.weight), ctx.var(self.bias));
        ctx.graph.fully_connected(x, w, b)
    }
}
