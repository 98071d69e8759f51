//! Attention network: a small FCN-style encoder/decoder with a fully
//! connected bottleneck and a learned spatial prior.
//!
//! ```text
//! image ─ E × [conv3x3+BN+ReLU ─ maxpool 2/2] ─ FC+ReLU ─ FC+ReLU ─ reshape G×G
//!       ─ modulate(spatial prior) ─ E × [deconv 2x2/2+BN+ReLU (⊕ encoder skip)]
//!       ─ conv3x3 ─ ReLU ─ A
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Conv, Ctx, Deconv, Linear, Mode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::modulation::{spatial_prior_forward, AttentionMap, SpatialPrior};
use crate::params::{ParamId, ParamStore, Precision};
use crate::tensor::Tensor;

pub const PRIOR_STRIDE: usize = 4;
/// Head bias at initialization, so attention starts near one everywhere.
pub const HEAD_BIAS_INIT: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VaConfig {
    /// Encoder widths, one per downsampling stage.
    pub channels: Vec<usize>,
    /// Width of both fully connected layers; must be a multiple of `grid²`.
    pub fc_width: usize,
    /// Bottleneck side length (and spatial-prior size).
    pub grid: usize,
}

impl Default for VaConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64],
            fc_width: 512,
            grid: 8,
        }
    }
}

impl VaConfig {
    /// Bottleneck grid reached from a `side`-pixel input.
    pub fn grid_for(&self, side: usize) -> usize {
        self.channels.iter().fold(side, |s, _| s / 2)
    }

    /// Inclusive range of input sides that reach the configured grid.
    pub fn valid_sides(&self) -> (usize, usize) {
        let f = 1usize << self.channels.len();
        (self.grid * f, (self.grid + 1) * f - 1)
    }

    fn grid_channels(&self) -> usize {
        self.fc_width / (self.grid * self.grid)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    conv: Conv,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
struct UpStage {
    deconv: Deconv,
    bn: BatchNorm,
}

#[derive(Clone, Debug)]
pub struct VaNet {
    pub store: ParamStore,
    config: VaConfig,
    encoder: Vec<Stage>,
    fc1: Linear,
    fc2: Linear,
    prior: ParamId,
    decoder: Vec<UpStage>,
    head: Conv,
}

impl VaNet {
    pub fn new(config: VaConfig, precision: Precision, seed: u64) -> Result<Self> {
        let g2 = config.grid * config.grid;
        if config.channels.is_empty() || config.channels.contains(&0) || config.grid == 0 {
            return Err(Error::Config(format!("attention net needs non-empty positive widths and grid, got {config:?}")));
        }
        if config.fc_width == 0 || !config.fc_width.is_multiple_of(g2) {
            return Err(Error::Config(format!(
                "fc width {} must be a positive multiple of grid² = {g2}",
                config.fc_width
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(precision);
        let chans = &config.channels;
        let mut encoder = Vec::new();
        let mut cin = 3;
        for (i, &c) in chans.iter().enumerate() {
            encoder.push(Stage {
                conv: Conv::new(&mut store, &format!("va.enc{i}.conv"), 3, cin, c, 1, &mut rng),
                bn: BatchNorm::new(&mut store, &format!("va.enc{i}.bn"), c),
            });
            cin = c;
        }
        let flat = g2 * cin;
        let fc1 = Linear::new(&mut store, "va.fc1", flat, config.fc_width, &mut rng);
        let fc2 = Linear::new(&mut store, "va.fc2", config.fc_width, config.fc_width, &mut rng);
        let prior = store.add("va.prior.kernel", SpatialPrior::gaussian(config.grid).kernel, true);
        // Decoder stage i restores the resolution of encoder stage i's input.
        let mut decoder = Vec::new();
        let mut din = config.grid_channels();
        for i in (0..chans.len()).rev() {
            let out = if i > 0 { chans[i - 1] } else { (chans[0] / 2).max(1) };
            decoder.push(UpStage {
                deconv: Deconv::new(&mut store, &format!("va.dec{i}.deconv"), 2, din, out, 2, &mut rng),
                bn: BatchNorm::new(&mut store, &format!("va.dec{i}.bn"), out),
            });
            din = if i > 0 { out + chans[i - 1] } else { out };
        }
        decoder.reverse();
        let head = Conv::new(&mut store, "va.head", 3, din, 1, 1, &mut rng);
        store.set(head.bias, Tensor::full(&[1], HEAD_BIAS_INIT))?;
        Ok(Self {
            store,
            config,
            encoder,
            fc1,
            fc2,
            prior,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &VaConfig {
        &self.config
    }

    pub fn prior_id(&self) -> ParamId {
        self.prior
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head.weight, self.head.bias)
    }

    pub fn spatial_prior(&self) -> SpatialPrior {
        SpatialPrior::new(self.store.get(self.prior).clone()).expect("prior kernel shape")
    }

    pub fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let g = self.config.grid;
        if self.config.grid_for(h) != g || self.config.grid_for(w) != g {
            let (lo, hi) = self.config.valid_sides();
            return Err(Error::ImageSize {
                height: h,
                width: w,
                detail: format!("attention net with a {g}x{g} bottleneck accepts sides {lo}..={hi}"),
            });
        }
        Ok(())
    }

    /// Adds the network to `ctx.graph`; returns the attention map with the
    /// input's spatial shape and no channel axis.
    pub fn build(&self, ctx: &mut Ctx, image: Var, use_prior: bool) -> Result<Var> {
        let shape = ctx.graph.value(image).shape().to_vec();
        let (n, h, w, c) = ctx.graph.value(image).nhwc("va_forward")?;
        if c != 3 {
            return Err(Error::shape("va_forward", format!("expected 3 color channels, got {c}")));
        }
        self.check_size(h, w)?;
        let batched = shape.len() == 4;

        let mut sizes = Vec::new();
        let mut skips = Vec::new();
        // the bottleneck reshape is batched, so work batched throughout
        let mut x = if batched { image } else { ctx.graph.reshape(image, &[1, h, w, c])? };
        for stage in &self.encoder {
            let (_, sh, sw, _) = ctx.graph.value(x).nhwc("va_forward")?;
            sizes.push((sh, sw));
            let y = stage.conv.forward(ctx, x)?;
            let y = stage.bn.forward(ctx, y)?;
            let y = ctx.graph.relu(y);
            x = ctx.graph.maxpool2d(y, 2, 2)?;
            skips.push(x);
        }
        let g = self.config.grid;
        let flat = ctx.graph.value(x).len() / n;
        let f = ctx.graph.reshape(x, &[n, flat])?;
        let f = self.fc1.forward(ctx, f)?;
        let f = ctx.graph.relu(f);
        let f = self.fc2.forward(ctx, f)?;
        let f = ctx.graph.relu(f);
        let mut d = ctx.graph.reshape(f, &[n, g, g, self.config.grid_channels()])?;
        if use_prior {
            let kernel = ctx.var(self.prior);
            let prior = spatial_prior_forward(ctx.graph, kernel, PRIOR_STRIDE, (g, g))?;
            d = ctx.graph.modulate(d, prior)?;
        }
        for i in (0..self.decoder.len()).rev() {
            let up = &self.decoder[i];
            d = up.deconv.forward_to(ctx, d, sizes[i])?;
            d = up.bn.forward(ctx, d)?;
            d = ctx.graph.relu(d);
            if i > 0 {
                d = ctx.graph.concat_channels(d, skips[i - 1])?;
            }
        }
        let a = self.head.forward(ctx, d)?;
        let a = ctx.graph.relu(a);
        let out_shape: Vec<usize> = if batched { vec![n, h, w] } else { vec![h, w] };
        ctx.graph.reshape(a, &out_shape)
    }

    /// Evaluation-mode inference on one `[H, W, 3]` image.
    pub fn forward(&self, image: &Tensor, use_prior: bool) -> Result<AttentionMap> {
        let mut g = Graph::new();
        let bind = self.store.bind(&mut g, false);
        let x = g.constant(image.clone());
        let mut ctx = Ctx::new(&mut g, &self.store, &bind, Mode::Eval);
        let a = self.build(&mut ctx, x, use_prior)?;
        AttentionMap::new(g.value(a).clone())
    }
}
