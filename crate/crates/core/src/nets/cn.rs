//! Pixel-wise color-naming network.
//!
//! ```text
//! image ─ conv1x1(W)+BN+ReLU ─ maxpool 3/2 ─ deconv 3x3/2 (W)+BN+ReLU ─┐
//!   └──── conv1x1(W)+BN+ReLU (skip) ───────────────────────────────────┴ concat(2W) ─ conv1x1(C) ─ softmax
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm, Conv, Ctx, Deconv, Mode};
use super::ColorNameMap;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamStore, Precision};
use crate::tensor::Tensor;

pub const DEFAULT_WIDTH: usize = 72;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CnConfig {
    pub classes: usize,
    /// Filters in each hidden layer; 72 in the reference design.
    pub width: usize,
}

impl CnConfig {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            width: DEFAULT_WIDTH,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CnNet {
    pub store: ParamStore,
    config: CnConfig,
    conv1: Conv,
    bn1: BatchNorm,
    up: Deconv,
    bn2: BatchNorm,
    skip: Conv,
    bn3: BatchNorm,
    classifier: Conv,
}

impl CnNet {
    pub fn new(config: CnConfig, precision: Precision, seed: u64) -> Result<Self> {
        if config.classes < 2 || config.width == 0 {
            return Err(Error::Config(format!("color-naming net needs >= 2 classes and a positive width, got {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new(precision);
        let w = config.width;
        let conv1 = Conv::new(&mut store, "cn.conv1", 1, 3, w, 0, &mut rng);
        let bn1 = BatchNorm::new(&mut store, "cn.bn1", w);
        let up = Deconv::new(&mut store, "cn.up", 3, w, w, 2, &mut rng);
        let bn2 = BatchNorm::new(&mut store, "cn.bn2", w);
        let skip = Conv::new(&mut store, "cn.skip", 1, 3, w, 0, &mut rng);
        let bn3 = BatchNorm::new(&mut store, "cn.bn3", w);
        let classifier = Conv::new(&mut store, "cn.classifier", 1, 2 * w, config.classes, 0, &mut rng);
        Ok(Self {
            store,
            config,
            conv1,
            bn1,
            up,
            bn2,
            skip,
            bn3,
            classifier,
        })
    }

    pub fn config(&self) -> &CnConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Any side of at least 3 pixels survives the 3/2 pool and returns to
    /// its original size through the 3x3/2 deconvolution (with one row of
    /// output padding for even sides).
    pub fn check_size(h: usize, w: usize) -> Result<()> {
        if h < 3 || w < 3 {
            return Err(Error::ImageSize {
                height: h,
                width: w,
                detail: "color-naming net accepts any height and width >= 3".into(),
            });
        }
        Ok(())
    }

    /// Adds the network to `ctx.graph`; returns the `[.., H, W, C]` softmax map.
    pub fn build(&self, ctx: &mut Ctx, image: Var) -> Result<Var> {
        let (_, h, w, c) = ctx.graph.value(image).nhwc("cn_forward")?;
        if c != 3 {
            return Err(Error::shape("cn_forward", format!("expected 3 color channels, got {c}")));
        }
        Self::check_size(h, w)?;
        let a = self.conv1.forward(ctx, image)?;
        let a = self.bn1.forward(ctx, a)?;
        let a = ctx.graph.relu(a);
        let p = ctx.graph.maxpool2d(a, 3, 2)?;
        let d = self.up.forward_to(ctx, p, (h, w))?;
        let d = self.bn2.forward(ctx, d)?;
        let d = ctx.graph.relu(d);
        let s = self.skip.forward(ctx, image)?;
        let s = self.bn3.forward(ctx, s)?;
        let s = ctx.graph.relu(s);
        let joined = ctx.graph.concat_channels(d, s)?;
        let logits = self.classifier.forward(ctx, joined)?;
        ctx.graph.softmax(logits)
    }

    /// Evaluation-mode inference on one `[H, W, 3]` image.
    pub fn forward(&self, image: &Tensor) -> Result<ColorNameMap> {
        let mut g = Graph::new();
        let bind = self.store.bind(&mut g, false);
        let x = g.constant(image.clone());
        let mut ctx = Ctx::new(&mut g, &self.store, &bind, Mode::Eval);
        let y = self.build(&mut ctx, x)?;
        ColorNameMap::new(g.value(y).clone())
    }
}
