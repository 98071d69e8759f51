//! The two branches, their composition, and the saliency-masked
//! pretraining loss.

pub mod cn;
pub mod layers;
pub mod va;

use std::fmt;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::modulation::{aggregate_scores, AttentionMap, ImageScore};
use crate::tensor::Tensor;

pub use cn::{CnConfig, CnNet};
pub use layers::Mode;
pub use va::{VaConfig, VaNet};

/// Ordered, duplicate-free list of color names. The index order is the
/// class order of every network output.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ColorVocabulary {
    names: Vec<String>,
}

impl ColorVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(Error::Vocabulary(format!("need at least 2 color names, got {}", names.len())));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains(|c: char| c.is_whitespace() || c == ',') {
                return Err(Error::Vocabulary(format!("invalid color name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::Vocabulary(format!("duplicate color name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl fmt::Display for ColorVocabulary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names.join(","))
    }
}

/// Per-pixel distribution over color names, `[H, W, C]`.
///
/// Only the color-naming branch produces this type, which is what the
/// pixel-wise metric accepts.
#[derive(Clone, Debug, PartialEq)]
pub struct ColorNameMap(Tensor);

impl ColorNameMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 3 {
            return Err(Error::shape("color name map", format!("expected [H,W,C], got {:?}", values.shape())));
        }
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn classes(&self) -> usize {
        self.0.shape()[2]
    }

    /// Per-pixel argmax, ties to the lowest index.
    pub fn argmax(&self) -> Vec<usize> {
        self.0
            .data()
            .chunks(self.classes())
            .map(crate::modulation::argmax)
            .collect()
    }
}

/// Binary `[H, W]` mask of salient pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMask(Tensor);

impl SaliencyMask {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape("saliency mask", format!("expected [H,W], got {:?}", values.shape())));
        }
        if values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("saliency mask", "values must be 0 or 1"));
        }
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }
}

/// `-Σ m·ln Y(label) / max(1, Σ m)` for a single map.
pub fn masked_nll_loss(y: &ColorNameMap, mask: &SaliencyMask, label: usize) -> Result<f64> {
    let mut g = Graph::new();
    let yv = g.constant(y.tensor().clone());
    let loss = g.masked_nll(yv, mask.tensor(), &[label])?;
    Ok(g.value(loss).item())
}

/// Which parts of the two-branch model take part in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Branches {
    /// When false the attention map is the constant 1.
    pub attention: bool,
    /// When false the spatial prior is the constant 1.
    pub prior: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            attention: true,
            prior: true,
        }
    }
}

/// `ŷ = aggregate(modulate(Y, A))`, or `aggregate(Y)` without attention.
pub fn image_scores(graph: &mut Graph, y: Var, attention: Option<Var>) -> Result<Var> {
    let y_hat = match attention {
        Some(a) => graph.modulate(y, a)?,
        None => y,
    };
    aggregate_scores(graph, y_hat)
}

/// Evaluation-mode forward pass of the full model on one image.
pub fn full_forward(
    cn: &CnNet,
    va: &VaNet,
    image: &Tensor,
    branches: Branches,
) -> Result<(ColorNameMap, AttentionMap, ImageScore)> {
    let (h, w) = match *image.shape() {
        [h, w, 3] => (h, w),
        _ => return Err(Error::shape("full_forward", format!("expected [H,W,3], got {:?}", image.shape()))),
    };
    let mut g = Graph::new();
    let cn_bind = cn.store.bind(&mut g, false);
    let va_bind = va.store.bind(&mut g, false);
    let x = g.constant(image.clone());
    let y = {
        let mut ctx = layers::Ctx::new(&mut g, &cn.store, &cn_bind, Mode::Eval);
        cn.build(&mut ctx, x)?
    };
    let a = if branches.attention {
        let mut ctx = layers::Ctx::new(&mut g, &va.store, &va_bind, Mode::Eval);
        va.build(&mut ctx, x, branches.prior)?
    } else {
        g.constant(Tensor::ones(&[h, w]))
    };
    let s = image_scores(&mut g, y, Some(a))?;
    Ok((
        ColorNameMap::new(g.value(y).clone())?,
        AttentionMap::new(g.value(a).clone())?,
        ImageScore::new(g.value(s).clone())?,
    ))
}
