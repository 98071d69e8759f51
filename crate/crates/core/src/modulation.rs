//! The modulation layer, the learned spatial prior and image-level score
//! aggregation.
//!
//! Modulation multiplies every channel of a feature map by a single-channel
//! map. Its backward rule is `d out / d Y_k = A` for each channel and
//! `d out / d A = Σ_k Y_k` (weighted by the upstream gradient).

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Non-negative single-channel relevance map `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap(Tensor);

impl AttentionMap {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape("attention", format!("expected [H,W], got {:?}", values.shape())));
        }
        if values.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("attention", "entries must be finite and non-negative"));
        }
        Ok(Self(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[1]
    }
}

/// Image-level probability vector over the vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore(Tensor);

impl ImageScore {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 1 {
            return Err(Error::shape("image score", format!("expected [C], got {:?}", values.shape())));
        }
        let s = values.sum();
        if values.data().iter().any(|v| !(*v > 0.0)) || (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid("image score", format!("not a probability vector (sum {s})")));
        }
        Ok(Self(values))
    }

    pub fn probabilities(&self) -> &[f64] {
        self.0.data()
    }

    /// Index of the largest probability; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(self.0.data())
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `Ŷ(x, y, k) = A(x, y) · Y(x, y, k)` for every channel `k`.
pub fn modulate(graph: &mut Graph, y: Var, attention: Var) -> Result<Var> {
    graph.modulate(y, attention)
}

/// Per-channel global mean followed by a softmax.
pub fn aggregate_scores(graph: &mut Graph, y_hat: Var) -> Result<Var> {
    let pooled = graph.global_avgpool(y_hat)?;
    graph.softmax(pooled)
}

/// Learned center-bias map: a transposed convolution applied to a fixed
/// single-pixel input of value one.
#[derive(Clone, Debug)]
pub struct SpatialPrior {
    /// Deconvolution kernel `[k, k, 1, 1]`.
    pub kernel: Tensor,
}

impl SpatialPrior {
    pub fn new(kernel: Tensor) -> Result<Self> {
        match *kernel.shape() {
            [k, k2, 1, 1] if k == k2 && k > 0 => Ok(Self { kernel }),
            [k, k2] if k == k2 && k > 0 => Ok(Self {
                kernel: kernel.reshape(&[k, k, 1, 1])?,
            }),
            _ => Err(Error::shape("spatial_prior", format!("kernel must be [k,k] or [k,k,1,1], got {:?}", kernel.shape()))),
        }
    }

    /// Discrete Gaussian centered on the grid with `sigma = k / 4`, peak 1.
    pub fn gaussian(k: usize) -> Self {
        let sigma = k as f64 / 4.0;
        let c = (k as f64 - 1.0) / 2.0;
        let kernel = Tensor::from_fn(&[k, k, 1, 1], |i| {
            let (y, x) = ((i / k) as f64, (i % k) as f64);
            let d2 = (y - c).powi(2) + (x - c).powi(2);
            (-d2 / (2.0 * sigma * sigma)).exp()
        });
        Self { kernel }
    }

    pub fn size(&self) -> usize {
        self.kernel.shape()[0]
    }

    /// Center of mass of the positive part, in `[0, 1]` image coordinates
    /// `(row, col)`. `None` if no entry is positive.
    pub fn center_of_mass(&self) -> Option<(f64, f64)> {
        let k = self.size();
        let (mut total, mut sy, mut sx) = (0.0, 0.0, 0.0);
        for (i, &v) in self.kernel.data().iter().enumerate() {
            let w = v.max(0.0);
            total += w;
            sy += w * ((i / k) as f64 + 0.5);
            sx += w * ((i % k) as f64 + 0.5);
        }
        (total > 0.0).then(|| (sy / (total * k as f64), sx / (total * k as f64)))
    }
}

/// Runs the prior's deconvolution on the fixed unit input; `kernel` is the
/// graph variable holding the `[k, k, 1, 1]` kernel. The result is `[k, k]`
/// and must match the bottleneck grid it will modulate.
pub fn spatial_prior_forward(
    graph: &mut Graph,
    kernel: Var,
    stride: usize,
    bottleneck: (usize, usize),
) -> Result<Var> {
    let unit = graph.constant(Tensor::ones(&[1, 1, 1]));
    let out = graph.deconv2d(unit, kernel, stride)?;
    let s = graph.value(out).shape().to_vec();
    if (s[0], s[1]) != bottleneck {
        return Err(Error::shape(
            "spatial_prior",
            format!("prior is {}x{}, bottleneck is {}x{}", s[0], s[1], bottleneck.0, bottleneck.1),
        ));
    }
    graph.reshape(out, &[s[0], s[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check_many, DEFAULT_EPS};
    use crate::testutil::{random_tensor, rng};

    #[test]
    fn scales_every_channel() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::new(&[1, 1, 2], vec![0.2, 0.8]).unwrap());
        let a = g.constant(Tensor::new(&[1, 1], vec![0.5]).unwrap());
        let out = modulate(&mut g, y, a).unwrap();
        assert_eq!(g.value(out).data(), &[0.1, 0.4]);
    }

    #[test]
    fn unit_attention_is_identity() {
        let mut r = rng(1);
        let yv = random_tensor(&[3, 4, 5], &mut r);
        let mut g = Graph::new();
        let y = g.constant(yv.clone());
        let a = g.constant(Tensor::ones(&[3, 4]));
        let out = modulate(&mut g, y, a).unwrap();
        assert_eq!(g.value(out), &yv);
    }

    #[test]
    fn spatial_mismatch_is_rejected() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::zeros(&[3, 4, 2]));
        let a = g.constant(Tensor::zeros(&[4, 3]));
        assert!(modulate(&mut g, y, a).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng(2);
        let yv = random_tensor(&[3, 3, 4], &mut r);
        let av = random_tensor(&[3, 3], &mut r).map(f64::abs);
        let w = random_tensor(&[3, 3, 4], &mut r);
        let errs = finite_diff_check_many(
            |g, v| {
                let m = g.modulate(v[0], v[1])?;
                let wv = g.constant(w.clone());
                let p = g.mul(m, wv)?;
                Ok(g.sum(p))
            },
            &[yv, av],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
    }

    #[test]
    fn broadcast_attention_accumulates_over_batch() {
        let mut r = rng(3);
        let yv = random_tensor(&[2, 3, 3, 2], &mut r);
        let av = random_tensor(&[3, 3], &mut r).map(f64::abs);
        let errs = finite_diff_check_many(
            |g, v| {
                let m = g.modulate(v[0], v[1])?;
                let s = g.softmax(m)?;
                let w = g.constant(Tensor::from_fn(&[2, 3, 3, 2], |i| (i % 5) as f64));
                let p = g.mul(s, w)?;
                Ok(g.sum(p))
            },
            &[yv, av],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
    }

    #[test]
    fn impulse_reproduces_kernel() {
        let mut r = rng(4);
        let k = random_tensor(&[8, 8, 1, 1], &mut r);
        let mut g = Graph::new();
        let kv = g.param(k.clone());
        let p = spatial_prior_forward(&mut g, kv, 4, (8, 8)).unwrap();
        assert_eq!(g.value(p).data(), k.data());
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert!(g.grad_data(kv).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn prior_size_must_match_bottleneck() {
        let mut g = Graph::new();
        let kv = g.param(Tensor::ones(&[6, 6, 1, 1]));
        assert!(spatial_prior_forward(&mut g, kv, 4, (8, 8)).is_err());
    }

    #[test]
    fn zero_prior_zeroes_bottleneck() {
        let mut g = Graph::new();
        let kv = g.param(Tensor::zeros(&[8, 8, 1, 1]));
        let p = spatial_prior_forward(&mut g, kv, 4, (8, 8)).unwrap();
        let feats = g.constant(Tensor::ones(&[2, 8, 8, 3]));
        let m = modulate(&mut g, feats, p).unwrap();
        assert!(g.value(m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_prior_is_centered() {
        let prior = SpatialPrior::gaussian(8);
        let (cy, cx) = prior.center_of_mass().unwrap();
        assert!((cy - 0.5).abs() < 1e-12 && (cx - 0.5).abs() < 1e-12);
    }

    #[test]
    fn aggregate_of_equal_means_is_uniform() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::zeros(&[2, 2, 2]));
        let s = aggregate_scores(&mut g, y).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn aggregate_prefers_the_larger_channel() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::from_fn(&[3, 3, 3], |i| if i % 3 == 1 { 0.3 } else { 0.1 }));
        let s = aggregate_scores(&mut g, y).unwrap();
        let score = ImageScore::new(g.value(s).clone()).unwrap();
        assert_eq!(score.argmax(), 1);
    }
}
