//! Brute-force layer oracles shared by test targets.

#![allow(dead_code)]

use chroma::{Graph, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct cross-correlation over an implicitly zero-padded input.
pub fn conv_oracle(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ks, co) = (k.shape()[0], k.shape()[3]);
    let ho = (h + 2 * pad - ks) / stride + 1;
    let wo = (w + 2 * pad - ks) / stride + 1;
    let mut out = Tensor::zeros(&[ho, wo, co]);
    for oy in 0..ho {
        for ox in 0..wo {
            for o in 0..co {
                let mut s = b.data()[o];
                for ky in 0..ks {
                    for kx in 0..ks {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                            continue;
                        }
                        for c in 0..ci {
                            s += x.get(&[iy as usize, ix as usize, c]) * k.get(&[ky, kx, c, o]);
                        }
                    }
                }
                out.set(&[oy, ox, o], s);
            }
        }
    }
    out
}

/// Transposed convolution by its definition: every input pixel stamps a
/// scaled copy of the kernel at `stride` spacing.
pub fn deconv_oracle(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let (h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ks, co) = (k.shape()[0], k.shape()[2]);
    let mut out = Tensor::zeros(&[(h - 1) * stride + ks, (w - 1) * stride + ks, co]);
    for iy in 0..h {
        for ix in 0..w {
            for c in 0..ci {
                for ky in 0..ks {
                    for kx in 0..ks {
                        for o in 0..co {
                            let idx = [iy * stride + ky, ix * stride + kx, o];
                            let v = out.get(&idx) + x.get(&[iy, ix, c]) * k.get(&[ky, kx, o, c]);
                            out.set(&idx, v);
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn maxpool_oracle(x: &Tensor, k: usize, stride: usize) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = ((h - k) / stride + 1, (w - k) / stride + 1);
    let mut out = Tensor::zeros(&[ho, wo, c]);
    for oy in 0..ho {
        for ox in 0..wo {
            for ch in 0..c {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(x.get(&[oy * stride + ky, ox * stride + kx, ch]));
                    }
                }
                out.set(&[oy, ox, ch], m);
            }
        }
    }
    out
}

pub fn conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let mut g = Graph::new();
    let (xv, kv, bv) = (g.constant(x.clone()), g.constant(k.clone()), g.constant(b.clone()));
    let y = g.conv2d(xv, kv, bv, stride, pad).unwrap();
    g.value(y).clone()
}

pub fn deconv(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let mut g = Graph::new();
    let (xv, kv) = (g.constant(x.clone()), g.constant(k.clone()));
    let y = g.deconv2d(xv, kv, stride).unwrap();
    g.value(y).clone()
}
