use rayon::prelude::*;

/// Geometry shared by convolution and transposed convolution.
///
/// For `conv2d` the "small" side is the output; for `deconv2d` it is the
/// input. `big_*` is always the spatially larger tensor.
#[derive(Clone, Copy, Debug)]
pub struct Geometry {
    pub n: usize,
    pub big_h: usize,
    pub big_w: usize,
    pub big_c: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub small_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    /// Maps a small-side position plus a kernel tap to a big-side position.
    #[inline]
    fn tap(&self, sy: usize, sx: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let by = (sy * self.stride + ky).checked_sub(self.pad)?;
        let bx = (sx * self.stride + kx).checked_sub(self.pad)?;
        (by < self.big_h && bx < self.big_w).then_some((by, bx))
    }

    fn big_len(&self) -> usize {
        self.big_h * self.big_w * self.big_c
    }

    fn small_len(&self) -> usize {
        self.small_h * self.small_w * self.small_c
    }
}

/// Reorders a `[k, k, a, b]` kernel to `[k, k, b, a]`.
pub fn transpose_kernel(w: &[f64], k: usize, a: usize, b: usize) -> Vec<f64> {
    let mut out = vec![0.0; w.len()];
    for tap in 0..k * k {
        let src = &w[tap * a * b..][..a * b];
        let dst = &mut out[tap * a * b..][..a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

/// Accumulates `small += conv(big, w)` where `w` is `[k, k, big_c, small_c]`.
///
/// This is the conv2d forward pass and also the deconv2d input gradient.
fn gather(big: &[f64], w: &[f64], small: &mut [f64], g: &Geometry) {
    let (bc, sc, k) = (g.big_c, g.small_c, g.k);
    small
        .par_chunks_mut(g.small_len())
        .zip(big.par_chunks(g.big_len()))
        .for_each(|(small, big)| {
            for sy in 0..g.small_h {
                for sx in 0..g.small_w {
                    let out = &mut small[(sy * g.small_w + sx) * sc..][..sc];
                    for ky in 0..k {
                        for kx in 0..k {
                            let Some((by, bx)) = g.tap(sy, sx, ky, kx) else {
                                continue;
                            };
                            let input = &big[(by * g.big_w + bx) * bc..][..bc];
                            let taps = &w[(ky * k + kx) * bc * sc..][..bc * sc];
                            for (c, &v) in input.iter().enumerate() {
                                if v == 0.0 {
                                    continue;
                                }
                                let row = &taps[c * sc..][..sc];
                                for (o, &wv) in out.iter_mut().zip(row) {
                                    *o += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Accumulates `big += convᵀ(small, w)` where `w` is `[k, k, small_c, big_c]`.
///
/// This is the deconv2d forward pass and also the conv2d input gradient.
fn scatter(small: &[f64], w: &[f64], big: &mut [f64], g: &Geometry) {
    let (bc, sc, k) = (g.big_c, g.small_c, g.k);
    big.par_chunks_mut(g.big_len())
        .zip(small.par_chunks(g.small_len()))
        .for_each(|(big, small)| {
            for sy in 0..g.small_h {
                for sx in 0..g.small_w {
                    let input = &small[(sy * g.small_w + sx) * sc..][..sc];
                    for ky in 0..k {
                        for kx in 0..k {
                            let Some((by, bx)) = g.tap(sy, sx, ky, kx) else {
                                continue;
                            };
                            let out = &mut big[(by * g.big_w + bx) * bc..][..bc];
                            let taps = &w[(ky * k + kx) * sc * bc..][..sc * bc];
                            for (c, &v) in input.iter().enumerate() {
                                if v == 0.0 {
                                    continue;
                                }
                                let row = &taps[c * bc..][..bc];
                                for (o, &wv) in out.iter_mut().zip(row) {
                                    *o += v * wv;
                                }
                            }
                        }
                    }
                }
            }
        });
}

/// Kernel gradient laid out as `[k, k, big_c, small_c]`.
///
/// Each `(ky, kx, big channel)` line is owned by one task and accumulates
/// over the batch and positions in a fixed order.
fn kernel_grad(big: &[f64], small: &[f64], g: &Geometry) -> Vec<f64> {
    let (bc, sc, k) = (g.big_c, g.small_c, g.k);
    let mut dw = vec![0.0; k * k * bc * sc];
    dw.par_chunks_mut(sc)
        .enumerate()
        .for_each(|(line, acc)| {
            let tap = line / bc;
            let r = line % bc;
            let (ky, kx) = (tap / k, tap % k);
            for n in 0..g.n {
                let big = &big[n * g.big_len()..][..g.big_len()];
                let small = &small[n * g.small_len()..][..g.small_len()];
                for sy in 0..g.small_h {
                    for sx in 0..g.small_w {
                        let Some((by, bx)) = g.tap(sy, sx, ky, kx) else {
                            continue;
                        };
                        let v = big[(by * g.big_w + bx) * bc + r];
                        if v == 0.0 {
                            continue;
                        }
                        let cols = &small[(sy * g.small_w + sx) * sc..][..sc];
                        for (a, &c) in acc.iter_mut().zip(cols) {
                            *a += v * c;
                        }
                    }
                }
            }
        });
    dw
}

/// Cross-correlation. `w` is `[k, k, cin, cout]`; returns the output buffer.
pub fn conv2d_forward(x: &[f64], w: &[f64], bias: &[f64], g: &Geometry) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.n * g.small_len());
    for _ in 0..g.n * g.small_h * g.small_w {
        out.extend_from_slice(bias);
    }
    gather(x, w, &mut out, g);
    out
}

pub fn conv2d_backward_input(dout: &[f64], w: &[f64], g: &Geometry) -> Vec<f64> {
    let wt = transpose_kernel(w, g.k, g.big_c, g.small_c);
    let mut dx = vec![0.0; g.n * g.big_len()];
    scatter(dout, &wt, &mut dx, g);
    dx
}

pub fn conv2d_backward_kernel(x: &[f64], dout: &[f64], g: &Geometry) -> Vec<f64> {
    kernel_grad(x, dout, g)
}

/// Per-channel sum of `dout` over batch and positions.
pub fn bias_grad(dout: &[f64], channels: usize) -> Vec<f64> {
    let mut db = vec![0.0; channels];
    for px in dout.chunks(channels) {
        for (d, &v) in db.iter_mut().zip(px) {
            *d += v;
        }
    }
    db
}

/// Transposed convolution. `w` is `[k, k, cout, cin]`.
pub fn deconv2d_forward(x: &[f64], w: &[f64], g: &Geometry) -> Vec<f64> {
    let wt = transpose_kernel(w, g.k, g.big_c, g.small_c);
    let mut out = vec![0.0; g.n * g.big_len()];
    scatter(x, &wt, &mut out, g);
    out
}

pub fn deconv2d_backward_input(dout: &[f64], w: &[f64], g: &Geometry) -> Vec<f64> {
    let mut dx = vec![0.0; g.n * g.small_len()];
    gather(dout, w, &mut dx, g);
    dx
}

pub fn deconv2d_backward_kernel(x: &[f64], dout: &[f64], g: &Geometry) -> Vec<f64> {
    kernel_grad(dout, x, g)
}
