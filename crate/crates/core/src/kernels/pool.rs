use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub struct PoolGeometry {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Channel-wise max over each window. Returns the pooled values and, per
/// output element, the flat within-sample index of the winning input.
/// Ties go to the first maximal element in row-major window order.
pub fn maxpool_forward(x: &[f64], g: &PoolGeometry) -> (Vec<f64>, Vec<u32>) {
    let in_len = g.h * g.w * g.c;
    let out_len = g.out_h * g.out_w * g.c;
    let mut out = vec![0.0; g.n * out_len];
    let mut arg = vec![0u32; g.n * out_len];
    out.par_chunks_mut(out_len)
        .zip(arg.par_chunks_mut(out_len))
        .zip(x.par_chunks(in_len))
        .for_each(|((out, arg), x)| {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let base = (oy * g.out_w + ox) * g.c;
                    for c in 0..g.c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = usize::MAX;
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = oy * g.stride + ky;
                                let ix = ox * g.stride + kx;
                                let idx = (iy * g.w + ix) * g.c + c;
                                if best_idx == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        out[base + c] = best;
                        arg[base + c] = best_idx as u32;
                    }
                }
            }
        });
    (out, arg)
}

pub fn maxpool_backward(dout: &[f64], arg: &[u32], g: &PoolGeometry) -> Vec<f64> {
    let in_len = g.h * g.w * g.c;
    let out_len = g.out_h * g.out_w * g.c;
    let mut dx = vec![0.0; g.n * in_len];
    dx.par_chunks_mut(in_len)
        .zip(dout.par_chunks(out_len))
        .zip(arg.par_chunks(out_len))
        .for_each(|((dx, dout), arg)| {
            for (&d, &i) in dout.iter().zip(arg) {
                dx[i as usize] += d;
            }
        });
    dx
}
