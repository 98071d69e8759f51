use rayon::prelude::*;

/// `out[b, :] = bias + x[b, :] · w` with `w` laid out `[n_in, n_out]`.
pub fn fc_forward(x: &[f64], w: &[f64], bias: &[f64], n_in: usize) -> Vec<f64> {
    let n_out = bias.len();
    let batch = x.len() / n_in;
    let mut out = Vec::with_capacity(batch * n_out);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    out.par_chunks_mut(n_out)
        .zip(x.par_chunks(n_in))
        .for_each(|(o, xr)| {
            for (i, &v) in xr.iter().enumerate() {
                if v == 0.0 {
                    continue;
                }
                for (a, &wv) in o.iter_mut().zip(&w[i * n_out..][..n_out]) {
                    *a += v * wv;
                }
            }
        });
    out
}

/// Returns `(dx, dw, dbias)`.
pub fn fc_backward(
    dy: &[f64],
    x: &[f64],
    w: &[f64],
    n_in: usize,
    n_out: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let batch = x.len() / n_in;
    let mut dx = vec![0.0; x.len()];
    dx.par_chunks_mut(n_in)
        .zip(dy.par_chunks(n_out))
        .for_each(|(dxr, g)| {
            for (i, d) in dxr.iter_mut().enumerate() {
                let row = &w[i * n_out..][..n_out];
                *d = row.iter().zip(g).map(|(a, b)| a * b).sum();
            }
        });
    let mut dw = vec![0.0; w.len()];
    dw.par_chunks_mut(n_out).enumerate().for_each(|(i, row)| {
        for b in 0..batch {
            let v = x[b * n_in + i];
            if v == 0.0 {
                continue;
            }
            for (a, &g) in row.iter_mut().zip(&dy[b * n_out..][..n_out]) {
                *a += v * g;
            }
        }
    });
    let db = super::conv::bias_grad(dy, n_out);
    (dx, dw, db)
}
