/// Per-channel biased mean and variance of a `[..., c]` buffer.
pub fn channel_stats(x: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for px in x.chunks(c) {
        for (s, &v) in mean.iter_mut().zip(px) {
            *s += v;
        }
    }
    mean.iter_mut().for_each(|s| *s /= m);
    let mut var = vec![0.0; c];
    for px in x.chunks(c) {
        for ((s, &v), &mu) in var.iter_mut().zip(px).zip(&mean) {
            let d = v - mu;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= m);
    (mean, var)
}

/// `y = gamma * (x - mean) * inv_std + beta`; also returns the normalized input.
pub fn normalize(
    x: &[f64],
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    beta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let c = mean.len();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for ((px, hp), yp) in x.chunks(c).zip(xhat.chunks_mut(c)).zip(y.chunks_mut(c)) {
        for j in 0..c {
            let h = (px[j] - mean[j]) * inv_std[j];
            hp[j] = h;
            yp[j] = gamma[j] * h + beta[j];
        }
    }
    (xhat, y)
}

/// Gradients of training-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = gamma.len();
    let m = (dy.len() / c) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (g, h) in dy.chunks(c).zip(xhat.chunks(c)) {
        for j in 0..c {
            dbeta[j] += g[j];
            dgamma[j] += g[j] * h[j];
        }
    }
    // dxhat = dy * gamma; sums of dxhat and dxhat*xhat follow from dbeta/dgamma.
    let mut dx = vec![0.0; dy.len()];
    for ((d, g), h) in dx.chunks_mut(c).zip(dy.chunks(c)).zip(xhat.chunks(c)) {
        for j in 0..c {
            let dxhat = g[j] * gamma[j];
            d[j] = inv_std[j] / m * (m * dxhat - gamma[j] * dbeta[j] - h[j] * gamma[j] * dgamma[j]);
        }
    }
    (dx, dgamma, dbeta)
}
