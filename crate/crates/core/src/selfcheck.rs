//! Finite-difference gradient suite behind `chroma gradcheck`.
//!
//! Every graph op is checked on small random inputs in 64-bit arithmetic,
//! the modulation backward rule is checked literally, and a micro version
//! of the full two-branch model is checked end to end.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{finite_diff_check_many, DEFAULT_EPS};
use crate::graph::{Graph, Var};
use crate::modulation::{aggregate_scores, spatial_prior_forward};
use crate::nets::layers::Ctx;
use crate::nets::{image_scores, CnConfig, CnNet, Mode, VaConfig, VaNet};
use crate::params::{ParamStore, Precision};
use crate::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const NETWORK_TOLERANCE: f64 = 1e-3;
pub const MICRO_SIDE: usize = 9;
pub const MICRO_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckEntry {
    pub name: String,
    /// Largest `|analytic - numeric| / max(1, |numeric|)`, or the largest
    /// absolute difference for exact checks.
    pub error: f64,
    pub tolerance: f64,
    /// Exact checks pass only with zero error.
    pub exact: bool,
}

impl CheckEntry {
    pub fn passed(&self) -> bool {
        if self.exact {
            self.error == 0.0
        } else {
            self.error < self.tolerance
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelfCheckReport {
    pub entries: Vec<CheckEntry>,
}

impl SelfCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(CheckEntry::passed)
    }

    pub fn failures(&self) -> Vec<&CheckEntry> {
        self.entries.iter().filter(|e| !e.passed()).collect()
    }

    pub fn get(&self, name: &str) -> Option<&CheckEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>12} {:>10}  status", "check", "max_error", "tolerance");
        for e in &self.entries {
            let tol = if e.exact { "exact".to_string() } else { format!("{:.0e}", e.tolerance) };
            let status = if e.passed() { "ok" } else { "FAIL" };
            let _ = writeln!(s, "{:<22} {:>12.3e} {:>10}  {status}", e.name, e.error, tol);
        }
        let failures = self.failures();
        if failures.is_empty() {
            let _ = writeln!(s, "result = pass ({} checks)", self.entries.len());
        } else {
            let names: Vec<&str> = failures.iter().map(|e| e.name.as_str()).collect();
            let _ = writeln!(s, "result = fail ({} of {}): {}", failures.len(), self.entries.len(), names.join(", "));
        }
        s
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Values in `±[0.1, 1)`, away from the ReLU kink.
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let v = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Reduces `out` to a scalar with fixed random weights so every output
/// coordinate gets a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(uniform(&shape, -1.0, 1.0, &mut rng));
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

fn op_check<F>(name: &str, inputs: &[Tensor], f: F) -> Result<CheckEntry>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let errs = finite_diff_check_many(f, inputs, DEFAULT_EPS)?;
    Ok(CheckEntry {
        name: name.into(),
        error: errs.into_iter().fold(0.0, f64::max),
        tolerance: OP_TOLERANCE,
        exact: false,
    })
}

fn op_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckEntry>> {
    let mut out = Vec::new();
    let x = uniform(&[2, 5, 6, 3], -1.0, 1.0, rng);
    let w = uniform(&[3, 3, 3, 4], -1.0, 1.0, rng);
    let b = uniform(&[4], -1.0, 1.0, rng);
    out.push(op_check("conv2d", &[x.clone(), w, b], |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 2, 1)?;
        weighted_sum(g, y, 1)
    })?);

    let xd = uniform(&[2, 3, 4, 3], -1.0, 1.0, rng);
    let wd = uniform(&[3, 3, 2, 3], -1.0, 1.0, rng);
    out.push(op_check("deconv2d", &[xd.clone(), wd.clone()], |g, v| {
        let y = g.deconv2d(v[0], v[1], 2)?;
        weighted_sum(g, y, 2)
    })?);
    out.push(op_check("deconv2d_padded", &[xd, wd], |g, v| {
        let y = g.deconv2d_padded(v[0], v[1], 2, (1, 1))?;
        weighted_sum(g, y, 3)
    })?);

    // distinct values keep the pooling argmax stable under perturbation
    let mut pool_in: Vec<f64> = (0..2 * 7 * 7 * 2).map(|i| i as f64 * 0.01).collect();
    for i in (1..pool_in.len()).rev() {
        pool_in.swap(i, rng.random_range(0..=i));
    }
    let pool_in = Tensor::new(&[2, 7, 7, 2], pool_in)?;
    out.push(op_check("maxpool2d", &[pool_in], |g, v| {
        let y = g.maxpool2d(v[0], 3, 2)?;
        weighted_sum(g, y, 4)
    })?);

    out.push(op_check("global_avgpool", std::slice::from_ref(&x), |g, v| {
        let y = g.global_avgpool(v[0])?;
        weighted_sum(g, y, 5)
    })?);

    let xb = uniform(&[2, 3, 3, 4], -2.0, 2.0, rng);
    let gamma = uniform(&[4], 0.5, 1.5, rng);
    let beta = uniform(&[4], -1.0, 1.0, rng);
    out.push(op_check("batchnorm_train", &[xb.clone(), gamma.clone(), beta.clone()], |g, v| {
        let (y, _) = g.batchnorm_train(v[0], v[1], v[2])?;
        weighted_sum(g, y, 6)
    })?);
    let mean = [0.1, -0.2, 0.3, 0.0];
    let var = [0.5, 1.5, 1.0, 2.0];
    out.push(op_check("batchnorm_eval", &[xb, gamma, beta], |g, v| {
        let y = g.batchnorm_eval(v[0], v[1], v[2], &mean, &var)?;
        weighted_sum(g, y, 7)
    })?);

    out.push(op_check("relu", &[off_zero(&[3, 4, 2], rng)], |g, v| {
        let y = g.relu(v[0]);
        weighted_sum(g, y, 8)
    })?);

    out.push(op_check("softmax", &[uniform(&[2, 3, 5], -2.0, 2.0, rng)], |g, v| {
        let y = g.softmax(v[0])?;
        weighted_sum(g, y, 9)
    })?);

    let ca = uniform(&[2, 3, 3, 2], -1.0, 1.0, rng);
    let cb = uniform(&[2, 3, 3, 3], -1.0, 1.0, rng);
    out.push(op_check("concat_channels", &[ca, cb], |g, v| {
        let y = g.concat_channels(v[0], v[1])?;
        weighted_sum(g, y, 10)
    })?);

    let fx = uniform(&[3, 6], -1.0, 1.0, rng);
    let fw = uniform(&[6, 4], -1.0, 1.0, rng);
    let fb = uniform(&[4], -1.0, 1.0, rng);
    out.push(op_check("fully_connected", &[fx, fw, fb], |g, v| {
        let y = g.fully_connected(v[0], v[1], v[2])?;
        weighted_sum(g, y, 11)
    })?);

    out.push(op_check("cross_entropy", &[uniform(&[3, 4], -2.0, 2.0, rng)], |g, v| {
        let p = g.softmax(v[0])?;
        g.cross_entropy(p, &[0, 3, 1])
    })?);

    let mask = Tensor::from_fn(&[2, 4, 4], |i| ((i * 7) % 3 == 0) as u8 as f64);
    out.push(op_check("masked_nll", &[uniform(&[2, 4, 4, 3], -2.0, 2.0, rng)], |g, v| {
        let y = g.softmax(v[0])?;
        g.masked_nll(y, &mask, &[2, 0])
    })?);

    let my = uniform(&[4, 5, 3], -1.0, 1.0, rng);
    let ma = uniform(&[4, 5], 0.1, 2.0, rng);
    out.push(op_check("modulate", &[my, ma], |g, v| {
        let y = g.modulate(v[0], v[1])?;
        weighted_sum(g, y, 12)
    })?);
    let by = uniform(&[2, 4, 5, 3], -1.0, 1.0, rng);
    let ba = uniform(&[4, 5], 0.1, 2.0, rng);
    out.push(op_check("modulate_broadcast", &[by, ba], |g, v| {
        let y = g.modulate(v[0], v[1])?;
        weighted_sum(g, y, 13)
    })?);

    out.push(op_check("spatial_prior", &[uniform(&[6, 6, 1, 1], -1.0, 1.0, rng)], |g, v| {
        let p = spatial_prior_forward(g, v[0], 4, (6, 6))?;
        weighted_sum(g, p, 14)
    })?);

    out.push(op_check("aggregate_scores", &[uniform(&[4, 5, 3], 0.0, 1.0, rng)], |g, v| {
        let s = aggregate_scores(g, v[0])?;
        weighted_sum(g, s, 15)
    })?);
    Ok(out)
}

/// With an all-ones upstream gradient the modulation backward must give
/// exactly `A` for every channel of `Y` and exactly `Σ_k Y_k` for `A`.
pub fn modulate_literal_error(y: &Tensor, a: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let yv = g.leaf(y.clone(), true);
    let av = g.leaf(a.clone(), true);
    let out = g.modulate(yv, av)?;
    let loss = g.sum(out);
    g.backward(loss)?;
    let gy = g.grad_data(yv).unwrap_or(&[]).to_vec();
    let ga = g.grad_data(av).unwrap_or(&[]).to_vec();
    let c = *y.shape().last().unwrap_or(&1);
    let mut err: f64 = if gy.len() == y.len() && ga.len() == a.len() { 0.0 } else { f64::INFINITY };
    for (p, &ap) in a.data().iter().enumerate() {
        let mut channel_sum = 0.0;
        for k in 0..c {
            channel_sum += y.data()[p * c + k];
            err = err.max((gy.get(p * c + k).copied().unwrap_or(f64::NAN) - ap).abs());
        }
        err = err.max((ga.get(p).copied().unwrap_or(f64::NAN) - channel_sum).abs());
    }
    Ok(if err.is_nan() { f64::INFINITY } else { err })
}

/// Micro two-branch model used for the end-to-end check.
pub fn micro_model(seed: u64) -> Result<(CnNet, VaNet)> {
    let cn = CnNet::new(
        CnConfig {
            classes: MICRO_CLASSES,
            width: 4,
        },
        Precision::F64,
        seed,
    )?;
    let va = VaNet::new(
        VaConfig {
            channels: vec![2, 3, 4],
            fc_width: 8,
            grid: 1,
        },
        Precision::F64,
        seed + 1,
    )?;
    Ok((cn, va))
}

fn micro_loss(cn: &CnNet, va: &VaNet, x: &Tensor, labels: &[usize], grads: bool) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let cb = cn.store.bind(&mut g, grads);
    let vb = va.store.bind(&mut g, grads);
    let xv = g.constant(x.clone());
    let y = cn.build(&mut Ctx::new(&mut g, &cn.store, &cb, Mode::Train), xv)?;
    let a = va.build(&mut Ctx::new(&mut g, &va.store, &vb, Mode::Train), xv, true)?;
    let s = image_scores(&mut g, y, Some(a))?;
    let loss = g.cross_entropy(s, labels)?;
    let value = g.value(loss).item();
    if !grads {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    let mut out = Vec::new();
    for (store, bind) in [(&cn.store, &cb), (&va.store, &vb)] {
        for id in store.trainable_ids() {
            let n = store.get(id).len();
            out.push(g.grad_data(bind.var(id)).map_or(vec![0.0; n], <[f64]>::to_vec));
        }
    }
    Ok((value, out))
}

fn perturb(store: &mut ParamStore, id: crate::params::ParamId, i: usize, v: f64) -> Result<()> {
    let mut t = store.get(id).clone();
    t.data_mut()[i] = v;
    store.set(id, t)
}

/// End-to-end finite-difference error of the micro model over every
/// trainable parameter of both branches, in training mode.
#[allow(clippy::needless_range_loop)]
pub fn micro_network_error(seed: u64) -> Result<f64> {
    let (mut cn, mut va) = micro_model(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&[2, MICRO_SIDE, MICRO_SIDE, 3], 0.0, 1.0, &mut rng);
    let labels = [0, MICRO_CLASSES - 1];
    let (_, analytic) = micro_loss(&cn, &va, &x, &labels, true)?;
    let mut worst: f64 = 0.0;
    let mut slot = 0;
    for branch in 0..2 {
        let ids: Vec<_> = if branch == 0 { cn.store.trainable_ids().collect() } else { va.store.trainable_ids().collect() };
        for id in ids {
            let n = if branch == 0 { cn.store.get(id).len() } else { va.store.get(id).len() };
            for i in 0..n {
                let store = if branch == 0 { &mut cn.store } else { &mut va.store };
                let orig = store.get(id).data()[i];
                perturb(store, id, i, orig + DEFAULT_EPS)?;
                let (plus, _) = micro_loss(&cn, &va, &x, &labels, false)?;
                let store = if branch == 0 { &mut cn.store } else { &mut va.store };
                perturb(store, id, i, orig - DEFAULT_EPS)?;
                let (minus, _) = micro_loss(&cn, &va, &x, &labels, false)?;
                let store = if branch == 0 { &mut cn.store } else { &mut va.store };
                perturb(store, id, i, orig)?;
                let numeric = (plus - minus) / (2.0 * DEFAULT_EPS);
                worst = worst.max((analytic[slot][i] - numeric).abs() / numeric.abs().max(1.0));
            }
            slot += 1;
        }
    }
    Ok(worst)
}

/// Runs the whole suite with fixed seeds.
pub fn run_suite() -> Result<SelfCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut entries = op_checks(&mut rng)?;
    let y = uniform(&[5, 4, 3], -1.0, 1.0, &mut rng);
    let a = uniform(&[5, 4], 0.0, 2.0, &mut rng);
    entries.push(CheckEntry {
        name: "modulate_literal".into(),
        error: modulate_literal_error(&y, &a)?,
        tolerance: 0.0,
        exact: true,
    });
    entries.push(CheckEntry {
        name: "micro_network".into(),
        error: micro_network_error(7)?,
        tolerance: NETWORK_TOLERANCE,
        exact: false,
    });
    Ok(SelfCheckReport { entries })
}
