//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for
/// the gradient of the scalar `f(x)` with respect to `x`.
pub fn finite_diff_check<F>(f: F, input: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let errs = finite_diff_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(input), eps)?;
    Ok(errs[0])
}

/// Like [`finite_diff_check`] for several inputs at once; returns one error
/// per input.
pub fn finite_diff_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], grads: bool| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), grads)).collect();
        let loss = f(&mut g, &vars)?;
        let lv = g.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let value = lv.item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        g.backward(loss)?;
        let gs = vars.iter().map(|&v| g.grad_data(v).map(<[f64]>::to_vec)).collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut work = inputs.to_vec();
    let mut errors = Vec::with_capacity(inputs.len());
    for (t, analytic) in analytic.iter().enumerate() {
        let analytic = analytic.clone().unwrap_or_else(|| vec![0.0; inputs[t].len()]);
        let mut worst: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let orig = inputs[t].data()[i];
            work[t].data_mut()[i] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[t].data_mut()[i] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
        errors.push(worst);
    }
    Ok(errors)
}
