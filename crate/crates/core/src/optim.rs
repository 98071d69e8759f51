//! Stochastic gradient descent with classical momentum.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Applies `v <- mu*v + g; w <- w - lr*v` in place. Without a velocity
/// buffer (`mu == 0`) this is plain `w <- w - lr*g`.
pub fn sgd_update(w: &mut [f64], g: &[f64], velocity: Option<&mut [f64]>, lr: f64, momentum: f64) -> Result<()> {
    if w.len() != g.len() {
        return Err(Error::shape("sgd_step", format!("parameter has {} values, gradient {}", w.len(), g.len())));
    }
    match velocity {
        Some(v) => {
            if v.len() != w.len() {
                return Err(Error::shape("sgd_step", format!("velocity has {} values, parameter {}", v.len(), w.len())));
            }
            for ((wi, &gi), vi) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = momentum * *vi + gi;
                *wi -= lr * *vi;
            }
        }
        None => {
            for (wi, &gi) in w.iter_mut().zip(g) {
                *wi -= lr * gi;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    /// Velocity per parameter name; empty when `momentum == 0`.
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0) || !learning_rate.is_finite() {
            return Err(Error::invalid("sgd", format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("sgd", format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Self {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, name: String, v: Vec<f64>) {
        self.velocity.insert(name, v);
    }

    /// Updates every parameter listed in `grads`, rounding stored values to
    /// the store's precision.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Vec<f64>)]) -> Result<()> {
        let precision = store.precision();
        for (id, g) in grads {
            let name = store.name(*id).to_string();
            let len = store.get(*id).len();
            let w = store.data_mut(*id);
            if self.momentum > 0.0 {
                let v = self.velocity.entry(name).or_insert_with(|| vec![0.0; len]);
                sgd_update(w, g, Some(v), self.learning_rate, self.momentum)?;
                precision.round_slice(v);
            } else {
                sgd_update(w, g, None, self.learning_rate, 0.0)?;
            }
            precision.round_slice(w);
        }
        Ok(())
    }
}
