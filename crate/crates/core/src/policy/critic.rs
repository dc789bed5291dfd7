use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::TransitionRecord;
use crate::diffcore::{Bound, Graph, ParamSet, Var};
use crate::error::{Error, Result};

/// One linear value head per class over the flattened key features.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticBank {
    pub classes: usize,
    pub input_dim: usize,
    pub gamma: f64,
    pub params: ParamSet,
}

pub fn weight_path(c: usize) -> String {
    format!("critic.{c:02}.weight")
}

pub fn bias_path(c: usize) -> String {
    format!("critic.{c:02}.bias")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticReport {
    pub loss: f64,
    pub grad_norm: f64,
}

impl CriticBank {
    pub fn new<R: Rng + ?Sized>(classes: usize, input_dim: usize, gamma: f64, rng: &mut R) -> Result<Self> {
        if classes == 0 || input_dim == 0 {
            return Err(Error::invalid("critic", "classes and input dim must be positive"));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(Error::invalid("critic", format!("gamma {gamma} outside [0, 1)")));
        }
        let mut params = ParamSet::new();
        for c in 0..classes {
            params.insert_normal(weight_path(c), &[input_dim, 1], 0.01 / (input_dim as f64).sqrt(), rng)?;
            params.insert_zeros(bias_path(c), &[1])?;
        }
        Ok(Self {
            classes,
            input_dim,
            gamma,
            params,
        })
    }

    /// Records `V: [B, C]` for `keys: [B, input_dim]`.
    pub fn graph(&self, g: &mut Graph, keys: Var, p: &Bound) -> Result<Var> {
        let mut heads = Vec::with_capacity(self.classes);
        for c in 0..self.classes {
            heads.push(g.linear(keys, p.get(&weight_path(c))?, p.get(&bias_path(c))?)?);
        }
        g.concat_last(&heads)
    }

    /// Values without gradient tracking.
    pub fn values(&self, key: &[f64]) -> Result<Vec<f64>> {
        if key.len() != self.input_dim {
            return Err(Error::shape("critic", format!("key of length {}, expected {}", key.len(), self.input_dim)));
        }
        let mut out = Vec::with_capacity(self.classes);
        for c in 0..self.classes {
            let w = self.params.get(&weight_path(c))?.values();
            let b = self.params.get(&bias_path(c))?.values()[0];
            out.push(w.iter().zip(key).map(|(a, x)| a * x).sum::<f64>() + b);
        }
        Ok(out)
    }

    /// Bootstrapped targets `r + gamma V(z')`, per class.
    pub fn td_targets(&self, record: &TransitionRecord) -> Result<Vec<f64>> {
        let next = self.values(&record.z_key_next)?;
        Ok(record.reward.iter().zip(&next).map(|(r, v)| r + self.gamma * v).collect())
    }

    /// Squared-error regression of `V(keys)` onto fixed targets; one SGD
    /// step, with the gradient rescaled to norm `max_grad_norm` if larger.
    pub fn regress(
        &mut self,
        keys: &[Vec<f64>],
        targets: &[Vec<f64>],
        lr: f64,
        weight_decay: f64,
        max_grad_norm: Option<f64>,
    ) -> Result<CriticReport> {
        if keys.is_empty() || keys.len() != targets.len() {
            return Err(Error::invalid("critic.regress", "empty or mismatched batch"));
        }
        let b = keys.len();
        let mut g = Graph::new();
        let p = g.bind(&self.params);
        let x = g.constant(vec![b, self.input_dim], keys.concat())?;
        let v = self.graph(&mut g, x, &p)?;
        let t = g.constant(vec![b, self.classes], targets.concat())?;
        let se = g.squared_error(v, t)?;
        let loss = g.scale(se, 1.0 / b as f64);
        let value = g.scalar(loss);
        g.backward(loss)?.accumulate_into(&mut self.params)?;
        let grad_norm = self.params.grad_norm();
        if let Some(cap) = max_grad_norm.filter(|&c| grad_norm > c) {
            self.params.scale_grads(cap / grad_norm);
        }
        self.params.sgd_step(lr, weight_decay)?;
        Ok(CriticReport { loss: value, grad_norm })
    }

    /// Mean over the batch of the summed squared TD errors.
    pub fn td_error(&self, keys: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
        let mut s = 0.0;
        for (k, t) in keys.iter().zip(targets) {
            let v = self.values(k)?;
            s += v.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        Ok(s / keys.len() as f64)
    }
}

/// `A_c = r_c + gamma V_c(z') - V_c(z)`.
pub fn td_advantage(record: &TransitionRecord, critics: &CriticBank) -> Result<Vec<f64>> {
    let target = critics.td_targets(record)?;
    let now = critics.values(&record.z_key)?;
    Ok(target.iter().zip(&now).map(|(t, v)| t - v).collect())
}
