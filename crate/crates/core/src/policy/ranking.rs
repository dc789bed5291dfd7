use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{log_sum_exp, Graph, Var};
use crate::error::{Error, Result};

/// A permutation of class ids, most informative first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassRanking {
    pub order: Vec<usize>,
    pub log_prob: f64,
    pub logits: Vec<f64>,
}

pub fn check_permutation(order: &[usize], classes: usize) -> Result<()> {
    let mut seen = vec![false; classes];
    if order.len() != classes {
        return Err(Error::invalid("ranking", format!("{order:?} has {} entries for {classes} classes", order.len())));
    }
    for &c in order {
        if c >= classes || seen[c] {
            return Err(Error::invalid("ranking", format!("{order:?} is not a permutation")));
        }
        seen[c] = true;
    }
    Ok(())
}

/// Plackett-Luce log-probability of `order` under `logits`.
pub fn ranking_log_prob(order: &[usize], logits: &[f64]) -> Result<f64> {
    check_permutation(order, logits.len())?;
    let mut lp = 0.0;
    let mut rest: Vec<f64> = Vec::with_capacity(order.len());
    for i in 0..order.len() {
        rest.clear();
        rest.extend(order[i..].iter().map(|&c| logits[c]));
        lp += logits[order[i]] - log_sum_exp(&rest);
    }
    Ok(lp.min(0.0))
}

/// Sequential softmax sampling without replacement.
pub fn sample_from_logits<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> Result<ClassRanking> {
    let c = logits.len();
    if c == 0 {
        return Err(Error::invalid("sample_ranking", "no classes"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite {
            context: "policy logits".into(),
        });
    }
    let mut remaining: Vec<usize> = (0..c).collect();
    let mut order = Vec::with_capacity(c);
    let mut log_prob = 0.0;
    while remaining.len() > 1 {
        let vals: Vec<f64> = remaining.iter().map(|&k| logits[k]).collect();
        let lse = log_sum_exp(&vals);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = remaining.len() - 1;
        for (i, v) in vals.iter().enumerate() {
            acc += (v - lse).exp();
            if u < acc {
                pick = i;
                break;
            }
        }
        log_prob += vals[pick] - lse;
        order.push(remaining.remove(pick));
    }
    order.push(remaining[0]);
    Ok(ClassRanking {
        order,
        log_prob: log_prob.min(0.0),
        logits: logits.to_vec(),
    })
}

/// Uniformly random permutation with its log-probability under equal logits.
pub fn uniform_ranking<R: Rng + ?Sized>(classes: usize, rng: &mut R) -> Result<ClassRanking> {
    sample_from_logits(&vec![0.0; classes], rng)
}

/// Records the Plackett-Luce log-probability of `order` given `logits: [C]`.
pub fn log_prob_graph(g: &mut Graph, logits: Var, order: &[usize]) -> Result<Var> {
    check_permutation(order, g.value(logits).len())?;
    let chosen = g.gather(logits, order)?;
    let chosen = g.sum(chosen);
    let mut lses = Vec::with_capacity(order.len());
    for i in 0..order.len() {
        let rest = g.gather(logits, &order[i..])?;
        lses.push(g.log_sum_exp(rest));
    }
    let lses = g.concat(&lses, 0)?;
    let norm = g.sum(lses);
    g.sub(chosen, norm)
}
