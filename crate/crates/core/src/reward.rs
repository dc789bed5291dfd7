//! Per-class reward from source and target class prototypes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segenv::{FeatureMap, LabelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    pub domain: Domain,
    pub feature_dim: usize,
    /// Mean feature per class; `None` when the class has no pixels.
    pub prototypes: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
}

impl PrototypeTable {
    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut out = self.clone();
        for v in out.prototypes.iter_mut().flatten() {
            v.iter_mut().for_each(|x| *x *= k);
        }
        out
    }
}

/// Accumulates prototypes over several maps, e.g. all scenes of one step.
pub fn compute_prototypes_multi(maps: &[(&FeatureMap, &LabelMap)], classes: usize, domain: Domain) -> Result<PrototypeTable> {
    let f = maps.first().map(|(fm, _)| fm.channels).unwrap_or(0);
    let mut sums = vec![vec![0.0; f]; classes];
    let mut counts = vec![0usize; classes];
    for (fm, lm) in maps {
        if fm.channels != f || fm.height != lm.height || fm.width != lm.width || fm.data.len() != f * lm.pixels() {
            return Err(Error::shape(
                "compute_prototypes",
                format!("features {}x{}x{} vs labels {}x{}", fm.channels, fm.height, fm.width, lm.height, lm.width),
            ));
        }
        let hw = lm.pixels();
        for (p, &c) in lm.data.iter().enumerate() {
            if c >= classes {
                return Err(Error::invalid("compute_prototypes", format!("label {c} out of range")));
            }
            counts[c] += 1;
            for (k, s) in sums[c].iter_mut().enumerate() {
                *s += fm.data[k * hw + p];
            }
        }
    }
    let prototypes = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    Ok(PrototypeTable {
        domain,
        feature_dim: f,
        prototypes,
        counts,
    })
}

pub fn compute_prototypes(features: &FeatureMap, labels: &LabelMap, classes: usize, domain: Domain) -> Result<PrototypeTable> {
    compute_prototypes_multi(&[(features, labels)], classes, domain)
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub r: Vec<f64>,
    pub lambda: f64,
    /// Classes whose entry is the absent-class default.
    pub defined: Vec<bool>,
}

/// Range every defined reward lies in.
pub fn reward_bounds(classes: usize, lambda: f64) -> (f64, f64) {
    (-1.0, 1.0 + 2.0 * lambda * classes.saturating_sub(1) as f64)
}

/// Transferability `cos(A_c^S, A_c^T)` plus `lambda` times the
/// discriminability `sum_{k != c} (1 - cos(A_c^T, A_k^T))` over classes
/// present in the target table.
pub fn class_reward(src: &PrototypeTable, tgt: &PrototypeTable, lambda: f64) -> Result<RewardVector> {
    if src.classes() != tgt.classes() {
        return Err(Error::shape("class_reward", format!("{} vs {} classes", src.classes(), tgt.classes())));
    }
    if src.feature_dim != tgt.feature_dim {
        return Err(Error::shape("class_reward", format!("feature dims {} vs {}", src.feature_dim, tgt.feature_dim)));
    }
    if !(lambda >= 0.0) {
        return Err(Error::invalid("class_reward", format!("lambda {lambda}")));
    }
    let c = src.classes();
    let mut r = vec![0.0; c];
    let mut defined = vec![false; c];
    for i in 0..c {
        let (Some(a_s), Some(a_t)) = (&src.prototypes[i], &tgt.prototypes[i]) else {
            continue;
        };
        let mut disc = 0.0;
        for (k, other) in tgt.prototypes.iter().enumerate() {
            if let (true, Some(a_k)) = (k != i, other) {
                disc += 1.0 - cosine(a_t, a_k);
            }
        }
        r[i] = cosine(a_s, a_t) + lambda * disc;
        defined[i] = true;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "class reward".into(),
        });
    }
    Ok(RewardVector { r, lambda, defined })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(domain: Domain, protos: Vec<Option<Vec<f64>>>) -> PrototypeTable {
        PrototypeTable {
            domain,
            feature_dim: protos.iter().flatten().next().map_or(0, Vec::len),
            counts: protos.iter().map(|p| usize::from(p.is_some())).collect(),
            prototypes: protos,
        }
    }

    #[test]
    fn two_pixel_mean() {
        let fm = FeatureMap {
            channels: 2,
            height: 1,
            width: 2,
            data: vec![1.0, 0.0, 0.0, 1.0],
        };
        let lm = LabelMap {
            height: 1,
            width: 2,
            data: vec![1, 1],
        };
        let t = compute_prototypes(&fm, &lm, 3, Domain::Source).unwrap();
        assert_eq!(t.prototypes[1], Some(vec![0.5, 0.5]));
        assert_eq!(t.prototypes[0], None);
        assert_eq!(t.counts, vec![0, 2, 0]);
    }

    #[test]
    fn orthogonal_targets_give_three() {
        let e = |i: usize| {
            let mut v = vec![0.0; 3];
            v[i] = 1.0;
            Some(v)
        };
        let t = table(Domain::Target, vec![e(0), e(1), e(2)]);
        let s = table(Domain::Source, vec![e(0), e(1), e(2)]);
        let r = class_reward(&s, &t, 1.0).unwrap();
        assert_eq!(r.r, vec![3.0, 3.0, 3.0]);
    }

    #[test]
    fn orthogonal_transfer_identical_targets_give_zero() {
        let t = table(Domain::Target, vec![Some(vec![1.0, 0.0]); 2]);
        let s = table(Domain::Source, vec![Some(vec![0.0, 1.0]); 2]);
        let r = class_reward(&s, &t, 1.0).unwrap();
        assert_eq!(r.r, vec![0.0, 0.0]);
    }

    #[test]
    fn absent_and_zero_norm_classes() {
        let s = table(Domain::Source, vec![Some(vec![1.0, 0.0]), None, Some(vec![0.0, 0.0])]);
        let t = table(Domain::Target, vec![Some(vec![1.0, 0.0]), Some(vec![0.0, 1.0]), Some(vec![1.0, 1.0])]);
        let r = class_reward(&s, &t, 0.5).unwrap();
        assert_eq!(r.r[1], 0.0);
        assert!(!r.defined[1]);
        assert!(r.r[2].is_finite());
    }

    #[test]
    fn scale_invariance() {
        let s = table(Domain::Source, vec![Some(vec![1.0, 2.0]), Some(vec![-1.0, 0.5])]);
        let t = table(Domain::Target, vec![Some(vec![0.3, 2.0]), Some(vec![-2.0, 0.1])]);
        let a = class_reward(&s, &t, 1.0).unwrap();
        let b = class_reward(&s.scaled(2.0), &t.scaled(2.0), 1.0).unwrap();
        for (x, y) in a.r.iter().zip(&b.r) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
