use serde::{Deserialize, Serialize};

use super::mixing::MixedPair;
use super::scene::{FeatureMap, LabelMap, Scene};
use crate::error::{Error, Result};
use crate::par;

/// Prototype classifier standing in for the segmentation network.
///
/// Class scores at a pixel are `-||f - p_c||^2 / tau`; the prediction is
/// the argmax (lowest index on ties) and probabilities are their softmax.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyLearner {
    pub classes: usize,
    pub feature_dim: usize,
    pub temperature: f64,
    /// Row-major `C x F`.
    pub prototypes: Vec<f64>,
}

/// Output of one SegLoss evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegLossReport {
    pub total: f64,
    pub source_ce: f64,
    pub mixed_ce: f64,
    /// Mean source-term cross-entropy over pixels labelled `c`; `None` when
    /// the class had no source pixels.
    pub source_ce_per_class: Vec<Option<f64>>,
}

/// Per-class mean accuracy on held-out target scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `None` for classes with no pixels in the held-out set.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    pub std: f64,
}

struct CeAccum {
    sum: f64,
    pixels: usize,
    per_class_sum: Vec<f64>,
    per_class_count: Vec<usize>,
}

impl ToyLearner {
    pub fn new(classes: usize, feature_dim: usize, temperature: f64) -> Result<Self> {
        if classes == 0 || feature_dim == 0 {
            return Err(Error::invalid("learner", "classes and feature_dim must be positive"));
        }
        if !(temperature > 0.0) {
            return Err(Error::invalid("learner", format!("temperature {temperature}")));
        }
        Ok(Self {
            classes,
            feature_dim,
            temperature,
            prototypes: vec![0.0; classes * feature_dim],
        })
    }

    pub fn prototype(&self, c: usize) -> &[f64] {
        &self.prototypes[c * self.feature_dim..(c + 1) * self.feature_dim]
    }

    pub fn prototype_norm(&self, c: usize) -> f64 {
        self.prototype(c).iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scores_into(&self, feature: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let d: f64 = self
                .prototype(c)
                .iter()
                .zip(feature)
                .map(|(p, f)| (f - p) * (f - p))
                .sum();
            *o = -d / self.temperature;
        }
    }

    /// Softmax of the class scores.
    pub fn probs(&self, feature: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0; self.classes];
        self.scores_into(feature, &mut s);
        softmax_in_place(&mut s);
        s
    }

    pub fn predict(&self, feature: &[f64]) -> usize {
        let mut s = vec![0.0; self.classes];
        self.scores_into(feature, &mut s);
        argmax(&s)
    }

    pub fn predict_map(&self, features: &FeatureMap) -> LabelMap {
        let mut f = vec![0.0; features.channels];
        let data = (0..features.pixels())
            .map(|p| {
                features.pixel_into(p, &mut f);
                self.predict(&f)
            })
            .collect();
        LabelMap {
            height: features.height,
            width: features.width,
            data,
        }
    }

    fn ce_accumulate(&self, features: &FeatureMap, labels: &LabelMap, weight: f64, grad: &mut [f64], acc: &mut CeAccum) {
        let fd = self.feature_dim;
        let mut f = vec![0.0; fd];
        let mut q = vec![0.0; self.classes];
        for p in 0..labels.pixels() {
            features.pixel_into(p, &mut f);
            self.scores_into(&f, &mut q);
            let y = labels.data[p];
            let lse = crate::diffcore::log_sum_exp(&q);
            let ce = lse - q[y];
            acc.sum += ce;
            acc.pixels += 1;
            acc.per_class_sum[y] += ce;
            acc.per_class_count[y] += 1;
            // dCE/dp_c = (q_c - [c == y]) * 2 (f - p_c) / tau
            for c in 0..self.classes {
                let coeff = ((q[c] - lse).exp() - if c == y { 1.0 } else { 0.0 }) * 2.0
                    / self.temperature
                    * weight;
                let proto = &self.prototypes[c * fd..(c + 1) * fd];
                for k in 0..fd {
                    grad[c * fd + k] += coeff * (f[k] - proto[k]);
                }
            }
        }
    }

    /// SegLoss averaged over the batch, and its gradient with respect to the
    /// prototypes. Each cross-entropy is a mean over pixels.
    pub fn seg_loss(&self, batch: &[(&Scene, &MixedPair)], lambda_source: f64, lambda_mixed: f64) -> Result<(SegLossReport, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::invalid("seg_loss", "empty batch"));
        }
        if !(lambda_source >= 0.0) || !(lambda_mixed >= 0.0) {
            return Err(Error::invalid("seg_loss", "loss coefficients must be nonnegative"));
        }
        let nb = batch.len() as f64;
        let mut grad = vec![0.0; self.prototypes.len()];
        let mut source_ce = 0.0;
        let mut mixed_ce = 0.0;
        let mut per_sum = vec![0.0; self.classes];
        let mut per_count = vec![0usize; self.classes];
        for (scene, mixed) in batch {
            let px = scene.source_labels.pixels() as f64;
            let mut src = CeAccum {
                sum: 0.0,
                pixels: 0,
                per_class_sum: vec![0.0; self.classes],
                per_class_count: vec![0; self.classes],
            };
            self.ce_accumulate(&scene.source_features, &scene.source_labels, lambda_source / (px * nb), &mut grad, &mut src);
            source_ce += src.sum / src.pixels as f64 / nb;
            for c in 0..self.classes {
                per_sum[c] += src.per_class_sum[c];
                per_count[c] += src.per_class_count[c];
            }
            let mpx = mixed.labels.pixels() as f64;
            let mut mix = CeAccum {
                sum: 0.0,
                pixels: 0,
                per_class_sum: vec![0.0; self.classes],
                per_class_count: vec![0; self.classes],
            };
            if lambda_mixed > 0.0 {
                self.ce_accumulate(&mixed.features, &mixed.labels, lambda_mixed / (mpx * nb), &mut grad, &mut mix);
                mixed_ce += mix.sum / mix.pixels as f64 / nb;
            }
        }
        let per_class = per_sum
            .iter()
            .zip(&per_count)
            .map(|(s, &n)| (n > 0).then(|| s / n as f64))
            .collect();
        let report = SegLossReport {
            total: lambda_source * source_ce + lambda_mixed * mixed_ce,
            source_ce,
            mixed_ce,
            source_ce_per_class: per_class,
        };
        Ok((report, grad))
    }

    /// Evaluates SegLoss and takes one gradient step on the prototypes.
    pub fn seg_loss_and_update(&mut self, batch: &[(&Scene, &MixedPair)], lambda_source: f64, lambda_mixed: f64, lr: f64) -> Result<SegLossReport> {
        if !(lr > 0.0) {
            return Err(Error::invalid("seg_loss", format!("learning rate {lr}")));
        }
        let (report, grad) = self.seg_loss(batch, lambda_source, lambda_mixed)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite {
                context: "segmentation loss".into(),
            });
        }
        for (p, g) in self.prototypes.iter_mut().zip(&grad) {
            *p -= lr * g;
        }
        Ok(report)
    }

    /// Pixel accuracy per class on the hidden target labels.
    pub fn evaluate(&self, held_out: &[Scene]) -> Result<EvalReport> {
        if held_out.is_empty() {
            return Err(Error::invalid("evaluate", "empty held-out set"));
        }
        let c = self.classes;
        let counts = par::map(held_out, |scene| {
            let pred = self.predict_map(&scene.target_features);
            let mut correct = vec![0usize; c];
            let mut total = vec![0usize; c];
            for (p, &y) in pred.data.iter().zip(&scene.target_labels.data) {
                total[y] += 1;
                if *p == y {
                    correct[y] += 1;
                }
            }
            (correct, total)
        });
        let mut correct = vec![0usize; c];
        let mut total = vec![0usize; c];
        for (cc, tt) in counts {
            for k in 0..c {
                correct[k] += cc[k];
                total[k] += tt[k];
            }
        }
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|k| (total[k] > 0).then(|| correct[k] as f64 / total[k] as f64))
            .collect();
        let (mean, std) = mean_std(per_class.iter().flatten().copied());
        Ok(EvalReport { per_class, mean, std })
    }
}

/// Population mean and standard deviation.
pub fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    xs.iter_mut().for_each(|x| *x /= z);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segenv::mixing::{build_mix_mask, mix_pair, PasteHalf};
    use crate::segenv::scene::{EnvConfig, SceneGenerator};

    fn noiseless() -> SceneGenerator {
        SceneGenerator::new(EnvConfig {
            severity: 0.0,
            noise: 0.0,
            domain_shift: 0.0,
            ..EnvConfig::default()
        })
        .unwrap()
    }

    fn oracle(gen: &SceneGenerator, temperature: f64) -> ToyLearner {
        let mut l = ToyLearner::new(gen.classes(), gen.cfg.feature_dim, temperature).unwrap();
        l.prototypes = gen.source_means.concat();
        l
    }

    fn pair(scene: &Scene, learner: &ToyLearner) -> MixedPair {
        let order: Vec<usize> = (0..learner.classes).collect();
        let mask = build_mix_mask(&order, &scene.source_labels, learner.classes, PasteHalf::Low).unwrap();
        mix_pair(scene, &mask, learner)
    }

    #[test]
    fn oracle_learner_is_perfect_on_noiseless_scenes() {
        let gen = noiseless();
        let l = oracle(&gen, 1.0);
        let report = l.evaluate(&gen.generate_set(1, 4)).unwrap();
        for a in report.per_class.iter().flatten() {
            assert_eq!(*a, 1.0);
        }
    }

    #[test]
    fn equal_prototypes_predict_class_zero() {
        let gen = SceneGenerator::new(EnvConfig::default()).unwrap();
        let l = ToyLearner::new(8, 6, 1.0).unwrap();
        let report = l.evaluate(&gen.generate_set(2, 6)).unwrap();
        assert_eq!(report.per_class[0], Some(1.0));
        for a in report.per_class[1..].iter().flatten() {
            assert_eq!(*a, 0.0);
        }
    }

    #[test]
    fn equidistant_prototypes_give_log_c() {
        let gen = SceneGenerator::new(EnvConfig::default()).unwrap();
        let l = ToyLearner::new(8, 6, 1.0).unwrap();
        let scene = gen.generate_scene(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3));
        let mixed = pair(&scene, &l);
        let (rep, _) = l.seg_loss(&[(&scene, &mixed)], 1.0, 1.0).unwrap();
        let lc = (8f64).ln();
        assert!((rep.source_ce - lc).abs() < 1e-12);
        assert!((rep.mixed_ce - lc).abs() < 1e-12);
        assert!((rep.total - 2.0 * lc).abs() < 1e-12);
    }

    #[test]
    fn perfect_classifier_limit() {
        let gen = noiseless();
        let mut l = oracle(&gen, 1e-3);
        let scene = gen.generate_scene(&mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(5));
        let mixed = pair(&scene, &l);
        let before = l.prototypes.clone();
        let rep = l.seg_loss_and_update(&[(&scene, &mixed)], 1.0, 1.0, 0.1).unwrap();
        assert!(rep.total < 1e-12, "{}", rep.total);
        let moved = l.prototypes.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(moved < 1e-12);
    }

    #[test]
    fn source_only_loss_ignores_mixed_pair() {
        let gen = SceneGenerator::new(EnvConfig::default()).unwrap();
        let mut l = ToyLearner::new(8, 6, 1.0).unwrap();
        l.prototypes = gen.target_means.concat();
        let mut r = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        let scene = gen.generate_scene(&mut r);
        let mixed = pair(&scene, &l);
        let mut other = mixed.clone();
        other.features.data.iter_mut().for_each(|v| *v += 1.0);
        other.labels.data.iter_mut().for_each(|v| *v = (*v + 1) % 8);
        let (a, _) = l.seg_loss(&[(&scene, &mixed)], 1.0, 0.0).unwrap();
        let (b, _) = l.seg_loss(&[(&scene, &other)], 1.0, 0.0).unwrap();
        assert_eq!(a.total, b.total);
        assert!(a.total >= 0.0);
    }

    #[test]
    fn empty_held_out_rejected() {
        let l = ToyLearner::new(3, 2, 1.0).unwrap();
        assert!(l.evaluate(&[]).is_err());
    }
}
