use serde::{Deserialize, Serialize};

use super::learner::ToyLearner;
use super::scene::Scene;
use crate::error::{Error, Result};

/// Per-class learning status, in the order the state vector uses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub loss: f64,
    pub accuracy: f64,
    pub prototype_norm: f64,
    pub cosine: f64,
    pub entropy: f64,
    pub fraction: f64,
}

impl ClassStats {
    pub const FIELDS: [&'static str; 6] = ["loss", "accuracy", "prototype_norm", "cosine", "entropy", "fraction"];

    /// Values for a class that has never been observed.
    pub fn untrained(classes: usize) -> Self {
        let lc = (classes as f64).ln();
        Self {
            loss: lc,
            accuracy: 0.0,
            prototype_norm: 0.0,
            cosine: 0.0,
            entropy: lc,
            fraction: 0.0,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.loss, self.accuracy, self.prototype_norm, self.cosine, self.entropy, self.fraction]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvStats {
    pub classes: Vec<ClassStats>,
}

/// Per-class quantities measured during one environment step. `None` means
/// the class was not observed this step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepObservation {
    pub loss: Vec<Option<f64>>,
    pub accuracy: Vec<Option<f64>>,
    pub cosine: Vec<Option<f64>>,
    pub entropy: Vec<Option<f64>>,
}

/// Most recent observation of every statistic, per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecentStats {
    pub loss: Vec<Option<f64>>,
    pub accuracy: Vec<Option<f64>>,
    pub cosine: Vec<Option<f64>>,
    pub entropy: Vec<Option<f64>>,
}

impl RecentStats {
    pub fn new(classes: usize) -> Self {
        Self {
            loss: vec![None; classes],
            accuracy: vec![None; classes],
            cosine: vec![None; classes],
            entropy: vec![None; classes],
        }
    }

    pub fn observe(&mut self, obs: &StepObservation) {
        fn merge(dst: &mut [Option<f64>], src: &[Option<f64>]) {
            for (d, s) in dst.iter_mut().zip(src) {
                if s.is_some() {
                    *d = *s;
                }
            }
        }
        merge(&mut self.loss, &obs.loss);
        merge(&mut self.accuracy, &obs.accuracy);
        merge(&mut self.cosine, &obs.cosine);
        merge(&mut self.entropy, &obs.entropy);
    }
}

/// How often each class was pasted from the source.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExposureCounter {
    pub counts: Vec<u64>,
    pub events: u64,
}

impl ExposureCounter {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![0; classes],
            events: 0,
        }
    }

    pub fn record(&mut self, c_low: &[usize]) {
        self.events += 1;
        for &c in c_low {
            self.counts[c] += 1;
        }
    }

    pub fn fraction(&self, c: usize) -> f64 {
        if self.events == 0 {
            0.0
        } else {
            self.counts[c] as f64 / self.events as f64
        }
    }
}

pub fn softmax_entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Confidence and entropy over target pixels, grouped by predicted class.
pub fn target_observation(learner: &ToyLearner, scenes: &[Scene]) -> (Vec<Option<f64>>, Vec<Option<f64>>) {
    let c = learner.classes;
    let mut conf = vec![0.0; c];
    let mut ent = vec![0.0; c];
    let mut count = vec![0usize; c];
    let mut f = vec![0.0; learner.feature_dim];
    for scene in scenes {
        let fm = &scene.target_features;
        for p in 0..fm.pixels() {
            fm.pixel_into(p, &mut f);
            let q = learner.probs(&f);
            let k = super::learner::argmax(&q);
            conf[k] += q[k];
            ent[k] += softmax_entropy(&q);
            count[k] += 1;
        }
    }
    let mean = |s: &[f64]| {
        s.iter()
            .zip(&count)
            .map(|(v, &n)| (n > 0).then(|| v / n as f64))
            .collect::<Vec<_>>()
    };
    (mean(&conf), mean(&ent))
}

pub fn snapshot_stats(learner: &ToyLearner, recent: &RecentStats, exposure: &ExposureCounter) -> Result<EnvStats> {
    let c = learner.classes;
    if recent.loss.len() != c || exposure.counts.len() != c {
        return Err(Error::invalid("snapshot_stats", "statistics do not cover every class"));
    }
    let d = ClassStats::untrained(c);
    let classes = (0..c)
        .map(|k| ClassStats {
            loss: recent.loss[k].unwrap_or(d.loss),
            accuracy: recent.accuracy[k].unwrap_or(d.accuracy),
            prototype_norm: learner.prototype_norm(k),
            cosine: recent.cosine[k].unwrap_or(d.cosine),
            entropy: recent.entropy[k].unwrap_or(d.entropy),
            fraction: exposure.fraction(k),
        })
        .collect();
    Ok(EnvStats { classes })
}
