use serde::{Deserialize, Serialize};

use super::learner::ToyLearner;
use super::scene::{FeatureMap, LabelMap, Scene};
use crate::error::{Error, Result};

/// Which half of the per-image ranking is pasted from the source.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PasteHalf {
    /// Trailing `ceil(N/2)` classes of the ranking.
    #[default]
    Low,
    /// Leading `ceil(N/2)` classes.
    High,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixMask {
    pub height: usize,
    pub width: usize,
    /// 1 where the source pixel is pasted.
    pub h: Vec<u8>,
    /// Pasted classes, in ranking order.
    pub c_low: Vec<usize>,
    /// Ranking restricted to the classes present in the source labels.
    pub ranked_present: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedPair {
    pub features: FeatureMap,
    pub labels: LabelMap,
    pub pseudo: LabelMap,
}

pub fn build_mix_mask(order: &[usize], y_s: &LabelMap, classes: usize, half: PasteHalf) -> Result<MixMask> {
    if y_s.data.is_empty() {
        return Err(Error::invalid("build_mix_mask", "empty label map"));
    }
    let mut seen = vec![false; classes];
    for &c in order {
        if c >= classes || seen[c] {
            return Err(Error::invalid("build_mix_mask", format!("ranking {order:?} is not a permutation of {classes} classes")));
        }
        seen[c] = true;
    }
    if order.len() != classes {
        return Err(Error::invalid("build_mix_mask", format!("ranking covers {} of {classes} classes", order.len())));
    }
    if let Some(&bad) = y_s.data.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid("build_mix_mask", format!("label {bad} out of range")));
    }
    let present = y_s.present(classes);
    let ranked_present: Vec<usize> = order.iter().copied().filter(|c| present.binary_search(c).is_ok()).collect();
    let n = ranked_present.len();
    let c_low: Vec<usize> = match half {
        PasteHalf::Low => ranked_present[n / 2..].to_vec(),
        PasteHalf::High => ranked_present[..n - n / 2].to_vec(),
    };
    let mut selected = vec![false; classes];
    for &c in &c_low {
        selected[c] = true;
    }
    let h = y_s.data.iter().map(|&l| u8::from(selected[l])).collect();
    Ok(MixMask {
        height: y_s.height,
        width: y_s.width,
        h,
        c_low,
        ranked_present,
    })
}

/// Pastes masked source pixels over the target; the rest of the label map
/// is the learner's pseudo-labels on the target.
pub fn mix_pair(scene: &Scene, mask: &MixMask, learner: &ToyLearner) -> MixedPair {
    let pseudo = learner.predict_map(&scene.target_features);
    let hw = mask.h.len();
    let mut features = scene.target_features.clone();
    for k in 0..features.channels {
        for p in 0..hw {
            if mask.h[p] == 1 {
                features.data[k * hw + p] = scene.source_features.data[k * hw + p];
            }
        }
    }
    let data = (0..hw)
        .map(|p| if mask.h[p] == 1 { scene.source_labels.data[p] } else { pseudo.data[p] })
        .collect();
    MixedPair {
        features,
        labels: LabelMap {
            height: mask.height,
            width: mask.width,
            data,
        },
        pseudo,
    }
}
