//! Key-feature distillation over the latent state.
//!
//! Pipeline: 1x1 fuse conv, depthwise 5x5 conv, 1x1 expansion to `n`
//! channels, channel shuffle, split into `G` groups, then per-group channel
//! max and mean maps, concatenated (all maxes first, then all means) and
//! fused back to `C_z` channels by a 3x3 conv with a residual connection to
//! the input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, DiffTensor, Graph, ParamSet, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkfenConfig {
    pub in_channels: usize,
    pub expanded_channels: usize,
    pub groups: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SkfenConfig {
    fn default() -> Self {
        Self {
            in_channels: 8,
            expanded_channels: 32,
            groups: 4,
            height: 4,
            width: 4,
        }
    }
}

impl SkfenConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.in_channels,
            self.expanded_channels,
            self.groups,
            self.height,
            self.width,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid("skfen", format!("all extents must be positive: {self:?}")));
        }
        if self.expanded_channels % self.groups != 0 {
            return Err(Error::invalid(
                "skfen",
                format!(
                    "{} groups do not divide {} expanded channels",
                    self.groups, self.expanded_channels
                ),
            ));
        }
        Ok(())
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    pub fn latent_dim(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn channels_per_group(&self) -> usize {
        self.expanded_channels / self.groups
    }
}

pub const FUSE_W: &str = "skfen.fuse.weight";
pub const FUSE_B: &str = "skfen.fuse.bias";
pub const DW_W: &str = "skfen.depthwise.weight";
pub const DW_B: &str = "skfen.depthwise.bias";
pub const EXPAND_W: &str = "skfen.expand.weight";
pub const EXPAND_B: &str = "skfen.expand.bias";
pub const FINAL_W: &str = "skfen.final.weight";
pub const FINAL_B: &str = "skfen.final.bias";

pub fn init_params<R: Rng + ?Sized>(cfg: &SkfenConfig, rng: &mut R) -> Result<ParamSet> {
    cfg.validate()?;
    let (cz, n, g) = (cfg.in_channels, cfg.expanded_channels, cfg.groups);
    let mut ps = ParamSet::new();
    ps.insert_normal(FUSE_W, &[cz, cz], (1.0 / cz as f64).sqrt(), rng)?;
    ps.insert_zeros(FUSE_B, &[cz])?;
    ps.insert_normal(DW_W, &[cz, 5, 5], 0.2, rng)?;
    ps.insert_zeros(DW_B, &[cz])?;
    ps.insert_normal(EXPAND_W, &[n, cz], (1.0 / cz as f64).sqrt(), rng)?;
    ps.insert_zeros(EXPAND_B, &[n])?;
    // Small final kernel: the block starts close to the identity.
    ps.insert_normal(FINAL_W, &[cz, 2 * g, 3, 3], 0.05 / (2 * g * 9) as f64, rng)?;
    ps.insert_zeros(FINAL_B, &[cz])?;
    Ok(ps)
}

/// Refined latent state, same `(C_z, H_z, W_z)` shape as the input.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyFeatures(pub DiffTensor);

impl KeyFeatures {
    pub fn flat(&self) -> &[f64] {
        self.0.values()
    }
}

/// Intermediate maps of one forward pass, exposed for inspection.
#[derive(Debug)]
pub struct SkfenTrace {
    pub expanded: Var,
    pub shuffled: Var,
    pub pooled: Var,
    pub output: Var,
}

fn stage(name: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Shape { op, detail } => Error::Shape {
            op: name,
            detail: format!("{op}: {detail}"),
        },
        other => other,
    }
}

/// Records the block on `g`. `z` must have shape `(C_z, H_z, W_z)`.
pub fn forward_traced(g: &mut Graph, z: Var, cfg: &SkfenConfig, p: &Bound) -> Result<SkfenTrace> {
    if g.shape(z) != cfg.latent_shape() {
        return Err(Error::shape(
            "skfen.input",
            format!("latent {:?}, expected {:?}", g.shape(z), cfg.latent_shape()),
        ));
    }
    let fused = g
        .conv2d_1x1(z, p.get(FUSE_W)?, p.get(FUSE_B)?)
        .map_err(stage("skfen.fuse"))?;
    let spatial = g
        .depthwise_conv2d_5x5(fused, p.get(DW_W)?, p.get(DW_B)?)
        .map_err(stage("skfen.depthwise"))?;
    let expanded = g
        .conv2d_1x1(spatial, p.get(EXPAND_W)?, p.get(EXPAND_B)?)
        .map_err(stage("skfen.expand"))?;
    if g.shape(expanded)[0] != cfg.expanded_channels {
        return Err(Error::shape(
            "skfen.expand",
            format!("{} channels, expected {}", g.shape(expanded)[0], cfg.expanded_channels),
        ));
    }
    let shuffled = g
        .channel_shuffle(expanded, cfg.groups)
        .map_err(stage("skfen.shuffle"))?;
    let maxes = g
        .channel_group_max(shuffled, cfg.groups)
        .map_err(stage("skfen.group_max"))?;
    let means = g
        .channel_group_avg(shuffled, cfg.groups)
        .map_err(stage("skfen.group_avg"))?;
    let pooled = g.concat_channels(&[maxes, means]).map_err(stage("skfen.concat"))?;
    let fusedout = g
        .conv2d_3x3(pooled, p.get(FINAL_W)?, p.get(FINAL_B)?)
        .map_err(stage("skfen.final"))?;
    let output = g.add(fusedout, z).map_err(stage("skfen.residual"))?;
    Ok(SkfenTrace {
        expanded,
        shuffled,
        pooled,
        output,
    })
}

pub fn forward(g: &mut Graph, z: Var, cfg: &SkfenConfig, p: &Bound) -> Result<Var> {
    Ok(forward_traced(g, z, cfg, p)?.output)
}

/// Untracked evaluation.
pub fn skfen_forward(z: &DiffTensor, cfg: &SkfenConfig, params: &ParamSet) -> Result<KeyFeatures> {
    let mut g = Graph::new();
    let bound = g.bind_frozen(params);
    let zv = g.constant(z.shape().to_vec(), z.values().to_vec())?;
    let out = forward(&mut g, zv, cfg, &bound)?;
    Ok(KeyFeatures(g.to_tensor(out)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_params(cfg: &SkfenConfig) -> ParamSet {
        let mut ps = init_params(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let paths: Vec<String> = ps.paths().map(str::to_string).collect();
        for p in paths {
            ps.get_mut(&p).unwrap().values_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        ps
    }

    fn latent(cfg: &SkfenConfig, seed: u64) -> DiffTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..cfg.latent_dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
        DiffTensor::new(cfg.latent_shape().to_vec(), v).unwrap()
    }

    #[test]
    fn zero_weights_give_identity() {
        let cfg = SkfenConfig::default();
        let z = latent(&cfg, 3);
        let out = skfen_forward(&z, &cfg, &zero_params(&cfg)).unwrap();
        assert_eq!(out.0.values(), z.values());
    }

    #[test]
    fn output_shape_matches_input() {
        for (cz, n, g, h, w) in [(8, 32, 4, 4, 4), (3, 6, 3, 2, 5), (1, 1, 1, 1, 1), (2, 8, 2, 3, 3)] {
            let cfg = SkfenConfig {
                in_channels: cz,
                expanded_channels: n,
                groups: g,
                height: h,
                width: w,
            };
            let ps = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let out = skfen_forward(&latent(&cfg, 2), &cfg, &ps).unwrap();
            assert_eq!(out.0.shape(), &[cz, h, w]);
        }
    }

    #[test]
    fn hand_set_grouping_example() {
        // One input channel, 1x1 spatial. Fuse and depthwise pass the value
        // through; expand maps it to [1, 2, 3, 4], which the 2-group shuffle
        // reorders to [1, 3, 2, 4].
        let cfg = SkfenConfig {
            in_channels: 1,
            expanded_channels: 4,
            groups: 2,
            height: 1,
            width: 1,
        };
        let mut ps = zero_params(&cfg);
        ps.get_mut(FUSE_W).unwrap().values_mut()[0] = 1.0;
        ps.get_mut(DW_W).unwrap().values_mut()[12] = 1.0;
        ps.get_mut(EXPAND_W)
            .unwrap()
            .values_mut()
            .copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new();
        let bound = g.bind_frozen(&ps);
        let z = g.constant(vec![1, 1, 1], vec![1.0]).unwrap();
        let tr = forward_traced(&mut g, z, &cfg, &bound).unwrap();
        assert_eq!(g.value(tr.expanded), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(g.value(tr.shuffled), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(g.value(tr.pooled), &[3.0, 4.0, 2.0, 3.0]);
    }

    #[test]
    fn groups_must_divide_expansion() {
        let cfg = SkfenConfig {
            expanded_channels: 30,
            ..SkfenConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn wrong_latent_shape_names_stage() {
        let cfg = SkfenConfig::default();
        let ps = init_params(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let z = DiffTensor::zeros(vec![4, 4, 4]).unwrap();
        let err = skfen_forward(&z, &cfg, &ps).unwrap_err().to_string();
        assert!(err.contains("skfen.input"), "{err}");

        let mut bad = ps.clone();
        let _ = bad.split_prefix(EXPAND_W);
        bad.insert(EXPAND_W, DiffTensor::zeros(vec![32, 5]).unwrap()).unwrap();
        let z = DiffTensor::zeros(cfg.latent_shape().to_vec()).unwrap();
        let err = skfen_forward(&z, &cfg, &bad).unwrap_err().to_string();
        assert!(err.contains("skfen.expand"), "{err}");
    }
}
