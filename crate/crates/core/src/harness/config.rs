use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyConfig, StateEncoder};
use crate::segenv::{EnvConfig, PasteHalf};
use crate::skfen::SkfenConfig;
use crate::statecodec::GmvaeConfig;

/// Who picks the class ranking each step.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SchedulerKind {
    /// Learned policy over GM-VAE + SKFEN key features.
    Heuscm,
    /// Learned policy, raw state linearly projected into SKFEN.
    HeuscmNoEncoder,
    /// Learned policy, SKFEN replaced by the identity.
    HeuscmNoSkfen,
    /// Learned policy with α forced to 0.
    HeuscmAlpha0,
    /// Uniform random permutation each step.
    Random,
    /// Descending current accuracy.
    EasyToHard,
    /// Ascending current accuracy.
    HardOnly,
    FixedOrder(Vec<usize>),
}

impl SchedulerKind {
    pub fn is_learned(&self) -> bool {
        matches!(
            self,
            SchedulerKind::Heuscm | SchedulerKind::HeuscmNoEncoder | SchedulerKind::HeuscmNoSkfen | SchedulerKind::HeuscmAlpha0
        )
    }

    pub fn encoder(&self) -> StateEncoder {
        match self {
            SchedulerKind::HeuscmNoEncoder => StateEncoder::Projection,
            _ => StateEncoder::Gmvae,
        }
    }

    pub fn uses_skfen(&self) -> bool {
        !matches!(self, SchedulerKind::HeuscmNoSkfen)
    }

    /// Whether the GM-VAE is pretrained at the end of warmup.
    pub fn pretrains(&self) -> bool {
        self.is_learned() && self.encoder() == StateEncoder::Gmvae
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedulerKind::Heuscm => f.write_str("heuscm"),
            SchedulerKind::HeuscmNoEncoder => f.write_str("heuscm-no-encoder"),
            SchedulerKind::HeuscmNoSkfen => f.write_str("heuscm-no-skfen"),
            SchedulerKind::HeuscmAlpha0 => f.write_str("heuscm-alpha0"),
            SchedulerKind::Random => f.write_str("random"),
            SchedulerKind::EasyToHard => f.write_str("easy_to_hard"),
            SchedulerKind::HardOnly => f.write_str("hard_only"),
            SchedulerKind::FixedOrder(o) => {
                let parts: Vec<String> = o.iter().map(usize::to_string).collect();
                write!(f, "fixed_order:{}", parts.join("-"))
            }
        }
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "heuscm" => SchedulerKind::Heuscm,
            "heuscm-no-encoder" => SchedulerKind::HeuscmNoEncoder,
            "heuscm-no-skfen" => SchedulerKind::HeuscmNoSkfen,
            "heuscm-alpha0" => SchedulerKind::HeuscmAlpha0,
            "random" => SchedulerKind::Random,
            "easy_to_hard" => SchedulerKind::EasyToHard,
            "hard_only" => SchedulerKind::HardOnly,
            other => {
                let Some(list) = other.strip_prefix("fixed_order:") else {
                    return Err(Error::Config(format!("unknown scheduler `{other}`")));
                };
                let order = list
                    .split('-')
                    .map(|p| p.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Config(format!("scheduler `{other}`: {e}")))?;
                SchedulerKind::FixedOrder(order)
            }
        })
    }
}

impl TryFrom<String> for SchedulerKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SchedulerKind> for String {
    fn from(k: SchedulerKind) -> String {
        k.to_string()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnerConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    /// Weight of the source cross-entropy.
    pub lambda_source: f64,
    /// Weight of the mixed-image cross-entropy.
    pub lambda_mixed: f64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            learning_rate: 0.05,
            lambda_source: 1.0,
            lambda_mixed: 1.0,
        }
    }
}

/// Full run configuration. Top-level keys first, then one table per module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Total environment steps `T`, warmup included.
    pub total_steps: usize,
    /// Warmup steps `W` with random rankings.
    pub warmup_steps: usize,
    /// Environment steps between agent updates `U`.
    pub update_period: usize,
    /// Agent iterations per update.
    pub agent_iterations: usize,
    /// States per reconstruction fine-tuning batch.
    pub recon_batch: usize,
    /// Reward discriminability weight `lambda`.
    pub reward_lambda: f64,
    pub paste_half: PasteHalf,
    pub scheduler: SchedulerKind,
    /// Held-out scenes for the final evaluation.
    pub eval_scenes: usize,
    pub env: EnvConfig,
    pub learner: LearnerConfig,
    pub skfen: SkfenConfig,
    pub gmvae: GmvaeConfig,
    pub policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 2000,
            warmup_steps: 200,
            update_period: 10,
            agent_iterations: 4,
            recon_batch: 32,
            reward_lambda: 1.0,
            paste_half: PasteHalf::Low,
            scheduler: SchedulerKind::Heuscm,
            eval_scenes: 32,
            env: EnvConfig::default(),
            learner: LearnerConfig::default(),
            skfen: SkfenConfig::default(),
            gmvae: GmvaeConfig::default(),
            policy: PolicyConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps < self.warmup_steps {
            return bad(format!("total_steps {} < warmup_steps {}", self.total_steps, self.warmup_steps));
        }
        if self.update_period == 0 || self.agent_iterations == 0 || self.recon_batch == 0 || self.eval_scenes == 0 {
            return bad("update_period, agent_iterations, recon_batch, eval_scenes must be >= 1".into());
        }
        if !(self.reward_lambda >= 0.0) {
            return bad(format!("reward_lambda {}", self.reward_lambda));
        }
        let l = &self.learner;
        if !(l.temperature > 0.0) || !(l.learning_rate > 0.0) || !(l.lambda_source >= 0.0) || !(l.lambda_mixed >= 0.0) {
            return bad("learner rates and temperature must be positive, loss weights >= 0".into());
        }
        if let SchedulerKind::FixedOrder(o) = &self.scheduler {
            crate::policy::ranking::check_permutation(o, self.env.classes).map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.skfen.latent_dim() == 0 {
            return bad("empty latent".into());
        }
        self.env.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.skfen.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.gmvae.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.policy.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Effective fairness exponent after the scheduler override.
    pub fn alpha(&self) -> f64 {
        if self.scheduler == SchedulerKind::HeuscmAlpha0 {
            0.0
        } else {
            self.policy.alpha
        }
    }
}
