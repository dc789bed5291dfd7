use rand::Rng;
use serde::{Deserialize, Serialize};

use super::buffer::TransitionRecord;
use super::critic::{td_advantage, CriticBank, CriticReport};
use super::fairness::FairnessConfig;
use super::ranking::{log_prob_graph, sample_from_logits, ClassRanking};
use crate::diffcore::{Bound, Gradients, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::skfen::{self, SkfenConfig};
use crate::statecodec::{self, HighDimState};

pub const POLICY_W: &str = "policy.weight";
pub const POLICY_B: &str = "policy.bias";
pub const PROJ_W: &str = "proj.weight";
pub const PROJ_B: &str = "proj.bias";

/// How the raw state reaches SKFEN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateEncoder {
    /// Fine-tuned clone of the pretrained GM-VAE encoder.
    Gmvae,
    /// Trainable linear projection, no pretraining.
    Projection,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub gamma: f64,
    pub policy_learning_rate: f64,
    pub critic_learning_rate: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub buffer_capacity: usize,
    pub state_capacity: usize,
    /// Joint gradient norm cap for the policy, SKFEN and encoder step, and
    /// separately for the reconstruction step.
    pub max_grad_norm: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            epsilon: 1e-3,
            gamma: 0.95,
            policy_learning_rate: 0.01,
            critic_learning_rate: 0.01,
            weight_decay: 1e-4,
            batch: 32,
            buffer_capacity: 2048,
            state_capacity: 4096,
            max_grad_norm: 1.0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.policy_learning_rate > 0.0) || !(self.critic_learning_rate > 0.0) {
            return Err(Error::invalid("policy", "learning rates must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("policy", "weight decay must be >= 0"));
        }
        if self.batch == 0 || self.buffer_capacity == 0 || self.state_capacity == 0 {
            return Err(Error::invalid("policy", "batch and capacities must be positive"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::invalid("policy", format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::invalid("policy", format!("max_grad_norm {}", self.max_grad_norm)));
        }
        if !(self.alpha >= 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::invalid("policy", "alpha must be >= 0 and epsilon > 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub surrogate: f64,
    pub policy_grad_norm: f64,
    pub mean_advantage: f64,
    /// Fairness weights averaged over the batch, per class.
    pub mean_weights: Vec<f64>,
    pub critic: CriticReport,
    pub recon: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AgentView {
    pub latent: Vec<f64>,
    pub key: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Scheduler networks: encoder (or projection), SKFEN, policy head, critics.
#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub classes: usize,
    pub state_dim: usize,
    pub latent: SkfenConfig,
    pub encoder_kind: StateEncoder,
    pub use_skfen: bool,
    pub policy: ParamSet,
    pub skfen: ParamSet,
    pub encoder: ParamSet,
    /// Frozen decoder for reconstruction fine-tuning.
    pub decoder: Option<ParamSet>,
    pub critics: CriticBank,
    pub fairness: FairnessConfig,
    pub cfg: PolicyConfig,
}

/// Plackett-Luce draw from the linear policy head over flattened key features.
pub fn sample_ranking<R: Rng + ?Sized>(key: &[f64], policy: &ParamSet, rng: &mut R) -> Result<ClassRanking> {
    let w = policy.get(POLICY_W)?;
    let b = policy.get(POLICY_B)?;
    let c = b.len();
    if w.shape() != [key.len(), c] {
        return Err(Error::shape("sample_ranking", format!("key of length {} vs head {:?}", key.len(), w.shape())));
    }
    let logits: Vec<f64> = (0..c)
        .map(|j| b.values()[j] + key.iter().enumerate().map(|(i, x)| x * w.values()[i * c + j]).sum::<f64>())
        .collect();
    sample_from_logits(&logits, rng)
}

/// Rescales the gradients of `sets` so their joint norm is at most `cap`.
/// Returns the norm before clipping.
fn clip_joint(sets: &mut [&mut ParamSet], cap: f64) -> f64 {
    let norm = sets.iter().map(|p| p.grad_norm().powi(2)).sum::<f64>().sqrt();
    if norm > cap {
        sets.iter_mut().for_each(|p| p.scale_grads(cap / norm));
    }
    norm
}

fn sgd_if_any(p: &mut ParamSet, lr: f64, wd: f64) -> Result<()> {
    if p.is_empty() {
        Ok(())
    } else {
        p.sgd_step(lr, wd)
    }
}

impl Agent {
    /// `encoder` holds `enc.*` parameters for [`StateEncoder::Gmvae`]; it
    /// is ignored (and a projection initialised) for `Projection`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        classes: usize,
        state_dim: usize,
        latent: SkfenConfig,
        encoder_kind: StateEncoder,
        use_skfen: bool,
        encoder: Option<(ParamSet, ParamSet)>,
        fairness: FairnessConfig,
        cfg: PolicyConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        latent.validate()?;
        let d = latent.latent_dim();
        let (encoder, decoder) = match encoder_kind {
            StateEncoder::Gmvae => {
                let (e, dec) = encoder.ok_or_else(|| Error::invalid("agent", "GM-VAE encoder required"))?;
                (e, Some(dec))
            }
            StateEncoder::Projection => {
                let mut p = ParamSet::new();
                p.insert_normal(PROJ_W, &[state_dim, d], 1.0 / (state_dim as f64).sqrt(), rng)?;
                p.insert_zeros(PROJ_B, &[d])?;
                (p, None)
            }
        };
        let skfen = if use_skfen {
            skfen::init_params(&latent, rng)?
        } else {
            ParamSet::new()
        };
        let mut policy = ParamSet::new();
        policy.insert_normal(POLICY_W, &[d, classes], 0.01 / (d as f64).sqrt(), rng)?;
        policy.insert_zeros(POLICY_B, &[classes])?;
        let critics = CriticBank::new(classes, d, cfg.gamma, rng)?;
        Ok(Self {
            classes,
            state_dim,
            latent,
            encoder_kind,
            use_skfen,
            policy,
            skfen,
            encoder,
            decoder,
            critics,
            fairness,
            cfg,
        })
    }

    /// Latent state `[1, d]`: the encoder (or projection) output.
    pub fn latent_graph(&self, g: &mut Graph, state: &HighDimState, enc: &Bound) -> Result<Var> {
        if state.len() != self.state_dim {
            return Err(Error::shape("agent", format!("state of length {}, expected {}", state.len(), self.state_dim)));
        }
        let d = self.latent.latent_dim();
        let s = g.constant(vec![1, self.state_dim], state.values().to_vec())?;
        match self.encoder_kind {
            StateEncoder::Gmvae => statecodec::encode_graph(g, s, enc, d),
            StateEncoder::Projection => g.linear(s, enc.get(PROJ_W)?, enc.get(PROJ_B)?),
        }
    }

    /// Key features `[1, d]` from the latent state.
    pub fn distill_graph(&self, g: &mut Graph, z: Var, sk: &Bound) -> Result<Var> {
        if !self.use_skfen {
            return Ok(z);
        }
        let z = g.reshape(z, self.latent.latent_shape().to_vec())?;
        let out = skfen::forward(g, z, &self.latent, sk)?;
        g.reshape(out, vec![1, self.latent.latent_dim()])
    }

    pub fn key_graph(&self, g: &mut Graph, state: &HighDimState, enc: &Bound, sk: &Bound) -> Result<Var> {
        let z = self.latent_graph(g, state, enc)?;
        self.distill_graph(g, z, sk)
    }

    pub fn logits_graph(&self, g: &mut Graph, key: Var, pol: &Bound) -> Result<Var> {
        let l = g.linear(key, pol.get(POLICY_W)?, pol.get(POLICY_B)?)?;
        g.reshape(l, vec![self.classes])
    }

    /// Latent state, key features and policy logits without gradient tracking.
    pub fn view(&self, state: &HighDimState) -> Result<AgentView> {
        let mut g = Graph::new();
        let enc = g.bind_frozen(&self.encoder);
        let sk = g.bind_frozen(&self.skfen);
        let pol = g.bind_frozen(&self.policy);
        let z = self.latent_graph(&mut g, state, &enc)?;
        let key = self.distill_graph(&mut g, z, &sk)?;
        let logits = self.logits_graph(&mut g, key, &pol)?;
        Ok(AgentView {
            latent: g.value(z).to_vec(),
            key: g.value(key).to_vec(),
            logits: g.value(logits).to_vec(),
        })
    }

    /// Key features and policy logits without gradient tracking.
    pub fn evaluate(&self, state: &HighDimState) -> Result<(Vec<f64>, Vec<f64>)> {
        let v = self.view(state)?;
        Ok((v.key, v.logits))
    }

    pub fn act<R: Rng + ?Sized>(&self, state: &HighDimState, rng: &mut R) -> Result<(Vec<f64>, ClassRanking)> {
        let (key, logits) = self.evaluate(state)?;
        Ok((key, sample_from_logits(&logits, rng)?))
    }

    /// Fairness-weighted aggregate advantage of one record, and the weights.
    pub fn aggregate_advantage(&self, record: &TransitionRecord) -> Result<(f64, Vec<f64>)> {
        let adv = td_advantage(record, &self.critics)?;
        let w = self.fairness.weights(&self.critics.values(&record.z_key)?);
        Ok((w.iter().zip(&adv).map(|(a, b)| a * b).sum(), w))
    }

    fn record_gradients(&self, record: &TransitionRecord, coeff: f64) -> Result<(f64, Gradients)> {
        let mut g = Graph::new();
        let enc = g.bind(&self.encoder);
        let sk = g.bind(&self.skfen);
        let pol = g.bind(&self.policy);
        let key = self.key_graph(&mut g, &record.state, &enc, &sk)?;
        let logits = self.logits_graph(&mut g, key, &pol)?;
        let lp = log_prob_graph(&mut g, logits, &record.ranking.order)?;
        let loss = g.scale(lp, -coeff);
        let value = g.scalar(loss);
        Ok((value, g.backward(loss)?))
    }

    /// Writes the surrogate gradient `-mean(log pi * A~)` into the policy,
    /// SKFEN and encoder parameter sets; returns the surrogate value, the
    /// mean aggregate advantage and the mean weights.
    pub fn accumulate_policy_gradients(&mut self, batch: &[TransitionRecord]) -> Result<(f64, f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::invalid("policy_gradient_update", "empty batch"));
        }
        let b = batch.len() as f64;
        let mut coeffs = Vec::with_capacity(batch.len());
        let mut mean_w = vec![0.0; self.classes];
        for rec in batch {
            let (a, w) = self.aggregate_advantage(rec)?;
            for (m, x) in mean_w.iter_mut().zip(&w) {
                *m += x / b;
            }
            coeffs.push(a);
        }
        let work: Vec<(&TransitionRecord, f64)> = batch.iter().zip(coeffs.iter().map(|a| a / b)).collect();
        let results = par::map(&work, |(rec, c)| self.record_gradients(rec, *c));
        let mut surrogate = 0.0;
        for r in results {
            let (v, grads) = r?;
            surrogate += v;
            grads.accumulate_into(&mut self.policy)?;
            grads.accumulate_into(&mut self.skfen)?;
            grads.accumulate_into(&mut self.encoder)?;
        }
        Ok((surrogate, coeffs.iter().sum::<f64>() / b, mean_w))
    }

    /// One policy-gradient step, one critic regression step and, for the
    /// GM-VAE encoder, one reconstruction step on `states`.
    pub fn update(&mut self, batch: &[TransitionRecord], states: &[HighDimState], recon_lr: f64) -> Result<UpdateReport> {
        let (surrogate, mean_advantage, mean_weights) = self.accumulate_policy_gradients(batch)?;
        let policy_grad_norm = clip_joint(&mut [&mut self.policy, &mut self.skfen, &mut self.encoder], self.cfg.max_grad_norm);
        let (lr, wd) = (self.cfg.policy_learning_rate, self.cfg.weight_decay);
        self.policy.sgd_step(lr, wd)?;
        sgd_if_any(&mut self.skfen, lr, wd)?;
        self.encoder.sgd_step(lr, wd)?;

        let keys: Vec<Vec<f64>> = batch.iter().map(|r| r.z_key.clone()).collect();
        let targets = batch.iter().map(|r| self.critics.td_targets(r)).collect::<Result<Vec<_>>>()?;
        let critic = self.critics.regress(&keys, &targets, self.cfg.critic_learning_rate, wd, Some(self.cfg.max_grad_norm))?;

        let recon = match (&self.decoder, states.is_empty()) {
            (Some(dec), false) => {
                let v = statecodec::recon_loss(states, &mut self.encoder, dec, &self.latent)?;
                clip_joint(&mut [&mut self.encoder], self.cfg.max_grad_norm);
                self.encoder.sgd_step(recon_lr, wd)?;
                Some(v)
            }
            _ => None,
        };
        for (name, v) in [("surrogate", surrogate), ("critic loss", critic.loss)] {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: name.into() });
            }
        }
        Ok(UpdateReport {
            surrogate,
            policy_grad_norm,
            mean_advantage,
            mean_weights,
            critic,
            recon,
        })
    }

    /// Fingerprint of every scheduler parameter.
    pub fn checksum(&self) -> u64 {
        [&self.policy, &self.skfen, &self.encoder, &self.critics.params]
            .iter()
            .fold(0u64, |h, p| h.rotate_left(7) ^ p.checksum())
    }
}
