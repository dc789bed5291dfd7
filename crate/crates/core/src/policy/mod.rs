//! Ranking policy, per-class critics, α-fair weighting and replay storage.

pub mod agent;
pub mod buffer;
pub mod critic;
pub mod fairness;
pub mod ranking;

pub use agent::{sample_ranking, Agent, AgentView, PolicyConfig, StateEncoder, UpdateReport, POLICY_B, POLICY_W, PROJ_B, PROJ_W};
pub use buffer::{ReplayBuffer, Ring, TransitionRecord};
pub use critic::{td_advantage, CriticBank, CriticReport};
pub use fairness::{fair_objective, fairness_weights, FairnessConfig};
pub use ranking::{log_prob_graph, ranking_log_prob, sample_from_logits, uniform_ranking, ClassRanking};
