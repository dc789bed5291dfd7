use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, SchedulerKind};
use super::metrics::{MetricsEvent, MetricsSink};
use crate::error::{Error, Result};
use crate::policy::{uniform_ranking, Agent, ClassRanking, FairnessConfig, ReplayBuffer, TransitionRecord};
use crate::reward::{class_reward, compute_prototypes_multi, cosine, Domain};
use crate::segenv::{
    build_mix_mask, mix_pair, snapshot_stats, target_observation, ExposureCounter, MixedPair, RecentStats, Scene,
    SceneGenerator, StepObservation, ToyLearner,
};
use crate::statecodec::{assemble_state, pretrain, GmvaeModel, HighDimState};

const AGENT_SALT: u64 = 0x9E37_79B9_7F4A_7C15;
const INIT_SALT: u64 = 0xD1B5_4A32_D192_ED03;
const EVAL_SALT: u64 = 0x2545_F491_4F6C_DD1D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalReport {
    pub scheduler: String,
    pub seed: u64,
    pub steps: usize,
    pub mean_accuracy: f64,
    pub accuracy_std: f64,
    pub per_class: Vec<Option<f64>>,
    pub wall_time_s: f64,
}

/// Mutable run state that is not a parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct RunState {
    pub step: usize,
    pub learner: ToyLearner,
    pub recent: RecentStats,
    pub exposure: ExposureCounter,
    pub scene_rng: ChaCha8Rng,
    pub agent_rng: ChaCha8Rng,
    pub buffer: ReplayBuffer,
    pub pretrained: bool,
    pub elapsed_s: f64,
}

/// One run of the scheduling loop.
pub struct Trainer {
    pub cfg: RunConfig,
    pub gen: SceneGenerator,
    pub(crate) st: RunState,
    pub gmvae: GmvaeModel,
    pub agent: Agent,
    pub sink: MetricsSink,
    pub out_dir: Option<PathBuf>,
    clock: Instant,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Class ids sorted by `key`, descending or ascending, ties by index.
fn order_by(values: &[f64], descending: bool) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        let o = values[a].total_cmp(&values[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    idx
}

impl Trainer {
    pub fn new(cfg: RunConfig, out_dir: Option<&Path>) -> Result<Self> {
        Self::build(cfg, out_dir, true)
    }

    pub(crate) fn build(cfg: RunConfig, out_dir: Option<&Path>, fresh: bool) -> Result<Self> {
        cfg.validate()?;
        let gen = SceneGenerator::new(cfg.env.clone())?;
        let c = cfg.env.classes;
        let state_dim = crate::statecodec::STATE_FIELDS * c;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_SALT);
        let gmvae = GmvaeModel::new(cfg.gmvae, state_dim, cfg.skfen, &mut init)?;
        let fairness = FairnessConfig::new(cfg.alpha(), cfg.policy.epsilon, c, cfg.reward_lambda)?;
        let kind = &cfg.scheduler;
        let agent = Agent::new(
            c,
            state_dim,
            cfg.skfen,
            kind.encoder(),
            kind.uses_skfen(),
            Some((gmvae.encoder(), gmvae.decoder())),
            fairness,
            cfg.policy,
            &mut init,
        )?;
        let learner = ToyLearner::new(c, cfg.env.feature_dim, cfg.learner.temperature)?;
        let st = RunState {
            step: 0,
            learner,
            recent: RecentStats::new(c),
            exposure: ExposureCounter::new(c),
            scene_rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            agent_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ AGENT_SALT),
            buffer: ReplayBuffer::new(cfg.policy.buffer_capacity, cfg.policy.state_capacity)?,
            pretrained: false,
            elapsed_s: 0.0,
        };
        let sink = match out_dir {
            Some(d) => {
                let sink = MetricsSink::create(d)?;
                let cfg_path = d.join("config.toml");
                std::fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
                sink
            }
            None => MetricsSink::memory(),
        };
        let mut t = Self {
            cfg,
            gen,
            st,
            gmvae,
            agent,
            sink,
            out_dir: out_dir.map(Path::to_path_buf),
            clock: Instant::now(),
        };
        if fresh {
            let f = t.agent.fairness;
            t.sink.emit(
                MetricsEvent::new(0, "config")
                    .with("reward_shift", f.shift)
                    .with("reward_scale", f.scale)
                    .with("alpha", f.alpha),
            )?;
        }
        Ok(t)
    }

    pub fn step(&self) -> usize {
        self.st.step
    }

    pub fn learner(&self) -> &ToyLearner {
        &self.st.learner
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.st.buffer
    }

    pub fn pretrained(&self) -> bool {
        self.st.pretrained
    }

    fn emit(&mut self, ev: MetricsEvent) -> Result<()> {
        self.sink.emit(ev)
    }

    fn observe_state(&self) -> Result<HighDimState> {
        let stats = snapshot_stats(&self.st.learner, &self.st.recent, &self.st.exposure)?;
        assemble_state(&stats)
    }

    fn pretrain_gmvae(&mut self) -> Result<()> {
        let t = self.st.step;
        let corpus: Vec<HighDimState> = self.st.buffer.states.iter().cloned().collect();
        if let Some(dir) = &self.out_dir {
            write_corpus(&dir.join(CORPUS_FILE), &corpus)?;
        }
        let mut ev = MetricsEvent::new(t, "pretrain").with("corpus", corpus.len() as f64);
        if !corpus.is_empty() {
            let rep = pretrain(&mut self.gmvae, &corpus, &mut self.st.agent_rng)?;
            ev.set("initial", rep.initial);
            ev.set("final", rep.final_loss);
            ev.set("min_kl", rep.min_kl);
        }
        // Decoder frozen from here on; the agent works on a clone of the
        // encoder while `gmvae` keeps the pretrained original.
        self.agent.encoder = self.gmvae.encoder();
        self.agent.decoder = Some(self.gmvae.decoder());
        self.st.pretrained = true;
        self.emit(ev)
    }

    fn baseline_ranking(&mut self, state: &HighDimState) -> Result<ClassRanking> {
        let c = self.cfg.env.classes;
        let acc: Vec<f64> = state.values().chunks(crate::statecodec::STATE_FIELDS).map(|b| b[1]).collect();
        let order = match &self.cfg.scheduler {
            SchedulerKind::EasyToHard => order_by(&acc, true),
            SchedulerKind::HardOnly => order_by(&acc, false),
            SchedulerKind::FixedOrder(o) => o.clone(),
            _ => return uniform_ranking(c, &mut self.st.agent_rng),
        };
        Ok(ClassRanking {
            order,
            log_prob: 0.0,
            logits: acc,
        })
    }

    /// One environment step, plus an agent update when one is due.
    pub fn env_step(&mut self) -> Result<()> {
        let t = self.st.step;
        let w = self.cfg.warmup_steps;
        let warm = t < w;
        let learned = self.cfg.scheduler.is_learned() && !warm;
        let c = self.cfg.env.classes;

        if t == w && self.cfg.scheduler.pretrains() && !self.st.pretrained {
            self.pretrain_gmvae().map_err(|e| e.at_stage(t, "pretrain"))?;
        }

        let s = self.observe_state().map_err(|e| e.at_stage(t, "state"))?;
        self.st.buffer.states.push(s.clone());
        {
            let blocks: Vec<&[f64]> = s.values().chunks(crate::statecodec::STATE_FIELDS).collect();
            let field = |i: usize| mean(&blocks.iter().map(|b| b[i]).collect::<Vec<_>>());
            let ev = MetricsEvent::new(t, "state")
                .with("loss", field(0))
                .with("accuracy", field(1))
                .with("fraction", field(5))
                .with("warmup", f64::from(u8::from(warm)));
            self.emit(ev)?;
        }

        let (key, ranking) = if learned {
            let view = self.agent.view(&s).map_err(|e| e.at_stage(t, "encode"))?;
            self.emit(MetricsEvent::new(t, "encode").with("latent_norm", norm(&view.latent)))?;
            self.emit(MetricsEvent::new(t, "distill").with("key_norm", norm(&view.key)))?;
            let r = crate::policy::sample_from_logits(&view.logits, &mut self.st.agent_rng)
                .map_err(|e| e.at_stage(t, "rank"))?;
            (Some(view.key), r)
        } else if warm {
            (None, uniform_ranking(c, &mut self.st.agent_rng).map_err(|e| e.at_stage(t, "rank"))?)
        } else {
            (None, self.baseline_ranking(&s).map_err(|e| e.at_stage(t, "rank"))?)
        };
        {
            let mut ev = MetricsEvent::new(t, "rank").with("log_prob", ranking.log_prob);
            let order: Vec<f64> = ranking.order.iter().map(|&k| k as f64).collect();
            ev.set_vec("order", &order);
            ev.set_vec("logits", &ranking.logits);
            self.emit(ev)?;
        }

        let scenes: Vec<Scene> = (0..self.cfg.env.scenes_per_step)
            .map(|_| self.gen.generate_scene(&mut self.st.scene_rng))
            .collect();
        let mut mixed: Vec<MixedPair> = Vec::with_capacity(scenes.len());
        let mut pasted = vec![0.0; c];
        let mut paste_px = 0usize;
        for scene in &scenes {
            let mask = build_mix_mask(&ranking.order, &scene.source_labels, c, self.cfg.paste_half)
                .map_err(|e| e.at_stage(t, "mix"))?;
            self.st.exposure.record(&mask.c_low);
            for &k in &mask.c_low {
                pasted[k] += 1.0;
            }
            paste_px += mask.h.iter().filter(|&&v| v == 1).count();
            mixed.push(mix_pair(scene, &mask, &self.st.learner));
        }
        {
            let total_px: usize = scenes.iter().map(|s| s.source_labels.pixels()).sum();
            let mut ev = MetricsEvent::new(t, "mix").with("paste_fraction", paste_px as f64 / total_px as f64);
            ev.set_vec("c_low", &pasted);
            self.emit(ev)?;
        }

        let batch: Vec<(&Scene, &MixedPair)> = scenes.iter().zip(&mixed).collect();
        let l = self.cfg.learner;
        let seg = self
            .st
            .learner
            .seg_loss_and_update(&batch, l.lambda_source, l.lambda_mixed, l.learning_rate)
            .map_err(|e| e.at_stage(t, "seg_update"))?;
        self.emit(
            MetricsEvent::new(t, "seg_update")
                .with("loss", seg.total)
                .with("source_ce", seg.source_ce)
                .with("mixed_ce", seg.mixed_ce),
        )?;

        let reward_stage = |e: Error| e.at_stage(t, "reward");
        let src_maps: Vec<_> = scenes.iter().map(|s| (&s.source_features, &s.source_labels)).collect();
        let src = compute_prototypes_multi(&src_maps, c, Domain::Source).map_err(reward_stage)?;
        let pseudo: Vec<_> = scenes.iter().map(|s| self.st.learner.predict_map(&s.target_features)).collect();
        let tgt_maps: Vec<_> = scenes.iter().zip(&pseudo).map(|(s, p)| (&s.target_features, p)).collect();
        let tgt = compute_prototypes_multi(&tgt_maps, c, Domain::Target).map_err(reward_stage)?;
        let reward = class_reward(&src, &tgt, self.cfg.reward_lambda).map_err(reward_stage)?;
        let mapped: Vec<f64> = reward.r.iter().map(|&r| self.agent.fairness.map_reward(r)).collect();
        {
            let mut ev = MetricsEvent::new(t, "reward").with("mean", mean(&mapped));
            ev.set_vec("r", &reward.r);
            self.emit(ev)?;
        }

        let (accuracy, entropy) = target_observation(&self.st.learner, &scenes);
        let cosines = (0..c)
            .map(|k| match (&src.prototypes[k], &tgt.prototypes[k]) {
                (Some(a), Some(b)) => Some(cosine(a, b)),
                _ => None,
            })
            .collect();
        self.st.recent.observe(&StepObservation {
            loss: seg.source_ce_per_class.clone(),
            accuracy,
            cosine: cosines,
            entropy,
        });

        if let Some(z_key) = key {
            let next = self.observe_state().map_err(|e| e.at_stage(t, "record"))?;
            let (z_next, _) = self.agent.evaluate(&next).map_err(|e| e.at_stage(t, "record"))?;
            self.st.buffer.transitions.push(TransitionRecord {
                state: s,
                z_key,
                ranking,
                reward: mapped,
                next_state: next,
                z_key_next: z_next,
            });
            let n = self.st.buffer.transitions.len();
            self.emit(MetricsEvent::new(t, "record").with("buffer", n as f64))?;
        }

        self.st.step += 1;
        let since = self.st.step.saturating_sub(w);
        if learned && since % self.cfg.update_period == 0 && self.st.buffer.transitions.len() >= self.cfg.policy.batch {
            self.agent_update().map_err(|e| e.at_stage(t, "agent_update"))?;
        }
        if self.st.step % self.cfg.update_period == 0 {
            self.sink.flush()?;
        }
        Ok(())
    }

    fn agent_update(&mut self) -> Result<()> {
        let t = self.st.step - 1;
        for i in 0..self.cfg.agent_iterations {
            let batch = self.st.buffer.transitions.sample(self.cfg.policy.batch, &mut self.st.agent_rng)?;
            let n = self.cfg.recon_batch.min(self.st.buffer.states.len());
            let states = self.st.buffer.states.sample(n, &mut self.st.agent_rng)?;
            let rep = self.agent.update(&batch, &states, self.cfg.gmvae.recon_learning_rate)?;
            let mut ev = MetricsEvent::new(t, "agent_update")
                .with("iteration", i as f64)
                .with("surrogate", rep.surrogate)
                .with("policy_grad_norm", rep.policy_grad_norm)
                .with("advantage", rep.mean_advantage)
                .with("critic_loss", rep.critic.loss)
                .with("critic_grad_norm", rep.critic.grad_norm);
            if let Some(r) = rep.recon {
                ev.set("recon", r);
            }
            ev.set_vec("weight", &rep.mean_weights);
            self.emit(ev)?;
        }
        Ok(())
    }

    /// Runs environment steps until `step` (exclusive) or the configured end.
    pub fn run_until(&mut self, step: usize) -> Result<()> {
        let end = step.min(self.cfg.total_steps);
        while self.st.step < end {
            self.env_step()?;
        }
        self.sink.flush()
    }

    fn held_out(&self) -> Vec<Scene> {
        self.gen.generate_set(self.cfg.seed ^ EVAL_SALT, self.cfg.eval_scenes)
    }

    /// Evaluates on held-out scenes, emits the final event, and writes
    /// `report.json` to the run directory.
    pub fn finish(&mut self) -> Result<FinalReport> {
        let t = self.st.step;
        let eval = self.st.learner.evaluate(&self.held_out()).map_err(|e| e.at_stage(t, "evaluate"))?;
        let mut ev = MetricsEvent::new(t, "final")
            .with("mean_accuracy", eval.mean)
            .with("accuracy_std", eval.std);
        let acc: Vec<f64> = eval.per_class.iter().map(|a| a.unwrap_or(f64::NAN)).collect();
        ev.set_vec("accuracy", &acc);
        self.emit(ev)?;
        self.sink.flush()?;
        let report = FinalReport {
            scheduler: self.cfg.scheduler.to_string(),
            seed: self.cfg.seed,
            steps: t,
            mean_accuracy: eval.mean,
            accuracy_std: eval.std,
            per_class: eval.per_class,
            wall_time_s: self.st.elapsed_s + self.clock.elapsed().as_secs_f64(),
        };
        if let Some(dir) = &self.out_dir {
            let path = dir.join("report.json");
            let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Config(e.to_string()))?;
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(report)
    }

    pub(crate) fn elapsed(&self) -> f64 {
        self.st.elapsed_s + self.clock.elapsed().as_secs_f64()
    }

    pub(crate) fn restore(&mut self, st: RunState) {
        self.clock = Instant::now();
        self.st = st;
    }
}

/// Pretraining corpus of a run directory: one state per line, comma-separated.
pub const CORPUS_FILE: &str = "pretrain_corpus.csv";

fn write_corpus(path: &Path, corpus: &[HighDimState]) -> Result<()> {
    let mut text = String::new();
    for s in corpus {
        let row: Vec<String> = s.values().iter().map(|v| format!("{v:e}")).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split(',')
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|e| Error::invalid("corpus", format!("{} line {}: {e}", path.display(), i + 1)))
                })
                .collect()
        })
        .collect()
}

/// Full run: warmup, pretraining, main loop, final evaluation.
pub fn run_training(cfg: RunConfig, out_dir: Option<&Path>) -> Result<FinalReport> {
    let mut t = Trainer::new(cfg, out_dir)?;
    let end = t.cfg.total_steps;
    t.run_until(end)?;
    t.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_by_breaks_ties_by_index() {
        assert_eq!(order_by(&[0.5, 0.9, 0.5, 0.1], true), vec![1, 0, 2, 3]);
        assert_eq!(order_by(&[0.5, 0.9, 0.5, 0.1], false), vec![3, 0, 2, 1]);
    }
}
