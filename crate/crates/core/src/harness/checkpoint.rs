//! Trainer checkpoints: one diffcore parameter checkpoint per parameter
//! collection plus `state.json` for everything else (learner, statistics,
//! buffers, generator states).

use std::path::Path;

use super::config::RunConfig;
use super::trainer::{RunState, Trainer};
use crate::diffcore::ParamSet;
use crate::error::{Error, Result};

const STATE_FILE: &str = "state.json";

fn collections(t: &mut Trainer) -> Vec<(&'static str, &mut ParamSet)> {
    let mut out: Vec<(&'static str, &mut ParamSet)> = vec![
        ("gmvae", &mut t.gmvae.params),
        ("policy", &mut t.agent.policy),
        ("skfen", &mut t.agent.skfen),
        ("encoder", &mut t.agent.encoder),
        ("critics", &mut t.agent.critics.params),
    ];
    if let Some(dec) = t.agent.decoder.as_mut() {
        out.push(("decoder", dec));
    }
    out
}

pub fn save_checkpoint(t: &mut Trainer, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut st = t.st.clone();
    st.elapsed_s = t.elapsed();
    for (name, p) in collections(t) {
        p.save(&dir.join(name))?;
    }
    let path = dir.join(STATE_FILE);
    let text = serde_json::to_string(&st).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, t.cfg.to_toml()?).map_err(|e| Error::io(&cfg_path, e))?;
    t.sink.flush()
}

/// Rebuilds a trainer from `dir`. Parameter layouts must match what `cfg`
/// produces; the first divergent path is reported and nothing is loaded.
pub fn load_checkpoint(cfg: RunConfig, dir: &Path, out_dir: Option<&Path>) -> Result<Trainer> {
    let path = dir.join(STATE_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let st: RunState = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    let mut t = Trainer::build(cfg, out_dir, false)?;
    // Every collection is staged first so a bad file leaves no partial state.
    let mut staged: Vec<ParamSet> = Vec::new();
    for (name, p) in collections(&mut t) {
        let mut copy = p.clone();
        copy.load_matching(&dir.join(name))?;
        staged.push(copy);
    }
    for ((_, p), s) in collections(&mut t).into_iter().zip(staged) {
        *p = s;
    }
    t.restore(st);
    Ok(t)
}

/// Reads just the config stored alongside a checkpoint.
pub fn checkpoint_config(dir: &Path) -> Result<RunConfig> {
    RunConfig::load(&dir.join("config.toml"))
}
