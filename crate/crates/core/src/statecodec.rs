//! Learning-status state vector and its Gaussian-mixture VAE compression.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, DiffTensor, Graph, ParamSet, Var};
use crate::error::{Error, Result};
use crate::segenv::{ClassStats, EnvStats};
use crate::skfen::SkfenConfig;

/// Flat per-class state: six statistics per class, class-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HighDimState(pub Vec<f64>);

impl HighDimState {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

pub const STATE_FIELDS: usize = 6;

pub fn assemble_state(stats: &EnvStats) -> Result<HighDimState> {
    let mut s = Vec::with_capacity(STATE_FIELDS * stats.classes.len());
    for (c, cs) in stats.classes.iter().enumerate() {
        for (name, v) in ClassStats::FIELDS.iter().zip(cs.as_array()) {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("state statistic `{name}` of class {c}"),
                });
            }
            s.push(v);
        }
    }
    Ok(HighDimState(s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmvaeConfig {
    /// Mixture components `K`.
    pub components: usize,
    /// Width of the shared encoder trunk and the decoder hidden layer.
    pub hidden: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Optimizer steps of pretraining.
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    /// Learning rate of the reconstruction fine-tuning of the encoder clone.
    pub recon_learning_rate: f64,
}

impl Default for GmvaeConfig {
    fn default() -> Self {
        Self {
            components: 4,
            hidden: 64,
            learning_rate: 0.003,
            weight_decay: 1e-4,
            pretrain_steps: 500,
            pretrain_batch: 32,
            recon_learning_rate: 1e-3,
        }
    }
}

impl GmvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::invalid("gmvae", "K must be positive"));
        }
        if self.hidden == 0 || self.pretrain_batch == 0 {
            return Err(Error::invalid("gmvae", "hidden width and batch must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.recon_learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::invalid("gmvae", "learning rates must be positive, weight decay >= 0"));
        }
        Ok(())
    }
}

pub const ENC_W1: &str = "enc.trunk.weight";
pub const ENC_B1: &str = "enc.trunk.bias";
pub const ENC_CAT_W: &str = "enc.cat.weight";
pub const ENC_CAT_B: &str = "enc.cat.bias";
pub const ENC_MU_W: &str = "enc.mu.weight";
pub const ENC_MU_B: &str = "enc.mu.bias";
pub const ENC_LV_W: &str = "enc.logvar.weight";
pub const ENC_LV_B: &str = "enc.logvar.bias";
pub const DEC_W1: &str = "dec.hidden.weight";
pub const DEC_B1: &str = "dec.hidden.bias";
pub const DEC_W2: &str = "dec.out.weight";
pub const DEC_B2: &str = "dec.out.bias";
pub const PRIOR_MEANS: &str = "prior.means";

#[derive(Clone, Debug, PartialEq)]
pub struct GmvaeModel {
    pub cfg: GmvaeConfig,
    pub state_dim: usize,
    pub latent: SkfenConfig,
    /// Paths under `enc.`, `dec.` and `prior.`.
    pub params: ParamSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncodeMode {
    Stochastic,
    Deterministic,
}

/// Negated ELBO of a batch and the KL terms that went into it.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboReport {
    pub loss: f64,
    /// Smallest per-component Gaussian KL seen in the batch.
    pub min_gaussian_kl: f64,
    /// Smallest categorical KL seen in the batch.
    pub min_categorical_kl: f64,
    pub recon: f64,
}

fn he(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl GmvaeModel {
    pub fn new<R: Rng + ?Sized>(cfg: GmvaeConfig, state_dim: usize, latent: SkfenConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        latent.validate()?;
        if state_dim == 0 {
            return Err(Error::invalid("gmvae", "state dimension must be positive"));
        }
        let (s, h, k, d) = (state_dim, cfg.hidden, cfg.components, latent.latent_dim());
        let mut p = ParamSet::new();
        p.insert_normal(ENC_W1, &[s, h], he(s), rng)?;
        p.insert_zeros(ENC_B1, &[h])?;
        p.insert_normal(ENC_CAT_W, &[h, k], 0.1 / (h as f64).sqrt(), rng)?;
        p.insert_zeros(ENC_CAT_B, &[k])?;
        p.insert_normal(ENC_MU_W, &[h, k * d], 1.0 / (h as f64).sqrt(), rng)?;
        p.insert_zeros(ENC_MU_B, &[k * d])?;
        p.insert_normal(ENC_LV_W, &[h, k * d], 0.1 / (h as f64).sqrt(), rng)?;
        p.insert_zeros(ENC_LV_B, &[k * d])?;
        p.insert_normal(DEC_W1, &[d, h], he(d), rng)?;
        p.insert_zeros(DEC_B1, &[h])?;
        p.insert_normal(DEC_W2, &[h, s], 1.0 / (h as f64).sqrt(), rng)?;
        p.insert_zeros(DEC_B2, &[s])?;
        p.insert_normal(PRIOR_MEANS, &[k, d], 1.0, rng)?;
        Ok(Self {
            cfg,
            state_dim,
            latent,
            params: p,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.latent_dim()
    }

    /// Copy of the encoder parameters (`enc.*`).
    pub fn encoder(&self) -> ParamSet {
        self.params.clone().split_prefix("enc.")
    }

    /// Copy of the decoder parameters (`dec.*`).
    pub fn decoder(&self) -> ParamSet {
        self.params.clone().split_prefix("dec.")
    }

    fn check_batch(&self, states: &[HighDimState]) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Err(Error::invalid("gmvae", "empty batch"));
        }
        let mut flat = Vec::with_capacity(states.len() * self.state_dim);
        for s in states {
            if s.len() != self.state_dim {
                return Err(Error::shape("gmvae", format!("state of length {}, expected {}", s.len(), self.state_dim)));
            }
            flat.extend_from_slice(s.values());
        }
        Ok(flat)
    }
}

/// Encoder heads on `s: [B, S]`: categorical logits `[B, K]`, means and
/// log-variances `[B, K*d]`.
pub fn encoder_heads(g: &mut Graph, s: Var, p: &Bound) -> Result<(Var, Var, Var)> {
    let h = g.linear(s, p.get(ENC_W1)?, p.get(ENC_B1)?)?;
    let h = g.relu(h);
    let logits = g.linear(h, p.get(ENC_CAT_W)?, p.get(ENC_CAT_B)?)?;
    let mu = g.linear(h, p.get(ENC_MU_W)?, p.get(ENC_MU_B)?)?;
    let lv = g.linear(h, p.get(ENC_LV_W)?, p.get(ENC_LV_B)?)?;
    Ok((logits, mu, lv))
}

pub fn decoder_graph(g: &mut Graph, z: Var, p: &Bound) -> Result<Var> {
    let h = g.linear(z, p.get(DEC_W1)?, p.get(DEC_B1)?)?;
    let h = g.relu(h);
    g.linear(h, p.get(DEC_W2)?, p.get(DEC_B2)?)
}

fn argmax_rows(v: &[f64], cols: usize) -> Vec<usize> {
    v.chunks(cols)
        .map(|row| {
            let mut best = 0;
            for (i, x) in row.iter().enumerate() {
                if *x > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Deterministic encoding of a batch `[B, S] -> [B, d]`: the mean of the
/// most probable component.
pub fn encode_graph(g: &mut Graph, s: Var, p: &Bound, d: usize) -> Result<Var> {
    let (logits, mu, _) = encoder_heads(g, s, p)?;
    let k = g.shape(logits)[1];
    let pick = argmax_rows(g.value(logits), k);
    g.select_blocks(mu, &pick, d)
}

fn tile_rows(rows: &[f64], width: usize, times: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * times);
    for r in rows.chunks(width) {
        for _ in 0..times {
            out.extend_from_slice(r);
        }
    }
    out
}

/// Records the batch-mean negated ELBO on `g`. `noise` holds one
/// standard-normal draw of length `d` per state, shared by all components.
pub fn elbo_graph(g: &mut Graph, model: &GmvaeModel, p: &Bound, states: &[HighDimState], noise: &[f64]) -> Result<(Var, ElboReport)> {
    let flat = model.check_batch(states)?;
    let (b, sd, k, d) = (states.len(), model.state_dim, model.cfg.components, model.latent_dim());
    if noise.len() != b * d {
        return Err(Error::shape("gmvae_elbo", format!("noise of length {}, expected {}", noise.len(), b * d)));
    }
    let s = g.constant(vec![b, sd], flat.clone())?;
    let (logits, mu, lv) = encoder_heads(g, s, p)?;
    let logq = g.log_softmax(logits);
    let q = g.softmax(logits);

    // z_k = mu_k + exp(lv_k / 2) * eps
    let half = g.scale(lv, 0.5);
    let sigma = g.exp(half);
    let eps = g.constant(vec![b, k * d], tile_rows(noise, d, k))?;
    let spread = g.mul(sigma, eps)?;
    let z = g.add(mu, spread)?;
    let z = g.reshape(z, vec![b * k, d])?;
    let recon = decoder_graph(g, z, p)?;
    let target = g.constant(vec![b * k, sd], tile_rows(&flat, sd, k))?;
    let diff = g.sub(recon, target)?;
    let sq = g.mul(diff, diff)?;
    let rec = g.sum_last(sq);
    let rec = g.reshape(rec, vec![b, k])?;
    let rec = g.scale(rec, 0.5);

    // KL(N(mu, sigma^2) || N(m_k, I)) = 1/2 sum(sigma^2 + (mu - m)^2 - 1 - log sigma^2)
    let prior = p.get(PRIOR_MEANS)?;
    let prior = g.reshape(prior, vec![k * d])?;
    let neg_prior = g.scale(prior, -1.0);
    let centred = g.add_bias(mu, neg_prior)?;
    let c2 = g.mul(centred, centred)?;
    let var = g.exp(lv);
    let t = g.add(var, c2)?;
    let t = g.sub(t, lv)?;
    let t = g.add_scalar(t, -1.0);
    let t = g.reshape(t, vec![b * k, d])?;
    let kl = g.sum_last(t);
    let kl = g.reshape(kl, vec![b, k])?;
    let kl = g.scale(kl, 0.5);

    let per_comp = g.add(rec, kl)?;
    let weighted = g.mul(q, per_comp)?;
    let expected = g.sum(weighted);
    // KL(q(c|s) || uniform) = sum q log q + log K
    let qlogq = g.mul(q, logq)?;
    let neg_ent = g.sum(qlogq);
    let total = g.add(expected, neg_ent)?;
    let total = g.scale(total, 1.0 / b as f64);
    let loss = g.add_scalar(total, (k as f64).ln());

    let lk = (k as f64).ln();
    let cat_kl = g
        .value(qlogq)
        .chunks(k)
        .map(|row| row.iter().sum::<f64>() + lk)
        .fold(f64::INFINITY, f64::min);
    let recon_mean = g
        .value(rec)
        .chunks(k)
        .zip(g.value(q).chunks(k))
        .map(|(r, q)| r.iter().zip(q).map(|(a, b)| a * b).sum::<f64>())
        .sum::<f64>()
        / b as f64;
    let report = ElboReport {
        loss: g.scalar(loss),
        min_gaussian_kl: g.value(kl).iter().cloned().fold(f64::INFINITY, f64::min),
        min_categorical_kl: cat_kl,
        recon: recon_mean,
    };
    if !report.loss.is_finite() {
        return Err(Error::NonFinite {
            context: "negated ELBO".into(),
        });
    }
    Ok((loss, report))
}

/// Negated ELBO without gradient tracking.
pub fn gmvae_elbo(states: &[HighDimState], model: &GmvaeModel, noise: &[f64]) -> Result<ElboReport> {
    let mut g = Graph::new();
    let p = g.bind_frozen(&model.params);
    Ok(elbo_graph(&mut g, model, &p, states, noise)?.1)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Encodes one state with the given encoder parameters into `(C_z, H_z, W_z)`.
pub fn encode_with(s: &HighDimState, encoder: &ParamSet, latent: &SkfenConfig, mode: EncodeMode, noise: Option<&[f64]>) -> Result<DiffTensor> {
    let d = latent.latent_dim();
    let mut g = Graph::new();
    let p = g.bind_frozen(encoder);
    let sv = g.constant(vec![1, s.len()], s.values().to_vec())?;
    let (logits, mu, lv) = encoder_heads(&mut g, sv, &p)?;
    let k = g.shape(logits)[1];
    let c = argmax_rows(g.value(logits), k)[0];
    let mut z = g.value(mu)[c * d..(c + 1) * d].to_vec();
    if mode == EncodeMode::Stochastic {
        let eps = noise.ok_or_else(|| Error::invalid("encode", "stochastic mode needs a noise draw"))?;
        if eps.len() != d {
            return Err(Error::shape("encode", format!("noise of length {}, expected {d}", eps.len())));
        }
        let lv = &g.value(lv)[c * d..(c + 1) * d];
        for ((zi, l), e) in z.iter_mut().zip(lv).zip(eps) {
            *zi += (0.5 * l).exp() * e;
        }
    }
    DiffTensor::new(latent.latent_shape().to_vec(), z)
}

pub fn encode(s: &HighDimState, model: &GmvaeModel, mode: EncodeMode, noise: Option<&[f64]>) -> Result<DiffTensor> {
    encode_with(s, &model.params.clone().split_prefix("enc."), &model.latent, mode, noise)
}

/// Categorical posterior `q(c|s)` of one state.
pub fn component_probs(s: &HighDimState, encoder: &ParamSet) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let p = g.bind_frozen(encoder);
    let sv = g.constant(vec![1, s.len()], s.values().to_vec())?;
    let (logits, _, _) = encoder_heads(&mut g, sv, &p)?;
    let q = g.softmax(logits);
    Ok(g.value(q).to_vec())
}

/// Records `mean_b ||s_b - dec(enc(s_b))||^2` with a frozen decoder.
pub fn recon_graph(g: &mut Graph, enc: &Bound, decoder: &ParamSet, states: &[HighDimState], d: usize) -> Result<Var> {
    if states.is_empty() {
        return Err(Error::invalid("recon_loss", "empty batch"));
    }
    let sd = states[0].len();
    let mut flat = Vec::with_capacity(states.len() * sd);
    for s in states {
        if s.len() != sd {
            return Err(Error::shape("recon_loss", "states of unequal length"));
        }
        flat.extend_from_slice(s.values());
    }
    let sv = g.constant(vec![states.len(), sd], flat)?;
    let z = encode_graph(g, sv, enc, d)?;
    let dec = g.bind_frozen(decoder);
    let out = decoder_graph(g, z, &dec)?;
    let se = g.squared_error(out, sv)?;
    Ok(g.scale(se, 1.0 / states.len() as f64))
}

/// Reconstruction loss of a batch; gradients land in `encoder` only.
pub fn recon_loss(states: &[HighDimState], encoder: &mut ParamSet, decoder: &ParamSet, latent: &SkfenConfig) -> Result<f64> {
    let mut g = Graph::new();
    let enc = g.bind(encoder);
    let loss = recon_graph(&mut g, &enc, decoder, states, latent.latent_dim())?;
    let value = g.scalar(loss);
    g.backward(loss)?.accumulate_into(encoder)?;
    Ok(value)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial: f64,
    pub final_loss: f64,
    /// Smallest KL value observed in any step, either kind.
    pub min_kl: f64,
    pub losses: Vec<f64>,
}

/// SGD on the negated ELBO over minibatches of `corpus`; the initial and
/// final losses are measured on the whole corpus with one fixed noise draw.
pub fn pretrain<R: Rng + ?Sized>(model: &mut GmvaeModel, corpus: &[HighDimState], rng: &mut R) -> Result<PretrainReport> {
    if corpus.is_empty() {
        return Err(Error::invalid("pretrain", "empty corpus"));
    }
    let d = model.latent_dim();
    let eval_noise = standard_normal(rng, corpus.len() * d);
    let initial = gmvae_elbo(corpus, model, &eval_noise)?;
    let mut min_kl = initial.min_gaussian_kl.min(initial.min_categorical_kl);
    let mut losses = Vec::with_capacity(model.cfg.pretrain_steps);
    let bsz = model.cfg.pretrain_batch.min(corpus.len());
    for _ in 0..model.cfg.pretrain_steps {
        let batch: Vec<HighDimState> = (0..bsz).map(|_| corpus.choose(rng).expect("non-empty").clone()).collect();
        let noise = standard_normal(rng, bsz * d);
        let mut g = Graph::new();
        let p = g.bind(&model.params);
        let (loss, rep) = elbo_graph(&mut g, model, &p, &batch, &noise)?;
        min_kl = min_kl.min(rep.min_gaussian_kl).min(rep.min_categorical_kl);
        losses.push(rep.loss);
        g.backward(loss)?.accumulate_into(&mut model.params)?;
        model.params.sgd_step(model.cfg.learning_rate, model.cfg.weight_decay)?;
    }
    let fin = gmvae_elbo(corpus, model, &eval_noise)?;
    min_kl = min_kl.min(fin.min_gaussian_kl).min(fin.min_categorical_kl);
    Ok(PretrainReport {
        initial: initial.loss,
        final_loss: fin.loss,
        min_kl,
        losses,
    })
}

/// Seeded corpus drawn from a 3-component Gaussian mixture.
pub fn mixture_corpus<R: Rng + ?Sized>(rng: &mut R, n: usize, dim: usize) -> Vec<HighDimState> {
    let centres: Vec<Vec<f64>> = (0..3).map(|_| standard_normal(rng, dim).iter().map(|x| 2.0 * x).collect()).collect();
    (0..n)
        .map(|_| {
            let c = &centres[rng.random_range(0..3)];
            HighDimState(c.iter().map(|m| {
                let e: f64 = StandardNormal.sample(rng);
                m + 0.3 * e
            }).collect())
        })
        .collect()
}
