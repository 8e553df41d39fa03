//! Attentive neural process mapping (calendar, per-VM workload) to CPU
//! utilisation, meta-learned across applications.
//!
//! An application is identified only by its context set of observed
//! pairs. Two encoder paths read the context:
//!
//! * a deterministic path (pair embedding, self-attention, then
//!   cross-attention from the query input) giving a query-specific `r*`;
//! * a latent path (pair MLP, mean pooling) giving a diagonal Gaussian over
//!   the task embedding `z`.
//!
//! The decoder maps `[embedded query; r*; z]` to a Gaussian over
//! utilisation with a sigmoid mean and softplus standard deviation.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::forecaster::{forecast_metrics, Metrics};
use crate::tensor::nn::multihead_attention;
use crate::tensor::{Adam, AdamConfig, Bound, Checkpoint, ParamId, Params, Tape, Var};
use crate::workload::{AppTrace, TimeCovariate};

pub const STD_FLOOR: f64 = 1e-3;
pub const LATENT_STD_FLOOR: f64 = 1e-4;
const CAL_FEATURES: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationPair {
    #[serde(flatten)]
    pub cov: TimeCovariate,
    pub unit_workload: Vec<f64>,
    pub cpu: f64,
}

impl ObservationPair {
    pub fn validate(&self) -> Result<()> {
        contract!(
            self.unit_workload
                .iter()
                .all(|x| *x >= 0.0 && x.is_finite()),
            "unit workload must be finite and nonnegative"
        );
        contract!(
            (0.0..=1.0).contains(&self.cpu),
            "utilisation {} outside [0, 1]",
            self.cpu
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaTask {
    pub app_id: String,
    pub context: Vec<ObservationPair>,
    pub target: Vec<ObservationPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentBelief {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// `z = mu + sigma * eps` with `eps ~ N(0, I)` drawn from `seed`.
pub fn sample_latent(belief: &LatentBelief, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    belief
        .mean
        .iter()
        .zip(&belief.std)
        .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_diag_gaussian(q: &LatentBelief, p: &LatentBelief) -> f64 {
    q.mean
        .iter()
        .zip(&q.std)
        .zip(p.mean.iter().zip(&p.std))
        .map(|((mq, sq), (mp, sp))| {
            (sp / sq).ln() + (sq * sq + (mq - mp).powi(2)) / (2.0 * sp * sp) - 0.5
        })
        .sum()
}

/// Keeps the log of an idle dimension finite.
const LOG_EPS: f64 = 1e-6;

/// Per-dimension mean of `ln(x + eps)` over a set: the reference level
/// that workload features are measured from.
fn log_level(obs: &[&ObservationPair]) -> Vec<f64> {
    let d = obs.first().map_or(0, |o| o.unit_workload.len());
    let mut acc = vec![0.0; d];
    for o in obs {
        acc.iter_mut()
            .zip(&o.unit_workload)
            .for_each(|(a, x)| *a += (x + LOG_EPS).ln());
    }
    acc.iter_mut().for_each(|a| *a /= obs.len() as f64);
    acc
}

/// Calendar and per-VM workload features fed to every embedding. Workload
/// enters as its log relative to the reference `level`, so applications of
/// very different scale look alike to the network.
fn features(obs: &[&ObservationPair], level: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut cal = Vec::with_capacity(obs.len() * CAL_FEATURES);
    let mut work = Vec::with_capacity(obs.len() * level.len());
    for o in obs {
        cal.extend_from_slice(&o.cov.cyclic_features());
        work.extend(
            o.unit_workload
                .iter()
                .zip(level)
                .map(|(x, l)| (x + LOG_EPS).ln() - l),
        );
    }
    (cal, work)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnpConfig {
    /// Width of input embeddings and deterministic representations.
    pub repr: usize,
    pub latent: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Context window length `L`.
    pub context_len: usize,
    /// Target window length `H`.
    pub target_len: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub tasks_per_batch: usize,
    pub iterations: usize,
    pub eval_every: usize,
    /// Evaluations without improvement before stopping.
    pub patience: usize,
    /// Trailing share of each training series used for validation tasks.
    pub val_fraction: f64,
    pub val_tasks: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for AnpConfig {
    fn default() -> Self {
        AnpConfig {
            repr: 64,
            latent: 16,
            hidden: 64,
            heads: 2,
            context_len: 288,
            target_len: 48,
            lr: 1e-3,
            weight_decay: 0.0,
            tasks_per_batch: 16,
            iterations: 2000,
            eval_every: 100,
            patience: 5,
            val_fraction: 0.15,
            val_tasks: 32,
            clip: 5.0,
            seed: 0,
        }
    }
}

impl AnpConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(
            self.repr > 0 && self.latent > 0 && self.hidden > 0,
            "widths must be positive"
        );
        contract!(
            self.heads > 0 && self.repr.is_multiple_of(self.heads),
            "heads={} must divide repr width {}",
            self.heads,
            self.repr
        );
        contract!(
            self.context_len >= 1 && self.target_len >= 1,
            "window lengths must be positive"
        );
        contract!(self.tasks_per_batch > 0, "need at least one task per batch");
        contract!(
            (0.0..1.0).contains(&self.val_fraction),
            "val_fraction must lie in [0, 1)"
        );
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Ids {
    // query/key input embedding
    xe_w1: ParamId,
    xe_b1: ParamId,
    xe_w2: ParamId,
    xe_b2: ParamId,
    // deterministic pair embedding and self-attention
    de_w1: ParamId,
    de_b1: ParamId,
    de_w2: ParamId,
    de_b2: ParamId,
    sa_q: ParamId,
    sa_k: ParamId,
    sa_v: ParamId,
    sa_o: ParamId,
    // cross-attention
    ca_q: ParamId,
    ca_k: ParamId,
    ca_v: ParamId,
    ca_o: ParamId,
    // latent path
    le_w1: ParamId,
    le_b1: ParamId,
    le_w2: ParamId,
    le_b2: ParamId,
    lz_w: ParamId,
    lz_b: ParamId,
    mu_w: ParamId,
    mu_b: ParamId,
    sd_w: ParamId,
    sd_b: ParamId,
    // decoder
    dc_w1: ParamId,
    dc_b1: ParamId,
    dc_w2: ParamId,
    dc_b2: ParamId,
    dc_w3: ParamId,
    dc_b3: ParamId,
}

#[derive(Debug, Clone)]
pub struct AnpModel {
    pub config: AnpConfig,
    pub d: usize,
    params: Params,
    ids: Ids,
}

/// Context encoding recorded on a tape.
pub struct ContextOnTape<'t> {
    /// Cross-attention keys, already projected, `[C, repr]`.
    pub keys: Var<'t>,
    /// Cross-attention values, already projected, `[C, repr]`.
    pub values: Var<'t>,
    pub mu: Var<'t>,
    pub sigma: Var<'t>,
    /// Reference log-workload of the context.
    pub level: Vec<f64>,
}

/// Frozen context encoding as plain numbers, reusable across tapes.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextCache {
    pub n: usize,
    pub keys: Vec<f64>,
    pub values: Vec<f64>,
    pub belief: LatentBelief,
    pub level: Vec<f64>,
}

impl ContextCache {
    pub fn task_embedding(&self) -> &[f64] {
        &self.belief.mean
    }
}

impl AnpModel {
    pub fn new(config: AnpConfig, d: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        contract!(d > 0, "workload dimensionality must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let (r, h, z) = (config.repr, config.hidden, config.latent);
        let fin = CAL_FEATURES + d;
        let ids = Ids {
            xe_w1: p.add_weight("xe.w1", fin, h, &mut rng),
            xe_b1: p.add_bias("xe.b1", h),
            xe_w2: p.add_weight("xe.w2", h, r, &mut rng),
            xe_b2: p.add_bias("xe.b2", r),
            de_w1: p.add_weight("de.w1", fin + 1, h, &mut rng),
            de_b1: p.add_bias("de.b1", h),
            de_w2: p.add_weight("de.w2", h, r, &mut rng),
            de_b2: p.add_bias("de.b2", r),
            sa_q: p.add_weight("sa.q", r, r, &mut rng),
            sa_k: p.add_weight("sa.k", r, r, &mut rng),
            sa_v: p.add_weight("sa.v", r, r, &mut rng),
            sa_o: p.add_weight("sa.o", r, r, &mut rng),
            ca_q: p.add_weight("ca.q", r, r, &mut rng),
            ca_k: p.add_weight("ca.k", r, r, &mut rng),
            ca_v: p.add_weight("ca.v", r, r, &mut rng),
            ca_o: p.add_weight("ca.o", r, r, &mut rng),
            le_w1: p.add_weight("le.w1", fin + 1, h, &mut rng),
            le_b1: p.add_bias("le.b1", h),
            le_w2: p.add_weight("le.w2", h, h, &mut rng),
            le_b2: p.add_bias("le.b2", h),
            lz_w: p.add_weight("lz.w", h, h, &mut rng),
            lz_b: p.add_bias("lz.b", h),
            mu_w: p.add_weight("mu.w", h, z, &mut rng),
            mu_b: p.add_bias("mu.b", z),
            sd_w: p.add_weight("sd.w", h, z, &mut rng),
            sd_b: p.add_bias("sd.b", z),
            dc_w1: p.add_weight("dc.w1", r + r + z, h, &mut rng),
            dc_b1: p.add_bias("dc.b1", h),
            dc_w2: p.add_weight("dc.w2", h, h, &mut rng),
            dc_b2: p.add_bias("dc.b2", h),
            dc_w3: p.add_weight("dc.w3", h, 2, &mut rng),
            dc_b3: p.add_bias("dc.b3", 2),
        };
        Ok(AnpModel {
            config,
            d,
            params: p,
            ids,
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn zero_output_layer(&mut self) {
        for id in [self.ids.dc_w3, self.ids.dc_b3] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    fn check_obs(&self, obs: &[&ObservationPair]) -> Result<()> {
        for o in obs {
            contract!(
                o.unit_workload.len() == self.d,
                "observation has {} workload dims, model expects {}",
                o.unit_workload.len(),
                self.d
            );
            o.validate()?;
        }
        Ok(())
    }

    /// Embeds query inputs given as calendar features `[n, 4]` and raw
    /// per-VM workload `[n, d]`; the log map relative to `level` is applied
    /// here.
    fn embed_inputs<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        cal: Var<'t>,
        work: Var<'t>,
        level: &[f64],
    ) -> Result<Var<'t>> {
        contract!(level.len() == self.d, "reference level has wrong width");
        let n = cal.shape()[0];
        let rel = work
            .add_scalar(LOG_EPS)?
            .log()?
            .sub(tape.row(level).broadcast_rows(n)?)?;
        let x = tape.concat(&[cal, rel], 1)?;
        self.embed_features(b, x)
    }

    fn embed_features<'t>(&self, b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let i = &self.ids;
        x.affine(b[i.xe_w1], b[i.xe_b1])?
            .tanh()?
            .affine(b[i.xe_w2], b[i.xe_b2])
    }

    fn pair_matrix<'t>(
        &self,
        tape: &'t Tape,
        obs: &[&ObservationPair],
        level: &[f64],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n = obs.len();
        let (cal, work) = features(obs, level);
        let mut pairs = Vec::with_capacity(n * (CAL_FEATURES + self.d + 1));
        for (k, o) in obs.iter().enumerate() {
            pairs.extend_from_slice(&cal[k * CAL_FEATURES..(k + 1) * CAL_FEATURES]);
            pairs.extend_from_slice(&work[k * self.d..(k + 1) * self.d]);
            pairs.push(o.cpu);
        }
        let inputs = tape.constant(vec![n, CAL_FEATURES + self.d], {
            let mut v = Vec::with_capacity(n * (CAL_FEATURES + self.d));
            for k in 0..n {
                v.extend_from_slice(&cal[k * CAL_FEATURES..(k + 1) * CAL_FEATURES]);
                v.extend_from_slice(&work[k * self.d..(k + 1) * self.d]);
            }
            v
        })?;
        Ok((
            inputs,
            tape.constant(vec![n, CAL_FEATURES + self.d + 1], pairs)?,
        ))
    }

    /// Gaussian belief over `z` from a set of pairs, recorded on `tape`.
    pub fn latent_on_tape<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        obs: &[&ObservationPair],
    ) -> Result<(Var<'t>, Var<'t>)> {
        contract!(
            !obs.is_empty(),
            "latent encoder needs at least one observation"
        );
        self.check_obs(obs)?;
        let (_, pairs) = self.pair_matrix(tape, obs, &log_level(obs))?;
        let i = &self.ids;
        let s = pairs
            .affine(b[i.le_w1], b[i.le_b1])?
            .tanh()?
            .affine(b[i.le_w2], b[i.le_b2])?
            .mean(0)?
            .reshape(vec![1, self.config.hidden])?;
        let hdn = s.affine(b[i.lz_w], b[i.lz_b])?.tanh()?;
        let mu = hdn.affine(b[i.mu_w], b[i.mu_b])?;
        let sigma = hdn
            .affine(b[i.sd_w], b[i.sd_b])?
            .softplus()?
            .add_scalar(LATENT_STD_FLOOR)?;
        Ok((mu, sigma))
    }

    /// Both encoder paths over a context set.
    pub fn context_on_tape<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        context: &[&ObservationPair],
    ) -> Result<ContextOnTape<'t>> {
        contract!(!context.is_empty(), "context set is empty");
        self.check_obs(context)?;
        let i = &self.ids;
        let level = log_level(context);
        let (inputs, pairs) = self.pair_matrix(tape, context, &level)?;
        let e = pairs
            .affine(b[i.de_w1], b[i.de_b1])?
            .tanh()?
            .affine(b[i.de_w2], b[i.de_b2])?;
        let (sa, _) = multihead_attention(
            tape,
            e.matmul(b[i.sa_q])?,
            e.matmul(b[i.sa_k])?,
            e.matmul(b[i.sa_v])?,
            self.config.heads,
        )?;
        let r = e.add(sa.matmul(b[i.sa_o])?)?;
        let keys = self.embed_features(b, inputs)?.matmul(b[i.ca_k])?;
        let values = r.matmul(b[i.ca_v])?;
        let (mu, sigma) = self.latent_on_tape(tape, b, context)?;
        Ok(ContextOnTape {
            keys,
            values,
            mu,
            sigma,
            level,
        })
    }

    /// Cross-attention readout `r*` for embedded queries `[n, repr]`.
    fn cross_attend<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        q_emb: Var<'t>,
        keys: Var<'t>,
        values: Var<'t>,
    ) -> Result<Var<'t>> {
        let (out, _) = multihead_attention(
            tape,
            q_emb.matmul(b[self.ids.ca_q])?,
            keys,
            values,
            self.config.heads,
        )?;
        out.matmul(b[self.ids.ca_o])
    }

    /// Predictive mean and std `[n, 1]` each, for queries given as calendar
    /// features `[n, 4]` and per-VM workload `[n, d]`, read against a
    /// context's keys, values and reference level.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_on_tape<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        cal: Var<'t>,
        work: Var<'t>,
        keys: Var<'t>,
        values: Var<'t>,
        level: &[f64],
        z: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n = cal.shape()[0];
        let q = self.embed_inputs(tape, b, cal, work, level)?;
        let r = self.cross_attend(tape, b, q, keys, values)?;
        let zb = z.broadcast_rows(n)?;
        let i = &self.ids;
        let out = tape
            .concat(&[q, r, zb], 1)?
            .affine(b[i.dc_w1], b[i.dc_b1])?
            .tanh()?
            .affine(b[i.dc_w2], b[i.dc_b2])?
            .tanh()?
            .affine(b[i.dc_w3], b[i.dc_b3])?;
        let mean = out.slice_cols(0, 1)?.sigmoid()?;
        let std = out.slice_cols(1, 1)?.softplus()?.add_scalar(STD_FLOOR)?;
        Ok((mean, std))
    }

    fn query_vars<'t>(
        &self,
        tape: &'t Tape,
        queries: &[&ObservationPair],
    ) -> Result<(Var<'t>, Var<'t>)> {
        let n = queries.len();
        let mut cal = Vec::with_capacity(n * CAL_FEATURES);
        let mut work = Vec::with_capacity(n * self.d);
        for q in queries {
            contract!(
                q.unit_workload.len() == self.d,
                "query has wrong dimensionality"
            );
            contract!(
                q.unit_workload.iter().all(|x| *x >= 0.0),
                "query unit workload must be nonnegative"
            );
            cal.extend_from_slice(&q.cov.cyclic_features());
            work.extend_from_slice(&q.unit_workload);
        }
        Ok((
            tape.constant(vec![n, CAL_FEATURES], cal)?,
            tape.constant(vec![n, self.d], work)?,
        ))
    }

    /// Deterministic representation `r*` of `context` seen from `query`.
    pub fn encode_deterministic(
        &self,
        context: &[ObservationPair],
        query: &ObservationPair,
    ) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let ctx: Vec<&ObservationPair> = context.iter().collect();
        let enc = self.context_on_tape(&tape, &b, &ctx)?;
        let (cal, work) = self.query_vars(&tape, &[query])?;
        let q = self.embed_inputs(&tape, &b, cal, work, &enc.level)?;
        Ok(self
            .cross_attend(&tape, &b, q, enc.keys, enc.values)?
            .value())
    }

    pub fn encode_latent(&self, observations: &[ObservationPair]) -> Result<LatentBelief> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let obs: Vec<&ObservationPair> = observations.iter().collect();
        let (mu, sigma) = self.latent_on_tape(&tape, &b, &obs)?;
        Ok(LatentBelief {
            mean: mu.value(),
            std: sigma.value(),
        })
    }

    /// Mean of `q(z | context)`.
    pub fn task_embedding(&self, context: &[ObservationPair]) -> Result<Vec<f64>> {
        Ok(self.encode_latent(context)?.mean)
    }

    /// Encodes a context once for repeated frozen-model queries.
    pub fn cache_context(&self, context: &[ObservationPair]) -> Result<ContextCache> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let ctx: Vec<&ObservationPair> = context.iter().collect();
        let enc = self.context_on_tape(&tape, &b, &ctx)?;
        Ok(ContextCache {
            n: context.len(),
            keys: enc.keys.value(),
            values: enc.values.value(),
            belief: LatentBelief {
                mean: enc.mu.value(),
                std: enc.sigma.value(),
            },
            level: enc.level,
        })
    }

    /// Replaces the deterministic-path part of a cache while keeping its
    /// task embedding.
    pub fn refresh_context(
        &self,
        cache: &ContextCache,
        context: &[ObservationPair],
    ) -> Result<ContextCache> {
        let mut fresh = self.cache_context(context)?;
        fresh.belief = cache.belief.clone();
        Ok(fresh)
    }

    /// Predictive mean and std on a tape from a cached context; gradients
    /// flow into `work` (per-VM workload `[n, d]`).
    pub fn predict_cached_on_tape<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        cache: &ContextCache,
        cal: Var<'t>,
        work: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let r = self.config.repr;
        let keys = tape.constant(vec![cache.n, r], cache.keys.clone())?;
        let values = tape.constant(vec![cache.n, r], cache.values.clone())?;
        let z = tape.row(&cache.belief.mean);
        self.decode_on_tape(tape, b, cal, work, keys, values, &cache.level, z)
    }

    /// Predictive mean and std for each query, with `z` fixed at the
    /// context posterior mean.
    pub fn predict(
        &self,
        context: &[ObservationPair],
        queries: &[ObservationPair],
    ) -> Result<Vec<(f64, f64)>> {
        let cache = self.cache_context(context)?;
        self.predict_cached(&cache, queries)
    }

    pub fn predict_cached(
        &self,
        cache: &ContextCache,
        queries: &[ObservationPair],
    ) -> Result<Vec<(f64, f64)>> {
        contract!(!queries.is_empty(), "no queries");
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let q: Vec<&ObservationPair> = queries.iter().collect();
        let (cal, work) = self.query_vars(&tape, &q)?;
        let (m, s) = self.predict_cached_on_tape(&tape, &b, cache, cal, work)?;
        Ok(m.value().into_iter().zip(s.value()).collect())
    }

    /// Point prediction of utilisation at one query input.
    pub fn predict_cpu(
        &self,
        context: &[ObservationPair],
        cov: TimeCovariate,
        unit_workload: &[f64],
    ) -> Result<f64> {
        let q = ObservationPair {
            cov,
            unit_workload: unit_workload.to_vec(),
            cpu: 0.0,
        };
        Ok(self.predict(context, &[q])?[0].0)
    }

    /// Decoder output for explicit `r*`, `z` and reference level.
    pub fn decode(
        &self,
        query: &ObservationPair,
        r: &[f64],
        z: &[f64],
        level: &[f64],
    ) -> Result<(f64, f64)> {
        contract!(r.len() == self.config.repr, "r* has wrong width");
        contract!(z.len() == self.config.latent, "z has wrong width");
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let (cal, work) = self.query_vars(&tape, &[query])?;
        let q = self.embed_inputs(&tape, &b, cal, work, level)?;
        let i = &self.ids;
        let out = tape
            .concat(&[q, tape.row(r), tape.row(z)], 1)?
            .affine(b[i.dc_w1], b[i.dc_b1])?
            .tanh()?
            .affine(b[i.dc_w2], b[i.dc_b2])?
            .tanh()?
            .affine(b[i.dc_w3], b[i.dc_b3])?;
        let v = out.value();
        let sp = if v[1] > 30.0 {
            v[1]
        } else {
            v[1].exp().ln_1p()
        };
        Ok((1.0 / (1.0 + (-v[0]).exp()), sp + STD_FLOOR))
    }

    /// Single-sample ELBO of a task recorded on `tape`. `eps` is the
    /// standard-normal draw used for the reparameterised `z`.
    pub fn elbo_on_tape<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        task: &MetaTask,
        eps: &[f64],
    ) -> Result<(Var<'t>, Var<'t>)> {
        contract!(!task.context.is_empty(), "task has an empty context");
        contract!(!task.target.is_empty(), "task has an empty target");
        contract!(eps.len() == self.config.latent, "noise has wrong width");
        let ctx: Vec<&ObservationPair> = task.context.iter().collect();
        let enc = self.context_on_tape(tape, b, &ctx)?;
        let all = union(&task.context, &task.target);
        let (mu_t, sigma_t) = self.latent_on_tape(tape, b, &all)?;
        let z = mu_t.add(sigma_t.mul(tape.row(eps))?)?;

        let tgt: Vec<&ObservationPair> = task.target.iter().collect();
        let (cal, work) = self.query_vars(tape, &tgt)?;
        let (mean, std) =
            self.decode_on_tape(tape, b, cal, work, enc.keys, enc.values, &enc.level, z)?;
        let y = tape.constant(vec![tgt.len(), 1], tgt.iter().map(|o| o.cpu).collect())?;
        let loglik = gaussian_log_likelihood(mean, std, y)?;
        let kl = kl_on_tape(mu_t, sigma_t, enc.mu, enc.sigma)?;
        Ok((loglik.sub(kl)?, kl))
    }

    /// Single-sample ELBO with noise drawn from `seed`.
    pub fn elbo(&self, task: &MetaTask, seed: u64) -> Result<f64> {
        let eps = standard_normal(self.config.latent, seed);
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        Ok(self.elbo_on_tape(&tape, &b, task, &eps)?.0.item())
    }

    /// KL term of the ELBO, `KL(q(z | context ∪ target) || q(z | context))`.
    pub fn elbo_kl(&self, task: &MetaTask) -> Result<f64> {
        let q_t = self.encode_latent(
            &union(&task.context, &task.target)
                .into_iter()
                .cloned()
                .collect::<Vec<_>>(),
        )?;
        let q_c = self.encode_latent(&task.context)?;
        Ok(kl_diag_gaussian(&q_t, &q_c))
    }

    /// Log-likelihood of the task targets given `z`, with the
    /// deterministic path read from the context.
    fn target_log_likelihood(
        &self,
        task: &MetaTask,
        cache: &ContextCache,
        z: &[f64],
    ) -> Result<f64> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let tgt: Vec<&ObservationPair> = task.target.iter().collect();
        let (cal, work) = self.query_vars(&tape, &tgt)?;
        let r = self.config.repr;
        let keys = tape.constant(vec![cache.n, r], cache.keys.clone())?;
        let values = tape.constant(vec![cache.n, r], cache.values.clone())?;
        let (mean, std) = self.decode_on_tape(
            &tape,
            &b,
            cal,
            work,
            keys,
            values,
            &cache.level,
            tape.row(z),
        )?;
        let y = tape.constant(vec![tgt.len(), 1], tgt.iter().map(|o| o.cpu).collect())?;
        Ok(gaussian_log_likelihood(mean, std, y)?.item())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            serde_json::json!({"kind": "anp", "config": self.config, "d": self.d}),
            self.params.to_entries(),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("anp") {
            return Err(Error::Checkpoint("not a meta-predictor checkpoint".into()));
        }
        let config: AnpConfig = serde_json::from_value(
            meta.get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("metadata lacks `config`".into()))?,
        )?;
        let d: usize = serde_json::from_value(
            meta.get("d")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("metadata lacks `d`".into()))?,
        )?;
        let mut model = AnpModel::new(config, d, 0)?;
        model.params.load_entries(ckpt)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Context followed by the targets that are not already in it.
fn union<'a>(
    context: &'a [ObservationPair],
    target: &'a [ObservationPair],
) -> Vec<&'a ObservationPair> {
    let mut all: Vec<&ObservationPair> = context.iter().collect();
    all.extend(target.iter().filter(|t| !context.contains(t)));
    all
}

fn standard_normal(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Sum of Gaussian log densities.
pub fn gaussian_log_likelihood<'t>(mean: Var<'t>, std: Var<'t>, y: Var<'t>) -> Result<Var<'t>> {
    let half_log_2pi = 0.5 * (std::f64::consts::TAU).ln();
    let z = y.sub(mean)?.div(std)?;
    let n = mean.len() as f64;
    z.square()?
        .scale(-0.5)?
        .sub(std.log()?)?
        .sum_all()?
        .add_scalar(-half_log_2pi * n)
}

/// `KL(N(mq, sq) || N(mp, sp))` summed over dimensions.
pub fn kl_on_tape<'t>(mq: Var<'t>, sq: Var<'t>, mp: Var<'t>, sp: Var<'t>) -> Result<Var<'t>> {
    let log_ratio = sp.log()?.sub(sq.log()?)?;
    let num = sq.square()?.add(mq.sub(mp)?.square()?)?;
    let den = sp.square()?.scale(2.0)?;
    log_ratio.add(num.div(den)?)?.add_scalar(-0.5)?.sum_all()
}

/// Importance-sampled `log p(y_T | x_T, C)` with proposal
/// `q(z | context ∪ target)` and prior `q(z | context)`. Returns the
/// estimate and its delta-method standard error.
pub fn importance_log_likelihood(
    model: &AnpModel,
    task: &MetaTask,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    contract!(samples >= 2, "need at least two importance samples");
    let cache = model.cache_context(&task.context)?;
    let prior = cache.belief.clone();
    let proposal = model.encode_latent(
        &union(&task.context, &task.target)
            .into_iter()
            .cloned()
            .collect::<Vec<_>>(),
    )?;
    let log_normal = |z: &[f64], b: &LatentBelief| -> f64 {
        z.iter()
            .zip(b.mean.iter().zip(&b.std))
            .map(|(x, (m, s))| {
                -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * std::f64::consts::TAU.ln()
            })
            .sum()
    };
    let mut logw = Vec::with_capacity(samples);
    for k in 0..samples {
        let z = sample_latent(&proposal, seed.wrapping_add(k as u64));
        let ll = model.target_log_likelihood(task, &cache, &z)?;
        logw.push(ll + log_normal(&z, &prior) - log_normal(&z, &proposal));
    }
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
    let n = samples as f64;
    let mean_w = w.iter().sum::<f64>() / n;
    let var_w = w.iter().map(|x| (x - mean_w).powi(2)).sum::<f64>() / (n - 1.0);
    let estimate = max + mean_w.ln();
    let se = (var_w / n).sqrt() / mean_w;
    Ok((estimate, se))
}

/// Observation pairs recorded for one application.
#[derive(Debug, Clone, PartialEq)]
pub struct AppObservations {
    pub app_id: String,
    pub obs: Vec<ObservationPair>,
}

impl AppObservations {
    pub fn from_trace(trace: &AppTrace) -> Self {
        AppObservations {
            app_id: trace.series.app_id.clone(),
            obs: (0..trace.series.len())
                .map(|t| ObservationPair {
                    cov: trace.series.covariates[t],
                    unit_workload: trace.unit_workload(t),
                    cpu: trace.cpu[t],
                })
                .collect(),
        }
    }

    /// Context `[start - L, start)` and target `[start, start + H)`.
    pub fn window_task(
        &self,
        start: usize,
        context_len: usize,
        target_len: usize,
    ) -> Result<MetaTask> {
        contract!(
            start >= context_len && start + target_len <= self.obs.len(),
            "window at {start} does not fit in {} observations",
            self.obs.len()
        );
        Ok(MetaTask {
            app_id: self.app_id.clone(),
            context: self.obs[start - context_len..start].to_vec(),
            target: self.obs[start..start + target_len].to_vec(),
        })
    }
}

/// Random training task: a context subset of size uniform in
/// `[L/4, L]` from an `L`-step window and a target subset of size uniform in
/// `[1, H]` from the following `H` steps, with the window inside
/// `[lo, hi)`.
fn sample_task(
    app: &AppObservations,
    lo: usize,
    hi: usize,
    cfg: &AnpConfig,
    rng: &mut impl Rng,
) -> MetaTask {
    let (l, h) = (cfg.context_len, cfg.target_len);
    let start = rng.gen_range(lo + l..=hi - h);
    let mut ctx: Vec<usize> = (start - l..start).collect();
    ctx.shuffle(rng);
    ctx.truncate(rng.gen_range((l / 4).max(1)..=l));
    ctx.sort_unstable();
    let mut tgt: Vec<usize> = (start..start + h).collect();
    tgt.shuffle(rng);
    tgt.truncate(rng.gen_range(1..=h));
    tgt.sort_unstable();
    MetaTask {
        app_id: app.app_id.clone(),
        context: ctx.iter().map(|&i| app.obs[i].clone()).collect(),
        target: tgt.iter().map(|&i| app.obs[i].clone()).collect(),
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MetaHistory {
    /// Per-iteration batch-mean ELBO per target point.
    pub train_elbo: Vec<f64>,
    /// Validation predictive RMSE at each evaluation.
    pub val_rmse: Vec<f64>,
    pub best_iteration: usize,
}

/// Meta-trains on the first `train_end` observations of each application.
/// Validation tasks come from the trailing `val_fraction` of that range.
pub fn train_meta(
    apps: &[AppObservations],
    train_end: usize,
    config: &AnpConfig,
) -> Result<(AnpModel, MetaHistory)> {
    config.validate()?;
    let distinct: std::collections::BTreeSet<&str> =
        apps.iter().map(|a| a.app_id.as_str()).collect();
    contract!(
        distinct.len() >= 2,
        "meta-training needs at least two applications"
    );
    let d = apps[0].obs.first().map_or(0, |o| o.unit_workload.len());
    let span = config.context_len + config.target_len;
    let mut ranges = Vec::with_capacity(apps.len());
    for a in apps {
        let end = train_end.min(a.obs.len());
        let val_len = ((end as f64) * config.val_fraction) as usize;
        let fit_end = end - val_len;
        contract!(
            fit_end >= span,
            "application {} has {} training observations, need {}",
            a.app_id,
            fit_end,
            span
        );
        ranges.push((fit_end, end));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xA9F);
    let mut val_tasks = Vec::new();
    if config.val_fraction > 0.0 {
        for k in 0..config.val_tasks {
            let a = k % apps.len();
            let (fit_end, end) = ranges[a];
            let lo = fit_end.saturating_sub(config.context_len);
            if end >= lo + span {
                let start = rng.gen_range(lo + config.context_len..=end - config.target_len);
                val_tasks.push(apps[a].window_task(
                    start,
                    config.context_len,
                    config.target_len,
                )?);
            }
        }
    }

    let mut model = AnpModel::new(config.clone(), d, config.seed)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut history = MetaHistory::default();
    let mut best = (f64::INFINITY, model.params.flat_values());
    let mut stale = 0;
    for it in 0..config.iterations {
        let tape = Tape::new();
        let b = model.params.bind(&tape);
        let mut terms = Vec::with_capacity(config.tasks_per_batch);
        for _ in 0..config.tasks_per_batch {
            let a = rng.gen_range(0..apps.len());
            let task = sample_task(&apps[a], 0, ranges[a].0, config, &mut rng);
            let eps: Vec<f64> = (0..config.latent)
                .map(|_| rng.sample(StandardNormal))
                .collect();
            let (elbo, _) = model.elbo_on_tape(&tape, &b, &task, &eps)?;
            terms.push(elbo.scale(1.0 / task.target.len() as f64)?);
        }
        let mean_elbo = tape
            .concat(
                &terms
                    .iter()
                    .map(|t| t.reshape(vec![1, 1]))
                    .collect::<Result<Vec<_>>>()?,
                0,
            )?
            .mean_all()?;
        let loss = mean_elbo.neg()?;
        loss.backward()?;
        if !loss.item().is_finite() {
            return Err(Error::Domain(format!(
                "meta-training diverged at iteration {it}"
            )));
        }
        history.train_elbo.push(mean_elbo.item());
        model.params.accumulate_grads(&b);
        if config.clip > 0.0 {
            model.params.clip_grad_norm(config.clip);
        }
        opt.step(&mut model.params)?;

        let last = it + 1 == config.iterations;
        if !val_tasks.is_empty() && ((it + 1) % config.eval_every.max(1) == 0 || last) {
            let rmse = task_rmse(&model, &val_tasks)?;
            history.val_rmse.push(rmse);
            log::debug!(
                "meta iteration {it}: elbo {:.4} val rmse {rmse:.4}",
                mean_elbo.item()
            );
            if rmse < best.0 {
                best = (rmse, model.params.flat_values());
                history.best_iteration = it;
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience.max(1) {
                    break;
                }
            }
        }
    }
    if !val_tasks.is_empty() {
        model.params.set_flat_values(&best.1)?;
    }
    model.params.zero_grads();
    Ok((model, history))
}

/// Predictive-mean RMSE over the targets of a set of tasks.
pub fn task_rmse(model: &AnpModel, tasks: &[MetaTask]) -> Result<f64> {
    let (mut pred, mut truth) = (Vec::new(), Vec::new());
    for t in tasks {
        pred.extend(
            model
                .predict(&t.context, &t.target)?
                .into_iter()
                .map(|(m, _)| m),
        );
        truth.extend(t.target.iter().map(|o| o.cpu));
    }
    Ok(forecast_metrics(&pred, &truth)?.rmse)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetaAppReport {
    pub app_id: String,
    pub anp: Metrics,
    pub context_mean: Metrics,
}

/// Scores window tasks whose targets start every `stride` steps within
/// `[start, end)`: ANP predictive mean against the context-mean baseline.
pub fn evaluate_meta(
    model: &AnpModel,
    apps: &[AppObservations],
    start: usize,
    end: usize,
    stride: usize,
) -> Result<Vec<MetaAppReport>> {
    contract!(stride > 0, "stride must be positive");
    let (l, h) = (model.config.context_len, model.config.target_len);
    let mut out = Vec::with_capacity(apps.len());
    for app in apps {
        let end = end.min(app.obs.len());
        let (mut pred, mut base, mut truth) = (Vec::new(), Vec::new(), Vec::new());
        let mut s = start.max(l);
        while s + h <= end {
            let task = app.window_task(s, l, h)?;
            let mean_c =
                task.context.iter().map(|o| o.cpu).sum::<f64>() / task.context.len() as f64;
            pred.extend(
                model
                    .predict(&task.context, &task.target)?
                    .into_iter()
                    .map(|(m, _)| m),
            );
            base.extend(std::iter::repeat_n(mean_c, h));
            truth.extend(task.target.iter().map(|o| o.cpu));
            s += stride;
        }
        contract!(
            !truth.is_empty(),
            "application {} has no evaluation window",
            app.app_id
        );
        out.push(MetaAppReport {
            app_id: app.app_id.clone(),
            anp: forecast_metrics(&pred, &truth)?,
            context_mean: forecast_metrics(&base, &truth)?,
        });
    }
    Ok(out)
}

pub fn write_context_jsonl(obs: &[ObservationPair], mut w: impl Write) -> Result<()> {
    for o in obs {
        serde_json::to_writer(&mut w, o)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
    }
    Ok(())
}

pub fn read_context_jsonl(r: impl BufRead) -> Result<Vec<ObservationPair>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let o: ObservationPair = serde_json::from_str(&line)?;
        o.validate()?;
        out.push(o);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn tiny() -> AnpConfig {
        AnpConfig {
            repr: 4,
            latent: 3,
            hidden: 5,
            heads: 2,
            context_len: 5,
            target_len: 3,
            ..AnpConfig::default()
        }
    }

    fn obs(n: usize, seed: u64) -> Vec<ObservationPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| ObservationPair {
                cov: TimeCovariate::new(rng.gen_range(0..7), rng.gen_range(0..24)).unwrap(),
                unit_workload: vec![rng.gen_range(0.0..20.0), rng.gen_range(0.0..5.0)],
                cpu: rng.gen_range(0.0..1.0),
            })
            .collect()
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn deterministic_path_is_a_set_function() {
        let m = AnpModel::new(tiny(), 2, 1).unwrap();
        let ctx = obs(7, 2);
        let q = &obs(1, 3)[0];
        let base = m.encode_deterministic(&ctx, q).unwrap();
        let mut perm = ctx.clone();
        perm.reverse();
        perm.swap(0, 3);
        assert!(max_diff(&base, &m.encode_deterministic(&perm, q).unwrap()) < 1e-10);
        let dup: Vec<_> = ctx.iter().chain(&ctx).cloned().collect();
        assert!(max_diff(&base, &m.encode_deterministic(&dup, q).unwrap()) < 1e-10);
        assert!(matches!(
            m.encode_deterministic(&[], q),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn single_point_readout_is_its_value() {
        let m = AnpModel::new(tiny(), 2, 4).unwrap();
        let ctx = obs(1, 5);
        let tape = Tape::new();
        let b = m.params.bind_frozen(&tape);
        let enc = m.context_on_tape(&tape, &b, &[&ctx[0]]).unwrap();
        let expect = enc.values.matmul(b[m.ids.ca_o]).unwrap().value();
        for q in obs(3, 6) {
            let r = m.encode_deterministic(&ctx, &q).unwrap();
            assert!(max_diff(&r, &expect) < 1e-14);
        }
    }

    #[test]
    fn latent_path_is_a_set_function() {
        let m = AnpModel::new(tiny(), 2, 1).unwrap();
        let ctx = obs(6, 7);
        let base = m.encode_latent(&ctx).unwrap();
        let mut perm = ctx.clone();
        perm.rotate_left(2);
        let p = m.encode_latent(&perm).unwrap();
        assert!(max_diff(&base.mean, &p.mean) < 1e-12 && max_diff(&base.std, &p.std) < 1e-12);
        let one = m.encode_latent(&ctx[..1]).unwrap();
        let many = m.encode_latent(&vec![ctx[0].clone(); 5]).unwrap();
        assert!(max_diff(&one.mean, &many.mean) < 1e-12);
        assert!(base.std.iter().all(|s| *s >= LATENT_STD_FLOOR));
        assert!(m.encode_latent(&[]).is_err());
    }

    #[test]
    fn zeroed_decoder_gives_half_and_floor() {
        let mut m = AnpModel::new(tiny(), 2, 3).unwrap();
        m.zero_output_layer();
        let (mean, std) = m
            .decode(&obs(1, 1)[0], &[0.1; 4], &[0.2; 3], &[1.0, 0.5])
            .unwrap();
        assert_eq!(mean, 0.5);
        assert_abs_diff_eq!(std, 2f64.ln() + STD_FLOOR, epsilon = 1e-15);
        let again = m
            .decode(&obs(1, 1)[0], &[0.1; 4], &[0.2; 3], &[1.0, 0.5])
            .unwrap();
        assert_eq!((mean, std), again);
    }

    #[test]
    fn kl_closed_form() {
        let std1 = LatentBelief {
            mean: vec![0.0; 3],
            std: vec![1.0; 3],
        };
        assert_eq!(kl_diag_gaussian(&std1, &std1), 0.0);
        let shifted = LatentBelief {
            mean: vec![1.0; 3],
            std: vec![1.0; 3],
        };
        assert_abs_diff_eq!(kl_diag_gaussian(&shifted, &std1), 1.5, epsilon = 1e-15);
    }

    #[test]
    fn kl_vanishes_when_target_is_inside_context() {
        let m = AnpModel::new(tiny(), 2, 8).unwrap();
        let ctx = obs(6, 9);
        let task = MetaTask {
            app_id: "a".into(),
            context: ctx.clone(),
            target: ctx[1..3].to_vec(),
        };
        assert_eq!(m.elbo_kl(&task).unwrap(), 0.0);
        let tape = Tape::new();
        let b = m.params.bind_frozen(&tape);
        let (_, kl) = m.elbo_on_tape(&tape, &b, &task, &[0.3, -0.2, 1.0]).unwrap();
        assert_eq!(kl.item(), 0.0);
    }

    #[test]
    fn latent_sampling() {
        let belief = LatentBelief {
            mean: vec![0.5, -2.0],
            std: vec![1e-300, 0.3],
        };
        assert_eq!(sample_latent(&belief, 4), sample_latent(&belief, 4));
        assert_eq!(sample_latent(&belief, 4)[0], 0.5);
        let n = 100_000;
        let mut sum = [0.0; 2];
        for k in 0..n {
            let z = sample_latent(&belief, k);
            sum[0] += z[0];
            sum[1] += z[1];
        }
        assert!((sum[1] / n as f64 + 2.0).abs() < 3.0 * 0.3 / (n as f64).sqrt());
    }

    #[test]
    fn predictions_are_probabilities() {
        let m = AnpModel::new(tiny(), 2, 10).unwrap();
        let ctx = obs(5, 11);
        for (mean, std) in m.predict(&ctx, &obs(20, 12)).unwrap() {
            assert!((0.0..=1.0).contains(&mean));
            assert!(std >= STD_FLOOR);
        }
        let e1 = m.task_embedding(&ctx).unwrap();
        assert_eq!(e1, m.task_embedding(&ctx).unwrap());
        assert!(matches!(
            m.predict_cpu(&ctx, TimeCovariate::new(0, 0).unwrap(), &[-1.0, 0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cached_prediction_matches_direct() {
        let m = AnpModel::new(tiny(), 2, 13).unwrap();
        let ctx = obs(5, 14);
        let q = obs(4, 15);
        let cache = m.cache_context(&ctx).unwrap();
        assert_eq!(
            m.predict(&ctx, &q).unwrap(),
            m.predict_cached(&cache, &q).unwrap()
        );
    }

    #[test]
    fn jsonl_round_trip() {
        let ctx = obs(4, 16);
        let mut buf = Vec::new();
        write_context_jsonl(&ctx, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().next().unwrap().contains("\"day_of_week\""));
        assert_eq!(read_context_jsonl(buf.as_slice()).unwrap(), ctx);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = AnpModel::new(tiny(), 2, 17).unwrap();
        let back = AnpModel::from_checkpoint(
            &Checkpoint::from_bytes(&m.to_checkpoint().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        let ctx = obs(5, 18);
        assert_eq!(
            back.predict(&ctx, &obs(3, 19)).unwrap(),
            m.predict(&ctx, &obs(3, 19)).unwrap()
        );
    }

    #[test]
    fn training_requires_two_apps() {
        let a = AppObservations {
            app_id: "a".into(),
            obs: obs(50, 1),
        };
        assert!(matches!(
            train_meta(&[a.clone(), a], 50, &tiny()),
            Err(Error::Contract(_))
        ));
    }
}
