//! Scaling decisions as a small deterministic MDP.
//!
//! One MDP step is one decision epoch. The state holds the calendar
//! covariate and per-VM workload for the coming epoch, the task embedding
//! `z`, the predicted utilisation at the current VM count and the VM count
//! itself. An action `a ∈ [-0.5, 2]` rescales the VM count to `l·(1+a)`;
//! the reward penalises squared distance of the predicted utilisation from
//! the target plus a quadratic switching cost `η·(a·l)²`.
//!
//! The policy is trained by differentiating a short unrolled rollout of
//! the learned models with respect to the policy weights.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::forecaster::DapmModel;
use crate::meta::{AnpModel, ContextCache, ObservationPair};
use crate::tensor::{Adam, AdamConfig, Bound, Checkpoint, ParamId, Params, Tape, Var};
use crate::workload::{AppSpec, CpuResponse, EnvState, Environment, TimeCovariate};

pub const A_MIN: f64 = -0.5;
pub const A_MAX: f64 = 2.0;
/// Resolution of the grid oracle.
pub const GRID_STEP: f64 = 1e-3;

/// Adjustment rate of the VM count.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Action(f64);

impl Action {
    pub fn new(a: f64) -> Result<Self> {
        contract!(
            (A_MIN..=A_MAX).contains(&a),
            "action {a} outside [{A_MIN}, {A_MAX}]"
        );
        Ok(Action(a))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn apply_action(l: f64, a: Action) -> Result<f64> {
    contract!(l > 0.0, "VM count must be positive, got {l}");
    Ok(l * (1.0 + a.0))
}

pub fn unit_workload(x: &[f64], l: f64) -> Result<Vec<f64>> {
    contract!(l > 0.0, "VM count must be positive, got {l}");
    Ok(x.iter().map(|v| v / l).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardParams {
    pub c_target: f64,
    /// Switching-cost weight on `(a·l)²`.
    pub eta: f64,
    pub gamma: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        RewardParams {
            c_target: 0.40,
            eta: 0.0,
            gamma: 0.95,
        }
    }
}

impl RewardParams {
    /// Switching cost scaled so that a full unit adjustment at `l_max` VMs
    /// costs `scale · c_target²`.
    pub fn scaled_eta(c_target: f64, l_max: f64, scale: f64) -> f64 {
        scale * c_target * c_target / (l_max * l_max)
    }

    pub fn validate(&self) -> Result<()> {
        contract!(
            self.c_target > 0.0 && self.c_target < 1.0,
            "c_target must lie in (0, 1)"
        );
        contract!(self.eta >= 0.0, "eta must be nonnegative");
        contract!((0.0..1.0).contains(&self.gamma), "gamma must lie in [0, 1)");
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingState {
    pub cov: TimeCovariate,
    pub unit_workload: Vec<f64>,
    pub z: Vec<f64>,
    pub c_hat: f64,
    pub l: f64,
}

impl ScalingState {
    pub fn total_workload(&self) -> Vec<f64> {
        self.unit_workload.iter().map(|x| x * self.l).collect()
    }
}

/// Differentiable map from per-VM workload to predicted utilisation.
pub trait CpuModel {
    fn d(&self) -> usize;

    /// Utilisation `[1, 1]` for per-VM workload `work` `[1, d]`.
    fn predict_on_tape<'t>(
        &self,
        tape: &'t Tape,
        cov: TimeCovariate,
        work: Var<'t>,
    ) -> Result<Var<'t>>;

    fn predict(&self, cov: TimeCovariate, work: &[f64]) -> Result<f64> {
        let tape = Tape::new();
        let w = tape.row(work);
        Ok(self.predict_on_tape(&tape, cov, w)?.item())
    }
}

/// The environment's ground-truth response, written with tape ops.
#[derive(Debug, Clone)]
pub struct AnalyticCpu {
    pub response: CpuResponse,
}

impl CpuModel for AnalyticCpu {
    fn d(&self) -> usize {
        self.response.weights.len()
    }

    fn predict_on_tape<'t>(
        &self,
        tape: &'t Tape,
        _cov: TimeCovariate,
        work: Var<'t>,
    ) -> Result<Var<'t>> {
        let r = &self.response;
        let shaped = if r.curvature == 0.0 {
            work
        } else {
            work.scale(r.curvature)?.log1p()?.scale(1.0 / r.curvature)?
        };
        let w = tape.constant(vec![r.weights.len(), 1], r.weights.clone())?;
        shaped.matmul(w)?.add_scalar(r.bias)?.clamp(0.0, r.cap)
    }
}

/// A trained meta-predictor conditioned on one application's context.
pub struct AnpCpu<'a> {
    pub model: &'a AnpModel,
    pub cache: ContextCache,
}

impl CpuModel for AnpCpu<'_> {
    fn d(&self) -> usize {
        self.model.d
    }

    fn predict_on_tape<'t>(
        &self,
        tape: &'t Tape,
        cov: TimeCovariate,
        work: Var<'t>,
    ) -> Result<Var<'t>> {
        let b = self.model.params().bind_frozen(tape);
        let cal = tape.row(&cov.cyclic_features());
        let (mean, _) = self
            .model
            .predict_cached_on_tape(tape, &b, &self.cache, cal, work)?;
        Ok(mean)
    }
}

fn switching_cost(a: f64, l: f64, params: &RewardParams) -> f64 {
    params.eta * (a * l).powi(2)
}

/// One-step reward of taking `a` in `s`.
pub fn reward(
    s: &ScalingState,
    a: f64,
    model: &dyn CpuModel,
    params: &RewardParams,
) -> Result<f64> {
    let a = Action::new(a)?;
    let l_new = apply_action(s.l, a)?;
    let x = s.total_workload();
    let c = model.predict(s.cov, &unit_workload(&x, l_new)?)?;
    Ok(-(c - params.c_target).powi(2) - switching_cost(a.0, s.l, params))
}

/// Next state after acting `a` when the coming epoch's workload is
/// forecast as `x_next` under covariate `u_next`.
pub fn transition(
    s: &ScalingState,
    a: f64,
    x_next: &[f64],
    u_next: TimeCovariate,
    model: &dyn CpuModel,
) -> Result<ScalingState> {
    let l_new = apply_action(s.l, Action::new(a)?)?;
    let unit = unit_workload(x_next, l_new)?;
    let c_hat = model.predict(u_next, &unit)?;
    Ok(ScalingState {
        cov: u_next,
        unit_workload: unit,
        z: s.z.clone(),
        c_hat,
        l: l_new,
    })
}

/// Best action on a `1e-3` grid over `[-0.5, 2]` for the one-step reward;
/// ties go to the lowest action.
pub fn one_step_oracle(
    s: &ScalingState,
    model: &dyn CpuModel,
    params: &RewardParams,
) -> Result<f64> {
    let n = ((A_MAX - A_MIN) / GRID_STEP).round() as usize;
    let mut best = (f64::NEG_INFINITY, A_MIN);
    for k in 0..=n {
        let a = (A_MIN + k as f64 * GRID_STEP).min(A_MAX);
        let r = reward(s, a, model, params)?;
        if r > best.0 {
            best = (r, a);
        }
    }
    Ok(best.1)
}

/// Action whose new VM count puts the analytic response exactly at
/// `c_target`; `None` when no such count exists.
pub fn closed_form_action(response: &CpuResponse, x: &[f64], l: f64, c_target: f64) -> Option<f64> {
    response
        .vm_count_for_target(x, c_target)
        .map(|l_star| l_star / l - 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    /// Number of transitions in the value unroll; the value has
    /// `horizon + 1` reward terms.
    pub horizon: usize,
    pub lr: f64,
    pub iterations: usize,
    pub batch: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            hidden: 64,
            horizon: 1,
            lr: 3e-3,
            iterations: 600,
            batch: 64,
            clip: 10.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct PolicyIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    w3: ParamId,
    b3: ParamId,
}

/// Deterministic squashed-MLP policy.
#[derive(Debug, Clone)]
pub struct PolicyModel {
    pub config: PolicyConfig,
    pub d: usize,
    /// Task embedding width (0 when no embedding is used).
    pub dz: usize,
    params: Params,
    ids: PolicyIds,
}

const POLICY_EXTRA: usize = 6;

impl PolicyModel {
    pub fn new(config: PolicyConfig, d: usize, dz: usize, seed: u64) -> Result<Self> {
        contract!(d > 0 && config.hidden > 0, "widths must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let fin = POLICY_EXTRA + dz;
        let h = config.hidden;
        let ids = PolicyIds {
            w1: p.add_weight("pi.w1", fin, h, &mut rng),
            b1: p.add_bias("pi.b1", h),
            w2: p.add_weight("pi.w2", h, h, &mut rng),
            b2: p.add_bias("pi.b2", h),
            w3: p.add_weight("pi.w3", h, 1, &mut rng),
            b3: p.add_bias("pi.b3", 1),
        };
        Ok(PolicyModel {
            config,
            d,
            dz,
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
        for id in [self.ids.w3, self.ids.b3] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Flattened state `[calendar(4); z; ĉ; ln l]` on a tape. The unit
    /// workload enters only through ĉ, which is already expressed on the
    /// utilization scale; raw workload magnitudes differ by orders of
    /// magnitude between applications and do not transfer to unseen ones.
    fn features_on_tape<'t>(
        &self,
        tape: &'t Tape,
        cov: TimeCovariate,
        z: &[f64],
        c_hat: Var<'t>,
        l: Var<'t>,
    ) -> Result<Var<'t>> {
        let cal = tape.row(&cov.cyclic_features());
        let mut parts = vec![cal];
        if !z.is_empty() {
            parts.push(tape.row(z));
        }
        parts.push(c_hat.reshape(vec![1, 1])?);
        parts.push(l.reshape(vec![1, 1])?.log()?.scale(0.2)?);
        tape.concat(&parts, 1)
    }

    fn act_on_tape<'t>(&self, b: &Bound<'t>, feats: Var<'t>) -> Result<Var<'t>> {
        let i = &self.ids;
        let o = feats
            .affine(b[i.w1], b[i.b1])?
            .tanh()?
            .affine(b[i.w2], b[i.b2])?
            .tanh()?
            .affine(b[i.w3], b[i.b3])?;
        o.sigmoid()?.scale(A_MAX - A_MIN)?.add_scalar(A_MIN)
    }

    /// `a = -0.5 + 2.5·sigmoid(MLP(s))`.
    pub fn policy_forward(&self, s: &ScalingState) -> Result<f64> {
        contract!(
            s.unit_workload.len() == self.d,
            "state workload has wrong width"
        );
        contract!(s.z.len() == self.dz, "state embedding has wrong width");
        contract!(s.l > 0.0, "VM count must be positive");
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let c = tape.scalar(s.c_hat);
        let l = tape.scalar(s.l);
        let f = self.features_on_tape(&tape, s.cov, &s.z, c, l)?;
        Ok(self.act_on_tape(&b, f)?.item())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(
            serde_json::json!({"kind": "policy", "config": self.config, "d": self.d, "dz": self.dz}),
            self.params.to_entries(),
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("policy") {
            return Err(Error::Checkpoint("not a policy checkpoint".into()));
        }
        let get = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")))
        };
        let config: PolicyConfig = serde_json::from_value(get("config")?)?;
        let d: usize = serde_json::from_value(get("d")?)?;
        let dz: usize = serde_json::from_value(get("dz")?)?;
        let mut p = PolicyModel::new(config, d, dz, 0)?;
        p.params.load_entries(ckpt)?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Start of a value unroll: the epoch covariates and forecast epoch-mean
/// workloads for `horizon + 1` epochs, the VM count in force and the task
/// embedding. `model` indexes the CPU model to use.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStart {
    pub covs: Vec<TimeCovariate>,
    pub workloads: Vec<Vec<f64>>,
    pub l0: f64,
    pub z: Vec<f64>,
    pub model: usize,
}

impl RolloutStart {
    pub fn initial_state(&self, model: &dyn CpuModel) -> Result<ScalingState> {
        let unit = unit_workload(&self.workloads[0], self.l0)?;
        Ok(ScalingState {
            cov: self.covs[0],
            c_hat: model.predict(self.covs[0], &unit)?,
            unit_workload: unit,
            z: self.z.clone(),
            l: self.l0,
        })
    }
}

/// Discounted unrolled value of `start` under `policy`, recorded on `tape`
/// with the policy bound as `b`.
pub fn rollout_on_tape<'t>(
    tape: &'t Tape,
    b: &Bound<'t>,
    policy: &PolicyModel,
    start: &RolloutStart,
    model: &dyn CpuModel,
    params: &RewardParams,
) -> Result<Var<'t>> {
    let steps = policy.config.horizon + 1;
    contract!(
        start.covs.len() >= steps && start.workloads.len() >= steps,
        "unroll of {steps} epochs needs as many forecasts"
    );
    contract!(start.l0 > 0.0, "initial VM count must be positive");
    let mut l = tape.scalar(start.l0).reshape(vec![1, 1])?;
    let mut unit = tape.row(&start.workloads[0]).div(l)?;
    let mut c_hat = model.predict_on_tape(tape, start.covs[0], unit)?;
    let mut value = tape.scalar(0.0);
    let mut discount = 1.0;
    for k in 0..steps {
        let feats = policy.features_on_tape(tape, start.covs[k], &start.z, c_hat, l)?;
        let a = policy.act_on_tape(b, feats)?;
        let l_new = l.mul(a.add_scalar(1.0)?)?;
        let x = tape.row(&start.workloads[k]);
        let c_new = model.predict_on_tape(tape, start.covs[k], x.div(l_new)?)?;
        let miss = c_new.add_scalar(-params.c_target)?.square()?;
        let switch = a.mul(l)?.square()?.scale(params.eta)?;
        let r = miss.add(switch)?.neg()?.reshape(vec![])?;
        value = value.add(r.scale(discount)?)?;
        discount *= params.gamma;
        if k + 1 < steps {
            l = l_new;
            unit = tape.row(&start.workloads[k + 1]).div(l)?;
            c_hat = model.predict_on_tape(tape, start.covs[k + 1], unit)?;
        }
    }
    Ok(value)
}

pub fn rollout_value(
    policy: &PolicyModel,
    start: &RolloutStart,
    model: &dyn CpuModel,
    params: &RewardParams,
) -> Result<f64> {
    let tape = Tape::new();
    let b = policy.params.bind_frozen(&tape);
    Ok(rollout_on_tape(&tape, &b, policy, start, model, params)?.item())
}

/// Batch-mean rollout value and its flat gradient with respect to the
/// policy parameters.
pub fn value_and_grad(
    policy: &PolicyModel,
    batch: &[&RolloutStart],
    models: &[&dyn CpuModel],
    params: &RewardParams,
) -> Result<(f64, Vec<f64>)> {
    contract!(!batch.is_empty(), "empty rollout batch");
    let tape = Tape::new();
    let b = policy.params.bind(&tape);
    let mut total = tape.scalar(0.0);
    for s in batch {
        let m = models
            .get(s.model)
            .ok_or_else(|| Error::Contract(format!("no cpu model #{}", s.model)))?;
        total = total.add(rollout_on_tape(&tape, &b, policy, s, *m, params)?)?;
    }
    let mean = total.scale(1.0 / batch.len() as f64)?;
    mean.backward()?;
    Ok((mean.item(), policy.params.flat_grads_of(&b)))
}

/// One Adam ascent step on the batch-mean value. Returns the value before
/// the step.
pub fn policy_update(
    policy: &mut PolicyModel,
    opt: &mut Adam,
    batch: &[&RolloutStart],
    models: &[&dyn CpuModel],
    params: &RewardParams,
) -> Result<f64> {
    let (v, g) = value_and_grad(policy, batch, models, params)?;
    if !v.is_finite() {
        return Err(Error::Domain("rollout value is not finite".into()));
    }
    let mut off = 0;
    for t in policy.params.tensors_mut() {
        let n = t.len();
        // ascent: hand the optimizer the negated gradient
        t.grad = Some(g[off..off + n].iter().map(|x| -x).collect());
        off += n;
    }
    if policy.config.clip > 0.0 {
        policy.params.clip_grad_norm(policy.config.clip);
    }
    opt.step(&mut policy.params)?;
    Ok(v)
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PolicyHistory {
    pub value: Vec<f64>,
}

/// Trains a fresh policy on a fixed pool of rollout starts.
pub fn train_policy(
    starts: &[RolloutStart],
    models: &[&dyn CpuModel],
    params: &RewardParams,
    config: &PolicyConfig,
) -> Result<(PolicyModel, PolicyHistory)> {
    params.validate()?;
    contract!(!starts.is_empty(), "no rollout starts");
    contract!(!models.is_empty(), "no cpu models");
    let d = models[0].d();
    let dz = starts[0].z.len();
    contract!(
        starts.iter().all(|s| s.z.len() == dz),
        "rollout starts disagree on embedding width"
    );
    let mut policy = PolicyModel::new(config.clone(), d, dz, config.seed)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &policy.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9011C7);
    let mut order: Vec<usize> = (0..starts.len()).collect();
    let mut cursor = order.len();
    let mut history = PolicyHistory::default();
    for _ in 0..config.iterations {
        let mut batch = Vec::with_capacity(config.batch);
        while batch.len() < config.batch.min(starts.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&starts[order[cursor]]);
            cursor += 1;
        }
        history.value.push(policy_update(
            &mut policy,
            &mut opt,
            &batch,
            models,
            params,
        )?);
    }
    Ok((policy, history))
}

// ---------------------------------------------------------------------------
// Episodes

/// Everything a controller may look at when deciding an epoch's action.
pub struct Decision<'a> {
    pub state: &'a ScalingState,
    /// Workload the models expect over the epoch (epoch mean).
    pub forecast_mean: &'a [f64],
    /// Realised epoch-mean workload, visible only to oracles.
    pub true_mean: &'a [f64],
    /// Average realised utilisation over the previous epoch.
    pub last_cpu: Option<f64>,
    pub spec: &'a AppSpec,
}

pub trait Controller {
    fn name(&self) -> &str;
    fn decide(&mut self, d: &Decision<'_>) -> Result<f64>;
}

pub struct LearnedController<'a> {
    pub policy: &'a PolicyModel,
}

impl Controller for LearnedController<'_> {
    fn name(&self) -> &str {
        "learned"
    }

    fn decide(&mut self, d: &Decision<'_>) -> Result<f64> {
        self.policy.policy_forward(d.state)
    }
}

/// Grid oracle on the true response and the realised workload.
pub struct OracleController {
    pub params: RewardParams,
}

impl Controller for OracleController {
    fn name(&self) -> &str {
        "oracle"
    }

    fn decide(&mut self, d: &Decision<'_>) -> Result<f64> {
        let model = AnalyticCpu {
            response: d.spec.cpu_response.clone(),
        };
        let l = d.state.l;
        let unit = unit_workload(d.true_mean, l)?;
        let s = ScalingState {
            cov: d.state.cov,
            c_hat: model.predict(d.state.cov, &unit)?,
            unit_workload: unit,
            z: Vec::new(),
            l,
        };
        one_step_oracle(&s, &model, &self.params)
    }
}

/// Reactive threshold rule: scale out by `step` when last epoch's
/// utilisation exceeded `high`, scale in by `step` when it fell below `low`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuleController {
    pub low: f64,
    pub high: f64,
    pub step: f64,
}

impl Default for RuleController {
    fn default() -> Self {
        RuleController {
            low: 0.35,
            high: 0.45,
            step: 0.25,
        }
    }
}

impl RuleController {
    pub fn new(low: f64, high: f64, step: f64, c_target: f64) -> Result<Self> {
        contract!(
            low < c_target && c_target < high,
            "thresholds need low < target < high, got {low} / {c_target} / {high}"
        );
        contract!(step > 0.0, "rule step must be positive");
        Ok(RuleController { low, high, step })
    }
}

impl Controller for RuleController {
    fn name(&self) -> &str {
        "rule"
    }

    fn decide(&mut self, d: &Decision<'_>) -> Result<f64> {
        let a = match d.last_cpu {
            Some(c) if c > self.high => self.step,
            Some(c) if c < self.low => -self.step,
            _ => 0.0,
        };
        Ok(a.clamp(A_MIN, A_MAX))
    }
}

/// Keeps the VM count fixed.
pub struct HoldController;

impl Controller for HoldController {
    fn name(&self) -> &str {
        "hold"
    }

    fn decide(&mut self, _d: &Decision<'_>) -> Result<f64> {
        Ok(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    /// First trace step of the episode.
    pub start: usize,
    /// Episode length in steps.
    pub steps: usize,
    /// Steps per decision epoch.
    pub epoch_steps: usize,
}

/// Learned models available to an episode. A missing forecaster means
/// perfect workload foresight; a missing meta-predictor means the true
/// response stands in for predictions (and `z` is empty).
#[derive(Clone, Copy)]
pub struct EpisodeModels<'a> {
    pub forecaster: Option<&'a DapmModel>,
    pub anp: Option<&'a AnpModel>,
    pub context_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub timestamp: i64,
    pub app_id: String,
    pub vm_count: u32,
    pub action: f64,
    pub cpu_realized: f64,
    pub cpu_predicted: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTrace {
    pub app_id: String,
    pub controller: String,
    pub rows: Vec<TraceRow>,
    pub epoch_steps: usize,
    /// Task embedding in force at each decision.
    pub embeddings: Vec<Vec<f64>>,
    /// Decisions whose VM count had to be clamped up to one.
    pub clamped: usize,
}

impl ScalingTrace {
    /// Realised utilisation averaged over each decision epoch.
    pub fn epoch_cpu(&self) -> Vec<f64> {
        self.rows
            .chunks(self.epoch_steps.max(1))
            .map(|c| c.iter().map(|r| r.cpu_realized).sum::<f64>() / c.len() as f64)
            .collect()
    }

    pub fn vm_steps(&self) -> u64 {
        self.rows.iter().map(|r| u64::from(r.vm_count)).sum()
    }
}

pub const TRACE_HEADER: [&str; 7] = [
    "timestamp",
    "app_id",
    "vm_count",
    "action",
    "cpu_realized",
    "cpu_predicted",
    "reward",
];

pub fn write_traces_csv<'a>(
    traces: impl IntoIterator<Item = &'a ScalingTrace>,
    w: impl Write,
) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(TRACE_HEADER)?;
    for t in traces {
        for r in &t.rows {
            out.serialize(r)?;
        }
    }
    out.flush().map_err(|e| Error::io("<trace csv>", e))?;
    Ok(())
}

pub fn read_traces_csv(r: impl std::io::Read) -> Result<Vec<TraceRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != TRACE_HEADER {
        return Err(Error::Config(format!(
            "unexpected scaling trace header {header:?}"
        )));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

fn epoch_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; rows[0].len()];
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, x)| *a += x);
    }
    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    acc
}

/// Replays `schedule` on `env`, letting `controller` pick one action per
/// epoch. `history` supplies observations before the episode for the
/// meta-predictor's context; realised observations are appended as the
/// episode runs. The task embedding is computed once, at the start.
#[allow(clippy::too_many_arguments)]
pub fn run_episode(
    controller: &mut dyn Controller,
    models: EpisodeModels<'_>,
    env: &Environment,
    history: &[ObservationPair],
    initial_vms: f64,
    schedule: Schedule,
    params: &RewardParams,
) -> Result<ScalingTrace> {
    params.validate()?;
    let series = env.series();
    contract!(schedule.epoch_steps > 0, "epoch length must be positive");
    contract!(
        schedule.start + schedule.steps <= series.len(),
        "episode runs past the end of the trace"
    );
    contract!(initial_vms > 0.0, "initial VM count must be positive");
    let spec = env.spec();
    let truth = AnalyticCpu {
        response: spec.cpu_response.clone(),
    };
    let mut context: Vec<ObservationPair> = history.to_vec();
    let keep = models.context_len.max(1);
    let trim = |ctx: &mut Vec<ObservationPair>| {
        if ctx.len() > keep {
            ctx.drain(..ctx.len() - keep);
        }
    };
    trim(&mut context);
    let mut cache = match models.anp {
        Some(anp) => Some(anp.cache_context(&context)?),
        None => None,
    };
    let z: Vec<f64> = cache
        .as_ref()
        .map(|c| c.belief.mean.clone())
        .unwrap_or_default();

    let mut trace = ScalingTrace {
        app_id: spec.app_id.clone(),
        controller: controller.name().to_string(),
        rows: Vec::with_capacity(schedule.steps),
        epoch_steps: schedule.epoch_steps,
        embeddings: Vec::new(),
        clamped: 0,
    };
    let mut state = EnvState {
        t: schedule.start,
        vm_count: initial_vms,
        cpu_history: Vec::new(),
    };
    let mut l = initial_vms;
    let mut last_cpu = None;
    let end = schedule.start + schedule.steps;
    while state.t < end {
        let t = state.t;
        let len = schedule.epoch_steps.min(end - t);
        let truth_rows = &series.values[t..t + len];
        let forecast_rows = match models.forecaster {
            Some(f) => {
                let mut rows = f.forecast_at(series, t)?;
                contract!(rows.len() >= len, "forecast horizon shorter than an epoch");
                rows.truncate(len);
                rows
            }
            None => truth_rows.to_vec(),
        };
        let x_hat = epoch_mean(&forecast_rows);
        let x_true = epoch_mean(truth_rows);
        let cov = series.covariates[t];
        if let (Some(anp), Some(c)) = (models.anp, cache.as_mut()) {
            if t > schedule.start {
                *c = anp.refresh_context(c, &context)?;
            }
        }
        let cpu_model: Box<dyn CpuModel + '_> = match (models.anp, &cache) {
            (Some(anp), Some(c)) => Box::new(AnpCpu {
                model: anp,
                cache: c.clone(),
            }),
            _ => Box::new(truth.clone()),
        };
        let unit = unit_workload(&x_hat, l)?;
        let s = ScalingState {
            cov,
            c_hat: cpu_model.predict(cov, &unit)?,
            unit_workload: unit,
            z: z.clone(),
            l,
        };
        let a = controller.decide(&Decision {
            state: &s,
            forecast_mean: &x_hat,
            true_mean: &x_true,
            last_cpu,
            spec,
        })?;
        let a = Action::new(a)?.value();
        let requested = l * (1.0 + a);
        trace.embeddings.push(z.clone());
        let mut epoch_cpu = 0.0;
        #[allow(clippy::needless_range_loop)]
        for k in 0..len {
            let rec = env.step(&state, requested)?;
            if k == 0 && rec.clamped {
                trace.clamped += 1;
            }
            let vms = f64::from(rec.executed_vms);
            let predicted = cpu_model.predict(
                series.covariates[t + k],
                &unit_workload(&forecast_rows[k], vms)?,
            )?;
            let mut r = -(rec.realized_cpu - params.c_target).powi(2);
            if k == 0 {
                r -= switching_cost(a, l, params);
            }
            trace.rows.push(TraceRow {
                timestamp: series.timestamps[t + k],
                app_id: spec.app_id.clone(),
                vm_count: rec.executed_vms,
                action: a,
                cpu_realized: rec.realized_cpu,
                cpu_predicted: predicted,
                reward: r,
            });
            context.push(ObservationPair {
                cov: series.covariates[t + k],
                unit_workload: rec.unit_workload.clone(),
                cpu: rec.realized_cpu,
            });
            epoch_cpu += rec.realized_cpu;
            state = rec.state;
            state.cpu_history.clear();
        }
        trim(&mut context);
        last_cpu = Some(epoch_cpu / len as f64);
        l = state.vm_count;
    }
    Ok(trace)
}
