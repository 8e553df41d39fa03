//! Pipeline orchestration, evaluation and reporting.
//!
//! A run lives in one output directory:
//!
//! ```text
//! <out>/data/            fleet.json + one CSV per application
//! <out>/forecaster.ckpt  workload forecaster
//! <out>/meta.ckpt        CPU meta-predictor
//! <out>/policy.ckpt      scaling policy
//! <out>/traces/<method>-seed<k>.csv
//! <out>/report.json
//! ```
//!
//! Stages run in order (data, forecaster, meta-predictor, policy,
//! evaluation). Each training stage can be skipped, in which case its
//! checkpoint is loaded from the output directory instead.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::forecaster::{
    evaluate_forecaster, forecast_metrics, train_forecaster, DapmModel, ForecastConfig, Metrics,
};
use crate::meta::{
    evaluate_meta, train_meta, AnpConfig, AnpModel, AppObservations, ContextCache, ObservationPair,
};
use crate::scaler::{
    run_episode, train_policy, AnpCpu, Controller, CpuModel, EpisodeModels, LearnedController,
    OracleController, PolicyConfig, PolicyModel, RewardParams, RolloutStart, RuleController,
    ScalingTrace, Schedule, TraceRow,
};
use crate::workload::{
    generate_dataset, load_dataset, write_dataset, DataOptions, Dataset, Environment,
};

pub const STAGE_DATA: &str = "gen-data";
pub const STAGE_FORECASTER: &str = "train-forecaster";
pub const STAGE_META: &str = "train-meta";
pub const STAGE_POLICY: &str = "train-policy";
pub const STAGE_EVALUATE: &str = "evaluate";

/// Fraction of entries within `band` of `c_target`, inclusive.
pub fn rcs(cpu: &[f64], c_target: f64, band: f64) -> Result<f64> {
    contract!(!cpu.is_empty(), "RCS of an empty trace");
    contract!(band > 0.0, "band must be positive");
    let hits = cpu.iter().filter(|c| (*c - c_target).abs() <= band).count();
    Ok(hits as f64 / cpu.len() as f64)
}

/// RCS of a scaling trace, scored on epoch-average utilisation.
pub fn trace_rcs(trace: &ScalingTrace, c_target: f64, band: f64) -> Result<f64> {
    rcs(&trace.epoch_cpu(), c_target, band)
}

/// RCS per application recounted from persisted trace rows, which hold
/// applications back to back in `epoch_steps` chunks.
pub fn rcs_from_rows(
    rows: &[TraceRow],
    epoch_steps: usize,
    c_target: f64,
    band: f64,
) -> Result<BTreeMap<String, f64>> {
    contract!(epoch_steps > 0, "epoch length must be positive");
    let mut by_app: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_app
            .entry(r.app_id.clone())
            .or_default()
            .push(r.cpu_realized);
    }
    by_app
        .into_iter()
        .map(|(app, cpu)| {
            let epochs: Vec<f64> = cpu
                .chunks(epoch_steps)
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect();
            Ok((app, rcs(&epochs, c_target, band)?))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub c_target: f64,
    pub gamma: f64,
    /// Explicit switching-cost weight. When absent it is derived from
    /// `eta_scale` and the largest VM count in the fleet history.
    pub eta: Option<f64>,
    pub eta_scale: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            c_target: 0.40,
            gamma: 0.95,
            eta: None,
            eta_scale: 0.01,
        }
    }
}

impl RewardConfig {
    pub fn resolve(&self, data: &Dataset) -> RewardParams {
        let eta = self.eta.unwrap_or_else(|| {
            let l_max = data
                .traces
                .iter()
                .flat_map(|t| t.vm_count.iter())
                .copied()
                .max()
                .unwrap_or(1);
            RewardParams::scaled_eta(self.c_target, 2.0 * f64::from(l_max), self.eta_scale)
        });
        RewardParams {
            c_target: self.c_target,
            eta,
            gamma: self.gamma,
        }
    }
}

/// How policy-training start states are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StartConfig {
    /// Distinct (application, time) contexts.
    pub contexts: usize,
    /// VM counts drawn per context.
    pub states_per_context: usize,
    /// Initial VM counts are chosen so predicted utilisation is uniform on
    /// this range.
    pub c_hat_min: f64,
    pub c_hat_max: f64,
    pub seed: u64,
}

impl Default for StartConfig {
    fn default() -> Self {
        StartConfig {
            contexts: 256,
            states_per_context: 4,
            c_hat_min: 0.15,
            c_hat_max: 0.75,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub band: f64,
    pub seeds: Vec<u64>,
    pub rule: RuleController,
    /// Initial VM counts are the last historical count times
    /// `2^u`, `u ~ U(-spread, spread)` drawn per seed.
    pub initial_spread: f64,
    /// Spacing of forecast origins when scoring the forecaster.
    pub forecast_stride: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            band: 0.02,
            seeds: vec![0, 1, 2, 3, 4],
            rule: RuleController::default(),
            initial_spread: 0.5,
            forecast_stride: 24,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageFlags {
    pub skip_data: bool,
    pub skip_forecaster: bool,
    pub skip_meta: bool,
    pub skip_policy: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub out_dir: PathBuf,
    /// Seed of the synthetic fleet.
    pub seed: u64,
    pub data: DataOptions,
    pub forecaster: ForecastConfig,
    pub meta: AnpConfig,
    pub policy: PolicyConfig,
    pub starts: StartConfig,
    pub reward: RewardConfig,
    pub eval: EvalConfig,
    pub stages: StageFlags,
}

impl Default for PipelineConfig {
    /// Desk-scale defaults: small widths that train on one CPU core.
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("run"),
            seed: 0,
            data: DataOptions::default(),
            forecaster: ForecastConfig {
                l: 288,
                h: 48,
                p: 144,
                m: 16,
                heads: 2,
                hidden: 16,
                attn: 16,
                mlp: 32,
                batch: 32,
                epochs: 60,
                patience: 8,
                windows_per_epoch: 512,
                val_windows: 128,
                lr: 3e-3,
                ..ForecastConfig::default()
            },
            meta: AnpConfig {
                repr: 32,
                latent: 8,
                hidden: 32,
                heads: 2,
                context_len: 144,
                target_len: 24,
                lr: 2e-3,
                tasks_per_batch: 8,
                iterations: 5000,
                eval_every: 100,
                patience: 10,
                val_tasks: 16,
                ..AnpConfig::default()
            },
            policy: PolicyConfig {
                hidden: 32,
                iterations: 3000,
                batch: 32,
                ..PolicyConfig::default()
            },
            starts: StartConfig::default(),
            reward: RewardConfig::default(),
            eval: EvalConfig::default(),
            stages: StageFlags::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.forecaster.validate()?;
        self.meta.validate()?;
        contract!(self.eval.band > 0.0, "band must be positive");
        contract!(
            !self.eval.seeds.is_empty(),
            "need at least one evaluation seed"
        );
        contract!(
            self.eval.forecast_stride > 0,
            "forecast stride must be positive"
        );
        contract!(
            self.starts.contexts > 0 && self.starts.states_per_context > 0,
            "need policy start states"
        );
        contract!(
            0.0 < self.starts.c_hat_min
                && self.starts.c_hat_min < self.starts.c_hat_max
                && self.starts.c_hat_max < 1.0,
            "start utilisation range must lie inside (0, 1)"
        );
        let steps = (self.policy.horizon + 1) * self.data.epoch_steps;
        contract!(
            self.forecaster.h >= steps,
            "policy unroll spans {steps} steps but the forecaster horizon is {}",
            self.forecaster.h
        );
        RuleController::new(
            self.eval.rule.low,
            self.eval.rule.high,
            self.eval.rule.step,
            self.reward.c_target,
        )?;
        Ok(())
    }

    pub fn paths(&self) -> RunPaths {
        RunPaths {
            root: self.out_dir.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn forecaster(&self) -> PathBuf {
        self.root.join("forecaster.ckpt")
    }
    pub fn meta(&self) -> PathBuf {
        self.root.join("meta.ckpt")
    }
    pub fn policy(&self) -> PathBuf {
        self.root.join("policy.ckpt")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn traces(&self, method: Method, seed: u64) -> PathBuf {
        self.root
            .join("traces")
            .join(format!("{method}-seed{seed}.csv"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Learned,
    Rule,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Learned, Method::Rule, Method::Oracle];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Learned => "learned",
            Method::Rule => "rule",
            Method::Oracle => "oracle",
        })
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(Method::Learned),
            "rule" => Ok(Method::Rule),
            "oracle" => Ok(Method::Oracle),
            other => Err(Error::Contract(format!("unknown method `{other}`"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Stages

pub fn stage_data(cfg: &PipelineConfig) -> Result<Dataset> {
    let run = || -> Result<Dataset> {
        let dir = cfg.paths().data();
        if cfg.stages.skip_data {
            return load_dataset(&dir);
        }
        let data = generate_dataset(&cfg.data, cfg.seed)?;
        write_dataset(&dir, &data)?;
        log::info!(
            "{STAGE_DATA}: {} apps, {} steps each, written to {}",
            data.traces.len(),
            data.traces.first().map_or(0, |t| t.series.len()),
            dir.display()
        );
        Ok(data)
    };
    run().map_err(|e| e.in_stage(STAGE_DATA))
}

/// Trains the forecaster on the training weeks of every application; only
/// the meta-predictor holds applications out.
pub fn stage_forecaster(cfg: &PipelineConfig, data: &Dataset) -> Result<DapmModel> {
    let run = || -> Result<DapmModel> {
        let path = cfg.paths().forecaster();
        if cfg.stages.skip_forecaster {
            return DapmModel::load(&path);
        }
        let series: Vec<_> = data.traces.iter().map(|t| &t.series).collect();
        let (model, hist) = train_forecaster(&series, data.fleet.train_steps(), &cfg.forecaster)?;
        log::info!(
            "{STAGE_FORECASTER}: {} epochs, best {} (val loss {:.5})",
            hist.train_loss.len(),
            hist.best_epoch,
            hist.val_loss
                .get(hist.best_epoch)
                .copied()
                .unwrap_or(f64::NAN)
        );
        fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        model.save(&path)?;
        Ok(model)
    };
    run().map_err(|e| e.in_stage(STAGE_FORECASTER))
}

pub fn stage_meta(cfg: &PipelineConfig, data: &Dataset) -> Result<AnpModel> {
    let run = || -> Result<AnpModel> {
        let path = cfg.paths().meta();
        if cfg.stages.skip_meta {
            return AnpModel::load(&path);
        }
        let apps: Vec<_> = data
            .train_traces()
            .into_iter()
            .map(AppObservations::from_trace)
            .collect();
        let (model, hist) = train_meta(&apps, data.fleet.train_steps(), &cfg.meta)?;
        log::info!(
            "{STAGE_META}: {} evaluations, best iteration {}",
            hist.val_rmse.len(),
            hist.best_iteration
        );
        fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        model.save(&path)?;
        Ok(model)
    };
    run().map_err(|e| e.in_stage(STAGE_META))
}

/// Start states for policy training: contexts drawn from the training
/// weeks of the training applications, with the models' own forecasts as
/// workloads and VM counts set so the predicted utilisation spreads over
/// `[c_hat_min, c_hat_max]`.
pub fn policy_starts(
    cfg: &PipelineConfig,
    data: &Dataset,
    forecaster: &DapmModel,
    anp: &AnpModel,
) -> Result<(Vec<ContextCache>, Vec<RolloutStart>)> {
    let e = data.fleet.epoch_steps;
    let epochs = cfg.policy.horizon + 1;
    contract!(
        forecaster.config.h >= epochs * e,
        "forecaster horizon {} is shorter than the {}-epoch unroll",
        forecaster.config.h,
        epochs
    );
    let traces = data.train_traces();
    contract!(!traces.is_empty(), "no training applications");
    let obs: Vec<AppObservations> = traces
        .iter()
        .map(|t| AppObservations::from_trace(t))
        .collect();
    let ctx = anp.config.context_len;
    let train_end = data.fleet.train_steps();
    let first = ctx.max(forecaster.config.l).div_ceil(e);
    contract!(
        train_end >= epochs * e,
        "training period shorter than the unroll"
    );
    let last = (train_end - epochs * e) / e;
    contract!(
        first <= last,
        "training period too short for the context and unroll"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.starts.seed);
    let (mut caches, mut starts) = (Vec::new(), Vec::new());
    for c in 0..cfg.starts.contexts {
        let app = rng.gen_range(0..traces.len());
        let t = rng.gen_range(first..=last) * e;
        let trace = traces[app];
        let cache = anp.cache_context(&obs[app].obs[t - ctx..t])?;
        let f = forecaster.forecast_at(&trace.series, t)?;
        let workloads: Vec<Vec<f64>> = (0..epochs)
            .map(|k| {
                let rows = &f[k * e..(k + 1) * e];
                let mut m = vec![0.0; rows[0].len()];
                rows.iter()
                    .for_each(|r| m.iter_mut().zip(r).for_each(|(a, x)| *a += x / e as f64));
                m
            })
            .collect();
        let covs: Vec<_> = (0..epochs)
            .map(|k| trace.series.covariates[t + k * e])
            .collect();
        let l_ref = f64::from(trace.vm_count[t - 1]);
        let grid: Vec<f64> = (-24..=24)
            .map(|k| l_ref * 2f64.powf(k as f64 / 8.0))
            .collect();
        let queries: Vec<ObservationPair> = grid
            .iter()
            .map(|l| ObservationPair {
                cov: covs[0],
                unit_workload: workloads[0].iter().map(|x| x / l).collect(),
                cpu: 0.0,
            })
            .collect();
        let preds = anp.predict_cached(&cache, &queries)?;
        for _ in 0..cfg.starts.states_per_context {
            let c0 = rng.gen_range(cfg.starts.c_hat_min..cfg.starts.c_hat_max);
            let best = preds
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 .0 - c0).abs().total_cmp(&(b.1 .0 - c0).abs()))
                .map_or(0, |(i, _)| i);
            starts.push(RolloutStart {
                covs: covs.clone(),
                workloads: workloads.clone(),
                l0: grid[best],
                z: cache.belief.mean.clone(),
                model: c,
            });
        }
        caches.push(cache);
    }
    Ok((caches, starts))
}

pub fn stage_policy(
    cfg: &PipelineConfig,
    data: &Dataset,
    forecaster: &DapmModel,
    anp: &AnpModel,
) -> Result<PolicyModel> {
    let run = || -> Result<PolicyModel> {
        let path = cfg.paths().policy();
        if cfg.stages.skip_policy {
            return PolicyModel::load(&path);
        }
        let params = cfg.reward.resolve(data);
        let (caches, starts) = policy_starts(cfg, data, forecaster, anp)?;
        let cpu: Vec<AnpCpu<'_>> = caches
            .into_iter()
            .map(|cache| AnpCpu { model: anp, cache })
            .collect();
        let models: Vec<&dyn CpuModel> = cpu.iter().map(|m| m as &dyn CpuModel).collect();
        let (policy, hist) = train_policy(&starts, &models, &params, &cfg.policy)?;
        let tail = &hist.value[hist.value.len().saturating_sub(20)..];
        log::info!(
            "{STAGE_POLICY}: {} updates on {} starts, final value {:.3e}, eta {:.3e}",
            hist.value.len(),
            starts.len(),
            tail.iter().sum::<f64>() / tail.len().max(1) as f64,
            params.eta
        );
        fs::create_dir_all(&cfg.out_dir).map_err(|e| Error::io(&cfg.out_dir, e))?;
        policy.save(&path)?;
        Ok(policy)
    };
    run().map_err(|e| e.in_stage(STAGE_POLICY))
}

// ---------------------------------------------------------------------------
// Evaluation

/// Trained models of a run.
#[derive(Clone, Copy)]
pub struct RunModels<'a> {
    pub forecaster: &'a DapmModel,
    pub anp: &'a AnpModel,
    pub policy: &'a PolicyModel,
}

fn mix(seed: u64, k: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.gen()
}

/// Initial VM count of an evaluation episode.
pub fn initial_vms(cfg: &PipelineConfig, data: &Dataset, app: usize, seed: u64) -> f64 {
    let trace = &data.traces[app];
    let start = data.fleet.train_steps();
    let base = f64::from(trace.vm_count[start - 1]);
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 2 * app as u64 + 1));
    let s = cfg.eval.initial_spread;
    let u = if s > 0.0 { rng.gen_range(-s..s) } else { 0.0 };
    (base * 2f64.powf(u)).round().max(1.0)
}

/// Runs `method` on application `app`'s test week under evaluation `seed`.
pub fn simulate_app(
    cfg: &PipelineConfig,
    data: &Dataset,
    models: RunModels<'_>,
    method: Method,
    app: usize,
    seed: u64,
) -> Result<ScalingTrace> {
    let trace = &data.traces[app];
    let app_id = &trace.series.app_id;
    let spec = data
        .fleet
        .spec(app_id)
        .ok_or_else(|| Error::Contract(format!("fleet has no spec for {app_id}")))?
        .clone();
    let env = Environment::new(
        spec,
        trace.series.clone(),
        data.fleet.cpu_noise_std,
        mix(seed, 2 * app as u64),
    )?;
    let start = data.fleet.train_steps();
    let ctx = models.anp.config.context_len;
    let history = &AppObservations::from_trace(trace).obs[start.saturating_sub(ctx)..start];
    let schedule = Schedule {
        start,
        steps: trace.series.len() - start,
        epoch_steps: data.fleet.epoch_steps,
    };
    let params = cfg.reward.resolve(data);
    let mut controller: Box<dyn Controller> = match method {
        Method::Learned => Box::new(LearnedController {
            policy: models.policy,
        }),
        Method::Rule => Box::new(cfg.eval.rule),
        Method::Oracle => Box::new(OracleController { params }),
    };
    let episode_models = EpisodeModels {
        forecaster: Some(models.forecaster),
        anp: Some(models.anp),
        context_len: ctx,
    };
    run_episode(
        controller.as_mut(),
        episode_models,
        &env,
        history,
        initial_vms(cfg, data, app, seed),
        schedule,
        &params,
    )
}

/// Runs `method` on every application for one seed, applications in
/// parallel. Output order follows the dataset.
pub fn simulate(
    cfg: &PipelineConfig,
    data: &Dataset,
    models: RunModels<'_>,
    method: Method,
    seed: u64,
) -> Result<Vec<ScalingTrace>> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..data.traces.len())
            .map(|app| scope.spawn(move || simulate_app(cfg, data, models, method, app, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Contract("episode thread panicked".into())))
            })
            .collect()
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub rcs_mean: f64,
    pub rcs_std: f64,
    /// Sum of VM counts over all steps, averaged over seeds.
    pub vm_steps: f64,
    /// Per-step reward, averaged.
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppEvaluation {
    pub app_id: String,
    /// Held out from meta-predictor training.
    pub unseen: bool,
    pub forecast: Metrics,
    pub forecast_persistence: Metrics,
    /// Meta-predictor on test-week windows of the historical trace.
    pub meta: Metrics,
    /// Context-mean baseline on the same windows.
    pub meta_context_mean: Metrics,
    /// Meta-predictor utilisation predictions along the learned policy's
    /// episodes.
    pub cpu: Metrics,
    pub methods: BTreeMap<Method, MethodSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledEvaluation {
    pub forecast: Metrics,
    pub forecast_persistence: Metrics,
    pub cpu: Metrics,
    pub methods: BTreeMap<Method, MethodSummary>,
    /// Fleet-mean RCS for each seed, in seed order.
    pub seed_rcs: BTreeMap<Method, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub c_target: f64,
    pub band: f64,
    pub epoch_steps: usize,
    pub seeds: Vec<u64>,
    pub apps: Vec<AppEvaluation>,
    pub pooled: PooledEvaluation,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

/// Traces keyed by method, then seed index, then application.
pub type TraceSet = BTreeMap<Method, Vec<Vec<ScalingTrace>>>;

pub fn evaluate(
    cfg: &PipelineConfig,
    data: &Dataset,
    models: RunModels<'_>,
) -> Result<(EvaluationReport, TraceSet)> {
    let run = || -> Result<(EvaluationReport, TraceSet)> {
        let params = cfg.reward.resolve(data);
        let (target, band) = (params.c_target, cfg.eval.band);
        let test_start = data.fleet.train_steps();
        let series: Vec<_> = data.traces.iter().map(|t| &t.series).collect();
        let fc = evaluate_forecaster(
            models.forecaster,
            &series,
            test_start,
            cfg.eval.forecast_stride,
        )?;
        let observations: Vec<_> = data
            .traces
            .iter()
            .map(AppObservations::from_trace)
            .collect();
        let meta = evaluate_meta(
            models.anp,
            &observations,
            test_start,
            usize::MAX,
            models.anp.config.target_len,
        )?;

        let mut traces: TraceSet = BTreeMap::new();
        for method in Method::ALL {
            let per_seed = cfg
                .eval
                .seeds
                .iter()
                .map(|&s| simulate(cfg, data, models, method, s))
                .collect::<Result<Vec<_>>>()?;
            traces.insert(method, per_seed);
        }

        let n_apps = data.traces.len();
        let n_seeds = cfg.eval.seeds.len();
        let mut apps = Vec::with_capacity(n_apps);
        let (mut all_pred, mut all_real) = (Vec::new(), Vec::new());
        for (a, trace) in data.traces.iter().enumerate() {
            let app_id = trace.series.app_id.clone();
            let mut methods = BTreeMap::new();
            for (method, per_seed) in &traces {
                let rcs_s = per_seed
                    .iter()
                    .map(|s| trace_rcs(&s[a], target, band))
                    .collect::<Result<Vec<_>>>()?;
                let (m, sd) = mean_std(&rcs_s);
                let vm =
                    per_seed.iter().map(|s| s[a].vm_steps() as f64).sum::<f64>() / n_seeds as f64;
                let rewards: Vec<f64> = per_seed
                    .iter()
                    .flat_map(|s| s[a].rows.iter().map(|r| r.reward))
                    .collect();
                methods.insert(
                    *method,
                    MethodSummary {
                        rcs_mean: m,
                        rcs_std: sd,
                        vm_steps: vm,
                        reward: mean_std(&rewards).0,
                    },
                );
            }
            let (pred, real): (Vec<f64>, Vec<f64>) = traces[&Method::Learned]
                .iter()
                .flat_map(|s| s[a].rows.iter().map(|r| (r.cpu_predicted, r.cpu_realized)))
                .unzip();
            let f = &fc.per_app[a];
            apps.push(AppEvaluation {
                unseen: data.fleet.heldout_apps.contains(&app_id),
                app_id,
                forecast: f.dapm,
                forecast_persistence: f.persistence,
                meta: meta[a].anp,
                meta_context_mean: meta[a].context_mean,
                cpu: forecast_metrics(&pred, &real)?,
                methods,
            });
            all_pred.extend(pred);
            all_real.extend(real);
        }

        let mut pooled_methods = BTreeMap::new();
        let mut seed_rcs = BTreeMap::new();
        for (method, per_seed) in &traces {
            let fleet_rcs: Vec<f64> = per_seed
                .iter()
                .map(|s| {
                    let r = s
                        .iter()
                        .map(|t| trace_rcs(t, target, band))
                        .collect::<Result<Vec<_>>>()?;
                    Ok(r.iter().sum::<f64>() / r.len() as f64)
                })
                .collect::<Result<_>>()?;
            let (m, sd) = mean_std(&fleet_rcs);
            let vm = per_seed
                .iter()
                .map(|s| s.iter().map(|t| t.vm_steps() as f64).sum::<f64>())
                .sum::<f64>()
                / n_seeds as f64;
            let rewards: Vec<f64> = per_seed
                .iter()
                .flatten()
                .flat_map(|t| t.rows.iter().map(|r| r.reward))
                .collect();
            pooled_methods.insert(
                *method,
                MethodSummary {
                    rcs_mean: m,
                    rcs_std: sd,
                    vm_steps: vm,
                    reward: mean_std(&rewards).0,
                },
            );
            seed_rcs.insert(*method, fleet_rcs);
        }
        let report = EvaluationReport {
            c_target: target,
            band,
            epoch_steps: data.fleet.epoch_steps,
            seeds: cfg.eval.seeds.clone(),
            apps,
            pooled: PooledEvaluation {
                forecast: fc.pooled,
                forecast_persistence: fc.pooled_persistence,
                cpu: forecast_metrics(&all_pred, &all_real)?,
                methods: pooled_methods,
                seed_rcs,
            },
        };
        for (method, s) in &report.pooled.methods {
            log::info!(
                "{STAGE_EVALUATE}: {method} RCS {:.3} ({:.3})",
                s.rcs_mean,
                s.rcs_std
            );
        }
        Ok((report, traces))
    };
    run().map_err(|e| e.in_stage(STAGE_EVALUATE))
}

pub fn write_trace_set(paths: &RunPaths, seeds: &[u64], traces: &TraceSet) -> Result<()> {
    let dir = paths.root.join("traces");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (method, per_seed) in traces {
        for (seed, set) in seeds.iter().zip(per_seed) {
            let path = paths.traces(*method, *seed);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            crate::scaler::write_traces_csv(set, std::io::BufWriter::new(file))?;
        }
    }
    Ok(())
}

/// Runs every stage and writes checkpoints, traces and `report.json`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<EvaluationReport> {
    cfg.validate()?;
    let data = stage_data(cfg)?;
    let forecaster = stage_forecaster(cfg, &data)?;
    let anp = stage_meta(cfg, &data)?;
    let policy = stage_policy(cfg, &data, &forecaster, &anp)?;
    let models = RunModels {
        forecaster: &forecaster,
        anp: &anp,
        policy: &policy,
    };
    let (report, traces) = evaluate(cfg, &data, models)?;
    let paths = cfg.paths();
    let write = || -> Result<()> {
        write_trace_set(&paths, &cfg.eval.seeds, &traces)?;
        let path = paths.report();
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        report_emit(&report, ReportFormat::Json, std::io::BufWriter::new(file))
    };
    write().map_err(|e| e.in_stage(STAGE_EVALUATE))?;
    Ok(report)
}

/// Loads the checkpoints of a finished (or partially finished) run.
pub fn load_models(paths: &RunPaths) -> Result<(DapmModel, AnpModel, PolicyModel)> {
    Ok((
        DapmModel::load(paths.forecaster())?,
        AnpModel::load(paths.meta())?,
        PolicyModel::load(paths.policy())?,
    ))
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl FromStr for ReportFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Contract(format!("unknown report format `{other}`"))),
        }
    }
}

pub const REPORT_CSV_HEADER: [&str; 12] = [
    "scope",
    "app_id",
    "unseen",
    "method",
    "rcs_mean",
    "rcs_std",
    "vm_steps",
    "reward",
    "forecast_mae",
    "forecast_rmse",
    "cpu_mae",
    "cpu_rmse",
];

pub fn read_report(r: impl std::io::Read) -> Result<EvaluationReport> {
    Ok(serde_json::from_reader(r)?)
}

pub fn report_emit(
    report: &EvaluationReport,
    format: ReportFormat,
    mut w: impl Write,
) -> Result<()> {
    let io = |e| Error::io("<report>", e);
    match format {
        ReportFormat::Json => {
            serde_json::to_writer_pretty(&mut w, report)?;
            writeln!(w).map_err(io)?;
        }
        ReportFormat::Csv => {
            let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
            out.write_record(REPORT_CSV_HEADER)?;
            let mut row = |scope: &str,
                           app: &str,
                           unseen: &str,
                           method: Method,
                           s: &MethodSummary,
                           f: &Metrics,
                           c: &Metrics| {
                out.write_record([
                    scope.to_string(),
                    app.to_string(),
                    unseen.to_string(),
                    method.to_string(),
                    s.rcs_mean.to_string(),
                    s.rcs_std.to_string(),
                    s.vm_steps.to_string(),
                    s.reward.to_string(),
                    f.mae.to_string(),
                    f.rmse.to_string(),
                    c.mae.to_string(),
                    c.rmse.to_string(),
                ])
            };
            for a in &report.apps {
                for (m, s) in &a.methods {
                    row(
                        "app",
                        &a.app_id,
                        &a.unseen.to_string(),
                        *m,
                        s,
                        &a.forecast,
                        &a.cpu,
                    )?;
                }
            }
            let p = &report.pooled;
            for (m, s) in &p.methods {
                row("pooled", "", "", *m, s, &p.forecast, &p.cpu)?;
            }
            out.flush().map_err(io)?;
        }
        ReportFormat::Markdown => {
            let mut head = String::from("| method |");
            let mut rule = String::from("|---|");
            for a in &report.apps {
                let mark = if a.unseen { "*" } else { "" };
                head.push_str(&format!(" {}{mark} |", a.app_id));
                rule.push_str("---|");
            }
            head.push_str(" pooled |");
            rule.push_str("---|");
            writeln!(w, "{head}").map_err(io)?;
            writeln!(w, "{rule}").map_err(io)?;
            for (method, pooled) in &report.pooled.methods {
                let mut line = format!("| {method} |");
                for a in &report.apps {
                    match a.methods.get(method) {
                        Some(s) => {
                            line.push_str(&format!(" {:.3} ({:.3}) |", s.rcs_mean, s.rcs_std))
                        }
                        None => line.push_str(" - |"),
                    }
                }
                line.push_str(&format!(
                    " {:.3} ({:.3}) |",
                    pooled.rcs_mean, pooled.rcs_std
                ));
                writeln!(w, "{line}").map_err(io)?;
            }
        }
    }
    Ok(())
}
