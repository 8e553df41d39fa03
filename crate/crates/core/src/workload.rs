//! Synthetic applications and the scaling environment.
//!
//! Every application has a seasonal multi-dimensional traffic generator
//! (daily shape, weekend dip, optional level shifts) and a ground-truth CPU
//! response: a saturating, monotone map from per-VM workload to utilization.
//! The environment replays a generated trace and reports realized CPU for
//! whatever VM count it is told to run.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// 2021-03-01T00:00:00Z, a Monday.
pub const DEFAULT_START: i64 = 1_614_556_800;
pub const MINUTES_PER_DAY: u32 = 1440;
pub const DEFAULT_CPU_NOISE: f64 = 0.005;
/// Traffic dimension labels used when rendering fleets.
pub const DIM_NAMES: [&str; 7] = ["RPC", "MsgSub", "MsgPush", "EA", "DA", "WB", "PV"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeCovariate {
    /// 0 = Monday.
    pub day_of_week: u8,
    pub hour_of_day: u8,
}

impl TimeCovariate {
    pub fn new(day_of_week: u8, hour_of_day: u8) -> Result<Self> {
        contract!(day_of_week < 7, "day_of_week {day_of_week} not in 0..7");
        contract!(hour_of_day < 24, "hour_of_day {hour_of_day} not in 0..24");
        Ok(TimeCovariate {
            day_of_week,
            hour_of_day,
        })
    }

    pub fn from_timestamp(secs: i64) -> Self {
        let days = secs.div_euclid(86_400);
        let day_secs = secs.rem_euclid(86_400);
        TimeCovariate {
            // 1970-01-01 was a Thursday.
            day_of_week: (days + 3).rem_euclid(7) as u8,
            hour_of_day: (day_secs / 3600) as u8,
        }
    }

    /// Smooth cyclic encoding: hour and weekday on the unit circle.
    pub fn cyclic_features(&self) -> [f64; 4] {
        let h = std::f64::consts::TAU * f64::from(self.hour_of_day) / 24.0;
        let d = std::f64::consts::TAU * f64::from(self.day_of_week) / 7.0;
        [h.sin(), h.cos(), d.sin(), d.cos()]
    }

    pub fn is_weekend(&self) -> bool {
        self.day_of_week >= 5
    }
}

/// Timestamped d-dimensional traffic for one application.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSeries {
    pub app_id: String,
    pub freq_minutes: u32,
    pub timestamps: Vec<i64>,
    pub values: Vec<Vec<f64>>,
    pub covariates: Vec<TimeCovariate>,
}

impl WorkloadSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    pub fn steps_per_day(&self) -> usize {
        (MINUTES_PER_DAY / self.freq_minutes) as usize
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.freq_minutes > 0, "frequency must be positive");
        contract!(
            self.timestamps.len() == self.values.len()
                && self.values.len() == self.covariates.len(),
            "timestamps, values and covariates differ in length"
        );
        let spacing = i64::from(self.freq_minutes) * 60;
        for w in self.timestamps.windows(2) {
            contract!(w[1] - w[0] == spacing, "timestamps not evenly spaced");
        }
        let d = self.dims();
        for v in &self.values {
            contract!(v.len() == d, "ragged traffic vectors");
            contract!(
                v.iter().all(|x| *x >= 0.0 && x.is_finite()),
                "traffic must be finite and nonnegative"
            );
        }
        Ok(())
    }

    /// Componentwise mean of `values[start..end]`.
    pub fn mean_over(&self, start: usize, end: usize) -> Vec<f64> {
        let mut acc = vec![0.0; self.dims()];
        for v in &self.values[start..end] {
            acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
        }
        let n = (end - start).max(1) as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        acc
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeasonalDim {
    pub base: f64,
    /// Relative amplitude of the daily cycle, in [0, 0.75).
    pub daily_amplitude: f64,
    /// Fractional traffic reduction on Saturday and Sunday.
    pub weekly_modulation: f64,
    /// Phase offset of the daily cycle, radians.
    pub phase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChangePoint {
    pub step: usize,
    pub factor: f64,
}

/// Ground-truth utilization `clamp(bias + sum_i w_i g(x_i), 0, cap)`, with
/// `g(x) = x` when `curvature == 0` and `g(x) = ln(1 + k x) / k` otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CpuResponse {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub cap: f64,
    pub curvature: f64,
}

impl CpuResponse {
    pub fn shape_fn(&self, x: f64) -> f64 {
        if self.curvature == 0.0 {
            x
        } else {
            (self.curvature * x).ln_1p() / self.curvature
        }
    }

    /// Unclamped response.
    pub fn raw(&self, unit_workload: &[f64]) -> f64 {
        self.bias
            + self
                .weights
                .iter()
                .zip(unit_workload)
                .map(|(w, x)| w * self.shape_fn(*x))
                .sum::<f64>()
    }

    pub fn eval(&self, unit_workload: &[f64]) -> f64 {
        self.raw(unit_workload).clamp(0.0, self.cap)
    }

    /// VM count at which total workload `x` produces exactly `target`
    /// utilization. `None` if the target sits at or below idle or above the
    /// cap.
    pub fn vm_count_for_target(&self, x: &[f64], target: f64) -> Option<f64> {
        if target <= self.bias || target >= self.cap {
            return None;
        }
        if self.curvature == 0.0 {
            let load: f64 = self.weights.iter().zip(x).map(|(w, v)| w * v).sum();
            return (load > 0.0).then(|| load / (target - self.bias));
        }
        // Response is strictly decreasing in the VM count; bisect on log l.
        let f = |log_l: f64| {
            let l = log_l.exp();
            let xb: Vec<f64> = x.iter().map(|v| v / l).collect();
            self.raw(&xb) - target
        };
        let (mut lo, mut hi) = (-30.0_f64, 30.0_f64);
        if f(lo) < 0.0 || f(hi) > 0.0 {
            return None;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Some((0.5 * (lo + hi)).exp())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AppSpec {
    pub app_id: String,
    pub dims: Vec<SeasonalDim>,
    /// Relative (multiplicative) traffic noise.
    pub noise_std: f64,
    pub change_points: Vec<ChangePoint>,
    pub cpu_response: CpuResponse,
    /// VM count that puts mean traffic near 40% utilization.
    pub nominal_vms: f64,
}

impl AppSpec {
    pub fn d(&self) -> usize {
        self.dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        contract!(
            !self.dims.is_empty(),
            "app {} has no traffic dimensions",
            self.app_id
        );
        contract!(
            self.cpu_response.weights.len() == self.dims.len(),
            "cpu weights do not match traffic dimensionality"
        );
        contract!(
            self.cpu_response.weights.iter().all(|w| *w > 0.0),
            "cpu weights must be positive"
        );
        contract!(
            self.cpu_response.cap > 0.0 && self.cpu_response.cap <= 1.0,
            "cpu cap must lie in (0, 1]"
        );
        contract!(self.cpu_response.curvature >= 0.0, "curvature must be >= 0");
        contract!(self.noise_std >= 0.0, "noise_std must be >= 0");
        Ok(())
    }

    fn level_at(&self, step: usize) -> f64 {
        self.change_points
            .iter()
            .filter(|c| c.step <= step)
            .map(|c| c.factor)
            .product()
    }

    /// Noise-free traffic at a timestamp and step index.
    pub fn expected_traffic(&self, timestamp: i64, step: usize) -> Vec<f64> {
        let cov = TimeCovariate::from_timestamp(timestamp);
        let day_frac = timestamp.rem_euclid(86_400) as f64 / 86_400.0;
        let angle = std::f64::consts::TAU * day_frac;
        let level = self.level_at(step);
        self.dims
            .iter()
            .map(|d| {
                let daily = 1.0
                    + d.daily_amplitude
                        * ((angle + d.phase).sin() + 0.3 * (2.0 * angle + 2.0 * d.phase).sin())
                        / 1.3;
                let weekly = if cov.is_weekend() {
                    1.0 - d.weekly_modulation
                } else {
                    1.0
                };
                (d.base * level * daily * weekly).max(0.0)
            })
            .collect()
    }
}

/// Generates `horizon` steps of traffic starting at [`DEFAULT_START`].
pub fn generate_trace(
    spec: &AppSpec,
    horizon: usize,
    freq_minutes: u32,
    seed: u64,
) -> Result<WorkloadSeries> {
    generate_trace_from(spec, horizon, freq_minutes, DEFAULT_START, seed)
}

pub fn generate_trace_from(
    spec: &AppSpec,
    horizon: usize,
    freq_minutes: u32,
    start: i64,
    seed: u64,
) -> Result<WorkloadSeries> {
    spec.validate()?;
    contract!(
        freq_minutes > 0 && MINUTES_PER_DAY.is_multiple_of(freq_minutes),
        "frequency {freq_minutes} min does not divide a day"
    );
    let period = (MINUTES_PER_DAY / freq_minutes) as usize;
    contract!(
        horizon >= period,
        "horizon {horizon} shorter than one daily period ({period} steps)"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let spacing = i64::from(freq_minutes) * 60;
    let mut series = WorkloadSeries {
        app_id: spec.app_id.clone(),
        freq_minutes,
        timestamps: Vec::with_capacity(horizon),
        values: Vec::with_capacity(horizon),
        covariates: Vec::with_capacity(horizon),
    };
    for t in 0..horizon {
        let ts = start + spacing * t as i64;
        let mut v = spec.expected_traffic(ts, t);
        if spec.noise_std > 0.0 {
            for x in &mut v {
                let eps: f64 = noise.sample(&mut rng);
                *x = (*x * (1.0 + spec.noise_std * eps)).max(0.0);
            }
        }
        series.timestamps.push(ts);
        series.values.push(v);
        series.covariates.push(TimeCovariate::from_timestamp(ts));
    }
    Ok(series)
}

/// Ground-truth utilization for a per-VM workload.
pub fn cpu_oracle(spec: &AppSpec, unit_workload: &[f64], _cov: TimeCovariate) -> Result<f64> {
    contract!(
        unit_workload.len() == spec.d(),
        "unit workload has {} dims, app has {}",
        unit_workload.len(),
        spec.d()
    );
    contract!(
        unit_workload.iter().all(|x| *x >= 0.0),
        "unit workload must be nonnegative"
    );
    Ok(spec.cpu_response.eval(unit_workload))
}

/// Rounds half-up with a floor of one VM. The flag reports a request below
/// one VM.
pub fn round_vm_count(requested: f64) -> (u32, bool) {
    if !(requested >= 1.0) {
        return (1, true);
    }
    (
        (requested + 0.5).floor().min(f64::from(u32::MAX)) as u32,
        false,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    /// Index of the next trace step to execute.
    pub t: usize,
    pub vm_count: f64,
    pub cpu_history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub state: EnvState,
    pub realized_cpu: f64,
    pub executed_vms: u32,
    pub unit_workload: Vec<f64>,
    /// Requested VM count was below one and got clamped.
    pub clamped: bool,
}

/// One application's trace replayed under a chosen VM count.
#[derive(Debug, Clone)]
pub struct Environment {
    spec: AppSpec,
    series: WorkloadSeries,
    cpu_noise_std: f64,
    seed: u64,
}

impl Environment {
    pub fn new(
        spec: AppSpec,
        series: WorkloadSeries,
        cpu_noise_std: f64,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        series.validate()?;
        contract!(
            series.dims() == spec.d(),
            "trace dimensionality does not match app spec"
        );
        contract!(cpu_noise_std >= 0.0, "cpu noise std must be >= 0");
        Ok(Environment {
            spec,
            series,
            cpu_noise_std,
            seed,
        })
    }

    pub fn spec(&self) -> &AppSpec {
        &self.spec
    }

    pub fn series(&self) -> &WorkloadSeries {
        &self.series
    }

    pub fn initial_state(&self, t: usize, vm_count: f64) -> EnvState {
        EnvState {
            t,
            vm_count,
            cpu_history: Vec::new(),
        }
    }

    fn noise(&self, t: usize) -> f64 {
        if self.cpu_noise_std == 0.0 {
            return 0.0;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let eps: f64 = rng.sample(rand_distr::StandardNormal);
        self.cpu_noise_std * eps
    }

    /// Runs trace step `state.t` on `new_vm_count` VMs (rounded half-up,
    /// at least one) and returns the advanced state.
    pub fn step(&self, state: &EnvState, new_vm_count: f64) -> Result<StepRecord> {
        contract!(
            state.t < self.series.len(),
            "step {} beyond trace of {} steps",
            state.t,
            self.series.len()
        );
        let (vms, clamped) = round_vm_count(new_vm_count);
        let x = &self.series.values[state.t];
        let unit: Vec<f64> = x.iter().map(|v| v / f64::from(vms)).collect();
        let clean = cpu_oracle(&self.spec, &unit, self.series.covariates[state.t])?;
        let realized = (clean + self.noise(state.t)).clamp(0.0, 1.0);
        let mut cpu_history = state.cpu_history.clone();
        cpu_history.push(realized);
        Ok(StepRecord {
            state: EnvState {
                t: state.t + 1,
                vm_count: f64::from(vms),
                cpu_history,
            },
            realized_cpu: realized,
            executed_vms: vms,
            unit_workload: unit,
            clamped,
        })
    }
}

/// Knobs for [`make_fleet_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetOptions {
    pub d: usize,
    pub noise_std: f64,
    /// Range of nominal VM counts per app.
    pub vms_range: (f64, f64),
    /// Steps within which level shifts may be placed.
    pub change_window: (usize, usize),
    pub change_probability: f64,
}

impl Default for FleetOptions {
    fn default() -> Self {
        FleetOptions {
            d: 3,
            noise_std: 0.03,
            vms_range: (40.0, 160.0),
            change_window: (1008, 3024),
            change_probability: 0.5,
        }
    }
}

pub fn make_fleet(n_apps: usize, seed: u64) -> Result<Vec<AppSpec>> {
    make_fleet_with(n_apps, seed, &FleetOptions::default())
}

/// Heterogeneous synthetic applications: each gets its own dominant traffic
/// dimension, daily and weekly shape, and CPU response.
pub fn make_fleet_with(n_apps: usize, seed: u64, opts: &FleetOptions) -> Result<Vec<AppSpec>> {
    contract!(n_apps >= 1, "fleet needs at least one application");
    contract!(opts.d >= 1, "fleet needs at least one traffic dimension");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fleet = Vec::with_capacity(n_apps);
    for i in 0..n_apps {
        let d = opts.d;
        let dominant = i % d;
        let total: f64 = 10f64.powf(rng.gen_range(2.7..4.3));
        let dims: Vec<SeasonalDim> = (0..d)
            .map(|k| {
                let share = if k == dominant {
                    1.0
                } else {
                    rng.gen_range(0.1..0.5)
                };
                SeasonalDim {
                    base: total * share,
                    daily_amplitude: rng.gen_range(0.2..0.5),
                    weekly_modulation: rng.gen_range(0.0..0.3),
                    phase: rng.gen_range(-0.8..0.8) - std::f64::consts::FRAC_PI_2,
                }
            })
            .collect();
        let nominal_vms = rng.gen_range(opts.vms_range.0..opts.vms_range.1);
        let bias = rng.gen_range(0.03..0.10);
        let cap = rng.gen_range(0.9..1.0);
        let unit_mean: Vec<f64> = dims.iter().map(|s| s.base / nominal_vms).collect();
        let curvature = if rng.gen_bool(0.5) {
            0.0
        } else {
            // Noticeable bend around the typical per-VM load.
            let typical = unit_mean.iter().cloned().fold(0.0, f64::max);
            rng.gen_range(0.3..1.0) / typical
        };
        let shape = |x: f64| {
            if curvature == 0.0 {
                x
            } else {
                (curvature * x).ln_1p() / curvature
            }
        };
        let raw: Vec<f64> = (0..d).map(|_| rng.gen_range(0.3..1.5)).collect();
        let load: f64 = raw.iter().zip(&unit_mean).map(|(r, x)| r * shape(*x)).sum();
        let scale = (0.4 - bias) / load;
        let weights = raw.iter().map(|r| r * scale).collect();

        let mut change_points = Vec::new();
        if rng.gen_bool(opts.change_probability) && opts.change_window.1 > opts.change_window.0 {
            change_points.push(ChangePoint {
                step: rng.gen_range(opts.change_window.0..opts.change_window.1),
                factor: rng.gen_range(0.75..1.35),
            });
        }
        fleet.push(AppSpec {
            app_id: format!("app-{i:02}"),
            dims,
            noise_std: opts.noise_std,
            change_points,
            cpu_response: CpuResponse {
                weights,
                bias,
                cap,
                curvature,
            },
            nominal_vms,
        });
    }
    Ok(fleet)
}

/// A trace together with the CPU and VM counts observed while it ran.
#[derive(Debug, Clone, PartialEq)]
pub struct AppTrace {
    pub series: WorkloadSeries,
    pub cpu: Vec<f64>,
    pub vm_count: Vec<u32>,
}

impl AppTrace {
    pub fn unit_workload(&self, t: usize) -> Vec<f64> {
        let l = f64::from(self.vm_count[t].max(1));
        self.series.values[t].iter().map(|v| v / l).collect()
    }
}

/// Replays a trace under a noisy legacy operator: VM counts are held for
/// `epoch_steps` steps and loosely track demand, giving a spread of per-VM
/// loads and utilizations to learn from.
pub fn simulate_history(
    spec: &AppSpec,
    series: WorkloadSeries,
    epoch_steps: usize,
    cpu_noise_std: f64,
    seed: u64,
) -> Result<AppTrace> {
    contract!(epoch_steps > 0, "epoch length must be positive");
    let env = Environment::new(spec.clone(), series, cpu_noise_std, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5EED));
    let base_total: f64 = spec.dims.iter().map(|d| d.base).sum();
    let n = env.series().len();
    let mut cpu = Vec::with_capacity(n);
    let mut vm_count = Vec::with_capacity(n);
    let mut state = env.initial_state(0, spec.nominal_vms);
    let mut start = 0;
    while start < n {
        let end = (start + epoch_steps).min(n);
        let demand: f64 = env.series().mean_over(start, end).iter().sum::<f64>() / base_total;
        let jitter: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.3;
        let vms = spec.nominal_vms * demand * jitter.exp();
        for _ in start..end {
            let rec = env.step(&state, vms)?;
            cpu.push(rec.realized_cpu);
            vm_count.push(rec.executed_vms);
            state = rec.state;
            state.cpu_history.clear();
        }
        start = end;
    }
    Ok(AppTrace {
        series: env.series,
        cpu,
        vm_count,
    })
}

/// Sample autocorrelation of a scalar series at `lag`.
pub fn autocorrelation(x: &[f64], lag: usize) -> f64 {
    let n = x.len();
    if lag >= n {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let cov: f64 = (0..n - lag)
        .map(|i| (x[i] - mean) * (x[i + lag] - mean))
        .sum();
    cov / var
}

// ---------------------------------------------------------------------------
// Files

/// Fleet description written next to the per-app trace CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetFile {
    pub freq_minutes: u32,
    pub weeks: usize,
    pub start_timestamp: i64,
    pub seed: u64,
    /// Steps per legacy-operator epoch used when simulating history.
    pub epoch_steps: usize,
    pub cpu_noise_std: f64,
    pub train_apps: Vec<String>,
    pub heldout_apps: Vec<String>,
    pub apps: Vec<AppSpec>,
}

impl FleetFile {
    pub fn steps_per_week(&self) -> usize {
        7 * (MINUTES_PER_DAY / self.freq_minutes) as usize
    }

    /// Number of leading steps used for training; the final week is test.
    pub fn train_steps(&self) -> usize {
        self.steps_per_week() * self.weeks.saturating_sub(1)
    }

    pub fn spec(&self, app_id: &str) -> Option<&AppSpec> {
        self.apps.iter().find(|a| a.app_id == app_id)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub fleet: FleetFile,
    pub traces: Vec<AppTrace>,
}

impl Dataset {
    pub fn trace(&self, app_id: &str) -> Option<&AppTrace> {
        self.traces.iter().find(|t| t.series.app_id == app_id)
    }

    pub fn train_traces(&self) -> Vec<&AppTrace> {
        self.fleet
            .train_apps
            .iter()
            .filter_map(|id| self.trace(id))
            .collect()
    }

    pub fn heldout_traces(&self) -> Vec<&AppTrace> {
        self.fleet
            .heldout_apps
            .iter()
            .filter_map(|id| self.trace(id))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataOptions {
    pub train_apps: usize,
    pub heldout_apps: usize,
    pub weeks: usize,
    pub freq_minutes: u32,
    pub epoch_steps: usize,
    pub cpu_noise_std: f64,
    pub fleet: FleetOptions,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            train_apps: 8,
            heldout_apps: 4,
            weeks: 4,
            freq_minutes: 10,
            epoch_steps: 24,
            cpu_noise_std: DEFAULT_CPU_NOISE,
            fleet: FleetOptions::default(),
        }
    }
}

/// Builds a fleet, generates every trace and replays legacy history.
pub fn generate_dataset(opts: &DataOptions, seed: u64) -> Result<Dataset> {
    contract!(
        opts.weeks >= 2,
        "need at least one training week and one test week"
    );
    let n = opts.train_apps + opts.heldout_apps;
    let per_week = 7 * (MINUTES_PER_DAY / opts.freq_minutes) as usize;
    let mut fleet_opts = opts.fleet.clone();
    let train_steps = per_week * (opts.weeks - 1);
    fleet_opts.change_window.1 = fleet_opts.change_window.1.min(train_steps);
    fleet_opts.change_window.0 = fleet_opts.change_window.0.min(fleet_opts.change_window.1);
    let apps = make_fleet_with(n, seed, &fleet_opts)?;
    let mut traces = Vec::with_capacity(n);
    for (i, spec) in apps.iter().enumerate() {
        let app_seed = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
        let series = generate_trace(spec, per_week * opts.weeks, opts.freq_minutes, app_seed)?;
        traces.push(simulate_history(
            spec,
            series,
            opts.epoch_steps,
            opts.cpu_noise_std,
            app_seed ^ 0xC0FFEE,
        )?);
    }
    let ids: Vec<String> = apps.iter().map(|a| a.app_id.clone()).collect();
    Ok(Dataset {
        fleet: FleetFile {
            freq_minutes: opts.freq_minutes,
            weeks: opts.weeks,
            start_timestamp: DEFAULT_START,
            seed,
            epoch_steps: opts.epoch_steps,
            cpu_noise_std: opts.cpu_noise_std,
            train_apps: ids[..opts.train_apps].to_vec(),
            heldout_apps: ids[opts.train_apps..].to_vec(),
            apps,
        },
        traces,
    })
}

pub fn trace_header(d: usize) -> Vec<String> {
    let mut h = vec!["timestamp".to_string(), "app_id".to_string()];
    h.extend((0..d).map(|k| format!("dim_{k}")));
    h.extend(["day_of_week", "hour_of_day", "cpu", "vm_count"].map(String::from));
    h
}

pub fn write_trace_csv(trace: &AppTrace, w: impl std::io::Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(trace_header(trace.series.dims()))?;
    let s = &trace.series;
    for t in 0..s.len() {
        let mut row = vec![s.timestamps[t].to_string(), s.app_id.clone()];
        row.extend(s.values[t].iter().map(|v| v.to_string()));
        row.push(s.covariates[t].day_of_week.to_string());
        row.push(s.covariates[t].hour_of_day.to_string());
        row.push(trace.cpu[t].to_string());
        row.push(trace.vm_count[t].to_string());
        out.write_record(&row)?;
    }
    out.flush().map_err(|e| Error::io("<trace csv>", e))?;
    Ok(())
}

pub fn read_trace_csv(r: impl std::io::Read, freq_minutes: u32) -> Result<AppTrace> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let d = header
        .len()
        .checked_sub(6)
        .ok_or_else(|| Error::Config(format!("trace header has only {} columns", header.len())))?;
    if header.iter().collect::<Vec<_>>() != trace_header(d) {
        return Err(Error::Config(format!("unexpected trace header {header:?}")));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|e| Error::Config(format!("bad number `{s}`: {e}")))
    };
    let mut series = WorkloadSeries {
        app_id: String::new(),
        freq_minutes,
        timestamps: Vec::new(),
        values: Vec::new(),
        covariates: Vec::new(),
    };
    let mut cpu = Vec::new();
    let mut vm_count = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let ts: i64 = rec[0]
            .parse()
            .map_err(|e| Error::Config(format!("bad timestamp: {e}")))?;
        if series.app_id.is_empty() {
            series.app_id = rec[1].to_string();
        }
        let values = (0..d)
            .map(|k| parse(&rec[2 + k]))
            .collect::<Result<Vec<_>>>()?;
        let dow: u8 = rec[2 + d]
            .parse()
            .map_err(|e| Error::Config(format!("bad day_of_week: {e}")))?;
        let hour: u8 = rec[3 + d]
            .parse()
            .map_err(|e| Error::Config(format!("bad hour_of_day: {e}")))?;
        series.timestamps.push(ts);
        series.values.push(values);
        series.covariates.push(TimeCovariate::new(dow, hour)?);
        cpu.push(parse(&rec[4 + d])?);
        vm_count.push(
            rec[5 + d]
                .parse()
                .map_err(|e| Error::Config(format!("bad vm_count: {e}")))?,
        );
    }
    series.validate()?;
    Ok(AppTrace {
        series,
        cpu,
        vm_count,
    })
}

pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let fleet_path = dir.join("fleet.json");
    let json = serde_json::to_string_pretty(&data.fleet)?;
    fs::write(&fleet_path, json).map_err(|e| Error::io(&fleet_path, e))?;
    for trace in &data.traces {
        let path = dir.join(format!("{}.csv", trace.series.app_id));
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_trace_csv(trace, std::io::BufWriter::new(file))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let fleet_path = dir.join("fleet.json");
    let text = fs::read_to_string(&fleet_path).map_err(|e| Error::io(&fleet_path, e))?;
    let fleet: FleetFile = serde_json::from_str(&text)?;
    let mut traces = Vec::with_capacity(fleet.apps.len());
    for app in &fleet.apps {
        let path = dir.join(format!("{}.csv", app.app_id));
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        traces.push(read_trace_csv(
            std::io::BufReader::new(file),
            fleet.freq_minutes,
        )?);
    }
    Ok(Dataset { fleet, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    pub(crate) fn linear_spec() -> AppSpec {
        AppSpec {
            app_id: "lin".into(),
            dims: vec![
                SeasonalDim {
                    base: 500.0,
                    daily_amplitude: 0.4,
                    weekly_modulation: 0.0,
                    phase: 0.3,
                },
                SeasonalDim {
                    base: 250.0,
                    daily_amplitude: 0.2,
                    weekly_modulation: 0.0,
                    phase: -1.0,
                },
            ],
            noise_std: 0.0,
            change_points: vec![],
            cpu_response: CpuResponse {
                weights: vec![0.002, 0.004],
                bias: 0.05,
                cap: 1.0,
                curvature: 0.0,
            },
            nominal_vms: 5.0,
        }
    }

    #[test]
    fn covariates_from_timestamps() {
        let c = TimeCovariate::from_timestamp(DEFAULT_START);
        assert_eq!((c.day_of_week, c.hour_of_day), (0, 0));
        let c = TimeCovariate::from_timestamp(DEFAULT_START + 5 * 86_400 + 13 * 3600 + 59 * 60);
        assert_eq!((c.day_of_week, c.hour_of_day), (5, 13));
        assert!(TimeCovariate::new(7, 0).is_err());
        assert!(TimeCovariate::new(0, 24).is_err());
    }

    #[test]
    fn noiseless_trace_repeats_daily() {
        let spec = linear_spec();
        let s = generate_trace(&spec, 3 * 144, 10, 7).unwrap();
        s.validate().unwrap();
        for t in 0..2 * 144 {
            assert_eq!(s.values[t], s.values[t + 144]);
        }
    }

    #[test]
    fn noiseless_weekly_trace_repeats_weekly_between_change_points() {
        let mut spec = linear_spec();
        spec.dims[0].weekly_modulation = 0.25;
        spec.change_points.push(ChangePoint {
            step: 2500,
            factor: 1.3,
        });
        let s = generate_trace(&spec, 4032, 10, 7).unwrap();
        for t in 0..2500 - 1008 {
            assert_eq!(s.values[t], s.values[t + 1008]);
        }
        for t in 2500..4032 - 1008 {
            assert_eq!(s.values[t], s.values[t + 1008]);
        }
        // the shift itself shows up across the boundary
        assert!((s.values[2500][0] / s.values[2500 - 1008][0] - 1.3).abs() < 1e-12);
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let mut spec = linear_spec();
        spec.noise_std = 0.05;
        let a = generate_trace(&spec, 300, 10, 11).unwrap();
        let b = generate_trace(&spec, 300, 10, 11).unwrap();
        let c = generate_trace(&spec, 300, 10, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.values.iter().flatten().all(|v| *v >= 0.0));
    }

    #[test]
    fn horizon_shorter_than_period_rejected() {
        assert!(matches!(
            generate_trace(&linear_spec(), 100, 10, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn autocorrelation_peaks_at_one_day() {
        let mut spec = linear_spec();
        spec.noise_std = 0.05;
        let s = generate_trace(&spec, 4032, 10, 3).unwrap();
        let x: Vec<f64> = s.values.iter().map(|v| v[0]).collect();
        let daily = autocorrelation(&x, 144);
        assert!(daily > 0.8, "lag-144 autocorrelation {daily}");
        for lag in [36, 72, 108, 180, 216, 288 - 36] {
            assert!(autocorrelation(&x, lag) < daily, "lag {lag} beats one day");
        }
    }

    #[test]
    fn oracle_examples() {
        let spec = linear_spec();
        let cov = TimeCovariate::new(2, 10).unwrap();
        assert_abs_diff_eq!(cpu_oracle(&spec, &[0.0, 0.0], cov).unwrap(), 0.05);
        assert_abs_diff_eq!(
            cpu_oracle(&spec, &[100.0, 50.0], cov).unwrap(),
            0.45,
            epsilon = 1e-12
        );
        // halving unit workload lowers utilization below saturation
        let full = cpu_oracle(&spec, &[40.0, 20.0], cov).unwrap();
        let half = cpu_oracle(&spec, &[20.0, 10.0], cov).unwrap();
        assert!(half < full);
        assert!(matches!(
            cpu_oracle(&spec, &[-1.0, 0.0], cov),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn env_step_uses_unit_workload() {
        let spec = linear_spec();
        let mut series = generate_trace(&spec, 144, 10, 0).unwrap();
        series.values[0] = vec![100.0, 50.0];
        series.values[1] = vec![100.0, 50.0];
        let env = Environment::new(spec, series, 0.0, 1).unwrap();
        let s0 = env.initial_state(0, 5.0);
        let r1 = env.step(&s0, 5.0).unwrap();
        assert_eq!(r1.unit_workload, vec![20.0, 10.0]);
        assert_eq!(r1.state.t, 1);
        let r2 = env.step(&r1.state, 5.0).unwrap();
        assert_eq!(r1.realized_cpu, r2.realized_cpu);
        assert_eq!(r2.state.cpu_history.len(), 2);

        let low = env.step(&s0, 0.3).unwrap();
        assert!(low.clamped);
        assert_eq!(low.executed_vms, 1);
        assert!(!r1.clamped);
    }

    #[test]
    fn vm_rounding_is_half_up() {
        assert_eq!(round_vm_count(2.5), (3, false));
        assert_eq!(round_vm_count(2.49), (2, false));
        assert_eq!(round_vm_count(1.0), (1, false));
        assert_eq!(round_vm_count(0.99), (1, true));
        assert_eq!(round_vm_count(f64::NAN), (1, true));
    }

    #[test]
    fn fleet_shapes() {
        let one = make_fleet(1, 5).unwrap();
        assert_eq!(one.len(), 1);
        one[0].validate().unwrap();
        assert!(make_fleet(0, 5).is_err());

        let fleet = make_fleet(50, 9).unwrap();
        for (i, a) in fleet.iter().enumerate() {
            for b in &fleet[i + 1..] {
                assert_ne!(a.cpu_response.weights, b.cpu_response.weights);
            }
        }
        let traces: Vec<_> = fleet
            .iter()
            .map(|s| generate_trace(s, 4 * 7 * 144, 10, 1).unwrap())
            .collect();
        assert_eq!(traces.len(), 50);
        assert!(traces.iter().all(|t| t.len() == 4032));
        // dominant dimension varies across the fleet
        let dominant: std::collections::HashSet<usize> = fleet
            .iter()
            .map(|a| {
                (0..a.d())
                    .max_by(|i, j| a.dims[*i].base.partial_cmp(&a.dims[*j].base).unwrap())
                    .unwrap()
            })
            .collect();
        assert_eq!(dominant.len(), 3);
    }

    #[test]
    fn closed_form_vm_count_hits_target() {
        let spec = linear_spec();
        let x = [300.0, 120.0];
        let l = spec.cpu_response.vm_count_for_target(&x, 0.4).unwrap();
        let unit: Vec<f64> = x.iter().map(|v| v / l).collect();
        assert_abs_diff_eq!(spec.cpu_response.eval(&unit), 0.4, epsilon = 1e-12);

        let mut curved = spec.clone();
        curved.cpu_response.curvature = 0.05;
        let l = curved.cpu_response.vm_count_for_target(&x, 0.3).unwrap();
        let unit: Vec<f64> = x.iter().map(|v| v / l).collect();
        assert_abs_diff_eq!(curved.cpu_response.eval(&unit), 0.3, epsilon = 1e-9);
        assert!(spec.cpu_response.vm_count_for_target(&x, 0.01).is_none());
    }

    #[test]
    fn trace_csv_round_trip() {
        let data = generate_dataset(
            &DataOptions {
                train_apps: 1,
                heldout_apps: 1,
                weeks: 2,
                ..DataOptions::default()
            },
            4,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&data.traces[0], &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "timestamp,app_id,dim_0,dim_1,dim_2,day_of_week,hour_of_day,cpu,vm_count\n"
        ));
        let back = read_trace_csv(buf.as_slice(), 10).unwrap();
        assert_eq!(back, data.traces[0]);

        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &data).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.fleet, data.fleet);
        assert_eq!(loaded.traces, data.traces);
        assert_eq!(loaded.fleet.train_steps(), 1008);
    }

    #[test]
    fn history_spreads_utilization() {
        let data = generate_dataset(
            &DataOptions {
                train_apps: 2,
                heldout_apps: 0,
                weeks: 2,
                ..DataOptions::default()
            },
            8,
        )
        .unwrap();
        for tr in &data.traces {
            assert!(tr.cpu.iter().all(|c| (0.0..=1.0).contains(c)));
            let lo = tr.cpu.iter().cloned().fold(1.0, f64::min);
            let hi = tr.cpu.iter().cloned().fold(0.0, f64::max);
            assert!(lo < 0.3 && hi > 0.5, "cpu range {lo}..{hi}");
        }
    }

    proptest! {
        #[test]
        fn oracle_is_monotone(
            a in proptest::collection::vec(0.0f64..500.0, 3),
            bump in proptest::collection::vec(0.0f64..50.0, 3),
            seed in 0u64..50,
        ) {
            let spec = &make_fleet(1, seed).unwrap()[0];
            let cov = TimeCovariate::new(0, 0).unwrap();
            let b: Vec<f64> = a.iter().zip(&bump).map(|(x, y)| x + y).collect();
            let ca = cpu_oracle(spec, &a, cov).unwrap();
            let cb = cpu_oracle(spec, &b, cov).unwrap();
            prop_assert!(cb >= ca);
            prop_assert!((0.0..=1.0).contains(&ca));
        }

        #[test]
        fn unit_workload_times_vms_conserves_traffic(
            x in proptest::collection::vec(0.0f64..1e5, 3),
            requested in 0.0f64..500.0,
        ) {
            let spec = &make_fleet(1, 1).unwrap()[0];
            let series = generate_trace(spec, 144, 10, 0).unwrap();
            let mut series = series;
            series.values[0] = x.clone();
            let env = Environment::new(spec.clone(), series, 0.0, 0).unwrap();
            let rec = env.step(&env.initial_state(0, 1.0), requested).unwrap();
            let l = f64::from(rec.executed_vms);
            for (u, orig) in rec.unit_workload.iter().zip(&x) {
                let back = u * l;
                prop_assert!((back - orig).abs() <= orig.abs() * 4.0 * f64::EPSILON);
            }
        }
    }
}
