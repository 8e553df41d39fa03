//! Tape gradients against central finite differences.
//!
//! Each check compares reverse-mode derivatives with `(f(x+h) - f(x-h)) / 2h`
//! at `h = 1e-6`, evaluated only through forward passes, and reports the worst
//! error it saw so callers can apply their own tolerance.

use metascale_core::forecaster::{DapmModel, ForecastConfig, StepCov, Window};
use metascale_core::meta::{AnpConfig, AnpModel, MetaTask, ObservationPair};
use metascale_core::scaler::{
    reward, rollout_value, value_and_grad, AnalyticCpu, AnpCpu, CpuModel, PolicyConfig,
    PolicyModel, RewardParams, RolloutStart, ScalingState,
};
use metascale_core::tensor::gradcheck::{
    central_difference, central_difference_at, max_relative_error,
};
use metascale_core::tensor::nn::multihead_attention;
use metascale_core::tensor::{Tape, Var};
use metascale_core::workload::{CpuResponse, TimeCovariate, DEFAULT_START};
use metascale_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const SEEDS: u64 = 100;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-3;

pub type Build = dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;
pub type Sampler = fn(&mut ChaCha8Rng) -> f64;

fn any(r: &mut ChaCha8Rng) -> f64 {
    r.gen_range(-2.0..2.0)
}

fn positive(r: &mut ChaCha8Rng) -> f64 {
    r.gen_range(0.3..2.5)
}

/// Keeps clear of the kinks at 0 (relu) and ±0.5 (clamp).
fn off_kinks(r: &mut ChaCha8Rng) -> f64 {
    loop {
        let x: f64 = r.gen_range(-1.5..1.5);
        if [0.0, -0.5, 0.5].iter().all(|k| (x - k).abs() > 1e-2) {
            return x;
        }
    }
}

/// Random linear functional of the op's output, so every output entry
/// contributes to the checked scalar.
fn scalarise<'t>(tape: &'t Tape, out: Var<'t>, weights: &[f64]) -> Result<Var<'t>> {
    let w = tape.constant(out.shape(), weights.to_vec())?;
    out.mul(w)?.sum_all()
}

pub fn op_error(shapes: &[&[usize]], sample: Sampler, build: &Build) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| {
                (0..s.iter().product::<usize>())
                    .map(|_| sample(&mut rng))
                    .collect()
            })
            .collect();
        let out_len = {
            let tape = Tape::new();
            let vars: Vec<Var> = shapes
                .iter()
                .zip(&inputs)
                .map(|(s, x)| tape.constant(s.to_vec(), x.clone()).unwrap())
                .collect();
            build(&tape, &vars).unwrap().len()
        };
        let weights: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let tape = Tape::new();
        let vars: Vec<Var> = shapes
            .iter()
            .zip(&inputs)
            .map(|(s, x)| tape.var(s.to_vec(), x.clone()).unwrap())
            .collect();
        let y = scalarise(&tape, build(&tape, &vars).unwrap(), &weights).unwrap();
        y.backward().unwrap();
        let analytic: Vec<f64> = vars
            .iter()
            .flat_map(|v| v.grad().unwrap_or_else(|| vec![0.0; v.len()]))
            .collect();

        let flat: Vec<f64> = inputs.concat();
        let f = |x: &[f64]| {
            let tape = Tape::new();
            let mut off = 0;
            let vars: Vec<Var> = shapes
                .iter()
                .map(|s| {
                    let n = s.iter().product::<usize>();
                    let v = tape.constant(s.to_vec(), x[off..off + n].to_vec()).unwrap();
                    off += n;
                    v
                })
                .collect();
            scalarise(&tape, build(&tape, &vars).unwrap(), &weights)
                .unwrap()
                .item()
        };
        let numeric = central_difference(f, &flat, H);
        worst = worst.max(max_relative_error(&analytic, &numeric, FLOOR));
    }
    worst
}

/// One op under test: input shapes, where to sample inputs, and the op itself.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub sample: Sampler,
    pub build: Box<Build>,
}

fn case(name: &'static str, shapes: &[&[usize]], sample: Sampler, build: Box<Build>) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        sample,
        build,
    }
}

macro_rules! unary {
    ($name:literal, $shape:expr, $sample:expr, |$x:ident| $body:expr) => {
        case(
            $name,
            &[&$shape],
            $sample,
            Box::new(|_t, v| {
                let $x = v[0];
                $body
            }),
        )
    };
}

macro_rules! binary {
    ($name:literal, $sa:expr, $sb:expr, $sample:expr, |$t:ident, $a:ident, $b:ident| $body:expr) => {
        case(
            $name,
            &[&$sa, &$sb],
            $sample,
            Box::new(|$t, v| {
                let ($a, $b) = (v[0], v[1]);
                $body
            }),
        )
    };
}

/// Every differentiable tape op, each wrapped so its gradient is non-trivial.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        unary!("neg", [3, 4], any, |x| x.neg()),
        unary!("tanh", [3, 4], any, |x| x.tanh()),
        unary!("sigmoid", [3, 4], any, |x| x.sigmoid()),
        unary!("exp", [3, 4], any, |x| x.exp()),
        unary!("log", [3, 4], positive, |x| x.log()),
        unary!("log1p", [3, 4], positive, |x| x.log1p()),
        unary!("square", [3, 4], any, |x| x.square()),
        unary!("sqrt", [3, 4], positive, |x| x.sqrt()),
        unary!("softplus", [3, 4], any, |x| x.softplus()),
        unary!("relu", [3, 4], off_kinks, |x| x.relu()),
        unary!("scale", [3, 4], any, |x| x.scale(-1.7)),
        unary!("add_scalar", [3, 4], any, |x| x.add_scalar(0.3)?.square()),
        unary!("clamp", [3, 4], off_kinks, |x| x.clamp(-0.5, 0.5)?.mul(x)),
        unary!("transpose", [3, 4], any, |x| x.transpose()?.tanh()),
        unary!("reshape", [3, 4], any, |x| x.reshape(vec![2, 6])?.square()),
        unary!("slice_cols", [3, 5], any, |x| x.slice_cols(1, 3)?.square()),
        unary!("slice_rows", [4, 3], any, |x| x.slice_rows(1, 2)?.square()),
        unary!("broadcast_rows", [1, 4], any, |x| x
            .broadcast_rows(3)?
            .tanh()),
        unary!("softmax_rows", [3, 4], any, |x| x.softmax(1)),
        unary!("softmax_cols", [3, 4], any, |x| x.softmax(0)),
        unary!("sum_rows", [3, 4], any, |x| x.sum(0)?.square()),
        unary!("sum_cols", [3, 4], any, |x| x.sum(1)?.square()),
        unary!("mean_rows", [3, 4], any, |x| x.mean(0)?.square()),
        unary!("mean_cols", [3, 4], any, |x| x.mean(1)?.square()),
        unary!("sum_all", [3, 4], any, |x| x.square()?.sum_all()),
        unary!("mean_all", [3, 4], any, |x| x.square()?.mean_all()),
        binary!("add", [3, 4], [3, 4], any, |_t, a, b| a.add(b)?.square()),
        binary!("sub", [3, 4], [3, 4], any, |_t, a, b| a.sub(b)?.square()),
        binary!("mul", [3, 4], [3, 4], any, |_t, a, b| a.mul(b)),
        binary!("div", [3, 4], [3, 4], positive, |_t, a, b| a.div(b)),
        binary!("mul_scalar_broadcast", [3, 4], [1, 1], any, |_t, a, b| a
            .mul(b)),
        binary!(
            "div_scalar_broadcast",
            [3, 4],
            [1, 1],
            positive,
            |_t, a, b| a.div(b)
        ),
        binary!("matmul", [3, 4], [4, 2], any, |_t, a, b| a.matmul(b)),
        binary!("concat_cols", [3, 2], [3, 4], any, |t, a, b| t
            .concat(&[a, b], 1)?
            .square()),
        binary!("concat_rows", [2, 3], [4, 3], any, |t, a, b| t
            .concat(&[a, b], 0)?
            .square()),
        case(
            "affine",
            &[&[3, 4], &[4, 2], &[1, 2]],
            any,
            Box::new(|_t, v| v[0].affine(v[1], v[2])),
        ),
        case(
            "gather_rows",
            &[&[4, 3]],
            any,
            Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 3, 2])?.square()),
        ),
        case(
            "multihead_attention",
            &[&[2, 4], &[5, 4], &[5, 4]],
            any,
            Box::new(|t, v| Ok(multihead_attention(t, v[0], v[1], v[2], 2)?.0)),
        ),
    ]
}

/// Worst relative error of each op over all seeds.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    op_cases()
        .iter()
        .map(|c| {
            let shapes: Vec<&[usize]> = c.shapes.iter().map(|s| s.as_slice()).collect();
            (c.name, op_error(&shapes, c.sample, c.build.as_ref()))
        })
        .collect()
}
/// Largest deviation of the softmax Jacobian from `s_k (δ_kj - s_j)`.
pub fn softmax_jacobian_error() -> f64 {
    let mut worst: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..SEEDS {
        let n = rng.gen_range(2..7);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let s: Vec<f64> = e.iter().map(|v| v / z).collect();
        for k in 0..n {
            let tape = Tape::new();
            let v = tape.var(vec![1, n], x.clone()).unwrap();
            let sm = v.softmax(1).unwrap();
            let mut pick = vec![0.0; n];
            pick[k] = 1.0;
            scalarise(&tape, sm, &pick).unwrap().backward().unwrap();
            let row = v.grad().unwrap();
            for j in 0..n {
                let expected = s[k] * (if j == k { 1.0 } else { 0.0 } - s[j]);
                worst = worst.max((row[j] - expected).abs());
            }
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Whole models

fn tiny_dapm() -> ForecastConfig {
    ForecastConfig {
        l: 6,
        h: 2,
        p: 3,
        m: 3,
        heads: 1,
        hidden: 4,
        attn: 4,
        mlp: 5,
        cov_dim: 2,
        ..ForecastConfig::default()
    }
}

fn windows(c: &ForecastConfig, d: usize, n: usize, seed: u64) -> Vec<Window> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cov = |i: usize| StepCov::at(DEFAULT_START + 600 * i as i64, 10, c.p);
    let row = |rng: &mut ChaCha8Rng| {
        (0..d)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };
    (0..n)
        .map(|k| Window {
            history: (0..c.l).map(|_| row(&mut rng)).collect(),
            hist_cov: (0..c.l).map(|i| cov(k + i)).collect(),
            future_cov: (0..c.h).map(|i| cov(k + c.l + i)).collect(),
            target: Some((0..c.h).map(|_| row(&mut rng)).collect()),
        })
        .collect()
}

/// Coordinates to probe: a random subset, so the check stays quick.
fn probe_coords(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k.min(n)).map(|_| rng.gen_range(0..n)).collect()
}

/// Worst relative error of the forecaster loss gradient over four models.
pub fn forecaster_loss_error() -> f64 {
    let mut worst: f64 = 0.0;
    let cfg = tiny_dapm();
    for seed in 0..4 {
        let model = DapmModel::new(cfg.clone(), 2, 10, seed).unwrap();
        let ws = windows(&cfg, 2, 3, seed + 100);
        let refs: Vec<&Window> = ws.iter().collect();
        let (_, grad) = model.loss_and_grad(&refs).unwrap();
        let x0 = model.params().flat_values();
        let coords = probe_coords(x0.len(), 80, seed);
        let numeric = central_difference_at(
            |x| {
                let mut m = model.clone();
                m.params_mut().set_flat_values(x).unwrap();
                m.loss_and_grad(&refs).unwrap().0
            },
            &x0,
            &coords,
            H,
        );
        let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
        worst = worst.max(max_relative_error(&analytic, &numeric, FLOOR));
    }
    worst
}

fn tiny_anp() -> AnpConfig {
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

fn observations(n: usize, seed: u64) -> Vec<ObservationPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ObservationPair {
            cov: TimeCovariate::new(rng.gen_range(0..7), rng.gen_range(0..24)).unwrap(),
            unit_workload: vec![rng.gen_range(0.0..20.0), rng.gen_range(0.0..5.0)],
            cpu: rng.gen_range(0.05..0.95),
        })
        .collect()
}

fn elbo_with(model: &AnpModel, task: &MetaTask, eps: &[f64], track: bool) -> (f64, Vec<f64>) {
    let tape = Tape::new();
    let b = if track {
        model.params().bind(&tape)
    } else {
        model.params().bind_frozen(&tape)
    };
    let (elbo, _) = model.elbo_on_tape(&tape, &b, task, eps).unwrap();
    if track {
        elbo.backward().unwrap();
        (elbo.item(), model.params().flat_grads_of(&b))
    } else {
        (elbo.item(), Vec::new())
    }
}

/// Worst relative error of the ELBO gradient over four models.
pub fn meta_elbo_error() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..4 {
        let model = AnpModel::new(tiny_anp(), 2, seed).unwrap();
        let task = MetaTask {
            app_id: "g".into(),
            context: observations(5, seed + 10),
            target: observations(3, seed + 20),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 30);
        let eps: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let (_, grad) = elbo_with(&model, &task, &eps, true);
        let x0 = model.params().flat_values();
        let coords = probe_coords(x0.len(), 80, seed);
        let numeric = central_difference_at(
            |x| {
                let mut m = model.clone();
                m.params_mut().set_flat_values(x).unwrap();
                elbo_with(&m, &task, &eps, false).0
            },
            &x0,
            &coords,
            H,
        );
        let analytic: Vec<f64> = coords.iter().map(|&i| grad[i]).collect();
        worst = worst.max(max_relative_error(&analytic, &numeric, FLOOR));
    }
    worst
}

fn responses() -> Vec<CpuResponse> {
    vec![
        CpuResponse {
            weights: vec![0.002, 0.004],
            bias: 0.05,
            cap: 1.0,
            curvature: 0.0,
        },
        CpuResponse {
            weights: vec![0.003, 0.001],
            bias: 0.08,
            cap: 1.0,
            curvature: 0.01,
        },
    ]
}

fn rollout_starts(n: usize, seed: u64, dz: usize, models: usize) -> Vec<RolloutStart> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| RolloutStart {
            covs: (0..3)
                .map(|i| TimeCovariate::new(rng.gen_range(0..7), (4 * i + 2) % 24).unwrap())
                .collect(),
            workloads: (0..3)
                .map(|_| vec![rng.gen_range(200.0..600.0), rng.gen_range(50.0..200.0)])
                .collect(),
            l0: rng.gen_range(2.0..8.0),
            z: (0..dz).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            model: k % models,
        })
        .collect()
}

fn value_gradient_error(
    policy: &PolicyModel,
    starts: &[RolloutStart],
    models: &[&dyn CpuModel],
    params: &RewardParams,
) -> f64 {
    let batch: Vec<&RolloutStart> = starts.iter().collect();
    let (_, grad) = value_and_grad(policy, &batch, models, params).unwrap();
    let x0 = policy.params().flat_values();
    let numeric = central_difference(
        |x| {
            let mut p = policy.clone();
            p.params_mut().set_flat_values(x).unwrap();
            starts
                .iter()
                .map(|s| rollout_value(&p, s, models[s.model], params).unwrap())
                .sum::<f64>()
                / starts.len() as f64
        },
        &x0,
        H,
    );
    // the value is small, so compare against the gradient's own scale
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    max_relative_error(&grad, &numeric, 1e-2 * scale)
}

/// Worst value-gradient error through the analytic CPU model, horizons 0 to 2.
pub fn analytic_unroll_error() -> f64 {
    let analytic: Vec<AnalyticCpu> = responses()
        .into_iter()
        .map(|response| AnalyticCpu { response })
        .collect();
    let models: Vec<&dyn CpuModel> = analytic.iter().map(|m| m as &dyn CpuModel).collect();
    let params = RewardParams {
        eta: 1e-3,
        ..RewardParams::default()
    };
    let mut worst: f64 = 0.0;
    for (seed, horizon) in [(0, 0), (1, 1), (2, 2)] {
        let cfg = PolicyConfig {
            hidden: 6,
            horizon,
            ..PolicyConfig::default()
        };
        let policy = PolicyModel::new(cfg, 2, 0, seed).unwrap();
        worst = worst.max(value_gradient_error(
            &policy,
            &rollout_starts(6, seed, 0, 2),
            &models,
            &params,
        ));
    }
    worst
}

/// Value-gradient error through an untrained meta-predictor.
pub fn meta_unroll_error() -> f64 {
    let anp = AnpModel::new(tiny_anp(), 2, 5).unwrap();
    let caches: Vec<AnpCpu> = (0..2)
        .map(|k| AnpCpu {
            model: &anp,
            cache: anp.cache_context(&observations(5, 40 + k)).unwrap(),
        })
        .collect();
    let models: Vec<&dyn CpuModel> = caches.iter().map(|m| m as &dyn CpuModel).collect();
    let cfg = PolicyConfig {
        hidden: 6,
        horizon: 1,
        ..PolicyConfig::default()
    };
    let policy = PolicyModel::new(cfg, 2, 3, 8).unwrap();
    let mut starts = rollout_starts(4, 3, 3, 2);
    for (s, k) in starts.iter_mut().zip(0..) {
        s.z = caches[k % 2].cache.belief.mean.clone();
        s.model = k % 2;
    }
    value_gradient_error(&policy, &starts, &models, &RewardParams::default())
}

/// Worst relative error of dr/da against its closed form.
pub fn reward_derivative_error() -> f64 {
    let mut worst: f64 = 0.0;
    // r(a) = -(b + w·x/(l(1+a)) - c*)² - η(a l)² for a linear response
    let resp = &responses()[0];
    let model = AnalyticCpu {
        response: resp.clone(),
    };
    let params = RewardParams {
        eta: 2e-3,
        ..RewardParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..SEEDS {
        let l = rng.gen_range(2.0..8.0);
        let x = [rng.gen_range(200.0..600.0), rng.gen_range(50.0..200.0)];
        let s = ScalingState {
            cov: TimeCovariate::new(2, 13).unwrap(),
            unit_workload: x.iter().map(|v| v / l).collect(),
            z: vec![],
            c_hat: 0.0,
            l,
        };
        let a = rng.gen_range(-0.45..1.95);
        let wx: f64 = resp.weights.iter().zip(&x).map(|(w, v)| w * v).sum();
        let c = resp.bias + wx / (l * (1.0 + a));
        let dc = -wx / (l * (1.0 + a).powi(2));
        let exact = -2.0 * (c - params.c_target) * dc - 2.0 * params.eta * a * l * l;
        let numeric =
            central_difference(|v| reward(&s, v[0], &model, &params).unwrap(), &[a], H)[0];
        worst = worst.max((exact - numeric).abs() / exact.abs().max(FLOOR));
    }
    worst
}
