//! Periodic attention forecaster for multi-dimensional traffic.
//!
//! A window of `L = n·p` past steps is embedded step by step (traffic plus
//! learned calendar embeddings plus a phase-within-period encoding), split
//! into `p` phase tracks of length `n` (track `j` holds the `j`-th step of
//! every period), and each track is summarised by one shared LSTM. The `H`
//! future steps then attend over the `p` track summaries, with queries built
//! from the future steps' known covariates, and a small MLP maps each
//! attended vector to a `d`-dimensional forecast.
//!
//! One parameter set serves every application; inputs and targets are
//! z-scored per application so that traffic of very different magnitude
//! shares the same model.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::tensor::nn::multihead_attention;
use crate::tensor::{Adam, AdamConfig, Bound, Checkpoint, ParamId, Params, Tape, Var};
use crate::workload::{TimeCovariate, WorkloadSeries};

/// Number of sine/cosine harmonics in the phase encoding.
pub const PHASE_HARMONICS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// History length in steps; must equal `n·p`.
    #[serde(rename = "L")]
    pub l: usize,
    /// Forecast horizon in steps.
    #[serde(rename = "H")]
    pub h: usize,
    /// Seasonality length in steps.
    pub p: usize,
    /// Step embedding width.
    pub m: usize,
    pub heads: usize,
    /// LSTM hidden width.
    pub hidden: usize,
    /// Total attention width (split evenly across heads).
    pub attn: usize,
    pub mlp: usize,
    /// Width of each calendar lookup table.
    pub cov_dim: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    /// Spacing between consecutive training windows.
    pub stride: usize,
    /// Random subset of training windows visited per epoch (0 = all).
    pub windows_per_epoch: usize,
    pub val_fraction: f64,
    /// Cap on validation windows evaluated per epoch.
    pub val_windows: usize,
    pub clip: f64,
    pub seed: u64,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        ForecastConfig {
            l: 288,
            h: 24,
            p: 144,
            m: 64,
            heads: 2,
            hidden: 64,
            attn: 64,
            mlp: 64,
            cov_dim: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch: 128,
            epochs: 30,
            patience: 5,
            stride: 1,
            windows_per_epoch: 0,
            val_fraction: 0.1,
            val_windows: 512,
            clip: 1.0,
            seed: 0,
        }
    }
}

impl ForecastConfig {
    /// Number of periods in the history window.
    pub fn n(&self) -> usize {
        self.l.checked_div(self.p).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        contract!(
            self.p > 0 && self.l > 0 && self.h > 0,
            "L, H and p must be positive"
        );
        contract!(
            self.l.is_multiple_of(self.p),
            "history length L={} is not a multiple of p={}",
            self.l,
            self.p
        );
        contract!(
            self.heads > 0 && self.attn.is_multiple_of(self.heads),
            "heads={} must divide attention width {}",
            self.heads,
            self.attn
        );
        contract!(
            self.m > 0 && self.hidden > 0 && self.mlp > 0 && self.cov_dim > 0,
            "layer widths must be positive"
        );
        contract!(
            self.batch > 0 && self.stride > 0,
            "batch and stride must be positive"
        );
        contract!(
            (0.0..1.0).contains(&self.val_fraction),
            "val_fraction must lie in [0, 1)"
        );
        Ok(())
    }

    fn input_width(&self, d: usize) -> usize {
        d + 2 * self.cov_dim + 2 * PHASE_HARMONICS
    }
}

/// Calendar covariate of one step plus its position inside the period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCov {
    pub cov: TimeCovariate,
    /// Fraction of the period elapsed, in `[0, 1)`.
    pub phase: f64,
}

impl StepCov {
    pub fn at(timestamp: i64, freq_minutes: u32, p: usize) -> Self {
        let step = timestamp.div_euclid(i64::from(freq_minutes) * 60);
        StepCov {
            cov: TimeCovariate::from_timestamp(timestamp),
            phase: step.rem_euclid(p as i64) as f64 / p as f64,
        }
    }

    fn phase_features(&self) -> [f64; 2 * PHASE_HARMONICS] {
        let mut out = [0.0; 2 * PHASE_HARMONICS];
        for k in 0..PHASE_HARMONICS {
            let a = std::f64::consts::TAU * (k + 1) as f64 * self.phase;
            out[2 * k] = a.sin();
            out[2 * k + 1] = a.cos();
        }
        out
    }
}

/// Per-dimension z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        contract!(!rows.is_empty(), "cannot fit a normalizer on no data");
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for k in 0..d {
                var[k] += (r[k] - mean[k]).powi(2) / n;
            }
        }
        // A constant dimension keeps a tiny positive scale so the
        // transform stays invertible.
        let std = var
            .iter()
            .zip(&mean)
            .map(|(v, m): (&f64, &f64)| v.sqrt().max(1e-6 * m.abs().max(1.0)))
            .collect();
        Ok(Normalizer { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        Normalizer {
            mean: vec![0.0; d],
            std: vec![1.0; d],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// One model input: normalised history plus covariates over history and
/// horizon, and optionally the normalised targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub history: Vec<Vec<f64>>,
    pub hist_cov: Vec<StepCov>,
    pub future_cov: Vec<StepCov>,
    pub target: Option<Vec<Vec<f64>>>,
}

/// Splits `L = n·p` items into `p` phase tracks: track `j` holds items
/// `j, j+p, ..., j+(n-1)p` in order.
pub fn phase_group<T: Clone>(items: &[T], p: usize, n: usize) -> Result<Vec<Vec<T>>> {
    contract!(p > 0 && n > 0, "p and n must be positive");
    contract!(
        items.len() == n * p,
        "history of {} steps is not n·p = {}·{}",
        items.len(),
        n,
        p
    );
    Ok((0..p)
        .map(|j| (0..n).map(|k| items[j + k * p].clone()).collect())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
}

/// MAE and RMSE over paired values.
pub fn forecast_metrics(predictions: &[f64], truths: &[f64]) -> Result<Metrics> {
    contract!(
        predictions.len() == truths.len(),
        "{} predictions for {} truths",
        predictions.len(),
        truths.len()
    );
    contract!(!truths.is_empty(), "metrics over no values");
    let n = truths.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in predictions.iter().zip(truths) {
        abs += (p - t).abs();
        sq += (p - t).powi(2);
    }
    Ok(Metrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
    })
}

#[derive(Debug, Clone)]
struct Ids {
    day: ParamId,
    hour: ParamId,
    we: ParamId,
    be: ParamId,
    wx: ParamId,
    wh: ParamId,
    bl: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct DapmModel {
    pub config: ForecastConfig,
    /// Traffic dimensionality.
    pub d: usize,
    pub freq_minutes: u32,
    params: Params,
    ids: Ids,
    /// Training-split statistics per application.
    pub normalizers: BTreeMap<String, Normalizer>,
}

/// Intermediate values of one window's forward pass, for inspection.
pub struct ForwardTrace<'t> {
    pub output: Var<'t>,
    /// `heads` attention matrices of shape `[H, p]`.
    pub attention: Vec<Var<'t>>,
    pub track_states: Var<'t>,
}

impl DapmModel {
    pub fn new(config: ForecastConfig, d: usize, freq_minutes: u32, seed: u64) -> Result<Self> {
        config.validate()?;
        contract!(d > 0, "traffic dimensionality must be positive");
        contract!(freq_minutes > 0, "frequency must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let c = &config;
        let ids = Ids {
            day: p.add_weight("cov.day", 7, c.cov_dim, &mut rng),
            hour: p.add_weight("cov.hour", 24, c.cov_dim, &mut rng),
            we: p.add_weight("embed.w", c.input_width(d), c.m, &mut rng),
            be: p.add_bias("embed.b", c.m),
            wx: p.add_weight("lstm.wx", c.m, 4 * c.hidden, &mut rng),
            wh: p.add_weight("lstm.wh", c.hidden, 4 * c.hidden, &mut rng),
            bl: p.add_bias("lstm.b", 4 * c.hidden),
            wq: p.add_weight("attn.q", c.m, c.attn, &mut rng),
            wk: p.add_weight("attn.k", c.hidden, c.attn, &mut rng),
            wv: p.add_weight("attn.v", c.hidden, c.attn, &mut rng),
            wo: p.add_weight("attn.o", c.attn, c.attn, &mut rng),
            w1: p.add_weight("head.w1", c.attn + c.m, c.mlp, &mut rng),
            b1: p.add_bias("head.b1", c.mlp),
            w2: p.add_weight("head.w2", c.mlp, d, &mut rng),
            b2: p.add_bias("head.b2", d),
        };
        Ok(DapmModel {
            config,
            d,
            freq_minutes,
            params: p,
            ids,
            normalizers: BTreeMap::new(),
        })
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Sets the final projection to zero.
    pub fn zero_output_layer(&mut self) {
        for id in [self.ids.w2, self.ids.b2] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Sets all LSTM biases to zero.
    pub fn zero_recurrent_bias(&mut self) {
        self.params.get_mut(self.ids.bl).data_mut().fill(0.0);
    }

    /// Sets the step-embedding projection `W^e` to zero.
    pub fn zero_embedding_weight(&mut self) {
        self.params.get_mut(self.ids.we).data_mut().fill(0.0);
    }

    pub fn set_embedding_bias(&mut self, b: &[f64]) -> Result<()> {
        let t = self.params.get_mut(self.ids.be);
        contract!(b.len() == t.len(), "embedding bias has {} entries", t.len());
        t.data_mut().copy_from_slice(b);
        Ok(())
    }

    /// Step embeddings `W^e [x; f(u)] + b^e` for a batch of rows.
    pub fn embed_rows<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        xs: &[&[f64]],
        covs: &[StepCov],
    ) -> Result<Var<'t>> {
        contract!(xs.len() == covs.len(), "traffic and covariate rows differ");
        let r = xs.len();
        let mut flat = Vec::with_capacity(r * self.d);
        for x in xs {
            contract!(
                x.len() == self.d,
                "traffic row has {} dims, model expects {}",
                x.len(),
                self.d
            );
            contract!(x.iter().all(|v| v.is_finite()), "traffic must be finite");
            flat.extend_from_slice(x);
        }
        let mut days = Vec::with_capacity(r);
        let mut hours = Vec::with_capacity(r);
        let mut phase = Vec::with_capacity(r * 2 * PHASE_HARMONICS);
        for c in covs {
            contract!(
                c.cov.day_of_week < 7 && c.cov.hour_of_day < 24,
                "covariate out of range: {:?}",
                c.cov
            );
            days.push(usize::from(c.cov.day_of_week));
            hours.push(usize::from(c.cov.hour_of_day));
            phase.extend_from_slice(&c.phase_features());
        }
        let x = tape.constant(vec![r, self.d], flat)?;
        let day = tape.gather_rows(b[self.ids.day], &days)?;
        let hour = tape.gather_rows(b[self.ids.hour], &hours)?;
        let ph = tape.constant(vec![r, 2 * PHASE_HARMONICS], phase)?;
        tape.concat(&[x, day, hour, ph], 1)?
            .affine(b[self.ids.we], b[self.ids.be])
    }

    /// Embedding of a single step, evaluated eagerly.
    pub fn embed(&self, x: &[f64], u: StepCov) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        Ok(self.embed_rows(&tape, &b, &[x], &[u])?.value())
    }

    /// Runs the shared LSTM over `steps`, where row `r` of every step
    /// belongs to independent track `r`. Returns the final hidden states.
    pub fn encode_periods<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        steps: &[Var<'t>],
    ) -> Result<Var<'t>> {
        contract!(
            !steps.is_empty(),
            "each phase track needs at least one step"
        );
        let rows = steps[0].shape()[0];
        let hd = self.config.hidden;
        let mut h = tape.constant(vec![rows, hd], vec![0.0; rows * hd])?;
        let mut c = h;
        for x in steps {
            let z = x
                .matmul(b[self.ids.wx])?
                .add(h.matmul(b[self.ids.wh])?)?
                .add(b[self.ids.bl].broadcast_rows(rows)?)?;
            let i = z.slice_cols(0, hd)?.sigmoid()?;
            let f = z.slice_cols(hd, hd)?.sigmoid()?;
            let g = z.slice_cols(2 * hd, hd)?.tanh()?;
            let o = z.slice_cols(3 * hd, hd)?.sigmoid()?;
            c = f.mul(c)?.add(i.mul(g)?)?;
            h = o.mul(c.tanh()?)?;
        }
        Ok(h)
    }

    /// Multi-head attention of `queries` `[H, m]` over track states `[p, hidden]`.
    /// Returns the projected output `[H, attn]` and each head's weights.
    pub fn attend<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        queries: Var<'t>,
        keys: Var<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        let q = queries.matmul(b[self.ids.wq])?;
        let k = keys.matmul(b[self.ids.wk])?;
        let v = keys.matmul(b[self.ids.wv])?;
        let (s, w) = self.attend_projected(tape, q, k, v)?;
        Ok((s.matmul(b[self.ids.wo])?, w))
    }

    fn attend_projected<'t>(
        &self,
        tape: &'t Tape,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
    ) -> Result<(Var<'t>, Vec<Var<'t>>)> {
        multihead_attention(tape, q, k, v, self.config.heads)
    }

    fn check_window(&self, w: &Window) -> Result<()> {
        let c = &self.config;
        contract!(
            w.history.len() == c.l && w.hist_cov.len() == c.l,
            "history has {} steps ({} covariates), config expects L={}",
            w.history.len(),
            w.hist_cov.len(),
            c.l
        );
        contract!(
            w.future_cov.len() == c.h,
            "future covariates cover {} steps, config expects H={}",
            w.future_cov.len(),
            c.h
        );
        if let Some(t) = &w.target {
            contract!(
                t.len() == c.h,
                "target has {} steps, expected H={}",
                t.len(),
                c.h
            );
        }
        Ok(())
    }

    /// Normalised forecasts for a batch of windows, stacked as `[B·H, d]`.
    pub fn forward_batch<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        windows: &[&Window],
    ) -> Result<Var<'t>> {
        Ok(self.forward_inner(tape, b, windows, false)?.0)
    }

    /// Single-window forward pass exposing attention weights and track
    /// states.
    pub fn forward_traced<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        window: &Window,
    ) -> Result<ForwardTrace<'t>> {
        let (output, attention, track_states) = self.forward_inner(tape, b, &[window], true)?;
        Ok(ForwardTrace {
            output,
            attention,
            track_states,
        })
    }

    #[allow(clippy::type_complexity)]
    fn forward_inner<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        windows: &[&Window],
        keep_attention: bool,
    ) -> Result<(Var<'t>, Vec<Var<'t>>, Var<'t>)> {
        contract!(!windows.is_empty(), "empty batch");
        let c = &self.config;
        let (l, h, p, n) = (c.l, c.h, c.p, c.n());
        let nb = windows.len();
        let mut xs: Vec<&[f64]> = Vec::with_capacity(nb * l);
        let mut covs = Vec::with_capacity(nb * l);
        for w in windows {
            self.check_window(w)?;
            xs.extend(w.history.iter().map(Vec::as_slice));
            covs.extend_from_slice(&w.hist_cov);
        }
        let emb = self.embed_rows(tape, b, &xs, &covs)?;

        // Step k of every phase track across all windows: rows b·L + k·p + j.
        let mut steps = Vec::with_capacity(n);
        for k in 0..n {
            let idx: Vec<usize> = (0..nb)
                .flat_map(|wi| (0..p).map(move |j| wi * l + k * p + j))
                .collect();
            steps.push(tape.gather_rows(emb, &idx)?);
        }
        let tracks = self.encode_periods(tape, b, &steps)?;

        let zeros = vec![0.0; self.d];
        let qx: Vec<&[f64]> = vec![zeros.as_slice(); nb * h];
        let qcov: Vec<StepCov> = windows
            .iter()
            .flat_map(|w| w.future_cov.iter().copied())
            .collect();
        let queries = self.embed_rows(tape, b, &qx, &qcov)?;

        let q_all = queries.matmul(b[self.ids.wq])?;
        let k_all = tracks.matmul(b[self.ids.wk])?;
        let v_all = tracks.matmul(b[self.ids.wv])?;
        let mut per_window = Vec::with_capacity(nb);
        let mut attention = Vec::new();
        for wi in 0..nb {
            let (s, w) = self.attend_projected(
                tape,
                q_all.slice_rows(wi * h, h)?,
                k_all.slice_rows(wi * p, p)?,
                v_all.slice_rows(wi * p, p)?,
            )?;
            per_window.push(s);
            if keep_attention {
                attention.extend(w);
            }
        }
        let s = if nb == 1 {
            per_window[0]
        } else {
            tape.concat(&per_window, 0)?
        };
        let s = s.matmul(b[self.ids.wo])?;
        let hidden = tape
            .concat(&[s, queries], 1)?
            .affine(b[self.ids.w1], b[self.ids.b1])?
            .tanh()?;
        let out = hidden.affine(b[self.ids.w2], b[self.ids.b2])?;
        Ok((out, attention, tracks))
    }

    /// RMSE between normalised forecasts and targets of a batch. A 1e-12
    /// floor inside the root keeps the gradient defined at a perfect fit.
    pub fn batch_loss<'t>(
        &self,
        tape: &'t Tape,
        b: &Bound<'t>,
        windows: &[&Window],
    ) -> Result<Var<'t>> {
        let out = self.forward_batch(tape, b, windows)?;
        let mut flat = Vec::with_capacity(out.len());
        for w in windows {
            let t = w
                .target
                .as_ref()
                .ok_or_else(|| Error::Contract("training window without targets".into()))?;
            for row in t {
                contract!(row.len() == self.d, "target row has wrong dimensionality");
                flat.extend_from_slice(row);
            }
        }
        let y = tape.constant(out.shape(), flat)?;
        out.sub(y)?.square()?.mean_all()?.add_scalar(1e-12)?.sqrt()
    }

    /// Loss and flat parameter gradient for a batch.
    pub fn loss_and_grad(&self, windows: &[&Window]) -> Result<(f64, Vec<f64>)> {
        let tape = Tape::new();
        let b = self.params.bind(&tape);
        let loss = self.batch_loss(&tape, &b, windows)?;
        loss.backward()?;
        let grads = self.params.flat_grads_of(&b);
        Ok((loss.item(), grads))
    }

    /// Normalised forecast for one window, `H` rows of `d`.
    pub fn predict_normalized(&self, window: &Window) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let b = self.params.bind_frozen(&tape);
        let out = self.forward_batch(&tape, &b, &[window])?.value();
        Ok(out.chunks(self.d).map(<[f64]>::to_vec).collect())
    }

    /// Forecast in traffic units from raw history; clamped at zero.
    pub fn forecast(
        &self,
        history: &[Vec<f64>],
        hist_cov: &[StepCov],
        future_cov: &[StepCov],
        norm: &Normalizer,
    ) -> Result<Vec<Vec<f64>>> {
        let window = Window {
            history: history.iter().map(|x| norm.apply(x)).collect(),
            hist_cov: hist_cov.to_vec(),
            future_cov: future_cov.to_vec(),
            target: None,
        };
        Ok(self
            .predict_normalized(&window)?
            .iter()
            .map(|z| norm.invert(z).into_iter().map(|v| v.max(0.0)).collect())
            .collect())
    }

    /// Normalizer for an application: the stored training statistics if
    /// known, otherwise fitted on `series[..t]`.
    pub fn normalizer_for(&self, series: &WorkloadSeries, t: usize) -> Result<Normalizer> {
        match self.normalizers.get(&series.app_id) {
            Some(n) => Ok(n.clone()),
            None => Normalizer::fit(&series.values[..t]),
        }
    }

    /// Forecast of steps `t..t+H` from the `L` steps before `t`. The horizon
    /// may run past the end of the recorded series.
    pub fn forecast_at(&self, series: &WorkloadSeries, t: usize) -> Result<Vec<Vec<f64>>> {
        let c = &self.config;
        contract!(
            t >= c.l && t <= series.len(),
            "forecast origin {t} needs {} steps of history within a series of {}",
            c.l,
            series.len()
        );
        contract!(
            series.freq_minutes == self.freq_minutes,
            "series frequency differs from model"
        );
        let norm = self.normalizer_for(series, t)?;
        let hist_cov = (t - c.l..t)
            .map(|i| StepCov::at(series.timestamps[i], self.freq_minutes, c.p))
            .collect::<Vec<_>>();
        let spacing = i64::from(self.freq_minutes) * 60;
        let last = series.timestamps[t - 1];
        let future_cov = (1..=c.h as i64)
            .map(|k| StepCov::at(last + k * spacing, self.freq_minutes, c.p))
            .collect::<Vec<_>>();
        self.forecast(&series.values[t - c.l..t], &hist_cov, &future_cov, &norm)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::new(
            serde_json::json!({
                "kind": "dapm",
                "config": self.config,
                "d": self.d,
                "freq_minutes": self.freq_minutes,
                "normalizers": self.normalizers,
            }),
            self.params.to_entries(),
        ))
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.metadata;
        if meta.get("kind").and_then(|k| k.as_str()) != Some("dapm") {
            return Err(Error::Checkpoint("not a forecaster checkpoint".into()));
        }
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")))
        };
        let config: ForecastConfig = serde_json::from_value(field("config")?)?;
        let d: usize = serde_json::from_value(field("d")?)?;
        let freq: u32 = serde_json::from_value(field("freq_minutes")?)?;
        let mut model = DapmModel::new(config, d, freq, 0)?;
        model.normalizers = serde_json::from_value(field("normalizers")?)?;
        model.params.load_entries(ckpt)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Normalised, covariate-annotated view of one application's series.
struct Prepared<'a> {
    series: &'a WorkloadSeries,
    norm: Normalizer,
    z: Vec<Vec<f64>>,
    covs: Vec<StepCov>,
}

impl<'a> Prepared<'a> {
    fn new(series: &'a WorkloadSeries, norm: Normalizer, p: usize) -> Self {
        Prepared {
            z: series.values.iter().map(|x| norm.apply(x)).collect(),
            covs: series
                .timestamps
                .iter()
                .map(|ts| StepCov::at(*ts, series.freq_minutes, p))
                .collect(),
            series,
            norm,
        }
    }

    /// Window whose history starts at `start`.
    fn window(&self, start: usize, c: &ForecastConfig) -> Window {
        let mid = start + c.l;
        Window {
            history: self.z[start..mid].to_vec(),
            hist_cov: self.covs[start..mid].to_vec(),
            future_cov: self.covs[mid..mid + c.h].to_vec(),
            target: Some(self.z[mid..mid + c.h].to_vec()),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
}

/// Trains one model over sliding windows of every series, using only
/// steps before `train_end`. The last `val_fraction` of each series'
/// windows is held out for early stopping.
pub fn train_forecaster(
    series: &[&WorkloadSeries],
    train_end: usize,
    config: &ForecastConfig,
) -> Result<(DapmModel, TrainHistory)> {
    config.validate()?;
    contract!(!series.is_empty(), "no training series");
    let d = series[0].dims();
    let freq = series[0].freq_minutes;
    let mut prepared = Vec::with_capacity(series.len());
    for s in series {
        contract!(
            s.dims() == d,
            "series {} has {} dims, expected {}",
            s.app_id,
            s.dims(),
            d
        );
        contract!(
            s.freq_minutes == freq,
            "series {} has a different frequency",
            s.app_id
        );
        let end = train_end.min(s.len());
        contract!(end > 0, "series {} has no training data", s.app_id);
        prepared.push(Prepared::new(
            s,
            Normalizer::fit(&s.values[..end])?,
            config.p,
        ));
    }

    let span = config.l + config.h;
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (a, prep) in prepared.iter().enumerate() {
        let end = train_end.min(prep.series.len());
        let starts: Vec<usize> = (0..)
            .map(|k| k * config.stride)
            .take_while(|s| s + span <= end)
            .collect();
        contract!(
            !starts.is_empty(),
            "series {} is too short for one window of {} steps",
            prep.series.app_id,
            span
        );
        let n_val = if starts.len() >= 2 {
            ((starts.len() as f64 * config.val_fraction).ceil() as usize).min(starts.len() - 1)
        } else {
            0
        };
        let cut = starts.len() - n_val;
        train_idx.extend(starts[..cut].iter().map(|s| (a, *s)));
        val_idx.extend(starts[cut..].iter().map(|s| (a, *s)));
    }
    if val_idx.len() > config.val_windows && config.val_windows > 0 {
        let step = val_idx.len() as f64 / config.val_windows as f64;
        val_idx = (0..config.val_windows)
            .map(|k| val_idx[(k as f64 * step) as usize])
            .collect();
    }

    let mut model = DapmModel::new(config.clone(), d, freq, config.seed)?;
    for prep in &prepared {
        model
            .normalizers
            .insert(prep.series.app_id.clone(), prep.norm.clone());
    }
    let mut opt = Adam::new(
        AdamConfig {
            lr: config.lr,
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xDA9);
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, model.params.flat_values());
    let mut bad_epochs = 0;

    for epoch in 0..config.epochs {
        train_idx.shuffle(&mut rng);
        let take = if config.windows_per_epoch == 0 {
            train_idx.len()
        } else {
            config.windows_per_epoch.min(train_idx.len())
        };
        let (mut total, mut count) = (0.0, 0usize);
        for chunk in train_idx[..take].chunks(config.batch) {
            let windows: Vec<Window> = chunk
                .iter()
                .map(|(a, s)| prepared[*a].window(*s, config))
                .collect();
            let refs: Vec<&Window> = windows.iter().collect();
            let tape = Tape::new();
            let b = model.params.bind(&tape);
            let loss = model.batch_loss(&tape, &b, &refs)?;
            loss.backward()?;
            if !loss.item().is_finite() {
                return Err(Error::Domain(format!(
                    "forecaster loss diverged at epoch {epoch}"
                )));
            }
            total += loss.item() * chunk.len() as f64;
            count += chunk.len();
            model.params.accumulate_grads(&b);
            if config.clip > 0.0 {
                model.params.clip_grad_norm(config.clip);
            }
            opt.step(&mut model.params)?;
        }
        history.train_loss.push(total / count.max(1) as f64);

        let val = if val_idx.is_empty() {
            *history.train_loss.last().unwrap()
        } else {
            let (mut sq, mut cnt) = (0.0, 0usize);
            for chunk in val_idx.chunks(config.batch) {
                let windows: Vec<Window> = chunk
                    .iter()
                    .map(|(a, s)| prepared[*a].window(*s, config))
                    .collect();
                let refs: Vec<&Window> = windows.iter().collect();
                let tape = Tape::new();
                let b = model.params.bind_frozen(&tape);
                let l = model.batch_loss(&tape, &b, &refs)?.item();
                sq += l * l * chunk.len() as f64;
                cnt += chunk.len();
            }
            (sq / cnt as f64).sqrt()
        };
        history.val_loss.push(val);
        log::debug!(
            "forecaster epoch {epoch}: train {:.4} val {val:.4}",
            history.train_loss[epoch]
        );
        if val < best.0 {
            best = (val, model.params.flat_values());
            history.best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= config.patience.max(1) {
                break;
            }
        }
    }
    model.params.set_flat_values(&best.1)?;
    model.params.zero_grads();
    Ok((model, history))
}

/// Seasonal persistence: each target repeats the most recent observed
/// value at the same phase, `x[i - p·ceil((i - origin + 1) / p)]`.
pub fn seasonal_persistence(
    values: &[Vec<f64>],
    origin: usize,
    h: usize,
    p: usize,
) -> Result<Vec<Vec<f64>>> {
    contract!(
        p > 0 && origin >= p && origin <= values.len(),
        "need one period of history"
    );
    Ok((0..h)
        .map(|k| {
            let back = p * (k / p + 1);
            values[origin + k - back].clone()
        })
        .collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct AppForecastReport {
    pub app_id: String,
    pub dapm: Metrics,
    pub persistence: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct ForecastEvaluation {
    pub per_app: Vec<AppForecastReport>,
    pub pooled: Metrics,
    pub pooled_persistence: Metrics,
}

/// Scores forecasts whose targets fall entirely in `[test_start, len)`,
/// with origins every `stride` steps.
pub fn evaluate_forecaster(
    model: &DapmModel,
    series: &[&WorkloadSeries],
    test_start: usize,
    stride: usize,
) -> Result<ForecastEvaluation> {
    contract!(stride > 0, "stride must be positive");
    let c = &model.config;
    let (mut all_pred, mut all_pers, mut all_truth) = (Vec::new(), Vec::new(), Vec::new());
    let mut per_app = Vec::new();
    for s in series {
        let (mut pred, mut pers, mut truth) = (Vec::new(), Vec::new(), Vec::new());
        let mut origin = test_start.max(c.l).max(c.p);
        while origin + c.h <= s.len() {
            let f = model.forecast_at(s, origin)?;
            let sp = seasonal_persistence(&s.values, origin, c.h, c.p)?;
            for k in 0..c.h {
                pred.extend_from_slice(&f[k]);
                pers.extend_from_slice(&sp[k]);
                truth.extend_from_slice(&s.values[origin + k]);
            }
            origin += stride;
        }
        contract!(
            !truth.is_empty(),
            "series {} has no complete test window",
            s.app_id
        );
        per_app.push(AppForecastReport {
            app_id: s.app_id.clone(),
            dapm: forecast_metrics(&pred, &truth)?,
            persistence: forecast_metrics(&pers, &truth)?,
        });
        all_pred.extend(pred);
        all_pers.extend(pers);
        all_truth.extend(truth);
    }
    Ok(ForecastEvaluation {
        per_app,
        pooled: forecast_metrics(&all_pred, &all_truth)?,
        pooled_persistence: forecast_metrics(&all_pers, &all_truth)?,
    })
}
