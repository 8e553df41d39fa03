//! Fixtures shared by the criterion benchmarks under `benches/`.
//!
//! Everything is built from fixed seeds so timings compare across runs.

use metascale_core::forecaster::{DapmModel, ForecastConfig, Normalizer, StepCov, Window};
use metascale_core::meta::{AnpConfig, AnpModel, ObservationPair};
use metascale_core::workload::{generate_dataset, DataOptions, Dataset};

/// A week of three-app data at the default 10-minute resolution.
pub fn small_dataset() -> Dataset {
    let opts = DataOptions {
        train_apps: 2,
        heldout_apps: 1,
        weeks: 2,
        ..DataOptions::default()
    };
    generate_dataset(&opts, 0).expect("dataset")
}

/// The forecaster at desk-scale widths.
pub fn forecaster(d: usize) -> DapmModel {
    let cfg = ForecastConfig {
        l: 288,
        h: 48,
        p: 144,
        m: 16,
        heads: 2,
        hidden: 16,
        attn: 16,
        mlp: 32,
        ..ForecastConfig::default()
    };
    DapmModel::new(cfg, d, 10, 0).expect("forecaster")
}

/// Normalised training windows cut from the start of each trace.
pub fn windows(model: &DapmModel, data: &Dataset, n: usize) -> Vec<Window> {
    let c = &model.config;
    let freq = data.fleet.freq_minutes;
    (0..n)
        .map(|k| {
            let s = &data.traces[k % data.traces.len()].series;
            let norm = Normalizer::fit(&s.values).expect("normalizer");
            let rows = |a: usize, b: usize| {
                s.values[a..b]
                    .iter()
                    .map(|x| norm.apply(x))
                    .collect::<Vec<_>>()
            };
            let t0 = 7 * k;
            let cov = |i: usize| StepCov::at(s.timestamps[i], freq, c.p);
            Window {
                history: rows(t0, t0 + c.l),
                hist_cov: (t0..t0 + c.l).map(cov).collect(),
                future_cov: (t0 + c.l..t0 + c.l + c.h).map(cov).collect(),
                target: Some(rows(t0 + c.l, t0 + c.l + c.h)),
            }
        })
        .collect()
}

/// The meta-predictor at desk-scale widths.
pub fn meta_predictor(d: usize) -> AnpModel {
    let cfg = AnpConfig {
        repr: 32,
        latent: 8,
        hidden: 32,
        heads: 2,
        context_len: 144,
        target_len: 24,
        ..AnpConfig::default()
    };
    AnpModel::new(cfg, d, 0).expect("meta-predictor")
}

/// The first `n` observation pairs of an application's history.
pub fn observations(data: &Dataset, app: usize, n: usize) -> Vec<ObservationPair> {
    let t = &data.traces[app];
    (0..n)
        .map(|i| ObservationPair {
            cov: t.series.covariates[i],
            unit_workload: t.unit_workload(i),
            cpu: t.cpu[i],
        })
        .collect()
}
