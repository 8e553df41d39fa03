#![allow(dead_code)]

pub mod gradients;

use std::path::Path;

use metascale_core::forecaster::ForecastConfig;
use metascale_core::harness::PipelineConfig;
use metascale_core::meta::AnpConfig;
use metascale_core::scaler::PolicyConfig;
use metascale_core::workload::{DataOptions, FleetOptions};

/// A complete pipeline small enough to run in a few seconds: three hourly
/// applications over two weeks, with 4-hour decision epochs.
pub fn tiny_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        out_dir: out.to_path_buf(),
        seed: 3,
        ..PipelineConfig::default()
    };
    cfg.data = DataOptions {
        train_apps: 2,
        heldout_apps: 1,
        weeks: 2,
        freq_minutes: 60,
        epoch_steps: 4,
        fleet: FleetOptions {
            d: 2,
            ..FleetOptions::default()
        },
        ..DataOptions::default()
    };
    cfg.forecaster = ForecastConfig {
        l: 48,
        h: 8,
        p: 24,
        m: 4,
        heads: 1,
        hidden: 6,
        attn: 6,
        mlp: 8,
        cov_dim: 2,
        epochs: 2,
        windows_per_epoch: 32,
        val_windows: 16,
        ..ForecastConfig::default()
    };
    cfg.meta = AnpConfig {
        repr: 6,
        latent: 2,
        hidden: 6,
        heads: 1,
        context_len: 24,
        target_len: 4,
        iterations: 30,
        eval_every: 10,
        val_tasks: 4,
        ..AnpConfig::default()
    };
    cfg.policy = PolicyConfig {
        hidden: 6,
        iterations: 10,
        batch: 8,
        ..PolicyConfig::default()
    };
    cfg.starts.contexts = 6;
    cfg.starts.states_per_context = 2;
    cfg.eval.seeds = vec![0, 1];
    cfg
}
