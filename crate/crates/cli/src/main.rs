//! `metascale`: drive the predictive autoscaling pipeline from the shell.
//!
//! Every subcommand works inside one output directory (`--out`, or
//! `out_dir` in the config file) and reads what earlier stages left there.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use metascale_core::harness::{
    self, load_models, rcs_from_rows, read_report, report_emit, Method, PipelineConfig,
    ReportFormat, RunModels,
};
use metascale_core::scaler::{read_traces_csv, write_traces_csv};
use metascale_core::Error;

#[derive(Parser)]
#[command(
    name = "metascale",
    version,
    about = "Meta-learning predictive autoscaler on a synthetic fleet"
)]
struct Cli {
    /// TOML configuration; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Fleet seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Evaluation seeds, comma separated (overrides `eval.seeds`).
    #[arg(long, global = true, value_delimiter = ',')]
    eval_seeds: Option<Vec<u64>>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate the synthetic fleet and its legacy-operator history.
    GenData,
    /// Train the workload forecaster.
    TrainForecaster,
    /// Train the CPU meta-predictor on the training applications.
    TrainMeta,
    /// Train the scaling policy against the frozen models.
    TrainPolicy,
    /// Run one controller over the test week and write its traces.
    Simulate {
        #[arg(long, default_value = "learned")]
        method: String,
        /// Evaluation seed.
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        /// Trace CSV path (default: the run's traces directory).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Evaluate all controllers and write report.json and traces.
    Evaluate,
    /// Render a saved report.
    Report {
        #[arg(long, default_value = "markdown")]
        format: String,
        /// Report to read (default: the run's report.json).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Write here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Recount RCS per application from a trace CSV.
    Rcs { trace: PathBuf },
    /// Run every stage end to end.
    Pipeline {
        #[arg(long)]
        skip_data: bool,
        #[arg(long)]
        skip_forecaster: bool,
        #[arg(long)]
        skip_meta: bool,
        #[arg(long)]
        skip_policy: bool,
    },
}

fn config(cli: &Cli) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(seeds) = &cli.eval_seeds {
        cfg.eval.seeds = seeds.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(
    text_or_path: Option<&PathBuf>,
    render: impl FnOnce(&mut dyn Write) -> metascale_core::Result<()>,
) -> anyhow::Result<()> {
    match text_or_path {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            let mut f = std::io::BufWriter::new(
                fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
            );
            render(&mut f)?;
            f.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            render(&mut lock)?;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = config(&cli)?;
    let paths = cfg.paths();
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml_string()?),
        Command::GenData => {
            harness::stage_data(&cfg)?;
        }
        Command::TrainForecaster => {
            cfg.stages.skip_data = true;
            let data = harness::stage_data(&cfg)?;
            harness::stage_forecaster(&cfg, &data)?;
        }
        Command::TrainMeta => {
            cfg.stages.skip_data = true;
            let data = harness::stage_data(&cfg)?;
            harness::stage_meta(&cfg, &data)?;
        }
        Command::TrainPolicy => {
            cfg.stages = harness::StageFlags {
                skip_data: true,
                skip_forecaster: true,
                skip_meta: true,
                skip_policy: false,
            };
            let data = harness::stage_data(&cfg)?;
            let f = harness::stage_forecaster(&cfg, &data)?;
            let a = harness::stage_meta(&cfg, &data)?;
            harness::stage_policy(&cfg, &data, &f, &a)?;
        }
        Command::Simulate {
            method,
            eval_seed,
            output,
        } => {
            let method: Method = method.parse()?;
            cfg.stages.skip_data = true;
            let data = harness::stage_data(&cfg)?;
            let (f, a, p) = load_models(&paths).map_err(|e| e.in_stage("simulate"))?;
            let models = RunModels {
                forecaster: &f,
                anp: &a,
                policy: &p,
            };
            let traces = harness::simulate(&cfg, &data, models, method, eval_seed)
                .map_err(|e| e.in_stage("simulate"))?;
            let out = output.unwrap_or_else(|| paths.traces(method, eval_seed));
            emit(Some(&out), |w| write_traces_csv(&traces, w))?;
            for t in &traces {
                let r = harness::trace_rcs(t, cfg.reward.c_target, cfg.eval.band)?;
                println!(
                    "{}\t{method}\tRCS {r:.3}\tVM-steps {}",
                    t.app_id,
                    t.vm_steps()
                );
            }
        }
        Command::Evaluate => {
            cfg.stages.skip_data = true;
            let data = harness::stage_data(&cfg)?;
            let (f, a, p) = load_models(&paths).map_err(|e| e.in_stage(harness::STAGE_EVALUATE))?;
            let models = RunModels {
                forecaster: &f,
                anp: &a,
                policy: &p,
            };
            let (report, traces) = harness::evaluate(&cfg, &data, models)?;
            harness::write_trace_set(&paths, &cfg.eval.seeds, &traces)?;
            emit(Some(&paths.report()), |w| {
                report_emit(&report, ReportFormat::Json, w)
            })?;
            emit(None, |w| report_emit(&report, ReportFormat::Markdown, w))?;
        }
        Command::Report {
            format,
            input,
            output,
        } => {
            let format: ReportFormat = format.parse()?;
            let input = input.unwrap_or_else(|| paths.report());
            let file = fs::File::open(&input).map_err(|e| Error::Io {
                path: input.clone(),
                source: e,
            })?;
            let report = read_report(std::io::BufReader::new(file))?;
            emit(output.as_ref(), |w| report_emit(&report, format, w))?;
        }
        Command::Rcs { trace } => {
            let file =
                fs::File::open(&trace).with_context(|| format!("opening {}", trace.display()))?;
            let rows = read_traces_csv(file)?;
            let by_app = rcs_from_rows(
                &rows,
                cfg.data.epoch_steps,
                cfg.reward.c_target,
                cfg.eval.band,
            )?;
            for (app, r) in by_app {
                println!("{app}\t{r:.6}");
            }
        }
        Command::Pipeline {
            skip_data,
            skip_forecaster,
            skip_meta,
            skip_policy,
        } => {
            cfg.stages = harness::StageFlags {
                skip_data,
                skip_forecaster,
                skip_meta,
                skip_policy,
            };
            let report = harness::run_pipeline(&cfg)?;
            emit(None, |w| report_emit(&report, ReportFormat::Markdown, w))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp_secs()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // core errors already carry their cause in the message
            if e.downcast_ref::<Error>().is_some() {
                eprintln!("error: {e}");
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::FAILURE
        }
    }
}
