//! `epss`: train, sample, analyze, prune and benchmark flow-matching step schedules.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use epss_core::diagnostics::PcaFit;
use epss_core::{CfgSpec, Error, Method};

use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "epss", version, about = "Step-schedule toolkit for flow-matching samplers")]
struct Cli {
    /// Worker threads for data-parallel work (0 = one per core). Defaults to
    /// 1 for `bench` and all cores elsewhere.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train an MLP velocity field with the conditional flow-matching loss.
    Train(TrainArgs),
    /// Integrate samples from noise with a step schedule.
    Sample(SampleArgs),
    /// PCA, per-dimension traces and curvature of recorded trajectories.
    Analyze(AnalyzeArgs),
    /// Search a dense reference schedule for a low-NFE subset.
    Prune(PruneArgs),
    /// Time sampling runs across schedules.
    Bench(BenchArgs),
    /// Inspect the built-in schedule presets.
    Schedules {
        #[command(subcommand)]
        action: SchedulesAction,
    },
}

/// Flags shared by commands that read a run configuration.
#[derive(Args, Debug, Default)]
struct Common {
    /// JSON config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `builtin:benchmark`, `builtin:toy`, a mixture JSON or a checkpoint.
    #[arg(long)]
    field: Option<String>,
    /// Preset name, `uniform:N`, inline list like `0,0.25,1`, or `@file`.
    #[arg(long)]
    schedule: Option<String>,
    /// Sway coefficient applied to presets and uniform grids.
    #[arg(long, allow_negative_numbers = true)]
    sway: Option<f64>,
    #[arg(long)]
    method: Option<Method>,
    /// Enable classifier-free guidance with this strength.
    #[arg(long)]
    cfg: Option<f64>,
    /// Condition label for the conditional branch.
    #[arg(long)]
    label: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Expected field dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Output directory (default: $EPSS_OUT_ROOT/<command> or epss-out/<command>).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, Error> {
        let mut c = RunConfig::load(self.config.as_deref())?;
        if let Some(v) = &self.field {
            c.field = v.clone();
        }
        if let Some(v) = &self.schedule {
            c.schedule = v.clone();
        }
        if let Some(v) = self.sway {
            c.sway = v;
        }
        if let Some(v) = self.method {
            c.method = v;
        }
        if let Some(w) = self.cfg {
            c.cfg = CfgSpec {
                enabled: true,
                strength: w,
                ..c.cfg
            };
        }
        if let Some(v) = self.label {
            c.label = Some(v);
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.batch {
            c.batch = v;
        }
        if let Some(v) = self.dim {
            c.dim = Some(v);
        }
        if let Some(v) = &self.out {
            c.out = Some(v.clone());
        }
        c.cfg.validate().map_err(|e| Error::config("cfg", e.to_string()))?;
        Ok(c)
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// `builtin:toy`, `builtin:benchmark`, a mixture JSON or a samples CSV.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    null_prob: Option<f64>,
    #[arg(long)]
    infill_prob: Option<f64>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    common: Common,
    /// Write every intermediate state, one file per sample.
    #[arg(long)]
    record: bool,
    #[arg(long, value_enum, default_value_t = commands::TrajFormat::Csv)]
    format: commands::TrajFormat,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Recorded trajectory files (CSV or JSON). The first one is the PCA reference.
    inputs: Vec<PathBuf>,
    /// Number of principal components.
    #[arg(long, default_value_t = 2)]
    pca: usize,
    /// Coordinates to export as per-dimension traces, e.g. `0,1`.
    #[arg(long, value_delimiter = ',')]
    dims: Vec<usize>,
    /// Fit the basis on the reference file only, or on all inputs.
    #[arg(long, value_enum, default_value_t = FitArg::Reference)]
    fit: FitArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum FitArg {
    Reference,
    Pooled,
}

impl From<FitArg> for PcaFit {
    fn from(f: FitArg) -> Self {
        match f {
            FitArg::Reference => PcaFit::Reference,
            FitArg::Pooled => PcaFit::Pooled,
        }
    }
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[command(flatten)]
    common: Common,
    /// Dense schedule to prune (same syntax as --schedule).
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    target_nfe: Option<usize>,
    /// Validation batch size.
    #[arg(long)]
    valset: Option<usize>,
    /// Enumerate every subset instead of pruning greedily.
    #[arg(long)]
    exhaustive: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated schedule specs (default: every preset).
    #[arg(long, value_delimiter = ',')]
    schedules: Vec<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Reference schedule for the endpoint_l2 column.
    #[arg(long)]
    reference: Option<String>,
}

#[derive(Subcommand, Debug)]
enum SchedulesAction {
    /// List presets with their index sets.
    List,
    /// Print the points of a schedule spec.
    Show {
        spec: String,
        #[arg(long, allow_negative_numbers = true, default_value_t = 0.0)]
        sway: f64,
    },
}

fn run(cli: Cli) -> Result<(), Error> {
    let default_threads = if matches!(cli.command, Command::Bench(_)) { 1 } else { 0 };
    epss_core::par::init_threads(cli.threads.unwrap_or(default_threads))?;
    match cli.command {
        Command::Train(a) => {
            let mut c = a.common.resolve()?;
            if let Some(v) = a.data {
                c.data = Some(v);
            }
            let t = &mut c.train;
            a.steps.inspect(|&v| t.steps = v);
            a.batch_size.inspect(|&v| t.batch_size = v);
            a.lr.inspect(|&v| t.learning_rate = v);
            a.hidden.inspect(|&v| t.hidden = v);
            a.null_prob.inspect(|&v| t.null_prob = v);
            a.infill_prob.inspect(|&v| t.infill_prob = v);
            t.seed = c.seed;
            commands::train(&c)
        }
        Command::Sample(a) => commands::sample(&a.common.resolve()?, a.record, a.format),
        Command::Analyze(a) => commands::analyze(&a.inputs, a.pca, &a.dims, a.fit.into(), a.out),
        Command::Prune(a) => {
            let mut c = a.common.resolve()?;
            a.reference.inspect(|v| c.prune.reference = v.clone());
            a.target_nfe.inspect(|&v| c.prune.target_nfe = v);
            a.valset.inspect(|&v| c.prune.valset = v);
            c.prune.exhaustive |= a.exhaustive;
            commands::prune(&c)
        }
        Command::Bench(a) => {
            let mut c = a.common.resolve()?;
            if !a.schedules.is_empty() {
                c.bench.schedules = a.schedules;
            }
            a.repeats.inspect(|&v| c.bench.repeats = v);
            a.warmup.inspect(|&v| c.bench.warmup = v);
            if a.reference.is_some() {
                c.bench.reference = a.reference;
            }
            commands::bench(&c)
        }
        Command::Schedules { action } => match action {
            SchedulesAction::List => commands::schedules_list(),
            SchedulesAction::Show { spec, sway } => commands::schedules_show(&spec, sway),
        },
    }
}

/// 0 success, 2 configuration or usage error, 3 numerical failure, 1 I/O.
fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if matches!(e, Error::Io(_)) {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
