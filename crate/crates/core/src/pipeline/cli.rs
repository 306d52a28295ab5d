//! Command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::autobit::{ErrorMode, Solver};
use crate::error::{Error, Result};
use crate::jointq::JointqOptions;
use crate::layerwise::{LpcdOptions, Method, QepOptions};
use crate::model::{Linear, ToyConfig, ToyModel, WeightRepr};
use crate::preprocess::{BalanceNorm, InputTransform, RotationKind};
use crate::quant::{Granularity, ScaleMode, Scheme};

use super::config::{self, PipelineConfig};
use super::refiners::{RefinerSpec, StageRecord};
use super::sweep::LayerSpec;
use super::{eval, ocw, preprocess, refiners, resolve_precision, run_layerwise_sweep, stage_table, RefineContext};

#[derive(Debug, Parser)]
#[command(name = "quantkit", version, about = "Post-training weight quantization for a toy transformer")]
struct Cli {
    /// Run seed; overrides the environment and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output on stderr.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Lists the tensors of a container.
    Inspect { file: PathBuf },
    /// Writes the sampled calibration and evaluation sets as JSON.
    Calib {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solves a mixed-precision plan under a bits-per-weight budget.
    Plan {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        bpw: f64,
        #[arg(long, value_enum, default_value = "act-aware")]
        mode: ModeArg,
        #[arg(long, value_enum, default_value = "dp")]
        solver: SolverArg,
        #[arg(long, visible_alias = "emit")]
        out: PathBuf,
    },
    /// Attaches the configured input transforms.
    Preprocess {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        transform: TransformArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Preprocesses and runs the layer sweep, writing the pivot model.
    Quantize {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        transform: TransformArgs,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Applies the configured refiners to a pivot model.
    Refine {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pivot: PathBuf,
        /// Runs joint scale/code refinement instead of the configured chain.
        #[arg(long)]
        jointq: bool,
        #[arg(long, requires = "jointq")]
        lambda: Option<f64>,
        #[arg(long, requires = "jointq")]
        passes: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compares a student container against its teacher on held-out data.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        student: PathBuf,
        /// Defaults to the configured model.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Also writes a `stage  metric  value` table.
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Writes the bundled toy model, or a dense copy of a container.
    Export {
        #[arg(long)]
        from: Option<PathBuf>,
        #[arg(long)]
        dense: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs every configured stage.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        transform: TransformArgs,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum ModeArg {
    Naive,
    #[value(alias = "act")]
    ActAware,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum RotationArg {
    None,
    Random,
    Hadamard,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum BalanceArg {
    None,
    L1,
    L2,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum MethodArg {
    Rtn,
    Gptq,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum FormatArg {
    Uniform,
    Dbf,
    Mdbf,
    Passthrough,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum SchemeArg {
    Symmetric,
    Asymmetric,
}

/// Input-transform overrides.
#[derive(Debug, Default, clap::Args)]
struct TransformArgs {
    #[arg(long)]
    smooth_alpha: Option<f64>,
    #[arg(long, value_enum)]
    rotation: Option<RotationArg>,
    #[arg(long, value_enum)]
    balance: Option<BalanceArg>,
}

impl TransformArgs {
    fn apply(&self, cfg: &mut PipelineConfig) {
        if let Some(a) = self.smooth_alpha {
            cfg.preprocess.smooth_alpha = Some(a);
        }
        if let Some(r) = self.rotation {
            cfg.preprocess.rotation = match r {
                RotationArg::None => RotationKind::Identity,
                RotationArg::Random => RotationKind::RandomOrthogonal,
                RotationArg::Hadamard => RotationKind::Hadamard,
            };
        }
        if let Some(b) = self.balance {
            cfg.preprocess.balance = match b {
                BalanceArg::None => None,
                BalanceArg::L1 => Some(BalanceNorm::L1),
                BalanceArg::L2 => Some(BalanceNorm::L2),
            };
        }
    }
}

fn parse_group(s: &str) -> std::result::Result<Granularity, String> {
    match s {
        "tensor" => Ok(Granularity::PerTensor),
        "channel" | "0" => Ok(Granularity::PerChannel),
        n => n.parse().map(Granularity::PerGroup).map_err(|_| format!("expected `tensor`, `channel` or a group size, got `{n}`")),
    }
}

/// Layer-sweep overrides; format flags replace the default layer spec.
#[derive(Debug, Default, clap::Args)]
struct QuantArgs {
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    bits: Option<u8>,
    /// `tensor`, `channel` (or 0) or a group size.
    #[arg(long, value_parser = parse_group)]
    group_size: Option<Granularity>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long)]
    actorder: bool,
    #[arg(long)]
    mse_grid: bool,
    #[arg(long)]
    qep_alpha: Option<f64>,
    #[arg(long)]
    lpcd_iters: Option<usize>,
    /// Binary-factor budget for `--format dbf|mdbf`.
    #[arg(long)]
    bpw: Option<f64>,
    #[arg(long)]
    envelope_rank: Option<usize>,
    /// Precision plan to apply instead of the configured formats.
    #[arg(long)]
    plan: Option<PathBuf>,
}

impl QuantArgs {
    fn apply(&self, cfg: &mut PipelineConfig) -> Result<()> {
        if let Some(m) = self.method {
            cfg.sweep.method = match m {
                MethodArg::Rtn => Method::Rtn,
                MethodArg::Gptq => Method::Gptq,
            };
        }
        cfg.sweep.gptq.actorder |= self.actorder;
        if self.mse_grid {
            cfg.sweep.gptq.scale_mode = ScaleMode::MseGrid;
        }
        if let Some(alpha) = self.qep_alpha {
            cfg.sweep.qep = Some(QepOptions { alpha, ..cfg.sweep.qep.unwrap_or_default() });
        }
        if let Some(iters) = self.lpcd_iters {
            cfg.sweep.lpcd = Some(LpcdOptions { iters, ..cfg.sweep.lpcd.unwrap_or_default() });
        }
        let uniform_flags = self.bits.is_some() || self.group_size.is_some() || self.scheme.is_some();
        let binary_flags = self.bpw.is_some() || self.envelope_rank.is_some();
        let format = match self.format {
            Some(f) => Some(f),
            None if uniform_flags => Some(FormatArg::Uniform),
            None if binary_flags => match cfg.precision.default {
                LayerSpec::Dbf { .. } => Some(FormatArg::Dbf),
                LayerSpec::Mdbf { .. } => Some(FormatArg::Mdbf),
                _ => return Err(Error::Config("--bpw and --envelope-rank need --format dbf or mdbf".into())),
            },
            None => None,
        };
        if let Some(f) = format {
            let cur = cfg.precision.default;
            cfg.precision.default = match f {
                FormatArg::Passthrough => LayerSpec::Passthrough,
                FormatArg::Uniform => {
                    let (b0, s0, g0) = match cur {
                        LayerSpec::Uniform { bits, scheme, granularity } => (bits, scheme, granularity),
                        _ => match LayerSpec::default() {
                            LayerSpec::Uniform { bits, scheme, granularity } => (bits, scheme, granularity),
                            _ => unreachable!(),
                        },
                    };
                    let scheme = match self.scheme {
                        Some(SchemeArg::Symmetric) => Scheme::Symmetric,
                        Some(SchemeArg::Asymmetric) => Scheme::Asymmetric,
                        None => s0,
                    };
                    LayerSpec::Uniform { bits: self.bits.unwrap_or(b0), scheme, granularity: self.group_size.unwrap_or(g0) }
                }
                FormatArg::Dbf | FormatArg::Mdbf => {
                    let (bpw0, ell0) = match cur {
                        LayerSpec::Dbf { bpw } => (Some(bpw), 2),
                        LayerSpec::Mdbf { bpw, ell } => (Some(bpw), ell),
                        _ => (None, 2),
                    };
                    let bpw = self
                        .bpw
                        .or(bpw0)
                        .ok_or_else(|| Error::Config("binary-factor formats need --bpw".into()))?;
                    match f {
                        FormatArg::Dbf => LayerSpec::Dbf { bpw },
                        _ => LayerSpec::Mdbf { bpw, ell: self.envelope_rank.unwrap_or(ell0) },
                    }
                }
            };
        }
        if let Some(p) = &self.plan {
            cfg.plan = Some(p.clone());
            cfg.autobit = None;
        }
        cfg.validate()
    }
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum SolverArg {
    Exhaustive,
    Dp,
    BranchBound,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::UnknownLayer(_) | Error::Infeasible { .. } | Error::InsufficientTokens { .. } => {
            EXIT_CONFIG
        }
        Error::Io(_) | Error::Format(_) | Error::Json(_) => EXIT_IO,
        Error::Numerical(_) | Error::NoConvergence { .. } => EXIT_NUMERIC,
        Error::Shape(_) => EXIT_OTHER,
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(fs::write(path, s)?)
}

fn dense_copy(model: &ToyModel) -> Result<ToyModel> {
    let mut out = model.clone();
    for info in model.layer_graph().layers {
        let w = model.linear(&info.id)?.weight().clone();
        out.set_linear(&info.id, Linear::new(WeightRepr::Full(w), InputTransform::identity(), None)?)?;
    }
    Ok(out)
}

fn execute(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Inspect { file } => {
            let bytes = fs::read(&file)?;
            let model = ocw::from_bytes(&bytes)?;
            let (header, payload) = ocw::parse(&bytes)?;
            let graph = model.layer_graph();
            writeln!(stdout, "config\t{}", serde_json::to_string(&header.config)?)?;
            writeln!(stdout, "params\t{}", model.num_params())?;
            writeln!(stdout, "fp16_bytes\t{}", 2 * model.num_params())?;
            writeln!(stdout, "payload_bytes\t{}", payload.len())?;
            writeln!(stdout, "modules\t{}", graph.len())?;
            for info in &graph.layers {
                let lin = model.linear(&info.id)?;
                let kind = match lin.repr() {
                    WeightRepr::Full(_) => "f32",
                    WeightRepr::Uniform(_) => "uniform-quant",
                    WeightRepr::Binary(_) => "binary",
                };
                writeln!(stdout, "{}\t{}x{}\t{}\t{}", info.id, info.shape.0, info.shape.1, info.params(), kind)?;
            }
        }
        Command::Export { from, dense, out } => {
            let model = match from {
                Some(p) => ocw::load(&p)?,
                None => ToyModel::random(ToyConfig::default(), config::model_seed(&Default::default(), seed_of(&cli.seed, None)?))?,
            };
            let model = if dense { dense_copy(&model)? } else { model };
            ocw::save(&model, &out)?;
        }
        Command::Calib { config, out } => {
            let cfg = load_config(&config)?;
            let seed = cfg.resolve_seed(cli.seed)?;
            let teacher = super::load_teacher(&cfg, seed)?;
            let (calib, eval) = config::build_data(&cfg.calib, teacher.config().vocab, seed)?;
            write_json(&out, &serde_json::json!({ "calib": calib, "eval": eval }))?;
        }
        Command::Plan { config, bpw, mode, solver, out } => {
            let cfg = load_config(&config)?;
            let seed = cfg.resolve_seed(cli.seed)?;
            let teacher = super::load_teacher(&cfg, seed)?;
            let (calib, _) = config::build_data(&cfg.calib, teacher.config().vocab, seed)?;
            let mode = match mode {
                ModeArg::Naive => ErrorMode::Naive,
                ModeArg::ActAware => ErrorMode::ActAware,
            };
            let solver = match solver {
                SolverArg::Exhaustive => Solver::Exhaustive,
                SolverArg::Dp => Solver::Dp,
                SolverArg::BranchBound => Solver::BranchBound,
            };
            let plan = super::plan_for_model(&teacher, &calib, bpw, mode, solver)?;
            writeln!(stdout, "budget\t{}\ncost\t{}\nbpw\t{:.4}", plan.budget, plan.total_cost, plan.achieved_bpw)?;
            fs::write(&out, plan.to_json()? + "\n")?;
        }
        Command::Preprocess { config, transform, out } => {
            let mut cfg = load_config(&config)?;
            transform.apply(&mut cfg);
            let seed = cfg.resolve_seed(cli.seed)?;
            let teacher = super::load_teacher(&cfg, seed)?;
            let (calib, _) = config::build_data(&cfg.calib, teacher.config().vocab, seed)?;
            ocw::save(&preprocess(&cfg, &teacher, &calib, seed)?, &out)?;
        }
        Command::Quantize { config, transform, quant, out } => {
            let mut cfg = load_config(&config)?;
            transform.apply(&mut cfg);
            quant.apply(&mut cfg)?;
            let seed = cfg.resolve_seed(cli.seed)?;
            let teacher = super::load_teacher(&cfg, seed)?;
            let (calib, _) = config::build_data(&cfg.calib, teacher.config().vocab, seed)?;
            let prepped = preprocess(&cfg, &teacher, &calib, seed)?;
            let (precision, _) = resolve_precision(&cfg, &teacher, &calib)?;
            let (pivot, report) = run_layerwise_sweep(&prepped, &calib, &precision, &cfg.sweep)?;
            for l in &report.layers {
                writeln!(stdout, "{}\t{:.6e}", l.layer, l.relative)?;
            }
            ocw::save(&pivot, &out)?;
        }
        Command::Refine { config, pivot, jointq, lambda, passes, out } => {
            let mut cfg = load_config(&config)?;
            if jointq {
                let d = JointqOptions::default();
                let opts = JointqOptions { lambda: lambda.unwrap_or(d.lambda), max_passes: passes.unwrap_or(d.max_passes), ..d };
                opts.validate()?;
                cfg.refiners = vec![RefinerSpec::Jointq(opts)];
            }
            let seed = cfg.resolve_seed(cli.seed)?;
            let teacher = super::load_teacher(&cfg, seed)?;
            let (calib, eval) = config::build_data(&cfg.calib, teacher.config().vocab, seed)?;
            let prepped = preprocess(&cfg, &teacher, &calib, seed)?;
            let pivot = ocw::load(&pivot)?;
            let ctx = RefineContext { teacher: &prepped, calib: &calib, eval: &eval, sweep: &cfg.sweep };
            let (refined, stages) = refiners::run_refiners(&pivot, &cfg.refiners, &ctx)?;
            write!(stdout, "{}", stage_table(&stages))?;
            ocw::save(&refined, &out)?;
        }
        Command::Eval { config, student, teacher, table } => {
            let cfg = load_config(&config)?;
            let seed = cfg.resolve_seed(cli.seed)?;
            let teacher = match teacher {
                Some(p) => ocw::load(&p)?,
                None => super::load_teacher(&cfg, seed)?,
            };
            let student = ocw::load(&student)?;
            let (_, eval) = config::build_data(&cfg.calib, teacher.config().vocab, seed)?;
            let r = eval::evaluate(&teacher, &student, &eval)?;
            writeln!(stdout, "{}", serde_json::to_string_pretty(&r)?)?;
            if let Some(p) = table {
                fs::write(&p, stage_table(&[StageRecord { stage: "eval".into(), fidelity: r, layers: Vec::new() }]))?;
            }
        }
        Command::Run { config, transform, quant, out, report } => {
            let mut cfg = load_config(&config)?;
            transform.apply(&mut cfg);
            quant.apply(&mut cfg)?;
            let seed = cfg.resolve_seed(cli.seed)?;
            let res = super::run(&cfg, seed)?;
            write!(stdout, "{}", stage_table(&res.stages))?;
            if let Some(p) = out.or(cfg.output.clone()) {
                ocw::save(&res.refined, &p)?;
            }
            if let Some(p) = report.or(cfg.report.clone()) {
                write_json(&p, &res.report()?)?;
            }
        }
    }
    Ok(())
}

fn seed_of(explicit: &Option<u64>, cfg: Option<&PipelineConfig>) -> Result<u64> {
    cfg.cloned().unwrap_or_default().resolve_seed(*explicit)
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    cli_with_output(argv, &mut std::io::stdout())
}

pub fn cli_with_output<I, S>(argv: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match parsed.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::from_default_env().filter_level(level).target(env_logger::Target::Stderr).try_init();
    match execute(parsed, stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Infeasible { budget: 1, min_cost: 2 }), 2);
        assert_eq!(exit_code(&Error::Format("x".into())), 3);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 4);
        let mut sink = Vec::new();
        assert_eq!(cli_with_output(["quantkit", "frobnicate"], &mut sink), 2);
        assert_eq!(cli_with_output(["quantkit", "inspect", "/nonexistent/x.ocw"], &mut sink), 3);
    }
}
