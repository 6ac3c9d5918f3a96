//! `lmv`: batch runs of the locational marginal value pipeline.
//!
//! Logs go to standard error; all data goes to files.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lmv_core::error::{FormatError, PipelineError};
use lmv_core::io::{
    load_inputs, read_irradiance, read_results, write_pv, write_results, write_run_report, InputPaths, ResultBundle,
    RunReportFile, StepSeconds, LMV_CSV, MANIFEST_JSON,
};
use lmv_core::pipeline::{lmv_surface, run_step, run_year, RunInputs, RunSettings, Step, StepTiming};
use lmv_core::synthetic;
use lmv_core::valuation::{project_actual_der, PipelineOptions};

const EXIT_OK: u8 = 0;
const EXIT_PARSE: u8 = 2;
const EXIT_VALIDATION: u8 = 3;
const EXIT_FLAGGED: u8 = 4;
const EXIT_SOLVER: u8 = 5;

#[derive(Parser)]
#[command(name = "lmv", version, about = "Locational marginal values of DER for distribution wires deferral")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load and cross-check the inputs; exit 0 iff clean.
    Validate(InputArgs),
    /// Run the pipeline, or one step of it with --only.
    Run(RunArgs),
    /// Value a smart-inverter PV unit at the LMVs of an earlier run.
    PvValue(PvArgs),
    /// Write a bundled synthetic case as input files.
    Synth(SynthArgs),
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    feeder: PathBuf,
    #[arg(long)]
    loads: PathBuf,
    #[arg(long)]
    prices: PathBuf,
    #[arg(long)]
    investment: Option<PathBuf>,
    /// Per-node DER limits; nodes not listed may not procure.
    #[arg(long)]
    bounds: Option<PathBuf>,
}

impl InputArgs {
    fn paths(&self) -> InputPaths {
        InputPaths {
            feeder: self.feeder.clone(),
            loads: self.loads.clone(),
            prices: self.prices.clone(),
            investment: self.investment.clone(),
            bounds: self.bounds.clone(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OnlyStep {
    Preprocess,
    Price,
    Procure,
}

impl From<OnlyStep> for Step {
    fn from(s: OnlyStep) -> Step {
        match s {
            OnlyStep::Preprocess => Step::Preprocess,
            OnlyStep::Price => Step::Price,
            OnlyStep::Procure => Step::Procure,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    inputs: InputArgs,
    /// Result directory.
    #[arg(long)]
    out: PathBuf,
    /// Annualization factor, replacing the investment file's.
    #[arg(long)]
    alpha: Option<f64>,
    /// Reactive price as a share of the LMP, where prices.csv gives none.
    #[arg(long, default_value_t = 0.05)]
    q_fraction: f64,
    /// Solver tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Worker threads [default: available parallelism].
    #[arg(long)]
    threads: Option<usize>,
    /// Hours to run, e.g. `1-24,100,200-300`.
    #[arg(long)]
    hours: Option<String>,
    /// Run a single step against the bundle already in --out.
    #[arg(long, value_enum)]
    only: Option<OnlyStep>,
    #[arg(long)]
    skip_procurement: bool,
    /// Write every solved program as text [default dir: <out>/programs].
    #[arg(long, value_name = "DIR")]
    export_programs: Option<Option<PathBuf>>,
    /// Abort on the first hour whose relaxation is not exact.
    #[arg(long)]
    fail_on_inexact: bool,
    /// Procure a bounds-infeasible hour again without bounds.
    #[arg(long)]
    retry_unbounded: bool,
}

#[derive(Args)]
struct PvArgs {
    /// Result directory of a run that priced.
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    node: usize,
    /// Inverter rating.
    #[arg(long)]
    k_kw: f64,
    /// CSV with columns hour,rho.
    #[arg(long)]
    irradiance: PathBuf,
    /// Output directory [default: --results].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    /// One of the bundled case names.
    #[arg(long)]
    case: String,
    /// Year length for eighty-eight-node.
    #[arg(long, default_value_t = 8760)]
    hours: usize,
    #[arg(long)]
    out: PathBuf,
}

/// An exit code and what to tell the user.
#[derive(Debug)]
struct Failure(u8, String);

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        let code = if e.is_validation() { EXIT_VALIDATION } else { EXIT_PARSE };
        Failure(code, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let code = match &e {
            PipelineError::Format(f) if f.is_validation() => EXIT_VALIDATION,
            PipelineError::Format(_) => EXIT_PARSE,
            e if e.is_solver_failure() => EXIT_SOLVER,
            PipelineError::Build { .. } => EXIT_SOLVER,
            _ => EXIT_VALIDATION,
        };
        Failure(code, e.to_string())
    }
}

fn parse_hours(spec: &str) -> Result<BTreeSet<usize>, Failure> {
    let bad = |part: &str| Failure(EXIT_PARSE, format!("--hours: cannot read `{part}`"));
    let mut out = BTreeSet::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: usize = a.trim().parse().map_err(|_| bad(part))?;
                let b: usize = b.trim().parse().map_err(|_| bad(part))?;
                if a > b {
                    return Err(bad(part));
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(part.parse().map_err(|_| bad(part))?);
            }
        }
    }
    Ok(out)
}

fn validate(args: &InputArgs) -> Result<u8, Failure> {
    let loaded = load_inputs(&args.paths())?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    let set = &loaded.inputs;
    println!(
        "ok: feeder {} ({} nodes, {} lines), {} hours, {} load rows, investment {}, bounds {}",
        set.feeder.name,
        set.feeder.nodes.len(),
        set.feeder.lines.len(),
        set.hours().len(),
        set.loads.len(),
        if set.investment.is_some() { "yes" } else { "no" },
        if set.bounds.is_some() { "yes" } else { "no" },
    );
    Ok(EXIT_OK)
}

fn run(args: &RunArgs) -> Result<u8, Failure> {
    let loaded = load_inputs(&args.inputs.paths())?;
    for w in &loaded.warnings {
        log::warn!("{w}");
    }
    if let (Some(alpha), Some(project)) = (args.alpha, &loaded.inputs.investment) {
        log::info!("annualization factor {alpha} overrides {} from the investment file", project.alpha);
    }
    let hours = args.hours.as_deref().map(parse_hours).transpose()?;
    let inputs = RunInputs::from_set(&loaded.inputs, args.q_fraction, hours.as_ref(), args.alpha)?;
    if inputs.scenarios.is_empty() {
        return Err(Failure(EXIT_VALIDATION, "no hours selected".into()));
    }
    let mut options = PipelineOptions::default();
    options.solve.tol = args.tol;
    options.fail_on_inexact = args.fail_on_inexact;
    options.retry_unbounded = args.retry_unbounded;
    let settings = RunSettings {
        options,
        skip_procurement: args.skip_procurement,
        export_programs: args.export_programs.clone().map(|d| d.unwrap_or_else(|| args.out.join("programs"))),
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
        .map_err(|e| Failure(EXIT_VALIDATION, format!("--threads: {e}")))?;
    let threads = pool.current_num_threads();
    log::info!("{} hours on {threads} threads", inputs.scenarios.len());

    let (bundle, timings) = pool.install(|| -> Result<(ResultBundle, Vec<StepTiming>), Failure> {
        match args.only {
            None => {
                let report = run_year(&inputs, &settings)?;
                Ok((report.bundle, report.timings))
            }
            Some(only) => {
                let step = Step::from(only);
                let mut bundle = if args.out.join(MANIFEST_JSON).exists() {
                    read_results(&args.out)?
                } else {
                    ResultBundle::default()
                };
                let t = Instant::now();
                run_step(step, &inputs, &settings, &mut bundle)?;
                Ok((bundle, vec![StepTiming { step: step.name(), seconds: t.elapsed().as_secs_f64() }]))
            }
        }
    })?;
    for t in &timings {
        log::info!("{}: {:.2} s", t.step, t.seconds);
    }

    write_results(&bundle, &args.out)?;
    let summary = &bundle.summary;
    for f in &summary.flags {
        log::warn!("hour {} ({}): {}: {}", f.hour, f.step, f.kind, f.detail);
    }
    for n in &summary.notes {
        log::info!("{n}");
    }
    let code = if summary.flagged_hours.is_empty() { EXIT_OK } else { EXIT_FLAGGED };
    write_run_report(
        &args.out,
        &RunReportFile {
            threads,
            steps: timings.iter().map(|t| StepSeconds { step: t.step.into(), seconds: t.seconds }).collect(),
            flagged_hours: summary.flagged_hours.len(),
            exit_code: code,
        },
    )?;
    log::info!(
        "{} overloaded hours, {} priced, {} procured; reported cost ${:.2}",
        summary.overloaded_hours,
        summary.priced_hours,
        summary.procured_hours,
        summary.reported_cost_usd
    );
    Ok(code)
}

fn pv_value(args: &PvArgs) -> Result<u8, Failure> {
    if !args.results.join(LMV_CSV).exists() {
        return Err(Failure(EXIT_VALIDATION, format!("{}: no LMV table", args.results.display())));
    }
    let bundle = read_results(&args.results)?;
    let surface = lmv_surface(&bundle)
        .ok_or_else(|| Failure(EXIT_VALIDATION, format!("{}: pricing step has not run", args.results.display())))?;
    let nodes = surface.hours.values().next().map(|h| h.p.len()).unwrap_or(0);
    if args.node >= nodes {
        return Err(Failure(EXIT_VALIDATION, format!("node {} not in the LMV table ({nodes} nodes)", args.node)));
    }
    if !(args.k_kw.is_finite() && args.k_kw > 0.0) {
        return Err(Failure(EXIT_VALIDATION, format!("--k-kw must be positive, got {}", args.k_kw)));
    }
    let profile = read_irradiance(&args.irradiance)?;
    let rows = project_actual_der(&surface, &profile, args.node, args.k_kw);
    let skipped = profile.len() - rows.len();
    if skipped > 0 {
        log::warn!("{skipped} irradiance hours have no LMVs and were skipped");
    }
    let out = args.out.as_deref().unwrap_or(&args.results);
    let summary = write_pv(out, &rows, args.node, args.k_kw)?;
    log::info!(
        "{} hours, {:.3} MWh, {:.3} MVArh, annual value ${:.2}",
        summary.hours,
        summary.p_mwh,
        summary.q_mvarh,
        summary.annual_value_usd
    );
    Ok(EXIT_OK)
}

fn synth(args: &SynthArgs) -> Result<u8, Failure> {
    let set = if args.case == "eighty-eight-node" {
        synthetic::eighty_eight_node(args.hours)
    } else {
        synthetic::by_name(&args.case).ok_or_else(|| {
            Failure(EXIT_VALIDATION, format!("unknown case `{}`; one of: {}", args.case, synthetic::NAMES.join(", ")))
        })?
    };
    set.write(&args.out)?;
    log::info!("wrote {} to {}", args.case, args.out.display());
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_PARSE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Validate(a) => validate(a),
        Command::Run(a) => run(a),
        Command::PvValue(a) => pv_value(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, message)) => {
            log::error!("{message}");
            ExitCode::from(code)
        }
    }
}
