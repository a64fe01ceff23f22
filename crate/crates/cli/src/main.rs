//! `aggmarkov` command-line tool.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use aggmarkov::experiments::CSV_HEADER;
use aggmarkov::io::{self, Diagnostics, ObservationFile, ObservationMeta, ResultFile};
use aggmarkov::plot::render_svg;
use aggmarkov::{
    diagnose, estimate, extract_dual_scalings, paper_matrix, primal_span_certificate,
    random_stochastic_matrix, run_experiment_with, sample_empirical_marginals, Distribution, Error,
    EstimateResult, EstimateStatus, EstimatorConfig, ExperimentConfig, ExperimentMode, InitialLaw,
    InnerMode, Particles, SamplingMode, SimulationConfig, TransitionMatrix, UniquenessCertificate,
    Verdict,
};
use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

const EXIT_USAGE: u8 = 2;
const EXIT_INPUT: u8 = 3;
const EXIT_INFEASIBLE: u8 = 4;
const EXIT_NOT_CONVERGED: u8 = 5;
const EXIT_NO_PLANS: u8 = 6;
const EXIT_OTHER: u8 = 1;

/// Min entry of `random:<seed>` transition matrices.
const RANDOM_MIN_ENTRY: f64 = 1e-3;

#[derive(Parser)]
#[command(
    name = "aggmarkov",
    version,
    about = "Estimate Markov transition matrices from aggregate snapshots"
)]
struct Cli {
    /// Worker threads for parallel work (default: available parallelism).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample snapshot pairs from a chain.
    Simulate(SimulateArgs),
    /// Estimate the transition matrix from an observation file.
    Estimate(EstimateArgs),
    /// Dual certificates and uniqueness verdict for a stored result.
    Diagnose(DiagnoseArgs),
    /// Error-versus-snapshots curve over a grid of cells.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SimMode {
    Independent,
    Sequential,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// `paper` for the built-in reference matrix, `random:<seed>`, or a JSON file with the matrix rows.
    #[arg(long)]
    transition: String,
    /// Number of states for `random:<seed>`.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum)]
    mode: SimMode,
    /// Particle count, or `inf` for exact propagation.
    #[arg(long)]
    particles: Particles,
    #[arg(long)]
    pairs: usize,
    /// Sequential mode only.
    #[arg(long, default_value_t = 0)]
    burn_in: usize,
    /// `simplex` for a fresh uniform draw per law, or fixed comma-separated weights.
    #[arg(long, default_value = "simplex", value_parser = parse_initial_law)]
    initial_law: InitialLaw,
    #[arg(long, env = "AGGMARKOV_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EstimateArgs {
    #[arg(long)]
    observations: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    max_outer: usize,
    #[arg(long, default_value_t = 1e-8)]
    outer_tol: f64,
    /// `full` or `sweeps:<k>`.
    #[arg(long, default_value = "full", value_parser = parse_inner)]
    inner: InnerMode,
    /// Store the per-pair plans (needed by `diagnose`).
    #[arg(long)]
    emit_plans: bool,
    /// Exit 5 unless the run converged.
    #[arg(long)]
    strict: bool,
    /// Use the marginals as given instead of rescaling each pair to unit mass.
    #[arg(long)]
    no_normalize: bool,
}

#[derive(clap::Args)]
struct DiagnoseArgs {
    #[arg(long)]
    result: PathBuf,
    #[arg(long)]
    json: bool,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    #[arg(long, value_parser = parse_mode)]
    mode: ExperimentMode,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    plot: Option<PathBuf>,
    /// Overrides the config file's seed.
    #[arg(long, env = "AGGMARKOV_SEED")]
    seed: Option<u64>,
}

/// Experiment settings file; missing keys keep the mode's defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExperimentFile {
    n: Option<usize>,
    particle_counts: Option<Vec<Particles>>,
    tau_grid: Option<Vec<usize>>,
    repeats: Option<usize>,
    seed: Option<u64>,
    tail_fraction: Option<f64>,
    random_min_entry: Option<f64>,
    transition: Option<Vec<Vec<f64>>>,
    max_outer: Option<usize>,
    outer_tol: Option<f64>,
    inner: Option<String>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure {
            code: EXIT_OTHER,
            error,
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn parse_inner(s: &str) -> Result<InnerMode, String> {
    if s == "full" {
        return Ok(InnerMode::FullConvergence);
    }
    match s.strip_prefix("sweeps:").map(str::parse::<usize>) {
        Some(Ok(k)) if k >= 1 => Ok(InnerMode::Sweeps(k)),
        _ => Err(format!(
            "expected `full` or `sweeps:<k>` with k >= 1, got {s:?}"
        )),
    }
}

fn parse_initial_law(s: &str) -> Result<InitialLaw, String> {
    if s == "simplex" {
        return Ok(InitialLaw::UniformRandomSimplex);
    }
    let weights = s
        .split(',')
        .map(|w| w.trim().parse::<f64>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| format!("expected `simplex` or comma-separated weights, got {s:?}"))?;
    Distribution::new(weights)
        .map(InitialLaw::Fixed)
        .map_err(|e| e.to_string())
}

fn parse_mode(s: &str) -> Result<ExperimentMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn read_text(path: &Path) -> Outcome<String> {
    fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_INPUT, anyhow!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Outcome<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn input_error(path: &Path, e: Error) -> Failure {
    Failure::new(EXIT_INPUT, anyhow!("{}: {e}", path.display()))
}

fn load_transition(source: &str, n: Option<usize>) -> Outcome<TransitionMatrix> {
    if source == "paper" {
        let a = paper_matrix();
        if n.is_some_and(|n| n != a.n()) {
            return Err(Failure::new(
                EXIT_USAGE,
                anyhow!("the reference matrix has {} states", a.n()),
            ));
        }
        return Ok(a);
    }
    if let Some(seed) = source.strip_prefix("random:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| Failure::new(EXIT_USAGE, anyhow!("invalid seed in {source:?}")))?;
        let n = n.ok_or_else(|| {
            Failure::new(EXIT_USAGE, anyhow!("--n is required with random:<seed>"))
        })?;
        if n < 2 {
            return Err(Failure::new(EXIT_USAGE, anyhow!("--n must be at least 2")));
        }
        return Ok(random_stochastic_matrix(n, seed, true, RANDOM_MIN_ENTRY));
    }
    let path = Path::new(source);
    let text = read_text(path)?;
    let a = parse_transition(&text).map_err(|e| input_error(path, e))?;
    if n.is_some_and(|n| n != a.n()) {
        return Err(Failure::new(
            EXIT_USAGE,
            anyhow!("--n disagrees with the {} states in {source}", a.n()),
        ));
    }
    Ok(a)
}

/// Accepts a bare array of rows or any object with a `transition` field.
fn parse_transition(text: &str) -> Result<TransitionMatrix, Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Doc {
        Rows(Vec<Vec<f64>>),
        Wrapped { transition: Vec<Vec<f64>> },
    }
    let rows = match io::from_json::<Doc>(text)? {
        Doc::Rows(r) | Doc::Wrapped { transition: r } => r,
    };
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows.len()) {
        return Err(Error::Format("transition: expected a square matrix".into()));
    }
    TransitionMatrix::from_rows(&rows)
}

fn cmd_simulate(args: SimulateArgs) -> Outcome<()> {
    let a = load_transition(&args.transition, args.n)?;
    let mode = match args.mode {
        SimMode::Independent => SamplingMode::Independent,
        SimMode::Sequential => SamplingMode::Sequential,
    };
    let seed = args.seed.unwrap_or(0);
    let mut cfg = SimulationConfig::new(a.n(), args.particles, args.pairs, mode, seed);
    cfg.burn_in = args.burn_in;
    cfg.initial_law = args.initial_law;
    let obs = sample_empirical_marginals(&a, &cfg).map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let meta = ObservationMeta {
        seed: Some(seed),
        mode: Some(mode.to_string()),
        n_particles: Some(args.particles),
        generator_version: Some(env!("CARGO_PKG_VERSION").to_string()),
    };
    let doc = ObservationFile::from_observations(&obs, Some(meta));
    write_text(
        &args.out,
        &io::to_canonical_json(&doc).context("serializing observations")?,
    )
}

fn normalize_pairs(doc: &mut ObservationFile) {
    for p in &mut doc.pairs {
        for v in [&mut p.mu, &mut p.nu] {
            let mass: f64 = v.iter().sum();
            if mass.is_finite() && mass > 0.0 {
                v.iter_mut().for_each(|x| *x /= mass);
            }
        }
    }
}

fn is_infeasible(e: &Error) -> bool {
    matches!(
        e,
        Error::MassMismatch { .. }
            | Error::ZeroMass { .. }
            | Error::Infeasible { .. }
            | Error::InfeasibleSupport { .. }
            | Error::EmptyInput
    )
}

fn cmd_estimate(args: EstimateArgs) -> Outcome<()> {
    let text = read_text(&args.observations)?;
    let mut doc: ObservationFile =
        io::from_json(&text).map_err(|e| input_error(&args.observations, e))?;
    if !args.no_normalize {
        normalize_pairs(&mut doc);
    }
    let obs = doc.to_observations().map_err(|e| {
        let code = if is_infeasible(&e) {
            EXIT_INFEASIBLE
        } else {
            EXIT_INPUT
        };
        Failure::new(code, anyhow!("{}: {e}", args.observations.display()))
    })?;
    let cfg = EstimatorConfig {
        max_outer: args.max_outer,
        outer_tol: args.outer_tol,
        inner_mode: args.inner,
        ..EstimatorConfig::default()
    };
    cfg.validate().map_err(|e| Failure::new(EXIT_USAGE, e))?;
    let r = estimate(&obs, &cfg).map_err(|e| {
        let code = if is_infeasible(&e) {
            EXIT_INFEASIBLE
        } else {
            EXIT_OTHER
        };
        Failure::new(code, e)
    })?;
    let report = diagnose(&r).ok();
    let diagnostics = report.as_ref().map(Diagnostics::from_report);
    let doc = ResultFile::from_result(&r, args.emit_plans, diagnostics);
    write_text(
        &args.out,
        &io::to_canonical_json(&doc).context("serializing result")?,
    )?;

    let certified = match &report {
        Some(d) => d.certificate.certified_unique.to_string(),
        None => "unknown".to_string(),
    };
    println!(
        "status {}, {} outer iterations, objective {:e}, certified_unique {certified}",
        io::status_name(r.status),
        r.outer_iterations,
        r.objective()
    );
    if r.zero_row_flags.iter().any(|&z| z) {
        eprintln!(
            "warning: states never occupied got uniform rows: {:?}",
            zero_rows(&r.zero_row_flags)
        );
    }
    if args.strict && r.status != EstimateStatus::Converged {
        return Err(Failure::new(
            EXIT_NOT_CONVERGED,
            anyhow!("did not converge (status {})", io::status_name(r.status)),
        ));
    }
    Ok(())
}

fn zero_rows(flags: &[bool]) -> Vec<usize> {
    flags
        .iter()
        .enumerate()
        .filter(|(_, &z)| z)
        .map(|(i, _)| i)
        .collect()
}

fn cmd_diagnose(args: DiagnoseArgs) -> Outcome<()> {
    let text = read_text(&args.result)?;
    let doc: ResultFile = io::from_json(&text).map_err(|e| input_error(&args.result, e))?;
    let r = doc
        .to_result()
        .map_err(|e| input_error(&args.result, e))?
        .ok_or_else(|| {
            Failure::new(
                EXIT_NO_PLANS,
                anyhow!(
                    "{} has no plans; rerun estimate with --emit-plans",
                    args.result.display()
                ),
            )
        })?;
    let primal = primal_span_certificate(&r);
    let d = match extract_dual_scalings(&r).and_then(|s| Ok((diagnose(&r)?, s))) {
        Ok(found) => found,
        Err(e) => return report_without_dual(&r, &primal, &e, args.json),
    };
    let (d, scalings) = d;
    let inactive = d.feasibility.inactive_set();
    let verdict = io::verdict_name(d.certificate.verdict);
    if args.json {
        let out = serde_json::json!({
            "verdict": verdict,
            "certified_unique": d.certificate.certified_unique,
            "rank_u": d.certificate.rank_u,
            "rank_v": d.certificate.rank_v,
            "inactive_set_size": inactive.len(),
            "inactive_set": inactive,
            "max_dual_constraint": d.feasibility.max_constraint,
            "max_support_deviation": d.feasibility.max_support_deviation(&scalings.support),
            "primal_objective": d.primal,
            "dual_objective": d.dual,
            "duality_gap": d.gap,
            "primal_verdict": io::verdict_name(primal.verdict),
            "primal_rank_u": primal.rank_u,
            "primal_rank_v": primal.rank_v,
        });
        println!(
            "{}",
            serde_json::to_string_pretty(&out).context("serializing report")?
        );
    } else {
        println!("verdict: {verdict}");
        println!(
            "ranks: u {} v {} (pairs {}, states {})",
            d.certificate.rank_u,
            d.certificate.rank_v,
            r.plans.len(),
            r.n()
        );
        println!("inactive set size: {}", inactive.len());
        println!("max dual constraint: {:?}", d.feasibility.max_constraint);
        println!(
            "duality gap: {:e} (primal {:?}, dual {:?})",
            d.gap, d.primal, d.dual
        );
        println!(
            "primal span check: {} (ranks {} {})",
            io::verdict_name(primal.verdict),
            primal.rank_u,
            primal.rank_v
        );
    }
    Ok(())
}

/// Plans that do not factor through a common aggregate (typically an
/// unconverged run) have no dual scalings; only the primal check applies.
fn report_without_dual(
    r: &EstimateResult,
    primal: &UniquenessCertificate,
    e: &Error,
    json: bool,
) -> Outcome<()> {
    let verdict = io::verdict_name(Verdict::Undetermined);
    if json {
        let out = serde_json::json!({
            "verdict": verdict,
            "certified_unique": false,
            "dual_error": e.to_string(),
            "primal_verdict": io::verdict_name(primal.verdict),
            "primal_rank_u": primal.rank_u,
            "primal_rank_v": primal.rank_v,
        });
        println!(
            "{}",
            serde_json::to_string_pretty(&out).context("serializing report")?
        );
    } else {
        println!("verdict: {verdict}");
        println!("dual scalings unavailable: {e}");
        println!(
            "primal span check: {} (ranks {} {}, pairs {}, states {})",
            io::verdict_name(primal.verdict),
            primal.rank_u,
            primal.rank_v,
            r.plans.len(),
            r.n()
        );
    }
    Ok(())
}

fn experiment_config(args: &ExperimentArgs) -> Outcome<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(args.mode);
    let file = match &args.config {
        Some(path) => {
            io::from_json::<ExperimentFile>(&read_text(path)?).map_err(|e| input_error(path, e))?
        }
        None => ExperimentFile::default(),
    };
    if let Some(n) = file.n {
        cfg.n = n;
    }
    if let Some(p) = file.particle_counts {
        cfg.particle_counts = p;
    }
    if let Some(t) = file.tau_grid {
        cfg.tau_grid = t;
    }
    if let Some(k) = file.repeats {
        cfg.repeats = k;
    }
    if let Some(f) = file.tail_fraction {
        cfg.tail_fraction = f;
    }
    if let Some(m) = file.random_min_entry {
        cfg.random_min_entry = m;
    }
    if let Some(rows) = file.transition {
        let a = TransitionMatrix::from_rows(&rows)
            .map_err(|e| Failure::new(EXIT_INPUT, anyhow!("transition: {e}")))?;
        if file.n.is_none() {
            cfg.n = a.n();
        }
        cfg.transition = Some(a);
    }
    if let Some(m) = file.max_outer {
        cfg.estimator.max_outer = m;
    }
    if let Some(t) = file.outer_tol {
        cfg.estimator.outer_tol = t;
    }
    if let Some(inner) = file.inner {
        cfg.estimator.inner_mode =
            parse_inner(&inner).map_err(|e| Failure::new(EXIT_INPUT, anyhow!("inner: {e}")))?;
    }
    cfg.seed = args.seed.or(file.seed).unwrap_or(0);
    cfg.validate().map_err(|e| Failure::new(EXIT_USAGE, e))?;
    cfg.truth().map_err(|e| Failure::new(EXIT_USAGE, e))?;
    Ok(cfg)
}

fn cmd_experiment(args: ExperimentArgs) -> Outcome<()> {
    let cfg = experiment_config(&args)?;
    // finished rows land in the file as they complete; the final write
    // replaces them with the sorted table and summary
    let file =
        fs::File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let sink = Mutex::new(BufWriter::new(file));
    writeln!(sink.lock().unwrap(), "{CSV_HEADER}").context("writing header")?;
    let curve = run_experiment_with(&cfg, |row| {
        let mut w = sink.lock().unwrap();
        let _ = writeln!(
            w,
            "{},{},{},{}",
            row.n_particles,
            row.tau,
            row.repeat,
            aggmarkov::experiments::format_float(row.error)
        );
        let _ = w.flush();
    })
    .map_err(|e| Failure::new(EXIT_USAGE, e))?;
    drop(sink);
    write_text(&args.out, &curve.to_csv())?;
    if let Some(plot) = &args.plot {
        let title = format!("{} mode, n = {}", cfg.mode, cfg.n);
        write_text(plot, &render_svg(&curve, &title))?;
    }
    for (np, slope) in &curve.slopes {
        println!("N = {np}: slope {slope:.3}");
    }
    let failed = curve.rows.iter().filter(|r| r.error.is_nan()).count();
    if failed > 0 {
        eprintln!("warning: {failed} cells failed and were recorded as nan");
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome<()> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::new(
                EXIT_USAGE,
                anyhow!("--jobs must be at least 1"),
            ));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .context("starting worker pool")?;
    }
    match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Diagnose(a) => cmd_diagnose(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
