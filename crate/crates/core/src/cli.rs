//! Command-line front end. [`run`] takes the argument vector and two output
//! streams and returns the process exit code:
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | validation or usage error |
//! | 2 | I/O error |
//! | 3 | `query-budget` found no admissible configuration |
//!
//! Errors are written to the error stream as `error[<kind>]: <message>`.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::conformal::{conformal_unlearning_risk, BoundResult, ReferenceStats, RiskBudget};
use crate::controller::{build_table, query_by_budget, query_by_config, BuildSettings, EntryMode, LookupTable};
use crate::error::{FrocError, Result};
use crate::risk_model::{Squash, TauPolicy};
use crate::simulator::{
    coverage_experiment, default_grid, fwer_experiment, generate_metrics, CoverageSpec, FwerSpec, ModelPreset,
    RiskDistribution, SimProfile, DEFAULT_SAMPLES_PER_SPLIT,
};
use crate::store::{
    attach_samples, emit_method_heatmap, emit_report_series, format_real, parse_metrics, parse_samples, read_table,
    render_metrics, render_samples, serialize_table, MetricsFile, ReportKind, ReportParams,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_EMPTY_SET: i32 = 3;

const AGGREGATE_NOTE: &str =
    "# note: aggregate-mode entries approximate r_hat by a single normalized aggregate risk";

#[derive(Debug, Parser)]
#[command(name = "froc", version, about = "Conformal risk control for machine-unlearning configurations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate the Hoeffding, Bentkus and combined bounds for one reference set.
    Bound(BoundArgs),
    /// Score every configuration of a metrics file.
    Risk(RiskArgs),
    /// Build a lookup table from a metrics file.
    TableBuild(TableBuildArgs),
    /// List configurations admissible at (alpha, delta) and recommend one.
    QueryBudget(QueryBudgetArgs),
    /// Bound the risk of a single configuration.
    QueryConfig(QueryConfigArgs),
    /// Simulate metrics for the default 12-configuration grid.
    SimulateMetrics(SimulateMetricsArgs),
    /// Monte Carlo miscoverage of the single-configuration bound.
    SimulateCoverage(SimulateCoverageArgs),
    /// Monte Carlo family-wise error of valid-set selection.
    SimulateFwer(SimulateFwerArgs),
    /// Emit a plot-ready series from one or more tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct BoundArgs {
    /// Reference set size.
    #[arg(long)]
    n_ref: u64,
    /// Empirical risk on the reference set, in [0, 1].
    #[arg(long)]
    r_hat: f64,
    /// Risk budget in (0, 1).
    #[arg(long)]
    delta: f64,
}

#[derive(Debug, Args)]
struct ScoringArgs {
    /// Aggregate metrics file.
    #[arg(long)]
    metrics: PathBuf,
    /// Optional per-sample records for the same grid.
    #[arg(long)]
    per_sample: Option<PathBuf>,
    /// Penalty weights as `w_f,w_u`.
    #[arg(long, default_value = "1,1")]
    weights: String,
    /// Forgetting target: a number or `median` of the grid's shift scores.
    #[arg(long, default_value = "median")]
    tau_f: String,
    /// Normalization of the unified risk: `exp` or `clip`.
    #[arg(long, default_value = "exp")]
    squash: String,
    /// Reference size recorded for configurations without per-sample records.
    #[arg(long, default_value_t = 1)]
    aggregate_n_ref: u64,
    /// Worker threads for table construction.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct RiskArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
}

#[derive(Debug, Args)]
struct TableBuildArgs {
    #[command(flatten)]
    scoring: ScoringArgs,
    /// Seed recorded in the table header.
    #[arg(long)]
    seed: Option<u64>,
    /// Output table file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct QueryBudgetArgs {
    /// Lookup table file.
    #[arg(long)]
    table: PathBuf,
    /// Family-wise risk budget in (0, 1).
    #[arg(long)]
    delta: f64,
    /// Target risk level in [0, 1].
    #[arg(long)]
    alpha: f64,
}

#[derive(Debug, Args)]
struct QueryConfigArgs {
    /// Lookup table file.
    #[arg(long)]
    table: PathBuf,
    /// Configuration id.
    #[arg(long)]
    config: String,
    /// Risk budget in (0, 1).
    #[arg(long)]
    delta: f64,
}

#[derive(Debug, Args)]
struct SimulateMetricsArgs {
    /// Strength preset: alpha, beta or gamma.
    #[arg(long, default_value = "alpha")]
    model: String,
    /// Forget samples per configuration.
    #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_SPLIT)]
    n_forget: usize,
    /// Retain samples per configuration.
    #[arg(long, default_value_t = DEFAULT_SAMPLES_PER_SPLIT)]
    n_retain: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Aggregate metrics output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-sample output file.
    #[arg(long)]
    per_sample: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateCoverageArgs {
    /// True risk of every reference sample.
    #[arg(long)]
    p_star: f64,
    #[arg(long)]
    n_ref: u64,
    #[arg(long)]
    delta: f64,
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Per-sample risk law: `bernoulli` or `beta`.
    #[arg(long, default_value = "bernoulli")]
    distribution: String,
    /// `a + b` of the Beta law.
    #[arg(long, default_value_t = 10.0)]
    concentration: f64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Per-trial detail file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateFwerArgs {
    /// Number of configurations.
    #[arg(long, default_value_t = 20)]
    grid_size: usize,
    /// True risk; give once for all configurations or once per configuration.
    #[arg(long, required = true)]
    true_risk: Vec<f64>,
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    delta: f64,
    #[arg(long)]
    n_ref: u64,
    #[arg(long, default_value_t = 2000)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Lookup table file; repeat with --model for a heatmap.
    #[arg(long, required = true)]
    table: Vec<PathBuf>,
    /// risk-vs-config, nref-sweep, method-heatmap or surface.
    #[arg(long)]
    kind: String,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    /// Comma-separated reference sizes for sweeps and surfaces.
    #[arg(long, default_value = "50,100,200,400,800")]
    n_values: String,
    /// Row label per table in heatmaps.
    #[arg(long)]
    model: Vec<String>,
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Outcome of a successful command: output text and exit code.
struct Outcome {
    stdout: String,
    stderr: String,
    code: i32,
}

impl Outcome {
    fn ok(stdout: String) -> Self {
        Self {
            stdout,
            stderr: String::new(),
            code: EXIT_OK,
        }
    }
}

fn exit_code(err: &FrocError) -> i32 {
    match err {
        FrocError::Io { .. } => EXIT_IO,
        _ => EXIT_INVALID,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(err) => {
            let text = err.to_string();
            return if err.use_stderr() {
                let first = text.lines().next().unwrap_or_default();
                let first = first.strip_prefix("error: ").unwrap_or(first);
                let rest: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
                let _ = write!(stderr, "error[usage]: {first}\n{rest}");
                EXIT_INVALID
            } else {
                let _ = write!(stdout, "{text}");
                EXIT_OK
            };
        }
    };
    match dispatch(cli.command) {
        Ok(outcome) => {
            let mut code = outcome.code;
            if stdout.write_all(outcome.stdout.as_bytes()).and_then(|_| stdout.flush()).is_err() {
                let _ = writeln!(stderr, "error[io]: failed to write output");
                code = EXIT_IO;
            }
            let _ = stderr.write_all(outcome.stderr.as_bytes());
            code
        }
        Err(err) => {
            let _ = writeln!(stderr, "error[{}]: {err}", err.kind());
            exit_code(&err)
        }
    }
}

fn dispatch(command: Command) -> Result<Outcome> {
    match command {
        Command::Bound(a) => cmd_bound(a),
        Command::Risk(a) => cmd_risk(a),
        Command::TableBuild(a) => cmd_table_build(a),
        Command::QueryBudget(a) => cmd_query_budget(a),
        Command::QueryConfig(a) => cmd_query_config(a),
        Command::SimulateMetrics(a) => cmd_simulate_metrics(a),
        Command::SimulateCoverage(a) => cmd_simulate_coverage(a),
        Command::SimulateFwer(a) => cmd_simulate_fwer(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| FrocError::Io {
        message: format!("{}: {e}", path.display()),
        written: 0,
    })
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    let mut file = File::create(path).map_err(|e| FrocError::Io {
        message: format!("{}: {e}", path.display()),
        written: 0,
    })?;
    file.write_all(text.as_bytes())
        .and_then(|_| file.sync_all())
        .map_err(|e| FrocError::Io {
            message: format!("{}: {e}", path.display()),
            written: 0,
        })
}

fn parse_weights(text: &str) -> Result<(f64, f64)> {
    let parse = |t: &str| t.trim().parse::<f64>().ok().filter(|v| v.is_finite());
    match text.split_once(',') {
        Some((f, u)) => match (parse(f), parse(u)) {
            (Some(f), Some(u)) => Ok((f, u)),
            _ => Err(FrocError::Usage(format!("--weights expects `w_f,w_u`, got `{text}`"))),
        },
        None => Err(FrocError::Usage(format!("--weights expects `w_f,w_u`, got `{text}`"))),
    }
}

fn parse_n_values(text: &str) -> Result<Vec<u64>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| FrocError::Usage(format!("--n-values expects positive integers, got `{t}`")))
        })
        .collect()
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        return Err(FrocError::Usage("--jobs must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| FrocError::Config(format!("cannot start worker threads: {e}")))
}

fn render_bound(out: &mut String, bound: &BoundResult) {
    let _ = writeln!(out, "n_ref={}", bound.stats.n_ref);
    let _ = writeln!(out, "r_hat={}", format_real(bound.stats.r_hat));
    let _ = writeln!(out, "delta={}", format_real(bound.delta));
    let _ = writeln!(out, "alpha_hoeffding={}", format_real(bound.alpha_hoeffding));
    let _ = writeln!(out, "alpha_bentkus={}", format_real(bound.alpha_bentkus));
    let _ = writeln!(out, "alpha_unlearn={}", format_real(bound.alpha_unlearn));
}

fn cmd_bound(a: BoundArgs) -> Result<Outcome> {
    let budget = RiskBudget::new(a.delta)?;
    let stats = ReferenceStats::new(a.n_ref, a.r_hat)?;
    let mut out = String::new();
    render_bound(&mut out, &conformal_unlearning_risk(budget, stats));
    Ok(Outcome::ok(out))
}

fn load_metrics(a: &ScoringArgs) -> Result<(MetricsFile, Vec<String>)> {
    let mut parsed = parse_metrics(open(&a.metrics)?)?;
    let mut warnings = std::mem::take(&mut parsed.warnings);
    if let Some(path) = &a.per_sample {
        let (samples, sample_warnings) = parse_samples(open(path)?)?;
        warnings.extend(sample_warnings);
        attach_samples(&mut parsed.metrics, samples)?;
    }
    Ok((parsed, warnings))
}

fn settings(a: &ScoringArgs, seed: Option<u64>) -> Result<BuildSettings> {
    let (w_f, w_u) = parse_weights(&a.weights)?;
    Ok(BuildSettings {
        w_f,
        w_u,
        squash: Squash::parse(&a.squash)?,
        tau_policy: TauPolicy::parse(&a.tau_f)?,
        aggregate_n_ref: a.aggregate_n_ref,
        build_seed: seed,
        jobs: a.jobs,
    })
}

fn build(a: &ScoringArgs, seed: Option<u64>) -> Result<(LookupTable, String)> {
    let (parsed, warnings) = load_metrics(a)?;
    let table = build_table(&parsed.configs, &parsed.metrics, &settings(a, seed)?)?;
    let stderr = warnings.iter().map(|w| format!("warning: {w}\n")).collect();
    Ok((table, stderr))
}

fn has_aggregate(table: &LookupTable) -> bool {
    table.entries().iter().any(|e| e.mode == EntryMode::Aggregate)
}

fn cmd_risk(a: RiskArgs) -> Result<Outcome> {
    let (table, stderr) = build(&a.scoring, None)?;
    let w = table.weights();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# weights={},{} tau_f={} tau_f_policy={} squash={}",
        format_real(w.w_f),
        format_real(w.w_u),
        format_real(w.tau_f),
        table.tau_f_policy(),
        w.squash.as_str()
    );
    if has_aggregate(&table) {
        let _ = writeln!(out, "{AGGREGATE_NOTE}");
    }
    out.push_str("config_id,s,r,delta_f,delta_u,r_tilde,r_norm,mode,n_ref,r_hat\n");
    for e in table.entries() {
        let b = &e.breakdown;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            e.config.id,
            format_real(b.s),
            format_real(b.r),
            format_real(b.delta_f),
            format_real(b.delta_u),
            format_real(b.r_tilde),
            format_real(b.r_norm),
            e.mode.as_str(),
            e.stats.n_ref,
            format_real(e.stats.r_hat),
        );
    }
    Ok(Outcome {
        stdout: out,
        stderr,
        code: EXIT_OK,
    })
}

fn cmd_table_build(a: TableBuildArgs) -> Result<Outcome> {
    let (table, stderr) = build(&a.scoring, a.seed)?;
    let text = serialize_table(&table);
    let stdout = match &a.out {
        Some(path) => {
            write_file(path, &text)?;
            format!("wrote {} entries={} bytes={}\n", path.display(), table.len(), text.len())
        }
        None => text,
    };
    Ok(Outcome {
        stdout,
        stderr,
        code: EXIT_OK,
    })
}

fn load_table(path: &Path) -> Result<LookupTable> {
    read_table(open(path)?)
}

fn cmd_query_budget(a: QueryBudgetArgs) -> Result<Outcome> {
    let table = load_table(&a.table)?;
    let answer = query_by_budget(&table, a.delta, a.alpha)?;
    let set = &answer.valid_set;
    let mut out = String::new();
    let _ = writeln!(out, "alpha={}", format_real(set.alpha));
    let _ = writeln!(out, "delta={}", format_real(set.delta));
    let _ = writeln!(out, "per_config_delta={}", format_real(set.per_config_delta));
    let _ = writeln!(out, "candidates={}", table.len());
    let _ = writeln!(out, "valid={}", set.members.len());
    if has_aggregate(&table) {
        let _ = writeln!(out, "{AGGREGATE_NOTE}");
    }
    for m in &set.members {
        let mode = table.entry(&m.config_id).map_or("aggregate", |e| e.mode.as_str());
        let _ = writeln!(
            out,
            "member id={} mode={} n_ref={} r_hat={} alpha_unlearn={}",
            m.config_id,
            mode,
            m.bound.stats.n_ref,
            format_real(m.bound.stats.r_hat),
            format_real(m.bound.alpha_unlearn),
        );
    }
    let _ = writeln!(out, "recommendation={}", answer.recommendation.as_deref().unwrap_or("none"));
    if set.is_empty() {
        return Ok(Outcome {
            stdout: out,
            stderr: format!(
                "no configuration satisfies alpha={} at delta={}\n",
                format_real(set.alpha),
                format_real(set.delta)
            ),
            code: EXIT_EMPTY_SET,
        });
    }
    Ok(Outcome::ok(out))
}

fn cmd_query_config(a: QueryConfigArgs) -> Result<Outcome> {
    let table = load_table(&a.table)?;
    let bound = query_by_config(&table, &a.config, a.delta)?;
    let entry = table.entry(&a.config).expect("query_by_config found the entry");
    let mut out = String::new();
    let _ = writeln!(out, "config={}", entry.config.id);
    let _ = writeln!(out, "mode={}", entry.mode.as_str());
    if entry.mode == EntryMode::Aggregate {
        let _ = writeln!(out, "{AGGREGATE_NOTE}");
    }
    render_bound(&mut out, &bound);
    Ok(Outcome::ok(out))
}

fn cmd_simulate_metrics(a: SimulateMetricsArgs) -> Result<Outcome> {
    let model = ModelPreset::parse(&a.model)?;
    let grid = default_grid();
    let metrics = generate_metrics(&SimProfile::defaults(model), &grid, a.n_forget, a.n_retain, a.seed)?;
    let aggregate = render_metrics(&grid, &metrics)?;
    if let Some(path) = &a.per_sample {
        write_file(path, &render_samples(&metrics))?;
    }
    let stdout = match &a.out {
        Some(path) => {
            write_file(path, &aggregate)?;
            format!("wrote {} configs={}\n", path.display(), grid.len())
        }
        None => aggregate,
    };
    Ok(Outcome::ok(stdout))
}

fn three_sigma_limit(delta: f64, trials: usize) -> f64 {
    delta + 3.0 * (delta * (1.0 - delta) / trials as f64).sqrt()
}

fn cmd_simulate_coverage(a: SimulateCoverageArgs) -> Result<Outcome> {
    let distribution = match a.distribution.as_str() {
        "bernoulli" => RiskDistribution::Bernoulli,
        "beta" => RiskDistribution::Beta {
            concentration: a.concentration,
        },
        other => {
            return Err(FrocError::Usage(format!(
                "--distribution expects bernoulli or beta, got `{other}`"
            )))
        }
    };
    let spec = CoverageSpec {
        distribution,
        ..CoverageSpec::bernoulli(a.p_star, a.n_ref, a.delta, a.trials, a.seed)
    };
    let report = thread_pool(a.jobs)?.install(|| coverage_experiment(&spec))?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# spec p_star={} n_ref={} delta={} trials={} seed={} distribution={}",
        format_real(spec.p_star),
        spec.n_ref,
        format_real(spec.delta),
        spec.trials,
        spec.seed,
        a.distribution
    );
    let _ = writeln!(out, "violations={}", report.violations);
    let _ = writeln!(out, "miscoverage_rate={}", format_real(report.miscoverage_rate));
    let _ = writeln!(out, "three_sigma_limit={}", format_real(three_sigma_limit(spec.delta, spec.trials)));
    if let Some(path) = &a.out {
        let mut detail = String::from("trial,r_hat,alpha_unlearn,violated\n");
        for (i, t) in report.trials.iter().enumerate() {
            let _ = writeln!(
                detail,
                "{i},{},{},{}",
                format_real(t.r_hat),
                format_real(t.alpha_unlearn),
                u8::from(t.violated)
            );
        }
        write_file(path, &detail)?;
    }
    Ok(Outcome::ok(out))
}

fn cmd_simulate_fwer(a: SimulateFwerArgs) -> Result<Outcome> {
    let true_risks = match a.true_risk.len() {
        1 => vec![a.true_risk[0]; a.grid_size],
        n if n == a.grid_size => a.true_risk.clone(),
        n => {
            return Err(FrocError::Usage(format!(
                "--true-risk given {n} times; expected 1 or --grid-size ({})",
                a.grid_size
            )))
        }
    };
    let spec = FwerSpec {
        true_risks,
        alpha: a.alpha,
        delta: a.delta,
        n_ref: a.n_ref,
        trials: a.trials,
        seed: a.seed,
    };
    let report = thread_pool(a.jobs)?.install(|| fwer_experiment(&spec))?;
    let risks: Vec<String> = spec.true_risks.iter().map(|&r| format_real(r)).collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "# spec grid_size={} true_risks={} alpha={} delta={} n_ref={} trials={} seed={}",
        spec.grid_size(),
        risks.join(";"),
        format_real(spec.alpha),
        format_real(spec.delta),
        spec.n_ref,
        spec.trials,
        spec.seed
    );
    let _ = writeln!(out, "family_errors={}", report.family_errors);
    let _ = writeln!(out, "family_error_rate={}", format_real(report.family_error_rate));
    let _ = writeln!(out, "three_sigma_limit={}", format_real(three_sigma_limit(spec.delta, spec.trials)));
    Ok(Outcome::ok(out))
}

fn cmd_report(a: ReportArgs) -> Result<Outcome> {
    let kind = ReportKind::parse(&a.kind)?;
    let mut params = ReportParams {
        delta: a.delta,
        n_values: parse_n_values(&a.n_values)?,
        ..ReportParams::default()
    };
    let tables = a.table.iter().map(|p| load_table(p)).collect::<Result<Vec<_>>>()?;
    let text = if kind == ReportKind::MethodHeatmap {
        let labels: Vec<String> = if a.model.is_empty() {
            (0..tables.len()).map(|i| format!("model{i}")).collect()
        } else if a.model.len() == tables.len() {
            a.model.clone()
        } else {
            return Err(FrocError::Usage(format!(
                "--model given {} times for {} tables",
                a.model.len(),
                tables.len()
            )));
        };
        let pairs: Vec<(&str, &LookupTable)> = labels.iter().map(String::as_str).zip(tables.iter()).collect();
        emit_method_heatmap(&pairs, &params)?
    } else {
        if tables.len() != 1 {
            return Err(FrocError::Usage(format!("report kind `{}` takes exactly one --table", kind.as_str())));
        }
        if let Some(label) = a.model.first() {
            params.model_label = label.clone();
        }
        let mut text = emit_report_series(&tables[0], kind, &params)?;
        if has_aggregate(&tables[0]) {
            text.push_str(AGGREGATE_NOTE);
            text.push('\n');
        }
        text
    };
    let stdout = match &a.out {
        Some(path) => {
            write_file(path, &text)?;
            format!("wrote {}\n", path.display())
        }
        None => text,
    };
    Ok(Outcome::ok(stdout))
}
