mod output;
mod spec;

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use lossylqr_core::learning::{
    certify_ce_controller, estimate_loss_rate, hoeffding_delta, min_samples, ComplexityVariant,
};
use lossylqr_core::performance::{gap, gap_curve, GapStatus};
use lossylqr_core::simulator::{
    empirical_ms_decay, monte_carlo_cost, recommended_horizon, sample_channel, simulate_trajectory,
    InitialState, SimConfig,
};
use lossylqr_core::stability::{
    exact_ms_stable, lyapunov_stable, region_map, scalar_iff_stable, st_lower_bound,
    zero_sample_safe_q, RegionCriterion, ThresholdVariant,
};
use lossylqr_core::{
    ce_gain, critical_probability, dare_solve, mare_solve, Error, SymMatrix, SystemSpec,
};
use nalgebra::{DMatrix, DVector};
use serde_json::json;

use output::{emit, gnuplot_script, render_json, Cell, Manifest, Plot, Table};

/// LQR design, stability certification, and simulation over a Bernoulli packet-loss channel.
#[derive(Parser)]
#[command(name = "lossylqr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// System spec: JSON object with keys A, B, Q, R (rows as inner arrays).
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Write output here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write a gnuplot script next to the CSV given by --out.
    #[arg(long, global = true)]
    gnuplot: bool,
    /// Worker threads for grid evaluation and Monte Carlo.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(long, global = true, env = "LOSSYLQR_SEED", default_value_t = 0)]
    seed: u64,
    /// Grid step for curves and region maps.
    #[arg(long, global = true, default_value_t = 0.005)]
    step: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the modified Riccati equation at --q, or the standard one without it.
    Solve {
        #[arg(long)]
        q: Option<f64>,
    },
    /// Critical loss probability.
    Qc,
    /// Certainty-equivalent gain designed at --qhat.
    Synth {
        #[arg(long)]
        qhat: f64,
    },
    /// Stability of the gain designed at --qhat under true loss rate --q.
    Check {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        qhat: f64,
        #[arg(long, value_enum, default_value_t = CheckMethod::All)]
        method: CheckMethod,
    },
    /// Stability-threshold lower bound at --q, its curve, or the zero-sample fixed point.
    Threshold {
        #[arg(long, value_enum, default_value_t = VariantArg::General)]
        variant: VariantArg,
        #[arg(long, conflicts_with = "fixed_point")]
        q: Option<f64>,
        #[arg(long)]
        fixed_point: bool,
    },
    /// Hoeffding radius, sample-complexity bound, or a simulated channel estimate.
    Samples {
        /// Sample count for the Hoeffding radius.
        #[arg(long)]
        n: Option<u64>,
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
        /// Loss rate for the minimum sample count.
        #[arg(long)]
        q: Option<f64>,
        #[arg(long, value_enum, default_value_t = ComplexityArg::General)]
        variant: ComplexityArg,
        /// Stability threshold for --variant from-threshold.
        #[arg(long)]
        delta_bar: Option<f64>,
        /// Draw this many channel samples at --true-q and estimate the loss rate.
        #[arg(long, requires = "true_q")]
        draw: Option<usize>,
        #[arg(long)]
        true_q: Option<f64>,
    },
    /// Certify the gain designed at --qhat from --n channel samples.
    Certify {
        #[arg(long)]
        qhat: f64,
        #[arg(long)]
        n: u64,
        #[arg(long, default_value_t = 0.01)]
        beta: f64,
    },
    /// Optimality gap of the gain designed at --qhat, or its curve over q̂.
    Gap {
        #[arg(long)]
        q: f64,
        #[arg(long, required_unless_present = "curve")]
        qhat: Option<f64>,
        /// Initial state, comma separated (defaults to all ones).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Vec<f64>,
        #[arg(long)]
        curve: bool,
    },
    /// Closed-loop simulation of the gain designed at --qhat under loss rate --q.
    Simulate {
        #[arg(long)]
        q: f64,
        #[arg(long)]
        qhat: f64,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Vec<f64>,
        /// Gaussian initial-state covariance, row-major; --x0 is then the mean.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0_cov: Vec<f64>,
        #[arg(long, default_value_t = 200)]
        horizon: usize,
        #[arg(long, default_value_t = 10_000)]
        trajectories: usize,
        #[arg(long, value_enum, default_value_t = SimMode::Cost)]
        mode: SimMode,
    },
    /// Classify the (q, q̂) grid by a stability criterion.
    Regions {
        #[arg(long, value_enum, default_value_t = RegionArg::Lyapunov)]
        criterion: RegionArg,
    },
    /// Minimum sample counts over a q grid for every applicable bound.
    ComplexityCurve {
        #[arg(long, default_value_t = 0.1)]
        beta: f64,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Solve { .. } => "solve",
            Self::Qc => "qc",
            Self::Synth { .. } => "synth",
            Self::Check { .. } => "check",
            Self::Threshold { .. } => "threshold",
            Self::Samples { .. } => "samples",
            Self::Certify { .. } => "certify",
            Self::Gap { .. } => "gap",
            Self::Simulate { .. } => "simulate",
            Self::Regions { .. } => "regions",
            Self::ComplexityCurve { .. } => "complexity-curve",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CheckMethod {
    Scalar,
    Lyapunov,
    Exact,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    General,
    Scalar,
    #[value(name = "invertible_b", alias = "invertible-b")]
    InvertibleB,
}

impl From<VariantArg> for ThresholdVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::General => Self::General,
            VariantArg::Scalar => Self::Scalar,
            VariantArg::InvertibleB => Self::InvertibleB,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ComplexityArg {
    #[value(name = "from_threshold", alias = "from-threshold")]
    FromThreshold,
    General,
    Scalar,
    #[value(name = "invertible_b", alias = "invertible-b")]
    InvertibleB,
}

impl From<ComplexityArg> for ComplexityVariant {
    fn from(v: ComplexityArg) -> Self {
        match v {
            ComplexityArg::FromThreshold => Self::FromThreshold,
            ComplexityArg::General => Self::General,
            ComplexityArg::Scalar => Self::Scalar,
            ComplexityArg::InvertibleB => Self::InvertibleB,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RegionArg {
    #[value(name = "scalar_iff", alias = "scalar-iff")]
    ScalarIff,
    Lyapunov,
    General,
    Scalar,
    #[value(name = "invertible_b", alias = "invertible-b")]
    InvertibleB,
}

impl From<RegionArg> for RegionCriterion {
    fn from(v: RegionArg) -> Self {
        match v {
            RegionArg::ScalarIff => Self::ScalarIff,
            RegionArg::Lyapunov => Self::Lyapunov,
            RegionArg::General => Self::Threshold(ThresholdVariant::General),
            RegionArg::Scalar => Self::Threshold(ThresholdVariant::Scalar),
            RegionArg::InvertibleB => Self::Threshold(ThresholdVariant::InvertibleB),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SimMode {
    Trajectory,
    Cost,
    Decay,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Input(String),
    /// Loss rate outside the admissible range.
    Range(String),
    Core(Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Input(m) | Self::Range(m) => f.write_str(m),
            Self::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            Self::Core(Error::NoSolution { .. } | Error::Unstable { .. }) => 2,
            _ => 1,
        }
    }

    fn wants_bracket(&self) -> bool {
        matches!(self, Self::Range(_) | Self::Core(Error::NoSolution { .. }))
    }
}

enum Rendered {
    Json(serde_json::Value),
    Csv(Table, Plot),
}

struct Context<'a> {
    cli: &'a Cli,
    spec: Option<spec::LoadedSpec>,
}

impl Context<'_> {
    fn sys(&self) -> Result<&SystemSpec, CliError> {
        self.spec
            .as_ref()
            .map(|s| &s.system)
            .ok_or_else(|| CliError::Usage(format!("{} needs --spec", self.cli.command.name())))
    }

    fn spec_name(&self) -> Option<&str> {
        self.spec.as_ref().and_then(|s| s.name.as_deref())
    }

    fn grid(&self, limit: f64) -> Result<Vec<f64>, CliError> {
        let step = self.cli.step;
        if !(step > 0.0 && step <= 0.1) {
            return Err(CliError::Usage(format!("--step {step} must lie in (0, 0.1]")));
        }
        Ok((0..)
            .map(|i| i as f64 * step)
            .take_while(|&q| q < limit)
            .collect())
    }
}

fn loss_rate(name: &str, q: f64) -> Result<f64, CliError> {
    if (0.0..1.0).contains(&q) {
        Ok(q)
    } else {
        Err(CliError::Range(format!("--{name} {q} must lie in [0, 1)")))
    }
}

fn initial_vector(x0: &[f64], n: usize) -> Result<DVector<f64>, CliError> {
    match x0.len() {
        0 => Ok(DVector::from_element(n, 1.0)),
        len if len == n => Ok(DVector::from_column_slice(x0)),
        len => Err(CliError::Usage(format!("--x0 has {len} entries, system has n = {n}"))),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).expect("serializable")
}

fn run_solve(ctx: &Context, q: Option<f64>) -> Result<Rendered, CliError> {
    let sys = ctx.sys()?;
    let sol = match q {
        Some(q) => mare_solve(sys, loss_rate("q", q)?)?,
        None => dare_solve(sys)?,
    };
    Ok(Rendered::Json(to_json(&sol)))
}

fn run_qc(ctx: &Context) -> Result<Rendered, CliError> {
    let qc = critical_probability(ctx.sys()?)?;
    let mut v = to_json(&qc);
    v["estimate"] = json!(qc.estimate());
    Ok(Rendered::Json(v))
}

fn run_synth(ctx: &Context, qhat: f64) -> Result<Rendered, CliError> {
    let (gain, sol) = ce_gain(ctx.sys()?, loss_rate("qhat", qhat)?)?;
    Ok(Rendered::Json(json!({ "gain": gain, "riccati": sol })))
}

fn run_check(ctx: &Context, q: f64, qhat: f64, method: CheckMethod) -> Result<Rendered, CliError> {
    let sys = ctx.sys()?;
    let (q, qhat) = (loss_rate("q", q)?, loss_rate("qhat", qhat)?);
    let mut verdicts = serde_json::Map::new();
    let all = matches!(method, CheckMethod::All);
    if matches!(method, CheckMethod::Scalar) || (all && sys.is_scalar()) {
        verdicts.insert("scalar_iff".into(), to_json(&scalar_iff_stable(sys, q, qhat)?));
    }
    if all || matches!(method, CheckMethod::Lyapunov) {
        verdicts.insert("lyapunov".into(), to_json(&lyapunov_stable(sys, q, qhat)?));
    }
    if all || matches!(method, CheckMethod::Exact) {
        let (gain, _) = ce_gain(sys, qhat)?;
        verdicts.insert("exact".into(), to_json(&exact_ms_stable(sys, &gain, q)?));
    }
    Ok(Rendered::Json(json!({ "q": q, "q_hat": qhat, "verdicts": verdicts })))
}

fn run_threshold(ctx: &Context, variant: ThresholdVariant, q: Option<f64>, fixed_point: bool) -> Result<Rendered, CliError> {
    let sys = ctx.sys()?;
    if fixed_point {
        return Ok(Rendered::Json(to_json(&zero_sample_safe_q(sys, variant)?)));
    }
    if let Some(q) = q {
        return Ok(Rendered::Json(to_json(&st_lower_bound(sys, loss_rate("q", q)?, variant)?)));
    }
    let qc = critical_probability(sys)?.lower.min(1.0);
    let mut table = Table::new(&["q", "bound", "clamped"]);
    for q in ctx.grid(qc)? {
        match st_lower_bound(sys, q, variant) {
            Ok(r) => table.push(vec![q.into(), r.bound.into(), Cell::Int(u64::from(r.clamped))]),
            Err(Error::NoSolution { .. }) => continue,
            Err(e) => return Err(e.into()),
        }
    }
    let plot = Plot {
        title: format!("stability threshold bound ({})", variant.name()),
        xlabel: "q".into(),
        ylabel: "bound".into(),
        logscale_y: false,
        series: vec!["$csv using 1:2 with lines".into(), "$csv using 1:1 with lines dashtype 2 title 'q'".into()],
    };
    Ok(Rendered::Csv(table, plot))
}

#[allow(clippy::too_many_arguments)]
fn run_samples(
    ctx: &Context,
    n: Option<u64>,
    beta: f64,
    q: Option<f64>,
    variant: ComplexityArg,
    delta_bar: Option<f64>,
    draw: Option<usize>,
    true_q: Option<f64>,
) -> Result<Rendered, CliError> {
    let mut out = serde_json::Map::new();
    if let Some(n) = n {
        out.insert("hoeffding".into(), json!({ "n": n, "beta": beta, "delta": hoeffding_delta(n, beta)? }));
    }
    if let Some(q) = q {
        let rep = min_samples(ctx.sys()?, loss_rate("q", q)?, beta, variant.into(), delta_bar)?;
        out.insert("min_samples".into(), to_json(&rep));
    }
    if let (Some(draw), Some(true_q)) = (draw, true_q) {
        let samples = sample_channel(true_q, draw, ctx.cli.seed)?;
        let q_hat = estimate_loss_rate(&samples)?;
        let delta = hoeffding_delta(draw as u64, beta)?;
        out.insert(
            "channel".into(),
            json!({
                "n": draw,
                "drops": samples.drops(),
                "q_hat": q_hat,
                "beta": beta,
                "delta": delta,
                "interval": [(q_hat - delta).max(0.0), (q_hat + delta).min(1.0)],
            }),
        );
    }
    if out.is_empty() {
        return Err(CliError::Usage("samples needs --n, --q, or --draw with --true-q".into()));
    }
    Ok(Rendered::Json(serde_json::Value::Object(out)))
}

fn run_certify(ctx: &Context, qhat: f64, n: u64, beta: f64) -> Result<Rendered, CliError> {
    let cert = certify_ce_controller(ctx.sys()?, loss_rate("qhat", qhat)?, n, beta)?;
    Ok(Rendered::Json(to_json(&cert)))
}

fn run_gap(ctx: &Context, q: f64, qhat: Option<f64>, x0: &[f64], curve: bool) -> Result<Rendered, CliError> {
    let sys = ctx.sys()?;
    let q = loss_rate("q", q)?;
    let x0m = SymMatrix::outer(&initial_vector(x0, sys.n())?);
    if !curve {
        let qhat = loss_rate("qhat", qhat.expect("required by clap"))?;
        return Ok(Rendered::Json(to_json(&gap(sys, q, qhat, &x0m)?)));
    }
    // A refused true rate is reported as such, not as a curve of failures.
    mare_solve(sys, q)?;
    let qc = critical_probability(sys)?.lower.min(1.0);
    let rows = gap_curve(sys, q, &x0m, &ctx.grid(qc)?)?;
    let mut table = Table::new(&["q_hat", "status", "gap", "bound", "rho"]);
    for row in rows {
        let cells = match row.status {
            GapStatus::Stable { gap, bound } => vec!["stable".into(), gap.into(), bound.into(), Cell::Empty],
            GapStatus::Unstable { rho } => vec!["unstable".into(), Cell::Empty, Cell::Empty, rho.into()],
            GapStatus::NoSolution => vec!["no_solution".into(), Cell::Empty, Cell::Empty, Cell::Empty],
        };
        let mut full = vec![row.q_hat.into()];
        full.extend(cells);
        table.push(full);
    }
    let plot = Plot {
        title: format!("optimality gap at q = {q}"),
        xlabel: "q_hat".into(),
        ylabel: "gap".into(),
        logscale_y: false,
        series: vec![
            "$csv using 1:3 with linespoints pt 7 ps 0.4".into(),
            "$csv using 1:4 with lines dashtype 2".into(),
        ],
    };
    Ok(Rendered::Csv(table, plot))
}

#[allow(clippy::too_many_arguments)]
fn run_simulate(
    ctx: &Context,
    q: f64,
    qhat: f64,
    x0: &[f64],
    x0_cov: &[f64],
    horizon: usize,
    trajectories: usize,
    mode: SimMode,
) -> Result<Rendered, CliError> {
    let sys = ctx.sys()?;
    if !(0.0..=1.0).contains(&q) {
        return Err(CliError::Range(format!("--q {q} must lie in [0, 1]")));
    }
    let (gain, _) = ce_gain(sys, loss_rate("qhat", qhat)?)?;
    let n = sys.n();
    let mean = initial_vector(x0, n)?;
    let init = if x0_cov.is_empty() {
        InitialState::Fixed(mean.clone())
    } else if x0_cov.len() == n * n {
        InitialState::Gaussian {
            mean: mean.clone(),
            cov: SymMatrix::new(DMatrix::from_row_slice(n, n, x0_cov))?,
        }
    } else {
        return Err(CliError::Usage(format!("--x0-cov needs {} entries", n * n)));
    };
    let cfg = SimConfig::new(ctx.cli.seed, horizon, trajectories)?;
    match mode {
        SimMode::Trajectory => {
            if !x0_cov.is_empty() {
                return Err(CliError::Usage("--mode trajectory takes a fixed --x0".into()));
            }
            let traj = simulate_trajectory(sys, &gain, q, &mean, &cfg)?;
            let mut header = vec!["t".to_string()];
            header.extend((1..=n).map(|i| format!("x{i}")));
            header.push("lambda".into());
            let mut table = Table {
                header,
                rows: Vec::new(),
            };
            for (t, state) in traj.states.iter().enumerate() {
                let mut row = vec![Cell::Int(t as u64)];
                row.extend(state.iter().map(|&v| Cell::Num(v)));
                row.push(traj.drops.get(t).map_or(Cell::Empty, |&d| Cell::Int(u64::from(d))));
                table.push(row);
            }
            let series = (1..=n)
                .map(|i| format!("$csv using 1:{} with lines", i + 1))
                .collect();
            let plot = Plot {
                title: format!("closed-loop trajectory, q = {q}, q_hat = {qhat}"),
                xlabel: "t".into(),
                ylabel: "state".into(),
                logscale_y: false,
                series,
            };
            Ok(Rendered::Csv(table, plot))
        }
        SimMode::Cost => {
            let est = monte_carlo_cost(sys, &gain, q, &init, &cfg)?;
            let x0m = init.second_moment();
            let exact = match lossylqr_core::performance::second_moment_sum(sys, &gain, q, &x0m) {
                Ok(s) => {
                    let stage = sys.q().as_matrix() + gain.k.transpose() * sys.r().as_matrix() * &gain.k * (1.0 - q);
                    Some((stage * s.as_matrix()).trace())
                }
                Err(Error::Unstable { .. }) => None,
                Err(e) => return Err(e.into()),
            };
            let mut v = to_json(&est);
            v["exact_cost"] = json!(exact);
            v["recommended_horizon"] = json!(recommended_horizon(sys, &gain, q, &init)?);
            v["truncation_note"] = json!(cfg.truncation_note);
            Ok(Rendered::Json(v))
        }
        SimMode::Decay => Ok(Rendered::Json(to_json(&empirical_ms_decay(sys, &gain, q, &init, &cfg)?))),
    }
}

fn run_regions(ctx: &Context, criterion: RegionCriterion) -> Result<Rendered, CliError> {
    let map = region_map(ctx.sys()?, ctx.cli.step, criterion, ctx.cli.workers)?;
    let mut table = Table::new(&["q", "q_hat", "class", "rho"]);
    for c in &map.cells {
        table.push(vec![c.q.into(), c.q_hat.into(), c.class.name().into(), c.rho.into()]);
    }
    let layer = |class: &str, color: &str, title: &str| {
        format!("$csv using 1:(strcol(3) eq '{class}' ? $2 : 1/0) with points pt 5 ps 0.3 lc rgb '{color}' title '{title}'")
    };
    let plot = Plot {
        title: format!("stability regions ({})", criterion.name()),
        xlabel: "q".into(),
        ylabel: "q_hat".into(),
        logscale_y: false,
        series: vec![
            layer("blue", "blue", "certified stabilizing"),
            layer("red", "red", "destabilizing"),
            layer("gray", "gray", "stabilizing, not certified"),
        ],
    };
    Ok(Rendered::Csv(table, plot))
}

fn run_complexity_curve(ctx: &Context, beta: f64) -> Result<Rendered, CliError> {
    let sys = ctx.sys()?;
    let mut variants = vec![ComplexityVariant::General];
    if sys.is_scalar() {
        variants.push(ComplexityVariant::Scalar);
    }
    if sys.n() == sys.m() && st_lower_bound(sys, 0.0, ThresholdVariant::InvertibleB).is_ok() {
        variants.push(ComplexityVariant::InvertibleB);
    }
    let names: Vec<&str> = variants
        .iter()
        .map(|v| match v {
            ComplexityVariant::General => "general",
            ComplexityVariant::Scalar => "scalar",
            ComplexityVariant::InvertibleB => "invertible_b",
            ComplexityVariant::FromThreshold => "from_threshold",
        })
        .collect();
    let mut header = vec!["q"];
    header.extend(&names);
    let mut table = Table::new(&header);
    let qc = critical_probability(sys)?.lower.min(1.0);
    for q in ctx.grid(qc)? {
        let mut row = vec![Cell::Num(q)];
        for &v in &variants {
            match min_samples(sys, q, beta, v, None) {
                Ok(r) => row.push(r.min_n.into()),
                Err(Error::NoSolution { .. }) => row.push(Cell::Empty),
                Err(e) => return Err(e.into()),
            }
        }
        table.push(row);
    }
    let plot = Plot {
        title: format!("minimum channel samples, beta = {beta}"),
        xlabel: "q".into(),
        ylabel: "N".into(),
        logscale_y: true,
        series: (0..variants.len())
            .map(|i| format!("$csv using 1:{} with lines", i + 2))
            .collect(),
    };
    Ok(Rendered::Csv(table, plot))
}

fn dispatch(ctx: &Context) -> Result<Rendered, CliError> {
    match &ctx.cli.command {
        Command::Solve { q } => run_solve(ctx, *q),
        Command::Qc => run_qc(ctx),
        Command::Synth { qhat } => run_synth(ctx, *qhat),
        Command::Check { q, qhat, method } => run_check(ctx, *q, *qhat, *method),
        Command::Threshold { variant, q, fixed_point } => run_threshold(ctx, (*variant).into(), *q, *fixed_point),
        Command::Samples {
            n,
            beta,
            q,
            variant,
            delta_bar,
            draw,
            true_q,
        } => run_samples(ctx, *n, *beta, *q, *variant, *delta_bar, *draw, *true_q),
        Command::Certify { qhat, n, beta } => run_certify(ctx, *qhat, *n, *beta),
        Command::Gap { q, qhat, x0, curve } => run_gap(ctx, *q, *qhat, x0, *curve),
        Command::Simulate {
            q,
            qhat,
            x0,
            x0_cov,
            horizon,
            trajectories,
            mode,
        } => run_simulate(ctx, *q, *qhat, x0, x0_cov, *horizon, *trajectories, *mode),
        Command::Regions { criterion } => run_regions(ctx, (*criterion).into()),
        Command::ComplexityCurve { beta } => run_complexity_curve(ctx, *beta),
    }
}

fn gnuplot_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".gp");
    out.with_file_name(name)
}

fn run(cli: &Cli, manifest: &Manifest, ctx: &mut Context) -> Result<(), CliError> {
    if let Some(path) = &cli.spec {
        ctx.spec = Some(spec::load(path)?);
    }
    let rendered = match cli.workers {
        Some(0) => return Err(CliError::Usage("--workers must be at least 1".into())),
        Some(w) if !matches!(cli.command, Command::Regions { .. }) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| CliError::Input(format!("thread pool: {e}")))?
            .install(|| dispatch(ctx))?,
        _ => dispatch(ctx)?,
    };
    match rendered {
        Rendered::Json(mut value) => {
            if cli.gnuplot {
                return Err(CliError::Usage(format!("--gnuplot applies to CSV output, not {}", cli.command.name())));
            }
            if let (Some(name), Some(obj)) = (ctx.spec_name(), value.as_object_mut()) {
                obj.entry("system").or_insert_with(|| json!(name));
            }
            emit(&render_json(&value, manifest)?, cli.out.as_deref())
        }
        Rendered::Csv(table, plot) => {
            let script = match (cli.gnuplot, cli.out.as_deref()) {
                (false, _) => None,
                (true, None) => return Err(CliError::Usage("--gnuplot needs --out".into())),
                (true, Some(out)) => Some((gnuplot_path(out), gnuplot_script(&plot, out))),
            };
            emit(&table.render(manifest)?, cli.out.as_deref())?;
            if let Some((path, text)) = script {
                emit(&text, Some(&path))?;
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let started = Instant::now();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let manifest = Manifest {
        command: cli.command.name().to_string(),
        arguments: std::env::args().skip(1).collect(),
        seed: cli.seed,
        started,
    };
    let mut ctx = Context { cli: &cli, spec: None };
    match run(&cli, &manifest, &mut ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.wants_bracket() {
                if let Some(qc) = ctx.spec.as_ref().and_then(|s| critical_probability(&s.system).ok()) {
                    eprintln!(
                        "critical loss probability q_c lies in [{}, {}]; loss rates must stay below it",
                        output::fmt_num(qc.lower),
                        output::fmt_num(qc.upper)
                    );
                }
            }
            ExitCode::from(e.exit_code())
        }
    }
}
