//! Command-line front end: config ingestion, experiment orchestration and
//! artifact emission.
//!
//! Exit codes: 0 pass, 1 property failure, 2 usage or config error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::coeffs::{
    check_a1, check_a2, check_c2, check_h1_h4, CoefficientSystem, ConditionId, ConditionReport, SamplerConfig,
    SystemText, Verdict,
};
use crate::comparison::{run_order_experiment, write_psi_table, OrderSetup, TolPolicy};
use crate::drivers::{DriverPath, StreamKey, TimeGrid, WienerPath};
use crate::error::{Error, Result};
use crate::expr::{parse_with, Env, ExprContext};
use crate::gcalc::GBounds;
use crate::gexp::{estimate_gexp, refine_control, ControlFamily, FamilySpec, GExpEstimate};
use crate::segments::Segment;
use crate::solver::{solve, SolverOptions};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
    Both,
}

impl Format {
    fn csv(self) -> bool {
        matches!(self, Format::Csv | Format::Both)
    }

    fn json(self) -> bool {
        matches!(self, Format::Json | Format::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Functional {
    /// `B^j(T)`.
    Terminal,
    /// `B^j(T)²`.
    TerminalSquare,
    /// `⟨B⟩^{jj}(T)`.
    QvTerminal,
    /// `Y^j(T)` of system A started from its initial segment.
    TerminalY,
    /// `max_k B^j(t_k)`.
    RunningMax,
}

#[derive(Debug, Parser)]
#[command(name = "gnsfde", version, about = "G-NSFDE simulation and order-preservation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true, env = "G_NSFDE_THREADS")]
    pub threads: Option<usize>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub dt: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the condition checkers on systems A and B.
    Check(RunArgs),
    /// Run the order-preservation experiment.
    Compare(RunArgs),
    /// Estimate a G-expectation over the control family.
    Gexp {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_enum)]
        functional: Functional,
        /// 1-based component.
        #[arg(long, default_value_t = 1)]
        component: usize,
        /// Candidate budget for coordinate-ascent refinement of the argmax.
        #[arg(long, default_value_t = 0)]
        refine: usize,
    },
    /// Tabulate the smoothing family.
    Psi {
        #[arg(long, value_delimiter = ',', default_value = "1,2,8,64")]
        n: Vec<u32>,
        /// Explicit s values.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        s: Vec<f64>,
        /// `lo,hi,count` evenly spaced s values.
        #[arg(long, value_delimiter = ',', num_args = 1, allow_hyphen_values = true)]
        range: Vec<f64>,
    },
    /// Dump one pair of trajectories.
    Simulate {
        #[command(flatten)]
        run: RunArgs,
        /// Index into the control family.
        #[arg(long, default_value_t = 0)]
        control: usize,
        #[arg(long, default_value_t = 0)]
        sample: u64,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub sigma_low: f64,
    pub sigma_high: f64,
    pub m: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub r0: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub drift: Vec<String>,
    /// Per component, full or upper-triangular rows of `h^i`.
    pub h: Vec<Vec<Vec<String>>>,
    pub diffusion: Vec<Vec<String>>,
}

/// One expression in `t ∈ [−r0, 0]` per component.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    pub a: Vec<String>,
    pub b: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    #[serde(default = "default_conditions")]
    pub conditions: Vec<ConditionId>,
    #[serde(default = "default_pairs")]
    pub n_pairs: usize,
    #[serde(default = "default_amplitude")]
    pub amplitude: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub k_declared: Option<f64>,
    #[serde(default)]
    pub strict_eps: f64,
}

fn default_conditions() -> Vec<ConditionId> {
    use ConditionId::*;
    vec![H1, H2, H3, H4, A1, A2]
}

fn default_pairs() -> usize {
    2000
}

fn default_amplitude() -> f64 {
    2.0
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self {
            conditions: default_conditions(),
            n_pairs: default_pairs(),
            amplitude: default_amplitude(),
            seed: 0,
            k_declared: None,
            strict_eps: 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<PathBuf>,
    #[serde(default)]
    pub formats: Option<Format>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub bounds: BoundsConfig,
    pub grid: GridConfig,
    pub d: usize,
    /// Declared contraction constant of the shared neutral term.
    pub kappa: f64,
    pub neutral: Vec<String>,
    pub system_a: SystemConfig,
    pub system_b: SystemConfig,
    pub initial: InitialConfig,
    /// `None` selects the default family seeded by `master_seed`.
    #[serde(default)]
    pub family: Option<Vec<FamilySpec>>,
    pub n_samples: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub tol_policy: TolPolicy,
    /// `compare` passes iff the capacity is at most this.
    #[serde(default)]
    pub threshold: f64,
    #[serde(default)]
    pub checks: CheckConfig,
    #[serde(default)]
    pub outputs: OutputConfig,
}

/// A validated, fully built experiment.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub bounds: GBounds,
    pub grid: TimeGrid,
    pub sys_a: CoefficientSystem,
    pub sys_b: CoefficientSystem,
    pub init_a: Segment,
    pub init_b: Segment,
    pub family: ControlFamily,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(s) => Error::Config(format!("{}: {s}", path.display())),
            other => other,
        })
    }

    pub fn apply_overrides(&mut self, args: &RunArgs) {
        if let Some(s) = args.seed {
            self.master_seed = s;
        }
        if let Some(n) = args.samples {
            self.n_samples = n;
        }
        if let Some(dt) = args.dt {
            self.grid.dt = dt;
        }
    }

    fn system(&self, sc: &SystemConfig, bounds: GBounds, which: &str) -> Result<CoefficientSystem> {
        let text = SystemText {
            drift: sc.drift.iter().map(String::as_str).collect(),
            h: sc.h.iter().map(|c| c.iter().map(|r| r.iter().map(String::as_str).collect()).collect()).collect(),
            diffusion: sc.diffusion.iter().map(|r| r.iter().map(String::as_str).collect()).collect(),
            neutral: self.neutral.iter().map(String::as_str).collect(),
        };
        let sys = CoefficientSystem::from_text(self.d, bounds, self.grid.r0, &text, self.kappa)
            .map_err(|e| Error::Config(format!("system {which}: {e}")))?;
        sys.validate_grid(self.grid.dt).map_err(|e| Error::Config(format!("system {which}: {e}")))?;
        Ok(sys)
    }

    fn segment(&self, exprs: &[String], grid: &TimeGrid, which: &str) -> Result<Segment> {
        if exprs.len() != self.d {
            return Err(Error::Config(format!("initial.{which} needs {} expressions, got {}", self.d, exprs.len())));
        }
        let ctx = ExprContext { d: self.d, r0: self.grid.r0, dt: None, allow_reads: false, allow_z: false };
        let parsed = exprs
            .iter()
            .map(|s| parse_with(s, &ctx).map_err(|e| Error::Config(format!("initial.{which} '{s}': {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Segment::from_fn(self.d, grid.delay_steps, grid.dt, |s, i| parsed[i].eval(&Env::time_only(s)))
            .map_err(|e| Error::Config(format!("initial.{which}: {e}")))
    }

    pub fn build(&self) -> Result<Experiment> {
        let b = &self.bounds;
        let bounds = GBounds::new(b.sigma_low, b.sigma_high, b.m).map_err(|e| Error::Config(e.to_string()))?;
        let grid = TimeGrid::from_horizon(self.grid.dt, self.grid.horizon, self.grid.r0)
            .map_err(|e| Error::Config(format!("grid: {e}")))?;
        if self.n_samples == 0 {
            return Err(Error::Config("n_samples must be >= 1".into()));
        }
        let sys_a = self.system(&self.system_a, bounds, "a")?;
        let sys_b = self.system(&self.system_b, bounds, "b")?;
        let init_a = self.segment(&self.initial.a, &grid, "a")?;
        let init_b = self.segment(&self.initial.b, &grid, "b")?;
        let family = match &self.family {
            Some(specs) => ControlFamily::from_specs(specs, &grid, &bounds),
            None => ControlFamily::default_family(&grid, &bounds, self.master_seed),
        }
        .map_err(|e| Error::Config(format!("family: {e}")))?;
        if family.is_empty() {
            return Err(Error::Config("control family is empty".into()));
        }
        Ok(Experiment { config: self.clone(), bounds, grid, sys_a, sys_b, init_a, init_b, family })
    }
}

impl Experiment {
    pub fn sampler(&self) -> SamplerConfig {
        let c = &self.config.checks;
        SamplerConfig { k_declared: c.k_declared, ..SamplerConfig::new(c.n_pairs, c.amplitude, c.seed, self.grid.dt) }
    }

    /// Requested condition reports, in the order requested.
    pub fn run_checks(&self) -> Result<Vec<ConditionReport>> {
        let (a, b, s, t) = (&self.sys_a, &self.sys_b, self.sampler(), self.grid.horizon());
        let wanted = &self.config.checks.conditions;
        let mut pool: Vec<ConditionReport> = Vec::new();
        if wanted.iter().any(|c| matches!(c, ConditionId::H1 | ConditionId::H2 | ConditionId::H3 | ConditionId::H4)) {
            pool.extend(check_h1_h4(a, b, &s, t)?);
        }
        if wanted.contains(&ConditionId::A1) {
            pool.push(check_a1(a, b, &s, t, self.config.checks.strict_eps)?);
        }
        if wanted.contains(&ConditionId::A2) {
            pool.push(check_a2(a, b, &s, t)?);
        }
        if wanted.contains(&ConditionId::C2) {
            pool.push(check_c2(a, b, &s, t)?);
        }
        Ok(wanted.iter().filter_map(|id| pool.iter().find(|r| r.id == *id).cloned()).collect())
    }

    pub fn order_setup(&self) -> OrderSetup<'_> {
        OrderSetup {
            scenario: &self.config.name,
            sys_a: &self.sys_a,
            sys_b: &self.sys_b,
            init_a: &self.init_a,
            init_b: &self.init_b,
            family: &self.family,
            n_samples: self.config.n_samples,
            grid: self.grid,
            master_seed: self.config.master_seed,
            tol: self.config.tol_policy,
            solver: SolverOptions::default(),
        }
    }

    pub fn gexp(&self, functional: Functional, component: usize) -> Result<GExpEstimate> {
        let j = component
            .checked_sub(1)
            .ok_or_else(|| Error::Config("component is 1-based".into()))?;
        let limit = if functional == Functional::TerminalY { self.sys_a.d } else { self.bounds.dim };
        if j >= limit {
            return Err(Error::Config(format!("component {component} out of range 1..={limit}")));
        }
        let f = self.functional(functional, j);
        estimate_gexp(&*f, &self.family, self.config.n_samples, &self.grid, self.config.master_seed)
    }

    #[allow(clippy::type_complexity)]
    fn functional(&self, which: Functional, j: usize) -> Box<dyn Fn(&DriverPath) -> Result<f64> + Sync + '_> {
        match which {
            Functional::Terminal => Box::new(move |d| Ok(d.b_terminal(j))),
            Functional::TerminalSquare => Box::new(move |d| Ok(d.b_terminal(j).powi(2))),
            Functional::QvTerminal => Box::new(move |d| Ok(d.qv_terminal().get(j, j))),
            Functional::RunningMax => Box::new(move |d| {
                let (mut b, mut best) = (0.0_f64, 0.0_f64);
                for k in 0..d.grid.steps {
                    b += d.db_at(k)[j];
                    best = best.max(b);
                }
                Ok(best)
            }),
            Functional::TerminalY => Box::new(move |d| {
                Ok(solve(&self.sys_a, &self.init_a, d, &SolverOptions::default())?.terminal()[j])
            }),
        }
    }

    pub fn output_dir(&self, cli_out: Option<&Path>) -> PathBuf {
        cli_out
            .map(Path::to_path_buf)
            .or_else(|| self.config.outputs.dir.clone())
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn write_file(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let p = dir.join(name);
    fs::write(&p, bytes)?;
    Ok(p)
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.6e}"))
}

fn verdict_str(v: Verdict) -> &'static str {
    match v {
        Verdict::Pass => "pass",
        Verdict::Fail => "fail",
        Verdict::Inconclusive => "inconclusive",
    }
}

struct Ctx<'a> {
    out: Option<&'a Path>,
    format: Option<Format>,
    stdout: &'a mut dyn Write,
}

impl Ctx<'_> {
    fn format(&self, exp: &Experiment) -> Format {
        self.format.or(exp.config.outputs.formats).unwrap_or(Format::Both)
    }
}

fn load(args: &RunArgs) -> Result<Experiment> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.apply_overrides(args);
    cfg.build()
}

fn cmd_check(args: &RunArgs, ctx: &mut Ctx<'_>) -> Result<i32> {
    let exp = load(args)?;
    let reports = exp.run_checks()?;
    let w = &mut *ctx.stdout;
    writeln!(w, "{:<4} {:<13} {:>14} {:>14} {:>8}  note", "id", "verdict", "margin", "statistic", "samples")?;
    for r in &reports {
        writeln!(
            w,
            "{:<4} {:<13} {:>14} {:>14.6e} {:>8}  {}",
            format!("{:?}", r.id),
            verdict_str(r.verdict),
            fmt_opt(r.margin),
            r.statistic,
            r.samples,
            r.note
        )?;
    }
    let (dir, fmt) = (exp.output_dir(ctx.out), ctx.format(&exp));
    if fmt.json() {
        write_file(&dir, "check.json", &json_bytes(&reports)?)?;
    }
    if fmt.csv() {
        let mut wr = csv::Writer::from_writer(Vec::new());
        wr.write_record(["id", "verdict", "margin", "statistic", "samples", "strict"])?;
        for r in &reports {
            wr.write_record([
                format!("{:?}", r.id),
                verdict_str(r.verdict).to_string(),
                r.margin.map(|m| m.to_string()).unwrap_or_default(),
                r.statistic.to_string(),
                r.samples.to_string(),
                r.strict.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = wr.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        write_file(&dir, "check.csv", &bytes)?;
    }
    Ok(if reports.iter().all(|r| r.verdict == Verdict::Pass) { EXIT_PASS } else { EXIT_FAIL })
}

fn cmd_compare(args: &RunArgs, ctx: &mut Ctx<'_>) -> Result<i32> {
    let exp = load(args)?;
    let report = run_order_experiment(&exp.order_setup())?;
    let (dir, fmt) = (exp.output_dir(ctx.out), ctx.format(&exp));
    if fmt.json() {
        write_file(&dir, "order_report.json", &json_bytes(&report)?)?;
    }
    if fmt.csv() {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_file(&dir, "order_samples.csv", &buf)?;
    }
    let w = &mut *ctx.stdout;
    writeln!(w, "scenario {}: {} controls x {} samples, dt {}", report.scenario, report.per_control.len(), report.n_samples, report.dt)?;
    writeln!(
        w,
        "capacity {:.6} (control {}: {})",
        report.capacity, report.argmax_control, report.per_control[report.argmax_control].label
    )?;
    writeln!(w, "max excess {:.6e}, neutral-adjusted {:.6e}, max tolerance {:.6e}", report.max_excess, report.max_excess_n, report.max_tol)?;
    writeln!(
        w,
        "hitting times: both observed {}, ordering violations {}, solver failures {}",
        report.both_observed, report.ordering_violations, report.solver_failures
    )?;
    let pass = report.capacity <= exp.config.threshold;
    writeln!(w, "{} (threshold {})", if pass { "pass" } else { "fail" }, exp.config.threshold)?;
    Ok(if pass { EXIT_PASS } else { EXIT_FAIL })
}

fn cmd_gexp(args: &RunArgs, functional: Functional, component: usize, refine: usize, ctx: &mut Ctx<'_>) -> Result<i32> {
    let exp = load(args)?;
    let mut est = exp.gexp(functional, component)?;
    if refine > 0 {
        let f = exp.functional(functional, component - 1);
        est = refine_control(&est, &*f, &exp.grid, &exp.bounds, refine)?;
    }
    let (dir, fmt) = (exp.output_dir(ctx.out), ctx.format(&exp));
    if fmt.json() {
        write_file(&dir, "gexp.json", &json_bytes(&est)?)?;
    }
    if fmt.csv() {
        let mut wr = csv::Writer::from_writer(Vec::new());
        wr.write_record(["control", "label", "mean", "std_error", "n_samples"])?;
        for (c, s) in est.per_control.iter().enumerate() {
            wr.write_record([c.to_string(), s.label.clone(), s.mean.to_string(), s.std_error.to_string(), s.n_samples.to_string()])?;
        }
        let bytes = wr.into_inner().map_err(|e| Error::Io(e.to_string()))?;
        write_file(&dir, "gexp_controls.csv", &bytes)?;
    }
    writeln!(ctx.stdout, "estimate {:.6} (argmax {}: {})", est.value, est.argmax, est.argmax_label)?;
    Ok(EXIT_PASS)
}

fn psi_grid(s: &[f64], range: &[f64]) -> Result<Vec<f64>> {
    let mut grid = s.to_vec();
    match range {
        [] => {}
        [lo, hi, count] => {
            if !(count.fract() == 0.0 && *count >= 1.0 && lo <= hi) {
                return Err(Error::InvalidArgument("--range needs lo <= hi and an integer count >= 1".into()));
            }
            let n = *count as usize;
            grid.extend((0..n).map(|j| if n == 1 { *lo } else { lo + (hi - lo) * j as f64 / (n - 1) as f64 }));
        }
        _ => return Err(Error::InvalidArgument("--range takes lo,hi,count".into())),
    }
    Ok(grid)
}

fn cmd_psi(n: &[u32], s: &[f64], range: &[f64], ctx: &mut Ctx<'_>) -> Result<i32> {
    let grid = psi_grid(s, range)?;
    match ctx.out {
        Some(dir) => {
            let mut buf = Vec::new();
            write_psi_table(n, &grid, &mut buf)?;
            write_file(dir, "psi.csv", &buf)?;
        }
        None => write_psi_table(n, &grid, &mut *ctx.stdout)?,
    }
    Ok(EXIT_PASS)
}

#[derive(Serialize)]
struct SimulateSummary<'a> {
    control: usize,
    label: &'a str,
    sample: u64,
    terminal_a: &'a [f64],
    terminal_b: &'a [f64],
    max_fp_iterations: usize,
    max_fp_residual: f64,
}

fn cmd_simulate(args: &RunArgs, control: usize, sample: u64, ctx: &mut Ctx<'_>) -> Result<i32> {
    let exp = load(args)?;
    let ctl = exp
        .family
        .members
        .get(control)
        .ok_or_else(|| Error::Config(format!("control {control} out of range 0..{}", exp.family.len())))?;
    let w = WienerPath::sample(exp.bounds.dim, &exp.grid, StreamKey { master_seed: exp.config.master_seed, sample_index: sample });
    let drv = DriverPath::from_wiener(&w, ctl)?;
    let opts = SolverOptions::default();
    let a = solve(&exp.sys_a, &exp.init_a, &drv, &opts)?;
    let b = solve(&exp.sys_b, &exp.init_b, &drv, &opts)?;
    let (dir, fmt) = (exp.output_dir(ctx.out), ctx.format(&exp));
    if fmt.csv() {
        for (name, t) in [("trajectory_a.csv", &a), ("trajectory_b.csv", &b)] {
            let mut buf = Vec::new();
            t.write_csv(&mut buf)?;
            write_file(&dir, name, &buf)?;
        }
    }
    let summary = SimulateSummary {
        control,
        label: &ctl.label,
        sample,
        terminal_a: a.terminal(),
        terminal_b: b.terminal(),
        max_fp_iterations: a.fp_iterations.iter().chain(&b.fp_iterations).copied().max().unwrap_or(0),
        max_fp_residual: a.max_fp_residual.max(b.max_fp_residual),
    };
    if fmt.json() {
        write_file(&dir, "simulate.json", &json_bytes(&summary)?)?;
    }
    writeln!(ctx.stdout, "terminal A {:?}, terminal B {:?}", summary.terminal_a, summary.terminal_b)?;
    Ok(EXIT_PASS)
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Result<i32> {
    let mut ctx = Ctx { out: cli.out.as_deref(), format: cli.format, stdout };
    match &cli.command {
        Command::Check(a) => cmd_check(a, &mut ctx),
        Command::Compare(a) => cmd_compare(a, &mut ctx),
        Command::Gexp { run, functional, component, refine } => cmd_gexp(run, *functional, *component, *refine, &mut ctx),
        Command::Psi { n, s, range } => cmd_psi(n, s, range, &mut ctx),
        Command::Simulate { run, control, sample } => cmd_simulate(run, *control, *sample, &mut ctx),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
            let _ = if code == EXIT_PASS { write!(stdout, "{e}") } else { write!(stderr, "{e}") };
            return code;
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            let _ = writeln!(stderr, "error: --threads must be >= 1");
            return EXIT_USAGE;
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_USAGE
        }
    }
}
