//! Order-preservation experiments on paired trajectories, hitting times,
//! the smoothing family `ψₙ`, the drift-gap diagnostic `H^i(t)`, drift
//! shifts and constant-control necessity probes.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::CoefficientSystem;
use crate::drivers::{constant_control, DriverPath, StreamKey, TimeGrid, WienerPath};
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::gcalc::{g_value, SymMatrix};
use crate::gexp::{pairwise_sum, wilson_interval, ControlFamily};
use crate::segments::{leq, leq_n, Segment};
use crate::solver::{check_shared, solve, PairTrajectory, SolverOptions, Trajectory};

/// `ψₙ`, a `C²` approximation of `s⁺` from below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsiFamily {
    n: u32,
}

impl PsiFamily {
    pub fn new(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("psi index n must be >= 1".into()));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    /// `(ψₙ(s), ψₙ'(s), ψₙ''(s))`.
    pub fn eval(&self, s: f64) -> (f64, f64, f64) {
        let n = self.n as f64;
        let n2 = n * n;
        let (half, one) = (0.5 / n, 1.0 / n);
        if s <= 0.0 {
            (0.0, 0.0, 0.0)
        } else if s <= half {
            (2.0 / 3.0 * n2 * s.powi(3), 2.0 * n2 * s * s, 4.0 * n2 * s)
        } else if s <= one {
            let u = s - one;
            (s - half - 2.0 / 3.0 * n2 * u.powi(3), 1.0 - 2.0 * n2 * u * u, -4.0 * n2 * u)
        } else {
            (s - half, 1.0, 0.0)
        }
    }
}

pub fn psi_eval(n: u32, s: f64) -> Result<(f64, f64, f64)> {
    Ok(PsiFamily::new(n)?.eval(s))
}

/// CSV rows `n, s, psi, dpsi, ddpsi` for every `n` and `s`.
pub fn write_psi_table<W: Write>(ns: &[u32], s_grid: &[f64], w: W) -> Result<()> {
    let fams = ns.iter().map(|&n| PsiFamily::new(n)).collect::<Result<Vec<_>>>()?;
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["n", "s", "psi", "dpsi", "ddpsi"])?;
    for f in &fams {
        for &s in s_grid {
            let (p, dp, ddp) = f.eval(s);
            wr.write_record([f.n.to_string(), s.to_string(), p.to_string(), dp.to_string(), ddp.to_string()])?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// `H^i(t_k) = b^i(t, Y^Z_t) − b̄^i(t, Ȳ_t) + 2G(h^i(t, Y^Z_t) − h̄^i(t, Ȳ_t))`,
/// where `Y^Z_t` lowers component `i` of `Y_t` by `(Y^{i,N} − Ȳ^{i,N})⁺`.
/// Points of the window before time 0 carry no neutral-adjusted values and
/// are left unshifted.
pub fn drift_gap(
    sys_a: &CoefficientSystem,
    sys_b: &CoefficientSystem,
    pair: &PairTrajectory,
    k: usize,
    i: usize,
) -> Result<f64> {
    let (a, b) = (&pair.a, &pair.b);
    if k > a.grid.steps {
        return Err(Error::OutOfRange { index: k, max: a.grid.steps });
    }
    if i >= sys_a.d {
        return Err(Error::OutOfRange { index: i, max: sys_a.d - 1 });
    }
    let mut yz = a.segment(k).to_owned();
    let l = yz.delay_steps;
    for row in 0..=l {
        if let Some(j) = (k + row).checked_sub(l) {
            let excess = (a.yn(j)[i] - b.yn(j)[i]).max(0.0);
            yz.set(row, i, yz.at(row, i) - excess);
        }
    }
    let t = a.grid.time(k);
    let va = sys_a.eval_system(t, yz.view())?;
    let vb = sys_b.eval_system(t, b.segment(k))?;
    Ok(va.b[i] - vb.b[i] + 2.0 * g_value(&va.h[i].sub(&vb.h[i]), &sys_a.bounds)?)
}

/// `b̄ ↦ b̄ + (ε, …, ε)`.
pub fn epsilon_shift(sys: &CoefficientSystem, eps: f64) -> Result<CoefficientSystem> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::InvalidArgument(format!("eps must be > 0, got {eps}")));
    }
    let drift = sys
        .drift()
        .iter()
        .map(|e| Expr::Add(Box::new(e.clone()), Box::new(Expr::Num(eps))))
        .collect();
    sys.with_drift(drift)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Running sup-norm of the pair, history included.
    RunningSup,
    /// Scale fixed at 1.
    Unit,
}

/// Violations count only beyond `c·√dt·scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TolPolicy {
    pub c: f64,
    #[serde(default = "default_scale_mode")]
    pub scale_mode: ScaleMode,
    /// Violations are counted on `(0, M]`; defaults to the horizon.
    #[serde(default)]
    pub horizon: Option<f64>,
}

fn default_scale_mode() -> ScaleMode {
    ScaleMode::RunningSup
}

impl Default for TolPolicy {
    fn default() -> Self {
        Self { c: 5.0, scale_mode: ScaleMode::RunningSup, horizon: None }
    }
}

impl TolPolicy {
    fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c >= 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance constant must be >= 0, got {}", self.c)));
        }
        if let Some(m) = self.horizon {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::InvalidArgument("violation horizon must be > 0".into()));
            }
        }
        Ok(())
    }
}

/// Per (control, sample) outcome. Steps are grid indices `k ≥ 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleRecord {
    pub control: usize,
    pub sample: usize,
    /// First step with `Y^i > Ȳ^i + tol` for some `i`.
    pub tau_step: Option<usize>,
    /// First step with `Y^{i,N} > Ȳ^{i,N} + tol` for some `i`.
    pub tau_n_step: Option<usize>,
    /// Untoleranced first crossings, used for the `τ_N ≤ τ` check.
    pub tau_exact: Option<usize>,
    pub tau_n_exact: Option<usize>,
    /// `max_{k,i} (Y^i − Ȳ^i)⁺`.
    pub max_excess: f64,
    /// `max_{k,i} (Y^{i,N} − Ȳ^{i,N})⁺`.
    pub max_excess_n: f64,
    /// Tolerance at the last counted step.
    pub tol: f64,
    pub solver_error: Option<String>,
}

impl SampleRecord {
    pub fn violated(&self) -> bool {
        self.tau_step.is_some() || self.tau_n_step.is_some()
    }

    /// `τ_N ≤ τ` fails: the raw order breaks before (or without) the
    /// neutral-adjusted one.
    pub fn ordering_violated(&self) -> bool {
        match (self.tau_exact, self.tau_n_exact) {
            (Some(t), Some(tn)) => tn > t,
            (Some(_), None) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlSummary {
    pub label: String,
    pub violations: usize,
    pub frequency: f64,
    pub wilson: (f64, f64),
    pub solver_failures: usize,
    pub max_excess: f64,
    pub max_excess_n: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderReport {
    pub scenario: String,
    pub tol_policy: TolPolicy,
    pub dt: f64,
    pub steps: usize,
    pub n_samples: usize,
    pub master_seed: u64,
    /// Largest per-control violation frequency.
    pub capacity: f64,
    pub argmax_control: usize,
    pub per_control: Vec<ControlSummary>,
    pub max_excess: f64,
    pub max_excess_n: f64,
    /// Largest tolerance applied anywhere.
    pub max_tol: f64,
    /// Samples where both exact hitting times were observed.
    pub both_observed: usize,
    /// Samples violating `τ_N ≤ τ`.
    pub ordering_violations: usize,
    pub solver_failures: usize,
    pub records: Vec<SampleRecord>,
}

impl OrderReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }

    /// One row per (control, sample).
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "control",
            "label",
            "sample",
            "tau_step",
            "tau_n_step",
            "tau_exact",
            "tau_n_exact",
            "max_excess",
            "max_excess_n",
            "tol",
            "solver_error",
        ])?;
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            wr.write_record([
                r.control.to_string(),
                self.per_control[r.control].label.clone(),
                r.sample.to_string(),
                opt(r.tau_step),
                opt(r.tau_n_step),
                opt(r.tau_exact),
                opt(r.tau_n_exact),
                r.max_excess.to_string(),
                r.max_excess_n.to_string(),
                r.tol.to_string(),
                r.solver_error.clone().unwrap_or_default(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Inputs of an order experiment.
#[derive(Debug, Clone)]
pub struct OrderSetup<'a> {
    pub scenario: &'a str,
    pub sys_a: &'a CoefficientSystem,
    pub sys_b: &'a CoefficientSystem,
    pub init_a: &'a Segment,
    pub init_b: &'a Segment,
    pub family: &'a ControlFamily,
    pub n_samples: usize,
    pub grid: TimeGrid,
    pub master_seed: u64,
    pub tol: TolPolicy,
    pub solver: SolverOptions,
}

/// Hitting-time statistics of one solved pair.
pub fn pair_statistics(a: &Trajectory, b: &Trajectory, tol: &TolPolicy) -> (SampleRecord, f64) {
    let (d, l, dt) = (a.d, a.grid.delay_steps, a.grid.dt);
    let last = match tol.horizon {
        Some(m) => ((m / dt + 1e-9).floor() as usize).min(a.grid.steps),
        None => a.grid.steps,
    };
    let factor = tol.c * dt.sqrt();
    let mut scale = match tol.scale_mode {
        ScaleMode::RunningSup => a.values[..(l + 1) * d]
            .iter()
            .chain(&b.values[..(l + 1) * d])
            .fold(0.0_f64, |m, v| m.max(v.abs())),
        ScaleMode::Unit => 1.0,
    };
    let mut rec = SampleRecord {
        control: 0,
        sample: 0,
        tau_step: None,
        tau_n_step: None,
        tau_exact: None,
        tau_n_exact: None,
        max_excess: 0.0,
        max_excess_n: 0.0,
        tol: factor * scale,
        solver_error: None,
    };
    let mut max_tol = 0.0_f64;
    for k in 1..=a.grid.steps {
        let (ya, yb, na, nb) = (a.y(k), b.y(k), a.yn(k), b.yn(k));
        if tol.scale_mode == ScaleMode::RunningSup {
            scale = ya.iter().chain(yb).fold(scale, |m, v| m.max(v.abs()));
        }
        let t = factor * scale;
        let ex = (0..d).map(|i| ya[i] - yb[i]).fold(f64::NEG_INFINITY, f64::max);
        let exn = (0..d).map(|i| na[i] - nb[i]).fold(f64::NEG_INFINITY, f64::max);
        if ex > 0.0 && rec.tau_exact.is_none() {
            rec.tau_exact = Some(k);
        }
        if exn > 0.0 && rec.tau_n_exact.is_none() {
            rec.tau_n_exact = Some(k);
        }
        if k <= last {
            rec.tol = t;
            max_tol = max_tol.max(t);
            rec.max_excess = rec.max_excess.max(ex);
            rec.max_excess_n = rec.max_excess_n.max(exn);
            if ex > t && rec.tau_step.is_none() {
                rec.tau_step = Some(k);
            }
            if exn > t && rec.tau_n_step.is_none() {
                rec.tau_n_step = Some(k);
            }
        }
    }
    (rec, max_tol)
}

/// Runs every (control, sample) pair on common Wiener streams and estimates
/// the violation capacity as the largest per-control violation frequency.
pub fn run_order_experiment(setup: &OrderSetup<'_>) -> Result<OrderReport> {
    let OrderSetup { sys_a, sys_b, init_a, init_b, family, n_samples, grid, .. } = *setup;
    check_shared(sys_a, sys_b)?;
    setup.tol.validate()?;
    if n_samples == 0 || family.is_empty() {
        return Err(Error::InvalidArgument("need at least one control and one sample".into()));
    }
    if !leq_n(init_a, init_b, sys_a)? {
        return Err(Error::InitialOrder(format!(
            "initial segments must satisfy xi <=_N eta (xi <= eta pointwise: {})",
            leq(init_a, init_b)?
        )));
    }
    let n_controls = family.len();
    let m = sys_a.m;
    let outcomes: Vec<(SampleRecord, f64)> = (0..n_controls * n_samples)
        .into_par_iter()
        .map(|idx| {
            let (c, s) = (idx / n_samples, idx % n_samples);
            let w = WienerPath::sample(m, &grid, StreamKey { master_seed: setup.master_seed, sample_index: s as u64 });
            let run = || -> Result<(SampleRecord, f64)> {
                let drv = DriverPath::from_wiener(&w, &family.members[c])?;
                let a = solve(sys_a, init_a, &drv, &setup.solver)?;
                let b = solve(sys_b, init_b, &drv, &setup.solver)?;
                Ok(pair_statistics(&a, &b, &setup.tol))
            };
            let (mut rec, t) = run().unwrap_or_else(|e| {
                (
                    SampleRecord {
                        control: 0,
                        sample: 0,
                        tau_step: None,
                        tau_n_step: None,
                        tau_exact: None,
                        tau_n_exact: None,
                        max_excess: 0.0,
                        max_excess_n: 0.0,
                        tol: 0.0,
                        solver_error: Some(e.to_string()),
                    },
                    0.0,
                )
            });
            rec.control = c;
            rec.sample = s;
            (rec, t)
        })
        .collect();

    let mut per_control = Vec::with_capacity(n_controls);
    let mut max_tol = 0.0_f64;
    for (c, chunk) in outcomes.chunks(n_samples).enumerate() {
        let violations = chunk.iter().filter(|(r, _)| r.violated()).count();
        let flags: Vec<f64> = chunk.iter().map(|(r, _)| if r.violated() { 1.0 } else { 0.0 }).collect();
        per_control.push(ControlSummary {
            label: family.members[c].label.clone(),
            violations,
            frequency: pairwise_sum(&flags) / n_samples as f64,
            wilson: wilson_interval(violations, n_samples),
            solver_failures: chunk.iter().filter(|(r, _)| r.solver_error.is_some()).count(),
            max_excess: chunk.iter().fold(0.0, |m, (r, _)| m.max(r.max_excess)),
            max_excess_n: chunk.iter().fold(0.0, |m, (r, _)| m.max(r.max_excess_n)),
        });
        max_tol = chunk.iter().fold(max_tol, |m, (_, t)| m.max(*t));
    }
    let mut argmax = 0;
    for (j, s) in per_control.iter().enumerate() {
        if s.frequency > per_control[argmax].frequency {
            argmax = j;
        }
    }
    let records: Vec<SampleRecord> = outcomes.into_iter().map(|(r, _)| r).collect();
    Ok(OrderReport {
        scenario: setup.scenario.to_string(),
        tol_policy: setup.tol,
        dt: grid.dt,
        steps: grid.steps,
        n_samples,
        master_seed: setup.master_seed,
        capacity: per_control[argmax].frequency,
        argmax_control: argmax,
        max_excess: per_control.iter().fold(0.0, |m, s| m.max(s.max_excess)),
        max_excess_n: per_control.iter().fold(0.0, |m, s| m.max(s.max_excess_n)),
        per_control,
        max_tol,
        both_observed: records.iter().filter(|r| r.tau_exact.is_some() && r.tau_n_exact.is_some()).count(),
        ordering_violations: records.iter().filter(|r| r.ordering_violated()).count(),
        solver_failures: records.iter().filter(|r| r.solver_error.is_some()).count(),
        records,
    })
}

/// Inputs of a constant-control necessity probe started at time `t0`.
#[derive(Debug, Clone)]
pub struct ProbeSetup<'a> {
    pub sys_a: &'a CoefficientSystem,
    pub sys_b: &'a CoefficientSystem,
    /// 0-based component with the boundary equality.
    pub component: usize,
    pub t0: f64,
    pub xi: &'a Segment,
    pub eta: &'a Segment,
    pub gamma: SymMatrix,
    pub n_samples: usize,
    /// Positive multiples of the segment grid spacing.
    pub s_values: Vec<f64>,
    pub master_seed: u64,
    pub solver: SolverOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SlopeEstimate {
    pub s: f64,
    /// Mean of `(Y^{i,N}(t0+s) − Ȳ^{i,N}(t0+s)) / s`.
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub component: usize,
    pub t0: f64,
    /// `b^i(t0,ξ) − b̄^i(t0,η) + ⟨h^i(t0,ξ) − h̄^i(t0,η), γ⟩`.
    pub direct: f64,
    /// Sorted by increasing `s`.
    pub slopes: Vec<SlopeEstimate>,
}

impl ProbeReport {
    /// Slope at the smallest `s`.
    pub fn trend(&self) -> f64 {
        self.slopes.first().map_or(f64::NAN, |s| s.mean)
    }
}

pub const BOUNDARY_TOL: f64 = 1e-10;

/// Estimates the right derivative at `t0` of the mean neutral-adjusted gap of
/// component `i` under the constant control `θ = √γ`, next to the direct
/// evaluation it converges to.
pub fn necessity_probe(setup: &ProbeSetup<'_>) -> Result<ProbeReport> {
    let ProbeSetup { sys_a, sys_b, component: i, xi, eta, .. } = *setup;
    check_shared(sys_a, sys_b)?;
    if i >= sys_a.d {
        return Err(Error::OutOfRange { index: i, max: sys_a.d - 1 });
    }
    if setup.n_samples < 2 || setup.s_values.is_empty() {
        return Err(Error::InvalidArgument("need n_samples >= 2 and at least one s".into()));
    }
    if !leq_n(xi, eta, sys_a)? {
        return Err(Error::InitialOrder("probe segments must satisfy xi <=_N eta".into()));
    }
    let dt = xi.dt;
    let (mut zx, mut ze) = (vec![0.0; sys_a.d], vec![0.0; sys_a.d]);
    sys_a.z_into(xi.view(), &mut zx);
    sys_a.z_into(eta.view(), &mut ze);
    if (zx[i] - ze[i]).abs() > BOUNDARY_TOL {
        return Err(Error::InitialOrder(format!(
            "boundary equality fails at component {}: {} vs {}",
            i + 1,
            zx[i],
            ze[i]
        )));
    }
    let control = constant_control(&setup.gamma, &sys_a.bounds)?;

    let mut steps_for: Vec<(f64, usize)> = setup
        .s_values
        .iter()
        .map(|&s| {
            let k = crate::drivers::integral_steps(s, dt, "probe s")?;
            if k == 0 {
                return Err(Error::InvalidArgument("probe s must be > 0".into()));
            }
            Ok((s, k))
        })
        .collect::<Result<_>>()?;
    steps_for.sort_by_key(|p| p.1);
    let max_steps = steps_for.last().map(|p| p.1).unwrap_or(1);
    let grid = TimeGrid::new(dt, max_steps, xi.delay_steps)?.with_start(setup.t0);

    let rows: Vec<Result<Vec<f64>>> = (0..setup.n_samples)
        .into_par_iter()
        .map(|s| {
            let w = WienerPath::sample(sys_a.m, &grid, StreamKey { master_seed: setup.master_seed, sample_index: s as u64 });
            let drv = DriverPath::from_wiener(&w, &control)?;
            let a = solve(sys_a, xi, &drv, &setup.solver)?;
            let b = solve(sys_b, eta, &drv, &setup.solver)?;
            Ok(steps_for.iter().map(|&(sv, k)| (a.yn(k)[i] - b.yn(k)[i]) / sv).collect())
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let n = setup.n_samples as f64;
    let slopes = steps_for
        .iter()
        .enumerate()
        .map(|(j, &(s, _))| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            let mean = pairwise_sum(&col) / n;
            let dev: Vec<f64> = col.iter().map(|v| (v - mean).powi(2)).collect();
            let var = pairwise_sum(&dev) / (n - 1.0);
            SlopeEstimate { s, mean, std_error: (var / n).sqrt() }
        })
        .collect();

    let va = sys_a.eval_system(setup.t0, xi.view())?;
    let vb = sys_b.eval_system(setup.t0, eta.view())?;
    let direct = va.b[i] - vb.b[i] + va.h[i].sub(&vb.h[i]).frobenius_dot(&setup.gamma);
    Ok(ProbeReport { component: i, t0: setup.t0, direct, slopes })
}
