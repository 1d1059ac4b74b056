//! Explicit Euler scheme for the neutral equation with a per-step fixed-point
//! solve for the current state.
//!
//! With `V_k = Y(t_k) − N(Y_{t_k})`, each step computes
//! `V_{k+1} = V_k + b·Δt + ⟨h, Δ⟨B⟩⟩ + σ·ΔB` at `(t_k, Y_{t_k})` and then
//! solves `Y(t_{k+1}) = V_{k+1} + N(Y_{t_{k+1}})` by Banach iteration started
//! from `Y(t_k)`.

use std::io::Write;

use crate::coeffs::CoefficientSystem;
use crate::drivers::{DriverPath, TimeGrid};
use crate::error::{Error, Result};
use crate::expr::Env;
use crate::segments::{Segment, SegmentView};

pub const DEFAULT_FP_TOL: f64 = 1e-12;
pub const DEFAULT_FP_MAX_ITER: usize = 200;
/// States beyond this magnitude abort the run.
pub const EXPLOSION_BOUND: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub fp_tol: f64,
    pub fp_max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { fp_tol: DEFAULT_FP_TOL, fp_max_iter: DEFAULT_FP_MAX_ITER }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub d: usize,
    /// `(L + steps + 1) × d`, row `j` at time `t0 − r0 + j·dt`.
    pub values: Vec<f64>,
    /// `(steps + 1) × d`, row `k` is `Y(t_k) − N(Y_{t_k})`.
    pub neutral_adjusted: Vec<f64>,
    /// Fixed-point iterations used per step.
    pub fp_iterations: Vec<usize>,
    /// Largest final fixed-point update over all steps.
    pub max_fp_residual: f64,
}

impl Trajectory {
    /// `Y(t_k)`, `k = 0..=steps`.
    pub fn y(&self, k: usize) -> &[f64] {
        let row = self.grid.delay_steps + k;
        &self.values[row * self.d..(row + 1) * self.d]
    }

    /// `Y^N(t_k)`.
    pub fn yn(&self, k: usize) -> &[f64] {
        &self.neutral_adjusted[k * self.d..(k + 1) * self.d]
    }

    /// The segment `Y_{t_k}`.
    pub fn segment(&self, k: usize) -> SegmentView<'_> {
        let l = self.grid.delay_steps;
        SegmentView { d: self.d, delay_steps: l, dt: self.grid.dt, values: &self.values[k * self.d..(k + l + 1) * self.d] }
    }

    pub fn terminal(&self) -> &[f64] {
        self.y(self.grid.steps)
    }

    pub fn terminal_yn(&self) -> &[f64] {
        self.yn(self.grid.steps)
    }

    /// `sup_{t ∈ [−r0, T]} |Y(t)|` over all components.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// CSV with columns `t, Y_1..Y_d, YN_1..YN_d` for `t_0..t_steps`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=self.d).map(|i| format!("Y_{i}")));
        header.extend((1..=self.d).map(|i| format!("YN_{i}")));
        wr.write_record(&header)?;
        for k in 0..=self.grid.steps {
            let mut rec = vec![self.grid.time(k).to_string()];
            rec.extend(self.y(k).iter().map(|v| v.to_string()));
            rec.extend(self.yn(k).iter().map(|v| v.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Two solutions driven by the same driver path.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTrajectory {
    pub a: Trajectory,
    pub b: Trajectory,
    pub driver: DriverPath,
}

/// Outcome of one fixed-point solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOutcome {
    pub iterations: usize,
    /// Sup-norm of the last update.
    pub residual: f64,
}

/// Solves `u = v + N(segment ending in u)` in place on the last row of
/// `window` (`L + 1` rows), starting from the value already stored there.
/// Each update size is pushed to `trace` when given.
pub fn neutral_fixed_point(
    sys: &CoefficientSystem,
    window: &mut [f64],
    dt: f64,
    v: &[f64],
    opts: &SolverOptions,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<FixedPointOutcome> {
    let d = sys.d;
    let l = window.len() / d - 1;
    let mut n = vec![0.0; d];
    let last = l * d;
    let max_iter = if sys.neutral_is_implicit() { opts.fp_max_iter.max(1) } else { 1 };
    let mut residual = f64::INFINITY;
    for it in 1..=max_iter {
        sys.neutral_into(SegmentView { d, delay_steps: l, dt, values: window }, &mut n);
        residual = 0.0;
        for i in 0..d {
            let new = v[i] + n[i];
            residual = f64::max(residual, (new - window[last + i]).abs());
            window[last + i] = new;
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(residual);
        }
        if !residual.is_finite() {
            return Err(Error::NonFiniteState { step: 0 });
        }
        if !sys.neutral_is_implicit() || residual <= opts.fp_tol {
            return Ok(FixedPointOutcome { iterations: it, residual: if sys.neutral_is_implicit() { residual } else { 0.0 } });
        }
    }
    Err(Error::FixedPoint { step: 0, residual })
}

fn check_inputs(sys: &CoefficientSystem, init: &Segment, driver: &DriverPath) -> Result<()> {
    let grid = &driver.grid;
    if driver.m != sys.m {
        return Err(Error::DimensionMismatch { expected: sys.m, got: driver.m });
    }
    if (init.dt - grid.dt).abs() > 1e-12 * grid.dt {
        return Err(Error::ShapeMismatch(format!("initial segment dt {} differs from grid dt {}", init.dt, grid.dt)));
    }
    sys.validate_grid(grid.dt)?;
    sys.check_segment(&init.view())?;
    if init.delay_steps != grid.delay_steps {
        return Err(Error::ShapeMismatch(format!(
            "initial segment has {} delay steps, grid has {}",
            init.delay_steps, grid.delay_steps
        )));
    }
    Ok(())
}

/// Integrates `sys` from `init` along `driver`.
pub fn solve(
    sys: &CoefficientSystem,
    init: &Segment,
    driver: &DriverPath,
    opts: &SolverOptions,
) -> Result<Trajectory> {
    check_inputs(sys, init, driver)?;
    let grid = driver.grid;
    let (d, l, dt, steps) = (sys.d, grid.delay_steps, grid.dt, grid.steps);

    let mut values = Vec::with_capacity((l + steps + 1) * d);
    values.extend_from_slice(&init.values);
    let mut yn = Vec::with_capacity((steps + 1) * d);
    let mut z = vec![0.0; d];
    sys.z_into(init.view(), &mut z);
    yn.extend_from_slice(&z);
    let mut fp_iterations = Vec::with_capacity(steps);
    let mut max_fp_residual = 0.0_f64;
    let mut v = vec![0.0; d];
    let mut n = vec![0.0; d];

    for k in 0..steps {
        {
            let seg = SegmentView { d, delay_steps: l, dt, values: &values[k * d..(k + l + 1) * d] };
            let zk = &yn[k * d..(k + 1) * d];
            let env = Env { t: grid.time(k), seg: Some(seg), z: zk };
            let (db, dqv) = (driver.db_at(k), driver.dqv_at(k));
            for i in 0..d {
                v[i] = zk[i] + sys.drift_at(i, &env) * dt + sys.h_pairing(i, &env, dqv) + sys.sigma_dot(i, &env, db);
            }
        }
        let start = (k + l) * d;
        values.extend_from_within(start..start + d);
        let window = &mut values[(k + 1) * d..];
        let out = neutral_fixed_point(sys, window, dt, &v, opts, None).map_err(|e| match e {
            Error::FixedPoint { residual, .. } => Error::FixedPoint { step: k + 1, residual },
            Error::NonFiniteState { .. } => Error::NonFiniteState { step: k + 1 },
            other => other,
        })?;
        fp_iterations.push(out.iterations);
        max_fp_residual = max_fp_residual.max(out.residual);
        let y_new = &values[(k + l + 1) * d..];
        if y_new.iter().any(|y| !y.is_finite() || y.abs() > EXPLOSION_BOUND) {
            return Err(Error::NonFiniteState { step: k + 1 });
        }
        let seg = SegmentView { d, delay_steps: l, dt, values: &values[(k + 1) * d..] };
        sys.neutral_into(seg, &mut n);
        for i in 0..d {
            yn.push(seg.endpoint(i) - n[i]);
        }
    }
    Ok(Trajectory { grid, d, values, neutral_adjusted: yn, fp_iterations, max_fp_residual })
}

/// Solves both systems against the identical driver; the systems must share
/// their shapes and neutral term.
pub fn solve_pair(
    sys_a: &CoefficientSystem,
    sys_b: &CoefficientSystem,
    init_a: &Segment,
    init_b: &Segment,
    driver: &DriverPath,
    opts: &SolverOptions,
) -> Result<PairTrajectory> {
    check_shared(sys_a, sys_b)?;
    let a = solve(sys_a, init_a, driver, opts)?;
    let b = solve(sys_b, init_b, driver, opts)?;
    Ok(PairTrajectory { a, b, driver: driver.clone() })
}

pub(crate) fn check_shared(sys_a: &CoefficientSystem, sys_b: &CoefficientSystem) -> Result<()> {
    if !sys_a.compatible(sys_b) {
        return Err(Error::InvalidArgument("paired systems must share d, m, r0 and bounds".into()));
    }
    if !sys_a.same_neutral(sys_b) {
        return Err(Error::InvalidArgument("paired systems must share the neutral term".into()));
    }
    Ok(())
}
