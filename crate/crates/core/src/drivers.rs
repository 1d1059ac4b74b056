//! Discretized G-Brownian driver paths.
//!
//! Under a volatility control `θ` the driver increments are `ΔB = θ·ΔW` and
//! the quadratic variation increments are `Δ⟨B⟩ = θθᵀ·Δt`. Wiener increments
//! come from a counter-based ChaCha stream keyed by `(master_seed,
//! sample_index, step)`, so any `(control, sample)` pair can be evaluated in
//! any order, on any thread, with identical bits.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcalc::{GBounds, SymMatrix};

/// Admissibility tolerance on eigenvalues of `θθᵀ`.
pub const ADMISSIBILITY_TOL: f64 = 1e-10;

/// Uniform grid on `[t0, t0 + steps·dt]` with a delay window of
/// `delay_steps` grid cells (`r0 = delay_steps·dt`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub steps: usize,
    pub delay_steps: usize,
    #[serde(default)]
    pub t0: f64,
}

impl TimeGrid {
    pub fn new(dt: f64, steps: usize, delay_steps: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if steps == 0 {
            return Err(Error::InvalidArgument("grid needs at least one step".into()));
        }
        Ok(Self { dt, steps, delay_steps, t0: 0.0 })
    }

    /// Builds a grid from a horizon and delay, both of which must be integral
    /// multiples of `dt`.
    pub fn from_horizon(dt: f64, horizon: f64, r0: f64) -> Result<Self> {
        let steps = integral_steps(horizon, dt, "horizon")?;
        let delay_steps = integral_steps(r0, dt, "r0")?;
        Self::new(dt, steps, delay_steps)
    }

    pub fn with_start(mut self, t0: f64) -> Self {
        self.t0 = t0;
        self
    }

    /// `t0 + k·dt`, never accumulated.
    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn r0(&self) -> f64 {
        self.delay_steps as f64 * self.dt
    }
}

pub(crate) fn integral_steps(x: f64, dt: f64, what: &str) -> Result<usize> {
    if !(x.is_finite() && x >= 0.0) {
        return Err(Error::InvalidArgument(format!("{what} must be finite and >= 0")));
    }
    let ratio = x / dt;
    let n = ratio.round();
    if (ratio - n).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "{what} = {x} is not an integer multiple of dt = {dt}"
        )));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Constant,
    Piecewise,
    BangBangRandom,
}

/// A piecewise-constant admissible volatility control.
///
/// `theta` and `qv_density` hold row-major `m×m` blocks; a constant control
/// stores a single block used at every step.
#[derive(Debug, Clone, PartialEq)]
pub struct VolatilityControl {
    pub kind: ControlKind,
    pub label: String,
    pub seed: Option<u64>,
    m: usize,
    theta: Vec<f64>,
    qv_density: Vec<f64>,
}

impl VolatilityControl {
    pub fn dim(&self) -> usize {
        self.m
    }

    /// Number of stored blocks (1 for constant controls).
    pub fn len(&self) -> usize {
        self.theta.len() / (self.m * self.m)
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    #[inline]
    fn block(&self, k: usize) -> usize {
        let mm = self.m * self.m;
        if self.kind == ControlKind::Constant {
            0
        } else {
            k * mm
        }
    }

    #[inline]
    pub fn theta_at(&self, k: usize) -> &[f64] {
        let s = self.block(k);
        &self.theta[s..s + self.m * self.m]
    }

    #[inline]
    pub fn qv_density_at(&self, k: usize) -> &[f64] {
        let s = self.block(k);
        &self.qv_density[s..s + self.m * self.m]
    }

    pub fn theta_matrix(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.m, self.m, self.theta_at(k))
    }

    pub fn covers(&self, steps: usize) -> bool {
        self.kind == ControlKind::Constant || self.len() >= steps
    }

    /// A per-step control from explicit `θ_k` matrices.
    pub fn piecewise(thetas: &[DMatrix<f64>], bounds: &GBounds) -> Result<Self> {
        let m = bounds.dim;
        let mut theta = Vec::with_capacity(thetas.len() * m * m);
        let mut qv = Vec::with_capacity(thetas.len() * m * m);
        for th in thetas {
            if th.nrows() != m || th.ncols() != m {
                return Err(Error::DimensionMismatch { expected: m, got: th.nrows() });
            }
            push_row_major(&mut theta, th);
            push_row_major(&mut qv, &(th * th.transpose()));
        }
        let c = Self {
            kind: ControlKind::Piecewise,
            label: "piecewise".into(),
            seed: None,
            m,
            theta,
            qv_density: qv,
        };
        c.check_admissible(bounds)?;
        Ok(c)
    }

    /// Per-step scalar multiples `θ_k = s_k·I`.
    pub fn scalar_steps(scales: &[f64], bounds: &GBounds, kind: ControlKind) -> Result<Self> {
        let m = bounds.dim;
        let mut theta = vec![0.0; scales.len() * m * m];
        let mut qv = vec![0.0; scales.len() * m * m];
        for (k, &s) in scales.iter().enumerate() {
            for j in 0..m {
                theta[k * m * m + j * m + j] = s;
                qv[k * m * m + j * m + j] = s * s;
            }
        }
        let c = Self { kind, label: "scalar".into(), seed: None, m, theta, qv_density: qv };
        c.check_admissible(bounds)?;
        Ok(c)
    }

    /// Checks `σ_low²·I ≤ θ_k θ_kᵀ ≤ σ_high²·I` for every stored block.
    pub fn check_admissible(&self, bounds: &GBounds) -> Result<()> {
        if self.m != bounds.dim {
            return Err(Error::DimensionMismatch { expected: bounds.dim, got: self.m });
        }
        let (lo, hi) = (bounds.var_low(), bounds.var_high());
        for k in 0..self.len() {
            let q = self.qv_density_at(k);
            let (min, max) = if self.m == 1 {
                (q[0], q[0])
            } else {
                let s = SymMatrix::new(DMatrix::from_row_slice(self.m, self.m, q))?;
                let (vals, _) = s.eigen();
                (vals[0], vals[vals.len() - 1])
            };
            if !(min.is_finite() && max.is_finite()) {
                return Err(Error::InadmissibleControl { step: k, reason: "non-finite".into() });
            }
            if min < lo - ADMISSIBILITY_TOL || max > hi + ADMISSIBILITY_TOL {
                return Err(Error::InadmissibleControl {
                    step: k,
                    reason: format!("eigenvalues of θθᵀ in [{min}, {max}] outside [{lo}, {hi}]"),
                });
            }
        }
        Ok(())
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Scalar `θ_k` for `m = 1`-style controls that are multiples of the
    /// identity; `None` otherwise.
    pub fn scalar_at(&self, k: usize) -> Option<f64> {
        let th = self.theta_at(k);
        let m = self.m;
        let s = th[0];
        for i in 0..m {
            for j in 0..m {
                let want = if i == j { s } else { 0.0 };
                if th[i * m + j] != want {
                    return None;
                }
            }
        }
        Some(s)
    }

    /// Expands to an explicit per-step control of `steps` blocks.
    pub fn expand(&self, steps: usize) -> VolatilityControl {
        let mm = self.m * self.m;
        let mut theta = Vec::with_capacity(steps * mm);
        let mut qv = Vec::with_capacity(steps * mm);
        for k in 0..steps {
            theta.extend_from_slice(self.theta_at(k));
            qv.extend_from_slice(self.qv_density_at(k));
        }
        VolatilityControl {
            kind: ControlKind::Piecewise,
            label: self.label.clone(),
            seed: self.seed,
            m: self.m,
            theta,
            qv_density: qv,
        }
    }

    /// Overwrites step `k` of a per-step control with `s·I`.
    pub(crate) fn set_scalar_step(&mut self, k: usize, s: f64) {
        assert!(self.kind != ControlKind::Constant, "constant controls have one block");
        let m = self.m;
        let start = k * m * m;
        for i in 0..m {
            for j in 0..m {
                let v = if i == j { s } else { 0.0 };
                self.theta[start + i * m + j] = v;
                self.qv_density[start + i * m + j] = v * s;
            }
        }
    }
}

fn push_row_major(out: &mut Vec<f64>, a: &DMatrix<f64>) {
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            out.push(a[(i, j)]);
        }
    }
}

/// Constant control `θ = √γ`; the quadratic variation density is `γ` itself,
/// so `⟨B⟩(t) = t·γ` along every path.
pub fn constant_control(gamma: &SymMatrix, bounds: &GBounds) -> Result<VolatilityControl> {
    if gamma.dim() != bounds.dim {
        return Err(Error::DimensionMismatch { expected: bounds.dim, got: gamma.dim() });
    }
    let lo = SymMatrix::scalar(bounds.dim, bounds.var_low());
    let hi = SymMatrix::scalar(bounds.dim, bounds.var_high());
    if !crate::gcalc::loewner_leq(&lo, gamma, ADMISSIBILITY_TOL)?
        || !crate::gcalc::loewner_leq(gamma, &hi, ADMISSIBILITY_TOL)?
    {
        return Err(Error::InadmissibleControl {
            step: 0,
            reason: "gamma outside [σ_low²·I, σ_high²·I]".into(),
        });
    }
    let root = gamma.sqrt_psd()?;
    let mut theta = Vec::new();
    push_row_major(&mut theta, &root);
    let mut qv = Vec::new();
    push_row_major(&mut qv, gamma.as_matrix());
    Ok(VolatilityControl {
        kind: ControlKind::Constant,
        label: "constant".into(),
        seed: None,
        m: bounds.dim,
        theta,
        qv_density: qv,
    })
}

/// Random bang-bang control: `θ_k ∈ {σ_low·I, σ_high·I}`, starting at a
/// seed-chosen endpoint and switching with probability `switch_prob` at each
/// step.
pub fn bang_bang_control(
    grid: &TimeGrid,
    seed: u64,
    bounds: &GBounds,
    switch_prob: f64,
) -> Result<VolatilityControl> {
    if !(0.0..=1.0).contains(&switch_prob) {
        return Err(Error::InvalidArgument(format!(
            "switch_prob must lie in [0, 1], got {switch_prob}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut high = rng.random_bool(0.5);
    let mut scales = Vec::with_capacity(grid.steps);
    for k in 0..grid.steps {
        if k > 0 && rng.random_bool(switch_prob) {
            high = !high;
        }
        scales.push(if high { bounds.sigma_high } else { bounds.sigma_low });
    }
    let mut c = VolatilityControl::scalar_steps(&scales, bounds, ControlKind::BangBangRandom)?;
    c.seed = Some(seed);
    c.label = format!("bang_bang(seed={seed},p={switch_prob})");
    Ok(c)
}

/// Key of one reproducible Wiener stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamKey {
    pub master_seed: u64,
    pub sample_index: u64,
}

/// Standard Wiener increments `ΔW_k ~ N(0, dt·I_m)`, row-major `steps × m`.
#[derive(Debug, Clone, PartialEq)]
pub struct WienerPath {
    pub m: usize,
    pub grid: TimeGrid,
    pub dw: Vec<f64>,
}

// Words reserved per step in the ChaCha stream; ziggurat sampling consumes far fewer.
const WORDS_PER_STEP_SHIFT: u32 = 16;

impl WienerPath {
    pub fn sample(m: usize, grid: &TimeGrid, key: StreamKey) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(key.master_seed);
        rng.set_stream(key.sample_index);
        let sd = grid.dt.sqrt();
        let mut dw = Vec::with_capacity(grid.steps * m);
        for k in 0..grid.steps {
            rng.set_word_pos((k as u128) << WORDS_PER_STEP_SHIFT);
            for _ in 0..m {
                let z: f64 = rng.sample(StandardNormal);
                dw.push(sd * z);
            }
        }
        Self { m, grid: *grid, dw }
    }
}

/// One discretized driver path: `ΔW`, `ΔB = θΔW` and `Δ⟨B⟩ = θθᵀΔt`.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverPath {
    pub grid: TimeGrid,
    pub m: usize,
    /// `steps × m`
    pub dw: Vec<f64>,
    /// `steps × m`
    pub db: Vec<f64>,
    /// `steps × m × m`
    pub dqv: Vec<f64>,
}

impl DriverPath {
    /// Applies `control` to an existing Wiener path.
    pub fn from_wiener(wiener: &WienerPath, control: &VolatilityControl) -> Result<Self> {
        let grid = wiener.grid;
        let m = wiener.m;
        if control.dim() != m {
            return Err(Error::DimensionMismatch { expected: m, got: control.dim() });
        }
        if !control.covers(grid.steps) {
            return Err(Error::InadmissibleControl {
                step: control.len(),
                reason: format!("control has {} steps, grid needs {}", control.len(), grid.steps),
            });
        }
        let mut db = vec![0.0; grid.steps * m];
        let mut dqv = vec![0.0; grid.steps * m * m];
        for k in 0..grid.steps {
            let th = control.theta_at(k);
            let q = control.qv_density_at(k);
            let w = &wiener.dw[k * m..(k + 1) * m];
            for i in 0..m {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += th[i * m + j] * w[j];
                }
                db[k * m + i] = acc;
            }
            for (out, &v) in dqv[k * m * m..(k + 1) * m * m].iter_mut().zip(q) {
                *out = v * grid.dt;
            }
        }
        Ok(Self { grid, m, dw: wiener.dw.clone(), db, dqv })
    }

    #[inline]
    pub fn db_at(&self, k: usize) -> &[f64] {
        &self.db[k * self.m..(k + 1) * self.m]
    }

    #[inline]
    pub fn dqv_at(&self, k: usize) -> &[f64] {
        let mm = self.m * self.m;
        &self.dqv[k * mm..(k + 1) * mm]
    }

    pub fn dqv_matrix(&self, k: usize) -> SymMatrix {
        SymMatrix::new(DMatrix::from_row_slice(self.m, self.m, self.dqv_at(k)))
            .expect("finite quadratic variation")
    }

    /// `B^j` at step `k` (`B(0) = 0`).
    pub fn b_at(&self, k: usize, j: usize) -> f64 {
        (0..k).map(|s| self.db[s * self.m + j]).sum()
    }

    pub fn b_terminal(&self, j: usize) -> f64 {
        self.b_at(self.grid.steps, j)
    }

    /// `⟨B⟩(T)` as the sum of the increments.
    pub fn qv_terminal(&self) -> SymMatrix {
        let mm = self.m * self.m;
        let mut acc = vec![0.0; mm];
        for k in 0..self.grid.steps {
            for (a, v) in acc.iter_mut().zip(self.dqv_at(k)) {
                *a += v;
            }
        }
        SymMatrix::new(DMatrix::from_row_slice(self.m, self.m, &acc))
            .expect("finite quadratic variation")
    }

    /// Little-endian dump: `u64 m`, `u64 steps`, `f64 dt`, then `dW`, `dB`
    /// and `dQV` as row-major `f64` arrays.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&(self.m as u64).to_le_bytes())?;
        w.write_all(&(self.grid.steps as u64).to_le_bytes())?;
        w.write_all(&self.grid.dt.to_le_bytes())?;
        for v in self.dw.iter().chain(&self.db).chain(&self.dqv) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut b8 = [0u8; 8];
        let mut next = |r: &mut R| -> Result<[u8; 8]> {
            r.read_exact(&mut b8)?;
            Ok(b8)
        };
        let m = u64::from_le_bytes(next(&mut r)?) as usize;
        let steps = u64::from_le_bytes(next(&mut r)?) as usize;
        let dt = f64::from_le_bytes(next(&mut r)?);
        let mut read_vec = |n: usize| -> Result<Vec<f64>> {
            (0..n).map(|_| Ok(f64::from_le_bytes(next(&mut r)?))).collect()
        };
        let dw = read_vec(steps * m)?;
        let db = read_vec(steps * m)?;
        let dqv = read_vec(steps * m * m)?;
        Ok(Self { grid: TimeGrid::new(dt, steps, 0)?, m, dw, db, dqv })
    }
}

/// Samples the driver for `control` on stream `key`.
pub fn sample_driver(
    control: &VolatilityControl,
    grid: &TimeGrid,
    key: StreamKey,
) -> Result<DriverPath> {
    if grid.steps == 0 {
        return Err(Error::InvalidArgument("grid needs at least one step".into()));
    }
    let wiener = WienerPath::sample(control.dim(), grid, key);
    DriverPath::from_wiener(&wiener, control)
}
