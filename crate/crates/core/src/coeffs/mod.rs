//! Coefficient systems `(b, h, σ, N)` written in the expression language,
//! their evaluation on segments, and sampled checks of the structural
//! hypotheses on pairs of systems.

mod checks;

pub use checks::{
    check_a1, check_a2, check_c2, check_h1_h4, endpoint_solve, replay_witness, ConditionId,
    ConditionReport, SamplerConfig, Verdict, Witness,
};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::expr::{parse_with, Env, Expr, ExprContext};
use crate::gcalc::{GBounds, SymMatrix};
use crate::segments::{Neutral, Segment, SegmentView};

/// Tolerance of the `N(0) = 0` construction check.
pub const NEUTRAL_ZERO_TOL: f64 = 1e-12;

/// One side of the neutral equation
/// `d[Y − N(Y_t)] = b dt + ⟨h, d⟨B⟩⟩ + σ dB`.
///
/// `h` is stored per solution component as the upper triangle (`j ≤ l`) of a
/// symmetric `m×m` matrix; `σ` is `d×m` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientSystem {
    pub d: usize,
    pub m: usize,
    pub bounds: GBounds,
    pub r0: f64,
    drift: Vec<Expr>,
    hmat: Vec<Vec<Expr>>,
    diffusion: Vec<Expr>,
    neutral: Vec<Expr>,
    pub kappa_declared: f64,
    neutral_reads_present: bool,
}

/// Text form of a system, one expression string per coefficient entry.
#[derive(Debug, Clone)]
pub struct SystemText<'a> {
    pub drift: Vec<&'a str>,
    /// Per component: either the `m` full rows or the upper-triangular rows
    /// (row `j` holding entries `l = j..m`).
    pub h: Vec<Vec<Vec<&'a str>>>,
    pub diffusion: Vec<Vec<&'a str>>,
    pub neutral: Vec<&'a str>,
}

/// Number of upper-triangular entries.
fn tri_len(m: usize) -> usize {
    m * (m + 1) / 2
}

/// Position of `(j, l)`, `j ≤ l`, in row-major upper-triangular storage.
#[inline]
fn upper_pos(m: usize, j: usize, l: usize) -> usize {
    let (j, l) = if j <= l { (j, l) } else { (l, j) };
    // rows 0..j hold m, m-1, ..., m-j+1 entries
    j * m - j * j.saturating_sub(1) / 2 + (l - j)
}

/// Scratch-free evaluation results of a system at one `(t, ξ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffValues {
    pub b: Vec<f64>,
    pub h: Vec<SymMatrix>,
    /// `d×m`
    pub sigma: DMatrix<f64>,
    pub n: Vec<f64>,
    /// `ξ(0) − N(ξ)`
    pub z: Vec<f64>,
}

impl CoefficientSystem {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        m: usize,
        bounds: GBounds,
        r0: f64,
        drift: Vec<Expr>,
        hmat: Vec<Vec<Expr>>,
        diffusion: Vec<Expr>,
        neutral: Vec<Expr>,
        kappa_declared: f64,
    ) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::InvalidArgument("d and m must be >= 1".into()));
        }
        if bounds.dim != m {
            return Err(Error::DimensionMismatch { expected: m, got: bounds.dim });
        }
        if !(r0.is_finite() && r0 >= 0.0) {
            return Err(Error::InvalidArgument(format!("r0 must be >= 0, got {r0}")));
        }
        if !(0.0..1.0).contains(&kappa_declared) {
            return Err(Error::InvalidArgument(format!(
                "kappa must lie in [0, 1), got {kappa_declared}"
            )));
        }
        let shape = |what: &str, got: usize, want: usize| -> Result<()> {
            if got != want {
                return Err(Error::ShapeMismatch(format!("{what}: expected {want} entries, got {got}")));
            }
            Ok(())
        };
        shape("drift", drift.len(), d)?;
        shape("h", hmat.len(), d)?;
        for row in &hmat {
            shape("h component", row.len(), tri_len(m))?;
        }
        shape("diffusion", diffusion.len(), d * m)?;
        shape("neutral", neutral.len(), d)?;

        let coef_ctx = ExprContext { d, r0, dt: None, allow_reads: true, allow_z: true };
        let neutral_ctx = ExprContext { allow_z: false, ..coef_ctx };
        for e in drift.iter().chain(hmat.iter().flatten()).chain(&diffusion) {
            e.validate(&coef_ctx)?;
        }
        for e in &neutral {
            e.validate(&neutral_ctx)?;
        }
        // with r0 = 0 every read is of the current state
        let neutral_reads_present = neutral
            .iter()
            .any(|e| e.reads_present() || (r0 == 0.0 && !e.reads().is_empty()));
        let sys = Self {
            d,
            m,
            bounds,
            r0,
            drift,
            hmat,
            diffusion,
            neutral,
            kappa_declared,
            neutral_reads_present,
        };
        // N(0) = 0 on any grid; a single-point segment suffices for the check
        // because every read of the zero segment is zero.
        let zero = Segment::constant(d, 0, 1.0, &vec![0.0; d])?;
        let mut n0 = vec![0.0; d];
        for (i, e) in sys.neutral.iter().enumerate() {
            n0[i] = e.eval(&Env { t: 0.0, seg: Some(zero_view(&zero)), z: &[] });
        }
        if n0.iter().any(|v| v.abs() > NEUTRAL_ZERO_TOL) {
            return Err(Error::InvalidExpr(format!("neutral term must satisfy N(0) = 0, got {n0:?}")));
        }
        Ok(sys)
    }

    /// Parses every entry and builds the system.
    pub fn from_text(
        d: usize,
        bounds: GBounds,
        r0: f64,
        text: &SystemText<'_>,
        kappa_declared: f64,
    ) -> Result<Self> {
        let m = bounds.dim;
        let ctx = ExprContext { d, r0, dt: None, allow_reads: true, allow_z: true };
        let nctx = ExprContext { allow_z: false, ..ctx };
        let p = |s: &str, c: &ExprContext| -> Result<Expr> {
            parse_with(s, c).map_err(|e| Error::InvalidExpr(format!("'{s}': {e}")))
        };
        let drift = text.drift.iter().map(|s| p(s, &ctx)).collect::<Result<Vec<_>>>()?;
        let neutral = text.neutral.iter().map(|s| p(s, &nctx)).collect::<Result<Vec<_>>>()?;
        if text.diffusion.len() != d || text.diffusion.iter().any(|r| r.len() != m) {
            return Err(Error::ShapeMismatch(format!("diffusion must be {d}x{m}")));
        }
        let diffusion = text
            .diffusion
            .iter()
            .flatten()
            .map(|s| p(s, &ctx))
            .collect::<Result<Vec<_>>>()?;
        if text.h.len() != d {
            return Err(Error::ShapeMismatch(format!("h needs {d} components")));
        }
        let mut hmat = Vec::with_capacity(d);
        for (i, rows) in text.h.iter().enumerate() {
            hmat.push(parse_h_rows(rows, m, &ctx).map_err(|e| match e {
                Error::ShapeMismatch(s) => Error::ShapeMismatch(format!("h component {}: {s}", i + 1)),
                other => other,
            })?);
        }
        Self::new(d, m, bounds, r0, drift, hmat, diffusion, neutral, kappa_declared)
    }

    pub fn drift(&self) -> &[Expr] {
        &self.drift
    }

    pub fn diffusion_expr(&self, i: usize, j: usize) -> &Expr {
        &self.diffusion[i * self.m + j]
    }

    pub fn diffusion(&self) -> &[Expr] {
        &self.diffusion
    }

    pub fn h_expr(&self, i: usize, j: usize, l: usize) -> &Expr {
        &self.hmat[i][upper_pos(self.m, j, l)]
    }

    pub fn neutral(&self) -> &[Expr] {
        &self.neutral
    }

    /// Whether the neutral term reads the current state `ξ(0)`.
    pub fn neutral_is_implicit(&self) -> bool {
        self.neutral_reads_present
    }

    pub fn delay_steps(&self, dt: f64) -> Result<usize> {
        crate::drivers::integral_steps(self.r0, dt, "r0")
    }

    /// Checks that every lag is aligned with a grid of spacing `dt`.
    pub fn validate_grid(&self, dt: f64) -> Result<()> {
        self.delay_steps(dt)?;
        let ctx = ExprContext { d: self.d, r0: self.r0, dt: Some(dt), allow_reads: true, allow_z: true };
        for e in self.all_exprs() {
            e.validate(&ctx)?;
        }
        Ok(())
    }

    fn all_exprs(&self) -> impl Iterator<Item = &Expr> {
        self.drift
            .iter()
            .chain(self.hmat.iter().flatten())
            .chain(&self.diffusion)
            .chain(&self.neutral)
    }

    /// Same shape, bounds and delay.
    pub fn compatible(&self, other: &CoefficientSystem) -> bool {
        self.d == other.d && self.m == other.m && self.bounds == other.bounds && self.r0 == other.r0
    }

    pub fn same_neutral(&self, other: &CoefficientSystem) -> bool {
        self.neutral == other.neutral
    }

    pub fn check_segment(&self, seg: &SegmentView<'_>) -> Result<()> {
        if seg.d != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: seg.d });
        }
        let want = self.delay_steps(seg.dt)?;
        if seg.delay_steps != want {
            return Err(Error::ShapeMismatch(format!(
                "segment has {} delay steps, r0/dt = {want}",
                seg.delay_steps
            )));
        }
        Ok(())
    }

    pub fn neutral_into(&self, seg: SegmentView<'_>, out: &mut [f64]) {
        let env = Env { t: 0.0, seg: Some(seg), z: &[] };
        for (o, e) in out.iter_mut().zip(&self.neutral) {
            *o = e.eval(&env);
        }
    }

    /// `z = ξ(0) − N(ξ)`.
    pub fn z_into(&self, seg: SegmentView<'_>, out: &mut [f64]) {
        self.neutral_into(seg, out);
        for (i, o) in out.iter_mut().enumerate() {
            *o = seg.endpoint(i) - *o;
        }
    }

    #[inline]
    pub fn drift_at(&self, i: usize, env: &Env<'_>) -> f64 {
        self.drift[i].eval(env)
    }

    /// Frobenius pairing `Σ_{j,l} h^i_{jl}·q_{jl}` with `q` a symmetric
    /// row-major `m×m` block.
    #[inline]
    pub fn h_pairing(&self, i: usize, env: &Env<'_>, q: &[f64]) -> f64 {
        let m = self.m;
        let row = &self.hmat[i];
        let mut acc = 0.0;
        let mut pos = 0;
        for j in 0..m {
            for l in j..m {
                let e = &row[pos];
                pos += 1;
                let w = if j == l { q[j * m + l] } else { q[j * m + l] + q[l * m + j] };
                if w != 0.0 && !e.is_zero_literal() {
                    acc += e.eval(env) * w;
                }
            }
        }
        acc
    }

    /// `Σ_j σ^{ij}·v_j`.
    #[inline]
    pub fn sigma_dot(&self, i: usize, env: &Env<'_>, v: &[f64]) -> f64 {
        let m = self.m;
        (0..m).map(|j| self.diffusion[i * m + j].eval(env) * v[j]).sum()
    }

    pub fn h_matrix(&self, i: usize, env: &Env<'_>) -> Result<SymMatrix> {
        let m = self.m;
        SymMatrix::new(DMatrix::from_fn(m, m, |j, l| self.h_expr(i, j, l).eval(env)))
    }

    /// Evaluates `b, h, σ, N` at `(t, ξ)`; `z` is resolved from `N` first.
    pub fn eval_system(&self, t: f64, xi: SegmentView<'_>) -> Result<CoeffValues> {
        self.check_segment(&xi)?;
        let d = self.d;
        let mut n = vec![0.0; d];
        self.neutral_into(xi, &mut n);
        let z: Vec<f64> = (0..d).map(|i| xi.endpoint(i) - n[i]).collect();
        let env = Env { t, seg: Some(xi), z: &z };
        let b: Vec<f64> = self.drift.iter().map(|e| e.eval(&env)).collect();
        let h = (0..d)
            .map(|i| self.h_matrix(i, &env))
            .collect::<Result<Vec<_>>>()
            .map_err(|_| Error::NonFinite("h".into()))?;
        let sigma = DMatrix::from_fn(d, self.m, |i, j| self.diffusion_expr(i, j).eval(&env));
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&b) || !finite(&n) || !sigma.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("coefficients at t = {t}")));
        }
        Ok(CoeffValues { b, h, sigma, n, z })
    }

    pub fn with_drift(&self, drift: Vec<Expr>) -> Result<Self> {
        if drift.len() != self.d {
            return Err(Error::ShapeMismatch("drift length".into()));
        }
        let mut out = self.clone();
        out.drift = drift;
        Ok(out)
    }

    pub fn with_diffusion(&self, diffusion: Vec<Expr>) -> Result<Self> {
        if diffusion.len() != self.d * self.m {
            return Err(Error::ShapeMismatch("diffusion length".into()));
        }
        let mut out = self.clone();
        out.diffusion = diffusion;
        Ok(out)
    }
}

/// Single-cell view in which every lag resolves to the one stored row.
fn zero_view(seg: &Segment) -> SegmentView<'_> {
    SegmentView { d: seg.d, delay_steps: 0, dt: f64::INFINITY, values: &seg.values }
}

fn parse_h_rows(rows: &[Vec<&str>], m: usize, ctx: &ExprContext) -> Result<Vec<Expr>> {
    if rows.len() != m {
        return Err(Error::ShapeMismatch(format!("expected {m} rows, got {}", rows.len())));
    }
    let full = rows.iter().all(|r| r.len() == m);
    let upper = rows.iter().enumerate().all(|(j, r)| r.len() == m - j);
    let p = |s: &str| parse_with(s, ctx).map_err(|e| Error::InvalidExpr(format!("'{s}': {e}")));
    let mut out = Vec::with_capacity(tri_len(m));
    if full {
        for j in 0..m {
            for l in j..m {
                let a = p(rows[j][l])?;
                if l != j && p(rows[l][j])? != a {
                    return Err(Error::InvalidExpr(format!(
                        "h must be symmetric: entries ({},{}) and ({},{}) differ",
                        j + 1,
                        l + 1,
                        l + 1,
                        j + 1
                    )));
                }
                out.push(a);
            }
        }
    } else if upper {
        for r in rows {
            for s in r {
                out.push(p(s)?);
            }
        }
    } else {
        return Err(Error::ShapeMismatch("rows must be full (m entries) or upper-triangular".into()));
    }
    Ok(out)
}

impl Neutral for CoefficientSystem {
    fn eval_neutral(&self, seg: SegmentView<'_>, out: &mut [f64]) -> Result<()> {
        if out.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: out.len() });
        }
        self.neutral_into(seg, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("neutral term".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_system(drift: &str, h: &str, sigma: &str, neutral: &str, r0: f64, kappa: f64) -> CoefficientSystem {
        let bounds = GBounds::new(1.0, 2.0, 1).unwrap();
        CoefficientSystem::from_text(
            1,
            bounds,
            r0,
            &SystemText {
                drift: vec![drift],
                h: vec![vec![vec![h]]],
                diffusion: vec![vec![sigma]],
                neutral: vec![neutral],
            },
            kappa,
        )
        .unwrap()
    }

    #[test]
    fn upper_positions() {
        // m = 3: (0,0)=0 (0,1)=1 (0,2)=2 (1,1)=3 (1,2)=4 (2,2)=5
        let want = [[0, 1, 2], [1, 3, 4], [2, 4, 5]];
        for j in 0..3 {
            for l in 0..3 {
                assert_eq!(upper_pos(3, j, l), want[j][l], "({j},{l})");
            }
        }
        assert_eq!(upper_pos(2, 1, 1), 2);
        assert_eq!(tri_len(3), 6);
    }

    #[test]
    fn zero_system_evaluates_to_zero() {
        let sys = scalar_system("0", "0", "0", "0", 1.0, 0.0);
        let xi = Segment::from_fn(1, 4, 0.25, |s, _| s * 3.0 + 1.0).unwrap();
        let v = sys.eval_system(0.3, xi.view()).unwrap();
        assert_eq!(v.b, vec![0.0]);
        assert_eq!(v.sigma[(0, 0)], 0.0);
        assert_eq!(v.h[0].get(0, 0), 0.0);
        assert_eq!(v.n, vec![0.0]);
    }

    #[test]
    fn direct_substitution() {
        let sys = scalar_system("-x1(0)", "0", "0", "0", 1.0, 0.0);
        let xi = Segment::constant(1, 4, 0.25, &[2.0]).unwrap();
        assert_eq!(sys.eval_system(0.0, xi.view()).unwrap().b, vec![-2.0]);
    }

    #[test]
    fn z_resolved_through_neutral() {
        let sys = scalar_system("0", "0", "z1", "0.5*x1(-1)", 1.0, 0.5);
        let xi = Segment::constant(1, 4, 0.25, &[1.0]).unwrap();
        let v = sys.eval_system(0.0, xi.view()).unwrap();
        assert_eq!(v.sigma[(0, 0)], 0.5);
        assert_eq!(v.z, vec![0.5]);
    }

    #[test]
    fn construction_errors() {
        let bounds = GBounds::new(1.0, 2.0, 1).unwrap();
        let mk = |neutral: &str, kappa: f64| {
            CoefficientSystem::from_text(
                1,
                bounds,
                1.0,
                &SystemText {
                    drift: vec!["0"],
                    h: vec![vec![vec!["0"]]],
                    diffusion: vec![vec!["0"]],
                    neutral: vec![neutral],
                },
                kappa,
            )
        };
        assert!(mk("1 + x1(-1)", 0.5).is_err(), "N(0) != 0");
        assert!(mk("z1", 0.5).is_err(), "z inside N");
        assert!(mk("0", 1.0).is_err(), "kappa >= 1");
        assert!(mk("x2(0)", 0.5).is_err(), "component out of range");
        assert!(mk("x1(-2)", 0.5).is_err(), "lag beyond r0");
        assert!(mk("0.3*x1(-1)", 0.3).is_ok());
    }

    #[test]
    fn h_symmetry_enforced() {
        let bounds = GBounds::new(1.0, 2.0, 2).unwrap();
        let mk = |h: Vec<Vec<&str>>| {
            CoefficientSystem::from_text(
                1,
                bounds,
                0.0,
                &SystemText {
                    drift: vec!["0"],
                    h: vec![h],
                    diffusion: vec![vec!["0", "0"]],
                    neutral: vec!["0"],
                },
                0.0,
            )
        };
        assert!(mk(vec![vec!["1", "2"], vec!["2", "3"]]).is_ok());
        assert!(mk(vec![vec!["1", "2"], vec!["3"]]).is_ok());
        assert!(mk(vec![vec!["1", "2"], vec!["5", "3"]]).is_err());
        let sys = mk(vec![vec!["1", "2"], vec!["3"]]).unwrap();
        let xi = Segment::constant(1, 0, 0.1, &[0.0]).unwrap();
        let v = sys.eval_system(0.0, xi.view()).unwrap();
        assert_eq!(v.h[0].get(0, 1), 2.0);
        assert_eq!(v.h[0].get(1, 0), 2.0);
        let env = Env { t: 0.0, seg: Some(xi.view()), z: &[0.0] };
        // Σ h_jl q_jl with q = [[1, 1], [1, 1]] → 1 + 2 + 2 + 3
        assert_eq!(sys.h_pairing(0, &env, &[1.0, 1.0, 1.0, 1.0]), 8.0);
    }

    #[test]
    fn grid_alignment() {
        let sys = scalar_system("x1(-0.25)", "0", "0", "0", 0.5, 0.0);
        assert!(sys.validate_grid(0.125).is_ok());
        assert!(sys.validate_grid(0.2).is_err());
    }
}
