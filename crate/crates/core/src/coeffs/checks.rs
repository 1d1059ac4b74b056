//! Sampled checks of the structural conditions on a pair of systems.
//!
//! "Pass" means no counterexample was found under the sampler below. Every
//! sample draws its randomness from its own ChaCha stream, and reductions run
//! in sample order, so reports do not depend on the thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CoefficientSystem, NEUTRAL_ZERO_TOL};
use crate::error::{Error, Result};
use crate::gcalc::g_value;
use crate::segments::{Segment, SegmentView};

/// Slack of the (A1) and (H4) comparisons.
pub const A1_TOL: f64 = 1e-9;
pub const H4_TOL: f64 = 1e-9;
/// Tolerance of the `σ = σ̄` comparison.
pub const SIGMA_EQ_TOL: f64 = 1e-12;
/// Tolerance of the hold-`z` perturbation probe.
pub const HOLD_Z_TOL: f64 = 1e-10;
const H2_GRID: usize = 257;
const ENDPOINT_MAX_ITER: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_pairs: usize,
    /// Sampled segment values lie roughly in `[−amplitude, amplitude]`.
    pub amplitude: f64,
    pub seed: u64,
    /// Grid spacing of the sampled segments; `r0` must be a multiple of it.
    pub dt: f64,
    /// Declared (H2) bound `K`, if any.
    #[serde(default)]
    pub k_declared: Option<f64>,
}

impl SamplerConfig {
    pub fn new(n_pairs: usize, amplitude: f64, seed: u64, dt: f64) -> Self {
        Self { n_pairs, amplitude, seed, dt, k_declared: None }
    }

    fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::InvalidArgument("sampler needs n_pairs >= 1".into()));
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(Error::InvalidArgument("sampler amplitude must be > 0".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidArgument("sampler dt must be > 0".into()));
        }
        Ok(())
    }

    fn rng(&self, salt: u64, sample: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.set_stream(sample as u64);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConditionId {
    H1,
    H2,
    H3,
    H4,
    A1,
    A2,
    C2,
}

impl ConditionId {
    fn salt(self) -> u64 {
        self as u64 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

/// The sampled input behind a report's worst margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub t: f64,
    /// 0-based component, for per-component conditions.
    pub component: Option<usize>,
    pub xi: Segment,
    pub eta: Segment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub id: ConditionId,
    pub verdict: Verdict,
    /// Worst margin; negative exactly when the condition is violated. `None`
    /// for conditions that only ask for some finite constant.
    pub margin: Option<f64>,
    /// The estimated constant (`α̂`, `K̂`, `κ̂`, `L̂`) or the worst gap.
    pub statistic: f64,
    pub witness: Option<Witness>,
    /// (A1) only: whether the strict variant holds with the given `strict_eps`.
    pub strict: Option<bool>,
    pub samples: usize,
    pub note: String,
}

impl ConditionReport {
    fn new(id: ConditionId, verdict: Verdict, statistic: f64, samples: usize) -> Self {
        Self { id, verdict, margin: None, statistic, witness: None, strict: None, samples, note: String::new() }
    }
}

struct Sample {
    /// Larger is worse.
    score: f64,
    witness: Witness,
}

/// Runs `f` per sample in parallel and reduces in sample order: returns the
/// worst sample (first index on ties) and the number of samples that could
/// not be evaluated.
fn run_samples<F>(n: usize, f: F) -> (Option<Sample>, usize, usize)
where
    F: Fn(usize) -> Result<Option<Sample>> + Sync,
{
    let outcomes: Vec<Result<Option<Sample>>> = (0..n).into_par_iter().map(&f).collect();
    let mut worst: Option<Sample> = None;
    let (mut failed, mut skipped) = (0, 0);
    for o in outcomes {
        match o {
            Ok(Some(s)) if s.score.is_finite() || s.score == f64::INFINITY => {
                if worst.as_ref().is_none_or(|w| s.score > w.score) {
                    worst = Some(s);
                }
            }
            Ok(Some(_)) | Err(_) => failed += 1,
            Ok(None) => skipped += 1,
        }
    }
    (worst, failed, skipped)
}

fn check_pair(sys: &CoefficientSystem, sysb: &CoefficientSystem) -> Result<()> {
    if !sys.compatible(sysb) {
        return Err(Error::InvalidArgument(
            "systems must share d, m, r0 and bounds".into(),
        ));
    }
    Ok(())
}

fn random_segment(rng: &mut ChaCha8Rng, d: usize, l: usize, dt: f64, amp: f64) -> Segment {
    let n = (l + 1) * d;
    let values = match rng.random_range(0..3u8) {
        0 => (0..n).map(|_| rng.random_range(-amp..=amp)).collect(),
        1 => {
            let mut v = vec![0.0; n];
            let step = amp / ((l + 1) as f64).sqrt();
            for i in 0..d {
                let mut x = rng.random_range(-amp..=amp);
                for r in 0..=l {
                    v[r * d + i] = x;
                    x = (x + rng.random_range(-step..=step)).clamp(-amp, amp);
                }
            }
            v
        }
        _ => {
            let c: Vec<f64> = (0..d).map(|_| rng.random_range(-amp..=amp)).collect();
            (0..n).map(|k| c[k % d]).collect()
        }
    };
    Segment { d, delay_steps: l, dt, values }
}

/// A perturbation with values in `[0, amp]` (`nonneg`) or `[−amp, amp]`.
fn perturbation(rng: &mut ChaCha8Rng, d: usize, l: usize, amp: f64, nonneg: bool) -> Vec<f64> {
    let n = (l + 1) * d;
    let lo = if nonneg { 0.0 } else { -amp };
    match rng.random_range(0..4u8) {
        0 => vec![0.0; n],
        1 => {
            let c: Vec<f64> = (0..d).map(|_| rng.random_range(lo..=amp)).collect();
            (0..n).map(|k| c[k % d]).collect()
        }
        2 => (0..n).map(|_| rng.random_range(lo..=amp)).collect(),
        _ => {
            let mut v = vec![0.0; n];
            v[rng.random_range(0..n)] = rng.random_range(lo..=amp);
            v
        }
    }
}

fn shifted(seg: &Segment, p: &[f64], sign: f64) -> Segment {
    let values = seg.values.iter().zip(p).map(|(a, b)| a + sign * b).collect();
    Segment { values, ..seg.clone() }
}

fn sup_diff(a: &Segment, b: &Segment) -> f64 {
    a.values.iter().zip(&b.values).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn neutral(sys: &CoefficientSystem, seg: &Segment) -> Vec<f64> {
    let mut out = vec![0.0; sys.d];
    sys.neutral_into(seg.view(), &mut out);
    out
}

fn z_of(sys: &CoefficientSystem, seg: &Segment) -> Vec<f64> {
    let mut out = vec![0.0; sys.d];
    sys.z_into(seg.view(), &mut out);
    out
}

/// Sets `ξ^i(0)` so that `ξ^i(0) − N^i(ξ) = target` and returns the final
/// absolute residual.
///
/// The map `u ↦ u − N^i(ξ with ξ^i(0) = u)` is strictly increasing when `N`
/// is a contraction, so a bracket is found by doubling and then bisected.
/// When `N` does not read the current state the solve is a single evaluation.
pub fn endpoint_solve(
    sys: &CoefficientSystem,
    seg: &mut Segment,
    i: usize,
    target: f64,
) -> Result<f64> {
    sys.check_segment(&seg.view())?;
    if i >= sys.d {
        return Err(Error::OutOfRange { index: i, max: sys.d - 1 });
    }
    if !target.is_finite() {
        return Err(Error::NonFinite("endpoint target".into()));
    }
    let l = seg.delay_steps;
    let mut n = vec![0.0; sys.d];
    let mut f = |seg: &mut Segment, u: f64| {
        seg.set(l, i, u);
        sys.neutral_into(seg.view(), &mut n);
        u - n[i] - target
    };
    let tol = 1e-12 * target.abs().max(1.0);

    if !sys.neutral_is_implicit() {
        let u0 = seg.endpoint(i);
        let r = f(seg, u0);
        let u = u0 - r;
        let res = f(seg, u).abs();
        return if res <= tol {
            Ok(res)
        } else {
            Err(Error::FixedPoint { step: 0, residual: res })
        };
    }

    let u0 = seg.endpoint(i);
    let f0 = f(seg, u0);
    if !f0.is_finite() {
        return Err(Error::NonFinite("neutral term during endpoint solve".into()));
    }
    if f0 == 0.0 {
        return Ok(0.0);
    }
    let dir = if f0 < 0.0 { 1.0 } else { -1.0 };
    let mut w = f0.abs().max(f64::MIN_POSITIVE);
    let (mut a, mut b) = (u0, u0 + dir * w);
    let mut fb = f(seg, b);
    let mut it = 0;
    while fb.signum() == f0.signum() && fb != 0.0 {
        it += 1;
        if it > 200 || !fb.is_finite() {
            return Err(Error::FixedPoint { step: 0, residual: fb.abs() });
        }
        a = b;
        w *= 2.0;
        b = u0 + dir * w;
        fb = f(seg, b);
    }
    let (mut lo, mut hi) = if a < b { (a, b) } else { (b, a) };
    let (mut best_u, mut best_r) = (b, fb.abs());
    for _ in 0..ENDPOINT_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(seg, mid);
        if fm.abs() < best_r {
            best_u = mid;
            best_r = fm.abs();
        }
        if fm == 0.0 {
            break;
        }
        if fm < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let res = f(seg, best_u).abs();
    if res <= tol {
        Ok(res)
    } else {
        Err(Error::FixedPoint { step: 0, residual: res })
    }
}

fn sampled_t(rng: &mut ChaCha8Rng, horizon: f64) -> f64 {
    if horizon > 0.0 {
        rng.random_range(0.0..=horizon)
    } else {
        0.0
    }
}

/// Sum of squared coefficient gaps of both systems between `ξ` and `η`.
fn h1_numerator(sys: &CoefficientSystem, sysb: &CoefficientSystem, t: f64, xi: &Segment, eta: &Segment) -> Result<f64> {
    let mut acc = 0.0;
    for s in [sys, sysb] {
        let a = s.eval_system(t, xi.view())?;
        let b = s.eval_system(t, eta.view())?;
        acc += a.b.iter().zip(&b.b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        acc += a.h.iter().zip(&b.h).map(|(x, y)| x.sub(y).frobenius().powi(2)).sum::<f64>();
        acc += (&a.sigma - &b.sigma).norm_squared();
    }
    Ok(acc)
}

fn h2_value(sys: &CoefficientSystem, sysb: &CoefficientSystem, t: f64, zero: &Segment) -> Result<f64> {
    let mut acc = 0.0;
    for s in [sys, sysb] {
        let v = s.eval_system(t, zero.view())?;
        acc += v.b.iter().map(|x| x * x).sum::<f64>();
        acc += v.h.iter().map(|h| h.frobenius().powi(2)).sum::<f64>();
        acc += v.sigma.norm_squared();
    }
    Ok(acc)
}

/// `min_j (N^j(η) − N^j(ξ))`, shifted by the tolerance.
fn h3_margin(sys: &CoefficientSystem, xi: &Segment, eta: &Segment) -> f64 {
    let (nx, ne) = (neutral(sys, xi), neutral(sys, eta));
    nx.iter().zip(&ne).map(|(a, b)| b - a).fold(f64::INFINITY, f64::min) + NEUTRAL_ZERO_TOL
}

fn h4_ratio(sys: &CoefficientSystem, xi: &Segment, eta: &Segment) -> Option<f64> {
    let den = sup_diff(xi, eta);
    if den == 0.0 {
        return None;
    }
    let (nx, ne) = (neutral(sys, xi), neutral(sys, eta));
    Some(nx.iter().zip(&ne).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())) / den)
}

/// Checks (H1) to (H4) on `sys` and `sysb` (the neutral condition on `sys`,
/// whose neutral term the pair is assumed to share).
pub fn check_h1_h4(
    sys: &CoefficientSystem,
    sysb: &CoefficientSystem,
    sampler: &SamplerConfig,
    horizon: f64,
) -> Result<Vec<ConditionReport>> {
    check_pair(sys, sysb)?;
    sampler.validate()?;
    let l = sys.delay_steps(sampler.dt)?;
    let (d, dt, amp) = (sys.d, sampler.dt, sampler.amplitude);
    let mut out = Vec::with_capacity(4);

    // (H1)
    let (worst, failed, _) = run_samples(sampler.n_pairs, |s| {
        let mut rng = sampler.rng(ConditionId::H1.salt(), s);
        let t = sampled_t(&mut rng, horizon);
        let xi = random_segment(&mut rng, d, l, dt, amp);
        let mut p = perturbation(&mut rng, d, l, amp, false);
        if p.iter().all(|v| *v == 0.0) {
            let k = rng.random_range(0..p.len());
            p[k] = amp;
        }
        let eta = shifted(&xi, &p, 1.0);
        let den = sup_diff(&xi, &eta).powi(2);
        let num = h1_numerator(sys, sysb, t, &xi, &eta)?;
        Ok(Some(Sample { score: num / den, witness: Witness { t, component: None, xi, eta } }))
    });
    let alpha = worst.as_ref().map_or(0.0, |w| w.score);
    let mut r = ConditionReport::new(ConditionId::H1, Verdict::Pass, alpha, sampler.n_pairs);
    if failed > 0 || !alpha.is_finite() {
        r.verdict = Verdict::Inconclusive;
        r.note = format!("{failed} samples could not be evaluated");
    } else {
        r.note = format!("estimated Lipschitz constant alpha = {alpha:.6e}");
    }
    r.witness = worst.map(|w| w.witness);
    out.push(r);

    // (H2)
    let zero = Segment::constant(d, l, dt, &vec![0.0; d])?;
    let (worst, failed, _) = run_samples(H2_GRID, |k| {
        let t = horizon * k as f64 / (H2_GRID - 1) as f64;
        let v = h2_value(sys, sysb, t, &zero)?;
        Ok(Some(Sample {
            score: v,
            witness: Witness { t, component: None, xi: zero.clone(), eta: zero.clone() },
        }))
    });
    let k_hat = worst.as_ref().map_or(0.0, |w| w.score);
    let mut r = ConditionReport::new(ConditionId::H2, Verdict::Pass, k_hat, H2_GRID);
    if failed > 0 || !k_hat.is_finite() {
        r.verdict = Verdict::Inconclusive;
        r.note = format!("{failed} time points could not be evaluated");
    }
    if let Some(k) = sampler.k_declared {
        let margin = k - k_hat;
        r.margin = Some(margin);
        if margin < 0.0 {
            r.verdict = Verdict::Fail;
            r.note = format!("sup_t of the zero-segment values {k_hat:.6e} exceeds K = {k}");
        }
    }
    r.witness = worst.map(|w| w.witness);
    out.push(r);

    // (H3)
    let n0 = neutral(sys, &zero);
    let n0_max = n0.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let (worst, failed, _) = run_samples(sampler.n_pairs, |s| {
        let mut rng = sampler.rng(ConditionId::H3.salt(), s);
        let xi = random_segment(&mut rng, d, l, dt, amp);
        let p = perturbation(&mut rng, d, l, amp, true);
        let eta = shifted(&xi, &p, 1.0);
        let m = h3_margin(sys, &xi, &eta);
        if !m.is_finite() {
            return Err(Error::NonFinite("neutral term".into()));
        }
        Ok(Some(Sample { score: -m, witness: Witness { t: 0.0, component: None, xi, eta } }))
    });
    let mono_margin = worst.as_ref().map_or(f64::INFINITY, |w| -w.score);
    let zero_margin = NEUTRAL_ZERO_TOL - n0_max;
    let mut r = ConditionReport::new(ConditionId::H3, Verdict::Pass, (-mono_margin + NEUTRAL_ZERO_TOL).max(0.0), sampler.n_pairs);
    if zero_margin < 0.0 {
        r.verdict = Verdict::Fail;
        r.margin = Some(zero_margin);
        r.witness = Some(Witness { t: 0.0, component: None, xi: zero.clone(), eta: zero.clone() });
        r.note = format!("N(0) = {n0:?}");
    } else {
        r.margin = Some(mono_margin.min(zero_margin));
        if mono_margin < 0.0 {
            r.verdict = Verdict::Fail;
            r.note = "N decreases along an ordered pair".into();
        } else if failed > 0 {
            r.verdict = Verdict::Inconclusive;
            r.note = format!("{failed} samples could not be evaluated");
        }
        r.witness = worst.map(|w| w.witness);
    }
    out.push(r);

    // (H4)
    let (worst, failed, _) = run_samples(sampler.n_pairs, |s| {
        let mut rng = sampler.rng(ConditionId::H4.salt(), s);
        let xi = random_segment(&mut rng, d, l, dt, amp);
        let p = perturbation(&mut rng, d, l, amp, false);
        let eta = shifted(&xi, &p, 1.0);
        match h4_ratio(sys, &xi, &eta) {
            None => Ok(None),
            Some(r) if r.is_finite() => {
                Ok(Some(Sample { score: r, witness: Witness { t: 0.0, component: None, xi, eta } }))
            }
            Some(_) => Err(Error::NonFinite("neutral term".into())),
        }
    });
    let kappa_hat = worst.as_ref().map_or(0.0, |w| w.score);
    let kappa = sys.kappa_declared;
    let margin = kappa + H4_TOL - kappa_hat;
    let mut r = ConditionReport::new(ConditionId::H4, Verdict::Pass, kappa_hat, sampler.n_pairs);
    r.margin = Some(margin);
    r.note = format!("kappa_hat = {kappa_hat:.12}, declared kappa = {kappa}");
    if margin < 0.0 {
        r.verdict = Verdict::Fail;
    } else if failed > 0 {
        r.verdict = Verdict::Inconclusive;
    }
    r.witness = worst.map(|w| w.witness);
    out.push(r);
    Ok(out)
}

/// `b^i(t,ξ) − b̄^i(t,η) + 2G(h^i(t,ξ) − h̄^i(t,η))`.
fn a1_gap(
    sys: &CoefficientSystem,
    sysb: &CoefficientSystem,
    t: f64,
    xi: &Segment,
    eta: &Segment,
    i: usize,
) -> Result<f64> {
    let a = sys.eval_system(t, xi.view())?;
    let b = sysb.eval_system(t, eta.view())?;
    Ok(a.b[i] - b.b[i] + 2.0 * g_value(&a.h[i].sub(&b.h[i]), &sys.bounds)?)
}

/// Draws `η`, then `ξ ≤ η` with `z^i(ξ) = z^i(η)` by an endpoint solve.
/// Returns `None` when the drawn pair violates `ξ ≤_N η` after the solve.
fn a1_pair(
    sys: &CoefficientSystem,
    rng: &mut ChaCha8Rng,
    l: usize,
    dt: f64,
    amp: f64,
    i: usize,
) -> Result<Option<(Segment, Segment)>> {
    let d = sys.d;
    let eta = random_segment(rng, d, l, dt, amp);
    let p = perturbation(rng, d, l, amp, true);
    let mut xi = shifted(&eta, &p, -1.0);
    let target = z_of(sys, &eta)[i];
    endpoint_solve(sys, &mut xi, i, target)?;
    let (zx, ze) = (z_of(sys, &xi), z_of(sys, &eta));
    let ordered = xi.values.iter().zip(&eta.values).all(|(a, b)| a <= b)
        && (0..d).all(|j| j == i || zx[j] <= ze[j]);
    Ok(ordered.then_some((xi, eta)))
}

/// Samples the boundary-constrained gap of (A1). Passes iff the worst gap is
/// at most `1e-9`; the strict variant holds iff it is below `−strict_eps`.
pub fn check_a1(
    sys: &CoefficientSystem,
    sysb: &CoefficientSystem,
    sampler: &SamplerConfig,
    horizon: f64,
    strict_eps: f64,
) -> Result<ConditionReport> {
    check_pair(sys, sysb)?;
    sampler.validate()?;
    if !(strict_eps.is_finite() && strict_eps >= 0.0) {
        return Err(Error::InvalidArgument("strict_eps must be >= 0".into()));
    }
    let l = sys.delay_steps(sampler.dt)?;
    let (d, dt, amp) = (sys.d, sampler.dt, sampler.amplitude);
    let (worst, failed, skipped) = run_samples(sampler.n_pairs, |s| {
        let mut rng = sampler.rng(ConditionId::A1.salt(), s);
        let i = s % d;
        let t = sampled_t(&mut rng, horizon);
        let Some((xi, eta)) = a1_pair(sys, &mut rng, l, dt, amp, i)? else {
            return Ok(None);
        };
        let gap = a1_gap(sys, sysb, t, &xi, &eta, i)?;
        Ok(Some(Sample { score: gap, witness: Witness { t, component: Some(i), xi, eta } }))
    });
    let accepted = sampler.n_pairs - failed - skipped;
    let Some(worst) = worst else {
        let mut r = ConditionReport::new(ConditionId::A1, Verdict::Inconclusive, f64::NAN, 0);
        r.note = format!("no admissible pair ({failed} solves failed, {skipped} rejected)");
        return Ok(r);
    };
    let gap = worst.score;
    let mut r = ConditionReport::new(ConditionId::A1, Verdict::Pass, gap, accepted);
    r.margin = Some(A1_TOL - gap);
    r.strict = Some(gap < -strict_eps);
    r.note = format!("max gap {gap:.6e} over {accepted} pairs ({failed} solves failed, {skipped} rejected)");
    if gap > A1_TOL {
        r.verdict = Verdict::Fail;
    } else if failed > 0 {
        r.verdict = Verdict::Inconclusive;
    }
    r.witness = Some(worst.witness);
    Ok(r)
}

/// Whether every `σ^{ij}` of `sys` references only `t` and `z_i`.
fn sigma_static_ok(sys: &CoefficientSystem) -> bool {
    (0..sys.d).all(|i| {
        (0..sys.m).all(|j| {
            let e = sys.diffusion_expr(i, j);
            e.reads().is_empty() && e.z_refs().iter().all(|&c| c == i + 1)
        })
    })
}

fn sigma_gap(sys: &CoefficientSystem, sysb: &CoefficientSystem, t: f64, xi: &Segment) -> Result<f64> {
    let a = sys.eval_system(t, xi.view())?;
    let b = sysb.eval_system(t, xi.view())?;
    Ok((&a.sigma - &b.sigma).amax())
}

/// Largest `|σ^{ij}(t,ξ) − σ^{ij}(t,η)|` over both systems, for the component
/// `i` whose `z` the pair shares.
fn hold_z_gap(sys: &CoefficientSystem, sysb: &CoefficientSystem, t: f64, xi: &Segment, eta: &Segment, i: usize) -> Result<f64> {
    let mut g = 0.0_f64;
    for s in [sys, sysb] {
        let a = s.eval_system(t, xi.view())?;
        let b = s.eval_system(t, eta.view())?;
        for j in 0..s.m {
            g = g.max((a.sigma[(i, j)] - b.sigma[(i, j)]).abs());
        }
    }
    Ok(g)
}

/// Perturbs `ξ` and re-solves `ξ'^i(0)` so that `z^i(ξ') = z^i(ξ)`.
fn hold_z_pair(
    sys: &CoefficientSystem,
    rng: &mut ChaCha8Rng,
    l: usize,
    dt: f64,
    amp: f64,
    i: usize,
) -> Result<(Segment, Segment)> {
    let xi = random_segment(rng, sys.d, l, dt, amp);
    let mut p = perturbation(rng, sys.d, l, amp, false);
    if p.iter().all(|v| *v == 0.0) {
        for v in p.iter_mut() {
            *v = amp;
        }
    }
    let mut eta = shifted(&xi, &p, 1.0);
    endpoint_solve(sys, &mut eta, i, z_of(sys, &xi)[i])?;
    Ok((xi, eta))
}

/// Checks `σ = σ̄` and that `σ^{ij}` depends only on `t` and `z_i`.
///
/// The dependence part passes on a clean AST scan. Otherwise a numeric probe
/// perturbs segments while holding `z_i` fixed: a change in `σ` fails the
/// check, no change leaves it inconclusive.
pub fn check_a2(
    sys: &CoefficientSystem,
    sysb: &CoefficientSystem,
    sampler: &SamplerConfig,
    horizon: f64,
) -> Result<ConditionReport> {
    check_pair(sys, sysb)?;
    sampler.validate()?;
    let l = sys.delay_steps(sampler.dt)?;
    let (d, dt, amp) = (sys.d, sampler.dt, sampler.amplitude);

    // (i) σ = σ̄
    if sys.diffusion() != sysb.diffusion() {
        let (worst, _, _) = run_samples(sampler.n_pairs, |s| {
            let mut rng = sampler.rng(ConditionId::A2.salt(), s);
            let t = sampled_t(&mut rng, horizon);
            let xi = random_segment(&mut rng, d, l, dt, amp);
            let g = sigma_gap(sys, sysb, t, &xi)?;
            Ok(Some(Sample { score: g, witness: Witness { t, component: None, eta: xi.clone(), xi } }))
        });
        if let Some(w) = worst {
            if w.score > SIGMA_EQ_TOL {
                let mut r = ConditionReport::new(ConditionId::A2, Verdict::Fail, w.score, sampler.n_pairs);
                r.margin = Some(SIGMA_EQ_TOL - w.score);
                r.witness = Some(w.witness);
                r.note = format!("sigma differs from sigma_bar by {:.6e}", w.score);
                return Ok(r);
            }
        }
    }

    // (ii) dependence on t and z_i only
    let static_ok = sigma_static_ok(sys) && sigma_static_ok(sysb);
    if static_ok {
        let mut r = ConditionReport::new(ConditionId::A2, Verdict::Pass, 0.0, sampler.n_pairs);
        r.margin = Some(HOLD_Z_TOL);
        r.note = "diffusion references only t and z_i".into();
        return Ok(r);
    }
    let (worst, failed, _) = run_samples(sampler.n_pairs, |s| {
        let mut rng = sampler.rng(ConditionId::A2.salt() + 16, s);
        let i = s % d;
        let t = sampled_t(&mut rng, horizon);
        let (xi, eta) = hold_z_pair(sys, &mut rng, l, dt, amp, i)?;
        let g = hold_z_gap(sys, sysb, t, &xi, &eta, i)?;
        Ok(Some(Sample { score: g, witness: Witness { t, component: Some(i), xi, eta } }))
    });
    let g = worst.as_ref().map_or(0.0, |w| w.score);
    let mut r = ConditionReport::new(ConditionId::A2, Verdict::Inconclusive, g, sampler.n_pairs);
    r.margin = Some(HOLD_Z_TOL - g);
    if g > HOLD_Z_TOL {
        r.verdict = Verdict::Fail;
        r.note = format!("sigma changes by {g:.6e} with z_i held fixed");
        r.witness = worst.map(|w| w.witness);
    } else {
        r.note = format!(
            "diffusion reads more than t and z_i, but no change found with z_i held fixed ({failed} solves failed)"
        );
    }
    Ok(r)
}

/// Estimates the smallest `L` with
/// `Σ_j |Δσ^{ij}|² + |Δσ̄^{ij}|² ≤ L·|Δz^i|²` and checks `σ = σ̄`.
/// Half the pairs are unconstrained, half hold `z_i` fixed; a positive
/// numerator over a vanishing `Δz^i` makes `L̂` infinite.
pub fn check_c2(
    sys: &CoefficientSystem,
    sysb: &CoefficientSystem,
    sampler: &SamplerConfig,
    horizon: f64,
) -> Result<ConditionReport> {
    check_pair(sys, sysb)?;
    sampler.validate()?;
    let l = sys.delay_steps(sampler.dt)?;
    let (d, dt, amp) = (sys.d, sampler.dt, sampler.amplitude);
    if sys.diffusion() != sysb.diffusion() {
        let a2 = check_a2(sys, sysb, sampler, horizon)?;
        if a2.verdict == Verdict::Fail && a2.witness.as_ref().is_some_and(|w| w.component.is_none()) {
            return Ok(ConditionReport { id: ConditionId::C2, ..a2 });
        }
    }
    let (worst, failed, skipped) = run_samples(sampler.n_pairs, |s| {
        let mut rng = sampler.rng(ConditionId::C2.salt(), s);
        let i = s % d;
        let t = sampled_t(&mut rng, horizon);
        let (xi, eta) = if s % 2 == 0 {
            let xi = random_segment(&mut rng, d, l, dt, amp);
            let p = perturbation(&mut rng, d, l, amp, false);
            let eta = shifted(&xi, &p, 1.0);
            (xi, eta)
        } else {
            hold_z_pair(sys, &mut rng, l, dt, amp, i)?
        };
        let score = c2_ratio(sys, sysb, t, &xi, &eta, i)?;
        Ok(score.map(|score| Sample { score, witness: Witness { t, component: Some(i), xi, eta } }))
    });
    let l_hat = worst.as_ref().map_or(0.0, |w| w.score);
    let mut r = ConditionReport::new(ConditionId::C2, Verdict::Pass, l_hat, sampler.n_pairs - skipped);
    r.note = format!("L_hat = {l_hat:.6e}");
    if l_hat == f64::INFINITY {
        r.verdict = Verdict::Fail;
        r.margin = Some(-1.0);
        r.note = "diffusion changes while z_i is unchanged".into();
        r.witness = worst.map(|w| w.witness);
    } else if failed > 0 {
        r.verdict = Verdict::Inconclusive;
        r.note = format!("{failed} samples could not be evaluated");
    } else {
        r.witness = worst.map(|w| w.witness);
    }
    Ok(r)
}

const C2_ZERO_NUM: f64 = 1e-20;
const C2_ZERO_DEN: f64 = 1e-24;

fn c2_ratio(
    sys: &CoefficientSystem,
    sysb: &CoefficientSystem,
    t: f64,
    xi: &Segment,
    eta: &Segment,
    i: usize,
) -> Result<Option<f64>> {
    let mut num = 0.0;
    for s in [sys, sysb] {
        let a = s.eval_system(t, xi.view())?;
        let b = s.eval_system(t, eta.view())?;
        num += (0..s.m).map(|j| (a.sigma[(i, j)] - b.sigma[(i, j)]).powi(2)).sum::<f64>();
    }
    let den = (z_of(sys, xi)[i] - z_of(sys, eta)[i]).powi(2);
    Ok(if den > C2_ZERO_DEN {
        Some(num / den)
    } else if num > C2_ZERO_NUM {
        Some(f64::INFINITY)
    } else {
        None
    })
}

/// Re-evaluates a report's witness and returns its margin (negative iff the
/// witness violates the condition), or `None` without a witness.
pub fn replay_witness(
    report: &ConditionReport,
    sys: &CoefficientSystem,
    sysb: &CoefficientSystem,
    sampler: &SamplerConfig,
) -> Result<Option<f64>> {
    let Some(w) = &report.witness else {
        return Ok(None);
    };
    let view: SegmentView<'_> = w.xi.view();
    sys.check_segment(&view)?;
    let margin = match report.id {
        ConditionId::H1 => {
            let den = sup_diff(&w.xi, &w.eta).powi(2);
            let alpha = h1_numerator(sys, sysb, w.t, &w.xi, &w.eta)? / den;
            if alpha.is_finite() { 0.0 } else { -1.0 }
        }
        ConditionId::H2 => {
            let v = h2_value(sys, sysb, w.t, &w.xi)?;
            sampler.k_declared.map_or(0.0, |k| k - v)
        }
        ConditionId::H3 => {
            let n0 = neutral(sys, &Segment { values: vec![0.0; w.xi.values.len()], ..w.xi.clone() });
            let zero_margin = NEUTRAL_ZERO_TOL - n0.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            zero_margin.min(h3_margin(sys, &w.xi, &w.eta))
        }
        ConditionId::H4 => {
            let ratio = h4_ratio(sys, &w.xi, &w.eta).unwrap_or(0.0);
            sys.kappa_declared + H4_TOL - ratio
        }
        ConditionId::A1 => {
            let i = w.component.ok_or_else(|| Error::InvalidArgument("A1 witness needs a component".into()))?;
            A1_TOL - a1_gap(sys, sysb, w.t, &w.xi, &w.eta, i)?
        }
        ConditionId::A2 | ConditionId::C2 => match w.component {
            None => SIGMA_EQ_TOL - sigma_gap(sys, sysb, w.t, &w.xi)?,
            Some(i) if report.id == ConditionId::A2 => {
                HOLD_Z_TOL - hold_z_gap(sys, sysb, w.t, &w.xi, &w.eta, i)?
            }
            Some(i) => match c2_ratio(sys, sysb, w.t, &w.xi, &w.eta, i)? {
                Some(r) if r == f64::INFINITY => -1.0,
                _ => 0.0,
            },
        },
    };
    Ok(Some(margin))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::SystemText;
    use crate::gcalc::GBounds;

    const R0: f64 = 0.25;

    fn sys1(drift: &str, h: &str, sigma: &str, neutral: &str, kappa: f64) -> CoefficientSystem {
        let bounds = GBounds::new(1.0, 2.0, 1).unwrap();
        CoefficientSystem::from_text(
            1,
            bounds,
            R0,
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

    fn sampler() -> SamplerConfig {
        SamplerConfig::new(600, 2.0, 7, 1.0 / 32.0)
    }

    fn find(reports: &[ConditionReport], id: ConditionId) -> &ConditionReport {
        reports.iter().find(|r| r.id == id).unwrap()
    }

    #[test]
    fn h4_ratio_is_kappa_for_delayed_neutral() {
        let s = sys1("0", "0", "0", "0.3*x1(-r0)", 0.3);
        let reps = check_h1_h4(&s, &s, &sampler(), 1.0).unwrap();
        let h4 = find(&reps, ConditionId::H4);
        assert_eq!(h4.verdict, Verdict::Pass);
        assert!((h4.statistic - 0.3).abs() < 1e-12, "{}", h4.statistic);
        assert_eq!(find(&reps, ConditionId::H3).verdict, Verdict::Pass);
    }

    #[test]
    fn zero_neutral_is_trivial() {
        let s = sys1("0", "0", "0", "0", 0.0);
        let reps = check_h1_h4(&s, &s, &sampler(), 1.0).unwrap();
        assert_eq!(find(&reps, ConditionId::H3).verdict, Verdict::Pass);
        let h4 = find(&reps, ConditionId::H4);
        assert_eq!(h4.verdict, Verdict::Pass);
        assert_eq!(h4.statistic, 0.0);
    }

    #[test]
    fn reversed_neutral_fails_h3() {
        let s = sys1("0", "0", "0", "-x1(-r0)", 0.5);
        let reps = check_h1_h4(&s, &s, &sampler(), 1.0).unwrap();
        let h3 = find(&reps, ConditionId::H3);
        assert_eq!(h3.verdict, Verdict::Fail);
        let w = h3.witness.as_ref().unwrap();
        assert!(w.xi.values.iter().zip(&w.eta.values).all(|(a, b)| a <= b));
        let m = replay_witness(h3, &s, &s, &sampler()).unwrap().unwrap();
        assert!(m < 0.0);
        assert_eq!(Some(m), h3.margin);
    }

    #[test]
    fn h1_and_h2() {
        let s = sys1("-0.5*z1 + 0.5*x1(-r0)", "0.2*z1", "0.4*z1 + 0.1", "0.3*x1(-r0)", 0.3);
        let mut cfg = sampler();
        let reps = check_h1_h4(&s, &s, &cfg, 1.0).unwrap();
        let h1 = find(&reps, ConditionId::H1);
        assert_eq!(h1.verdict, Verdict::Pass);
        assert!(h1.statistic.is_finite() && h1.statistic > 0.0);
        // |σ(0)|² twice at every t
        assert!((find(&reps, ConditionId::H2).statistic - 0.02).abs() < 1e-15);
        cfg.k_declared = Some(0.01);
        let reps = check_h1_h4(&s, &s, &cfg, 1.0).unwrap();
        let h2 = find(&reps, ConditionId::H2);
        assert_eq!(h2.verdict, Verdict::Fail);
        assert!(replay_witness(h2, &s, &s, &cfg).unwrap().unwrap() < 0.0);
    }

    #[test]
    fn a1_passes_on_delayed_monotone_drift() {
        let s = sys1("1.7*z1 + 0.7*x1(-r0)", "0", "0", "0.3*x1(-r0)", 0.3);
        let r = check_a1(&s, &s, &sampler(), 1.0, 1e-6).unwrap();
        assert_eq!(r.verdict, Verdict::Pass, "{}", r.note);
        assert!(r.statistic.abs() < 1e-12, "max gap {}", r.statistic);
        assert_eq!(r.strict, Some(false));
    }

    #[test]
    fn a1_strict_pass_with_shifted_drift() {
        let s = sys1("x1(-r0)", "0", "0", "0", 0.0);
        let sb = sys1("x1(-r0) + 1", "0", "0", "0", 0.0);
        let r = check_a1(&s, &sb, &sampler(), 1.0, 1e-6).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert_eq!(r.strict, Some(true));
        assert!(r.statistic <= -1.0 + 1e-12);
    }

    #[test]
    fn a1_shift_in_the_wrong_direction_fails() {
        // gap = ξ(−r0) − η(−r0) + 1, which is 1 at ξ = η
        let s = sys1("x1(-r0)", "0", "0", "0", 0.0);
        let sb = sys1("x1(-r0) - 1", "0", "0", "0", 0.0);
        let r = check_a1(&s, &sb, &sampler(), 1.0, 1e-6).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert!((r.statistic - 1.0).abs() < 1e-12);
    }

    #[test]
    fn a1_fails_on_reversed_delay() {
        let s = sys1("-0.7*x1(-r0)", "0", "0", "0", 0.0);
        let r = check_a1(&s, &s, &sampler(), 1.0, 1e-6).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        let w = r.witness.as_ref().unwrap();
        assert!(w.xi.at(0, 0) < w.eta.at(0, 0));
        let m = replay_witness(&r, &s, &s, &sampler()).unwrap().unwrap();
        assert_eq!(Some(m), r.margin);
        assert!(m < 0.0);
    }

    #[test]
    fn a1_counts_the_g_term() {
        // h − h̄ = 1 gives 2G(1) = σ̄² = 4 on top of a zero drift gap
        let s = sys1("0", "1", "0", "0", 0.0);
        let sb = sys1("0", "0", "0", "0", 0.0);
        let r = check_a1(&s, &sb, &sampler(), 1.0, 1e-6).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert!((r.statistic - 4.0).abs() < 1e-12);
        let r = check_a1(&sb, &s, &sampler(), 1.0, 1e-6).unwrap();
        assert!((r.statistic + 1.0).abs() < 1e-12, "2G(-1) = -σ̲²");
    }

    #[test]
    fn a2_examples() {
        let s = sys1("0", "0", "0.4*z1 + 0.1", "0.3*x1(-r0)", 0.3);
        assert_eq!(check_a2(&s, &s, &sampler(), 1.0).unwrap().verdict, Verdict::Pass);

        let d = sys1("0", "0", "0.5*x1(-r0)", "0.3*x1(-r0)", 0.3);
        let r = check_a2(&d, &d, &sampler(), 1.0).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        let m = replay_witness(&r, &d, &d, &sampler()).unwrap().unwrap();
        assert!(m < 0.0);
        let w = r.witness.as_ref().unwrap();
        assert!((z_of(&d, &w.xi)[0] - z_of(&d, &w.eta)[0]).abs() < 1e-12);

        let sb = sys1("0", "0", "0.4*z1 + 0.2", "0.3*x1(-r0)", 0.3);
        let r = check_a2(&s, &sb, &sampler(), 1.0).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert!(replay_witness(&r, &s, &sb, &sampler()).unwrap().unwrap() < 0.0);
    }

    #[test]
    fn a2_numeric_probe_clears_disguised_z() {
        // x1(0) − 0.3·x1(−r0) is z1 written out; the scan flags it, the probe does not
        let s = sys1("0", "0", "x1(0) - 0.3*x1(-r0)", "0.3*x1(-r0)", 0.3);
        let r = check_a2(&s, &s, &sampler(), 1.0).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive, "{}", r.note);
    }

    #[test]
    fn c2_follows_h1_and_a2() {
        let s = sys1("0", "0", "tanh(z1) + 0.1", "0.3*x1(-r0)", 0.3);
        let r = check_c2(&s, &s, &sampler(), 1.0).unwrap();
        assert_eq!(r.verdict, Verdict::Pass);
        assert!(r.statistic.is_finite() && r.statistic <= 2.0 + 1e-9, "{}", r.statistic);

        let d = sys1("0", "0", "0.5*x1(-r0)", "0.3*x1(-r0)", 0.3);
        let r = check_c2(&d, &d, &sampler(), 1.0).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
        assert!(replay_witness(&r, &d, &d, &sampler()).unwrap().unwrap() < 0.0);
    }

    #[test]
    fn endpoint_solve_implicit_neutral() {
        let s = sys1("0", "0", "0", "0.5*tanh(x1(0)) + 0.2*x1(-r0)", 0.7);
        assert!(s.neutral_is_implicit());
        let mut seg = Segment::from_fn(1, 8, 1.0 / 32.0, |t, _| t).unwrap();
        let res = endpoint_solve(&s, &mut seg, 0, 0.8).unwrap();
        assert!(res <= 1e-12);
        assert!((z_of(&s, &seg)[0] - 0.8).abs() <= 1e-12);
    }

    #[test]
    fn reports_are_reproducible() {
        let s = sys1("-0.7*x1(-r0)", "0", "0", "0.3*x1(-r0)", 0.3);
        let a = check_a1(&s, &s, &sampler(), 1.0, 1e-6).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| check_a1(&s, &s, &sampler(), 1.0, 1e-6).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_systems_rejected() {
        let s = sys1("0", "0", "0", "0", 0.0);
        let bounds = GBounds::new(1.0, 3.0, 1).unwrap();
        let other = CoefficientSystem::from_text(
            1,
            bounds,
            R0,
            &SystemText { drift: vec!["0"], h: vec![vec![vec!["0"]]], diffusion: vec![vec!["0"]], neutral: vec!["0"] },
            0.0,
        )
        .unwrap();
        assert!(check_a1(&s, &other, &sampler(), 1.0, 1e-6).is_err());
    }
}
