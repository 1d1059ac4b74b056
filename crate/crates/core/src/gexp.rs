//! Sublinear expectations and capacities estimated over finite control
//! families.
//!
//! Every estimate is a supremum of linear Monte Carlo means over the family,
//! so it approximates the true value from below up to sampling error. All
//! controls see the same Wiener stream per sample (common random numbers).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drivers::{
    bang_bang_control, constant_control, ControlKind, DriverPath, StreamKey, TimeGrid,
    VolatilityControl, WienerPath,
};
use crate::error::{Error, Result};
use crate::gcalc::{GBounds, SymMatrix};

pub const DEFAULT_CONSTANT_MEMBERS: usize = 16;
pub const DEFAULT_BANG_BANG_MEMBERS: usize = 16;
pub const DEFAULT_SWITCH_PROB: f64 = 0.1;
/// Two-sided 95% normal quantile used by the Wilson interval.
pub const WILSON_Z: f64 = 1.959_963_984_540_054;

/// How part of a family was generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilySpec {
    /// `n` constants `γ·I`, `γ` log-spaced in `[σ_low², σ_high²]`.
    ConstantGrid { n: usize },
    /// `count` random bang-bang controls with seeds `seed, seed+1, ...`.
    BangBang { count: usize, seed: u64, switch_prob: f64 },
    /// Constant controls with the given scalar variances `γ` (`γ·I`).
    Constants { gammas: Vec<f64> },
}

impl FamilySpec {
    pub fn build(&self, grid: &TimeGrid, bounds: &GBounds) -> Result<Vec<VolatilityControl>> {
        match self {
            FamilySpec::ConstantGrid { n } => constant_grid(*n, bounds),
            FamilySpec::BangBang { count, seed, switch_prob } => (0..*count)
                .map(|j| bang_bang_control(grid, seed.wrapping_add(j as u64), bounds, *switch_prob))
                .collect(),
            FamilySpec::Constants { gammas } => gammas
                .iter()
                .map(|&g| {
                    Ok(constant_control(&SymMatrix::scalar(bounds.dim, g), bounds)?
                        .with_label(format!("constant(gamma={g})")))
                })
                .collect(),
        }
    }
}

fn constant_grid(n: usize, bounds: &GBounds) -> Result<Vec<VolatilityControl>> {
    if n == 0 {
        return Err(Error::InvalidArgument("constant grid needs n >= 1".into()));
    }
    let (lo, hi) = (bounds.var_low(), bounds.var_high());
    let gammas: Vec<f64> = if n == 1 {
        vec![hi]
    } else {
        (0..n)
            .map(|j| match j {
                0 => lo,
                j if j == n - 1 => hi,
                j => lo * (hi / lo).powf(j as f64 / (n - 1) as f64),
            })
            .collect()
    };
    gammas
        .into_iter()
        .map(|g| {
            Ok(constant_control(&SymMatrix::scalar(bounds.dim, g), bounds)?
                .with_label(format!("constant(gamma={g})")))
        })
        .collect()
}

/// A finite set of admissible controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlFamily {
    pub members: Vec<VolatilityControl>,
    pub specs: Vec<FamilySpec>,
}

impl ControlFamily {
    pub fn from_specs(specs: &[FamilySpec], grid: &TimeGrid, bounds: &GBounds) -> Result<Self> {
        let mut members = Vec::new();
        for s in specs {
            members.extend(s.build(grid, bounds)?);
        }
        Ok(Self { members, specs: specs.to_vec() })
    }

    /// 16 log-spaced constants plus 16 bang-bang controls.
    pub fn default_family(grid: &TimeGrid, bounds: &GBounds, seed: u64) -> Result<Self> {
        Self::from_specs(
            &[
                FamilySpec::ConstantGrid { n: DEFAULT_CONSTANT_MEMBERS },
                FamilySpec::BangBang {
                    count: DEFAULT_BANG_BANG_MEMBERS,
                    seed,
                    switch_prob: DEFAULT_SWITCH_PROB,
                },
            ],
            grid,
            bounds,
        )
    }

    pub fn constant_grid(n: usize, bounds: &GBounds) -> Result<Self> {
        Ok(Self { members: constant_grid(n, bounds)?, specs: vec![FamilySpec::ConstantGrid { n }] })
    }

    /// An explicit list; every member is checked for admissibility.
    pub fn explicit(members: Vec<VolatilityControl>, bounds: &GBounds) -> Result<Self> {
        for c in &members {
            c.check_admissible(bounds)?;
        }
        Ok(Self { members, specs: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlStats {
    pub label: String,
    pub mean: f64,
    pub std_error: f64,
    pub n_samples: usize,
    /// 95% Wilson interval, for capacities.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wilson: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GExpEstimate {
    /// Largest per-control mean.
    pub value: f64,
    /// Index of the first control attaining `value`.
    pub argmax: usize,
    pub argmax_label: String,
    pub per_control: Vec<ControlStats>,
    pub n_samples: usize,
    pub master_seed: u64,
    #[serde(skip)]
    pub controls: Vec<VolatilityControl>,
}

impl GExpEstimate {
    pub fn argmax_control(&self) -> &VolatilityControl {
        &self.controls[self.argmax]
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Io(e.to_string()))
    }
}

/// Pairwise (tree) summation in a fixed order.
pub fn pairwise_sum(x: &[f64]) -> f64 {
    if x.len() <= 8 {
        return x.iter().fold(0.0, |a, v| a + v);
    }
    let mid = x.len() / 2;
    pairwise_sum(&x[..mid]) + pairwise_sum(&x[mid..])
}

/// Pairwise mean clamped to the sample range, which makes it exact on
/// constant samples and monotone in the samples.
fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let mean = (pairwise_sum(x) / n).clamp(lo, hi);
    let dev: Vec<f64> = x.iter().map(|v| (v - mean).powi(2)).collect();
    let var = if x.len() > 1 { pairwise_sum(&dev) / (n - 1.0) } else { 0.0 };
    (mean, (var / n).sqrt())
}

/// 95% Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (nf, z2) = (n as f64, WILSON_Z * WILSON_Z);
    let p = k as f64 / nf;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = WILSON_Z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let hi = if k == n { 1.0 } else { (center + half).min(1.0) };
    (lo, hi)
}

fn check_family(family: &ControlFamily, grid: &TimeGrid, n_samples: usize) -> Result<usize> {
    if n_samples < 2 {
        return Err(Error::InvalidArgument("n_samples must be >= 2".into()));
    }
    let Some(first) = family.members.first() else {
        return Err(Error::InvalidArgument("control family is empty".into()));
    };
    let m = first.dim();
    for (j, c) in family.members.iter().enumerate() {
        if c.dim() != m {
            return Err(Error::DimensionMismatch { expected: m, got: c.dim() });
        }
        if !c.covers(grid.steps) {
            return Err(Error::InadmissibleControl {
                step: c.len(),
                reason: format!("control {j} does not cover {} steps", grid.steps),
            });
        }
    }
    Ok(m)
}

/// Evaluates `f` on every (sample, control) pair; rows are samples.
fn sample_matrix<F>(f: &F, controls: &[VolatilityControl], m: usize, n: usize, grid: &TimeGrid, seed: u64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&DriverPath) -> Result<f64> + Sync + ?Sized,
{
    let rows: Vec<Result<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let w = WienerPath::sample(m, grid, StreamKey { master_seed: seed, sample_index: s as u64 });
            controls
                .iter()
                .enumerate()
                .map(|(c, ctl)| {
                    let wrap = |e| Error::Functional { control: c, sample: s, source: Box::new(e) };
                    let drv = DriverPath::from_wiener(&w, ctl).map_err(wrap)?;
                    let v = f(&drv).map_err(wrap)?;
                    if v.is_finite() {
                        Ok(v)
                    } else {
                        Err(wrap(Error::NonFinite("functional value".into())))
                    }
                })
                .collect()
        })
        .collect();
    rows.into_iter().collect()
}

fn column_stats(rows: &[Vec<f64>], c: usize) -> (f64, f64) {
    let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
    mean_and_se(&col)
}

fn assemble(per_control: Vec<ControlStats>, controls: Vec<VolatilityControl>, n: usize, seed: u64) -> GExpEstimate {
    let mut argmax = 0;
    for (j, s) in per_control.iter().enumerate() {
        if s.mean > per_control[argmax].mean {
            argmax = j;
        }
    }
    GExpEstimate {
        value: per_control[argmax].mean,
        argmax,
        argmax_label: per_control[argmax].label.clone(),
        per_control,
        n_samples: n,
        master_seed: seed,
        controls,
    }
}

/// `max_θ (1/n) Σ_s X(driver_θ,s)` over the family.
pub fn estimate_gexp<F>(
    functional: &F,
    family: &ControlFamily,
    n_samples: usize,
    grid: &TimeGrid,
    master_seed: u64,
) -> Result<GExpEstimate>
where
    F: Fn(&DriverPath) -> Result<f64> + Sync + ?Sized,
{
    let m = check_family(family, grid, n_samples)?;
    let rows = sample_matrix(functional, &family.members, m, n_samples, grid, master_seed)?;
    let per_control = family
        .members
        .iter()
        .enumerate()
        .map(|(c, ctl)| {
            let (mean, std_error) = column_stats(&rows, c);
            ControlStats { label: ctl.label.clone(), mean, std_error, n_samples, wilson: None }
        })
        .collect();
    Ok(assemble(per_control, family.members.clone(), n_samples, master_seed))
}

/// `max_θ` of the event frequency, with per-control Wilson intervals.
pub fn estimate_capacity<F>(
    event: &F,
    family: &ControlFamily,
    n_samples: usize,
    grid: &TimeGrid,
    master_seed: u64,
) -> Result<GExpEstimate>
where
    F: Fn(&DriverPath) -> Result<bool> + Sync + ?Sized,
{
    let indicator = |d: &DriverPath| event(d).map(|b| if b { 1.0 } else { 0.0 });
    let mut est = estimate_gexp(&indicator, family, n_samples, grid, master_seed)?;
    for s in &mut est.per_control {
        let k = (s.mean * n_samples as f64).round() as usize;
        s.wilson = Some(wilson_interval(k, n_samples));
    }
    Ok(est)
}

/// Mean of `functional` under one control, on the estimate's streams.
fn control_mean<F>(functional: &F, control: &VolatilityControl, n: usize, grid: &TimeGrid, seed: u64) -> Result<(f64, f64)>
where
    F: Fn(&DriverPath) -> Result<f64> + Sync + ?Sized,
{
    let rows = sample_matrix(functional, std::slice::from_ref(control), control.dim(), n, grid, seed)?;
    Ok(column_stats(&rows, 0))
}

/// Coordinate ascent from the argmax control: each step is flipped between
/// `σ_low·I` and `σ_high·I` and kept when the mean strictly improves under
/// the same streams. `budget` bounds the number of candidate evaluations.
/// The result is never worse than `base`.
pub fn refine_control<F>(
    base: &GExpEstimate,
    functional: &F,
    grid: &TimeGrid,
    bounds: &GBounds,
    budget: usize,
) -> Result<GExpEstimate>
where
    F: Fn(&DriverPath) -> Result<f64> + Sync + ?Sized,
{
    if budget == 0 || base.controls.is_empty() {
        return Ok(base.clone());
    }
    let (n, seed) = (base.n_samples, base.master_seed);
    let mut current = base.argmax_control().expand(grid.steps);
    current.kind = ControlKind::Piecewise;
    let (mut best, mut best_se) = control_mean(functional, &current, n, grid, seed)?;
    let (lo, hi) = (bounds.sigma_low, bounds.sigma_high);
    let mut evals = 0;
    'outer: loop {
        let mut improved = false;
        for k in 0..grid.steps {
            let s = current.scalar_at(k);
            let targets: &[f64] = match s {
                Some(v) if v == hi => &[lo],
                Some(v) if v == lo => &[hi],
                _ => &[hi, lo],
            };
            for &target in targets {
                if evals >= budget {
                    break 'outer;
                }
                evals += 1;
                let mut cand = current.clone();
                cand.set_scalar_step(k, target);
                let (v, se) = control_mean(functional, &cand, n, grid, seed)?;
                if v > best {
                    current = cand;
                    best = v;
                    best_se = se;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            break;
        }
    }
    let mut out = base.clone();
    current.label = format!("refined({})", base.argmax_label);
    out.per_control.push(ControlStats {
        label: current.label.clone(),
        mean: best,
        std_error: best_se,
        n_samples: n,
        wilson: None,
    });
    out.controls.push(current);
    Ok(assemble(out.per_control, out.controls, n, seed))
}
