//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use gnsfde::cli::{Experiment, ExperimentConfig};
use gnsfde::coeffs::{CoefficientSystem, SystemText};
use gnsfde::gcalc::GBounds;

/// 5-point Gauss-Legendre nodes and weights on [-1, 1].
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// `∫_a^b f`, splitting at `breaks` and applying Gauss-Legendre per piece.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64]) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut pts = vec![a];
    pts.extend(breaks.iter().copied().filter(|&x| x > a && x < b));
    pts.push(b);
    pts.windows(2)
        .map(|w| {
            let (mid, half) = ((w[0] + w[1]) / 2.0, (w[1] - w[0]) / 2.0);
            half * GL_NODES.iter().zip(GL_WEIGHTS).map(|(x, wt)| wt * f(mid + half * x)).sum::<f64>()
        })
        .sum()
}

/// The second derivative as displayed, written out piecewise.
pub fn psi_second(n: u32, s: f64) -> f64 {
    let n = n as f64;
    if s <= 0.0 || s >= 1.0 / n {
        0.0
    } else if s <= 0.5 / n {
        4.0 * n * n * s
    } else {
        -4.0 * n * n * (s - 1.0 / n)
    }
}

/// `(ψₙ(s), ψₙ'(s))` by integrating `ψₙ''` twice from 0.
pub fn psi_by_quadrature(n: u32, s: f64) -> (f64, f64) {
    let nf = n as f64;
    let breaks = [0.0, 0.5 / nf, 1.0 / nf];
    let d1 = |u: f64| integrate(&|v| psi_second(n, v), 0.0, u, &breaks);
    (integrate(&d1, 0.0, s, &breaks), d1(s))
}

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(format!("{name}.json"))
}

pub fn scenario(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&scenario_path(name)).expect("scenario config")
}

pub fn build(cfg: &ExperimentConfig) -> Experiment {
    cfg.build().expect("scenario builds")
}

/// Scalar system with `d = m = 1`, bounds `[1, 2]`.
pub fn scalar_system(drift: &str, h: &str, sigma: &str, neutral: &str, r0: f64, kappa: f64) -> CoefficientSystem {
    CoefficientSystem::from_text(
        1,
        GBounds::new(1.0, 2.0, 1).unwrap(),
        r0,
        &SystemText { drift: vec![drift], h: vec![vec![vec![h]]], diffusion: vec![vec![sigma]], neutral: vec![neutral] },
        kappa,
    )
    .unwrap()
}
