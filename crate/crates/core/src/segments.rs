//! Delay segments on the solver grid and the orders `≤`, `≤_N` and the meet.
//!
//! A segment of dimension `d` with `L` delay steps stores `L + 1` grid values
//! `ξ(−r0 + l·dt)`, `l = 0..=L`, row-major (`values[l·d + i]`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Borrowed view of a segment, e.g. a window into a trajectory.
#[derive(Debug, Clone, Copy)]
pub struct SegmentView<'a> {
    pub d: usize,
    pub delay_steps: usize,
    pub dt: f64,
    pub values: &'a [f64],
}

impl<'a> SegmentView<'a> {
    /// Value of component `i` (0-based) at grid offset `l` (`l = L` is `s = 0`).
    #[inline]
    pub fn at(&self, l: usize, i: usize) -> f64 {
        self.values[l * self.d + i]
    }

    #[inline]
    pub fn endpoint(&self, i: usize) -> f64 {
        self.at(self.delay_steps, i)
    }

    /// Component `i` at lag `s ∈ [−r0, 0]`; the lag must be grid-aligned.
    #[inline]
    pub fn at_lag(&self, i: usize, lag: f64) -> f64 {
        let back = (-lag / self.dt).round() as usize;
        self.at(self.delay_steps - back, i)
    }

    pub fn to_owned(&self) -> Segment {
        Segment {
            d: self.d,
            delay_steps: self.delay_steps,
            dt: self.dt,
            values: self.values.to_vec(),
        }
    }

    /// `max_i sup_s |ξ^i(s)|`.
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub d: usize,
    pub delay_steps: usize,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl Segment {
    pub fn new(d: usize, delay_steps: usize, dt: f64, values: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("segment dimension must be >= 1".into()));
        }
        if values.len() != (delay_steps + 1) * d {
            return Err(Error::ShapeMismatch(format!(
                "segment needs {} values, got {}",
                (delay_steps + 1) * d,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("segment values".into()));
        }
        Ok(Self { d, delay_steps, dt, values })
    }

    pub fn constant(d: usize, delay_steps: usize, dt: f64, c: &[f64]) -> Result<Self> {
        if c.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: c.len() });
        }
        let values = (0..=delay_steps).flat_map(|_| c.iter().copied()).collect();
        Self::new(d, delay_steps, dt, values)
    }

    /// Samples `f(s, i)` at the grid points `s = −r0 + l·dt`.
    pub fn from_fn(
        d: usize,
        delay_steps: usize,
        dt: f64,
        f: impl Fn(f64, usize) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity((delay_steps + 1) * d);
        for l in 0..=delay_steps {
            let s = -((delay_steps - l) as f64) * dt;
            for i in 0..d {
                values.push(f(s, i));
            }
        }
        Self::new(d, delay_steps, dt, values)
    }

    pub fn view(&self) -> SegmentView<'_> {
        SegmentView { d: self.d, delay_steps: self.delay_steps, dt: self.dt, values: &self.values }
    }

    pub fn r0(&self) -> f64 {
        self.delay_steps as f64 * self.dt
    }

    pub fn at(&self, l: usize, i: usize) -> f64 {
        self.values[l * self.d + i]
    }

    pub fn set(&mut self, l: usize, i: usize, v: f64) {
        self.values[l * self.d + i] = v;
    }

    pub fn endpoint(&self, i: usize) -> f64 {
        self.at(self.delay_steps, i)
    }

    pub fn len(&self) -> usize {
        self.delay_steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn same_shape(&self, other: &Segment) -> bool {
        self.d == other.d && self.delay_steps == other.delay_steps && self.dt == other.dt
    }
}

/// A neutral functional `N: C([-r0,0]; R^d) → R^d`.
pub trait Neutral {
    fn eval_neutral(&self, seg: SegmentView<'_>, out: &mut [f64]) -> Result<()>;
}

impl<F> Neutral for F
where
    F: Fn(SegmentView<'_>) -> Vec<f64>,
{
    fn eval_neutral(&self, seg: SegmentView<'_>, out: &mut [f64]) -> Result<()> {
        let v = self(seg);
        if v.len() != out.len() {
            return Err(Error::DimensionMismatch { expected: out.len(), got: v.len() });
        }
        out.copy_from_slice(&v);
        Ok(())
    }
}

fn check_shapes(xi: &Segment, eta: &Segment) -> Result<()> {
    if !xi.same_shape(eta) {
        return Err(Error::ShapeMismatch(format!(
            "segments (d={}, L={}, dt={}) and (d={}, L={}, dt={})",
            xi.d, xi.delay_steps, xi.dt, eta.d, eta.delay_steps, eta.dt
        )));
    }
    Ok(())
}

/// `ξ ≤ η`: every grid value, every component.
pub fn leq(xi: &Segment, eta: &Segment) -> Result<bool> {
    check_shapes(xi, eta)?;
    Ok(xi.values.iter().zip(&eta.values).all(|(a, b)| a <= b))
}

/// `ξ ≤_N η`: `ξ ≤ η` and `ξ(0) − N(ξ) ≤ η(0) − N(η)` componentwise.
pub fn leq_n(xi: &Segment, eta: &Segment, n: &dyn Neutral) -> Result<bool> {
    if !leq(xi, eta)? {
        return Ok(false);
    }
    let d = xi.d;
    let (mut nx, mut ne) = (vec![0.0; d], vec![0.0; d]);
    n.eval_neutral(xi.view(), &mut nx)?;
    n.eval_neutral(eta.view(), &mut ne)?;
    Ok((0..d).all(|i| xi.endpoint(i) - nx[i] <= eta.endpoint(i) - ne[i]))
}

/// Pointwise componentwise minimum `ξ ∧ η`.
pub fn meet(xi: &Segment, eta: &Segment) -> Result<Segment> {
    check_shapes(xi, eta)?;
    let values = xi.values.iter().zip(&eta.values).map(|(a, b)| a.min(*b)).collect();
    Ok(Segment { values, ..xi.clone() })
}

/// Window of `L + 1` grid values ending at `t_k`, from a history stored on
/// the `[−r0, T]` grid (row `j` is time `−r0 + j·dt`).
pub fn segment_at(
    history: &[f64],
    d: usize,
    delay_steps: usize,
    dt: f64,
    k: usize,
) -> Result<SegmentView<'_>> {
    let rows = history.len() / d;
    if k + delay_steps >= rows {
        return Err(Error::OutOfRange { index: k, max: rows.saturating_sub(delay_steps + 1) });
    }
    Ok(SegmentView {
        d,
        delay_steps,
        dt,
        values: &history[k * d..(k + delay_steps + 1) * d],
    })
}
