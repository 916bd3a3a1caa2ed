//! Strichartz exponent pairs and the space-time norm `‖X‖_{L^q(0,T;L^p)}`.
//!
//! Exponents are exact rationals (or `∞`) so the scaling relation
//! `2/q = d/2 - d/p` is checked without rounding.

use std::fmt;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};

use super::field::Field;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Exponent {
    Finite(Rational64),
    Infinite,
}

impl Exponent {
    pub fn int(v: i64) -> Self {
        Exponent::Finite(Rational64::from_integer(v))
    }

    /// `1/p`, zero for `∞`.
    pub fn reciprocal(&self) -> Rational64 {
        match self {
            Exponent::Finite(p) => p.recip(),
            Exponent::Infinite => Rational64::from_integer(0),
        }
    }

    pub fn to_f64(&self) -> f64 {
        match self {
            Exponent::Finite(p) => *p.numer() as f64 / *p.denom() as f64,
            Exponent::Infinite => f64::INFINITY,
        }
    }

    fn at_least(&self, v: i64) -> bool {
        match self {
            Exponent::Finite(p) => *p >= Rational64::from_integer(v),
            Exponent::Infinite => true,
        }
    }
}

impl fmt::Display for Exponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exponent::Finite(p) => write!(f, "{p}"),
            Exponent::Infinite => write!(f, "inf"),
        }
    }
}

/// Scaling relation plus the range constraints: `(p,q) ∈ [2,∞]×[2,∞]` for
/// `d ≠ 2`, and `(p,q) ∈ [2,∞)×(2,∞]` for `d = 2`.
pub fn is_admissible_pair(p: Exponent, q: Exponent, d: usize) -> bool {
    if d == 0 || !p.at_least(2) || !q.at_least(2) {
        return false;
    }
    if d == 2 {
        if p == Exponent::Infinite {
            return false;
        }
        if q == Exponent::int(2) {
            return false;
        }
    }
    let dd = Rational64::from_integer(d as i64);
    let lhs = Rational64::from_integer(2) * q.reciprocal();
    let rhs = dd / Rational64::from_integer(2) - dd * p.reciprocal();
    lhs == rhs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrichartzPair {
    p: Exponent,
    q: Exponent,
    dim: usize,
}

impl StrichartzPair {
    pub fn new(p: Exponent, q: Exponent, dim: usize) -> Result<Self> {
        if is_admissible_pair(p, q, dim) {
            Ok(Self { p, q, dim })
        } else {
            Err(Error::invalid(
                "strichartz pair",
                format!("({p}, {q}) is not admissible in dimension {dim}"),
            ))
        }
    }

    /// `(α+1, 4(α+1)/(d(α-1)))`, the pair matched to the nonlinearity.
    pub fn canonical(alpha: Rational64, dim: usize) -> Result<Self> {
        let one = Rational64::from_integer(1);
        if alpha <= one {
            return Err(Error::invalid("alpha", "must exceed 1"));
        }
        let p = alpha + one;
        let q = Rational64::from_integer(4) * p
            / (Rational64::from_integer(dim as i64) * (alpha - one));
        Self::new(Exponent::Finite(p), Exponent::Finite(q), dim)
    }

    pub fn p(&self) -> Exponent {
        self.p
    }

    pub fn q(&self) -> Exponent {
        self.q
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

/// `θ = 1 - d(α-1)/4`, the Hölder-in-time exponent of the nonlinear term.
pub fn holder_exponent(alpha: Rational64, dim: usize) -> Rational64 {
    Rational64::from_integer(1)
        - Rational64::from_integer(dim as i64) * (alpha - Rational64::from_integer(1))
            / Rational64::from_integer(4)
}

/// `(Σ_k ‖X(t_k)‖_{L^p}^q Δt)^{1/q}` over the left-endpoint nodes, max over
/// `k` when `q = ∞`. The last snapshot closes the interval and is not summed.
pub fn strichartz_norm(snapshots: &[Field], dt: f64, pair: &StrichartzPair) -> Result<f64> {
    let Some(first) = snapshots.first() else {
        return Ok(0.0);
    };
    if first.grid().dim() != pair.dim() {
        return Err(Error::invalid(
            "strichartz pair",
            format!(
                "pair built for d={} but grid has d={}",
                pair.dim(),
                first.grid().dim()
            ),
        ));
    }
    let p = pair.p().to_f64();
    let cells = if snapshots.len() > 1 {
        &snapshots[..snapshots.len() - 1]
    } else {
        snapshots
    };
    let norms = cells
        .iter()
        .map(|f| f.lp_norm(p))
        .collect::<Result<Vec<_>>>()?;
    match pair.q() {
        Exponent::Infinite => Ok(norms.iter().copied().fold(0.0, f64::max)),
        q => {
            let q = q.to_f64();
            let s: f64 = norms.iter().map(|n| n.powf(q) * dt).sum();
            Ok(s.powf(1.0 / q))
        }
    }
}
