//! Seeded random test inputs for the gradient and duality checks: smooth
//! control pairs `(u, ũ)` and space-time sources `Ψ`.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::dynamics::ControlPath;
use crate::error::Result;
use crate::model::{AdmissibleSet, Problem};
use crate::space::Field;

/// Fraction of the admissible radius that `u` may occupy; `u ± εũ` stays
/// feasible for `ε ≤ 1 - FILL` times that radius.
const FILL: f64 = 0.4;

struct Draws(ChaCha12Rng);

impl Draws {
    fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Draws(rng)
    }

    fn uniform(&mut self, a: f64, b: f64) -> f64 {
        let x = (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        a + (b - a) * x
    }
}

/// Smooth scalar function of `s ∈ [0, 1]` with values in `[-1, 1]`.
fn smooth_profile(draws: &mut Draws) -> impl Fn(f64) -> f64 {
    let modes: Vec<(f64, f64, f64)> = (1..=3)
        .map(|n| (n as f64, draws.uniform(-1.0, 1.0), draws.uniform(0.0, 2.0 * PI)))
        .collect();
    let total: f64 = modes.iter().map(|m| m.1.abs()).sum::<f64>().max(1e-12);
    move |s| modes.iter().map(|(n, a, ph)| a * (2.0 * PI * n * s + ph).sin()).sum::<f64>() / total
}

/// Random feasible `u` well inside `U` and a direction `ũ` with entries in
/// `[-1, 1]`, both piecewise constant on `cells` cells of width `dt`.
pub fn control_pair(seed: u64, index: u64, set: &AdmissibleSet, cells: usize, dt: f64) -> Result<(ControlPath, ControlPath)> {
    let m = set.dim();
    let mut draws = Draws::new(seed, 2 * index);
    let base: Vec<_> = (0..m).map(|_| smooth_profile(&mut draws)).collect();
    let dir: Vec<_> = (0..m).map(|_| smooth_profile(&mut draws)).collect();
    let mid = |k: usize| (k as f64 + 0.5) / cells as f64;

    let mut u = Vec::with_capacity(cells * m);
    for k in 0..cells {
        let s = mid(k);
        match set {
            AdmissibleSet::Box { lower, upper } => {
                for j in 0..m {
                    let (c, h) = (0.5 * (lower[j] + upper[j]), 0.5 * (upper[j] - lower[j]));
                    u.push(c + FILL * h * base[j](s));
                }
            }
            AdmissibleSet::Ball { center, radius } => {
                let scale = FILL * radius / (m as f64).sqrt();
                for j in 0..m {
                    u.push(center[j] + scale * base[j](s));
                }
            }
        }
    }
    let du = (0..cells).flat_map(|k| dir.iter().map(move |f| f(mid(k)))).collect();
    Ok((
        ControlPath::admissible(u, m, dt, set)?,
        ControlPath::new(du, m, dt)?,
    ))
}

/// Gaussian wave packet `Ψ` with a smooth time envelope, evaluated at cell
/// midpoints: `source[k] = Ψ(t_k + Δt/2)`.
pub fn bump_source(seed: u64, problem: &Problem, steps: usize, dt: f64) -> Vec<Field> {
    let grid = &problem.grid;
    let l = grid.half_extent();
    let mut draws = Draws::new(seed, u64::MAX);
    let c0 = draws.uniform(-0.25 * l, 0.25 * l);
    let c1 = if grid.dim() == 2 { draws.uniform(-0.25 * l, 0.25 * l) } else { 0.0 };
    let width = draws.uniform(0.1, 0.2) * l;
    let kappa = draws.uniform(-2.0, 2.0);
    let envelope = smooth_profile(&mut draws);
    let packet = Field::from_fn(grid, |x| {
        let r2 = (x[0] - c0).powi(2) + (x[1] - c1).powi(2);
        Complex64::from_polar((-r2 / (width * width)).exp(), kappa * x[0])
    });
    let horizon = steps as f64 * dt;
    (0..steps)
        .map(|k| {
            let s = (k as f64 + 0.5) * dt / horizon;
            packet.scaled(Complex64::new(1.0 + 0.5 * envelope(s), 0.0))
        })
        .collect()
}
