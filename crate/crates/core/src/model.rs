//! Problem definition: nonlinearity, potentials, conservative noise, cost
//! weights and the admissible control set, plus the pointwise formulas used
//! by the linearized and adjoint solvers.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::space::{Field, Grid, RealField};

/// Sign in front of the nonlinearity: `+1` focusing, `-1` defocusing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Focusing {
    Focusing,
    Defocusing,
}

impl Focusing {
    pub fn from_sign(lambda: f64) -> Result<Self> {
        if lambda == 1.0 {
            Ok(Focusing::Focusing)
        } else if lambda == -1.0 {
            Ok(Focusing::Defocusing)
        } else {
            Err(Error::invalid("lambda", format!("must be +1 or -1, got {lambda}")))
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Focusing::Focusing => 1.0,
            Focusing::Defocusing => -1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhysicsSpec {
    pub lambda: Focusing,
    pub alpha: f64,
    pub v0: RealField,
    /// Control potentials `V_1..V_m`.
    pub controls: Vec<RealField>,
}

impl PhysicsSpec {
    pub fn control_dim(&self) -> usize {
        self.controls.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha", format!("must exceed 1, got {}", self.alpha)));
        }
        if self.controls.is_empty() {
            return Err(Error::invalid("controls", "at least one control potential is required"));
        }
        let g = self.v0.grid();
        for v in &self.controls {
            if v.grid() != g {
                return Err(Error::GridMismatch);
            }
        }
        Ok(())
    }

    /// `V_0 + Σ_j u_j V_j` at every node.
    pub fn total_potential(&self, u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.v0.values());
        for (uj, vj) in u.iter().zip(&self.controls) {
            if *uj != 0.0 {
                out.iter_mut()
                    .zip(vj.values())
                    .for_each(|(o, v)| *o += uj * v);
            }
        }
    }
}

/// Conservative noise `W(t,ξ) = Σ_j i m_j e_j(ξ) β_j(t)`; only the moduli
/// `m_j` are stored so `Re μ_j = 0` holds by construction.
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    pub intensities: Vec<f64>,
    pub profiles: Vec<RealField>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn off(seed: u64) -> Self {
        Self {
            intensities: Vec::new(),
            profiles: Vec::new(),
            seed,
        }
    }

    /// `N` drivers with constant unit profiles.
    pub fn constant(grid: &Arc<Grid>, intensities: &[f64], seed: u64) -> Self {
        Self {
            intensities: intensities.to_vec(),
            profiles: intensities.iter().map(|_| RealField::constant(grid, 1.0)).collect(),
            seed,
        }
    }

    pub fn drivers(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_off(&self) -> bool {
        self.intensities.iter().all(|m| *m == 0.0)
    }

    pub fn constant_profiles(&self) -> bool {
        self.profiles.iter().all(RealField::is_constant)
    }

    pub fn validate(&self) -> Result<()> {
        if self.intensities.len() != self.profiles.len() {
            return Err(Error::invalid(
                "noise",
                format!(
                    "{} intensities but {} profiles",
                    self.intensities.len(),
                    self.profiles.len()
                ),
            ));
        }
        if let Some(m) = self.intensities.iter().find(|m| !(**m >= 0.0 && m.is_finite())) {
            return Err(Error::invalid("noise.intensities", format!("must be >= 0, got {m}")));
        }
        Ok(())
    }
}

/// `μ(ξ) = ½ Σ_j m_j² e_j(ξ)²`.
pub fn mu_field(noise: &NoiseSpec, grid: &Arc<Grid>) -> RealField {
    let mut out = vec![0.0; grid.len()];
    for (m, e) in noise.intensities.iter().zip(&noise.profiles) {
        let c = 0.5 * m * m;
        out.iter_mut()
            .zip(e.values())
            .for_each(|(o, ej)| *o += c * ej * ej);
    }
    RealField::from_raw(grid, out)
}

/// `h₁(z) = ∂_z(|z|^{α-1}z) = (α+1)/2 · |z|^{α-1}`.
pub fn h1(z: Complex64, alpha: f64) -> Complex64 {
    Complex64::new(h1_real(z, alpha), 0.0)
}

pub(crate) fn h1_real(z: Complex64, alpha: f64) -> f64 {
    let r = z.norm();
    if r == 0.0 {
        return 0.0;
    }
    0.5 * (alpha + 1.0) * r.powf(alpha - 1.0)
}

/// `h₂(z) = ∂_{z̄}(|z|^{α-1}z) = (α-1)/2 · |z|^{α-3} z²`, extended by 0 at
/// `z = 0`.
pub fn h2(z: Complex64, alpha: f64) -> Complex64 {
    let r2 = z.norm_sqr();
    if r2 == 0.0 {
        return Complex64::new(0.0, 0.0);
    }
    // |z|^{α-3} z² = |z|^{α-1} (z/|z|)²
    let r = r2.sqrt();
    let phase = z / r;
    phase * phase * (0.5 * (alpha - 1.0) * r.powf(alpha - 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum AdmissibleSet {
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl AdmissibleSet {
    pub fn interval(lower: f64, upper: f64) -> Self {
        AdmissibleSet::Box {
            lower: vec![lower],
            upper: vec![upper],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AdmissibleSet::Box { lower, upper } => {
                if lower.len() != upper.len() || lower.is_empty() {
                    return Err(Error::invalid("control.admissible", "lower/upper length mismatch"));
                }
                for (a, b) in lower.iter().zip(upper) {
                    if !(a.is_finite() && b.is_finite() && a <= b) {
                        return Err(Error::invalid(
                            "control.admissible",
                            format!("need finite a <= b, got [{a}, {b}]"),
                        ));
                    }
                }
            }
            AdmissibleSet::Ball { center, radius } => {
                if center.is_empty() || !(radius.is_finite() && *radius > 0.0) {
                    return Err(Error::invalid("control.admissible", "ball needs a center and radius > 0"));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            AdmissibleSet::Box { lower, .. } => lower.len(),
            AdmissibleSet::Ball { center, .. } => center.len(),
        }
    }

    /// Euclidean diameter `D_U`.
    pub fn diameter(&self) -> f64 {
        match self {
            AdmissibleSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(a, b)| (b - a) * (b - a))
                .sum::<f64>()
                .sqrt(),
            AdmissibleSet::Ball { radius, .. } => 2.0 * radius,
        }
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        const SLACK: f64 = 1e-12;
        match self {
            AdmissibleSet::Box { lower, upper } => v
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(x, (a, b))| *x >= a - SLACK && *x <= b + SLACK),
            AdmissibleSet::Ball { center, radius } => {
                let d2: f64 = v.iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum();
                d2.sqrt() <= radius * (1.0 + SLACK) + SLACK
            }
        }
    }

    /// Euclidean projection `P_U`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        self.project_in_place(&mut out);
        out
    }

    pub fn project_in_place(&self, v: &mut [f64]) {
        match self {
            AdmissibleSet::Box { lower, upper } => {
                for (x, (a, b)) in v.iter_mut().zip(lower.iter().zip(upper)) {
                    *x = x.clamp(*a, *b);
                }
            }
            AdmissibleSet::Ball { center, radius } => {
                let d2: f64 = v.iter().zip(center).map(|(x, c)| (x - c) * (x - c)).sum();
                let d = d2.sqrt();
                if d > *radius {
                    let s = radius / d;
                    for (x, c) in v.iter_mut().zip(center) {
                        *x = c + (*x - c) * s;
                    }
                }
            }
        }
    }
}

/// Free functions mirroring the method, for call sites that read better this way.
pub fn project(set: &AdmissibleSet, v: &[f64]) -> Vec<f64> {
    set.project(v)
}

/// Running target `𝕏₁(t)`.
#[derive(Debug, Clone)]
pub enum RunningTarget {
    Zero,
    Static(Field),
    /// One field per time node `t_0..t_K`.
    Trajectory(Vec<Field>),
}

impl RunningTarget {
    pub fn at(&self, k: usize) -> Option<&Field> {
        match self {
            RunningTarget::Zero => None,
            RunningTarget::Static(f) => Some(f),
            RunningTarget::Trajectory(v) => v.get(k),
        }
    }

    pub fn check_steps(&self, steps: usize) -> Result<()> {
        if let RunningTarget::Trajectory(v) = self {
            if v.len() < steps + 1 {
                return Err(Error::invalid(
                    "cost.running_target",
                    format!("trajectory has {} nodes, simulation needs {}", v.len(), steps + 1),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CostSpec {
    pub gamma1: f64,
    pub gamma2: f64,
    pub gamma3: f64,
    pub terminal_target: Field,
    pub running_target: RunningTarget,
}

impl CostSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, g) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("gamma3", self.gamma3)] {
            if !(g >= 0.0 && g.is_finite()) {
                return Err(Error::invalid(format!("cost.{name}"), format!("must be >= 0, got {g}")));
            }
        }
        Ok(())
    }

    pub fn require_positive_gamma2(&self) -> Result<()> {
        if self.gamma2 > 0.0 {
            Ok(())
        } else {
            Err(Error::invalid(
                "cost.gamma2",
                "must be > 0 for the optimizer and the maximum principle",
            ))
        }
    }
}

/// Everything needed to simulate and optimize one controlled system.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: Arc<Grid>,
    pub physics: PhysicsSpec,
    pub noise: NoiseSpec,
    pub cost: CostSpec,
    pub admissible: AdmissibleSet,
    pub initial: Field,
    pub horizon: f64,
}

impl Problem {
    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        self.noise.validate()?;
        self.cost.validate()?;
        self.admissible.validate()?;
        if self.admissible.dim() != self.physics.control_dim() {
            return Err(Error::invalid(
                "control.admissible",
                format!(
                    "set has dimension {} but there are {} control potentials",
                    self.admissible.dim(),
                    self.physics.control_dim()
                ),
            ));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return Err(Error::invalid("control.horizon", "must be >= 0"));
        }
        let g = &self.grid;
        if self.physics.v0.grid() != g
            || self.initial.grid() != g
            || self.cost.terminal_target.grid() != g
            || self.noise.profiles.iter().any(|p| p.grid() != g)
        {
            return Err(Error::GridMismatch);
        }
        if !self.initial.is_finite() {
            return Err(Error::invalid("physics.initial", "non-finite initial state"));
        }
        Ok(())
    }

    pub fn control_dim(&self) -> usize {
        self.physics.control_dim()
    }

    /// Number of steps for a given `Δt`; the horizon must be a multiple of it.
    pub fn steps_for(&self, dt: f64) -> Result<usize> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
        }
        let k = (self.horizon / dt).round();
        if ((k * dt) - self.horizon).abs() > 1e-9 * self.horizon.max(1.0) {
            return Err(Error::invalid(
                "dt",
                format!("horizon {} is not a multiple of dt = {dt}", self.horizon),
            ));
        }
        Ok(k as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HypothesisStatus {
    Satisfied,
    /// Holds as far as the grid can tell; decay at infinity cannot be certified.
    Assumed(String),
    Violated(String),
}

impl HypothesisStatus {
    pub fn holds(&self) -> bool {
        !matches!(self, HypothesisStatus::Violated(_))
    }
}

impl fmt::Display for HypothesisStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HypothesisStatus::Satisfied => write!(f, "satisfied"),
            HypothesisStatus::Assumed(r) => write!(f, "assumed ({r})"),
            HypothesisStatus::Violated(r) => write!(f, "violated ({r})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HypothesisReport {
    pub h0: HypothesisStatus,
    pub h1: HypothesisStatus,
    pub h2: HypothesisStatus,
}

/// Checks the well-posedness hypotheses. Profile decay is only classified as
/// "constant" (trivially decaying derivatives) or "assumed".
pub fn check_hypotheses(physics: &PhysicsSpec, noise: &NoiseSpec, d: usize) -> HypothesisReport {
    use HypothesisStatus::*;
    let alpha = physics.alpha;
    let df = d as f64;
    let mass_critical = 1.0 + 4.0 / df;
    let energy_critical = if d <= 2 {
        f64::INFINITY
    } else {
        1.0 + 4.0 / (df - 2.0)
    };
    let constant = noise.constant_profiles();
    let decay = |s: HypothesisStatus| match s {
        Satisfied if !constant => Assumed("non-constant noise profiles: decay at infinity not checkable on a grid".into()),
        other => other,
    };

    let h0 = if alpha > 1.0 && alpha < mass_critical {
        decay(Satisfied)
    } else {
        Violated(format!("needs 1 < alpha < {mass_critical}, alpha = {alpha}"))
    };

    let h1 = match physics.lambda {
        Focusing::Defocusing if alpha > 1.0 && alpha < energy_critical => decay(Satisfied),
        Focusing::Defocusing => Violated(format!(
            "defocusing needs 1 < alpha < {energy_critical}, alpha = {alpha}"
        )),
        Focusing::Focusing if alpha > 1.0 && alpha < mass_critical => decay(Satisfied),
        Focusing::Focusing => Violated(format!(
            "focusing needs 1 < alpha < {mass_critical}, alpha = {alpha}"
        )),
    };

    let h2 = if !(1..=3).contains(&d) {
        Violated(format!("needs 1 <= d <= 3, d = {d}"))
    } else if !(alpha >= 2.0 && alpha < mass_critical) {
        Violated(format!("needs 2 <= alpha < {mass_critical}, alpha = {alpha}"))
    } else if !constant {
        Violated("noise profiles must be constant".into())
    } else {
        Satisfied
    };

    HypothesisReport { h0, h1, h2 }
}

/// Direct cost evaluation versus the expanded form that uses conservation of
/// `|X(t)|₂`.
#[derive(Debug, Clone)]
pub struct CostIdentityReport {
    pub direct: f64,
    pub reduced: f64,
    pub max_relative_discrepancy: f64,
    pub max_mass_drift: f64,
    pub mass_conserved: bool,
}

/// Compares, path by path, the directly evaluated cost with
/// `|x|²(1 + γ₁T) + |𝕏_T|² + γ₁∫|𝕏₁|² - 2Re⟨X(T),𝕏_T⟩ - 2γ₁∫Re⟨X,𝕏₁⟩ + control terms`.
/// `trajectories[p]` holds the states `X(t_0..t_K)` of path `p`.
pub fn reduced_cost_terms(
    trajectories: &[&[Field]],
    control: &[f64],
    control_dim: usize,
    cost: &CostSpec,
    dt: f64,
    mass_tolerance: f64,
) -> Result<CostIdentityReport> {
    if trajectories.is_empty() {
        return Err(Error::invalid("ensemble", "empty ensemble"));
    }
    let control_terms = control_cost(control, control_dim, cost, dt);
    let mut direct_sum = 0.0;
    let mut reduced_sum = 0.0;
    let mut max_rel = 0.0f64;
    let mut max_drift = 0.0f64;
    for states in trajectories {
        let steps = states.len() - 1;
        let x0 = states[0].norm_sq();
        for s in states.iter() {
            let drift = if x0 > 0.0 { (s.norm_sq().sqrt() - x0.sqrt()).abs() / x0.sqrt() } else { s.mass() };
            max_drift = max_drift.max(drift);
        }
        let xt = &states[steps];
        let direct_terminal = xt.distance(&cost.terminal_target).powi(2);
        let reduced_terminal = x0 + cost.terminal_target.norm_sq()
            - 2.0 * xt.real_inner(&cost.terminal_target);
        let mut direct_running = 0.0;
        let mut reduced_running = 0.0;
        for (k, s) in states.iter().take(steps).enumerate() {
            match cost.running_target.at(k) {
                Some(target) => {
                    direct_running += s.distance(target).powi(2) * dt;
                    reduced_running +=
                        (x0 + target.norm_sq() - 2.0 * s.real_inner(target)) * dt;
                }
                None => {
                    direct_running += s.norm_sq() * dt;
                    reduced_running += x0 * dt;
                }
            }
        }
        let direct = direct_terminal + cost.gamma1 * direct_running + control_terms;
        let reduced = reduced_terminal + cost.gamma1 * reduced_running + control_terms;
        max_rel = max_rel.max((direct - reduced).abs() / direct.abs().max(1e-300).max(1.0));
        direct_sum += direct;
        reduced_sum += reduced;
    }
    let m = trajectories.len() as f64;
    Ok(CostIdentityReport {
        direct: direct_sum / m,
        reduced: reduced_sum / m,
        max_relative_discrepancy: max_rel,
        max_mass_drift: max_drift,
        mass_conserved: max_drift <= mass_tolerance,
    })
}

/// `γ₂ Σ|u_k|²Δt + γ₃ Σ|(u_{k+1}-u_k)/Δt|²Δt` for a flat cell-major control.
pub fn control_cost(control: &[f64], control_dim: usize, cost: &CostSpec, dt: f64) -> f64 {
    let energy: f64 = control.iter().map(|v| v * v).sum::<f64>() * dt;
    let mut total = cost.gamma2 * energy;
    if cost.gamma3 > 0.0 && control.len() > control_dim {
        let cells = control.len() / control_dim;
        let mut rough = 0.0;
        for k in 0..cells - 1 {
            for j in 0..control_dim {
                let du = (control[(k + 1) * control_dim + j] - control[k * control_dim + j]) / dt;
                rough += du * du * dt;
            }
        }
        total += cost.gamma3 * rough;
    }
    total
}
