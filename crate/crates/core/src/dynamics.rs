//! Split-step Fourier integration of the controlled state equation, its
//! tangent-linear (variation) equation and the dual test equation.
//!
//! One Strang step from `X_k` reads
//!
//! ```text
//! a = D X_k                       D: half free flow, symbol e^{i|κ|²Δt/2}
//! b = a · e^{-iθ},   θ = Δt(λ|a|^{α-1} + V₀ + u_k·V)
//! c = b · e^{ΔW_k},  ΔW_k = i Σ_j m_j e_j Δβ_{j,k}
//! X_{k+1} = D c
//! ```
//!
//! and each substep is unitary pointwise or in Fourier space, so mass is
//! conserved to roundoff. The variation solver differentiates this map
//! exactly, which makes it the tangent of the discrete flow.

use std::fmt::Write as _;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{h2, AdmissibleSet, PhysicsSpec, Problem};
use crate::paths::{increment_phase, wiener_phase, BrownianPath};
use crate::space::{Field, Grid};

/// Pointwise blow-up proxy on `max |X|`.
pub const BLOWUP_THRESHOLD: f64 = 1e6;

/// Relative mass drift beyond which a conservative run is declared broken.
const MASS_ABORT: f64 = 1e-8;

/// Piecewise-constant control `u_k ∈ ℝᵐ` on cells `[t_k, t_{k+1})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    dt: f64,
    dim: usize,
    /// `values[k * dim + j] = u_{k,j}`.
    values: Vec<f64>,
}

impl ControlPath {
    /// Any real path, used for directions `ũ` which need not lie in `U`.
    pub fn new(values: Vec<f64>, dim: usize, dt: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("control", "dimension must be >= 1"));
        }
        if !values.len().is_multiple_of(dim) {
            return Err(Error::invalid(
                "control",
                format!("{} values do not split into cells of dimension {dim}", values.len()),
            ));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid("control", format!("non-finite value {v}")));
        }
        Ok(Self { dt, dim, values })
    }

    /// A control checked cellwise against `U`.
    pub fn admissible(values: Vec<f64>, dim: usize, dt: f64, set: &AdmissibleSet) -> Result<Self> {
        let path = Self::new(values, dim, dt)?;
        path.check_admissible(set)?;
        Ok(path)
    }

    pub fn constant(cells: usize, value: &[f64], dt: f64) -> Result<Self> {
        let values = (0..cells).flat_map(|_| value.iter().copied()).collect();
        Self::new(values, value.len(), dt)
    }

    pub fn zeros(cells: usize, dim: usize, dt: f64) -> Result<Self> {
        Self::new(vec![0.0; cells * dim], dim, dt)
    }

    pub fn check_admissible(&self, set: &AdmissibleSet) -> Result<()> {
        if set.dim() != self.dim {
            return Err(Error::invalid(
                "control",
                format!("control has dimension {} but U has {}", self.dim, set.dim()),
            ));
        }
        for k in 0..self.cells() {
            if !set.contains(self.cell(k)) {
                return Err(Error::invalid(
                    "control",
                    format!("u_{k} = {:?} lies outside the admissible set", self.cell(k)),
                ));
            }
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cells(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn cell(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// `self + c · dir`, unchecked against `U`.
    pub fn offset(&self, c: f64, dir: &ControlPath) -> Result<ControlPath> {
        self.ensure_compatible(dir)?;
        let values = self.values.iter().zip(&dir.values).map(|(u, d)| u + c * d).collect();
        Self::new(values, self.dim, self.dt)
    }

    /// `Σ_k u_k·v_k Δt`.
    pub fn inner(&self, other: &ControlPath) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum::<f64>() * self.dt
    }

    pub fn norm(&self) -> f64 {
        self.inner(self).sqrt()
    }

    pub fn ensure_compatible(&self, other: &ControlPath) -> Result<()> {
        if self.dim != other.dim || self.values.len() != other.values.len() || self.dt != other.dt {
            return Err(Error::invalid("control", "control paths live on different time grids"));
        }
        Ok(())
    }

    /// `k,t,u_1..u_m` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,t");
        for j in 0..self.dim {
            let _ = write!(out, ",u_{}", j + 1);
        }
        out.push('\n');
        for k in 0..self.cells() {
            let _ = write!(out, "{},{}", k, k as f64 * self.dt);
            for v in self.cell(k) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

/// How forward states are kept for the linearized and adjoint sweeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoragePolicy {
    /// Every state.
    Full,
    /// Every `stride`-th state; segments are recomputed on demand.
    Checkpoint(usize),
    /// Full below the byte budget, checkpoints with stride `⌈√K⌉` above it.
    Auto(usize),
    /// Only the initial and final states.
    Endpoints,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub storage: StoragePolicy,
    /// Record mass, energy and boundary mass at every node.
    pub diagnostics: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            storage: StoragePolicy::Auto(1 << 29),
            diagnostics: true,
        }
    }
}

impl SolveOptions {
    /// Default storage without per-node diagnostics, the setting used inside
    /// gradient and cost loops.
    pub fn lean() -> Self {
        Self {
            storage: StoragePolicy::Auto(1 << 29),
            diagnostics: false,
        }
    }
}

#[derive(Debug, Clone)]
enum Storage {
    Full(Vec<Field>),
    Checkpointed { stride: usize, checkpoints: Vec<Field>, last: Field },
    Endpoints { first: Field, last: Field },
}

/// Per-node mass `|X|₂`, energy `H(X)` and boundary-shell mass fraction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Diagnostics {
    pub mass: Vec<f64>,
    pub energy: Vec<f64>,
    pub boundary_mass: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    dt: f64,
    steps: usize,
    storage: Storage,
    path: BrownianPath,
    control: ControlPath,
    diagnostics: Diagnostics,
    max_mass_drift: f64,
}

impl TrajectoryRecord {
    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| k as f64 * self.dt).collect()
    }

    pub fn path(&self) -> &BrownianPath {
        &self.path
    }

    pub fn control(&self) -> &ControlPath {
        &self.control
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    /// `max_k | |X_k|₂ - |X_0|₂ | / |X_0|₂`, tracked even without diagnostics.
    pub fn max_mass_drift(&self) -> f64 {
        self.max_mass_drift
    }

    pub fn initial_state(&self) -> &Field {
        match &self.storage {
            Storage::Full(v) => &v[0],
            Storage::Checkpointed { checkpoints, .. } => &checkpoints[0],
            Storage::Endpoints { first, .. } => first,
        }
    }

    pub fn final_state(&self) -> &Field {
        match &self.storage {
            Storage::Full(v) => &v[self.steps],
            Storage::Checkpointed { last, .. } | Storage::Endpoints { last, .. } => last,
        }
    }

    pub fn is_checkpointed(&self) -> bool {
        matches!(self.storage, Storage::Checkpointed { .. })
    }

    /// All states, available only with full storage.
    pub fn snapshots(&self) -> Result<&[Field]> {
        match &self.storage {
            Storage::Full(v) => Ok(v),
            _ => Err(Error::MissingSnapshots(
                "trajectory was not stored at every step".into(),
            )),
        }
    }

    pub fn state(&self, k: usize) -> Option<&Field> {
        match &self.storage {
            Storage::Full(v) => v.get(k),
            Storage::Checkpointed { stride, checkpoints, last } => {
                if k == self.steps {
                    Some(last)
                } else if k.is_multiple_of(*stride) {
                    checkpoints.get(k / stride)
                } else {
                    None
                }
            }
            Storage::Endpoints { first, last } => match k {
                0 => Some(first),
                k if k == self.steps => Some(last),
                _ => None,
            },
        }
    }

    /// Calls `f(k, X_k)` for `k = 0..K-1` in increasing order.
    pub fn visit_forward(
        &self,
        prop: &Propagator<'_>,
        mut f: impl FnMut(usize, &Field) -> Result<()>,
    ) -> Result<()> {
        self.check_propagator(prop)?;
        match &self.storage {
            Storage::Full(v) => v[..self.steps].iter().enumerate().try_for_each(|(k, x)| f(k, x)),
            Storage::Checkpointed { stride, checkpoints, .. } => {
                for (c, start) in checkpoints.iter().enumerate() {
                    let k0 = c * stride;
                    let seg = self.recompute(prop, start, k0, (k0 + stride).min(self.steps))?;
                    for (i, x) in seg.iter().enumerate() {
                        f(k0 + i, x)?;
                    }
                }
                Ok(())
            }
            Storage::Endpoints { .. } => Err(Error::MissingSnapshots(
                "only endpoints were stored; rerun with full or checkpointed storage".into(),
            )),
        }
    }

    /// Calls `f(k, X_k)` for `k = K-1` down to `0`.
    pub fn visit_backward(
        &self,
        prop: &Propagator<'_>,
        mut f: impl FnMut(usize, &Field) -> Result<()>,
    ) -> Result<()> {
        self.check_propagator(prop)?;
        match &self.storage {
            Storage::Full(v) => {
                for k in (0..self.steps).rev() {
                    f(k, &v[k])?;
                }
                Ok(())
            }
            Storage::Checkpointed { stride, checkpoints, .. } => {
                for (c, start) in checkpoints.iter().enumerate().rev() {
                    let k0 = c * stride;
                    let seg = self.recompute(prop, start, k0, (k0 + stride).min(self.steps))?;
                    for (i, x) in seg.iter().enumerate().rev() {
                        f(k0 + i, x)?;
                    }
                }
                Ok(())
            }
            Storage::Endpoints { .. } => Err(Error::MissingSnapshots(
                "only endpoints were stored; rerun with full or checkpointed storage".into(),
            )),
        }
    }

    /// States `X_{k0}..X_{k1-1}` starting from the checkpoint at `k0`.
    fn recompute(&self, prop: &Propagator<'_>, start: &Field, k0: usize, k1: usize) -> Result<Vec<Field>> {
        let mut seg = Vec::with_capacity(k1 - k0);
        seg.push(start.clone());
        let mut x = start.values().to_vec();
        let mut next = vec![Complex64::new(0.0, 0.0); x.len()];
        for k in k0..k1.saturating_sub(1) {
            prop.step_into(&x, self.control.cell(k), &self.path, k, &mut next)?;
            std::mem::swap(&mut x, &mut next);
            seg.push(Field::from_raw(start.grid(), x.clone()));
        }
        Ok(seg)
    }

    fn check_propagator(&self, prop: &Propagator<'_>) -> Result<()> {
        if prop.dt != self.dt {
            return Err(Error::invalid(
                "dt",
                format!("record uses dt = {} but propagator dt = {}", self.dt, prop.dt),
            ));
        }
        Ok(())
    }

    /// `k,t,mass,energy,boundary_mass`.
    pub fn diagnostics_csv(&self) -> Result<String> {
        let d = &self.diagnostics;
        if d.mass.len() != self.steps + 1 {
            return Err(Error::invalid("diagnostics", "run was solved without diagnostics"));
        }
        let mut out = String::from("k,t,mass,energy,boundary_mass\n");
        for k in 0..=self.steps {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                k,
                k as f64 * self.dt,
                d.mass[k],
                d.energy[k],
                d.boundary_mass[k]
            );
        }
        Ok(out)
    }
}

/// Per-step intermediate stages of the forward map, recomputed from `X_k`.
pub(crate) struct Stage {
    pub a: Vec<Complex64>,
    pub b: Vec<Complex64>,
    /// `e^{-iθ}`.
    pub rot: Vec<Complex64>,
    /// `e^{ΔW_k}`; empty when the step is noiseless.
    pub noise: Vec<Complex64>,
}

/// Step operator for one problem and one `Δt`.
pub struct Propagator<'a> {
    problem: &'a Problem,
    dt: f64,
    half: Vec<Complex64>,
    half_adj: Vec<Complex64>,
}

impl<'a> Propagator<'a> {
    pub fn new(problem: &'a Problem, dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
        }
        let half: Vec<Complex64> = problem
            .grid
            .laplacian_symbol()
            .iter()
            .map(|k2| Complex64::from_polar(1.0, 0.5 * dt * k2))
            .collect();
        let half_adj = half.iter().map(|z| z.conj()).collect();
        Ok(Self {
            problem,
            dt,
            half,
            half_adj,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    pub fn grid(&self) -> &std::sync::Arc<Grid> {
        &self.problem.grid
    }

    fn physics(&self) -> &PhysicsSpec {
        &self.problem.physics
    }

    fn apply_symbol(&self, v: &mut [Complex64], symbol: &[Complex64]) {
        let g = &self.problem.grid;
        g.fft_forward(v);
        v.iter_mut().zip(symbol).for_each(|(z, s)| *z *= s);
        g.fft_inverse(v);
    }

    /// Half-step free flow `e^{-iΔΔt/2}`.
    pub fn free_half(&self, v: &mut [Complex64]) {
        self.apply_symbol(v, &self.half);
    }

    /// Adjoint (and inverse) of [`Self::free_half`].
    pub fn free_half_adjoint(&self, v: &mut [Complex64]) {
        self.apply_symbol(v, &self.half_adj);
    }

    fn noise_factor(&self, path: &BrownianPath, k: usize) -> Vec<Complex64> {
        let noise = &self.problem.noise;
        if path.drivers() == 0 || noise.is_off() {
            return Vec::new();
        }
        let mut phase = vec![0.0; self.problem.grid.len()];
        increment_phase(path, noise, &self.problem.grid, k, &mut phase);
        phase.into_iter().map(|p| Complex64::from_polar(1.0, p)).collect()
    }

    pub(crate) fn stage(&self, x: &[Complex64], u: &[f64], path: &BrownianPath, k: usize) -> Stage {
        let phys = self.physics();
        let mut a = x.to_vec();
        self.free_half(&mut a);
        let mut pot = vec![0.0; a.len()];
        phys.total_potential(u, &mut pot);
        let lambda = phys.lambda.sign();
        let pw = phys.alpha - 1.0;
        let rot: Vec<Complex64> = a
            .iter()
            .zip(&pot)
            .map(|(z, v)| {
                let r = z.norm();
                let nl = if r == 0.0 { 0.0 } else { r.powf(pw) };
                Complex64::from_polar(1.0, -self.dt * (lambda * nl + v))
            })
            .collect();
        let b = a.iter().zip(&rot).map(|(z, r)| z * r).collect();
        Stage {
            a,
            b,
            rot,
            noise: self.noise_factor(path, k),
        }
    }

    /// `X_{k+1}` from `X_k` into `out`, with the blow-up guard.
    pub fn step_into(
        &self,
        x: &[Complex64],
        u: &[f64],
        path: &BrownianPath,
        k: usize,
        out: &mut Vec<Complex64>,
    ) -> Result<()> {
        let st = self.stage(x, u, path, k);
        let mut c = st.b;
        if !st.noise.is_empty() {
            c.iter_mut().zip(&st.noise).for_each(|(z, g)| *z *= g);
        }
        self.free_half(&mut c);
        let mut worst = 0.0f64;
        for z in &c {
            let r = z.norm();
            if !r.is_finite() {
                return Err(self.abort(k + 1, "non-finite value in state"));
            }
            worst = worst.max(r);
        }
        if worst > BLOWUP_THRESHOLD {
            return Err(self.abort(k + 1, format!("max |X| = {worst:.3e} exceeds blow-up threshold")));
        }
        *out = c;
        Ok(())
    }

    fn abort(&self, step: usize, reason: impl Into<String>) -> Error {
        Error::NumericalAbort {
            step,
            time: step as f64 * self.dt,
            reason: reason.into(),
        }
    }

    /// Tangent of one step: `δX_{k+1}` from `δX_k` plus a stage-`b` source.
    pub(crate) fn tangent_step(&self, st: &Stage, dx: &[Complex64], source: &[Complex64]) -> Vec<Complex64> {
        let phys = self.physics();
        let alpha = phys.alpha;
        let lam_dt = phys.lambda.sign() * self.dt;
        let mut da = dx.to_vec();
        self.free_half(&mut da);
        let i = Complex64::i();
        let mut out: Vec<Complex64> = da
            .iter()
            .zip(&st.a)
            .zip(&st.rot)
            .zip(source)
            .map(|(((d, a), r), s)| {
                let rr = a.norm();
                let c = if rr == 0.0 { 0.0 } else { 0.5 * (alpha - 1.0) * rr.powf(alpha - 1.0) };
                let lin = d * Complex64::new(1.0, -lam_dt * c) - i * lam_dt * h2(*a, alpha) * d.conj();
                r * lin + s
            })
            .collect();
        if !st.noise.is_empty() {
            out.iter_mut().zip(&st.noise).for_each(|(z, g)| *z *= g);
        }
        self.free_half(&mut out);
        out
    }

    /// `-iΔt (ũ_k·V) b`, the stage source of a control direction.
    pub(crate) fn control_source(&self, st: &Stage, du: &[f64]) -> Vec<Complex64> {
        let mut pot = vec![0.0; st.b.len()];
        for (dj, vj) in du.iter().zip(&self.physics().controls) {
            if *dj != 0.0 {
                pot.iter_mut().zip(vj.values()).for_each(|(p, v)| *p += dj * v);
            }
        }
        st.b
            .iter()
            .zip(&pot)
            .map(|(b, p)| Complex64::new(0.0, -self.dt * p) * b)
            .collect()
    }
}

/// One forward step, the standalone form of [`Propagator::step_into`].
pub fn step_forward(
    x: &Field,
    u: &[f64],
    path: &BrownianPath,
    k: usize,
    problem: &Problem,
    dt: f64,
) -> Result<Field> {
    let prop = Propagator::new(problem, dt)?;
    let mut out = Vec::new();
    prop.step_into(x.values(), u, path, k, &mut out)?;
    Ok(Field::from_raw(x.grid(), out))
}

/// `H(X) = ½|∇X|₂² - λ/(α+1) |X|_{α+1}^{α+1}`.
pub fn energy(x: &Field, physics: &PhysicsSpec) -> f64 {
    let a = physics.alpha;
    let pot: f64 = x.values().iter().map(|z| z.norm().powf(a + 1.0)).sum::<f64>() * x.grid().cell_volume();
    0.5 * x.gradient_norm_sq() - physics.lambda.sign() / (a + 1.0) * pot
}

/// `|X|₂`.
pub fn mass(x: &Field) -> f64 {
    x.mass()
}

fn check_inputs(x: &Field, u: &ControlPath, path: &BrownianPath, problem: &Problem, dt: f64) -> Result<usize> {
    if x.grid() != &problem.grid {
        return Err(Error::GridMismatch);
    }
    let steps = problem.steps_for(dt)?;
    if u.cells() != steps || u.dt() != dt {
        return Err(Error::invalid(
            "control",
            format!("control has {} cells of {}, need {steps} of {dt}", u.cells(), u.dt()),
        ));
    }
    if u.dim() != problem.control_dim() {
        return Err(Error::invalid(
            "control",
            format!("control dimension {} but {} potentials", u.dim(), problem.control_dim()),
        ));
    }
    if path.steps() != steps || (path.drivers() > 0 && path.dt() != dt) {
        return Err(Error::invalid(
            "path",
            format!("path has {} steps of {}, need {steps} of {dt}", path.steps(), path.dt()),
        ));
    }
    if path.drivers() != 0 && path.drivers() != problem.noise.drivers() {
        return Err(Error::invalid("path", "driver count differs from the noise spec"));
    }
    Ok(steps)
}

/// Integrates from `x` over `[0, T]` with control `u` along `path`.
pub fn solve_forward(
    x: &Field,
    u: &ControlPath,
    path: &BrownianPath,
    problem: &Problem,
    dt: f64,
    options: SolveOptions,
) -> Result<TrajectoryRecord> {
    let steps = check_inputs(x, u, path, problem, dt)?;
    let prop = Propagator::new(problem, dt)?;
    let n = x.len();
    let bytes = (steps + 1) * n * std::mem::size_of::<Complex64>();
    let stride = match options.storage {
        StoragePolicy::Full => None,
        StoragePolicy::Checkpoint(s) => Some(s.max(1)),
        StoragePolicy::Auto(budget) if bytes > budget => Some(((steps as f64).sqrt().ceil() as usize).max(1)),
        StoragePolicy::Auto(_) => None,
        StoragePolicy::Endpoints => Some(usize::MAX),
    };

    let grid = x.grid();
    let mut diag = Diagnostics::default();
    let m0 = x.mass();
    let mut max_drift = 0.0f64;
    let record_diag = |f: &Field, diag: &mut Diagnostics| {
        if options.diagnostics {
            diag.mass.push(f.mass());
            diag.energy.push(energy(f, &problem.physics));
            diag.boundary_mass.push(f.boundary_mass_fraction());
        }
    };
    record_diag(x, &mut diag);

    let mut full = Vec::new();
    let mut checkpoints = Vec::new();
    match stride {
        None => full.push(x.clone()),
        Some(_) => checkpoints.push(x.clone()),
    }

    let mut cur = x.values().to_vec();
    let mut next = Vec::with_capacity(n);
    for k in 0..steps {
        prop.step_into(&cur, u.cell(k), path, k, &mut next)?;
        std::mem::swap(&mut cur, &mut next);
        let f = Field::from_raw(grid, cur.clone());
        let drift = if m0 > 0.0 { (f.mass() - m0).abs() / m0 } else { f.mass() };
        max_drift = max_drift.max(drift);
        if drift > MASS_ABORT {
            return Err(prop.abort(k + 1, format!("mass drift {drift:.3e} in a conservative run")));
        }
        record_diag(&f, &mut diag);
        match stride {
            None => full.push(f),
            Some(s) if s != usize::MAX && (k + 1) % s == 0 && k + 1 < steps => checkpoints.push(f),
            _ => {}
        }
    }

    let last = Field::from_raw(grid, cur);
    let storage = match stride {
        None => Storage::Full(full),
        Some(usize::MAX) => Storage::Endpoints {
            first: checkpoints.swap_remove(0),
            last,
        },
        Some(s) => Storage::Checkpointed {
            stride: s,
            checkpoints,
            last,
        },
    };
    Ok(TrajectoryRecord {
        dt,
        steps,
        storage,
        path: path.clone(),
        control: u.clone(),
        diagnostics: diag,
        max_mass_drift: max_drift,
    })
}

/// Tangent-linear solution `φ_0..φ_K` of the variation equation along the
/// control direction `du`, driven by the same noise as `base`.
pub fn solve_variation(base: &TrajectoryRecord, du: &ControlPath, problem: &Problem) -> Result<Vec<Field>> {
    base.control().ensure_compatible(du)?;
    let prop = Propagator::new(problem, base.dt())?;
    linear_sweep(base, &prop, |st, k| prop.control_source(st, du.cell(k)))
}

/// Solution `ψ_0..ψ_K` of the dual test equation with source `-Ψ dt`,
/// one source field per time cell.
pub fn solve_dual_test(base: &TrajectoryRecord, source: &[Field], problem: &Problem) -> Result<Vec<Field>> {
    if source.len() != base.steps() {
        return Err(Error::invalid(
            "source",
            format!("{} source cells for {} steps", source.len(), base.steps()),
        ));
    }
    if source.iter().any(|s| s.grid() != &problem.grid) {
        return Err(Error::GridMismatch);
    }
    let prop = Propagator::new(problem, base.dt())?;
    let dt = base.dt();
    linear_sweep(base, &prop, |_, k| source[k].values().iter().map(|s| -dt * s).collect())
}

fn linear_sweep(
    base: &TrajectoryRecord,
    prop: &Propagator<'_>,
    mut source: impl FnMut(&Stage, usize) -> Vec<Complex64>,
) -> Result<Vec<Field>> {
    let grid = prop.grid().clone();
    let mut out = Vec::with_capacity(base.steps() + 1);
    let mut phi = vec![Complex64::new(0.0, 0.0); grid.len()];
    out.push(Field::from_raw(&grid, phi.clone()));
    base.visit_forward(prop, |k, x| {
        let st = prop.stage(x.values(), base.control().cell(k), base.path(), k);
        let s = source(&st, k);
        phi = prop.tangent_step(&st, &phi, &s);
        if phi.iter().any(|z| !z.is_finite()) {
            return Err(prop.abort(k + 1, "non-finite value in linearized state"));
        }
        out.push(Field::from_raw(&grid, phi.clone()));
        Ok(())
    })?;
    Ok(out)
}

/// Multiplies every node by `e^{±W(t_k)}`.
pub(crate) fn apply_gauge(v: &mut [Complex64], phase: &[f64], sign: f64) {
    v.iter_mut()
        .zip(phase)
        .for_each(|(z, p)| *z *= Complex64::from_polar(1.0, sign * p));
}

/// Solves the gauge-transformed equation for `y = e^{-W}X` directly: with
/// `D̃_k = e^{-W_k} D e^{W_k}` one step is `y_{k+1} = D̃_{k+1} N(D̃_k y_k)`,
/// so no noise substep appears. For constant profiles `D̃ = D` and this is
/// the deterministic controlled NLS.
pub fn solve_rescaled(
    x: &Field,
    u: &ControlPath,
    path: &BrownianPath,
    problem: &Problem,
    dt: f64,
) -> Result<Vec<Field>> {
    let steps = check_inputs(x, u, path, problem, dt)?;
    let prop = Propagator::new(problem, dt)?;
    let grid = x.grid();
    let noise = &problem.noise;
    let noisy = path.drivers() > 0 && !noise.is_off();
    let constant = noise.constant_profiles();

    let conj_half = |v: &mut Vec<Complex64>, k: usize| {
        if noisy && !constant {
            let phase = wiener_phase(path, noise, grid, k);
            apply_gauge(v, &phase, 1.0);
            prop.free_half(v);
            apply_gauge(v, &phase, -1.0);
        } else {
            prop.free_half(v);
        }
    };

    let mut out = Vec::with_capacity(steps + 1);
    out.push(x.clone());
    let mut y = x.values().to_vec();
    let mut pot = vec![0.0; y.len()];
    let phys = &problem.physics;
    let lambda = phys.lambda.sign();
    for k in 0..steps {
        conj_half(&mut y, k);
        phys.total_potential(u.cell(k), &mut pot);
        for (z, v) in y.iter_mut().zip(&pot) {
            let r = z.norm();
            let nl = if r == 0.0 { 0.0 } else { r.powf(phys.alpha - 1.0) };
            *z *= Complex64::from_polar(1.0, -dt * (lambda * nl + v));
        }
        conj_half(&mut y, k + 1);
        if y.iter().any(|z| !z.is_finite()) {
            return Err(prop.abort(k + 1, "non-finite value in rescaled state"));
        }
        out.push(Field::from_raw(grid, y.clone()));
    }
    Ok(out)
}

/// `X_k = e^{W(t_k)} y_k`.
pub fn regauge(y: &Field, path: &BrownianPath, problem: &Problem, k: usize) -> Field {
    if path.drivers() == 0 {
        return y.clone();
    }
    let phase = wiener_phase(path, &problem.noise, &problem.grid, k);
    let mut v = y.values().to_vec();
    apply_gauge(&mut v, &phase, 1.0);
    Field::from_raw(y.grid(), v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostSpec, Focusing, NoiseSpec, RunningTarget};
    use crate::paths::sample_path;
    use crate::space::{make_grid, GridSpec, RealField};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn problem(g: &Arc<Grid>, lambda: Focusing, noise: NoiseSpec, horizon: f64, x: Field) -> Problem {
        Problem {
            grid: g.clone(),
            physics: PhysicsSpec {
                lambda,
                alpha: 3.0,
                v0: RealField::zeros(g),
                controls: vec![RealField::from_fn(g, |p| 0.5 * p[0] * p[0] / 9.0)],
            },
            noise,
            cost: CostSpec {
                gamma1: 0.0,
                gamma2: 0.0,
                gamma3: 0.0,
                terminal_target: Field::zeros(g),
                running_target: RunningTarget::Zero,
            },
            admissible: AdmissibleSet::interval(-1.0, 1.0),
            initial: x,
            horizon,
        }
    }

    fn gaussian(g: &Arc<Grid>) -> Field {
        let mut f = Field::from_fn(g, |p| Complex64::new((-p[0] * p[0]).exp(), 0.3 * (-p[0] * p[0]).exp() * p[0]));
        let m = f.mass();
        f.scale(Complex64::new(1.0 / m, 0.0));
        f
    }

    fn smooth_control(cells: usize, dt: f64, c: f64) -> ControlPath {
        ControlPath::new((0..cells).map(|k| c * (1.0 + (k as f64 * dt * 3.0).sin())).collect(), 1, dt).unwrap()
    }

    #[test]
    fn plane_wave_exact() {
        let g = make_grid(GridSpec::new(1, PI, 64)).unwrap();
        let (amp, kw) = (0.8, 3.0);
        let x = Field::from_fn(&g, |p| Complex64::from_polar(amp, kw * p[0]));
        let pr = problem(&g, Focusing::Defocusing, NoiseSpec::off(0), 1.0, x.clone());
        let dt = 0.01;
        let u = ControlPath::zeros(100, 1, dt).unwrap();
        let path = BrownianPath::empty(100, dt);
        let rec = solve_forward(&x, &u, &path, &pr, dt, SolveOptions::default()).unwrap();
        let freq = kw * kw + amp * amp;
        for (k, s) in rec.snapshots().unwrap().iter().enumerate() {
            let t = k as f64 * dt;
            let exact = Field::from_fn(&g, |p| Complex64::from_polar(amp, kw * p[0] + freq * t));
            assert!(s.sup_distance(&exact) <= 1e-9, "k={k}");
        }
    }

    #[test]
    fn plane_wave_with_constant_noise_is_gauged() {
        let g = make_grid(GridSpec::new(1, PI, 32)).unwrap();
        let (amp, kw) = (1.0, 2.0);
        let x = Field::from_fn(&g, |p| Complex64::from_polar(amp, kw * p[0]));
        let noise = NoiseSpec::constant(&g, &[0.4], 9);
        let pr = problem(&g, Focusing::Focusing, noise.clone(), 0.5, x.clone());
        let dt = 0.01;
        let path = sample_path(&noise, 50, dt, 0).unwrap();
        let u = ControlPath::zeros(50, 1, dt).unwrap();
        let rec = solve_forward(&x, &u, &path, &pr, dt, SolveOptions::default()).unwrap();
        let freq = kw * kw - amp * amp;
        let t = 0.5;
        let w = 0.4 * path.value(0, 50);
        let exact = Field::from_fn(&g, |p| Complex64::from_polar(amp, kw * p[0] + freq * t + w));
        assert!(rec.final_state().sup_distance(&exact) < 1e-10);
        let final_mod = rec.final_state().modulus();
        assert!(final_mod.values().iter().all(|r| (r - amp).abs() < 1e-12));
    }

    #[test]
    fn zero_horizon_is_initial_state() {
        let g = make_grid(GridSpec::new(1, PI, 16)).unwrap();
        let x = gaussian(&g);
        let mut pr = problem(&g, Focusing::Defocusing, NoiseSpec::off(0), 0.0, x.clone());
        pr.horizon = 0.0;
        let err = solve_forward(&x, &ControlPath::zeros(0, 1, 0.1).unwrap(), &BrownianPath::empty(0, 0.1), &pr, 0.1, SolveOptions::default());
        let rec = err.unwrap();
        assert_eq!(rec.steps(), 0);
        assert_eq!(rec.final_state().values(), x.values());
    }

    #[test]
    fn small_step_is_consistent() {
        let g = make_grid(GridSpec::new(1, 8.0, 64)).unwrap();
        let x = gaussian(&g);
        let pr = problem(&g, Focusing::Defocusing, NoiseSpec::off(0), 1.0, x.clone());
        let path = BrownianPath::empty(1, 1.0);
        let d1 = step_forward(&x, &[0.3], &path, 0, &pr, 1e-3).unwrap().distance(&x);
        let d2 = step_forward(&x, &[0.3], &path, 0, &pr, 5e-4).unwrap().distance(&x);
        assert!(d1 < 1e-2);
        assert!((d1 / d2 - 2.0).abs() < 0.05, "ratio {}", d1 / d2);
    }

    #[test]
    fn stochastic_mass_conservation() {
        let g = make_grid(GridSpec::new(1, 10.0, 128)).unwrap();
        let x = gaussian(&g);
        let noise = NoiseSpec {
            intensities: vec![0.5, 0.3],
            profiles: vec![RealField::constant(&g, 1.0), RealField::from_fn(&g, |p| (p[0] / 3.0).cos())],
            seed: 4,
        };
        let pr = problem(&g, Focusing::Defocusing, noise.clone(), 0.5, x.clone());
        let dt = 1e-3;
        let u = smooth_control(500, dt, 0.4);
        for idx in 0..3 {
            let path = sample_path(&noise, 500, dt, idx).unwrap();
            let rec = solve_forward(&x, &u, &path, &pr, dt, SolveOptions::default()).unwrap();
            assert!(rec.max_mass_drift() <= 1e-10);
            let m = &rec.diagnostics().mass;
            assert!(m.iter().all(|v| (v - 1.0).abs() <= 1e-10));
        }
    }

    #[test]
    fn energy_examples() {
        let g = make_grid(GridSpec::new(1, PI, 32)).unwrap();
        let phys = PhysicsSpec {
            lambda: Focusing::Defocusing,
            alpha: 3.0,
            v0: RealField::zeros(&g),
            controls: vec![RealField::zeros(&g)],
        };
        assert_eq!(energy(&Field::zeros(&g), &phys), 0.0);
        let (a, k) = (0.7, 2.0);
        let pw = Field::from_fn(&g, |p| Complex64::from_polar(a, k * p[0]));
        let expected = 2.0 * PI * (0.5 * a * a * k * k + a.powi(4) / 4.0);
        assert!((energy(&pw, &phys) - expected).abs() < 1e-12);
        assert!((mass(&Field::constant(&g, Complex64::new(0.0, 1.0))) - (2.0 * PI).sqrt()).abs() < 1e-13);
    }

    fn energy_drift(dt: f64) -> f64 {
        let g = make_grid(GridSpec::new(1, 8.0, 128)).unwrap();
        let x = Field::from_fn(&g, |p| Complex64::new(1.2 * (-p[0] * p[0]).exp(), 0.0) * Complex64::from_polar(1.0, 0.8 * (PI * p[0] / 8.0).sin()));
        let pr = problem(&g, Focusing::Defocusing, NoiseSpec::off(0), 1.0, x.clone());
        let steps = pr.steps_for(dt).unwrap();
        let u = ControlPath::zeros(steps, 1, dt).unwrap();
        let rec = solve_forward(&x, &u, &BrownianPath::empty(steps, dt), &pr, dt, SolveOptions::default()).unwrap();
        let e = &rec.diagnostics().energy;
        e.iter().map(|v| (v - e[0]).abs() / e[0].abs()).fold(0.0, f64::max)
    }

    #[test]
    fn energy_drift_second_order() {
        let d1 = energy_drift(0.02);
        let d2 = energy_drift(0.01);
        let slope = (d1 / d2).log2();
        assert!((slope - 2.0).abs() < 0.3, "slope {slope}");
    }

    #[test]
    fn zero_direction_gives_zero_variation() {
        let g = make_grid(GridSpec::new(1, 8.0, 64)).unwrap();
        let x = gaussian(&g);
        let noise = NoiseSpec::constant(&g, &[0.3], 1);
        let pr = problem(&g, Focusing::Defocusing, noise.clone(), 0.2, x.clone());
        let dt = 0.01;
        let path = sample_path(&noise, 20, dt, 0).unwrap();
        let rec = solve_forward(&x, &smooth_control(20, dt, 0.2), &path, &pr, dt, SolveOptions::default()).unwrap();
        let phi = solve_variation(&rec, &ControlPath::zeros(20, 1, dt).unwrap(), &pr).unwrap();
        assert!(phi.iter().all(|f| f.max_modulus() == 0.0));
        let psi = solve_dual_test(&rec, &vec![Field::zeros(&g); 20], &pr).unwrap();
        assert!(psi.iter().all(|f| f.max_modulus() == 0.0));
    }

    #[test]
    fn variation_is_real_linear() {
        let g = make_grid(GridSpec::new(1, 8.0, 64)).unwrap();
        let x = gaussian(&g);
        let noise = NoiseSpec::constant(&g, &[0.3], 1);
        let pr = problem(&g, Focusing::Focusing, noise.clone(), 0.2, x.clone());
        let dt = 0.01;
        let path = sample_path(&noise, 20, dt, 2).unwrap();
        let rec = solve_forward(&x, &smooth_control(20, dt, 0.2), &path, &pr, dt, SolveOptions::default()).unwrap();
        let du = smooth_control(20, dt, -0.7);
        let phi = solve_variation(&rec, &du, &pr).unwrap();
        let phi3 = solve_variation(&rec, &ControlPath::new(du.values().iter().map(|v| -2.5 * v).collect(), 1, dt).unwrap(), &pr).unwrap();
        for (a, b) in phi.iter().zip(&phi3) {
            assert!(a.scaled(Complex64::new(-2.5, 0.0)).sup_distance(b) <= 1e-12);
        }
        let src: Vec<Field> = (0..20).map(|k| Field::from_fn(&g, |p| Complex64::new((-p[0] * p[0]).exp(), k as f64 * 0.01))).collect();
        let psi = solve_dual_test(&rec, &src, &pr).unwrap();
        let src2: Vec<Field> = src.iter().map(|f| f.scaled(Complex64::new(3.0, 0.0))).collect();
        let psi2 = solve_dual_test(&rec, &src2, &pr).unwrap();
        for (a, b) in psi.iter().zip(&psi2) {
            assert!(a.scaled(Complex64::new(3.0, 0.0)).sup_distance(b) <= 1e-12);
        }
    }

    #[test]
    fn variation_matches_difference_quotient() {
        let g = make_grid(GridSpec::new(1, 8.0, 64)).unwrap();
        let x = gaussian(&g);
        let noise = NoiseSpec::constant(&g, &[0.2], 3);
        let pr = problem(&g, Focusing::Defocusing, noise.clone(), 0.3, x.clone());
        let dt = 0.01;
        let path = sample_path(&noise, 30, dt, 0).unwrap();
        let u = smooth_control(30, dt, 0.3);
        let du = smooth_control(30, dt, 1.0);
        let base = solve_forward(&x, &u, &path, &pr, dt, SolveOptions::default()).unwrap();
        let phi = solve_variation(&base, &du, &pr).unwrap();
        let errs: Vec<f64> = [1e-2, 1e-3]
            .iter()
            .map(|eps| {
                let pert = solve_forward(&x, &u.offset(*eps, &du).unwrap(), &path, &pr, dt, SolveOptions::lean()).unwrap();
                let mut q = pert.final_state() - base.final_state();
                q.scale(Complex64::new(1.0 / eps, 0.0));
                q.distance(&phi[30])
            })
            .collect();
        assert!(errs[1] < errs[0] / 8.0, "{errs:?}");
    }

    #[test]
    fn checkpointed_storage_replays_bitwise() {
        let g = make_grid(GridSpec::new(1, 8.0, 32)).unwrap();
        let x = gaussian(&g);
        let noise = NoiseSpec::constant(&g, &[0.5], 3);
        let pr = problem(&g, Focusing::Defocusing, noise.clone(), 0.37, x.clone());
        let dt = 0.01;
        let path = sample_path(&noise, 37, dt, 1).unwrap();
        let u = smooth_control(37, dt, 0.3);
        let full = solve_forward(&x, &u, &path, &pr, dt, SolveOptions::default()).unwrap();
        let opts = SolveOptions { storage: StoragePolicy::Checkpoint(6), diagnostics: false };
        let cp = solve_forward(&x, &u, &path, &pr, dt, opts).unwrap();
        assert!(cp.is_checkpointed());
        assert!(cp.snapshots().is_err());
        assert_eq!(cp.final_state().values(), full.final_state().values());
        let prop = Propagator::new(&pr, dt).unwrap();
        let mut seen = Vec::new();
        cp.visit_backward(&prop, |k, f| {
            assert_eq!(f.values(), full.snapshots().unwrap()[k].values());
            seen.push(k);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, (0..37).rev().collect::<Vec<_>>());
        let du = smooth_control(37, dt, 1.0);
        let a = solve_variation(&full, &du, &pr).unwrap();
        let b = solve_variation(&cp, &du, &pr).unwrap();
        assert_eq!(a[37].values(), b[37].values());
        let auto = solve_forward(&x, &u, &path, &pr, dt, SolveOptions { storage: StoragePolicy::Auto(1000), diagnostics: false }).unwrap();
        assert!(auto.is_checkpointed());
        let ends = solve_forward(&x, &u, &path, &pr, dt, SolveOptions { storage: StoragePolicy::Endpoints, diagnostics: false }).unwrap();
        assert!(matches!(solve_variation(&ends, &du, &pr), Err(Error::MissingSnapshots(_))));
    }

    #[test]
    fn gauge_equivalence_constant_profiles() {
        let g = make_grid(GridSpec::new(1, 8.0, 64)).unwrap();
        let x = gaussian(&g);
        let noise = NoiseSpec::constant(&g, &[0.6, 0.2], 5);
        let pr = problem(&g, Focusing::Defocusing, noise.clone(), 0.5, x.clone());
        let dt = 0.005;
        let path = sample_path(&noise, 100, dt, 0).unwrap();
        let u = smooth_control(100, dt, 0.5);
        let rec = solve_forward(&x, &u, &path, &pr, dt, SolveOptions::default()).unwrap();
        let y = solve_rescaled(&x, &u, &path, &pr, dt).unwrap();
        for (k, (xk, yk)) in rec.snapshots().unwrap().iter().zip(&y).enumerate() {
            assert!(regauge(yk, &path, &pr, k).sup_distance(xk) <= 1e-12);
            for (a, b) in xk.values().iter().zip(yk.values()) {
                assert!((a.norm() - b.norm()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn gauge_equivalence_varying_profiles() {
        let g = make_grid(GridSpec::new(1, 8.0, 64)).unwrap();
        let x = gaussian(&g);
        let noise = NoiseSpec {
            intensities: vec![0.4],
            profiles: vec![RealField::from_fn(&g, |p| (PI * p[0] / 8.0).cos())],
            seed: 2,
        };
        let pr = problem(&g, Focusing::Defocusing, noise.clone(), 0.2, x.clone());
        let dt = 0.01;
        let path = sample_path(&noise, 20, dt, 0).unwrap();
        let u = smooth_control(20, dt, 0.5);
        let rec = solve_forward(&x, &u, &path, &pr, dt, SolveOptions::default()).unwrap();
        let y = solve_rescaled(&x, &u, &path, &pr, dt).unwrap();
        assert!(regauge(&y[20], &path, &pr, 20).sup_distance(rec.final_state()) <= 1e-12);
    }

    #[test]
    fn focusing_blowup_aborts() {
        let g = make_grid(GridSpec::new(1, 8.0, 32)).unwrap();
        let x = Field::constant(&g, Complex64::new(1.0, 0.0));
        let mut pr = problem(&g, Focusing::Focusing, NoiseSpec::off(0), 0.1, x.clone());
        pr.physics.v0 = RealField::constant(&g, f64::NAN);
        let u = ControlPath::zeros(10, 1, 0.01).unwrap();
        let e = solve_forward(&x, &u, &BrownianPath::empty(10, 0.01), &pr, 0.01, SolveOptions::default()).unwrap_err();
        assert!(matches!(e, Error::NumericalAbort { step: 1, .. }));
    }

    #[test]
    fn control_path_checks() {
        let set = AdmissibleSet::interval(0.0, 1.0);
        assert!(ControlPath::admissible(vec![0.5, 1.2], 1, 0.1, &set).is_err());
        assert!(ControlPath::admissible(vec![0.5, 1.0], 1, 0.1, &set).is_ok());
        assert!(ControlPath::new(vec![1.0, 2.0, 3.0], 2, 0.1).is_err());
        let u = ControlPath::new(vec![1.0, 2.0], 1, 0.5).unwrap();
        assert_eq!(u.to_csv(), "k,t,u_1\n0,0,1\n1,0.5,2\n");
        assert!((u.inner(&u) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn diagnostics_csv_columns() {
        let g = make_grid(GridSpec::new(1, PI, 16)).unwrap();
        let x = gaussian(&g);
        let pr = problem(&g, Focusing::Defocusing, NoiseSpec::off(0), 0.2, x.clone());
        let rec = solve_forward(&x, &ControlPath::zeros(2, 1, 0.1).unwrap(), &BrownianPath::empty(2, 0.1), &pr, 0.1, SolveOptions::default()).unwrap();
        let csv = rec.diagnostics_csv().unwrap();
        assert!(csv.starts_with("k,t,mass,energy,boundary_mass\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
