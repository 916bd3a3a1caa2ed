//! Backward dual equation, duality check and the maximum-principle residual.
//!
//! The backward sweep is the exact adjoint of the forward step in the
//! convention `Y = -p/2`, where `p` is the gradient of the discrete path
//! cost with respect to the state. Per step, in reverse:
//!
//! ```text
//! Y_c = D* Y_{k+1}
//! Y_b = e^{-ΔW_k} Y_c
//! g_{k,j} = ∫ V_j Im(b_k Ȳ_b) dξ
//! r   = e^{iθ} Y_b
//! Y_a = r (1 + iΔtλ c_k) - iΔtλ h₂(a_k) r̄,   c_k = (α-1)/2 |a_k|^{α-1}
//! Y_k = D* Y_a - γ₁Δt (X_k - 𝕏₁(t_k))
//! ```
//!
//! so `∂J/∂u_{k,j} = 2Δt(γ₂u_{k,j} - g_{k,j})` holds to roundoff.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::dynamics::{apply_gauge, solve_dual_test, solve_forward, ControlPath, Propagator, SolveOptions, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::model::{h2, AdmissibleSet, Problem};
use crate::paths::{wiener_phase, BrownianPath, Ensemble};
use crate::space::{Field, Grid};

/// Frame the backward recursion is carried out in; both give the same `Y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Frame {
    #[default]
    Direct,
    /// Works with `Ỹ = e^{-W}Y`, where the noise factor cancels and the free
    /// flow becomes `e^{-W} D* e^{W}`.
    Gauge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BackwardOptions {
    pub frame: Frame,
    /// Keep `Y(t_k)` at every node; otherwise only the coupling is returned.
    pub keep_states: bool,
}

impl BackwardOptions {
    pub fn with_states() -> Self {
        Self {
            frame: Frame::Direct,
            keep_states: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackwardSolution {
    /// `Y(t_0..t_K)` when requested, else empty.
    pub y: Vec<Field>,
    /// `g_{k,j}`, flat cell-major.
    pub coupling: Vec<f64>,
    pub control_dim: usize,
    pub dt: f64,
}

impl BackwardSolution {
    pub fn coupling_at(&self, k: usize) -> &[f64] {
        &self.coupling[k * self.control_dim..(k + 1) * self.control_dim]
    }

    pub fn steps(&self) -> usize {
        self.coupling.len() / self.control_dim.max(1)
    }
}

/// `Y(T) = -(X(T) - 𝕏_T)`.
pub fn terminal_condition(x_t: &Field, target: &Field) -> Result<Field> {
    x_t.ensure_same_grid(target)?;
    Ok(Field::from_raw(
        x_t.grid(),
        x_t.values().iter().zip(target.values()).map(|(x, t)| -(x - t)).collect(),
    ))
}

/// Pathwise backward sweep along `base`.
pub fn solve_backward(base: &TrajectoryRecord, problem: &Problem, options: BackwardOptions) -> Result<BackwardSolution> {
    let prop = Propagator::new(problem, base.dt())?;
    let grid = problem.grid.clone();
    let cost = &problem.cost;
    cost.running_target.check_steps(base.steps())?;
    let steps = base.steps();
    let m = problem.control_dim();
    let dt = base.dt();
    let phys = &problem.physics;
    let alpha = phys.alpha;
    let lam_dt = phys.lambda.sign() * dt;
    let vol = grid.cell_volume();
    let path = base.path();
    let gauge = options.frame == Frame::Gauge && path.drivers() > 0;
    let phase_at = |k: usize| wiener_phase(path, &problem.noise, &grid, k);

    let y_final = terminal_condition(base.final_state(), &cost.terminal_target)?;
    let mut y = y_final.values().to_vec();
    let mut next_phase = if gauge { phase_at(steps) } else { Vec::new() };
    if gauge {
        apply_gauge(&mut y, &next_phase, -1.0);
    }
    let mut coupling = vec![0.0; steps * m];
    let mut states = Vec::new();
    if options.keep_states {
        states.resize(steps + 1, Field::zeros(&grid));
        states[steps] = y_final;
    }
    let i = Complex64::i();

    base.visit_backward(&prop, |k, x| {
        let st = prop.stage(x.values(), base.control().cell(k), path, k);
        let phase = if gauge { phase_at(k) } else { Vec::new() };
        // stage b
        if gauge {
            apply_gauge(&mut y, &next_phase, 1.0);
            prop.free_half_adjoint(&mut y);
            apply_gauge(&mut y, &next_phase, -1.0);
        } else {
            prop.free_half_adjoint(&mut y);
            if !st.noise.is_empty() {
                y.iter_mut().zip(&st.noise).for_each(|(z, g)| *z *= g.conj());
            }
        }
        let (mut a, mut b) = (st.a, st.b);
        if gauge {
            apply_gauge(&mut a, &phase, -1.0);
            apply_gauge(&mut b, &phase, -1.0);
        }
        for (j, vj) in phys.controls.iter().enumerate() {
            let s: f64 = vj
                .values()
                .iter()
                .zip(b.iter().zip(&y))
                .map(|(v, (bb, yy))| v * (bb * yy.conj()).im)
                .sum();
            coupling[k * m + j] = s * vol;
        }
        // stage a
        for ((z, aa), rot) in y.iter_mut().zip(&a).zip(&st.rot) {
            let r = rot.conj() * *z;
            let rr = aa.norm();
            let c = if rr == 0.0 { 0.0 } else { 0.5 * (alpha - 1.0) * rr.powf(alpha - 1.0) };
            *z = r * Complex64::new(1.0, lam_dt * c) - i * lam_dt * h2(*aa, alpha) * r.conj();
        }
        if gauge {
            apply_gauge(&mut y, &phase, 1.0);
            prop.free_half_adjoint(&mut y);
            apply_gauge(&mut y, &phase, -1.0);
        } else {
            prop.free_half_adjoint(&mut y);
        }
        // running source
        if cost.gamma1 != 0.0 {
            let w = cost.gamma1 * dt;
            let target = cost.running_target.at(k);
            for (idx, z) in y.iter_mut().enumerate() {
                let tx = target.map_or(Complex64::new(0.0, 0.0), |t| t.values()[idx]);
                let mut d = x.values()[idx] - tx;
                if gauge {
                    d *= Complex64::from_polar(1.0, -phase[idx]);
                }
                *z -= w * d;
            }
        }
        if y.iter().any(|z| !z.is_finite()) {
            return Err(Error::NumericalAbort {
                step: k,
                time: k as f64 * dt,
                reason: "non-finite value in backward state".into(),
            });
        }
        if options.keep_states {
            let mut v = y.clone();
            if gauge {
                apply_gauge(&mut v, &phase, 1.0);
            }
            states[k] = Field::from_raw(&grid, v);
        }
        next_phase = phase;
        Ok(())
    })?;

    Ok(BackwardSolution {
        y: states,
        coupling,
        control_dim: m,
        dt,
    })
}

/// Both sides of the duality identity and their normalized gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualityReport {
    /// `Λ(Ψ) = E Re⟨X(T)-𝕏_T, ψ(T)⟩ + γ₁ E Σ_k Re⟨X_k-𝕏₁, ψ_k⟩ Δt`.
    pub lambda: f64,
    /// `E Σ_k Δt Re⟨Ψ_k, Ȳ_k⟩`, with `Ȳ_k = (Y_k + Y_{k+1})/2` the cell average.
    pub pairing: f64,
    /// `|lambda - pairing| / (1 + |lambda|)`.
    pub residual: f64,
    pub paths: usize,
}

/// Runs `X`, `ψ` and `Y` on every path of `ensemble` and compares the two
/// sides of the duality identity. `source[k]` is `Ψ` on cell `k`.
pub fn duality_check(
    u: &ControlPath,
    source: &[Field],
    ensemble: &Ensemble,
    problem: &Problem,
    dt: f64,
) -> Result<DualityReport> {
    if ensemble.is_empty() {
        return Err(Error::invalid("ensemble", "empty ensemble"));
    }
    let cost = &problem.cost;
    let per_path = ensemble
        .paths()
        .par_iter()
        .map(|path| -> Result<(f64, f64)> {
            let base = solve_forward(&problem.initial, u, path, problem, dt, SolveOptions::lean())?;
            let psi = solve_dual_test(&base, source, problem)?;
            let back = solve_backward(&base, problem, BackwardOptions::with_states())?;
            let steps = base.steps();
            let mut lambda = base.final_state().real_inner(&psi[steps]) - cost.terminal_target.real_inner(&psi[steps]);
            if cost.gamma1 != 0.0 {
                let mut run = 0.0;
                base.visit_forward(&Propagator::new(problem, dt)?, |k, x| {
                    let mut d = x.real_inner(&psi[k]);
                    if let Some(t) = cost.running_target.at(k) {
                        d -= t.real_inner(&psi[k]);
                    }
                    run += d * dt;
                    Ok(())
                })?;
                lambda += cost.gamma1 * run;
            }
            let pairing: f64 = (0..steps)
                .map(|k| 0.5 * dt * (source[k].real_inner(&back.y[k]) + source[k].real_inner(&back.y[k + 1])))
                .sum();
            Ok((lambda, pairing))
        })
        .collect::<Result<Vec<_>>>()?;
    let mpaths = per_path.len() as f64;
    let lambda = per_path.iter().map(|p| p.0).sum::<f64>() / mpaths;
    let pairing = per_path.iter().map(|p| p.1).sum::<f64>() / mpaths;
    Ok(DualityReport {
        lambda,
        pairing,
        residual: (lambda - pairing).abs() / (1.0 + lambda.abs()),
        paths: per_path.len(),
    })
}

/// `(Σ_k |u_k - P_U(g_k/γ₂)|² Δt)^{1/2}` for the ensemble-mean coupling `g`.
pub fn pmp_residual(u: &ControlPath, coupling: &[f64], gamma2: f64, set: &AdmissibleSet) -> Result<f64> {
    if !(gamma2 > 0.0) {
        return Err(Error::invalid("cost.gamma2", "must be > 0 for the maximum-principle residual"));
    }
    if coupling.len() != u.values().len() {
        return Err(Error::invalid("coupling", "length differs from the control"));
    }
    let m = u.dim();
    let mut s = 0.0;
    let mut target = vec![0.0; m];
    for k in 0..u.cells() {
        for j in 0..m {
            target[j] = coupling[k * m + j] / gamma2;
        }
        set.project_in_place(&mut target);
        s += u.cell(k).iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok((s * u.dt()).sqrt())
}

/// Least-squares fit `Y_{k+1} ≈ A_k + Σ_j Z_{j,k} Δβ_{j,k}` across the
/// ensemble, pointwise in `ξ`. `z[j][k]` is the slope field for driver `j`.
#[derive(Debug, Clone)]
pub struct ZEstimate {
    pub z: Vec<Vec<Field>>,
}

pub fn regress_z(solutions: &[BackwardSolution], paths: &[BrownianPath], grid: &Arc<Grid>) -> Result<ZEstimate> {
    if solutions.len() != paths.len() || solutions.is_empty() {
        return Err(Error::invalid("ensemble", "need one backward solution per path"));
    }
    let drivers = paths[0].drivers();
    let steps = paths[0].steps();
    let mp = paths.len();
    if mp < drivers + 2 {
        return Err(Error::invalid("ensemble", "too few paths for the regression"));
    }
    if solutions.iter().any(|s| s.y.len() != steps + 1) {
        return Err(Error::MissingSnapshots("backward states were not kept".into()));
    }
    let n = grid.len();
    let p = drivers + 1;
    let mut z = vec![Vec::with_capacity(steps); drivers];
    for k in 0..steps {
        // design matrix rows (1, Δβ_1, .., Δβ_N), identical for every ξ
        let mut gram = vec![0.0; p * p];
        for path in paths {
            let row: Vec<f64> = std::iter::once(1.0).chain((0..drivers).map(|j| path.increment(j, k))).collect();
            for r in 0..p {
                for c in 0..p {
                    gram[r * p + c] += row[r] * row[c];
                }
            }
        }
        let inv = invert(&gram, p).ok_or_else(|| Error::invalid("ensemble", "singular regression design"))?;
        let mut rhs = vec![Complex64::new(0.0, 0.0); p * n];
        for (sol, path) in solutions.iter().zip(paths) {
            let yk = sol.y[k + 1].values();
            for r in 0..p {
                let w = if r == 0 { 1.0 } else { path.increment(r - 1, k) };
                for (acc, v) in rhs[r * n..(r + 1) * n].iter_mut().zip(yk) {
                    *acc += w * v;
                }
            }
        }
        for (j, zj) in z.iter_mut().enumerate() {
            let mut out = vec![Complex64::new(0.0, 0.0); n];
            for c in 0..p {
                let w = inv[(j + 1) * p + c];
                out.iter_mut().zip(&rhs[c * n..(c + 1) * n]).for_each(|(o, v)| *o += w * v);
            }
            zj.push(Field::from_raw(grid, out));
        }
    }
    Ok(ZEstimate { z })
}

fn invert(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|x, y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))?;
        if m[piv * n + col].abs() < 1e-300 {
            return None;
        }
        for c in 0..n {
            m.swap(col * n + c, piv * n + c);
            inv.swap(col * n + c, piv * n + c);
        }
        let d = m[col * n + col];
        for c in 0..n {
            m[col * n + c] /= d;
            inv[col * n + c] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = m[r * n + col];
                for c in 0..n {
                    m[r * n + c] -= f * m[col * n + c];
                    inv[r * n + c] -= f * inv[col * n + c];
                }
            }
        }
    }
    Some(inv)
}
