//! Monte-Carlo cost, adjoint gradient, finite-difference oracle and the
//! projected gradient iteration on a fixed (common-random-number) ensemble.

use rayon::prelude::*;

use crate::adjoint::{pmp_residual, solve_backward, BackwardOptions};
use crate::dynamics::{solve_forward, ControlPath, Propagator, SolveOptions, TrajectoryRecord};
use crate::error::{Error, Result};
use crate::model::{control_cost, AdmissibleSet, Problem};
use crate::paths::Ensemble;

/// Sample mean of the path cost with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub paths: usize,
}

fn mean_stderr(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `|X_K - 𝕏_T|² + γ₁ Σ_{k<K} |X_k - 𝕏₁(t_k)|² Δt` along one trajectory.
pub fn state_cost(record: &TrajectoryRecord, problem: &Problem) -> Result<f64> {
    let cost = &problem.cost;
    let mut total = record.final_state().distance(&cost.terminal_target).powi(2);
    if cost.gamma1 != 0.0 {
        cost.running_target.check_steps(record.steps())?;
        let dt = record.dt();
        let mut run = 0.0;
        record.visit_forward(&Propagator::new(problem, dt)?, |k, x| {
            run += match cost.running_target.at(k) {
                Some(t) => x.distance(t).powi(2),
                None => x.norm_sq(),
            } * dt;
            Ok(())
        })?;
        total += cost.gamma1 * run;
    }
    Ok(total)
}

fn check_ensemble(ensemble: &Ensemble) -> Result<()> {
    if ensemble.is_empty() {
        return Err(Error::invalid("ensemble", "empty ensemble"));
    }
    Ok(())
}

/// `Φ̂(u)` over the ensemble; the control terms are deterministic and
/// added to every path.
pub fn evaluate_cost(u: &ControlPath, ensemble: &Ensemble, problem: &Problem, dt: f64) -> Result<CostEstimate> {
    check_ensemble(ensemble)?;
    let control = control_cost(u.values(), u.dim(), &problem.cost, dt);
    let samples = ensemble
        .paths()
        .par_iter()
        .map(|path| {
            let rec = solve_forward(&problem.initial, u, path, problem, dt, SolveOptions::lean())?;
            Ok(state_cost(&rec, problem)? + control)
        })
        .collect::<Result<Vec<f64>>>()?;
    let (mean, stderr) = mean_stderr(&samples);
    Ok(CostEstimate {
        mean,
        stderr,
        paths: samples.len(),
    })
}

#[derive(Debug, Clone)]
pub struct GradientReport {
    /// `η_k = 2(γ₂u_k - g_k)`, flat cell-major.
    pub eta: Vec<f64>,
    pub eta_stderr: Vec<f64>,
    /// Ensemble mean `g_k = E ∫ V Im(X Ȳ) dξ`.
    pub coupling: Vec<f64>,
    /// Per-path couplings, in ensemble order.
    pub path_coupling: Vec<Vec<f64>>,
    pub paths: usize,
    /// `Φ̂(u)` from the same forward solves.
    pub cost: CostEstimate,
    pub control_dim: usize,
    pub dt: f64,
}

impl GradientReport {
    /// `Σ_k η_k·ũ_k Δt`, the adjoint directional derivative.
    pub fn directional(&self, du: &ControlPath) -> f64 {
        self.eta.iter().zip(du.values()).map(|(a, b)| a * b).sum::<f64>() * self.dt
    }

    /// `(Σ_k |η_k|² Δt)^{1/2}`.
    pub fn norm(&self) -> f64 {
        (self.eta.iter().map(|v| v * v).sum::<f64>() * self.dt).sqrt()
    }
}

fn reject_gamma3(problem: &Problem) -> Result<()> {
    if problem.cost.gamma3 > 0.0 {
        return Err(Error::Unsupported(
            "no gradient formula is available for the control-derivative penalty; set gamma3 = 0".into(),
        ));
    }
    Ok(())
}

/// Adjoint gradient of `Φ̂` at `u` with forward and backward sweeps per path.
pub fn gradient(u: &ControlPath, ensemble: &Ensemble, problem: &Problem, dt: f64) -> Result<GradientReport> {
    check_ensemble(ensemble)?;
    reject_gamma3(problem)?;
    let control = control_cost(u.values(), u.dim(), &problem.cost, dt);
    let per_path = ensemble
        .paths()
        .par_iter()
        .map(|path| {
            let rec = solve_forward(&problem.initial, u, path, problem, dt, SolveOptions::lean())?;
            let c = state_cost(&rec, problem)? + control;
            let back = solve_backward(&rec, problem, BackwardOptions::default())?;
            Ok((c, back.coupling))
        })
        .collect::<Result<Vec<_>>>()?;
    let mp = per_path.len();
    let len = u.values().len();
    let gamma2 = problem.cost.gamma2;
    let mut coupling = vec![0.0; len];
    let mut eta_stderr = vec![0.0; len];
    let mut column = vec![0.0; mp];
    for (i, g) in coupling.iter_mut().enumerate() {
        for (c, p) in column.iter_mut().zip(&per_path) {
            *c = p.1[i];
        }
        let (m, s) = mean_stderr(&column);
        *g = m;
        eta_stderr[i] = 2.0 * s;
    }
    let eta = u.values().iter().zip(&coupling).map(|(uk, gk)| 2.0 * (gamma2 * uk - gk)).collect();
    let costs: Vec<f64> = per_path.iter().map(|p| p.0).collect();
    let (mean, stderr) = mean_stderr(&costs);
    Ok(GradientReport {
        eta,
        eta_stderr,
        coupling,
        path_coupling: per_path.into_iter().map(|p| p.1).collect(),
        paths: mp,
        cost: CostEstimate { mean, stderr, paths: mp },
        control_dim: u.dim(),
        dt,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdRow {
    pub eps: f64,
    /// `(Φ̂(u+εũ) - Φ̂(u-εũ)) / 2ε`.
    pub central: f64,
    /// Richardson combination with the previous rung; `None` on the first.
    pub extrapolated: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub rows: Vec<FdRow>,
    /// Last extrapolated value, or the last central difference.
    pub estimate: f64,
}

/// Central differences of `Φ̂` along `du` over a decreasing `ε` ladder, with
/// Richardson extrapolation between consecutive rungs.
pub fn fd_directional_derivative(
    u: &ControlPath,
    du: &ControlPath,
    ladder: &[f64],
    ensemble: &Ensemble,
    problem: &Problem,
    dt: f64,
) -> Result<FdReport> {
    if ladder.is_empty() || ladder.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::invalid("eps", "ladder needs positive step sizes"));
    }
    u.ensure_compatible(du)?;
    if du.values().iter().all(|v| *v == 0.0) {
        return Ok(FdReport {
            rows: ladder.iter().map(|&eps| FdRow { eps, central: 0.0, extrapolated: None }).collect(),
            estimate: 0.0,
        });
    }
    let mut rows: Vec<FdRow> = Vec::with_capacity(ladder.len());
    for &eps in ladder {
        let plus = u.offset(eps, du)?;
        let minus = u.offset(-eps, du)?;
        for (p, s) in [(&plus, "+"), (&minus, "-")] {
            p.check_admissible(&problem.admissible).map_err(|_| {
                Error::invalid("direction", format!("u {s} {eps}·ũ leaves the admissible set"))
            })?;
        }
        let fp = evaluate_cost(&plus, ensemble, problem, dt)?.mean;
        let fm = evaluate_cost(&minus, ensemble, problem, dt)?.mean;
        let central = (fp - fm) / (2.0 * eps);
        let extrapolated = rows.last().map(|prev| {
            let r2 = (prev.eps / eps).powi(2);
            (r2 * central - prev.central) / (r2 - 1.0)
        });
        rows.push(FdRow { eps, central, extrapolated });
    }
    let last = rows.last().expect("non-empty ladder");
    let estimate = last.extrapolated.unwrap_or(last.central);
    Ok(FdReport { rows, estimate })
}

/// `u⁺ = P_U(u/(1+2γ₂ρ) + 2ρ g/(1+2γ₂ρ))`, cellwise.
pub fn descent_step(u: &ControlPath, rho: f64, coupling: &[f64], gamma2: f64, set: &AdmissibleSet) -> Result<ControlPath> {
    if !(rho > 0.0) {
        return Err(Error::invalid("rho", "step size must be > 0"));
    }
    if coupling.len() != u.values().len() {
        return Err(Error::invalid("coupling", "length differs from the control"));
    }
    let s = 1.0 + 2.0 * gamma2 * rho;
    let mut next = u.clone();
    for (v, (uk, gk)) in next.values_mut().iter_mut().zip(u.values().iter().zip(coupling)) {
        *v = uk / s + 2.0 * rho * gk / s;
    }
    let m = u.dim();
    for k in 0..u.cells() {
        set.project_in_place(&mut next.values_mut()[k * m..(k + 1) * m]);
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizeOptions {
    pub max_iters: usize,
    /// PMP residual target; `None` means `1e-3·D_U`.
    pub tol: Option<f64>,
    pub rho0: f64,
    pub rho_max: f64,
    pub c1: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: None,
            rho0: 1.0,
            rho_max: 64.0,
            c1: 1e-4,
            max_backtracks: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub n: usize,
    pub cost: f64,
    pub stderr: f64,
    pub grad_norm: f64,
    pub rho: f64,
    pub pmp_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIterations,
    /// Backtracking exhausted without meeting the descent test.
    StepTooSmall,
}

#[derive(Debug, Clone)]
pub struct OptimizationState {
    pub u: ControlPath,
    pub rho: f64,
    pub cost: CostEstimate,
    pub pmp_residual: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub history: Vec<IterationRecord>,
    /// Ensemble-mean coupling at the final iterate.
    pub coupling: Vec<f64>,
    /// PMP residual of the final iterate against each path's own coupling.
    pub path_residuals: Vec<f64>,
}

impl OptimizationState {
    /// `n,cost,stderr,grad_norm,rho,pmp_residual`.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("n,cost,stderr,grad_norm,rho,pmp_residual\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.n, r.cost, r.stderr, r.grad_norm, r.rho, r.pmp_residual
            ));
        }
        out
    }
}

/// Projected gradient descent with Armijo backtracking on the fixed ensemble.
/// A trial `u⁺` is accepted when
/// `Φ̂(u⁺) ≤ Φ̂(u) - c₁ ρ_eff ‖(u - u⁺)/ρ_eff‖²`, `ρ_eff = ρ/(1+2γ₂ρ)`.
pub fn optimize(
    u0: &ControlPath,
    ensemble: &Ensemble,
    problem: &Problem,
    dt: f64,
    options: OptimizeOptions,
) -> Result<OptimizationState> {
    reject_gamma3(problem)?;
    problem.cost.require_positive_gamma2()?;
    u0.check_admissible(&problem.admissible)?;
    let set = &problem.admissible;
    let gamma2 = problem.cost.gamma2;
    let tol = options.tol.unwrap_or(1e-3 * set.diameter());
    let mut u = u0.clone();
    let mut rho = options.rho0;
    let mut grad = gradient(&u, ensemble, problem, dt)?;
    let mut history = Vec::new();
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;
    let mut residual;
    loop {
        residual = pmp_residual(&u, &grad.coupling, gamma2, set)?;
        history.push(IterationRecord {
            n: iterations,
            cost: grad.cost.mean,
            stderr: grad.cost.stderr,
            grad_norm: grad.norm(),
            rho,
            pmp_residual: residual,
        });
        if residual <= tol {
            termination = Termination::Converged;
            break;
        }
        if iterations >= options.max_iters {
            break;
        }
        let mut accepted = None;
        for _ in 0..options.max_backtracks {
            let trial = descent_step(&u, rho, &grad.coupling, gamma2, set)?;
            let rho_eff = rho / (1.0 + 2.0 * gamma2 * rho);
            let gm2: f64 = u
                .values()
                .iter()
                .zip(trial.values())
                .map(|(a, b)| ((a - b) / rho_eff).powi(2))
                .sum::<f64>()
                * dt;
            let tg = match gradient(&trial, ensemble, problem, dt) {
                Ok(g) => g,
                Err(e) if e.is_numerical() => {
                    rho *= 0.5;
                    continue;
                }
                Err(e) => return Err(e),
            };
            if tg.cost.mean <= grad.cost.mean - options.c1 * rho_eff * gm2 && tg.cost.mean < grad.cost.mean {
                accepted = Some((trial, tg));
                break;
            }
            rho *= 0.5;
        }
        match accepted {
            Some((trial, tg)) => {
                u = trial;
                grad = tg;
                rho = (2.0 * rho).min(options.rho_max);
                iterations += 1;
            }
            None => {
                termination = Termination::StepTooSmall;
                break;
            }
        }
    }
    let path_residuals = grad
        .path_coupling
        .iter()
        .map(|g| pmp_residual(&u, g, gamma2, set))
        .collect::<Result<Vec<_>>>()?;
    Ok(OptimizationState {
        u,
        rho,
        cost: grad.cost.clone(),
        pmp_residual: residual,
        iterations,
        termination,
        history,
        coupling: grad.coupling,
        path_residuals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellClass {
    LowerActive,
    UpperActive,
    Interior,
}

#[derive(Debug, Clone)]
pub struct BangBangReport {
    pub state: OptimizationState,
    pub classes: Vec<CellClass>,
    /// `max |u_k - g_k/γ₂|` over interior cells (0 if there are none).
    pub max_interior_error: f64,
    pub all_boundary_active: bool,
}

/// Labels each cell of a scalar control on `[lower, upper]`.
pub fn classify_cells(u: &ControlPath, lower: f64, upper: f64) -> Vec<CellClass> {
    const SLACK: f64 = 1e-12;
    u.values()
        .iter()
        .map(|&v| {
            if v <= lower + SLACK * (1.0 + lower.abs()) {
                CellClass::LowerActive
            } else if v >= upper - SLACK * (1.0 + upper.abs()) {
                CellClass::UpperActive
            } else {
                CellClass::Interior
            }
        })
        .collect()
}

/// Optimizes a scalar control on a box `[a, b]` and checks the three-branch
/// structure: active cells at the bounds, interior cells on `g/γ₂`.
pub fn bang_bang_example(
    u0: &ControlPath,
    ensemble: &Ensemble,
    problem: &Problem,
    dt: f64,
    options: OptimizeOptions,
) -> Result<BangBangReport> {
    let (lower, upper) = match &problem.admissible {
        AdmissibleSet::Box { lower, upper } if lower.len() == 1 => (lower[0], upper[0]),
        _ => return Err(Error::invalid("control.admissible", "needs m = 1 and a box set")),
    };
    let state = optimize(u0, ensemble, problem, dt, options)?;
    let classes = classify_cells(&state.u, lower, upper);
    let gamma2 = problem.cost.gamma2;
    let max_interior_error = classes
        .iter()
        .zip(state.u.values().iter().zip(&state.coupling))
        .filter(|(c, _)| **c == CellClass::Interior)
        .map(|(_, (u, g))| (u - g / gamma2).abs())
        .fold(0.0, f64::max);
    let all_boundary_active = classes.iter().all(|c| *c != CellClass::Interior);
    Ok(BangBangReport {
        state,
        classes,
        max_interior_error,
        all_boundary_active,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostSpec, Focusing, NoiseSpec, PhysicsSpec, RunningTarget};
    use crate::space::{make_grid, Field, Grid, GridSpec, RealField};
    use num_complex::Complex64;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn gaussian(g: &Arc<Grid>, shift: f64) -> Field {
        let mut f = Field::from_fn(g, |p| Complex64::new((-(p[0] - shift).powi(2)).exp(), 0.0));
        let m = f.mass();
        f.scale(Complex64::new(1.0 / m, 0.0));
        f
    }

    fn problem(g: &Arc<Grid>, v: RealField, noise: NoiseSpec, gamma2: f64) -> Problem {
        Problem {
            grid: g.clone(),
            physics: PhysicsSpec { lambda: Focusing::Defocusing, alpha: 3.0, v0: RealField::zeros(g), controls: vec![v] },
            noise,
            cost: CostSpec {
                gamma1: 0.3,
                gamma2,
                gamma3: 0.0,
                terminal_target: gaussian(g, 0.5),
                running_target: RunningTarget::Zero,
            },
            admissible: AdmissibleSet::interval(-1.0, 1.0),
            initial: gaussian(g, 0.0),
            horizon: 0.2,
        }
    }

    fn grid() -> Arc<Grid> {
        make_grid(GridSpec::new(1, 8.0, 32)).unwrap()
    }

    #[test]
    fn cost_zero_when_target_hit() {
        let g = grid();
        let mut pr = problem(&g, RealField::zeros(&g), NoiseSpec::off(0), 0.0);
        pr.cost.gamma1 = 0.0;
        let dt = 0.02;
        let u = ControlPath::zeros(10, 1, dt).unwrap();
        let ens = Ensemble::deterministic(10, dt);
        let rec = solve_forward(&pr.initial, &u, &ens.paths()[0], &pr, dt, SolveOptions::lean()).unwrap();
        pr.cost.terminal_target = rec.final_state().clone();
        assert_eq!(evaluate_cost(&u, &ens, &pr, dt).unwrap().mean, 0.0);
    }

    #[test]
    fn constant_control_energy() {
        let g = grid();
        let mut pr = problem(&g, RealField::zeros(&g), NoiseSpec::off(0), 1.0);
        pr.horizon = 1.0;
        pr.cost.gamma1 = 0.0;
        let dt = 0.1;
        let u = ControlPath::constant(10, &[0.6], dt).unwrap();
        let ens = Ensemble::deterministic(10, dt);
        let rec = solve_forward(&pr.initial, &u, &ens.paths()[0], &pr, dt, SolveOptions::lean()).unwrap();
        pr.cost.terminal_target = rec.final_state().clone();
        let c = evaluate_cost(&u, &ens, &pr, dt).unwrap();
        assert!((c.mean - 0.36).abs() < 1e-14);
    }

    #[test]
    fn zero_potential_gradient_is_control_energy() {
        let g = grid();
        let pr = problem(&g, RealField::zeros(&g), NoiseSpec::off(0), 0.7);
        let dt = 0.02;
        let u = ControlPath::new((0..10).map(|k| 0.1 * k as f64 - 0.4).collect(), 1, dt).unwrap();
        let rep = gradient(&u, &Ensemble::deterministic(10, dt), &pr, dt).unwrap();
        for (e, v) in rep.eta.iter().zip(u.values()) {
            assert_eq!(*e, 2.0 * 0.7 * v);
        }
        let du = ControlPath::new(vec![0.3; 10], 1, dt).unwrap();
        let fd = fd_directional_derivative(&u, &du, &[1e-2, 5e-3], &Ensemble::deterministic(10, dt), &pr, dt).unwrap();
        let exact = 2.0 * 0.7 * u.inner(&du);
        assert!((fd.estimate - exact).abs() < 1e-10);
    }

    #[test]
    fn zero_data_zero_gradient() {
        let g = grid();
        let mut pr = problem(&g, RealField::from_fn(&g, |p| p[0]), NoiseSpec::off(0), 0.0);
        pr.cost.gamma1 = 0.0;
        let dt = 0.02;
        let u = ControlPath::constant(10, &[0.2], dt).unwrap();
        let ens = Ensemble::deterministic(10, dt);
        let rec = solve_forward(&pr.initial, &u, &ens.paths()[0], &pr, dt, SolveOptions::lean()).unwrap();
        pr.cost.terminal_target = rec.final_state().clone();
        assert!(gradient(&u, &ens, &pr, dt).unwrap().eta.iter().all(|e| *e == 0.0));
    }

    #[test]
    fn gamma3_rejected() {
        let g = grid();
        let mut pr = problem(&g, RealField::zeros(&g), NoiseSpec::off(0), 1.0);
        pr.cost.gamma3 = 0.1;
        let dt = 0.02;
        let u = ControlPath::zeros(10, 1, dt).unwrap();
        let ens = Ensemble::deterministic(10, dt);
        assert!(matches!(gradient(&u, &ens, &pr, dt), Err(Error::Unsupported(_))));
        assert!(evaluate_cost(&u, &ens, &pr, dt).is_ok());
    }

    #[test]
    fn adjoint_gradient_matches_fd() {
        let g = grid();
        let noise = NoiseSpec::constant(&g, &[0.3], 5);
        let pr = problem(&g, RealField::from_fn(&g, |p| 0.1 * p[0] * p[0]), noise.clone(), 0.1);
        let dt = 0.02;
        let ens = Ensemble::sample(&noise, 10, dt, 4, 0).unwrap();
        let u = ControlPath::new((0..10).map(|k| 0.3 * (k as f64).sin()).collect(), 1, dt).unwrap();
        let du = ControlPath::new((0..10).map(|k| (0.7 * k as f64).cos()).collect(), 1, dt).unwrap();
        let ad = gradient(&u, &ens, &pr, dt).unwrap().directional(&du);
        let fd = fd_directional_derivative(&u, &du, &[1e-2, 5e-3, 2.5e-3], &ens, &pr, dt).unwrap();
        assert!((ad - fd.estimate).abs() / (1.0 + fd.estimate.abs()) < 1e-6, "{ad} vs {}", fd.estimate);
    }

    #[test]
    fn fd_rejects_infeasible_direction() {
        let g = grid();
        let pr = problem(&g, RealField::zeros(&g), NoiseSpec::off(0), 1.0);
        let dt = 0.02;
        let u = ControlPath::constant(10, &[1.0], dt).unwrap();
        let du = ControlPath::constant(10, &[1.0], dt).unwrap();
        assert!(fd_directional_derivative(&u, &du, &[1e-2], &Ensemble::deterministic(10, dt), &pr, dt).is_err());
        let zero = ControlPath::zeros(10, 1, dt).unwrap();
        assert_eq!(fd_directional_derivative(&u, &zero, &[1e-2], &Ensemble::deterministic(10, dt), &pr, dt).unwrap().estimate, 0.0);
    }

    #[test]
    fn descent_step_examples() {
        let set = AdmissibleSet::interval(0.0, 1.0);
        let u = ControlPath::new(vec![0.2], 1, 0.1).unwrap();
        let next = descent_step(&u, 0.5, &[0.6], 1.0, &set).unwrap();
        assert!((next.values()[0] - 0.4).abs() < 1e-15);
        let fixed = descent_step(&u, 3.0, &[0.2], 1.0, &set).unwrap();
        assert!((fixed.values()[0] - 0.2).abs() < 1e-15);
        let tiny = descent_step(&u, 1e-14, &[5.0], 1.0, &set).unwrap();
        assert!((tiny.values()[0] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn decoupled_problem_converges_to_zero() {
        let g = grid();
        let mut pr = problem(&g, RealField::zeros(&g), NoiseSpec::off(0), 0.5);
        pr.cost.gamma1 = 0.0;
        let dt = 0.02;
        let u0 = ControlPath::constant(10, &[0.8], dt).unwrap();
        let opts = OptimizeOptions { tol: Some(1e-9), ..OptimizeOptions::default() };
        let st = optimize(&u0, &Ensemble::deterministic(10, dt), &pr, dt, opts).unwrap();
        assert_eq!(st.termination, Termination::Converged);
        assert!(st.u.values().iter().all(|v| v.abs() < 1e-8));
        assert_eq!(st.path_residuals, vec![st.pmp_residual]);
        for w in st.history.windows(2) {
            assert!(w[1].cost < w[0].cost);
        }
    }

    #[test]
    fn optimize_rejects_bad_inputs() {
        let g = grid();
        let pr = problem(&g, RealField::zeros(&g), NoiseSpec::off(0), 0.0);
        let dt = 0.02;
        let ens = Ensemble::deterministic(10, dt);
        assert!(optimize(&ControlPath::zeros(10, 1, dt).unwrap(), &ens, &pr, dt, OptimizeOptions::default()).is_err());
        let pr = problem(&g, RealField::zeros(&g), NoiseSpec::off(0), 1.0);
        assert!(optimize(&ControlPath::constant(10, &[3.0], dt).unwrap(), &ens, &pr, dt, OptimizeOptions::default()).is_err());
    }

    #[test]
    fn classification() {
        let u = ControlPath::new(vec![0.0, 0.5, 1.0], 1, 0.1).unwrap();
        assert_eq!(
            classify_cells(&u, 0.0, 1.0),
            vec![CellClass::LowerActive, CellClass::Interior, CellClass::UpperActive]
        );
    }

    proptest! {
        #[test]
        fn descent_fixes_pmp_points(
            g in prop::collection::vec(-3.0f64..3.0, 1..8),
            gamma2 in 0.1f64..5.0,
            rho in 1e-3f64..1e3,
        ) {
            let set = AdmissibleSet::interval(-0.5, 1.0);
            let u: Vec<f64> = g.iter().map(|gk| (gk / gamma2).clamp(-0.5, 1.0)).collect();
            let u = ControlPath::new(u, 1, 0.1).unwrap();
            let next = descent_step(&u, rho, &g, gamma2, &set).unwrap();
            for (a, b) in next.values().iter().zip(u.values()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            prop_assert!(pmp_residual(&u, &g, gamma2, &set).unwrap() <= 1e-12);
        }

        #[test]
        fn descent_stays_feasible(
            u in prop::collection::vec(-0.5f64..1.0, 1..8),
            g in prop::collection::vec(-30.0f64..30.0, 8),
            rho in 1e-3f64..1e3,
        ) {
            let set = AdmissibleSet::interval(-0.5, 1.0);
            let n = u.len();
            let u = ControlPath::new(u, 1, 0.1).unwrap();
            let next = descent_step(&u, rho, &g[..n], 1.0, &set).unwrap();
            prop_assert!(next.check_admissible(&set).is_ok());
        }
    }
}
