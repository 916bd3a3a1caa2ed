//! Problem files: TOML with `[grid]`, `[physics]`, `[noise]`, `[cost]` and
//! `[control]` sections. Unknown keys anywhere are rejected.
//!
//! Fields are given as short source strings:
//!
//! ```text
//! zero
//! constant value=<re> [imag=<im>]
//! harmonic omega=<w>                       ½ω²|ξ|²
//! gaussian [center=<c>] [center_y=<c>] [width=<w>] [amplitude=<a>] [k=<κ>]
//! plane_wave k=<int> [ky=<int>] [amplitude=<a>]   mode index on [-L, L)
//! linear [slope=<s>]                       s·ξ₁
//! cosine [k=<int>] [amplitude=<a>]         a·cos(kπξ₁/L)
//! file:<path>                              snapshot file, relative to the config
//! ```
//!
//! Targets additionally accept `uncontrolled [phase=<φ>]`, meaning
//! `e^{iφ}` times the noiseless trajectory with `u ≡ 0`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::{solve_forward, ControlPath, SolveOptions};
use crate::error::{Error, Result};
use crate::model::{AdmissibleSet, CostSpec, Focusing, NoiseSpec, PhysicsSpec, Problem, RunningTarget};
use crate::paths::BrownianPath;
use crate::space::snapshot::read_field;
use crate::space::{make_grid, Field, Grid, GridSpec, RealField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsConfig {
    /// `+1` focusing, `-1` defocusing.
    pub lambda: f64,
    pub alpha: f64,
    #[serde(default = "zero_source")]
    pub v0: String,
    pub controls: Vec<String>,
    pub initial: String,
    /// Rescale the initial state to unit mass.
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub intensities: Vec<f64>,
    /// One profile per driver; defaults to constant unit profiles.
    #[serde(default)]
    pub profiles: Vec<String>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    #[serde(default)]
    pub gamma1: f64,
    /// Optional for simulation, required (and > 0) for optimization.
    pub gamma2: Option<f64>,
    #[serde(default)]
    pub gamma3: f64,
    pub terminal_target: String,
    #[serde(default = "zero_source")]
    pub running_target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlConfig {
    pub horizon: f64,
    pub admissible: AdmissibleSet,
    /// Constant initial control `u⁽⁰⁾`; defaults to the projection of 0.
    pub initial: Option<Vec<f64>>,
    /// Default time step when `--dt` is not given.
    pub dt: Option<f64>,
    /// Default ensemble size when `--paths` is not given.
    pub paths: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub grid: GridSpec,
    pub physics: PhysicsConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub cost: CostConfig,
    pub control: ControlConfig,
    /// Directory that `file:` sources are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn zero_source() -> String {
    "zero".into()
}

/// A parsed source string.
#[derive(Debug, Clone, PartialEq)]
struct Source {
    kind: String,
    params: BTreeMap<String, f64>,
}

fn parse_source(field: &str, text: &str) -> Result<Source> {
    let text = text.trim();
    if let Some(rest) = text.strip_prefix("file:") {
        return Ok(Source {
            kind: format!("file:{}", rest.trim()),
            params: BTreeMap::new(),
        });
    }
    let mut parts = text.split_whitespace();
    let kind = parts
        .next()
        .ok_or_else(|| Error::invalid(field, "empty field source"))?
        .to_string();
    let mut params = BTreeMap::new();
    for p in parts {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::invalid(field, format!("expected key=value, got `{p}`")))?;
        let v: f64 = v
            .parse()
            .map_err(|_| Error::invalid(field, format!("`{k}` needs a number, got `{v}`")))?;
        if params.insert(k.to_string(), v).is_some() {
            return Err(Error::invalid(field, format!("duplicate parameter `{k}`")));
        }
    }
    Ok(Source { kind, params })
}

impl Source {
    fn take(&self, field: &str, allowed: &[&str]) -> Result<()> {
        if let Some(k) = self.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(Error::invalid(
                field,
                format!("unknown parameter `{k}` for `{}` (allowed: {})", self.kind, allowed.join(", ")),
            ));
        }
        Ok(())
    }

    fn get(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    fn integer(&self, field: &str, key: &str, default: f64) -> Result<f64> {
        let v = self.get(key, default);
        if v.fract() != 0.0 {
            return Err(Error::invalid(field, format!("`{key}` must be an integer mode index on the periodic box, got {v}")));
        }
        Ok(v)
    }
}

impl ProblemConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: ProblemConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, dir)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn complex_field(&self, grid: &Arc<Grid>, field: &str, text: &str) -> Result<Field> {
        let src = parse_source(field, text)?;
        let l = grid.half_extent();
        let f = match src.kind.as_str() {
            "zero" => {
                src.take(field, &[])?;
                Field::zeros(grid)
            }
            "constant" => {
                src.take(field, &["value", "imag"])?;
                Field::constant(grid, Complex64::new(src.get("value", 0.0), src.get("imag", 0.0)))
            }
            "harmonic" => {
                src.take(field, &["omega"])?;
                let w = src.get("omega", 1.0);
                Field::from_fn(grid, |x| Complex64::new(0.5 * w * w * (x[0] * x[0] + x[1] * x[1]), 0.0))
            }
            "gaussian" => {
                src.take(field, &["center", "center_y", "width", "amplitude", "k"])?;
                let (c0, c1) = (src.get("center", 0.0), src.get("center_y", 0.0));
                let w = src.get("width", 1.0);
                if !(w > 0.0) {
                    return Err(Error::invalid(field, "gaussian width must be > 0"));
                }
                let (a, k) = (src.get("amplitude", 1.0), src.get("k", 0.0));
                let d2 = grid.dim() == 2;
                Field::from_fn(grid, |x| {
                    let r2 = (x[0] - c0).powi(2) + if d2 { (x[1] - c1).powi(2) } else { 0.0 };
                    Complex64::from_polar(a * (-r2 / (w * w)).exp(), k * x[0])
                })
            }
            "plane_wave" => {
                src.take(field, &["k", "ky", "amplitude"])?;
                let k = src.integer(field, "k", 1.0)? * PI / l;
                let ky = src.integer(field, "ky", 0.0)? * PI / l;
                let a = src.get("amplitude", 1.0);
                Field::from_fn(grid, |x| Complex64::from_polar(a, k * x[0] + ky * x[1]))
            }
            "linear" => {
                src.take(field, &["slope"])?;
                let s = src.get("slope", 1.0);
                Field::from_fn(grid, |x| Complex64::new(s * x[0], 0.0))
            }
            "cosine" => {
                src.take(field, &["k", "amplitude"])?;
                let k = src.integer(field, "k", 1.0)? * PI / l;
                let a = src.get("amplitude", 1.0);
                Field::from_fn(grid, |x| Complex64::new(a * (k * x[0]).cos(), 0.0))
            }
            kind if kind.starts_with("file:") => {
                let rel = &kind["file:".len()..];
                let path = self.base_dir.join(rel);
                read_field(&path, Some(grid)).map_err(|e| Error::invalid(field, format!("{}: {e}", path.display())))?
            }
            other => return Err(Error::invalid(field, format!("unknown field source `{other}`"))),
        };
        Ok(f)
    }

    fn real_field(&self, grid: &Arc<Grid>, field: &str, text: &str) -> Result<RealField> {
        let f = self.complex_field(grid, field, text)?;
        if f.values().iter().any(|z| z.im != 0.0) {
            return Err(Error::invalid(field, "potentials and noise profiles must be real"));
        }
        RealField::from_values(grid, f.values().iter().map(|z| z.re).collect())
    }

    fn uncontrolled_phase(field: &str, text: &str) -> Result<Option<f64>> {
        let src = parse_source(field, text)?;
        if src.kind != "uncontrolled" {
            return Ok(None);
        }
        src.take(field, &["phase"])?;
        Ok(Some(src.get("phase", 0.0)))
    }

    pub fn grid(&self) -> Result<Arc<Grid>> {
        make_grid(self.grid)
    }

    /// Default time step from the config, if any.
    pub fn default_dt(&self) -> Option<f64> {
        self.control.dt
    }

    /// Builds the problem at step `dt`; only targets of the `uncontrolled`
    /// kind depend on it.
    pub fn build(&self, dt: f64) -> Result<Problem> {
        let grid = self.grid()?;
        let p = &self.physics;
        let lambda = Focusing::from_sign(p.lambda).map_err(|_| Error::invalid("physics.lambda", format!("must be +1 or -1, got {}", p.lambda)))?;
        let controls = p
            .controls
            .iter()
            .enumerate()
            .map(|(j, s)| self.real_field(&grid, &format!("physics.controls[{j}]"), s))
            .collect::<Result<Vec<_>>>()?;
        let physics = PhysicsSpec {
            lambda,
            alpha: p.alpha,
            v0: self.real_field(&grid, "physics.v0", &p.v0)?,
            controls,
        };
        let mut initial = self.complex_field(&grid, "physics.initial", &p.initial)?;
        if p.normalize {
            let m = initial.mass();
            if m == 0.0 {
                return Err(Error::invalid("physics.initial", "cannot normalize a zero state"));
            }
            initial.scale(Complex64::new(1.0 / m, 0.0));
        }

        let n = &self.noise;
        let profiles = if n.profiles.is_empty() {
            n.intensities.iter().map(|_| RealField::constant(&grid, 1.0)).collect()
        } else {
            if n.profiles.len() != n.intensities.len() {
                return Err(Error::invalid(
                    "noise.profiles",
                    format!("{} profiles for {} intensities", n.profiles.len(), n.intensities.len()),
                ));
            }
            n.profiles
                .iter()
                .enumerate()
                .map(|(j, s)| self.real_field(&grid, &format!("noise.profiles[{j}]"), s))
                .collect::<Result<Vec<_>>>()?
        };
        let noise = NoiseSpec {
            intensities: n.intensities.clone(),
            profiles,
            seed: n.seed,
        };

        let c = &self.cost;
        let placeholder = CostSpec {
            gamma1: c.gamma1,
            gamma2: c.gamma2.unwrap_or(0.0),
            gamma3: c.gamma3,
            terminal_target: Field::zeros(&grid),
            running_target: RunningTarget::Zero,
        };
        let mut problem = Problem {
            grid: grid.clone(),
            physics,
            noise,
            cost: placeholder,
            admissible: self.control.admissible.clone(),
            initial,
            horizon: self.control.horizon,
        };
        problem.validate()?;

        let terminal_phase = Self::uncontrolled_phase("cost.terminal_target", &c.terminal_target)?;
        let running_phase = Self::uncontrolled_phase("cost.running_target", &c.running_target)?;
        let reference = if terminal_phase.is_some() || running_phase.is_some() {
            let steps = problem.steps_for(dt)?;
            let zero = ControlPath::zeros(steps, problem.control_dim(), dt)?;
            let opts = SolveOptions { storage: crate::dynamics::StoragePolicy::Full, diagnostics: false };
            let rec = solve_forward(&problem.initial, &zero, &BrownianPath::empty(steps, dt), &problem, dt, opts)?;
            Some(rec.snapshots()?.to_vec())
        } else {
            None
        };
        let rotate = |f: &Field, phase: f64| f.scaled(Complex64::from_polar(1.0, phase));

        problem.cost.terminal_target = match (terminal_phase, &reference) {
            (Some(ph), Some(r)) => rotate(r.last().expect("non-empty trajectory"), ph),
            _ => self.complex_field(&grid, "cost.terminal_target", &c.terminal_target)?,
        };
        problem.cost.running_target = match (running_phase, &reference) {
            (Some(ph), Some(r)) => RunningTarget::Trajectory(r.iter().map(|f| rotate(f, ph)).collect()),
            _ => {
                let src = parse_source("cost.running_target", &c.running_target)?;
                if src.kind == "zero" && src.params.is_empty() {
                    RunningTarget::Zero
                } else {
                    RunningTarget::Static(self.complex_field(&grid, "cost.running_target", &c.running_target)?)
                }
            }
        };
        problem.validate()?;
        Ok(problem)
    }

    /// `γ₂` for the optimizer, with a field-level error when it is missing.
    pub fn require_gamma2(&self) -> Result<f64> {
        match self.cost.gamma2 {
            None => Err(Error::invalid("cost.gamma2", "missing; required (> 0) by optimize")),
            Some(g) if !(g > 0.0) => Err(Error::invalid("cost.gamma2", format!("must be > 0 for optimize, got {g}"))),
            Some(g) => Ok(g),
        }
    }

    /// `u⁽⁰⁾` repeated over all cells, checked against `U`.
    pub fn initial_control(&self, cells: usize, dt: f64) -> Result<ControlPath> {
        let set = &self.control.admissible;
        let value = match &self.control.initial {
            Some(v) => v.clone(),
            None => set.project(&vec![0.0; set.dim()]),
        };
        if value.len() != set.dim() {
            return Err(Error::invalid(
                "control.initial",
                format!("has {} entries, control dimension is {}", value.len(), set.dim()),
            ));
        }
        let u = ControlPath::constant(cells, &value, dt)?;
        u.check_admissible(set)
            .map_err(|_| Error::invalid("control.initial", format!("{value:?} lies outside the admissible set")))?;
        Ok(u)
    }
}
