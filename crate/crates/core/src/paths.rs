//! Brownian drivers, Brownian-bridge refinement, and the unitary gauge
//! factor `e^{W(t,ξ)}`.
//!
//! Every Gaussian draw is addressed by `(seed, path, stream, counter)`: the
//! key is derived from `(seed, path)`, the ChaCha stream selects the driver
//! (and refinement level), and the word position is the time index. Draws
//! therefore do not depend on evaluation order or thread count.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::NoiseSpec;
use crate::space::{Field, Grid};

/// Increments of `N` independent Brownian motions on `t_k = kΔt`, `k = 0..K`.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianPath {
    dt: f64,
    steps: usize,
    drivers: usize,
    /// `increments[j * steps + k] = β_j(t_{k+1}) - β_j(t_k)`.
    increments: Vec<f64>,
    /// `values[j * (steps + 1) + k] = β_j(t_k)`.
    values: Vec<f64>,
    seed: u64,
    path_index: u64,
    level: u32,
}

impl BrownianPath {
    fn from_increments(
        dt: f64,
        steps: usize,
        drivers: usize,
        increments: Vec<f64>,
        seed: u64,
        path_index: u64,
        level: u32,
    ) -> Self {
        let mut values = vec![0.0; drivers * (steps + 1)];
        for j in 0..drivers {
            let mut acc = 0.0;
            for k in 0..steps {
                acc += increments[j * steps + k];
                values[j * (steps + 1) + k + 1] = acc;
            }
        }
        Self {
            dt,
            steps,
            drivers,
            increments,
            values,
            seed,
            path_index,
            level,
        }
    }

    /// A path with no drivers (deterministic runs).
    pub fn empty(steps: usize, dt: f64) -> Self {
        Self::from_increments(dt, steps, 0, Vec::new(), 0, 0, 0)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn drivers(&self) -> usize {
        self.drivers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_index(&self) -> u64 {
        self.path_index
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn increment(&self, j: usize, k: usize) -> f64 {
        self.increments[j * self.steps + k]
    }

    pub fn increments_of(&self, j: usize) -> &[f64] {
        &self.increments[j * self.steps..(j + 1) * self.steps]
    }

    /// `β_j(t_k)`.
    pub fn value(&self, j: usize, k: usize) -> f64 {
        self.values[j * (self.steps + 1) + k]
    }

    /// Test-only constructor from explicit increments.
    pub fn from_parts(dt: f64, increments_per_driver: Vec<Vec<f64>>) -> Self {
        let drivers = increments_per_driver.len();
        let steps = increments_per_driver.first().map_or(0, Vec::len);
        let flat = increments_per_driver.into_iter().flatten().collect();
        Self::from_increments(dt, steps, drivers, flat, 0, 0, 0)
    }

    /// `k,t,dbeta_1..dbeta_N` rows for `k = 0..K-1`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,t");
        for j in 0..self.drivers {
            let _ = write!(out, ",dbeta_{}", j + 1);
        }
        out.push('\n');
        for k in 0..self.steps {
            let _ = write!(out, "{},{}", k, k as f64 * self.dt);
            for j in 0..self.drivers {
                let _ = write!(out, ",{}", self.increment(j, k));
            }
            out.push('\n');
        }
        out
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-addressed standard normals for one `(seed, path)` key.
struct NormalStream {
    rng: ChaCha12Rng,
}

impl NormalStream {
    fn new(seed: u64, path_index: u64) -> Self {
        let mut s = seed ^ path_index.wrapping_mul(0xD1B5_4A32_D192_ED03);
        let mut key = [0u8; 32];
        for chunk in key.chunks_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut s).to_le_bytes());
        }
        // mix the path index in twice so neighbouring seeds do not collide
        let tail = splitmix64(&mut path_index.clone()) ^ seed;
        key[24..].copy_from_slice(&tail.to_le_bytes());
        Self {
            rng: ChaCha12Rng::from_seed(key),
        }
    }

    /// The standard normal at `(stream, counter)`, via Box–Muller on two
    /// fixed words so each counter consumes exactly one block slot.
    fn normal(&mut self, stream: u64, counter: u64) -> f64 {
        self.rng.set_stream(stream);
        self.rng.set_word_pos(u128::from(counter) * 4);
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        // (0, 1] so the log is finite
        let u1 = ((a >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
        let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
    }
}

const REFINE_STREAM_BASE: u64 = 1 << 40;

/// Draws path `path_index` of the ensemble keyed by `noise.seed`.
pub fn sample_path(noise: &NoiseSpec, steps: usize, dt: f64, path_index: u64) -> Result<BrownianPath> {
    if steps == 0 {
        return Err(Error::invalid("steps", "need at least one time step"));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
    }
    let drivers = noise.drivers();
    let mut stream = NormalStream::new(noise.seed, path_index);
    let sd = dt.sqrt();
    let mut inc = Vec::with_capacity(drivers * steps);
    for j in 0..drivers {
        for k in 0..steps {
            inc.push(sd * stream.normal(j as u64, k as u64));
        }
    }
    Ok(BrownianPath::from_increments(
        dt, steps, drivers, inc, noise.seed, path_index, 0,
    ))
}

/// Splits each increment into `factor` sub-increments by sequential
/// Brownian-bridge sampling; each group sums back to its coarse increment.
pub fn refine_path(path: &BrownianPath, factor: usize) -> Result<BrownianPath> {
    if factor < 2 {
        return Err(Error::invalid("factor", format!("refinement factor must be >= 2, got {factor}")));
    }
    let fine_steps = path.steps * factor;
    let h = path.dt / factor as f64;
    let level = path.level + 1;
    let mut stream = NormalStream::new(path.seed, path.path_index);
    let mut inc = Vec::with_capacity(path.drivers * fine_steps);
    for j in 0..path.drivers {
        let stream_id = REFINE_STREAM_BASE * u64::from(level) + ((factor as u64) << 20) + j as u64;
        for k in 0..path.steps {
            let coarse = path.increment(j, k);
            let mut partial = 0.0;
            for i in 0..factor - 1 {
                let left = (factor - i) as f64;
                let remaining = coarse - partial;
                // δ | remaining ~ N(remaining / left, h (left - 1) / left)
                let mean = remaining / left;
                let var = h * (left - 1.0) / left;
                let z = stream.normal(stream_id, (k * factor + i) as u64);
                let d = mean + var.sqrt() * z;
                inc.push(d);
                partial += d;
            }
            inc.push(coarse - partial);
        }
    }
    Ok(BrownianPath::from_increments(
        h,
        fine_steps,
        path.drivers,
        inc,
        path.seed,
        path.path_index,
        level,
    ))
}

/// Phase `Σ_j m_j e_j(ξ) β_j(t_k)`, so that `W = i·phase`.
pub fn wiener_phase(path: &BrownianPath, noise: &NoiseSpec, grid: &Arc<Grid>, k: usize) -> Vec<f64> {
    let mut phase = vec![0.0; grid.len()];
    for (j, (m, e)) in noise.intensities.iter().zip(&noise.profiles).enumerate() {
        let c = m * path.value(j, k);
        if c != 0.0 {
            phase.iter_mut().zip(e.values()).for_each(|(p, ej)| *p += c * ej);
        }
    }
    phase
}

/// Phase of the increment `ΔW_k = W(t_{k+1}) - W(t_k)`.
pub fn increment_phase(path: &BrownianPath, noise: &NoiseSpec, grid: &Arc<Grid>, k: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|p| *p = 0.0);
    for (j, (m, e)) in noise.intensities.iter().zip(&noise.profiles).enumerate() {
        let c = m * path.increment(j, k);
        if c != 0.0 {
            out.iter_mut().zip(e.values()).for_each(|(p, ej)| *p += c * ej);
        }
    }
    let _ = grid;
}

/// `e^{W(t_k, ξ)} = exp(i Σ_j m_j e_j(ξ) β_j(t_k))`, unit modulus everywhere.
pub fn gauge_factor(path: &BrownianPath, noise: &NoiseSpec, grid: &Arc<Grid>, k: usize) -> Result<Field> {
    if k > path.steps() {
        return Err(Error::invalid("k", format!("time index {k} beyond {} steps", path.steps())));
    }
    if path.drivers() != noise.drivers() {
        return Err(Error::invalid(
            "noise",
            format!("path has {} drivers, noise spec {}", path.drivers(), noise.drivers()),
        ));
    }
    let phase = wiener_phase(path, noise, grid, k);
    Ok(Field::from_raw(
        grid,
        phase.into_iter().map(|p| Complex64::from_polar(1.0, p)).collect(),
    ))
}

/// A fixed set of paths shared by every evaluation that must use common
/// random numbers.
#[derive(Debug, Clone)]
pub struct Ensemble {
    paths: Vec<BrownianPath>,
}

impl Ensemble {
    /// Paths `first..first+size`; a noiseless spec yields `size` empty paths.
    pub fn sample(noise: &NoiseSpec, steps: usize, dt: f64, size: usize, first: u64) -> Result<Self> {
        if size == 0 {
            return Err(Error::invalid("paths", "ensemble must contain at least one path"));
        }
        let paths = (0..size as u64)
            .into_par_iter()
            .map(|i| {
                if noise.drivers() == 0 || steps == 0 {
                    Ok(BrownianPath::empty(steps, dt))
                } else {
                    sample_path(noise, steps, dt, first + i)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { paths })
    }

    pub fn deterministic(steps: usize, dt: f64) -> Self {
        Self {
            paths: vec![BrownianPath::empty(steps, dt)],
        }
    }

    pub fn from_paths(paths: Vec<BrownianPath>) -> Self {
        Self { paths }
    }

    pub fn paths(&self) -> &[BrownianPath] {
        &self.paths
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn refined(&self, factor: usize) -> Result<Self> {
        let paths = self
            .paths
            .par_iter()
            .map(|p| {
                if p.drivers() == 0 {
                    Ok(BrownianPath::empty(p.steps() * factor, p.dt() / factor as f64))
                } else {
                    refine_path(p, factor)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { paths })
    }
}
