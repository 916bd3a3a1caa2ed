use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Periodic box `[-L, L)^d` sampled with `n` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dim: usize,
    pub half_extent: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn new(dim: usize, half_extent: f64, points: usize) -> Self {
        Self {
            dim,
            half_extent,
            points,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.dim) {
            return Err(Error::Grid(format!(
                "dimension must be 1 or 2, got {}",
                self.dim
            )));
        }
        if !(self.half_extent > 0.0 && self.half_extent.is_finite()) {
            return Err(Error::Grid(format!(
                "half extent must be positive, got {}",
                self.half_extent
            )));
        }
        if self.points < 8 || !self.points.is_power_of_two() {
            return Err(Error::Grid(format!(
                "points per axis must be a power of two >= 8, got {}",
                self.points
            )));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.half_extent / self.points as f64
    }
}

/// Immutable grid with node coordinates, the wavenumber lattice and FFT plans.
pub struct Grid {
    spec: GridSpec,
    spacing: f64,
    axis_nodes: Vec<f64>,
    axis_wavenumbers: Vec<f64>,
    laplacian_symbol: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid")
            .field("spec", &self.spec)
            .field("spacing", &self.spacing)
            .finish_non_exhaustive()
    }
}

impl PartialEq for Grid {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec
    }
}

/// Build a grid; rejects non-power-of-two `n`, `n < 8`, `L <= 0` and `d ∉ {1,2}`.
pub fn make_grid(spec: GridSpec) -> Result<Arc<Grid>> {
    Grid::new(spec).map(Arc::new)
}

impl Grid {
    pub fn new(spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.points;
        let l = spec.half_extent;
        let spacing = spec.spacing();
        let axis_nodes: Vec<f64> = (0..n).map(|i| -l + i as f64 * spacing).collect();
        let scale = PI / l;
        let axis_wavenumbers: Vec<f64> = (0..n)
            .map(|i| {
                let f = if i < n / 2 {
                    i as i64
                } else {
                    i as i64 - n as i64
                };
                f as f64 * scale
            })
            .collect();

        let laplacian_symbol = match spec.dim {
            1 => axis_wavenumbers.iter().map(|k| k * k).collect(),
            _ => {
                let mut s = Vec::with_capacity(n * n);
                for k0 in &axis_wavenumbers {
                    for k1 in &axis_wavenumbers {
                        s.push(k0 * k0 + k1 * k1);
                    }
                }
                s
            }
        };

        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n);
        let inverse = planner.plan_fft_inverse(n);
        Ok(Self {
            spec,
            spacing,
            axis_nodes,
            axis_wavenumbers,
            laplacian_symbol,
            forward,
            inverse,
        })
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn points(&self) -> usize {
        self.spec.points
    }

    pub fn half_extent(&self) -> f64 {
        self.spec.half_extent
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Quadrature weight `Δξ^d`.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.spec.dim as i32)
    }

    /// Total number of nodes, `n^d`.
    pub fn len(&self) -> usize {
        self.spec.points.pow(self.spec.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn axis_nodes(&self) -> &[f64] {
        &self.axis_nodes
    }

    pub fn axis_wavenumbers(&self) -> &[f64] {
        &self.axis_wavenumbers
    }

    /// `|k|²` per Fourier mode, row-major.
    pub fn laplacian_symbol(&self) -> &[f64] {
        &self.laplacian_symbol
    }

    /// Coordinates of node `idx` (row-major, axis 0 slowest). Unused axes are 0.
    pub fn node(&self, idx: usize) -> [f64; 2] {
        let n = self.spec.points;
        match self.spec.dim {
            1 => [self.axis_nodes[idx], 0.0],
            _ => [self.axis_nodes[idx / n], self.axis_nodes[idx % n]],
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len()).map(|i| self.node(i))
    }

    /// Nodes lying in the outer 10% shell of the box along any axis.
    pub fn in_boundary_shell(&self, idx: usize) -> bool {
        let edge = 0.9 * self.spec.half_extent;
        let xi = self.node(idx);
        xi[..self.spec.dim].iter().any(|c| c.abs() >= edge)
    }

    /// Unnormalized forward DFT in place.
    pub fn fft_forward(&self, data: &mut [Complex64]) {
        self.transform(data, &self.forward);
    }

    /// Inverse DFT in place, normalized so that `inverse(forward(x)) = x`.
    pub fn fft_inverse(&self, data: &mut [Complex64]) {
        self.transform(data, &self.inverse);
        let norm = 1.0 / self.len() as f64;
        data.iter_mut().for_each(|z| *z *= norm);
    }

    fn transform(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        debug_assert_eq!(data.len(), self.len());
        let n = self.spec.points;
        plan.process(data);
        if self.spec.dim == 2 {
            let mut t = transpose(data, n);
            plan.process(&mut t);
            let back = transpose(&t, n);
            data.copy_from_slice(&back);
        }
    }
}

fn transpose(data: &[Complex64], n: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = data[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_box_nodes_and_wavenumbers() {
        let g = make_grid(GridSpec::new(1, PI, 8)).unwrap();
        let expected_nodes: Vec<f64> = (0..8).map(|i| -PI + i as f64 * PI / 4.0).collect();
        for (a, b) in g.axis_nodes().iter().zip(&expected_nodes) {
            assert!((a - b).abs() < 1e-15);
        }
        let k: Vec<f64> = g.axis_wavenumbers().to_vec();
        let expected = [0.0, 1.0, 2.0, 3.0, -4.0, -3.0, -2.0, -1.0];
        for (a, b) in k.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let kmax = k.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((kmax - PI * 8.0 / (2.0 * PI)).abs() < 1e-14);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(make_grid(GridSpec::new(1, PI, 7)).is_err());
        assert!(make_grid(GridSpec::new(1, PI, 4)).is_err());
        assert!(make_grid(GridSpec::new(1, 0.0, 8)).is_err());
        assert!(make_grid(GridSpec::new(1, -1.0, 8)).is_err());
        assert!(make_grid(GridSpec::new(3, 1.0, 8)).is_err());
    }

    #[test]
    fn two_dimensional_spacing() {
        let g = make_grid(GridSpec::new(2, 10.0, 64)).unwrap();
        assert_eq!(g.len(), 64 * 64);
        assert!((g.spacing() - 0.3125).abs() < 1e-15);
        assert!((g.cell_volume() - 0.3125 * 0.3125).abs() < 1e-15);
    }

    #[test]
    fn fft_roundtrip_2d() {
        let g = make_grid(GridSpec::new(2, 3.0, 16)).unwrap();
        let orig: Vec<Complex64> = (0..g.len())
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let mut data = orig.clone();
        g.fft_forward(&mut data);
        g.fft_inverse(&mut data);
        for (a, b) in data.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-13);
        }
    }

    #[test]
    fn plane_wave_is_single_mode() {
        let g = make_grid(GridSpec::new(2, PI, 16)).unwrap();
        let mut data: Vec<Complex64> = g
            .nodes()
            .map(|x| Complex64::from_polar(1.0, 2.0 * x[0] - 3.0 * x[1]))
            .collect();
        g.fft_forward(&mut data);
        let (imax, _) = data
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap();
        assert!((g.laplacian_symbol()[imax] - 13.0).abs() < 1e-12);
        let others: f64 = data
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != imax)
            .map(|(_, z)| z.norm())
            .sum();
        assert!(others < 1e-9);
    }
}
