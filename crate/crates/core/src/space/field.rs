use std::ops::{Add, Mul, Sub};
use std::sync::Arc;

use num_complex::Complex64;

use super::grid::Grid;
use crate::error::{Error, Result};

/// Complex amplitudes on a grid: states, adjoints, variations and targets.
#[derive(Debug, Clone)]
pub struct Field {
    grid: Arc<Grid>,
    values: Vec<Complex64>,
}

/// Real-valued grid function (potentials, noise profiles, `μ(ξ)`).
#[derive(Debug, Clone)]
pub struct RealField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self::constant(grid, Complex64::new(0.0, 0.0))
    }

    pub fn constant(grid: &Arc<Grid>, value: Complex64) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: vec![value; grid.len()],
        }
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 2]) -> Complex64) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: grid.nodes().map(f).collect(),
        }
    }

    /// Wraps raw values; rejects wrong length and non-finite entries.
    pub fn from_values(grid: &Arc<Grid>, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(
                "field",
                format!("expected {} values, got {}", grid.len(), values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|z| !z.is_finite()) {
            return Err(Error::invalid("field", format!("non-finite value at node {i}")));
        }
        Ok(Self {
            grid: Arc::clone(grid),
            values,
        })
    }

    /// Unchecked constructor for solver internals that verify finiteness themselves.
    pub(crate) fn from_raw(grid: &Arc<Grid>, values: Vec<Complex64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Complex64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_grid(&self, other: &Field) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub fn ensure_same_grid(&self, other: &Field) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|z| z.is_finite())
    }

    /// `(Σ|X|^p Δξ^d)^{1/p}`, the max modulus for `p = ∞`.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        lp_norm(self, p)
    }

    /// L² norm `|X|₂`.
    pub fn mass(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|z| z.norm_sqr()).sum::<f64>() * self.grid.cell_volume()
    }

    /// `⟨self, other⟩₂ = ∫ self · conj(other) dξ`.
    pub fn inner(&self, other: &Field) -> Complex64 {
        debug_assert!(self.same_grid(other));
        let s: Complex64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b.conj())
            .sum();
        s * self.grid.cell_volume()
    }

    pub fn real_inner(&self, other: &Field) -> f64 {
        self.inner(other).re
    }

    pub fn max_modulus(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, z| m.max(z.norm()))
    }

    /// Largest pointwise distance `max |a - b|`.
    pub fn sup_distance(&self, other: &Field) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).norm()))
    }

    pub fn distance(&self, other: &Field) -> f64 {
        let s: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum();
        (s * self.grid.cell_volume()).sqrt()
    }

    /// `|∇X|₂²` computed spectrally.
    pub fn gradient_norm_sq(&self) -> f64 {
        let mut hat = self.values.clone();
        self.grid.fft_forward(&mut hat);
        let s: f64 = hat
            .iter()
            .zip(self.grid.laplacian_symbol())
            .map(|(z, k2)| k2 * z.norm_sqr())
            .sum();
        s * self.grid.cell_volume() / self.grid.len() as f64
    }

    /// Fraction of `|X|₂²` carried by the outer 10% shell of the box.
    pub fn boundary_mass_fraction(&self) -> f64 {
        let total: f64 = self.values.iter().map(|z| z.norm_sqr()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let shell: f64 = self
            .values
            .iter()
            .enumerate()
            .filter(|(i, _)| self.grid.in_boundary_shell(*i))
            .map(|(_, z)| z.norm_sqr())
            .sum();
        shell / total
    }

    pub fn scale(&mut self, c: Complex64) {
        self.values.iter_mut().for_each(|z| *z *= c);
    }

    pub fn scaled(&self, c: Complex64) -> Field {
        let mut out = self.clone();
        out.scale(c);
        out
    }

    /// `self += c · other`.
    pub fn add_scaled(&mut self, c: Complex64, other: &Field) {
        debug_assert!(self.same_grid(other));
        self.values
            .iter_mut()
            .zip(&other.values)
            .for_each(|(a, b)| *a += c * b);
    }

    /// Pointwise product with a real field.
    pub fn mul_real(&self, real: &RealField) -> Field {
        Field::from_raw(
            &self.grid,
            self.values
                .iter()
                .zip(&real.values)
                .map(|(a, r)| a * r)
                .collect(),
        )
    }

    pub fn conj(&self) -> Field {
        Field::from_raw(&self.grid, self.values.iter().map(|z| z.conj()).collect())
    }

    pub fn modulus(&self) -> RealField {
        RealField::from_raw(&self.grid, self.values.iter().map(|z| z.norm()).collect())
    }
}

impl Add<&Field> for &Field {
    type Output = Field;
    fn add(self, rhs: &Field) -> Field {
        debug_assert!(self.same_grid(rhs));
        Field::from_raw(
            &self.grid,
            self.values.iter().zip(&rhs.values).map(|(a, b)| a + b).collect(),
        )
    }
}

impl Sub<&Field> for &Field {
    type Output = Field;
    fn sub(self, rhs: &Field) -> Field {
        debug_assert!(self.same_grid(rhs));
        Field::from_raw(
            &self.grid,
            self.values.iter().zip(&rhs.values).map(|(a, b)| a - b).collect(),
        )
    }
}

impl Mul<Complex64> for &Field {
    type Output = Field;
    fn mul(self, rhs: Complex64) -> Field {
        self.scaled(rhs)
    }
}

/// `(Σ|X|^p Δξ^d)^{1/p}` for `p ∈ [1,∞)`, `max|X|` for `p = ∞`.
pub fn lp_norm(field: &Field, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::invalid("p", format!("Lp exponent must be >= 1, got {p}")));
    }
    if p.is_infinite() {
        return Ok(field.max_modulus());
    }
    let w = field.grid.cell_volume();
    if p == 2.0 {
        return Ok(field.mass());
    }
    let s: f64 = field.values.iter().map(|z| z.norm().powf(p)).sum();
    Ok((s * w).powf(1.0 / p))
}

impl RealField {
    pub fn constant(grid: &Arc<Grid>, value: f64) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: vec![value; grid.len()],
        }
    }

    pub fn zeros(grid: &Arc<Grid>) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn from_fn(grid: &Arc<Grid>, f: impl Fn([f64; 2]) -> f64) -> Self {
        Self {
            grid: Arc::clone(grid),
            values: grid.nodes().map(f).collect(),
        }
    }

    pub fn from_values(grid: &Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::invalid(
                "real field",
                format!("expected {} values, got {}", grid.len(), values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "real field",
                format!("non-finite value at node {i}"),
            ));
        }
        Ok(Self {
            grid: Arc::clone(grid),
            values,
        })
    }

    pub(crate) fn from_raw(grid: &Arc<Grid>, values: Vec<f64>) -> Self {
        Self {
            grid: Arc::clone(grid),
            values,
        }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// True when every node carries the same value.
    pub fn is_constant(&self) -> bool {
        let first = self.values[0];
        self.values.iter().all(|v| *v == first)
    }

    pub fn scaled(&self, c: f64) -> RealField {
        RealField::from_raw(&self.grid, self.values.iter().map(|v| v * c).collect())
    }

    pub fn to_complex(&self) -> Field {
        Field::from_raw(
            &self.grid,
            self.values.iter().map(|v| Complex64::new(*v, 0.0)).collect(),
        )
    }

    /// `∫ f dξ` by the Riemann sum.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.cell_volume()
    }
}
