//! Phase-space grids, fields, and the integral functionals built on them.
//!
//! The simulation domain is a uniform periodic lattice in `(q, p)`. Point
//! `(i, j)` sits at `(q_min + i*dq, p_min + j*dp)` with no duplicated
//! endpoint, so Fourier differentiation applies directly. Fields are real
//! valued; the quasi-probability they carry may be negative but never
//! NaN/Inf.

use ndarray::Array2;
use thiserror::Error;

/// Smallest point count per axis that keeps spectral differentiation
/// meaningful on the fields we evolve.
pub const MIN_POINTS: usize = 16;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("non-finite grid extent: {name} = {value}")]
    NonFiniteExtent { name: &'static str, value: f64 },
    #[error("inverted or empty extent on {axis} axis: min {min} >= max {max}")]
    InvertedExtent { axis: char, min: f64, max: f64 },
    #[error("{axis} axis has {n} points, need at least {MIN_POINTS}")]
    TooFewPoints { axis: char, n: usize },
}

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("field shape {got:?} does not match grid shape {want:?}")]
    ShapeMismatch { got: (usize, usize), want: (usize, usize) },
    #[error("non-finite field value at (i={i}, j={j}): {value}")]
    NonFinite { i: usize, j: usize, value: f64 },
}

/// Uniform periodic lattice over `[q_min, q_max) x [p_min, p_max)`.
///
/// Spacings are derived: `dq = (q_max - q_min) / n_q`, and likewise for
/// `dp`. The grid is plain data and `Copy`; fields keep their own copy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSpaceGrid {
    q_min: f64,
    q_max: f64,
    p_min: f64,
    p_max: f64,
    n_q: usize,
    n_p: usize,
    dq: f64,
    dp: f64,
}

impl PhaseSpaceGrid {
    pub fn new(
        q_min: f64,
        q_max: f64,
        p_min: f64,
        p_max: f64,
        n_q: usize,
        n_p: usize,
    ) -> Result<Self, GridError> {
        for (name, value) in [
            ("q_min", q_min),
            ("q_max", q_max),
            ("p_min", p_min),
            ("p_max", p_max),
        ] {
            if !value.is_finite() {
                return Err(GridError::NonFiniteExtent { name, value });
            }
        }
        if q_max <= q_min {
            return Err(GridError::InvertedExtent { axis: 'q', min: q_min, max: q_max });
        }
        if p_max <= p_min {
            return Err(GridError::InvertedExtent { axis: 'p', min: p_min, max: p_max });
        }
        if n_q < MIN_POINTS {
            return Err(GridError::TooFewPoints { axis: 'q', n: n_q });
        }
        if n_p < MIN_POINTS {
            return Err(GridError::TooFewPoints { axis: 'p', n: n_p });
        }
        let dq = (q_max - q_min) / n_q as f64;
        let dp = (p_max - p_min) / n_p as f64;
        Ok(Self { q_min, q_max, p_min, p_max, n_q, n_p, dq, dp })
    }

    pub fn q_min(&self) -> f64 {
        self.q_min
    }

    pub fn q_max(&self) -> f64 {
        self.q_max
    }

    pub fn p_min(&self) -> f64 {
        self.p_min
    }

    pub fn p_max(&self) -> f64 {
        self.p_max
    }

    pub fn n_q(&self) -> usize {
        self.n_q
    }

    pub fn n_p(&self) -> usize {
        self.n_p
    }

    pub fn dq(&self) -> f64 {
        self.dq
    }

    pub fn dp(&self) -> f64 {
        self.dp
    }

    /// Length of the periodic q interval.
    pub fn length_q(&self) -> f64 {
        self.q_max - self.q_min
    }

    pub fn length_p(&self) -> f64 {
        self.p_max - self.p_min
    }

    /// Phase-space area of one cell, the quadrature weight of the lattice.
    pub fn cell_area(&self) -> f64 {
        self.dq * self.dp
    }

    pub fn q(&self, i: usize) -> f64 {
        self.q_min + i as f64 * self.dq
    }

    pub fn p(&self, j: usize) -> f64 {
        self.p_min + j as f64 * self.dp
    }

    pub fn q_values(&self) -> Vec<f64> {
        (0..self.n_q).map(|i| self.q(i)).collect()
    }

    pub fn p_values(&self) -> Vec<f64> {
        (0..self.n_p).map(|j| self.p(j)).collect()
    }

    /// FFT-ordered angular wavenumbers `2*pi*j / L` for one axis.
    pub(crate) fn wavenumbers(n: usize, length: f64) -> Vec<f64> {
        let base = 2.0 * std::f64::consts::PI / length;
        (0..n)
            .map(|j| {
                let j = if j <= n / 2 { j as isize } else { j as isize - n as isize };
                base * j as f64
            })
            .collect()
    }

    pub fn wavenumbers_q(&self) -> Vec<f64> {
        Self::wavenumbers(self.n_q, self.length_q())
    }

    pub fn wavenumbers_p(&self) -> Vec<f64> {
        Self::wavenumbers(self.n_p, self.length_p())
    }
}

/// Real-valued samples on a [`PhaseSpaceGrid`]; row index is q, column
/// index is p.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpaceField {
    grid: PhaseSpaceGrid,
    values: Array2<f64>,
}

impl PhaseSpaceField {
    /// Validating constructor: shape must match the grid and every sample
    /// must be finite.
    pub fn new(grid: PhaseSpaceGrid, values: Array2<f64>) -> Result<Self, FieldError> {
        let want = (grid.n_q(), grid.n_p());
        if values.dim() != want {
            return Err(FieldError::ShapeMismatch { got: values.dim(), want });
        }
        for ((i, j), &v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(FieldError::NonFinite { i, j, value: v });
            }
        }
        Ok(Self { grid, values })
    }

    /// Internal constructor for operator outputs whose finiteness is
    /// checked elsewhere (or not at all, for scratch).
    pub(crate) fn from_parts_unchecked(grid: PhaseSpaceGrid, values: Array2<f64>) -> Self {
        debug_assert_eq!(values.dim(), (grid.n_q(), grid.n_p()));
        Self { grid, values }
    }

    pub fn zeros(grid: PhaseSpaceGrid) -> Self {
        Self { grid, values: Array2::zeros((grid.n_q(), grid.n_p())) }
    }

    /// Sample `f(q, p)` on the lattice.
    pub fn from_fn(grid: PhaseSpaceGrid, f: impl Fn(f64, f64) -> f64) -> Result<Self, FieldError> {
        let values =
            Array2::from_shape_fn((grid.n_q(), grid.n_p()), |(i, j)| f(grid.q(i), grid.p(j)));
        Self::new(grid, values)
    }

    pub fn grid(&self) -> &PhaseSpaceGrid {
        &self.grid
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub(crate) fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    /// Phase-space integral `sum_ij values[i][j] * dq * dp`.
    ///
    /// This is the lattice trace functional; linear in the field and exact
    /// for the k = 0 Fourier mode. Compensated summation keeps the
    /// reduction order-independent of any internal parallelism.
    pub fn integrate(&self) -> Result<f64, FieldError> {
        let sum = self.checked_kahan(|v| v)?;
        Ok(sum * self.grid.cell_area())
    }

    /// Squared L2 functional `sum_ij values[i][j]^2 * dq * dp`.
    ///
    /// Nonnegative, and zero only for the zero field.
    pub fn l2_functional(&self) -> Result<f64, FieldError> {
        let sum = self.checked_kahan(|v| v * v)?;
        Ok(sum * self.grid.cell_area())
    }

    /// Integral of |f|; used by boundary-mass monitors where sign
    /// cancellation must not hide leakage.
    pub fn abs_integral(&self) -> Result<f64, FieldError> {
        let sum = self.checked_kahan(f64::abs)?;
        Ok(sum * self.grid.cell_area())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, &v| m.max(v.abs()))
    }

    fn checked_kahan(&self, f: impl Fn(f64) -> f64) -> Result<f64, FieldError> {
        let mut sum = 0.0_f64;
        let mut carry = 0.0_f64;
        for ((i, j), &v) in self.values.indexed_iter() {
            if !v.is_finite() {
                return Err(FieldError::NonFinite { i, j, value: v });
            }
            let y = f(v) - carry;
            let t = sum + y;
            carry = (t - sum) - y;
            sum = t;
        }
        Ok(sum)
    }
}

/// A field together with its evolution time and the mass it started with.
///
/// `mass0` anchors the relative-drift monitor; it is fixed when the state
/// is created and carried unchanged through propagation.
#[derive(Debug, Clone)]
pub struct WignerState {
    pub field: PhaseSpaceField,
    pub t: f64,
    pub mass0: f64,
}

impl WignerState {
    /// Wrap an initial field at `t = 0`, recording its mass.
    pub fn new(field: PhaseSpaceField) -> Result<Self, FieldError> {
        let mass0 = field.integrate()?;
        Ok(Self { field, t: 0.0, mass0 })
    }

    /// Reassemble a state from persisted parts (resume paths).
    pub fn from_parts(field: PhaseSpaceField, t: f64, mass0: f64) -> Self {
        Self { field, t, mass0 }
    }

    pub fn mass(&self) -> Result<f64, FieldError> {
        self.field.integrate()
    }
}
