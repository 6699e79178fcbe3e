//! The three right-hand-side terms of the master equation as
//! field-to-field maps, plus a fused evaluator for the propagator.
//!
//! With `H = p^2/2m + V(q, t)` and `V(q, t) = -B q^2 + (C/2) q^4
//! + A q cos(omega t)`, the evolution of the quasi-probability is
//!
//! ```text
//! d rho/dt = L_c + L_q + T
//! L_c = {H, rho} = V'(q,t) d_p rho - (p/m) d_q rho
//! L_q = sum_{n>=1} hbar^{2n} (-1)^n / (4^n (2n+1)!)
//!       * d^{2n+1}V/dq^{2n+1} * d^{2n+1}rho/dp^{2n+1}
//! T   = D d^2_p rho            (momentum-only coupling)
//!     = D (d^2_p + d^2_q) rho  (symmetric coupling)
//! ```
//!
//! Bracket convention: `{A, B} = dA/dq dB/dp - dA/dp dB/dq`, fixed so a
//! free packet with `p > 0` advects toward `+q` (see the advection test).
//! The Moyal sum iterates until the odd potential derivative vanishes
//! identically, so termination is a checked property of the potential,
//! not an assumption: a quartic stops at `n = 1`, and a nonzero term that
//! would need an unsupported p-derivative is refused rather than
//! truncated.

use std::sync::Arc;

use ndarray::Array2;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{PhaseSpaceField, PhaseSpaceGrid, WignerState};
use crate::spectral::{self, Axis, SpectralError};

#[derive(Debug, Error)]
pub enum OperatorError {
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Field(#[from] crate::grid::FieldError),
    #[error("non-finite parameter {name} = {value}")]
    NonFiniteParam { name: &'static str, value: f64 },
    #[error("mass must be positive, got {0}")]
    NonPositiveMass(f64),
    #[error(
        "Moyal series needs p-derivative of order {order}; only potentials \
         of degree <= 4 (order <= 3) are supported"
    )]
    MoyalSeriesTooDeep { order: u32 },
}

#[derive(Debug, Error)]
pub enum ParamsError {
    #[error("parameter {name} must be finite, got {value}")]
    NonFinite { name: &'static str, value: f64 },
    #[error("parameter {name} must be > 0, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("parameter {name} must be >= 0, got {value}")]
    Negative { name: &'static str, value: f64 },
}

/// Duffing Hamiltonian constants, dimensionless model units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DuffingParams {
    pub mass: f64,
    /// Quadratic (inverted) coefficient B.
    pub b: f64,
    /// Quartic coefficient C.
    pub c: f64,
    /// Drive amplitude A.
    pub drive_amplitude: f64,
    /// Drive angular frequency omega.
    pub drive_frequency: f64,
}

impl DuffingParams {
    /// Production invariants: finite, m > 0, C > 0 (bounding potential),
    /// omega > 0. The operator routines themselves accept C = 0 or A = 0
    /// so limiting cases can be exercised directly.
    pub fn validate(&self) -> Result<(), ParamsError> {
        for (name, value) in [
            ("mass", self.mass),
            ("b", self.b),
            ("c", self.c),
            ("drive_amplitude", self.drive_amplitude),
            ("drive_frequency", self.drive_frequency),
        ] {
            if !value.is_finite() {
                return Err(ParamsError::NonFinite { name, value });
            }
        }
        if self.mass <= 0.0 {
            return Err(ParamsError::NonPositive { name: "mass", value: self.mass });
        }
        if self.c <= 0.0 {
            return Err(ParamsError::NonPositive { name: "c", value: self.c });
        }
        if self.drive_frequency <= 0.0 {
            return Err(ParamsError::NonPositive {
                name: "drive_frequency",
                value: self.drive_frequency,
            });
        }
        Ok(())
    }

    pub fn drive_period(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.drive_frequency
    }
}

/// Which phase-space variables the environment couples to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    MomentumOnly,
    Symmetric,
}

/// Effective Planck constant and environmental diffusion strength.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BathParams {
    pub hbar: f64,
    pub diffusion: f64,
    pub coupling: Coupling,
}

impl BathParams {
    pub fn validate(&self) -> Result<(), ParamsError> {
        if !self.hbar.is_finite() {
            return Err(ParamsError::NonFinite { name: "hbar", value: self.hbar });
        }
        if self.hbar <= 0.0 {
            return Err(ParamsError::NonPositive { name: "hbar", value: self.hbar });
        }
        if !self.diffusion.is_finite() {
            return Err(ParamsError::NonFinite { name: "diffusion", value: self.diffusion });
        }
        if self.diffusion < 0.0 {
            return Err(ParamsError::Negative { name: "diffusion", value: self.diffusion });
        }
        Ok(())
    }

    /// Composite scaling parameter `hbar^2 / D`; undefined without
    /// diffusion.
    pub fn zeta0(&self) -> Option<f64> {
        (self.diffusion > 0.0).then(|| self.hbar * self.hbar / self.diffusion)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub duffing: DuffingParams,
    pub bath: BathParams,
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ParamsError> {
        self.duffing.validate()?;
        self.bath.validate()
    }

    fn check_finite(&self) -> Result<(), OperatorError> {
        for (name, value) in [
            ("mass", self.duffing.mass),
            ("b", self.duffing.b),
            ("c", self.duffing.c),
            ("drive_amplitude", self.duffing.drive_amplitude),
            ("drive_frequency", self.duffing.drive_frequency),
            ("hbar", self.bath.hbar),
            ("diffusion", self.bath.diffusion),
        ] {
            if !value.is_finite() {
                return Err(OperatorError::NonFiniteParam { name, value });
            }
        }
        if self.duffing.mass <= 0.0 {
            return Err(OperatorError::NonPositiveMass(self.duffing.mass));
        }
        Ok(())
    }
}

/// Coefficients of `V(q, t)` as a polynomial in q, index = power.
fn potential_poly(duffing: &DuffingParams, t: f64) -> Vec<f64> {
    let drive = duffing.drive_amplitude * (duffing.drive_frequency * t).cos();
    vec![0.0, drive, -duffing.b, 0.0, duffing.c / 2.0]
}

fn poly_derivative(coeffs: &[f64], times: u32) -> Vec<f64> {
    let mut c = coeffs.to_vec();
    for _ in 0..times {
        c = c.iter().enumerate().skip(1).map(|(k, &v)| k as f64 * v).collect();
    }
    c
}

fn poly_is_zero(coeffs: &[f64]) -> bool {
    coeffs.iter().all(|&c| c == 0.0)
}

fn poly_eval(coeffs: &[f64], q: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * q + c)
}

/// Exact `order`-th partial derivative of the potential at `(q, t)`.
///
/// The potential is quartic, so orders >= 5 return exactly zero for any
/// parameters: the Moyal series terminates at n = 1.
pub fn potential_derivative(duffing: &DuffingParams, t: f64, order: u32, q: f64) -> f64 {
    poly_eval(&poly_derivative(&potential_poly(duffing, t), order), q)
}

/// One active Moyal term: weight the `p_order`-th p-derivative of the
/// field by `coeff_poly(q)` (series prefactor folded in).
#[derive(Debug, Clone)]
pub(crate) struct MoyalTerm {
    pub p_order: u32,
    pub coeff_poly: Vec<f64>,
}

/// Enumerate the nonzero Moyal terms, iterating until the odd potential
/// derivative vanishes identically.
pub(crate) fn moyal_terms(
    duffing: &DuffingParams,
    hbar: f64,
    t: f64,
) -> Result<Vec<MoyalTerm>, OperatorError> {
    let mut terms = Vec::new();
    if hbar == 0.0 {
        return Ok(terms);
    }
    let base = potential_poly(duffing, t);
    for n in 1u32.. {
        let order = 2 * n + 1;
        let poly = poly_derivative(&base, order);
        if poly_is_zero(&poly) {
            break;
        }
        if order > 3 {
            return Err(OperatorError::MoyalSeriesTooDeep { order });
        }
        let fact: f64 = (1..=u64::from(order)).map(|v| v as f64).product();
        let sign = if n % 2 == 1 { -1.0 } else { 1.0 };
        let factor = sign * hbar.powi(2 * n as i32) / (4f64.powi(n as i32) * fact);
        let coeff_poly = poly.iter().map(|&c| factor * c).collect();
        terms.push(MoyalTerm { p_order: order, coeff_poly });
    }
    Ok(terms)
}

/// The right-hand side split into its three terms plus their pointwise
/// sum, so diagnostics never recompute a derivative.
#[derive(Debug, Clone)]
pub struct RhsParts {
    pub lc: PhaseSpaceField,
    pub lq: PhaseSpaceField,
    pub tt: PhaseSpaceField,
    pub total: PhaseSpaceField,
}

/// Classical Liouville term `{H, rho}`.
pub fn liouville_term(
    state: &WignerState,
    params: &ModelParams,
) -> Result<PhaseSpaceField, OperatorError> {
    params.check_finite()?;
    let grid = *state.field.grid();
    let d1p = spectral::spectral_derivative(&state.field, Axis::P, 1)?;
    let d1q = spectral::spectral_derivative(&state.field, Axis::Q, 1)?;
    let vp = poly_derivative(&potential_poly(&params.duffing, state.t), 1);
    let inv_m = 1.0 / params.duffing.mass;
    let mut out = Array2::zeros((grid.n_q(), grid.n_p()));
    for ((i, j), o) in out.indexed_iter_mut() {
        *o = poly_eval(&vp, grid.q(i)) * d1p.values()[[i, j]]
            - grid.p(j) * inv_m * d1q.values()[[i, j]];
    }
    Ok(PhaseSpaceField::from_parts_unchecked(grid, out))
}

/// Quantum correction `L_q`, the terminated Moyal sum.
pub fn quantum_term(
    state: &WignerState,
    params: &ModelParams,
) -> Result<PhaseSpaceField, OperatorError> {
    params.check_finite()?;
    let grid = *state.field.grid();
    let terms = moyal_terms(&params.duffing, params.bath.hbar, state.t)?;
    let mut out = Array2::zeros((grid.n_q(), grid.n_p()));
    for term in &terms {
        let d = spectral::spectral_derivative(&state.field, Axis::P, term.p_order)?;
        for ((i, j), o) in out.indexed_iter_mut() {
            *o += poly_eval(&term.coeff_poly, grid.q(i)) * d.values()[[i, j]];
        }
    }
    Ok(PhaseSpaceField::from_parts_unchecked(grid, out))
}

/// Environmental diffusion `T`.
pub fn diffusion_term(
    state: &WignerState,
    params: &ModelParams,
) -> Result<PhaseSpaceField, OperatorError> {
    params.check_finite()?;
    let grid = *state.field.grid();
    let d = params.bath.diffusion;
    if d == 0.0 {
        return Ok(PhaseSpaceField::zeros(grid));
    }
    let d2p = spectral::spectral_derivative(&state.field, Axis::P, 2)?;
    let mut out = d2p.into_values();
    out.mapv_inplace(|v| d * v);
    if params.bath.coupling == Coupling::Symmetric {
        let d2q = spectral::spectral_derivative(&state.field, Axis::Q, 2)?;
        out.zip_mut_with(d2q.values(), |o, &v| *o += d * v);
    }
    Ok(PhaseSpaceField::from_parts_unchecked(grid, out))
}

/// Full right-hand side with parts; `total` is exactly `lc + lq + tt`
/// pointwise.
pub fn rhs(state: &WignerState, params: &ModelParams) -> Result<RhsParts, OperatorError> {
    let mut ev = RhsEvaluator::new(*state.field.grid());
    ev.eval_parts(&state.field, state.t, params)
}

// ---------------------------------------------------------------------
// Fused evaluator
// ---------------------------------------------------------------------

/// Right-hand-side evaluator with persistent transforms and scratch.
///
/// One forward transform along p serves every p-derivative order a stage
/// needs; the q-derivative runs on a transposed copy so both directions
/// see contiguous lines. Half-complex (real-input) transforms keep the
/// output real by construction; the zero-frequency bin is annihilated by
/// the `(i k)^order` multiplier and the Nyquist bin is pinned real, which
/// is the point where any imaginary residue is discarded. Scratch is
/// owned by the evaluator, so one instance serves one evolution at a
/// time; concurrent evolutions use separate instances.
pub struct RhsEvaluator {
    grid: PhaseSpaceGrid,
    dealias: bool,
    r2c_p: Arc<dyn RealToComplex<f64>>,
    c2r_p: Arc<dyn ComplexToReal<f64>>,
    r2c_q: Arc<dyn RealToComplex<f64>>,
    c2r_q: Arc<dyn ComplexToReal<f64>>,
    /// `(i k)^order` on the half spectrum, orders 1..=3, inverse-transform
    /// normalization folded in.
    mult_p: [Vec<Complex64>; 3],
    mult_q1: Vec<Complex64>,
    mult_q2: Vec<Complex64>,
    /// Real views of the p multipliers for the fused total kernel:
    /// imag of (ik)/n, real of (ik)^2/n, imag of (ik)^3/n.
    w_p1: Vec<f64>,
    w_p2: Vec<f64>,
    w_p3: Vec<f64>,
    w_q1: Vec<f64>,
    line: Vec<f64>,
    spec_p: Vec<Complex64>,
    spec_q: Vec<Complex64>,
    spec_tmp_p: Vec<Complex64>,
    spec_tmp_q: Vec<Complex64>,
    fft_scratch_p: Vec<Complex64>,
    fft_scratch_q: Vec<Complex64>,
    /// Derivative lines along p, indexed by order - 1.
    d_line: [Vec<f64>; 3],
    rho_t: Vec<f64>,
    adv_t: Vec<f64>,
    diff_t: Vec<f64>,
    qline_out: Vec<f64>,
    qline2: Vec<f64>,
    // per-(t, params) coefficient cache, refreshed on key change
    vprime: Vec<f64>,
    moyal_coeffs: Vec<(u32, Vec<f64>)>,
    /// Order-3 Moyal coefficient per q row (zero when hbar = 0), the only
    /// order a quartic potential produces; used by the fused kernel.
    moyal3: Vec<f64>,
    coeff_key: Option<(f64, ModelParams)>,
}

fn half_multipliers(n: usize, length: f64, order: u32, dealias: bool) -> Vec<Complex64> {
    let base = 2.0 * std::f64::consts::PI / length;
    let keep = spectral::dealias_keep(n);
    let scale = 1.0 / n as f64;
    (0..=n / 2)
        .map(|j| {
            let nyquist = n % 2 == 0 && j == n / 2;
            if (order % 2 == 1 && nyquist) || (dealias && j > keep) {
                Complex64::new(0.0, 0.0)
            } else {
                let k = base * j as f64;
                Complex64::i().powu(order) * k.powi(order as i32) * scale
            }
        })
        .collect()
}

/// Pin the bins the half-complex inverse requires to be real.
///
/// The DC bin is annihilated by every `(i k)^order` multiplier, and the
/// Nyquist bin (even lengths only) is either annihilated (odd orders) or
/// real; writing that structure explicitly also keeps a non-finite field
/// flowing through to the propagator's stability check instead of
/// tripping the transform's input validation.
fn sanitize_half_spectrum(spec: &mut [Complex64], mult: &[Complex64], line_len: usize) {
    spec[0] = Complex64::new(0.0, 0.0);
    if line_len % 2 == 0 {
        let last = spec.len() - 1;
        if mult[last] == Complex64::new(0.0, 0.0) {
            spec[last] = Complex64::new(0.0, 0.0);
        } else {
            spec[last].im = 0.0;
        }
    }
}

fn transpose_into(src: &[f64], rows: usize, cols: usize, dst: &mut [f64]) {
    debug_assert_eq!(src.len(), rows * cols);
    debug_assert_eq!(dst.len(), rows * cols);
    const B: usize = 32;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

impl RhsEvaluator {
    pub fn new(grid: PhaseSpaceGrid) -> Self {
        Self::with_dealias(grid, false)
    }

    /// `dealias = true` enables the 2/3-rule spectral cutoff on every
    /// derivative, for safety studies of the q-polynomial broadening.
    pub fn with_dealias(grid: PhaseSpaceGrid, dealias: bool) -> Self {
        let (n_q, n_p) = (grid.n_q(), grid.n_p());
        let mut planner = RealFftPlanner::<f64>::new();
        let r2c_p = planner.plan_fft_forward(n_p);
        let c2r_p = planner.plan_fft_inverse(n_p);
        let r2c_q = planner.plan_fft_forward(n_q);
        let c2r_q = planner.plan_fft_inverse(n_q);
        let scratch_p = r2c_p.get_scratch_len().max(c2r_p.get_scratch_len());
        let scratch_q = r2c_q.get_scratch_len().max(c2r_q.get_scratch_len());
        let mult_p = [
            half_multipliers(n_p, grid.length_p(), 1, dealias),
            half_multipliers(n_p, grid.length_p(), 2, dealias),
            half_multipliers(n_p, grid.length_p(), 3, dealias),
        ];
        let mult_q1 = half_multipliers(n_q, grid.length_q(), 1, dealias);
        Self {
            grid,
            dealias,
            w_p1: mult_p[0].iter().map(|m| m.im).collect(),
            w_p2: mult_p[1].iter().map(|m| m.re).collect(),
            w_p3: mult_p[2].iter().map(|m| m.im).collect(),
            w_q1: mult_q1.iter().map(|m| m.im).collect(),
            mult_p,
            mult_q1,
            mult_q2: half_multipliers(n_q, grid.length_q(), 2, dealias),
            r2c_p,
            c2r_p,
            r2c_q,
            c2r_q,
            line: vec![0.0; n_p.max(n_q)],
            spec_p: vec![Complex64::default(); n_p / 2 + 1],
            spec_q: vec![Complex64::default(); n_q / 2 + 1],
            spec_tmp_p: vec![Complex64::default(); n_p / 2 + 1],
            spec_tmp_q: vec![Complex64::default(); n_q / 2 + 1],
            fft_scratch_p: vec![Complex64::default(); scratch_p],
            fft_scratch_q: vec![Complex64::default(); scratch_q],
            d_line: [vec![0.0; n_p], vec![0.0; n_p], vec![0.0; n_p]],
            rho_t: vec![0.0; n_q * n_p],
            adv_t: vec![0.0; n_q * n_p],
            diff_t: vec![0.0; n_q * n_p],
            qline_out: vec![0.0; n_q],
            qline2: vec![0.0; n_q],
            vprime: vec![0.0; n_q],
            moyal_coeffs: Vec::new(),
            moyal3: vec![0.0; n_q],
            coeff_key: None,
        }
    }

    pub fn grid(&self) -> &PhaseSpaceGrid {
        &self.grid
    }

    pub fn dealias(&self) -> bool {
        self.dealias
    }

    fn refresh_coeffs(&mut self, t: f64, params: &ModelParams) -> Result<(), OperatorError> {
        if self.coeff_key == Some((t, *params)) {
            return Ok(());
        }
        params.check_finite()?;
        let vp_poly = poly_derivative(&potential_poly(&params.duffing, t), 1);
        for (i, v) in self.vprime.iter_mut().enumerate() {
            *v = poly_eval(&vp_poly, self.grid.q(i));
        }
        let terms = moyal_terms(&params.duffing, params.bath.hbar, t)?;
        self.moyal_coeffs = terms
            .iter()
            .map(|term| {
                let per_q: Vec<f64> = (0..self.grid.n_q())
                    .map(|i| poly_eval(&term.coeff_poly, self.grid.q(i)))
                    .collect();
                (term.p_order, per_q)
            })
            .collect();
        self.moyal3.fill(0.0);
        for (order, per_q) in &self.moyal_coeffs {
            debug_assert_eq!(*order, 3, "quartic potentials terminate at the third derivative");
            for (m, c) in self.moyal3.iter_mut().zip(per_q) {
                *m += c;
            }
        }
        self.coeff_key = Some((t, *params));
        Ok(())
    }

    /// Forward-transform the current contents of `self.line[..n_p]`.
    fn forward_p(&mut self) {
        let n_p = self.grid.n_p();
        self.r2c_p
            .process_with_scratch(&mut self.line[..n_p], &mut self.spec_p, &mut self.fft_scratch_p)
            .expect("buffer sizes fixed by construction");
    }

    /// p-derivative of the stored spectrum into `d_line[order - 1]`.
    fn apply_p_derivative(&mut self, order: u32) {
        let mult = &self.mult_p[(order - 1) as usize];
        for ((t, s), m) in self.spec_tmp_p.iter_mut().zip(&self.spec_p).zip(mult) {
            *t = s * m;
        }
        sanitize_half_spectrum(&mut self.spec_tmp_p, mult, self.grid.n_p());
        self.c2r_p
            .process_with_scratch(
                &mut self.spec_tmp_p,
                &mut self.d_line[(order - 1) as usize],
                &mut self.fft_scratch_p,
            )
            .expect("buffer sizes fixed by construction");
    }

    /// q-direction contributions on the transposed layout: advection
    /// `-(p/m) d_q rho` into `adv_t`, and `D d^2_q rho` into `diff_t`
    /// when requested.
    fn q_pass(&mut self, values: &[f64], inv_m: f64, d2q_coeff: Option<f64>) {
        let (n_q, n_p) = (self.grid.n_q(), self.grid.n_p());
        transpose_into(values, n_q, n_p, &mut self.rho_t);
        for j in 0..n_p {
            self.line[..n_q].copy_from_slice(&self.rho_t[j * n_q..(j + 1) * n_q]);
            self.r2c_q
                .process_with_scratch(
                    &mut self.line[..n_q],
                    &mut self.spec_q,
                    &mut self.fft_scratch_q,
                )
                .expect("buffer sizes fixed by construction");
            // (ik) is purely imaginary: multiply by (0, w)
            for ((t, s), w) in self.spec_tmp_q.iter_mut().zip(&self.spec_q).zip(&self.w_q1) {
                *t = Complex64::new(-s.im * w, s.re * w);
            }
            sanitize_half_spectrum(&mut self.spec_tmp_q, &self.mult_q1, n_q);
            self.c2r_q
                .process_with_scratch(
                    &mut self.spec_tmp_q,
                    &mut self.qline_out,
                    &mut self.fft_scratch_q,
                )
                .expect("buffer sizes fixed by construction");
            let advect = -self.grid.p(j) * inv_m;
            for (o, d) in
                self.adv_t[j * n_q..(j + 1) * n_q].iter_mut().zip(&self.qline_out)
            {
                *o = advect * d;
            }
            if let Some(dcoeff) = d2q_coeff {
                for ((t, s), m) in
                    self.spec_tmp_q.iter_mut().zip(&self.spec_q).zip(&self.mult_q2)
                {
                    *t = s * m;
                }
                sanitize_half_spectrum(&mut self.spec_tmp_q, &self.mult_q2, n_q);
                self.c2r_q
                    .process_with_scratch(
                        &mut self.spec_tmp_q,
                        &mut self.qline_out,
                        &mut self.fft_scratch_q,
                    )
                    .expect("buffer sizes fixed by construction");
                for (o, d) in
                    self.diff_t[j * n_q..(j + 1) * n_q].iter_mut().zip(&self.qline_out)
                {
                    *o = dcoeff * d;
                }
            }
        }
    }

    fn symmetric_diffusion(params: &ModelParams) -> Option<f64> {
        (params.bath.coupling == Coupling::Symmetric && params.bath.diffusion > 0.0)
            .then_some(params.bath.diffusion)
    }

    /// q-direction contributions scattered straight into the row-major
    /// `out` (total-mode kernel; skips the output transpose).
    fn q_pass_total_into(
        &mut self,
        values: &[f64],
        inv_m: f64,
        d2q_coeff: Option<f64>,
        out: &mut [f64],
    ) {
        let (n_q, n_p) = (self.grid.n_q(), self.grid.n_p());
        transpose_into(values, n_q, n_p, &mut self.rho_t);
        for j in 0..n_p {
            self.line[..n_q].copy_from_slice(&self.rho_t[j * n_q..(j + 1) * n_q]);
            self.r2c_q
                .process_with_scratch(
                    &mut self.line[..n_q],
                    &mut self.spec_q,
                    &mut self.fft_scratch_q,
                )
                .expect("buffer sizes fixed by construction");
            for ((t, s), w) in self.spec_tmp_q.iter_mut().zip(&self.spec_q).zip(&self.w_q1) {
                *t = Complex64::new(-s.im * w, s.re * w);
            }
            sanitize_half_spectrum(&mut self.spec_tmp_q, &self.mult_q1, n_q);
            self.c2r_q
                .process_with_scratch(
                    &mut self.spec_tmp_q,
                    &mut self.qline_out,
                    &mut self.fft_scratch_q,
                )
                .expect("buffer sizes fixed by construction");
            let advect = -self.grid.p(j) * inv_m;
            if let Some(dcoeff) = d2q_coeff {
                for ((t, s), m) in
                    self.spec_tmp_q.iter_mut().zip(&self.spec_q).zip(&self.mult_q2)
                {
                    *t = s * m;
                }
                sanitize_half_spectrum(&mut self.spec_tmp_q, &self.mult_q2, n_q);
                self.c2r_q
                    .process_with_scratch(
                        &mut self.spec_tmp_q,
                        &mut self.qline2,
                        &mut self.fft_scratch_q,
                    )
                    .expect("buffer sizes fixed by construction");
                for i in 0..n_q {
                    out[i * n_p + j] = advect * self.qline_out[i] + dcoeff * self.qline2[i];
                }
            } else {
                for i in 0..n_q {
                    out[i * n_p + j] = advect * self.qline_out[i];
                }
            }
        }
    }

    /// Evaluate the combined right-hand side into `out`.
    ///
    /// This is the propagator stage kernel: no part fields are
    /// materialized, and the p-direction multipliers of every active term
    /// are fused into one row-dependent multiplier, so each row costs one
    /// forward and one inverse transform. Returns `false` if any output
    /// value is non-finite.
    pub fn eval_total_into(
        &mut self,
        values: &Array2<f64>,
        t: f64,
        params: &ModelParams,
        out: &mut Array2<f64>,
    ) -> Result<bool, OperatorError> {
        self.refresh_coeffs(t, params)?;
        let (n_q, n_p) = (self.grid.n_q(), self.grid.n_p());
        debug_assert_eq!(values.dim(), (n_q, n_p));
        let src = values.as_slice().expect("standard layout");
        let sym = Self::symmetric_diffusion(params);
        let inv_m = 1.0 / params.duffing.mass;
        let diffusion = params.bath.diffusion;

        let out_slice = out.as_slice_mut().expect("standard layout");
        self.q_pass_total_into(src, inv_m, sym, out_slice);

        let mut finite = true;
        let half = n_p / 2 + 1;
        for i in 0..n_q {
            self.line[..n_p].copy_from_slice(&src[i * n_p..(i + 1) * n_p]);
            self.forward_p();
            // fused multiplier vp (ik) + D (ik)^2 + c3 (ik)^3, written as
            // one complex factor (re, im) per bin
            let vp = self.vprime[i];
            let c3 = self.moyal3[i];
            for k in 0..half {
                let im = vp * self.w_p1[k] + c3 * self.w_p3[k];
                let re = diffusion * self.w_p2[k];
                let s = self.spec_p[k];
                self.spec_tmp_p[k] =
                    Complex64::new(s.re * re - s.im * im, s.re * im + s.im * re);
            }
            self.spec_tmp_p[0] = Complex64::new(0.0, 0.0);
            if n_p % 2 == 0 {
                self.spec_tmp_p[half - 1].im = 0.0;
            }
            self.c2r_p
                .process_with_scratch(
                    &mut self.spec_tmp_p,
                    &mut self.d_line[0],
                    &mut self.fft_scratch_p,
                )
                .expect("buffer sizes fixed by construction");
            let out_row = &mut out_slice[i * n_p..(i + 1) * n_p];
            for (o, d) in out_row.iter_mut().zip(&self.d_line[0]) {
                let v = *o + d;
                finite &= v.is_finite();
                *o = v;
            }
        }
        Ok(finite)
    }

    /// Evaluate with the three terms materialized separately; `total` is
    /// the exact pointwise sum of the parts. Used at sample times.
    pub fn eval_parts(
        &mut self,
        field: &PhaseSpaceField,
        t: f64,
        params: &ModelParams,
    ) -> Result<RhsParts, OperatorError> {
        self.refresh_coeffs(t, params)?;
        let (n_q, n_p) = (self.grid.n_q(), self.grid.n_p());
        let src = field.values().as_slice().expect("standard layout");
        let sym = Self::symmetric_diffusion(params);
        let inv_m = 1.0 / params.duffing.mass;
        let diffusion = params.bath.diffusion;

        self.q_pass(src, inv_m, sym);
        let mut lc = vec![0.0; n_q * n_p];
        transpose_into(&self.adv_t, n_p, n_q, &mut lc);
        let mut tt = vec![0.0; n_q * n_p];
        if sym.is_some() {
            transpose_into(&self.diff_t, n_p, n_q, &mut tt);
        }
        let mut lq = vec![0.0; n_q * n_p];

        let moyal = std::mem::take(&mut self.moyal_coeffs);
        for i in 0..n_q {
            self.line[..n_p].copy_from_slice(&src[i * n_p..(i + 1) * n_p]);
            self.forward_p();
            self.apply_p_derivative(1);
            let vp = self.vprime[i];
            for (o, d) in lc[i * n_p..(i + 1) * n_p].iter_mut().zip(&self.d_line[0]) {
                *o += vp * d;
            }
            if diffusion > 0.0 {
                self.apply_p_derivative(2);
                for (o, d) in tt[i * n_p..(i + 1) * n_p].iter_mut().zip(&self.d_line[1]) {
                    *o += diffusion * d;
                }
            }
            for (order, per_q) in &moyal {
                self.apply_p_derivative(*order);
                let c = per_q[i];
                for (o, d) in
                    lq[i * n_p..(i + 1) * n_p].iter_mut().zip(&self.d_line[(*order - 1) as usize])
                {
                    *o += c * d;
                }
            }
        }
        self.moyal_coeffs = moyal;

        let total: Vec<f64> = lc.iter().zip(&lq).zip(&tt).map(|((a, b), c)| a + b + c).collect();
        let to_field = |v: Vec<f64>| {
            PhaseSpaceField::from_parts_unchecked(
                self.grid,
                Array2::from_shape_vec((n_q, n_p), v).expect("shape"),
            )
        };
        Ok(RhsParts { lc: to_field(lc), lq: to_field(lq), tt: to_field(tt), total: to_field(total) })
    }
}
