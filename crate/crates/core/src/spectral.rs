//! Fourier differentiation on the periodic lattice.
//!
//! Derivatives are exact for band-limited fields: transform a line of
//! samples, multiply by `(i k)^order`, transform back. For odd orders on
//! even-length axes the Nyquist mode is zeroed, which keeps the result
//! real. The imaginary residue of each inverse transform is dropped here
//! and its magnitude asserted against `RESIDUE_TOL * max|output|`; anything
//! larger signals a broken Hermitian symmetry upstream, not rounding.

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::grid::{PhaseSpaceField, PhaseSpaceGrid};

/// Relative bound on the imaginary residue discarded after each inverse
/// transform.
pub const RESIDUE_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("unsupported derivative order {order}; supported orders are 1..=3")]
    UnsupportedOrder { order: u32 },
    #[error(
        "imaginary residue {residue:.3e} exceeds {bound:.3e} after inverse transform \
         (axis {axis:?}, order {order})"
    )]
    ResidueTooLarge { axis: Axis, order: u32, residue: f64, bound: f64 },
    #[error(transparent)]
    Field(#[from] crate::grid::FieldError),
}

/// Differentiation axis: `Q` walks rows (first index), `P` walks columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Q,
    P,
}

/// `(i k)^order` multipliers in FFT ordering, Nyquist zeroed for odd
/// orders on even-length axes.
pub(crate) fn derivative_multipliers(n: usize, length: f64, order: u32) -> Vec<Complex64> {
    let ks = PhaseSpaceGrid::wavenumbers(n, length);
    ks.iter()
        .enumerate()
        .map(|(j, &k)| {
            if order % 2 == 1 && n % 2 == 0 && j == n / 2 {
                Complex64::new(0.0, 0.0)
            } else {
                Complex64::i().powu(order) * k.powi(order as i32)
            }
        })
        .collect()
}

/// Largest FFT mode index kept by the 2/3 dealiasing rule.
pub(crate) fn dealias_keep(n: usize) -> usize {
    n / 3
}

/// `order`-th partial derivative along `axis` by Fourier differentiation.
///
/// Orders 1..=3 cover everything the evolution needs (the Moyal series of
/// a quartic potential stops at the third p-derivative). The output field
/// is real; see the module docs for the residue policy.
pub fn spectral_derivative(
    f: &PhaseSpaceField,
    axis: Axis,
    order: u32,
) -> Result<PhaseSpaceField, SpectralError> {
    if !(1..=3).contains(&order) {
        return Err(SpectralError::UnsupportedOrder { order });
    }
    let grid = *f.grid();
    let (n_q, n_p) = (grid.n_q(), grid.n_p());
    let (n_line, length, n_lines) = match axis {
        Axis::Q => (n_q, grid.length_q(), n_p),
        Axis::P => (n_p, grid.length_p(), n_q),
    };

    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n_line);
    let inv = planner.plan_fft_inverse(n_line);
    let mult = derivative_multipliers(n_line, length, order);
    let scale = 1.0 / n_line as f64;

    let mut out = Array2::<f64>::zeros((n_q, n_p));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_line];
    let mut max_im = 0.0_f64;
    let mut max_re = 0.0_f64;

    let values = f.values();
    for line in 0..n_lines {
        for s in 0..n_line {
            let v = match axis {
                Axis::Q => values[[s, line]],
                Axis::P => values[[line, s]],
            };
            buf[s] = Complex64::new(v, 0.0);
        }
        fwd.process(&mut buf);
        for (b, m) in buf.iter_mut().zip(&mult) {
            *b *= m * scale;
        }
        inv.process(&mut buf);
        for (s, b) in buf.iter().enumerate() {
            max_im = max_im.max(b.im.abs());
            max_re = max_re.max(b.re.abs());
            match axis {
                Axis::Q => out[[s, line]] = b.re,
                Axis::P => out[[line, s]] = b.re,
            }
        }
    }

    let bound = RESIDUE_TOL * max_re;
    if max_im > bound && max_im > f64::EPSILON {
        return Err(SpectralError::ResidueTooLarge { axis, order, residue: max_im, bound });
    }
    Ok(PhaseSpaceField::new(grid, out)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn grid(n: usize) -> PhaseSpaceGrid {
        PhaseSpaceGrid::new(-3.0, 3.0, -5.0, 5.0, n, n).unwrap()
    }

    /// Fornberg finite-difference weights for the m-th derivative at 0
    /// from symmetric integer offsets, used as the independent oracle.
    fn fd_weights(offsets: &[isize], m: usize) -> Vec<f64> {
        // Solve the Vandermonde moment system sum_j w_j x_j^k = m! [k == m]
        let n = offsets.len();
        let mut a = vec![vec![0.0_f64; n + 1]; n];
        for (j, &x) in offsets.iter().enumerate() {
            for (k, row) in a.iter_mut().enumerate() {
                row[j] = (x as f64).powi(k as i32);
            }
        }
        let fact: f64 = (1..=m).map(|v| v as f64).product();
        a[m][n] = fact;
        // Gaussian elimination with partial pivoting
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&r1, &r2| a[r1][col].abs().partial_cmp(&a[r2][col].abs()).unwrap())
                .unwrap();
            a.swap(col, piv);
            let d = a[col][col];
            for k in col..=n {
                a[col][k] /= d;
            }
            for r in 0..n {
                if r != col && a[r][col] != 0.0 {
                    let f = a[r][col];
                    for k in col..=n {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        (0..n).map(|j| a[j][n]).collect()
    }

    fn fd_derivative_p(f: &PhaseSpaceField, order: usize, half_width: isize) -> Array2<f64> {
        let grid = f.grid();
        let n_p = grid.n_p();
        let offsets: Vec<isize> = (-half_width..=half_width).collect();
        let w = fd_weights(&offsets, order);
        let h = grid.dp();
        let mut out = Array2::zeros((grid.n_q(), n_p));
        for i in 0..grid.n_q() {
            for j in 0..n_p {
                let mut acc = 0.0;
                for (off, wk) in offsets.iter().zip(&w) {
                    let jj = (j as isize + off).rem_euclid(n_p as isize) as usize;
                    acc += wk * f.values()[[i, jj]];
                }
                out[[i, j]] = acc / h.powi(order as i32);
            }
        }
        out
    }

    #[test]
    fn single_mode_first_derivative_is_exact() {
        let g = grid(64);
        let kp = 2.0 * PI / g.length_p();
        let f = PhaseSpaceField::from_fn(g, |_, p| (kp * p).sin()).unwrap();
        let d = spectral_derivative(&f, Axis::P, 1).unwrap();
        for (idx, &v) in d.values().indexed_iter() {
            let p = g.p(idx.1);
            assert!((v - kp * (kp * p).cos()).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_field_has_zero_derivative() {
        let g = grid(32);
        let f = PhaseSpaceField::from_fn(g, |_, _| 4.2).unwrap();
        for order in 1..=3 {
            for axis in [Axis::Q, Axis::P] {
                let d = spectral_derivative(&f, axis, order).unwrap();
                assert!(d.max_abs() < 1e-12, "order {order} axis {axis:?}");
            }
        }
    }

    #[test]
    fn unsupported_order_rejected() {
        let g = grid(16);
        let f = PhaseSpaceField::zeros(g);
        assert!(matches!(
            spectral_derivative(&f, Axis::P, 4),
            Err(SpectralError::UnsupportedOrder { order: 4 })
        ));
        assert!(matches!(
            spectral_derivative(&f, Axis::P, 0),
            Err(SpectralError::UnsupportedOrder { order: 0 })
        ));
    }

    #[test]
    fn third_p_derivative_matches_finite_differences() {
        // 8th-order central differences on 256 points as the oracle.
        let g = PhaseSpaceGrid::new(-3.0, 3.0, -5.0, 5.0, 32, 256).unwrap();
        let f = PhaseSpaceField::from_fn(g, |q, p| {
            (0.3 + 0.1 * q) * (-(p - 0.4) * (p - 0.4) / 0.8).exp()
        })
        .unwrap();
        let spectral = spectral_derivative(&f, Axis::P, 3).unwrap();
        // 8th-order accuracy for the 3rd derivative needs a stencil of
        // half-width 5 (n - m = 8 with n = 11 points).
        let fd = fd_derivative_p(&f, 3, 5);
        let scale = spectral.max_abs();
        let mut worst = 0.0_f64;
        for (idx, &v) in spectral.values().indexed_iter() {
            worst = worst.max((v - fd[idx]).abs());
        }
        assert!(worst / scale < 1e-6, "relative deviation {}", worst / scale);
    }

    #[test]
    fn derivative_is_linear() {
        let g = grid(48);
        let f = PhaseSpaceField::from_fn(g, |q, p| (-(q * q + p * p) / 1.3).exp()).unwrap();
        let h = PhaseSpaceField::from_fn(g, |q, p| (0.9 * q).cos() * (0.7 * p).sin()).unwrap();
        let (a, b) = (2.5, -0.75);
        let combo = PhaseSpaceField::new(g, a * f.values() + b * h.values()).unwrap();
        let d_combo = spectral_derivative(&combo, Axis::P, 2).unwrap();
        let d_f = spectral_derivative(&f, Axis::P, 2).unwrap();
        let d_h = spectral_derivative(&h, Axis::P, 2).unwrap();
        let recon = a * d_f.values() + b * d_h.values();
        let scale = d_combo.max_abs().max(1e-300);
        for (idx, &v) in d_combo.values().indexed_iter() {
            assert!((v - recon[idx]).abs() / scale < 1e-13);
        }
    }

    #[test]
    fn derivative_integral_vanishes() {
        let g = grid(64);
        let f = PhaseSpaceField::from_fn(g, |q, p| {
            (-(q * q) / 0.7).exp() * (-(p - 0.5) * (p - 0.5) / 1.1).exp()
        })
        .unwrap();
        let norm = f.l2_functional().unwrap().sqrt();
        for order in 1..=3 {
            for axis in [Axis::Q, Axis::P] {
                let d = spectral_derivative(&f, axis, order).unwrap();
                assert!(
                    d.integrate().unwrap().abs() <= 1e-10 * norm,
                    "axis {axis:?} order {order}"
                );
            }
        }
    }

    #[test]
    fn odd_p_derivative_of_even_field_is_odd() {
        // center the Gaussian so the lattice is symmetric under p -> -p
        let g = PhaseSpaceGrid::new(-4.0, 4.0, -4.0, 4.0, 64, 64).unwrap();
        let f = PhaseSpaceField::from_fn(g, |q, p| (-(q * q + p * p) / 0.9).exp()).unwrap();
        let d = spectral_derivative(&f, Axis::P, 1).unwrap();
        let n = g.n_p();
        let scale = d.max_abs();
        for i in 0..g.n_q() {
            for j in 1..n {
                // p_j = -p_{n-j} on this grid
                let a = d.values()[[i, j]];
                let b = d.values()[[i, n - j]];
                assert!((a + b).abs() < 1e-12 * scale.max(1.0));
            }
        }
    }

}
