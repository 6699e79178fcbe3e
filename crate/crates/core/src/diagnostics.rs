//! Scalar diagnostics of an evolving state: the quantum-classical
//! difference measure, per-term magnitudes, purity, and period averaging.
//!
//! The headline measure is the dimensionless ratio
//!
//! ```text
//! G(t) = Tr[L_q^2] / Tr[(d rho/dt)^2]
//! ```
//!
//! evaluated on freshly computed right-hand-side parts. It measures the
//! classicality of the *evolution*, not of the state, and may exceed one
//! through partial cancellation between the quantum term and the Poisson
//! bracket. Any constant factor in the trace convention cancels in the
//! ratio.

use thiserror::Error;

use crate::grid::WignerState;
use crate::operators::{ModelParams, RhsParts};

/// Below this denominator the distribution is effectively stationary and
/// the measure is a 0/0.
pub const ZERO_EVOLUTION_FLOOR: f64 = 1e-30;

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("evolution is stationary: Tr[(d rho/dt)^2] = {denominator:.3e}, G undefined")]
    ZeroEvolution { denominator: f64 },
    #[error("samples span {span} but averaging needs at least one period {period}")]
    InsufficientSpan { span: f64, period: f64 },
    #[error("sampling cadence {per_period:.2} per period; period averaging needs >= 8")]
    InsufficientCadence { per_period: f64 },
    #[error("purity {purity} is not positive; field or normalization is broken")]
    NonPositivePurity { purity: f64 },
    #[error("curve has no samples")]
    EmptyCurve,
    #[error("sample times not strictly increasing at index {index}")]
    NonMonotoneTime { index: usize },
    #[error(transparent)]
    Field(#[from] crate::grid::FieldError),
}

/// Scalars recorded at one sample time.
///
/// For raw (unaveraged) samples, `g == tr_lq2 / tr_rhs2` exactly as
/// stored. Period-averaged records carry each field averaged
/// independently, so the identity holds only approximately there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticRecord {
    pub t: f64,
    pub g: f64,
    pub tr_lc2: f64,
    pub tr_lq2: f64,
    pub tr_t2: f64,
    pub tr_rhs2: f64,
    pub purity: f64,
    pub entropy_s2: f64,
    pub mass: f64,
}

/// One G(t) trace with the parameters that produced it.
#[derive(Debug, Clone)]
pub struct GCurve {
    pub params: ModelParams,
    pub zeta0: f64,
    pub samples: Vec<DiagnosticRecord>,
    /// True when the samples are centered period averages.
    pub averaged: bool,
}

impl GCurve {
    pub fn validate(&self) -> Result<(), DiagnosticsError> {
        if self.samples.is_empty() {
            return Err(DiagnosticsError::EmptyCurve);
        }
        for (i, w) in self.samples.windows(2).enumerate() {
            if w[1].t <= w[0].t {
                return Err(DiagnosticsError::NonMonotoneTime { index: i + 1 });
            }
        }
        Ok(())
    }

    pub fn max_g(&self) -> f64 {
        self.samples.iter().map(|r| r.g).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `Tr[L_q^2] / Tr[(d rho/dt)^2]` from one set of parts.
pub fn g_measure(parts: &RhsParts) -> Result<f64, DiagnosticsError> {
    let num = parts.lq.l2_functional()?;
    let den = parts.total.l2_functional()?;
    if den < ZERO_EVOLUTION_FLOOR {
        return Err(DiagnosticsError::ZeroEvolution { denominator: den });
    }
    Ok(num / den)
}

/// The three squared term magnitudes `(Tr L_c^2, Tr L_q^2, Tr T^2)`.
pub fn term_magnitudes(parts: &RhsParts) -> Result<(f64, f64, f64), DiagnosticsError> {
    Ok((
        parts.lc.l2_functional()?,
        parts.lq.l2_functional()?,
        parts.tt.l2_functional()?,
    ))
}

/// Purity `2 pi hbar Tr[rho^2]` and the entropy `S_2 = ln P`.
///
/// The `2 pi hbar` normalization makes a minimum-uncertainty Gaussian
/// read exactly one, so diffusion contraction is comparable across hbar.
pub fn purity_entropy(state: &WignerState, hbar: f64) -> Result<(f64, f64), DiagnosticsError> {
    let purity = 2.0 * std::f64::consts::PI * hbar * state.field.l2_functional()?;
    if purity <= 0.0 {
        return Err(DiagnosticsError::NonPositivePurity { purity });
    }
    Ok((purity, purity.ln()))
}

/// Assemble the full record for one sample time.
pub fn record(
    state: &WignerState,
    parts: &RhsParts,
    hbar: f64,
) -> Result<DiagnosticRecord, DiagnosticsError> {
    let (tr_lc2, tr_lq2, tr_t2) = term_magnitudes(parts)?;
    let tr_rhs2 = parts.total.l2_functional()?;
    if tr_rhs2 < ZERO_EVOLUTION_FLOOR {
        return Err(DiagnosticsError::ZeroEvolution { denominator: tr_rhs2 });
    }
    let (purity, entropy_s2) = purity_entropy(state, hbar)?;
    Ok(DiagnosticRecord {
        t: state.t,
        g: tr_lq2 / tr_rhs2,
        tr_lc2,
        tr_lq2,
        tr_t2,
        tr_rhs2,
        purity,
        entropy_s2,
        mass: state.field.integrate()?,
    })
}

/// Integral of the piecewise-linear interpolant of `(ts, ys)` over
/// `[a, b]`, with `[a, b]` inside the sampled range.
fn pl_integral(ts: &[f64], ys: &[f64], prefix: &[f64], a: f64, b: f64) -> f64 {
    debug_assert!(a <= b);
    let value_at = |x: f64| -> f64 {
        let k = ts.partition_point(|&t| t <= x).clamp(1, ts.len() - 1);
        let (t0, t1) = (ts[k - 1], ts[k]);
        let w = if t1 > t0 { (x - t0) / (t1 - t0) } else { 0.0 };
        ys[k - 1] * (1.0 - w) + ys[k] * w
    };
    let cum_at = |x: f64| -> f64 {
        let k = ts.partition_point(|&t| t <= x).clamp(1, ts.len() - 1);
        let (t0, v0) = (ts[k - 1], ys[k - 1]);
        prefix[k - 1] + 0.5 * (v0 + value_at(x)) * (x - t0)
    };
    cum_at(b) - cum_at(a)
}

/// Centered sliding-window average over one driving period.
///
/// Each record at time `t` becomes the trapezoidal average over
/// `[t - period/2, t + period/2]`, clipped at the data ends (the average
/// is over the clipped window length, so the ends are not biased toward
/// zero). Every numeric field is averaged identically.
pub fn period_average(curve: &GCurve, period: f64) -> Result<GCurve, DiagnosticsError> {
    curve.validate()?;
    let ts: Vec<f64> = curve.samples.iter().map(|r| r.t).collect();
    let span = ts[ts.len() - 1] - ts[0];
    if span < period {
        return Err(DiagnosticsError::InsufficientSpan { span, period });
    }
    let per_period = (ts.len() - 1) as f64 / span * period;
    if per_period < 8.0 {
        return Err(DiagnosticsError::InsufficientCadence { per_period });
    }

    let fields: [fn(&DiagnosticRecord) -> f64; 8] = [
        |r| r.g,
        |r| r.tr_lc2,
        |r| r.tr_lq2,
        |r| r.tr_t2,
        |r| r.tr_rhs2,
        |r| r.purity,
        |r| r.entropy_s2,
        |r| r.mass,
    ];
    let mut averaged: Vec<Vec<f64>> = Vec::with_capacity(fields.len());
    for get in fields {
        let ys: Vec<f64> = curve.samples.iter().map(get).collect();
        let mut prefix = vec![0.0; ts.len()];
        for k in 1..ts.len() {
            prefix[k] = prefix[k - 1] + 0.5 * (ys[k] + ys[k - 1]) * (ts[k] - ts[k - 1]);
        }
        let avg: Vec<f64> = ts
            .iter()
            .map(|&t| {
                let a = (t - period / 2.0).max(ts[0]);
                let b = (t + period / 2.0).min(ts[ts.len() - 1]);
                pl_integral(&ts, &ys, &prefix, a, b) / (b - a)
            })
            .collect();
        averaged.push(avg);
    }

    let samples = curve
        .samples
        .iter()
        .enumerate()
        .map(|(k, r)| DiagnosticRecord {
            t: r.t,
            g: averaged[0][k],
            tr_lc2: averaged[1][k],
            tr_lq2: averaged[2][k],
            tr_t2: averaged[3][k],
            tr_rhs2: averaged[4][k],
            purity: averaged[5][k],
            entropy_s2: averaged[6][k],
            mass: averaged[7][k],
        })
        .collect();
    Ok(GCurve { params: curve.params, zeta0: curve.zeta0, samples, averaged: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{PhaseSpaceField, PhaseSpaceGrid};
    use crate::operators::{
        rhs, BathParams, Coupling, DuffingParams, ModelParams, RhsParts,
    };
    use crate::propagator::{evolve, SolverConfig};

    fn model(hbar: f64, diffusion: f64) -> ModelParams {
        ModelParams {
            duffing: DuffingParams {
                mass: 1.0,
                b: 10.0,
                c: 1.0,
                drive_amplitude: 1.0,
                drive_frequency: 5.35,
            },
            bath: BathParams { hbar, diffusion, coupling: Coupling::MomentumOnly },
        }
    }

    fn gaussian_state(grid: PhaseSpaceGrid, sq: f64, sp: f64) -> WignerState {
        let norm = 1.0 / (2.0 * std::f64::consts::PI * sq * sp);
        let f = PhaseSpaceField::from_fn(grid, |q, p| {
            norm * (-q * q / (2.0 * sq * sq) - p * p / (2.0 * sp * sp)).exp()
        })
        .unwrap();
        WignerState::new(f).unwrap()
    }

    fn curve_from(ts: &[f64], g: impl Fn(f64) -> f64) -> GCurve {
        let samples = ts
            .iter()
            .map(|&t| DiagnosticRecord {
                t,
                g: g(t),
                tr_lc2: g(t),
                tr_lq2: g(t),
                tr_t2: g(t),
                tr_rhs2: g(t),
                purity: 1.0,
                entropy_s2: 0.0,
                mass: 1.0,
            })
            .collect();
        GCurve { params: model(0.1, 1e-3), zeta0: 10.0, samples, averaged: false }
    }

    #[test]
    fn g_is_zero_without_hbar_and_one_for_pure_lq() {
        let grid = PhaseSpaceGrid::new(-6.0, 6.0, -12.0, 12.0, 64, 64).unwrap();
        let s = gaussian_state(grid, 0.7, 1.0);
        let parts = rhs(&s, &model(0.0, 1e-3)).unwrap();
        assert_eq!(g_measure(&parts).unwrap(), 0.0);

        // synthetic parts where only the quantum term acts
        let lq = PhaseSpaceField::from_fn(grid, |q, p| (q * 0.3).sin() * (-p * p).exp()).unwrap();
        let only_lq = RhsParts {
            lc: PhaseSpaceField::zeros(grid),
            lq: lq.clone(),
            tt: PhaseSpaceField::zeros(grid),
            total: lq,
        };
        assert_eq!(g_measure(&only_lq).unwrap(), 1.0);
    }

    #[test]
    fn g_rejects_stationary_denominator() {
        let grid = PhaseSpaceGrid::new(-1.0, 1.0, -1.0, 1.0, 16, 16).unwrap();
        let z = PhaseSpaceField::zeros(grid);
        let parts = RhsParts { lc: z.clone(), lq: z.clone(), tt: z.clone(), total: z };
        assert!(matches!(
            g_measure(&parts),
            Err(DiagnosticsError::ZeroEvolution { .. })
        ));
    }

    #[test]
    fn g_invariant_under_rescaling_and_trace_convention() {
        let grid = PhaseSpaceGrid::new(-6.0, 6.0, -12.0, 12.0, 64, 64).unwrap();
        let s = gaussian_state(grid, 0.7, 1.0);
        let p = model(0.2, 2e-3);
        let g0 = g_measure(&rhs(&s, &p).unwrap()).unwrap();

        // rho -> c rho with a power of two is exact in floating point
        let scaled = WignerState::new(
            PhaseSpaceField::new(grid, s.field.values() * 1024.0).unwrap(),
        )
        .unwrap();
        let g1 = g_measure(&rhs(&scaled, &p).unwrap()).unwrap();
        assert_eq!(g0, g1);

        // generic rescaling stays at machine precision
        let scaled = WignerState::new(
            PhaseSpaceField::new(grid, s.field.values() * 3.7).unwrap(),
        )
        .unwrap();
        let g2 = g_measure(&rhs(&scaled, &p).unwrap()).unwrap();
        assert!((g2 - g0).abs() <= 1e-12 * g0);

        // doubling the quadrature weights (same samples, twice the cell
        // area) cancels in the ratio
        let wide = PhaseSpaceGrid::new(-12.0, 12.0, -24.0, 24.0, 64, 64).unwrap();
        let parts = rhs(&s, &p).unwrap();
        let reweighted = RhsParts {
            lc: PhaseSpaceField::new(wide, parts.lc.values().clone()).unwrap(),
            lq: PhaseSpaceField::new(wide, parts.lq.values().clone()).unwrap(),
            tt: PhaseSpaceField::new(wide, parts.tt.values().clone()).unwrap(),
            total: PhaseSpaceField::new(wide, parts.total.values().clone()).unwrap(),
        };
        let g3 = g_measure(&reweighted).unwrap();
        assert!((g3 - g0).abs() <= 1e-14 * g0);
    }

    #[test]
    fn purity_of_minimum_uncertainty_gaussian_is_one() {
        let hbar = 0.1;
        let sq = 0.05f64.sqrt();
        let sp = hbar / (2.0 * sq);
        let grid = PhaseSpaceGrid::new(-3.0, 3.0, -3.0, 3.0, 256, 256).unwrap();
        let s = gaussian_state(grid, sq, sp);
        let (purity, s2) = purity_entropy(&s, hbar).unwrap();
        assert!((purity - 1.0).abs() < 1e-6, "purity {purity}");
        assert_eq!(s2, purity.ln());
    }

    #[test]
    fn diffusion_only_evolution_contracts_purity() {
        let grid = PhaseSpaceGrid::new(-1.0, 1.0, -8.0, 8.0, 16, 64).unwrap();
        let f = PhaseSpaceField::from_fn(grid, |_, p| (-p * p / 2.0).exp()).unwrap();
        let s0 = WignerState::new(f).unwrap();
        let mut params = model(0.1, 0.05);
        params.duffing.b = 0.0;
        params.duffing.c = 0.0;
        params.duffing.drive_amplitude = 0.0;
        let cfg = SolverConfig {
            sample_every: 10,
            boundary_tolerance: 1.0,
            ..SolverConfig::new(0.01, 1.0)
        };
        let mut purities = Vec::new();
        evolve(s0, &params, &cfg, |s| {
            purities.push(purity_entropy(s.state, 0.1).unwrap().0);
        })
        .unwrap();
        assert!(purities.len() >= 5);
        for w in purities.windows(2) {
            assert!(w[1] < w[0], "purity not strictly decreasing: {w:?}");
        }
    }

    #[test]
    fn record_stores_exact_ratio() {
        let grid = PhaseSpaceGrid::new(-6.0, 6.0, -12.0, 12.0, 64, 64).unwrap();
        let s = gaussian_state(grid, 0.7, 1.0);
        let p = model(0.2, 2e-3);
        let parts = rhs(&s, &p).unwrap();
        let rec = record(&s, &parts, p.bath.hbar).unwrap();
        assert_eq!(rec.g, rec.tr_lq2 / rec.tr_rhs2);
        assert_eq!(rec.entropy_s2, rec.purity.ln());
        assert!(rec.tr_lc2 >= 0.0 && rec.tr_lq2 >= 0.0 && rec.tr_t2 >= 0.0);
    }

    #[test]
    fn term_magnitudes_switch_off_with_their_couplings() {
        let grid = PhaseSpaceGrid::new(-6.0, 6.0, -12.0, 12.0, 64, 64).unwrap();
        let s = gaussian_state(grid, 0.7, 1.0);
        let (_, lq2, _) = term_magnitudes(&rhs(&s, &model(0.0, 2e-3)).unwrap()).unwrap();
        assert_eq!(lq2, 0.0);
        let (_, _, t2) = term_magnitudes(&rhs(&s, &model(0.2, 0.0)).unwrap()).unwrap();
        assert_eq!(t2, 0.0);
    }

    #[test]
    fn period_average_of_constant_is_identity() {
        let ts: Vec<f64> = (0..200).map(|k| k as f64 * 0.05).collect();
        let c = curve_from(&ts, |_| 2.5);
        let avg = period_average(&c, 1.0).unwrap();
        assert!(avg.averaged);
        for r in &avg.samples {
            assert!((r.g - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn period_average_kills_zero_mean_oscillation() {
        let omega = 5.35;
        let period = 2.0 * std::f64::consts::PI / omega;
        let dt = period / 64.0;
        let ts: Vec<f64> = (0..(64 * 6)).map(|k| k as f64 * dt).collect();
        let c = curve_from(&ts, |t| (omega * t).sin());
        let avg = period_average(&c, period).unwrap();
        for r in &avg.samples {
            if r.t >= period / 2.0 && r.t <= ts[ts.len() - 1] - period / 2.0 {
                assert!(r.g.abs() < 1e-3, "t={} avg={}", r.t, r.g);
            }
        }
    }

    #[test]
    fn period_average_matches_exponential_window_integral() {
        let period = 1.1745;
        let dt = period / 64.0;
        let ts: Vec<f64> = (0..(64 * 8)).map(|k| k as f64 * dt).collect();
        let c = curve_from(&ts, |t| (-t).exp());
        let avg = period_average(&c, period).unwrap();
        let half = period / 2.0;
        for r in &avg.samples {
            if r.t >= half && r.t <= ts[ts.len() - 1] - half {
                let expect = (-r.t).exp() * half.sinh() / half;
                assert!(
                    (r.g - expect).abs() / expect < 1e-4,
                    "t={} avg={} expect={}",
                    r.t,
                    r.g,
                    expect
                );
            }
        }
    }

    #[test]
    fn period_average_validates_span_and_cadence() {
        let ts: Vec<f64> = (0..10).map(|k| k as f64 * 0.01).collect();
        let c = curve_from(&ts, |_| 1.0);
        assert!(matches!(
            period_average(&c, 1.0),
            Err(DiagnosticsError::InsufficientSpan { .. })
        ));
        let ts: Vec<f64> = (0..10).map(|k| k as f64 * 0.5).collect();
        let c = curve_from(&ts, |_| 1.0);
        assert!(matches!(
            period_average(&c, 1.0),
            Err(DiagnosticsError::InsufficientCadence { .. })
        ));
    }
}
