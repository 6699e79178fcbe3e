//! Reproduction layer: initial states, `(hbar, D)` sweeps, scaling
//! collapse, and the saturation fit.
//!
//! A sweep evaluates the period-averaged quantum-classical difference
//! `<G>(t)` for a family of `(hbar, D)` points sharing identical numerics
//! (grid, solver, initial template), grouped by the composite parameter
//! `zeta0 = hbar^2 / D`. Points with equal `zeta0` should trace the same
//! curve; dividing each curve by its own maximum collapses the small-zeta0
//! family onto a master curve, whose peak heights follow
//! `a (1 - exp(-b zeta0^2))`.

use std::path::Path;

use thiserror::Error;

use crate::diagnostics::{self, DiagnosticsError, GCurve};
use crate::grid::{PhaseSpaceField, PhaseSpaceGrid, WignerState};
use crate::operators::{BathParams, Coupling, DuffingParams, ModelParams, ParamsError};
use crate::propagator::{evolve, SolverConfig, SolverError};

/// Localization bound on the initial position variance.
pub const MAX_SIGMA_Q2: f64 = 0.05;

/// Gaussian mass allowed outside the domain at t = 0.
pub const MAX_TAIL_OUTSIDE: f64 = 1e-12;

/// Smallest sigma, in units of the grid spacing, considered resolved.
pub const MIN_SIGMA_CELLS: f64 = 3.0;

/// Diagnostic cadence target: samples per driving period.
pub const SAMPLES_PER_PERIOD: f64 = 64.0;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("sigma_q2 = {0} outside (0, {MAX_SIGMA_Q2}] (localization bound)")]
    InvalidSigma(f64),
    #[error(
        "initial sigma_{axis} = {sigma:.4} under-resolved: grid spacing {spacing:.4} \
         needs sigma >= {} cells (set allow_under_resolved to override)",
        MIN_SIGMA_CELLS
    )]
    UnderResolved { axis: char, sigma: f64, spacing: f64 },
    #[error("initial Gaussian mass outside the domain is {outside:.3e} (> {MAX_TAIL_OUTSIDE:.0e})")]
    TailOutsideDomain { outside: f64 },
    #[error("sweep points need diffusion > 0 to define zeta0")]
    DiffusionRequired,
    #[error("saturation fit needs at least {needed} distinct zeta0 <= 2, got {got}")]
    FitDomain { needed: usize, got: usize },
    #[error("saturation fit is degenerate: all maxima equal")]
    DegenerateFit,
    #[error("curve for zeta0 = {zeta0} has non-positive maximum {max}")]
    NonPositiveMax { zeta0: f64, max: f64 },
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Field(#[from] crate::grid::FieldError),
    #[error(transparent)]
    Persist(#[from] crate::io::IoError),
}

/// Initial-state template: a minimum-uncertainty Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialSpec {
    pub q0: f64,
    pub p0: f64,
    /// Position variance; momentum spread follows from
    /// `sigma_q sigma_p = hbar / 2`.
    pub sigma_q2: f64,
    pub hbar: f64,
    /// Permit sigma below [`MIN_SIGMA_CELLS`] grid cells. Coarse-grid
    /// small-hbar runs need this; the error message says what it costs.
    pub allow_under_resolved: bool,
}

impl InitialSpec {
    pub fn sigma_q(&self) -> f64 {
        self.sigma_q2.sqrt()
    }

    pub fn sigma_p(&self) -> f64 {
        self.hbar / (2.0 * self.sigma_q())
    }
}

/// Sample the minimum-uncertainty Gaussian on the grid and normalize to
/// unit mass.
///
/// The lattice sum is rescaled so the discrete mass is exactly one; for
/// resolved sigma the factor is 1 + O(1e-15), and for deliberately
/// under-resolved states it keeps the mass contract intact while the
/// shape takes the quadrature error.
pub fn gaussian_initial(
    grid: &PhaseSpaceGrid,
    spec: &InitialSpec,
) -> Result<WignerState, ExperimentError> {
    if !(spec.sigma_q2 > 0.0) || !spec.sigma_q2.is_finite() || spec.sigma_q2 > MAX_SIGMA_Q2 {
        return Err(ExperimentError::InvalidSigma(spec.sigma_q2));
    }
    let sq = spec.sigma_q();
    let sp = spec.sigma_p();
    if !spec.allow_under_resolved {
        if sq < MIN_SIGMA_CELLS * grid.dq() {
            return Err(ExperimentError::UnderResolved { axis: 'q', sigma: sq, spacing: grid.dq() });
        }
        if sp < MIN_SIGMA_CELLS * grid.dp() {
            return Err(ExperimentError::UnderResolved { axis: 'p', sigma: sp, spacing: grid.dp() });
        }
    }

    // union bound on the four half-plane tails
    let tail = |dist: f64, sigma: f64| libm::erfc(dist / (std::f64::consts::SQRT_2 * sigma)) / 2.0;
    let outside = tail(grid.q_max() - spec.q0, sq)
        + tail(spec.q0 - grid.q_min(), sq)
        + tail(grid.p_max() - spec.p0, sp)
        + tail(spec.p0 - grid.p_min(), sp);
    if !(outside < MAX_TAIL_OUTSIDE) {
        return Err(ExperimentError::TailOutsideDomain { outside });
    }

    let norm = 1.0 / (2.0 * std::f64::consts::PI * sq * sp);
    let field = PhaseSpaceField::from_fn(*grid, |q, p| {
        norm * (-(q - spec.q0).powi(2) / (2.0 * sq * sq)
            - (p - spec.p0).powi(2) / (2.0 * sp * sp))
            .exp()
    })?;
    let mass = field.integrate()?;
    let field = PhaseSpaceField::new(*grid, field.values() / mass)?;
    Ok(WignerState::new(field)?)
}

/// Numerics shared by every point of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedConfig {
    pub grid: PhaseSpaceGrid,
    pub duffing: DuffingParams,
    pub solver: SolverConfig,
    pub coupling: Coupling,
    pub q0: f64,
    pub p0: f64,
    pub sigma_q2: f64,
    pub allow_under_resolved: bool,
    /// Label used in persisted file names.
    pub label: String,
}

impl SharedConfig {
    pub fn initial_spec(&self, hbar: f64) -> InitialSpec {
        InitialSpec {
            q0: self.q0,
            p0: self.p0,
            sigma_q2: self.sigma_q2,
            hbar,
            allow_under_resolved: self.allow_under_resolved,
        }
    }

    pub fn params(&self, point: SweepPoint) -> ModelParams {
        ModelParams {
            duffing: self.duffing,
            bath: BathParams {
                hbar: point.hbar,
                diffusion: point.diffusion,
                coupling: self.coupling,
            },
        }
    }
}

/// Regular-sample cadence (in steps) giving [`SAMPLES_PER_PERIOD`]
/// samples per driving period.
pub fn sample_cadence(dt: f64, period: f64) -> usize {
    ((period / (SAMPLES_PER_PERIOD * dt)).round() as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub hbar: f64,
    pub diffusion: f64,
}

impl SweepPoint {
    pub fn zeta0(&self) -> f64 {
        self.hbar * self.hbar / self.diffusion
    }

    /// Deterministic per-point file stem for persistence and resume.
    pub fn file_stem(&self) -> String {
        format!("h{:.12e}_D{:.12e}", self.hbar, self.diffusion)
    }
}

/// A family of `(hbar, D)` points over one shared numerical setup.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub points: Vec<SweepPoint>,
    pub shared: SharedConfig,
}

impl SweepPlan {
    /// Points grouped by zeta0 (clustered at 1e-12 relative).
    pub fn grouped(&self) -> Vec<(f64, Vec<SweepPoint>)> {
        cluster_by_zeta0(self.points.iter().map(|&p| (p.zeta0(), p)).collect())
    }
}

/// Cluster `(zeta0, item)` pairs whose keys agree to 1e-12 relative,
/// sorted by zeta0.
pub(crate) fn cluster_by_zeta0<T>(mut items: Vec<(f64, T)>) -> Vec<(f64, Vec<T>)> {
    items.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite zeta0"));
    let mut out: Vec<(f64, Vec<T>)> = Vec::new();
    for (z, item) in items {
        match out.last_mut() {
            Some((z0, members)) if (z - *z0).abs() <= 1e-12 * z0.abs().max(f64::MIN_POSITIVE) => {
                members.push(item);
            }
            _ => out.push((z, vec![item])),
        }
    }
    out
}

/// Construct `count` same-zeta0 pairs: `(hbar, D) -> (s hbar, s^2 D)`.
///
/// Scaling by powers of two keeps `hbar^2 / D` bit-identical across the
/// family. The base pair comes from a pinned table for the reference
/// zeta0 values and from `hbar = sqrt(zeta0 * D_REF)` otherwise.
pub fn pairs_for_zeta0(zeta0: f64, count: usize, scale_step: f64) -> Vec<SweepPoint> {
    const D_REF: f64 = 1.25e-3;
    const PINNED: [(f64, f64, f64); 2] = [(0.2, 0.01, 5e-4), (10.0, 0.125, 1.5625e-3)];
    let base = PINNED
        .iter()
        .find(|(z, _, _)| (zeta0 - z).abs() <= 1e-9 * z)
        .map(|&(_, h, d)| SweepPoint { hbar: h, diffusion: d })
        .unwrap_or_else(|| SweepPoint { hbar: (zeta0 * D_REF).sqrt(), diffusion: D_REF });
    (0..count)
        .map(|k| {
            let s = scale_step.powi(k as i32);
            SweepPoint { hbar: base.hbar * s, diffusion: base.diffusion * s * s }
        })
        .collect()
}

/// Everything one point produces: the raw curve, its period average, and
/// the signed snapshot fields.
#[derive(Debug, Clone)]
pub struct PointResult {
    pub raw: GCurve,
    pub averaged: GCurve,
    pub snapshots: Vec<(f64, PhaseSpaceField)>,
}

/// Evolve one `(hbar, D)` point to `t_final` and collect its curve.
pub fn run_point(
    hbar: f64,
    diffusion: f64,
    shared: &SharedConfig,
) -> Result<PointResult, ExperimentError> {
    let point = SweepPoint { hbar, diffusion };
    if !(diffusion > 0.0) {
        return Err(ExperimentError::DiffusionRequired);
    }
    let params = shared.params(point);
    params.validate()?;
    let zeta0 = params.bath.zeta0().expect("diffusion checked above");
    let initial = gaussian_initial(&shared.grid, &shared.initial_spec(hbar))?;

    let mut samples = Vec::new();
    let mut snapshots = Vec::new();
    let mut record_err = None;
    evolve(initial, &params, &shared.solver, |s| {
        if record_err.is_some() {
            return;
        }
        match diagnostics::record(s.state, s.parts, hbar) {
            Ok(rec) => {
                samples.push(rec);
                if s.is_snapshot {
                    snapshots.push((s.state.t, s.state.field.clone()));
                }
            }
            Err(e) => record_err = Some(e),
        }
    })?;
    if let Some(e) = record_err {
        return Err(e.into());
    }

    let raw = GCurve { params, zeta0, samples, averaged: false };
    raw.validate()?;
    let averaged = diagnostics::period_average(&raw, params.duffing.drive_period())?;
    Ok(PointResult { raw, averaged, snapshots })
}

/// Outcome of a sweep: period-averaged curves grouped by zeta0, plus a
/// per-point failure list.
#[derive(Debug)]
pub struct SweepOutcome {
    pub groups: Vec<(f64, Vec<GCurve>)>,
    pub failures: Vec<(SweepPoint, String)>,
    pub executed: usize,
    pub skipped: usize,
}

/// Run every point of the plan, resuming from any curve files already in
/// `out_dir`.
///
/// Points are independent jobs on a bounded pool; each completed curve is
/// persisted (write-to-temp, atomic rename) before the next begins on
/// that worker, so a crashed sweep loses at most the in-flight points.
/// Failures are recorded and the sweep continues.
pub fn run_sweep(plan: &SweepPlan, out_dir: Option<&Path>) -> SweepOutcome {
    use rayon::prelude::*;

    if let Some(dir) = out_dir {
        if let Err(e) = std::fs::create_dir_all(dir) {
            return SweepOutcome {
                groups: Vec::new(),
                failures: plan
                    .points
                    .iter()
                    .map(|&p| (p, format!("cannot create output dir: {e}")))
                    .collect(),
                executed: 0,
                skipped: 0,
            };
        }
    }

    enum PointOutcome {
        Loaded(GCurve),
        Ran(GCurve),
        Failed(String),
    }

    let results: Vec<(SweepPoint, PointOutcome)> = plan
        .points
        .par_iter()
        .map(|&point| {
            let path = out_dir
                .map(|d| d.join(format!("{}_{}.wcurve", plan.shared.label, point.file_stem())));
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                match crate::io::read_curve(p) {
                    Ok((curve, _)) => return (point, PointOutcome::Loaded(curve)),
                    Err(e) => {
                        return (
                            point,
                            PointOutcome::Failed(format!("unreadable existing curve: {e}")),
                        )
                    }
                }
            }
            match run_point(point.hbar, point.diffusion, &plan.shared) {
                Ok(res) => {
                    if let Some(p) = path.as_ref() {
                        let echo = crate::io::RunConfig::from_parts(
                            &plan.shared,
                            point,
                            &plan.shared.label,
                        );
                        if let Err(e) = crate::io::write_curve(&res.raw, &echo, p) {
                            return (point, PointOutcome::Failed(format!("persist: {e}")));
                        }
                    }
                    (point, PointOutcome::Ran(res.raw))
                }
                Err(e) => (point, PointOutcome::Failed(e.to_string())),
            }
        })
        .collect();

    let mut executed = 0;
    let mut skipped = 0;
    let mut failures = Vec::new();
    let mut keyed: Vec<(f64, GCurve)> = Vec::new();
    let period = plan.shared.duffing.drive_period();
    for (point, outcome) in results {
        let raw = match outcome {
            PointOutcome::Loaded(c) => {
                skipped += 1;
                c
            }
            PointOutcome::Ran(c) => {
                executed += 1;
                c
            }
            PointOutcome::Failed(msg) => {
                failures.push((point, msg));
                continue;
            }
        };
        match diagnostics::period_average(&raw, period) {
            Ok(avg) => keyed.push((avg.zeta0, avg)),
            Err(e) => failures.push((point, format!("period average: {e}"))),
        }
    }
    SweepOutcome { groups: cluster_by_zeta0(keyed), failures, executed, skipped }
}

/// Divide each curve by its own maximum; returns the normalized curves
/// and the per-zeta0 maxima (averaged over same-zeta0 members).
pub fn collapse_curves(
    curves: &[GCurve],
) -> Result<(Vec<GCurve>, Vec<(f64, f64)>), ExperimentError> {
    let mut normalized = Vec::with_capacity(curves.len());
    let mut keyed = Vec::with_capacity(curves.len());
    for curve in curves {
        curve.validate()?;
        let max = curve.max_g();
        if !(max > 0.0) {
            return Err(ExperimentError::NonPositiveMax { zeta0: curve.zeta0, max });
        }
        let mut c = curve.clone();
        for r in &mut c.samples {
            r.g /= max;
        }
        normalized.push(c);
        keyed.push((curve.zeta0, max));
    }
    let max_values = cluster_by_zeta0(keyed)
        .into_iter()
        .map(|(z, ms)| (z, ms.iter().sum::<f64>() / ms.len() as f64))
        .collect();
    Ok((normalized, max_values))
}

/// Least-squares fit of `a (1 - exp(-b zeta0^2))` to peak values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitResult {
    pub a: f64,
    pub b: f64,
    /// RMS residual of the fit.
    pub residual: f64,
}

/// Fit the saturation model to `(zeta0, max G)` points with zeta0 <= 2.
///
/// For fixed `b` the optimal amplitude is the linear least-squares
/// solution `a(b) = sum(y m) / sum(m^2)` with `m = 1 - exp(-b z^2)`, so
/// the search is one-dimensional: a coarse logarithmic grid over `b`
/// followed by golden-section refinement. Deterministic given inputs.
pub fn fit_saturation(max_values: &[(f64, f64)]) -> Result<FitResult, ExperimentError> {
    let pts: Vec<(f64, f64)> =
        max_values.iter().copied().filter(|&(z, _)| z <= 2.0 + 1e-9).collect();
    let mut distinct: Vec<f64> = pts.iter().map(|p| p.0).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    distinct.dedup_by(|a, b| (*a - *b).abs() <= 1e-9 * b.abs());
    if distinct.len() < 4 {
        return Err(ExperimentError::FitDomain { needed: 4, got: distinct.len() });
    }
    let y_max = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let y_min = pts.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    if !(y_max > y_min + 1e-12 * y_max.abs()) {
        return Err(ExperimentError::DegenerateFit);
    }

    let amplitude = |b: f64| -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for &(z, y) in &pts {
            let m = 1.0 - (-b * z * z).exp();
            num += y * m;
            den += m * m;
        }
        if den > 0.0 {
            num / den
        } else {
            0.0
        }
    };
    let rss = |b: f64| -> f64 {
        let a = amplitude(b);
        pts.iter()
            .map(|&(z, y)| {
                let r = y - a * (1.0 - (-b * z * z).exp());
                r * r
            })
            .sum::<f64>()
    };

    // coarse logarithmic scan
    let n_grid = 400;
    let (lo, hi) = (1e-4_f64, 1e3_f64);
    let step = (hi / lo).powf(1.0 / (n_grid - 1) as f64);
    let mut best_i = 0;
    let mut best = f64::INFINITY;
    let mut b = lo;
    let mut grid_b = Vec::with_capacity(n_grid);
    for i in 0..n_grid {
        grid_b.push(b);
        let r = rss(b);
        if r < best {
            best = r;
            best_i = i;
        }
        b *= step;
    }
    // golden-section refinement on the bracketing interval
    let mut a_lo = grid_b[best_i.saturating_sub(1)];
    let mut a_hi = grid_b[(best_i + 1).min(n_grid - 1)];
    let phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = a_hi - phi * (a_hi - a_lo);
    let mut x2 = a_lo + phi * (a_hi - a_lo);
    let (mut f1, mut f2) = (rss(x1), rss(x2));
    for _ in 0..200 {
        if (a_hi - a_lo) <= 1e-14 * a_hi {
            break;
        }
        if f1 <= f2 {
            a_hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = a_hi - phi * (a_hi - a_lo);
            f1 = rss(x1);
        } else {
            a_lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = a_lo + phi * (a_hi - a_lo);
            f2 = rss(x2);
        }
    }
    let b_fit = 0.5 * (a_lo + a_hi);
    let a_fit = amplitude(b_fit);
    let residual = (rss(b_fit) / pts.len() as f64).sqrt();
    if !(a_fit > 0.0) || !(b_fit > 0.0) {
        return Err(ExperimentError::DegenerateFit);
    }
    Ok(FitResult { a: a_fit, b: b_fit, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagator::{suggest_dt, Scheme};

    fn duffing() -> DuffingParams {
        DuffingParams {
            mass: 1.0,
            b: 10.0,
            c: 1.0,
            drive_amplitude: 1.0,
            drive_frequency: 5.35,
        }
    }

    #[test]
    fn minimum_uncertainty_arithmetic() {
        let spec = InitialSpec {
            q0: 0.0,
            p0: 0.0,
            sigma_q2: 0.05,
            hbar: 0.1,
            allow_under_resolved: false,
        };
        assert!((spec.sigma_p().powi(2) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn gaussian_initial_contracts() {
        let grid = PhaseSpaceGrid::new(-3.0, 3.0, -3.0, 3.0, 256, 256).unwrap();
        let spec = InitialSpec {
            q0: 0.0,
            p0: 0.0,
            sigma_q2: 0.05,
            hbar: 0.1,
            allow_under_resolved: false,
        };
        let s = gaussian_initial(&grid, &spec).unwrap();
        assert!((s.mass0 - 1.0).abs() < 1e-10);
        assert_eq!(s.t, 0.0);
        let (purity, _) = diagnostics::purity_entropy(&s, 0.1).unwrap();
        assert!((purity - 1.0).abs() < 1e-6, "purity {purity}");
    }

    #[test]
    fn gaussian_initial_rejects_bad_specs() {
        let grid = PhaseSpaceGrid::new(-6.0, 6.0, -12.0, 12.0, 256, 256).unwrap();
        let base = InitialSpec {
            q0: 0.0,
            p0: 0.0,
            sigma_q2: 0.05,
            hbar: 0.01,
            allow_under_resolved: false,
        };
        // sigma_p = 0.0224 << 3 dp on this grid
        assert!(matches!(
            gaussian_initial(&grid, &base),
            Err(ExperimentError::UnderResolved { axis: 'p', .. })
        ));
        assert!(gaussian_initial(&grid, &InitialSpec { allow_under_resolved: true, ..base })
            .is_ok());

        assert!(matches!(
            gaussian_initial(&grid, &InitialSpec { sigma_q2: 0.06, hbar: 0.1, ..base }),
            Err(ExperimentError::InvalidSigma(_))
        ));

        let near_edge = InitialSpec { q0: 5.9, hbar: 0.2, ..base };
        assert!(matches!(
            gaussian_initial(&grid, &near_edge),
            Err(ExperimentError::TailOutsideDomain { .. })
        ));
    }

    #[test]
    fn paired_points_share_exact_zeta0() {
        for z in [0.2, 2.0, 10.0, 40.0] {
            let pair = pairs_for_zeta0(z, 2, 2.0);
            assert_eq!(pair.len(), 2);
            assert_eq!(pair[0].zeta0().to_bits(), pair[1].zeta0().to_bits());
            assert!((pair[0].zeta0() - z).abs() < 1e-12 * z);
        }
        // pinned pairs reproduce the reference values
        let p = pairs_for_zeta0(0.2, 1, 2.0)[0];
        assert_eq!((p.hbar, p.diffusion), (0.01, 5e-4));
        let p = pairs_for_zeta0(10.0, 1, 2.0)[0];
        assert_eq!((p.hbar, p.diffusion), (0.125, 1.5625e-3));
    }

    #[test]
    fn fit_recovers_synthetic_model() {
        let pts: Vec<(f64, f64)> = [0.25_f64, 0.5, 1.0, 2.0]
            .iter()
            .map(|&z| (z, 25.0 * (1.0 - (-0.08 * z * z).exp())))
            .collect();
        let fit = fit_saturation(&pts).unwrap();
        assert!((fit.a - 25.0).abs() < 1e-6, "a = {}", fit.a);
        assert!((fit.b - 0.08).abs() < 1e-6, "b = {}", fit.b);
        assert!(fit.residual < 1e-9);

        // quadratic limb: a b z^2 approximates the model at small z
        let z = 0.25;
        let model = fit.a * (1.0 - (-fit.b * z * z).exp());
        let quad = fit.a * fit.b * z * z;
        assert!((quad - model).abs() / model < 0.1);
    }

    #[test]
    fn fit_rejects_degenerate_and_sparse_data() {
        let flat: Vec<(f64, f64)> = [0.25, 0.5, 1.0, 2.0].iter().map(|&z| (z, 3.0)).collect();
        assert!(matches!(fit_saturation(&flat), Err(ExperimentError::DegenerateFit)));
        let sparse = vec![(0.5, 1.0), (1.0, 2.0), (2.0, 3.0)];
        assert!(matches!(
            fit_saturation(&sparse),
            Err(ExperimentError::FitDomain { needed: 4, got: 3 })
        ));
        // points beyond the fit domain do not count
        let outside = vec![(0.5, 1.0), (1.0, 2.0), (2.0, 3.0), (10.0, 9.0), (40.0, 9.5)];
        assert!(matches!(fit_saturation(&outside), Err(ExperimentError::FitDomain { .. })));
    }

    #[test]
    fn collapse_normalizes_to_unit_max() {
        let ts: Vec<f64> = (0..100).map(|k| k as f64 * 0.1).collect();
        let mk = |scale: f64| {
            let samples = ts
                .iter()
                .map(|&t| crate::diagnostics::DiagnosticRecord {
                    t,
                    g: scale * (t * 0.5).sin().powi(2) + 0.01,
                    tr_lc2: 1.0,
                    tr_lq2: 1.0,
                    tr_t2: 0.0,
                    tr_rhs2: 1.0,
                    purity: 1.0,
                    entropy_s2: 0.0,
                    mass: 1.0,
                })
                .collect();
            GCurve {
                params: ModelParams {
                    duffing: duffing(),
                    bath: BathParams {
                        hbar: 0.1,
                        diffusion: 1e-3,
                        coupling: Coupling::MomentumOnly,
                    },
                },
                zeta0: 10.0,
                samples,
                averaged: true,
            }
        };
        let (norm, maxima) = collapse_curves(&[mk(2.0)]).unwrap();
        assert!((norm[0].max_g() - 1.0).abs() < 1e-15);
        assert_eq!(maxima.len(), 1);

        let (norm2, _) = collapse_curves(&[mk(3.0), mk(3.0)]).unwrap();
        for (a, b) in norm2[0].samples.iter().zip(&norm2[1].samples) {
            assert_eq!(a.g, b.g);
        }
    }

    #[test]
    fn sweep_runs_and_resumes() {
        // deliberately tiny, fast setup; physics monitors disarmed
        let grid = PhaseSpaceGrid::new(-6.0, 6.0, -12.0, 12.0, 16, 16).unwrap();
        let d = duffing();
        let params_probe = ModelParams {
            duffing: d,
            bath: BathParams { hbar: 0.3, diffusion: 4e-3, coupling: Coupling::MomentumOnly },
        };
        let dt = suggest_dt(&grid, &params_probe);
        let mut solver = SolverConfig::new(dt, 1.4);
        solver.scheme = Scheme::Rk4;
        solver.sample_every = sample_cadence(dt, d.drive_period());
        solver.mass_tolerance = 1.0;
        solver.boundary_tolerance = 1.0;
        let shared = SharedConfig {
            grid,
            duffing: d,
            solver,
            coupling: Coupling::MomentumOnly,
            q0: 0.0,
            p0: 0.0,
            sigma_q2: 0.05,
            allow_under_resolved: true,
            label: "tiny".into(),
        };
        let plan = SweepPlan {
            points: pairs_for_zeta0(0.2, 2, 2.0)
                .into_iter()
                .chain(pairs_for_zeta0(10.0, 2, 2.0))
                .collect(),
            shared,
        };
        assert_eq!(plan.grouped().len(), 2);

        let dir = tempfile::tempdir().unwrap();
        let out = run_sweep(&plan, Some(dir.path()));
        assert!(out.failures.is_empty(), "failures: {:?}", out.failures);
        assert_eq!(out.executed, 4);
        assert_eq!(out.skipped, 0);
        assert_eq!(out.groups.len(), 2);
        assert_eq!(out.groups[0].1.len(), 2);

        // resumption performs zero evolutions and reproduces the curves
        let again = run_sweep(&plan, Some(dir.path()));
        assert_eq!(again.executed, 0);
        assert_eq!(again.skipped, 4);
        for (g0, g1) in out.groups.iter().zip(&again.groups) {
            for (c0, c1) in g0.1.iter().zip(&g1.1) {
                assert_eq!(c0.samples.len(), c1.samples.len());
                for (r0, r1) in c0.samples.iter().zip(&c1.samples) {
                    assert_eq!(r0.g.to_bits(), r1.g.to_bits());
                }
            }
        }

        let empty = SweepPlan { points: Vec::new(), shared: plan.shared.clone() };
        let out = run_sweep(&empty, None);
        assert!(out.groups.is_empty());
        assert_eq!(out.executed + out.skipped, 0);
    }
}
