//! Configuration files, result persistence, and snapshot dumps.
//!
//! Two output families: a versioned little-endian binary format that
//! round-trips every f64 bit-exactly (the resume format), and CSV /
//! gnuplot text for plotting. Every output embeds the fully resolved run
//! configuration, so any file is reproducible from its own header.
//!
//! Config files are TOML with defaults for everything except `hbar` and
//! `diffusion`; unknown keys are rejected. Writers go through a temp file
//! plus atomic rename so concurrent sweep workers never expose a partial
//! file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{DiagnosticRecord, GCurve};
use crate::experiments::{self, InitialSpec, SharedConfig, SweepPlan, SweepPoint};
use crate::grid::{PhaseSpaceField, PhaseSpaceGrid, WignerState};
use crate::operators::{BathParams, Coupling, DuffingParams, ModelParams};
use crate::propagator::{self, Scheme, SolverConfig};

/// Environment variable with the default output root.
pub const OUTPUT_ROOT_ENV: &str = "WIGNERSIM_OUT";

const CURVE_MAGIC: &[u8; 8] = b"WGCURVE\0";
const SNAP_MAGIC: &[u8; 8] = b"WGSNAP\0\0";
const FORMAT_VERSION: u32 = 1;

/// Encoding flag stored in curve headers. Only the exact binary encoding
/// is written; the flag keeps room for a decimal-text variant.
const ENCODING_BINARY_F64LE: u8 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("missing required key `{0}`")]
    MissingKey(&'static str),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("{path}: not a {expected} file (bad magic)")]
    BadMagic { path: String, expected: &'static str },
    #[error("{path}: format version {found}, this build reads {expected}")]
    VersionMismatch { path: String, found: u32, expected: u32 },
    #[error("{path}: truncated or corrupt ({detail})")]
    Truncated { path: String, detail: String },
    #[error("sample times not strictly increasing at row {index}")]
    NonMonotoneTime { index: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
}

fn invalid(key: &str, reason: impl ToString) -> IoError {
    IoError::Invalid { key: key.into(), reason: reason.to_string() }
}

/// Default output root: `$WIGNERSIM_OUT` or the working directory.
pub fn default_output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

/// Write `bytes` to `path` via a temp file and atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| IoError::Io(e.error))?;
    Ok(())
}

// ---------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub q_min: f64,
    pub q_max: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub n_q: usize,
    pub n_p: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { q_min: -6.0, q_max: 6.0, p_min: -12.0, p_max: 12.0, n_q: 256, n_p: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DuffingConfig {
    pub mass: f64,
    pub b: f64,
    pub c: f64,
    pub drive_amplitude: f64,
    pub drive_frequency: f64,
}

impl Default for DuffingConfig {
    fn default() -> Self {
        Self { mass: 1.0, b: 10.0, c: 1.0, drive_amplitude: 1.0, drive_frequency: 5.35 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitialConfig {
    pub q0: f64,
    pub p0: f64,
    pub sigma_q2: f64,
    pub allow_under_resolved: bool,
}

impl Default for InitialConfig {
    fn default() -> Self {
        Self { q0: 0.0, p0: 0.0, sigma_q2: 0.05, allow_under_resolved: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverFileConfig {
    /// Omitted = derive from the stability heuristic.
    pub dt: Option<f64>,
    pub t_final: f64,
    pub scheme: Scheme,
    /// Omitted = 64 samples per driving period.
    pub sample_every: Option<usize>,
    pub snapshot_times: Vec<f64>,
    pub mass_tolerance: f64,
    pub boundary_tolerance: f64,
    pub dealias: bool,
}

impl Default for SolverFileConfig {
    fn default() -> Self {
        Self {
            dt: None,
            t_final: 20.0,
            scheme: Scheme::Rk4,
            sample_every: None,
            snapshot_times: Vec::new(),
            mass_tolerance: propagator::DEFAULT_MASS_TOLERANCE,
            boundary_tolerance: propagator::DEFAULT_BOUNDARY_TOLERANCE,
            dealias: false,
        }
    }
}

/// One run, as written in a config file. Unset keys take defaults; the
/// resolved form (concrete dt and cadence) is what gets echoed into
/// output headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub label: String,
    pub output_dir: Option<PathBuf>,
    pub hbar: Option<f64>,
    pub diffusion: Option<f64>,
    pub coupling: Coupling,
    pub grid: GridConfig,
    pub duffing: DuffingConfig,
    pub initial: InitialConfig,
    pub solver: SolverFileConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            label: "run".into(),
            output_dir: None,
            hbar: None,
            diffusion: None,
            coupling: Coupling::MomentumOnly,
            grid: GridConfig::default(),
            duffing: DuffingConfig::default(),
            initial: InitialConfig::default(),
            solver: SolverFileConfig::default(),
        }
    }
}

/// A validated run with every numeric choice pinned.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    /// Fully populated config (the echo written into outputs).
    pub echo: RunConfig,
    pub grid: PhaseSpaceGrid,
    pub params: ModelParams,
    pub solver: SolverConfig,
    pub initial: InitialSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, IoError> {
        toml::from_str(text).map_err(|e| IoError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Reconstruct the full config from sweep parts, already resolved.
    pub fn from_parts(shared: &SharedConfig, point: SweepPoint, label: &str) -> Self {
        RunConfig {
            label: label.into(),
            output_dir: None,
            hbar: Some(point.hbar),
            diffusion: Some(point.diffusion),
            coupling: shared.coupling,
            grid: GridConfig {
                q_min: shared.grid.q_min(),
                q_max: shared.grid.q_max(),
                p_min: shared.grid.p_min(),
                p_max: shared.grid.p_max(),
                n_q: shared.grid.n_q(),
                n_p: shared.grid.n_p(),
            },
            duffing: DuffingConfig {
                mass: shared.duffing.mass,
                b: shared.duffing.b,
                c: shared.duffing.c,
                drive_amplitude: shared.duffing.drive_amplitude,
                drive_frequency: shared.duffing.drive_frequency,
            },
            initial: InitialConfig {
                q0: shared.q0,
                p0: shared.p0,
                sigma_q2: shared.sigma_q2,
                allow_under_resolved: shared.allow_under_resolved,
            },
            solver: SolverFileConfig {
                dt: Some(shared.solver.dt),
                t_final: shared.solver.t_final,
                scheme: shared.solver.scheme,
                sample_every: Some(shared.solver.sample_every),
                snapshot_times: shared.solver.snapshot_times.clone(),
                mass_tolerance: shared.solver.mass_tolerance,
                boundary_tolerance: shared.solver.boundary_tolerance,
                dealias: shared.solver.dealias,
            },
        }
    }

    /// Validate every invariant and pin dt plus the sampling cadence.
    pub fn resolve(&self) -> Result<ResolvedRun, IoError> {
        let grid = PhaseSpaceGrid::new(
            self.grid.q_min,
            self.grid.q_max,
            self.grid.p_min,
            self.grid.p_max,
            self.grid.n_q,
            self.grid.n_p,
        )
        .map_err(|e| invalid("grid", e))?;

        let duffing = DuffingParams {
            mass: self.duffing.mass,
            b: self.duffing.b,
            c: self.duffing.c,
            drive_amplitude: self.duffing.drive_amplitude,
            drive_frequency: self.duffing.drive_frequency,
        };
        duffing.validate().map_err(|e| invalid("duffing", e))?;

        let hbar = self.hbar.ok_or(IoError::MissingKey("hbar"))?;
        let diffusion = self.diffusion.ok_or(IoError::MissingKey("diffusion"))?;
        let bath = BathParams { hbar, diffusion, coupling: self.coupling };
        bath.validate().map_err(|e| invalid("bath", e))?;
        let params = ModelParams { duffing, bath };

        if !(self.initial.sigma_q2 > 0.0) || self.initial.sigma_q2 > experiments::MAX_SIGMA_Q2 {
            return Err(invalid(
                "initial.sigma_q2",
                format!(
                    "{} outside (0, {}] (localization bound)",
                    self.initial.sigma_q2,
                    experiments::MAX_SIGMA_Q2
                ),
            ));
        }
        let initial = InitialSpec {
            q0: self.initial.q0,
            p0: self.initial.p0,
            sigma_q2: self.initial.sigma_q2,
            hbar,
            allow_under_resolved: self.initial.allow_under_resolved,
        };

        let dt = match self.solver.dt {
            Some(dt) => dt,
            None => propagator::suggest_dt_for(&grid, &params, self.solver.scheme),
        };
        let sample_every = self
            .solver
            .sample_every
            .unwrap_or_else(|| experiments::sample_cadence(dt, duffing.drive_period()));
        let solver = SolverConfig {
            dt,
            t_final: self.solver.t_final,
            scheme: self.solver.scheme,
            sample_every,
            snapshot_times: self.solver.snapshot_times.clone(),
            mass_tolerance: self.solver.mass_tolerance,
            boundary_tolerance: self.solver.boundary_tolerance,
            dealias: self.solver.dealias,
        };
        solver.validate().map_err(|e| invalid("solver", e))?;

        let mut echo = self.clone();
        echo.hbar = Some(hbar);
        echo.diffusion = Some(diffusion);
        echo.solver.dt = Some(dt);
        echo.solver.sample_every = Some(sample_every);
        Ok(ResolvedRun { echo, grid, params, solver, initial })
    }
}

impl ResolvedRun {
    pub fn zeta0(&self) -> f64 {
        self.params.bath.zeta0().unwrap_or(f64::NAN)
    }

    pub fn shared(&self) -> SharedConfig {
        SharedConfig {
            grid: self.grid,
            duffing: self.params.duffing,
            solver: self.solver.clone(),
            coupling: self.params.bath.coupling,
            q0: self.initial.q0,
            p0: self.initial.p0,
            sigma_q2: self.initial.sigma_q2,
            allow_under_resolved: self.initial.allow_under_resolved,
            label: self.echo.label.clone(),
        }
    }
}

// ---------------------------------------------------------------------
// Sweep plan files
// ---------------------------------------------------------------------

/// Sweep plan file: explicit `(hbar, D)` points and/or zeta0 families
/// over one shared numerical setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepPlanConfig {
    pub label: String,
    /// Explicit `[hbar, diffusion]` points.
    pub points: Vec<[f64; 2]>,
    /// zeta0 values expanded into same-zeta0 families.
    pub zeta0: Vec<f64>,
    pub pairs_per_zeta0: usize,
    pub scale_step: f64,
    pub output_dir: Option<PathBuf>,
    pub coupling: Coupling,
    pub grid: GridConfig,
    pub duffing: DuffingConfig,
    pub initial: InitialConfig,
    pub solver: SolverFileConfig,
}

impl Default for SweepPlanConfig {
    fn default() -> Self {
        Self {
            label: "sweep".into(),
            points: Vec::new(),
            zeta0: Vec::new(),
            pairs_per_zeta0: 2,
            scale_step: 2.0,
            output_dir: None,
            coupling: Coupling::MomentumOnly,
            grid: GridConfig::default(),
            duffing: DuffingConfig::default(),
            initial: InitialConfig::default(),
            solver: SolverFileConfig::default(),
        }
    }
}

impl SweepPlanConfig {
    pub fn from_toml(text: &str) -> Result<Self, IoError> {
        toml::from_str(text).map_err(|e| IoError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Expand to a concrete plan. All points share one dt: the minimum of
    /// the per-point stability suggestions (unless pinned in the file),
    /// so same-zeta0 curves sample identical times.
    pub fn resolve(&self) -> Result<SweepPlan, IoError> {
        let mut points: Vec<SweepPoint> =
            self.points.iter().map(|&[h, d]| SweepPoint { hbar: h, diffusion: d }).collect();
        for &z in &self.zeta0 {
            points.extend(experiments::pairs_for_zeta0(z, self.pairs_per_zeta0, self.scale_step));
        }
        // validate each point through the single-run path
        let mut rc = RunConfig {
            label: self.label.clone(),
            coupling: self.coupling,
            grid: self.grid,
            duffing: self.duffing,
            initial: self.initial,
            solver: self.solver.clone(),
            ..RunConfig::default()
        };
        let mut dt = self.solver.dt.unwrap_or(f64::INFINITY);
        let mut resolved = None;
        for p in &points {
            rc.hbar = Some(p.hbar);
            rc.diffusion = Some(p.diffusion);
            if !(p.diffusion > 0.0) {
                return Err(invalid("points", "diffusion must be > 0 to define zeta0"));
            }
            let r = rc.resolve()?;
            if self.solver.dt.is_none() {
                dt = dt.min(propagator::suggest_dt_for(&r.grid, &r.params, r.solver.scheme));
            }
            resolved = Some(r);
        }
        let mut shared = match resolved {
            Some(r) => r.shared(),
            None => {
                // empty plan: still validate the shared numerics
                rc.hbar = Some(0.1);
                rc.diffusion = Some(1e-3);
                rc.resolve()?.shared()
            }
        };
        shared.label = self.label.clone();
        shared.solver.dt = dt;
        shared.solver.sample_every = self
            .solver
            .sample_every
            .unwrap_or_else(|| experiments::sample_cadence(dt, shared.duffing.drive_period()));
        Ok(SweepPlan { points, shared })
    }
}

// ---------------------------------------------------------------------
// Curve files
// ---------------------------------------------------------------------

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.buf.len() {
            return Err(IoError::Truncated {
                path: self.path.clone(),
                detail: format!("expected {n} bytes for {what}"),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, IoError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

const RECORD_FIELDS: usize = 9;

fn push_record(out: &mut Vec<u8>, r: &DiagnosticRecord) {
    for v in [
        r.t,
        r.g,
        r.tr_lc2,
        r.tr_lq2,
        r.tr_t2,
        r.tr_rhs2,
        r.purity,
        r.entropy_s2,
        r.mass,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Persist a curve with its config echo, bit-exactly.
pub fn write_curve(curve: &GCurve, echo: &RunConfig, path: &Path) -> Result<(), IoError> {
    for (i, w) in curve.samples.windows(2).enumerate() {
        if w[1].t <= w[0].t {
            return Err(IoError::NonMonotoneTime { index: i + 1 });
        }
    }
    let config = echo.to_toml();
    let mut out = Vec::with_capacity(64 + config.len() + curve.samples.len() * RECORD_FIELDS * 8);
    out.extend_from_slice(CURVE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(ENCODING_BINARY_F64LE);
    out.push(curve.averaged as u8);
    out.extend_from_slice(&curve.zeta0.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(curve.samples.len() as u64).to_le_bytes());
    for r in &curve.samples {
        push_record(&mut out, r);
    }
    atomic_write(path, &out)
}

/// Read a curve file back; the echoed config reconstructs the parameters.
pub fn read_curve(path: &Path) -> Result<(GCurve, RunConfig), IoError> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0, path: path.display().to_string() };
    if r.take(8, "magic")? != CURVE_MAGIC {
        return Err(IoError::BadMagic { path: r.path, expected: "curve" });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(IoError::VersionMismatch {
            path: r.path,
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let encoding = r.u8("encoding")?;
    if encoding != ENCODING_BINARY_F64LE {
        return Err(IoError::Truncated {
            path: r.path,
            detail: format!("unknown encoding flag {encoding}"),
        });
    }
    let averaged = r.u8("kind")? != 0;
    let zeta0 = r.f64("zeta0")?;
    let config_len = r.u32("config length")? as usize;
    let config_text = std::str::from_utf8(r.take(config_len, "config echo")?)
        .map_err(|e| IoError::Parse(e.to_string()))?;
    let config = RunConfig::from_toml(config_text)?;
    let n = r.u64("sample count")? as usize;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut f = [0.0; RECORD_FIELDS];
        for v in f.iter_mut() {
            *v = r.f64("record")?;
        }
        if f.iter().any(|v| v.is_nan()) {
            return Err(IoError::NonFinite { what: format!("record {i}") });
        }
        samples.push(DiagnosticRecord {
            t: f[0],
            g: f[1],
            tr_lc2: f[2],
            tr_lq2: f[3],
            tr_t2: f[4],
            tr_rhs2: f[5],
            purity: f[6],
            entropy_s2: f[7],
            mass: f[8],
        });
    }
    if r.pos != buf.len() {
        return Err(IoError::Truncated {
            path: r.path,
            detail: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    for (i, w) in samples.windows(2).enumerate() {
        if w[1].t <= w[0].t {
            return Err(IoError::NonMonotoneTime { index: i + 1 });
        }
    }
    let resolved = config.resolve()?;
    Ok((GCurve { params: resolved.params, zeta0, samples, averaged }, config))
}

/// CSV export for plotting: columns
/// `t,g,tr_lc2,tr_lq2,tr_t2,purity,s2,mass`.
///
/// Values use the shortest decimal that round-trips the f64 exactly, so
/// the text re-parses to identical bits with any standard CSV reader.
pub fn write_curve_csv(curve: &GCurve, path: &Path) -> Result<(), IoError> {
    let mut out = String::from("t,g,tr_lc2,tr_lq2,tr_t2,purity,s2,mass\n");
    for r in &curve.samples {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.t, r.g, r.tr_lc2, r.tr_lq2, r.tr_t2, r.purity, r.entropy_s2, r.mass
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// Gnuplot-ready columnar dump (space separated, `#` header).
pub fn write_curve_plot(curve: &GCurve, path: &Path) -> Result<(), IoError> {
    let mut out = String::from("# t g tr_lc2 tr_lq2 tr_t2 tr_rhs2 purity s2 mass\n");
    for r in &curve.samples {
        out.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            r.t, r.g, r.tr_lc2, r.tr_lq2, r.tr_t2, r.tr_rhs2, r.purity, r.entropy_s2, r.mass
        ));
    }
    atomic_write(path, out.as_bytes())
}

/// `zeta0,max_g` table written by `collapse`, consumed by `fit`.
pub fn write_max_table(values: &[(f64, f64)], path: &Path) -> Result<(), IoError> {
    let mut out = String::from("zeta0,max_g\n");
    for (z, m) in values {
        out.push_str(&format!("{z},{m}\n"));
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_max_table(path: &Path) -> Result<Vec<(f64, f64)>, IoError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("zeta0") {
            continue;
        }
        let mut cols = line.split(',');
        let parse = |s: Option<&str>| -> Result<f64, IoError> {
            s.ok_or_else(|| IoError::Parse(format!("line {}: expected zeta0,max_g", lineno + 1)))?
                .trim()
                .parse::<f64>()
                .map_err(|e| IoError::Parse(format!("line {}: {e}", lineno + 1)))
        };
        out.push((parse(cols.next())?, parse(cols.next())?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Snapshot files
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotMode {
    /// Store the signed distribution (negative fringes preserved).
    Signed,
    /// Store absolute values, as plotted in magnitude maps.
    Abs,
}

/// Dump the state as a snapshot file plus a plain-text `.meta` sidecar.
pub fn write_snapshot(
    state: &WignerState,
    mode: SnapshotMode,
    echo: &RunConfig,
    path: &Path,
) -> Result<(), IoError> {
    let grid = state.field.grid();
    let config = echo.to_toml();
    let mut out =
        Vec::with_capacity(80 + config.len() + grid.n_q() * grid.n_p() * 8);
    out.extend_from_slice(SNAP_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match mode {
        SnapshotMode::Signed => 0,
        SnapshotMode::Abs => 1,
    });
    for v in [grid.q_min(), grid.q_max(), grid.p_min(), grid.p_max()] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(grid.n_q() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.n_p() as u32).to_le_bytes());
    out.extend_from_slice(&state.t.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for &v in state.field.values() {
        let v = match mode {
            SnapshotMode::Signed => v,
            SnapshotMode::Abs => v.abs(),
        };
        out.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &out)?;

    let meta = format!(
        "format = wigner-snapshot v{FORMAT_VERSION}\n\
         mode = {}\n\
         t = {}\n\
         grid = ({}, {}) x ({}, {}), {} x {} points, row-major (q rows, p columns)\n\
         zeta0 = {}\n\n\
         [config]\n{config}",
        match mode {
            SnapshotMode::Signed => "signed",
            SnapshotMode::Abs => "abs",
        },
        state.t,
        grid.q_min(),
        grid.q_max(),
        grid.p_min(),
        grid.p_max(),
        grid.n_q(),
        grid.n_p(),
        echo.hbar
            .zip(echo.diffusion)
            .map(|(h, d)| (h * h / d).to_string())
            .unwrap_or_else(|| "undefined".into()),
    );
    atomic_write(&path.with_extension("meta"), meta.as_bytes())
}

/// Read a snapshot back: the stored field, its time, and the mode flag.
pub fn read_snapshot(
    path: &Path,
) -> Result<(PhaseSpaceField, f64, SnapshotMode, RunConfig), IoError> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0, path: path.display().to_string() };
    if r.take(8, "magic")? != SNAP_MAGIC {
        return Err(IoError::BadMagic { path: r.path, expected: "snapshot" });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(IoError::VersionMismatch {
            path: r.path,
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let mode = match r.u8("mode")? {
        0 => SnapshotMode::Signed,
        1 => SnapshotMode::Abs,
        m => {
            return Err(IoError::Truncated {
                path: r.path,
                detail: format!("unknown mode flag {m}"),
            })
        }
    };
    let (q_min, q_max) = (r.f64("q_min")?, r.f64("q_max")?);
    let (p_min, p_max) = (r.f64("p_min")?, r.f64("p_max")?);
    let n_q = r.u32("n_q")? as usize;
    let n_p = r.u32("n_p")? as usize;
    let t = r.f64("t")?;
    let config_len = r.u32("config length")? as usize;
    let config_text = std::str::from_utf8(r.take(config_len, "config echo")?)
        .map_err(|e| IoError::Parse(e.to_string()))?;
    let config = RunConfig::from_toml(config_text)?;
    let grid = PhaseSpaceGrid::new(q_min, q_max, p_min, p_max, n_q, n_p)
        .map_err(|e| invalid("snapshot grid", e))?;
    let mut values = Vec::with_capacity(n_q * n_p);
    for _ in 0..n_q * n_p {
        values.push(r.f64("value")?);
    }
    if r.pos != buf.len() {
        return Err(IoError::Truncated {
            path: r.path,
            detail: format!("{} trailing bytes", buf.len() - r.pos),
        });
    }
    let arr = ndarray::Array2::from_shape_vec((n_q, n_p), values)
        .expect("length checked above");
    let field = PhaseSpaceField::new(grid, arr)
        .map_err(|e| IoError::NonFinite { what: format!("snapshot values ({e})") })?;
    Ok((field, t, mode, config))
}

/// Gnuplot pm3d blocks: `q p value` lines with a blank line per q row.
pub fn write_snapshot_plot(field: &PhaseSpaceField, path: &Path) -> Result<(), IoError> {
    let grid = field.grid();
    let mut out = String::from("# q p value\n");
    for i in 0..grid.n_q() {
        for j in 0..grid.n_p() {
            out.push_str(&format!("{} {} {}\n", grid.q(i), grid.p(j), field.values()[[i, j]]));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}
