//! Run configuration, snapshots and the diagnostics time series.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{DiagnosticsRecord, RayleighReport, SOBOLEV_ORDERS};
use crate::error::{Error, Result};
use crate::grid::{DomainSpec, Field2, Field3, Grid};
use crate::timestepper::{SolverState, TimestepConfig};
use crate::viscosity::{VerticalClosure, ViscosityModel};
use crate::Real;

pub const SNAPSHOT_VERSION: u32 = 1;
const SNAPSHOT_MAGIC: &str = "primeq-snapshot";
const HEADER_END: &[u8] = b"\nend_header\n";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Imex,
    Picard,
    Linearized,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

/// Initial velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    Zero,
    /// `v̄ = (A sin πy, 0)`.
    Shear { amplitude: f64 },
    /// Random combination of low modes, decaying like `1/(1 + |k|²)`.
    Random {
        amplitude: f64,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_max_mode")]
        max_mode: i64,
    },
    /// `v = (A sin πx cos(π(z + h)/h), 0)`; `∂z v` vanishes at the walls.
    Neumann { amplitude: f64 },
    /// `v = A z² (1 + δ sin πy, 1 + δ cos πx)`, curvature inside a Rayleigh band.
    Rayleigh {
        amplitude: f64,
        #[serde(default = "default_perturbation")]
        perturbation: f64,
    },
    Snapshot { path: PathBuf },
}

fn default_max_mode() -> i64 {
    2
}

fn default_perturbation() -> f64 {
    0.2
}

impl Default for InitialCondition {
    fn default() -> Self {
        InitialCondition::Random {
            amplitude: 0.1,
            seed: 0,
            max_mode: 2,
        }
    }
}

/// Settings of the `linearized` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearizedConfig {
    /// Horizontal basis factors (1, 4, 9, 16, … give square blocks).
    pub n_h: usize,
    /// Vertical cosines.
    pub n_z: usize,
    pub dt: f64,
    /// Size of the random coefficients `a`, `b`, `w`.
    pub coefficient_amplitude: f64,
    /// Size of the steady random source.
    pub forcing_amplitude: f64,
    pub seed: u64,
}

impl Default for LinearizedConfig {
    fn default() -> Self {
        LinearizedConfig {
            n_h: 16,
            n_z: 4,
            dt: 1e-3,
            coefficient_amplitude: 0.3,
            forcing_amplitude: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceConfig {
    /// Step sizes, coarse to fine.
    pub dts: Vec<f64>,
    /// Horizontal resolutions, each twice the previous; `nz = n + 1`.
    pub resolutions: Vec<usize>,
}

impl Default for ConvergenceConfig {
    fn default() -> Self {
        ConvergenceConfig {
            dts: vec![0.02, 0.01, 0.005, 0.0025],
            resolutions: vec![8, 16, 32],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpsStudyConfig {
    /// Decreasing `ε` values in `(0, 1]`.
    pub ladder: Vec<f64>,
}

impl Default for EpsStudyConfig {
    fn default() -> Self {
        EpsStudyConfig {
            ladder: vec![0.25, 0.125, 0.0625, 0.03125],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub precision: Precision,
    pub output_dir: PathBuf,
    /// Diagnostics cadence in steps; 0 keeps the first and last state only.
    pub diag_every: usize,
    /// Snapshot cadence in steps; 0 keeps the first and last state only.
    pub snapshot_every: usize,
    pub eta: Option<f64>,
    /// Stop when the `2η` band certificate expires.
    pub stop_on_certificate: bool,
    /// Requires data with `∂z v(±h) = 0` and tracks the wall residual.
    pub neumann_test_mode: bool,
    pub domain: DomainSpec,
    pub model: ViscosityModel,
    pub initial: InitialCondition,
    pub timestep: TimestepConfig,
    pub linearized: LinearizedConfig,
    pub convergence: ConvergenceConfig,
    pub eps_study: EpsStudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Imex,
            precision: Precision::F64,
            output_dir: PathBuf::from("primeq-out"),
            diag_every: 10,
            snapshot_every: 0,
            eta: None,
            stop_on_certificate: false,
            neumann_test_mode: false,
            domain: DomainSpec::default(),
            model: ViscosityModel::Horizontal,
            initial: InitialCondition::default(),
            timestep: TimestepConfig::default(),
            linearized: LinearizedConfig::default(),
            convergence: ConvergenceConfig::default(),
            eps_study: EpsStudyConfig::default(),
        }
    }
}

impl RunConfig {
    /// Every violated rule, prefixed by the offending field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        out.extend(self.domain.problems().into_iter().map(|p| format!("domain: {p}")));
        out.extend(self.model.problems().into_iter().map(|p| format!("model: {p}")));
        out.extend(self.timestep.problems());
        if self.mode == Mode::Picard && !self.model.supports_picard() {
            out.push(format!(
                "mode: picard needs the horizontal, full or eps model, got {}; the half-viscosity models have no linear theory to iterate",
                self.model.tag()
            ));
        }
        if let Some(eta) = self.eta {
            if !(eta.is_finite() && eta > 1.0) {
                out.push(format!("eta must be finite and above 1, got {eta}"));
            }
        }
        if self.stop_on_certificate && self.eta.is_none() {
            out.push("stop_on_certificate needs eta".into());
        }
        match &self.initial {
            InitialCondition::Shear { amplitude }
            | InitialCondition::Neumann { amplitude }
            | InitialCondition::Random { amplitude, .. }
            | InitialCondition::Rayleigh { amplitude, .. } => {
                if !amplitude.is_finite() {
                    out.push(format!("initial.amplitude must be finite, got {amplitude}"));
                }
            }
            _ => {}
        }
        if let InitialCondition::Random { max_mode, .. } = self.initial {
            if max_mode < 0 {
                out.push(format!("initial.max_mode must be nonnegative, got {max_mode}"));
            }
        }
        if self.neumann_test_mode {
            if !matches!(self.initial, InitialCondition::Neumann { .. } | InitialCondition::Snapshot { .. } | InitialCondition::Zero) {
                out.push("neumann_test_mode needs initial data with zero wall slope (preset neumann, zero or a snapshot)".into());
            }
            if let ViscosityModel::Full {
                closure: VerticalClosure::OneSided,
                ..
            } = self.model
            {
                out.push("neumann_test_mode with the full model needs closure = \"neumann\"".into());
            }
        }
        let lin = &self.linearized;
        if lin.n_h == 0 || lin.n_z == 0 {
            out.push("linearized.n_h and linearized.n_z must be positive".into());
        }
        if !(lin.dt > 0.0) {
            out.push(format!("linearized.dt must be positive, got {}", lin.dt));
        }
        let conv = &self.convergence;
        if conv.dts.len() < 3 || conv.dts.iter().any(|&d| !(d > 0.0)) {
            out.push("convergence.dts needs at least three positive steps".into());
        }
        if conv.dts.windows(2).any(|w| !(w[1] < w[0])) {
            out.push("convergence.dts must decrease".into());
        }
        if conv.resolutions.iter().any(|&n| n == 0 || n % 2 != 0) {
            out.push("convergence.resolutions must be positive even integers".into());
        }
        if conv.resolutions.windows(2).any(|w| w[1] != 2 * w[0]) {
            out.push("convergence.resolutions must double at each entry".into());
        }
        let ladder = &self.eps_study.ladder;
        if ladder.len() < 2 || ladder.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
            out.push("eps_study.ladder needs at least two values in (0, 1]".into());
        }
        if ladder.windows(2).any(|w| !(w[1] < w[0])) {
            out.push("eps_study.ladder must decrease".into());
        }
        out
    }
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses and validates a TOML run configuration; omitted fields take their
/// defaults. Returns every problem found, not just the first.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let config: RunConfig = toml::from_str(text).map_err(|e| {
        let at = e.span().map(|s| format!("line {}: ", line_of(text, s.start))).unwrap_or_default();
        Error::Config(vec![format!("{at}{}", e.message())])
    })?;
    let problems = config.problems();
    if problems.is_empty() {
        Ok(config)
    } else {
        Err(Error::Config(problems))
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

/// Normalised TOML rendering, defaults included.
pub fn echo_config(config: &RunConfig) -> String {
    toml::to_string(config).expect("config serialises")
}

/// Smooth random field of `ncomp` components: low horizontal modes times
/// `1, z/h, cos(π(z + h)/h)` with amplitudes `∝ 1/(1 + |k|²)`, scaled so that
/// the largest value is `amplitude`.
pub fn random_smooth<S: Real>(grid: &Arc<Grid<S>>, ncomp: usize, amplitude: f64, max_mode: i64, seed: u64) -> Field3<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = grid.half_height().as_f64();
    let mut terms = Vec::new();
    for c in 0..ncomp {
        for mx in -max_mode..=max_mode {
            for my in 0..=max_mode {
                for p in 0..3u32 {
                    let k2 = (mx * mx + my * my) as f64;
                    let a = rng.gen_range(-1.0..1.0) / (1.0 + k2);
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    terms.push((c, mx as f64, my as f64, p, a, phase));
                }
            }
        }
    }
    let pi = std::f64::consts::PI;
    let raw: Vec<Vec<f64>> = (0..ncomp)
        .map(|c| {
            let mut out = Vec::with_capacity(grid.len());
            for z in grid.zs() {
                let z = z.as_f64();
                let prof = [1.0, z / h, (pi * (z + h) / h).cos()];
                for y in grid.ys() {
                    for x in grid.xs() {
                        let (x, y) = (x.as_f64(), y.as_f64());
                        let v: f64 = terms
                            .iter()
                            .filter(|t| t.0 == c)
                            .map(|&(_, mx, my, p, a, ph)| a * (pi * (mx * x + my * y) + ph).cos() * prof[p as usize])
                            .sum();
                        out.push(v);
                    }
                }
            }
            out
        })
        .collect();
    let peak = raw.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let s = if peak > 0.0 { amplitude / peak } else { 0.0 };
    Field3::from_comps(grid, raw.into_iter().map(|c| c.into_iter().map(|v| S::lit(v * s)).collect()).collect())
        .expect("shape preserved")
}

/// Initial velocity on `grid` for every preset but `Snapshot`.
pub fn initial_velocity<S: Real>(ic: &InitialCondition, grid: &Arc<Grid<S>>) -> Result<Field3<S>> {
    let pi = S::PI();
    let h = grid.half_height();
    Ok(match *ic {
        InitialCondition::Zero => Field3::zeros(grid, 2),
        InitialCondition::Shear { amplitude } => {
            let a = S::lit(amplitude);
            Field3::from_fn(grid, 2, |c, _, y, _| if c == 0 { a * (pi * y).sin() } else { S::zero() })
        }
        InitialCondition::Random { amplitude, seed, max_mode } => random_smooth(grid, 2, amplitude, max_mode, seed),
        InitialCondition::Neumann { amplitude } => {
            let a = S::lit(amplitude);
            Field3::from_fn(grid, 2, |c, x, _, z| {
                if c == 0 {
                    a * (pi * x).sin() * (pi * (z + h) / h).cos()
                } else {
                    S::zero()
                }
            })
        }
        InitialCondition::Rayleigh { amplitude, perturbation } => {
            let (a, d) = (S::lit(amplitude), S::lit(perturbation));
            Field3::from_fn(grid, 2, |c, x, y, z| {
                let m = if c == 0 { (pi * y).sin() } else { (pi * x).cos() };
                a * z * z * (S::one() + d * m)
            })
        }
        InitialCondition::Snapshot { ref path } => {
            let snap = read_snapshot(path)?;
            if snap.domain != *grid.spec() {
                return Err(Error::InvalidArgument(format!(
                    "snapshot {} is on {}, the run uses {}",
                    path.display(),
                    snap.domain,
                    grid.spec()
                )));
            }
            snap.v.cast(grid)
        }
    })
}

/// Stored state: velocity plus, optionally, `w` and `p`.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub version: u32,
    pub domain: DomainSpec,
    pub t: f64,
    pub step: usize,
    pub model: ViscosityModel,
    pub v: Field3<f64>,
    pub w: Option<Field3<f64>>,
    pub p: Option<Field2<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotHeader {
    format: String,
    version: u32,
    time: f64,
    step: usize,
    /// Blocks in payload order; `v1`, `v2`, `w` are 3D lattices, `p` is 2D.
    fields: Vec<String>,
    domain: DomainSpec,
    model: ViscosityModel,
}

impl Snapshot {
    pub fn from_state<S: Real>(state: &SolverState<S>, model: &ViscosityModel) -> Self {
        let spec = *state.split.fluct.grid().spec();
        let g = Grid::<f64>::new(spec).expect("grid already validated");
        Snapshot {
            version: SNAPSHOT_VERSION,
            domain: spec,
            t: state.t,
            step: state.step,
            model: *model,
            v: state.velocity().cast(&g),
            w: Some(state.w.cast(&g)),
            p: Some(state.p.p.cast(&g)),
        }
    }

    /// Solver state rebuilt from the stored velocity.
    pub fn to_state<S: Real>(&self) -> Result<SolverState<S>> {
        let g = Grid::<S>::new(self.domain)?;
        let mut s = SolverState::from_split(crate::calculus::split_modes(&self.v.cast(&g)), self.t, &self.model)?;
        s.step = self.step;
        Ok(s)
    }
}

fn push_block(out: &mut Vec<u8>, data: &[f64]) {
    out.reserve(8 * data.len());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_snapshot(snap: &Snapshot, path: &Path) -> Result<()> {
    let mut fields = vec!["v1".to_string(), "v2".to_string()];
    if snap.w.is_some() {
        fields.push("w".into());
    }
    if snap.p.is_some() {
        fields.push("p".into());
    }
    let header = SnapshotHeader {
        format: SNAPSHOT_MAGIC.into(),
        version: snap.version,
        time: snap.t,
        step: snap.step,
        fields,
        domain: snap.domain,
        model: snap.model,
    };
    let mut bytes = toml::to_string(&header).expect("header serialises").into_bytes();
    if bytes.last() == Some(&b'\n') {
        bytes.pop();
    }
    bytes.extend_from_slice(HEADER_END);
    for c in snap.v.comps() {
        push_block(&mut bytes, c);
    }
    if let Some(w) = &snap.w {
        push_block(&mut bytes, w.comp(0));
    }
    if let Some(p) = &snap.p {
        push_block(&mut bytes, p.comp(0));
    }
    let mut f = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    f.write_all(&bytes).and_then(|_| f.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_snapshot(path: &Path) -> Result<Snapshot> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let end = bytes
        .windows(HEADER_END.len())
        .position(|w| w == HEADER_END)
        .ok_or_else(|| bad("no header terminator".into()))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8".into()))?;
    let header: SnapshotHeader = toml::from_str(text).map_err(|e| bad(format!("header: {}", e.message())))?;
    if header.format != SNAPSHOT_MAGIC {
        return Err(bad(format!("format tag {:?}, expected {SNAPSHOT_MAGIC:?}", header.format)));
    }
    if header.version != SNAPSHOT_VERSION {
        return Err(bad(format!(
            "snapshot version {} is not supported (this build reads version {SNAPSHOT_VERSION})",
            header.version
        )));
    }
    let problems = header.domain.problems();
    if !problems.is_empty() {
        return Err(bad(format!("domain: {}", problems.join("; "))));
    }
    let d = header.domain;
    let mut sizes = Vec::new();
    for name in &header.fields {
        sizes.push(match name.as_str() {
            "v1" | "v2" | "w" => d.len(),
            "p" => d.plane_len(),
            other => return Err(bad(format!("unknown field {other:?}"))),
        });
    }
    let want = ["v1", "v2"];
    if header.fields.len() < 2 || header.fields[..2] != want {
        return Err(bad("fields must start with v1, v2".into()));
    }
    let payload = &bytes[end + HEADER_END.len()..];
    let expected: usize = 8 * sizes.iter().sum::<usize>();
    if payload.len() != expected {
        return Err(bad(format!("payload has {} bytes, header declares {expected}", payload.len())));
    }
    let mut blocks = Vec::new();
    let mut at = 0;
    for n in sizes {
        let block: Vec<f64> = payload[at..at + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        at += 8 * n;
        blocks.push(block);
    }
    let g = Grid::<f64>::new(d)?;
    let mut it = header.fields.iter().zip(blocks);
    let v1 = it.next().expect("checked").1;
    let v2 = it.next().expect("checked").1;
    let mut snap = Snapshot {
        version: header.version,
        domain: d,
        t: header.time,
        step: header.step,
        model: header.model,
        v: Field3::from_comps(&g, vec![v1, v2])?,
        w: None,
        p: None,
    };
    for (name, block) in it {
        match name.as_str() {
            "w" => snap.w = Some(Field3::from_comps(&g, vec![block])?),
            "p" => snap.p = Some(Field2::from_comps(&g, vec![block])?),
            other => return Err(bad(format!("field {other:?} out of place"))),
        }
    }
    Ok(snap)
}

/// Rayleigh columns are reported for the first two components.
const BAND_COMPONENTS: usize = 2;

/// Column names of the time series, in order.
pub fn timeseries_header() -> Vec<String> {
    let mut h = vec!["t".to_string(), "dt".to_string()];
    for s in SOBOLEV_ORDERS {
        h.push(format!("v_h{s}"));
    }
    h.extend(["mean_l2", "fluct_l2", "div_mean", "fluct_mean", "w_boundary", "neumann", "rayleigh_pass"].map(String::from));
    for c in 1..=BAND_COMPONENTS {
        h.push(format!("rayleigh_min_inv_{c}"));
        h.push(format!("rayleigh_max_inv_{c}"));
    }
    h.extend(["rayleigh_relaxed_pass", "eta_norm", "rayleigh_drift", "kinetic", "dissipation", "transfer"].map(String::from));
    h
}

fn num(x: f64) -> String {
    format!("{x:e}")
}

/// One row; absent values (band not monitored, or violated for `eta_norm`)
/// are empty strings.
pub fn timeseries_row(r: &DiagnosticsRecord) -> Vec<String> {
    let mut row = vec![num(r.t), num(r.dt)];
    for s in SOBOLEV_ORDERS {
        let v = r.sobolev.iter().find(|e| e.0 == "v" && e.1 == s).map_or(f64::NAN, |e| e.2);
        row.push(num(v));
    }
    for tag in ["mean", "fluct"] {
        row.push(num(r.sobolev.iter().find(|e| e.0 == tag && e.1 == 0).map_or(f64::NAN, |e| e.2)));
    }
    let res = &r.residuals;
    row.extend([res.div_mean, res.fluct_mean, res.w_boundary, res.neumann].map(num));
    let pass = |rep: &Option<RayleighReport>| rep.as_ref().map_or(String::new(), |x| x.pass().to_string());
    row.push(pass(&r.rayleigh));
    for c in 0..BAND_COMPONENTS {
        match r.rayleigh.as_ref().and_then(|x| x.components.get(c)) {
            Some(b) => row.extend([num(b.min_inv), num(b.max_inv)]),
            None => row.extend([String::new(), String::new()]),
        }
    }
    row.push(pass(&r.rayleigh_relaxed));
    row.push(r.eta_norm.map_or(String::new(), num));
    row.push(num(r.rayleigh_drift));
    row.extend([r.energy.kinetic, r.energy.dissipation, r.energy.transfer].map(num));
    row
}

/// Appends one CSV row, writing the header first when the file is new or empty.
pub fn append_timeseries(record: &DiagnosticsRecord, path: &Path) -> Result<()> {
    append_rows(path, &timeseries_header(), &[timeseries_row(record)])
}

/// Appends `rows` to the CSV at `path`, writing `header` if the file is empty.
pub fn append_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if empty {
        w.write_record(header)?;
    }
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
