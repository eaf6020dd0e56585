//! Command implementations behind the `primeq` binary. Each command owns one
//! output directory and leaves a config echo, at least one snapshot and a CSV
//! series in it, including on error exits.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::calculus::{apply_derivative, split_modes, Axis, SplitState};
use crate::diagnostics::{invariant_residuals, rayleigh_check, DiagnosticsRecord, RayleighReport, Residuals};
use crate::error::{Error, Result};
use crate::grid::{DomainSpec, Field3, Grid};
use crate::io::{
    append_rows, append_timeseries, echo_config, initial_velocity, random_smooth, read_snapshot, write_snapshot,
    InitialCondition, LinearizedConfig, Mode, Precision, RunConfig, Snapshot,
};
use crate::linearized::{
    assemble_system, build_basis, energy_bound, energy_functional, h_norm_sq, integrate_ode, solve_linearized_grid,
    synthesize, v_dual_norm, CoefficientData, Forcing,
};
use crate::timestepper::{imex_trajectory, picard_solve, run, RunOptions, RunOutcome, SolverState, TimestepConfig};
use crate::viscosity::ViscosityModel;
use crate::Real;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_BLOWUP: i32 = 2;
pub const EXIT_NO_CONTRACTION: i32 = 3;

/// Process exit code for a command result.
pub fn exit_code<T>(r: &Result<T>) -> i32 {
    match r {
        Ok(_) => EXIT_OK,
        Err(Error::BlowupDetected { .. }) => EXIT_BLOWUP,
        Err(Error::NoContraction { .. }) => EXIT_NO_CONTRACTION,
        Err(_) => EXIT_FAILURE,
    }
}

pub const TIMESERIES: &str = "timeseries.csv";
pub const CONFIG_ECHO: &str = "config.toml";

/// Output directory of one command.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Creates the directory, clears the series a previous run left and
    /// writes the config echo.
    pub fn create(config: &RunConfig) -> Result<Self> {
        let root = config.output_dir.clone();
        fs::create_dir_all(root.join("snapshots")).map_err(|e| Error::io(&root, e))?;
        for entry in fs::read_dir(&root).map_err(|e| Error::io(&root, e))? {
            let p = entry.map_err(|e| Error::io(&root, e))?.path();
            if p.extension().is_some_and(|x| x == "csv") {
                fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
            }
        }
        let echo = root.join(CONFIG_ECHO);
        fs::write(&echo, echo_config(config)).map_err(|e| Error::io(&echo, e))?;
        Ok(RunDir { root })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn snapshot_path(&self, step: usize) -> PathBuf {
        self.root.join("snapshots").join(format!("step_{step:08}.snap"))
    }

    pub fn save<S: Real>(&self, state: &SolverState<S>, model: &ViscosityModel) -> Result<PathBuf> {
        let p = self.snapshot_path(state.step);
        write_snapshot(&Snapshot::from_state(state, model), &p)?;
        Ok(p)
    }
}

fn grid_for<S: Real>(spec: DomainSpec) -> Result<Arc<Grid<S>>> {
    Grid::new(spec)
}

fn initial_state<S: Real>(config: &RunConfig, model: &ViscosityModel) -> Result<SolverState<S>> {
    let g = grid_for::<S>(config.domain)?;
    let v = initial_velocity(&config.initial, &g)?;
    let mut s = SolverState::from_velocity(&v, model)?;
    if let InitialCondition::Snapshot { path } = &config.initial {
        let snap = read_snapshot(path)?;
        s.t = snap.t;
        s.step = snap.step;
    }
    if config.neumann_test_mode {
        let r = invariant_residuals(&s.split);
        let scale = s.velocity().max_abs().as_f64().max(f64::MIN_POSITIVE);
        if r.neumann > 0.05 * scale {
            return Err(Error::InvalidArgument(format!(
                "neumann_test_mode: initial wall slope {:.3e} is not small against max|v| = {scale:.3e}",
                r.neumann
            )));
        }
    }
    Ok(s)
}

/// `run <config>`: evolution in the configured mode.
pub fn run_command(config: &RunConfig) -> Result<()> {
    match (config.mode, config.precision) {
        (Mode::Linearized, _) => linearized_command(config).map(|_| ()),
        (Mode::Imex, Precision::F64) => run_imex::<f64>(config),
        (Mode::Imex, Precision::F32) => run_imex::<f32>(config),
        (Mode::Picard, Precision::F64) => run_picard::<f64>(config),
        (Mode::Picard, Precision::F32) => run_picard::<f32>(config),
    }
}

fn run_imex<S: Real>(config: &RunConfig) -> Result<()> {
    let dir = RunDir::create(config)?;
    let model = config.model;
    let initial = initial_state::<S>(config, &model)?;
    dir.save(&initial, &model)?;
    let ts = dir.path(TIMESERIES);
    let options = RunOptions {
        diag_every: config.diag_every,
        eta: config.eta,
        stop_on_certificate: config.stop_on_certificate,
        forcing: None,
    };
    let timestep = config.timestep;
    let every = config.snapshot_every;
    let result = run(initial, &model, &timestep, &options, |s, rec| {
        if let Some(r) = rec {
            append_timeseries(r, &ts)?;
        }
        if every > 0 && s.step > 0 && s.step % every == 0 {
            dir.save(s, &model)?;
        }
        Ok(())
    });
    dir.save(&result.state, &model)?;
    match result.outcome? {
        RunOutcome::Completed => Ok(()),
        RunOutcome::CertificateExpired { t } => {
            eprintln!("stopped at t = {t}: Rayleigh band certificate expired");
            Ok(())
        }
    }
}

fn run_picard<S: Real>(config: &RunConfig) -> Result<()> {
    let dir = RunDir::create(config)?;
    let model = config.model;
    let initial = initial_state::<S>(config, &model)?;
    dir.save(&initial, &model)?;
    let ts = dir.path(TIMESERIES);
    let start = initial.split.clone();
    let first = DiagnosticsRecord::evaluate(initial.t, 0.0, &start, &start, &model, config.eta)?;
    append_timeseries(&first, &ts)?;
    let res = picard_solve(&initial.velocity(), &model, config.timestep.t_end, &config.timestep)?;
    let rows: Vec<Vec<String>> = res
        .increments
        .iter()
        .enumerate()
        .map(|(i, d)| vec![(i + 1).to_string(), format!("{d:e}")])
        .collect();
    append_rows(&dir.path("picard.csv"), &["iteration".into(), "increment_h1".into()], &rows)?;
    let last = res.trajectory.len() - 1;
    for (n, (t, s)) in res.times.iter().zip(&res.trajectory).enumerate().skip(1) {
        if n == last || (config.diag_every > 0 && n % config.diag_every == 0) {
            let dt = t - res.times[n - 1];
            append_timeseries(&DiagnosticsRecord::evaluate(*t, dt, s, &start, &model, config.eta)?, &ts)?;
        }
        if n == last || (config.snapshot_every > 0 && n % config.snapshot_every == 0) {
            let mut st = SolverState::from_split(s.clone(), *t, &model)?;
            st.step = n;
            dir.save(&st, &model)?;
        }
    }
    eprintln!("picard converged in {} iterations, w gap {:.3e}", res.iterations, res.w_gap);
    Ok(())
}

/// Random smooth coefficients for the linear problem: `a`, `b` from
/// [`random_smooth`], `w` the same times `1 − (z/h)²` so that it vanishes at
/// the walls; a steady random source when `forcing_amplitude > 0`.
pub fn linearized_problem<S: Real>(grid: &Arc<Grid<S>>, cfg: &LinearizedConfig) -> Result<CoefficientData<S>> {
    let amp = cfg.coefficient_amplitude;
    let a = random_smooth(grid, 1, amp, 2, cfg.seed.wrapping_mul(4).wrapping_add(1));
    let b = random_smooth(grid, 2, amp, 2, cfg.seed.wrapping_mul(4).wrapping_add(2));
    let h = grid.half_height();
    let mut w = random_smooth(grid, 1, amp, 2, cfg.seed.wrapping_mul(4).wrapping_add(3));
    let plane = grid.plane_len();
    for (k, level) in w.comp_mut(0).chunks_mut(plane).enumerate() {
        let z = grid.zs()[k] / h;
        let m = if k == 0 || k + 1 == grid.nz() { S::zero() } else { S::one() - z * z };
        level.iter_mut().for_each(|v| *v *= m);
    }
    let f = if cfg.forcing_amplitude > 0.0 {
        Forcing::steady(random_smooth(grid, 1, cfg.forcing_amplitude, 2, cfg.seed.wrapping_mul(4).wrapping_add(4)))
    } else {
        Forcing::none()
    };
    CoefficientData::constant(a, b, w, f)
}

/// One sample of the linearized comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearizedSample {
    pub t: f64,
    pub galerkin_h: f64,
    pub grid_h: f64,
    /// `‖v_Galerkin − v_grid‖_H / ‖v_grid‖_H`.
    pub distance: f64,
    /// `sup ‖v‖²_H + ∫ ‖∇_H v‖²_H` of the grid solution up to `t`.
    pub energy: f64,
    pub bound: f64,
}

/// Galerkin and grid solutions of the same linear problem on `[0, t_end]`.
pub fn compare_linearized(
    data: &CoefficientData<f64>,
    v0: &Field3<f64>,
    n_h: usize,
    n_z: usize,
    t_end: f64,
    dt: f64,
) -> Result<Vec<LinearizedSample>> {
    let grid = data.grid().clone();
    let basis = build_basis(n_h, n_z, *grid.spec())?;
    let sys = assemble_system(data, &basis, v0)?;
    let gal = integrate_ode(&sys, t_end, dt)?;
    let traj = solve_linearized_grid(data, v0, t_end, dt)?;
    let norms = data.sup_norms();
    let v0h = h_norm_sq(v0).sqrt();
    let mut out = Vec::with_capacity(traj.len());
    let mut f_norms = Vec::with_capacity(traj.len());
    for (n, ((t, g), (_, v))) in gal.iter().zip(&traj).enumerate() {
        let vg = synthesize(&basis, g, &grid);
        let gh = h_norm_sq(v).sqrt();
        let d = h_norm_sq(&vg.sub(v)).sqrt();
        f_norms.push((*t, data.f.at(*t).map_or(0.0, |f| v_dual_norm(&f))));
        out.push(LinearizedSample {
            t: *t,
            galerkin_h: h_norm_sq(&vg).sqrt(),
            grid_h: gh,
            distance: if gh > 0.0 { d / gh } else { d },
            energy: energy_functional(&traj[..=n]),
            bound: energy_bound(v0h, &f_norms, &norms, *t),
        });
    }
    Ok(out)
}

/// `linearized <config>`: Galerkin versus grid trajectories and the energy
/// bound, written to `linearized.csv` (also the run's time series).
pub fn linearized_command(config: &RunConfig) -> Result<Vec<LinearizedSample>> {
    let dir = RunDir::create(config)?;
    let g = grid_for::<f64>(config.domain)?;
    let v = initial_velocity(&config.initial, &g)?;
    let state = SolverState::from_velocity(&v, &ViscosityModel::Horizontal)?;
    dir.save(&state, &ViscosityModel::Horizontal)?;
    let v0 = v.component(0);
    let lin = &config.linearized;
    let data = linearized_problem(&g, lin)?;
    let samples = compare_linearized(&data, &v0, lin.n_h, lin.n_z, config.timestep.t_end, lin.dt)?;
    let header: Vec<String> = ["t", "galerkin_h", "grid_h", "distance", "energy", "energy_bound"].map(String::from).into();
    let every = config.diag_every.max(1);
    let rows: Vec<Vec<String>> = samples
        .iter()
        .enumerate()
        .filter(|(i, _)| i % every == 0 || *i + 1 == samples.len())
        .map(|(_, s)| [s.t, s.galerkin_h, s.grid_h, s.distance, s.energy, s.bound].map(|x| format!("{x:e}")).into())
        .collect();
    append_rows(&dir.path("linearized.csv"), &header, &rows)?;
    append_rows(&dir.path(TIMESERIES), &header, &rows)?;
    Ok(samples)
}

/// Differences between consecutive refinements and the orders they imply.
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub parameter: Vec<f64>,
    /// `max |u_k − u_{k+1}|`.
    pub differences: Vec<f64>,
    /// `log(d_k / d_{k+1}) / log(p_k / p_{k+1})`.
    pub orders: Vec<f64>,
}

impl Refinement {
    fn from_differences(parameter: Vec<f64>, differences: Vec<f64>) -> Self {
        let orders = differences
            .windows(2)
            .zip(parameter.windows(2))
            .map(|(d, p)| (d[0] / d[1]).ln() / (p[0] / p[1]).ln())
            .collect();
        Refinement {
            parameter,
            differences,
            orders,
        }
    }
}

/// Final velocity of a uniform-step IMEX run from `v0`.
fn final_velocity<S: Real>(
    v0: &Field3<S>,
    model: &ViscosityModel,
    t_end: f64,
    dt: f64,
    ts: &TimestepConfig,
) -> Result<Field3<S>> {
    let s = SolverState::from_velocity(v0, model)?;
    let steps = (t_end / dt).round().max(1.0) as usize;
    let traj = imex_trajectory(&s, model, t_end / steps as f64, steps, ts, None)?;
    Ok(traj.last().expect("nonempty").velocity())
}

/// Temporal self-convergence at fixed resolution.
pub fn dt_refinement<S: Real>(v0: &Field3<S>, model: &ViscosityModel, t_end: f64, dts: &[f64], ts: &TimestepConfig) -> Result<Refinement> {
    let finals: Vec<Field3<S>> = dts.iter().map(|&dt| final_velocity(v0, model, t_end, dt, ts)).collect::<Result<_>>()?;
    let diffs = finals.windows(2).map(|w| w[0].max_diff(&w[1]).as_f64()).collect();
    Ok(Refinement::from_differences(dts[..dts.len() - 1].to_vec(), diffs))
}

/// Restriction of a field on `(2n, 2n, 2(nz − 1) + 1)` to `(n, n, nz)`.
fn restrict<S: Real>(fine: &Field3<S>, coarse: &Arc<Grid<S>>) -> Field3<S> {
    let fg = fine.grid();
    let comps = (0..fine.ncomp())
        .map(|c| {
            let mut out = Vec::with_capacity(coarse.len());
            for k in 0..coarse.nz() {
                for j in 0..coarse.ny() {
                    for i in 0..coarse.nx() {
                        out.push(fine.at(c, 2 * i, 2 * j, 2 * k));
                    }
                }
            }
            debug_assert_eq!(fg.nz(), 2 * (coarse.nz() - 1) + 1);
            out
        })
        .collect();
    Field3::from_comps(coarse, comps).expect("shape preserved")
}

/// Spatial self-convergence: grids `(n, n, n + 1)` for each `n`, compared on
/// the coarser lattice.
pub fn resolution_refinement<S: Real>(
    ic: &InitialCondition,
    half_height: f64,
    resolutions: &[usize],
    model: &ViscosityModel,
    t_end: f64,
    dt: f64,
    ts: &TimestepConfig,
) -> Result<Refinement> {
    let mut finals = Vec::new();
    for &n in resolutions {
        let g = grid_for::<S>(DomainSpec::new(half_height, n, n, n + 1)?)?;
        let v0 = initial_velocity(ic, &g)?;
        finals.push(final_velocity(&v0, model, t_end, dt, ts)?);
    }
    let diffs = finals
        .windows(2)
        .map(|w| restrict(&w[1], w[0].grid()).max_diff(&w[0]).as_f64())
        .collect();
    let h: Vec<f64> = resolutions[..resolutions.len() - 1].iter().map(|&n| 2.0 / n as f64).collect();
    Ok(Refinement::from_differences(h, diffs))
}

/// `convergence <config>`: `dt` and resolution refinement; `convergence.csv`.
pub fn convergence_command(config: &RunConfig) -> Result<(Refinement, Refinement)> {
    let dir = RunDir::create(config)?;
    let g = grid_for::<f64>(config.domain)?;
    let model = config.model;
    let v0 = initial_velocity(&config.initial, &g)?;
    dir.save(&SolverState::from_velocity(&v0, &model)?, &model)?;
    let ts = config.timestep;
    let conv = &config.convergence;
    let dtr = dt_refinement(&v0, &model, ts.t_end, &conv.dts, &ts)?;
    let finest = *conv.dts.last().expect("validated");
    let hr = if matches!(config.initial, InitialCondition::Snapshot { .. }) || conv.resolutions.len() < 2 {
        Refinement::from_differences(Vec::new(), Vec::new())
    } else {
        resolution_refinement::<f64>(&config.initial, config.domain.half_height, &conv.resolutions, &model, ts.t_end, finest, &ts)?
    };
    let header: Vec<String> = ["kind", "parameter", "difference", "observed_order"].map(String::from).into();
    let mut rows = Vec::new();
    for (kind, r) in [("dt", &dtr), ("dx", &hr)] {
        for (i, (p, d)) in r.parameter.iter().zip(&r.differences).enumerate() {
            let order = if i == 0 { String::new() } else { format!("{:e}", r.orders[i - 1]) };
            rows.push(vec![kind.to_string(), format!("{p:e}"), format!("{d:e}"), order]);
        }
    }
    append_rows(&dir.path("convergence.csv"), &header, &rows)?;
    append_rows(&dir.path(TIMESERIES), &header, &rows)?;
    Ok((dtr, hr))
}

/// One rung of the `ε` ladder.
#[derive(Clone, Debug, PartialEq)]
pub struct EpsRung {
    pub eps: f64,
    pub final_t: f64,
    pub certificate_expired: Option<f64>,
    /// Band check at `η` on the initial data.
    pub initial_pass: Option<bool>,
    /// Band check at `2η` on every record.
    pub relaxed_pass_throughout: Option<bool>,
    /// `‖v_ε − v_{next ε}‖_{L²}` at the final time; absent on the last rung.
    pub distance_to_next: Option<f64>,
}

/// Runs the `A_ε` model for every `ε` of the ladder from the same data.
pub fn eps_continuation<S: Real>(
    v0: &Field3<S>,
    ladder: &[f64],
    ts: &TimestepConfig,
    options: &RunOptions<S>,
    mut on_record: impl FnMut(usize, &DiagnosticsRecord) -> Result<()>,
) -> Result<Vec<EpsRung>> {
    let mut rungs = Vec::with_capacity(ladder.len());
    let mut finals: Vec<Field3<S>> = Vec::with_capacity(ladder.len());
    for (i, &eps) in ladder.iter().enumerate() {
        let model = ViscosityModel::Eps { eps };
        let s = SolverState::from_velocity(v0, &model)?;
        let res = run(s, &model, ts, options, |_, r| match r {
            Some(r) => on_record(i, r),
            None => Ok(()),
        });
        let outcome = res.outcome?;
        let pass_all = |f: fn(&DiagnosticsRecord) -> Option<&RayleighReport>| {
            options.eta.map(|_| res.records.iter().all(|r| f(r).is_some_and(|x| x.pass())))
        };
        rungs.push(EpsRung {
            eps,
            final_t: res.state.t,
            certificate_expired: match outcome {
                RunOutcome::CertificateExpired { t } => Some(t),
                RunOutcome::Completed => None,
            },
            initial_pass: res.certificate.map(|c| c.initial_pass),
            relaxed_pass_throughout: pass_all(|r| r.rayleigh_relaxed.as_ref()),
            distance_to_next: None,
        });
        finals.push(res.state.velocity());
    }
    for i in 0..rungs.len() - 1 {
        rungs[i].distance_to_next = Some(finals[i].sub(&finals[i + 1]).l2_norm().as_f64());
    }
    Ok(rungs)
}

/// `eps-study <config>`: continuation over `eps_study.ladder`.
pub fn eps_study_command(config: &RunConfig) -> Result<Vec<EpsRung>> {
    let dir = RunDir::create(config)?;
    let g = grid_for::<f64>(config.domain)?;
    let v0 = initial_velocity(&config.initial, &g)?;
    let first = ViscosityModel::Eps {
        eps: config.eps_study.ladder[0],
    };
    dir.save(&SolverState::from_velocity(&v0, &first)?, &first)?;
    let options = RunOptions {
        diag_every: config.diag_every,
        eta: config.eta,
        stop_on_certificate: config.stop_on_certificate,
        forcing: None,
    };
    let rungs = eps_continuation(&v0, &config.eps_study.ladder, &config.timestep, &options, |i, r| {
        append_timeseries(r, &dir.path(&format!("timeseries_eps{i}.csv")))
    })?;
    let header: Vec<String> = [
        "eps",
        "final_t",
        "certificate_expired_at",
        "initial_pass",
        "relaxed_pass_throughout",
        "distance_to_next",
    ]
    .map(String::from)
    .into();
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:e}"));
    let flag = |x: Option<bool>| x.map_or(String::new(), |v| v.to_string());
    let rows: Vec<Vec<String>> = rungs
        .iter()
        .map(|r| {
            vec![
                format!("{:e}", r.eps),
                format!("{:e}", r.final_t),
                opt(r.certificate_expired),
                flag(r.initial_pass),
                flag(r.relaxed_pass_throughout),
                opt(r.distance_to_next),
            ]
        })
        .collect();
    append_rows(&dir.path("eps_study.csv"), &header, &rows)?;
    append_rows(&dir.path(TIMESERIES), &header, &rows)?;
    Ok(rungs)
}

/// Invariant audit and band report of a stored state.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub path: PathBuf,
    pub snapshot_t: f64,
    pub model: ViscosityModel,
    pub domain: DomainSpec,
    pub residuals: Residuals,
    pub v_l2: f64,
    pub rayleigh: Option<RayleighReport>,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "snapshot   {}", self.path.display())?;
        writeln!(f, "domain     {}", self.domain)?;
        writeln!(f, "model      {}", self.model)?;
        writeln!(f, "time       {}", self.snapshot_t)?;
        writeln!(f, "|v|        {:.6e}", self.v_l2)?;
        writeln!(f, "div_mean   {:.3e}", self.residuals.div_mean)?;
        writeln!(f, "fluct_mean {:.3e}", self.residuals.fluct_mean)?;
        writeln!(f, "w_boundary {:.3e}", self.residuals.w_boundary)?;
        writeln!(f, "neumann    {:.3e}", self.residuals.neumann)?;
        match &self.rayleigh {
            None => writeln!(f, "rayleigh   not checked"),
            Some(r) => {
                writeln!(f, "rayleigh   eta = {} -> {}", r.eta, if r.pass() { "pass" } else { "fail" })?;
                for (c, b) in r.components.iter().enumerate() {
                    writeln!(f, "  v{}: 1/|d_zz v| in [{:.4e}, {:.4e}]", c + 1, b.min_inv, b.max_inv)?;
                }
                Ok(())
            }
        }
    }
}

/// `check <snapshot>`: audits the stored velocity as saved, without
/// re-projection.
pub fn check_command(path: &Path, eta: Option<f64>) -> Result<CheckReport> {
    let snap = read_snapshot(path)?;
    let split: SplitState<f64> = split_modes(&snap.v);
    let rayleigh = eta.map(|eta| rayleigh_check(&apply_derivative(&snap.v, Axis::Z, 1), eta));
    Ok(CheckReport {
        path: path.to_path_buf(),
        snapshot_t: snap.t,
        model: snap.model,
        domain: snap.domain,
        residuals: invariant_residuals(&split),
        v_l2: snap.v.l2_norm(),
        rayleigh,
    })
}
