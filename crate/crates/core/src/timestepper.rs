//! Crank–Nicolson / Adams–Bashforth time stepping of the coupled `(v̄, ṽ)`
//! system, the Picard linearization sequence, and the run loop.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::calculus::{
    reconstruct_w_corrected, reconstruct_w_unchecked, remove_vertical_mean, split_modes, SplitState,
};
use crate::diagnostics::{band_slack, rayleigh_drift, sobolev_norm, DiagnosticsRecord};
use crate::error::{Error, Result};
use crate::grid::{
    dealiased, dealiased_2d, forward_transform, forward_transform_2d, inverse_transform, inverse_transform_2d,
    Field2, Field3,
};
use crate::nonlinear::{advect_horizontal, advect_horizontal_2d, advect_vertical, coupling_k_unchecked, transport_tendency, Tendency};
use crate::pressure::{leray_project, pressure_rhs_for_model, solve_poisson2d, PressureField};
use crate::viscosity::{implicit_symbol, solve_vertical_column, symbol_plane, vertical_second_difference, ViscosityModel};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimestepConfig {
    pub dt_max: f64,
    pub cfl: f64,
    pub t_end: f64,
    pub picard_tol: f64,
    pub picard_max_iters: usize,
    /// Threshold on `‖v‖_{H²}`.
    pub blowup_threshold: f64,
}

impl Default for TimestepConfig {
    fn default() -> Self {
        TimestepConfig {
            dt_max: 1e-2,
            cfl: 0.5,
            t_end: 1.0,
            picard_tol: 1e-10,
            picard_max_iters: 50,
            blowup_threshold: 1e6,
        }
    }
}

impl TimestepConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("dt_max", self.dt_max),
            ("t_end", self.t_end),
            ("picard_tol", self.picard_tol),
            ("blowup_threshold", self.blowup_threshold),
        ] {
            if !(v > 0.0) {
                out.push(format!("timestep.{name} must be positive, got {v}"));
            }
        }
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            out.push(format!("timestep.cfl must lie in (0, 1], got {}", self.cfl));
        }
        if self.picard_max_iters == 0 {
            out.push("timestep.picard_max_iters must be positive".into());
        }
        out
    }
}

/// External forcing, already split into barotropic and baroclinic parts.
pub type SplitForcing<S> = Arc<dyn Fn(f64) -> Tendency<S> + Send + Sync>;

/// Evolving state plus diagnostic caches.
#[derive(Clone, Debug)]
pub struct SolverState<S: Real> {
    pub t: f64,
    pub step: usize,
    pub split: SplitState<S>,
    pub p: PressureField<S>,
    pub w: Field3<S>,
    /// Transport tendency and step size of the previous step, for AB2.
    prev: Option<(Tendency<S>, f64)>,
}

/// Dealiases both parts, projects `v̄` onto solenoidal fields and removes the
/// vertical mean of `ṽ`.
pub fn prepare_split<S: Real>(split: &SplitState<S>) -> SplitState<S> {
    SplitState {
        mean: leray_project(&dealiased_2d(&split.mean)),
        fluct: remove_vertical_mean(&dealiased(&split.fluct)),
    }
}

impl<S: Real> SolverState<S> {
    /// State at `t = 0` from a full velocity, after [`prepare_split`].
    pub fn from_velocity(v: &Field3<S>, model: &ViscosityModel) -> Result<Self> {
        Self::from_split(split_modes(v), 0.0, model)
    }

    pub fn from_split(split: SplitState<S>, t: f64, model: &ViscosityModel) -> Result<Self> {
        let split = prepare_split(&split);
        Self::assemble(split, t, 0, model, None)
    }

    fn assemble(
        split: SplitState<S>,
        t: f64,
        step: usize,
        model: &ViscosityModel,
        prev: Option<(Tendency<S>, f64)>,
    ) -> Result<Self> {
        let w = reconstruct_w_unchecked(&split.fluct);
        let p = solve_poisson2d(&pressure_rhs_for_model(&split.mean, &split.fluct, model)?)?;
        Ok(SolverState {
            t,
            step,
            split,
            p,
            w,
            prev,
        })
    }

    pub fn velocity(&self) -> Field3<S> {
        self.split.reassemble()
    }
}

fn max_abs_slice<S: Real>(a: &[S]) -> f64 {
    a.iter().fold(0.0, |m: f64, v| m.max(v.as_f64().abs()))
}

fn advective_rate<S: Real>(state: &SolverState<S>) -> f64 {
    let g = state.split.fluct.grid();
    let v = state.velocity();
    let dx = 2.0 / g.nx() as f64;
    let dy = 2.0 / g.ny() as f64;
    let dz = g.spec().dz();
    max_abs_slice(v.comp(0)) / dx + max_abs_slice(v.comp(1)) / dy + max_abs_slice(state.w.comp(0)) / dz
}

/// Advective step limit `min(dt_max, cfl / rate)`.
pub fn cfl_dt<S: Real>(state: &SolverState<S>, config: &TimestepConfig) -> f64 {
    let rate = advective_rate(state);
    if rate > 0.0 {
        config.dt_max.min(config.cfl / rate)
    } else {
        config.dt_max
    }
}

fn check_cfl<S: Real>(state: &SolverState<S>, config: &TimestepConfig, dt: f64) -> Result<()> {
    let rate = advective_rate(state);
    if rate > 0.0 {
        let limit = config.cfl / rate;
        if dt > limit * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt, limit });
        }
    }
    Ok(())
}

/// Variable-step Adams–Bashforth extrapolation to the midpoint of the step.
fn extrapolate<S: Real>(now: &Tendency<S>, prev: Option<&(Tendency<S>, f64)>, dt: f64) -> Tendency<S> {
    match prev {
        None => now.clone(),
        Some((old, dt_old)) => {
            let r = dt / dt_old;
            let (a, b) = (S::lit(1.0 + 0.5 * r), S::lit(-0.5 * r));
            let mut mean_rhs = now.mean_rhs.scaled(a);
            mean_rhs.axpy(b, &old.mean_rhs);
            let mut fluct_rhs = now.fluct_rhs.scaled(a);
            fluct_rhs.axpy(b, &old.fluct_rhs);
            Tendency { mean_rhs, fluct_rhs }
        }
    }
}

fn add_tendency<S: Real>(t: &mut Tendency<S>, alpha: S, other: &Tendency<S>) {
    t.mean_rhs.axpy(alpha, &other.mean_rhs);
    t.fluct_rhs.axpy(alpha, &other.fluct_rhs);
}

/// One Crank–Nicolson step of `∂t v̄ = P(A v̄) + P(incr / dt)`: per mode the
/// solenoidal direction `e = k⊥/|k|` carries the effective symbol
/// `e₁² σ₁ + e₂² σ₂`.
pub(crate) fn cn_mean<S: Real>(model: &ViscosityModel, mean: &Field2<S>, incr: &Field2<S>, dt: f64) -> Field2<S> {
    let g = mean.grid().clone();
    let (nx, ny) = (g.nx(), g.ny());
    let mut v = forward_transform_2d(mean);
    let inc = forward_transform_2d(incr);
    let half = S::lit(0.5 * dt);
    let zero = Complex::new(S::zero(), S::zero());
    for j in 0..ny {
        for i in 0..nx {
            let idx = i + nx * j;
            if !g.retained(i, j) {
                v.comp_mut(0)[idx] = zero;
                v.comp_mut(1)[idx] = zero;
                continue;
            }
            let (kx, ky) = g.wavenumber(i, j);
            let (kxd, kyd) = (g.kx_d[i], g.ky_d[j]);
            let k2 = kxd * kxd + kyd * kyd;
            if k2 == S::zero() {
                for c in 0..2 {
                    let s = implicit_symbol(model, kx, ky, c);
                    let val = (v.comp(c)[idx] * (S::one() + half * s) + inc.comp(c)[idx]) / (S::one() - half * s);
                    v.comp_mut(c)[idx] = val;
                }
                continue;
            }
            let norm = k2.sqrt();
            let (e1, e2) = (-kyd / norm, kxd / norm);
            let s = e1 * e1 * implicit_symbol(model, kx, ky, 0) + e2 * e2 * implicit_symbol(model, kx, ky, 1);
            let alpha = v.comp(0)[idx] * e1 + v.comp(1)[idx] * e2;
            let forcing = inc.comp(0)[idx] * e1 + inc.comp(1)[idx] * e2;
            let next = (alpha * (S::one() + half * s) + forcing) / (S::one() - half * s);
            v.comp_mut(0)[idx] = next * e1;
            v.comp_mut(1)[idx] = next * e2;
        }
    }
    inverse_transform_2d(&v)
}

/// One Crank–Nicolson step of `∂t f = A f + incr / dt` for a 3D field whose
/// component `c` uses the model symbol of component `c` (scalars use
/// component 0), including the vertical part of `Full` by a column solve.
pub(crate) fn cn_field3<S: Real>(
    model: &ViscosityModel,
    f: &Field3<S>,
    incr: &Field3<S>,
    dt: f64,
    t: f64,
) -> Result<Field3<S>> {
    let g = f.grid().clone();
    let (plane, nz) = (g.plane_len(), g.nz());
    let half = S::lit(0.5 * dt);
    let mut spec = forward_transform(f);
    let inc = forward_transform(incr);
    let vertical = model.vertical();
    let dzz = vertical.map(|(_, closure)| forward_transform(&vertical_second_difference(f, closure)));
    for c in 0..f.ncomp() {
        let table = symbol_plane(model, &g, c.min(1));
        {
            let out = spec.comp_mut(c);
            for k in 0..nz {
                for p in 0..plane {
                    let idx = k * plane + p;
                    let mut r = out[idx] * (S::one() + half * table[p]) + inc.comp(c)[idx];
                    if let (Some((nu, _)), Some(d)) = (vertical, &dzz) {
                        r = r + d.comp(c)[idx] * (half * S::lit(nu));
                    }
                    out[idx] = r;
                }
            }
        }
        match vertical {
            None => {
                let out = spec.comp_mut(c);
                for k in 0..nz {
                    for p in 0..plane {
                        out[k * plane + p] = out[k * plane + p] / (S::one() - half * table[p]);
                    }
                }
            }
            Some((nu, closure)) => {
                let out = spec.comp_mut(c);
                let mut col = vec![Complex::new(S::zero(), S::zero()); nz];
                for p in 0..plane {
                    for k in 0..nz {
                        col[k] = out[k * plane + p];
                    }
                    let alpha = S::one() - half * table[p];
                    if !solve_vertical_column(closure, g.dz(), alpha, half * S::lit(nu), &mut col) {
                        return Err(Error::SingularStep { t });
                    }
                    for k in 0..nz {
                        out[k * plane + p] = col[k];
                    }
                }
            }
        }
    }
    Ok(inverse_transform(&spec))
}

fn blowup_check<S: Real>(split: &SplitState<S>, t: f64, config: &TimestepConfig) -> Result<()> {
    let v = split.reassemble();
    let norm = if v.is_finite() {
        sobolev_norm(&v, 2).as_f64()
    } else {
        f64::INFINITY
    };
    if !(norm <= config.blowup_threshold) {
        return Err(Error::BlowupDetected {
            t,
            norm,
            threshold: config.blowup_threshold,
        });
    }
    Ok(())
}

/// Advances the split state by `dt` with CN on the viscosity, AB2 on the
/// transport and coupling terms (Euler on the first step) and CN-averaged
/// forcing; `v̄` is projected and `ṽ` re-made mean-free afterwards.
fn advance<S: Real>(
    split: &SplitState<S>,
    now: &Tendency<S>,
    prev: Option<&(Tendency<S>, f64)>,
    model: &ViscosityModel,
    dt: f64,
    t: f64,
    forcing: Option<&SplitForcing<S>>,
) -> Result<SplitState<S>> {
    let mut e = extrapolate(now, prev, dt);
    if let Some(force) = forcing {
        let half = S::lit(0.5);
        add_tendency(&mut e, half, &force(t));
        add_tendency(&mut e, half, &force(t + dt));
    }
    let dts = S::lit(dt);
    let mean = cn_mean(model, &split.mean, &e.mean_rhs.scaled(dts), dt);
    let fluct = cn_field3(model, &split.fluct, &e.fluct_rhs.scaled(dts), dt, t)?;
    Ok(SplitState {
        mean: leray_project(&mean),
        fluct: remove_vertical_mean(&fluct),
    })
}

/// One IMEX step of size `dt`.
pub fn imex_step<S: Real>(
    state: &SolverState<S>,
    model: &ViscosityModel,
    dt: f64,
    config: &TimestepConfig,
) -> Result<SolverState<S>> {
    imex_step_forced(state, model, dt, config, None)
}

pub fn imex_step_forced<S: Real>(
    state: &SolverState<S>,
    model: &ViscosityModel,
    dt: f64,
    config: &TimestepConfig,
    forcing: Option<&SplitForcing<S>>,
) -> Result<SolverState<S>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {dt}")));
    }
    check_cfl(state, config, dt)?;
    let now = transport_tendency(&state.split)?;
    let split = advance(&state.split, &now, state.prev.as_ref(), model, dt, state.t, forcing)?;
    let t = state.t + dt;
    blowup_check(&split, t, config)?;
    SolverState::assemble(split, t, state.step + 1, model, Some((now, dt)))
}

/// Uniform grid of `n` steps covering `[0, t_end]` with steps no larger than
/// `dt`.
pub fn uniform_steps(t_end: f64, dt: f64) -> (usize, f64) {
    let n = ((t_end / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    (n, t_end / n as f64)
}

/// IMEX trajectory on a fixed uniform time grid, including the initial state.
pub fn imex_trajectory<S: Real>(
    initial: &SolverState<S>,
    model: &ViscosityModel,
    dt: f64,
    steps: usize,
    config: &TimestepConfig,
    forcing: Option<&SplitForcing<S>>,
) -> Result<Vec<SolverState<S>>> {
    let mut out = vec![initial.clone()];
    for _ in 0..steps {
        let next = imex_step_forced(out.last().expect("nonempty"), model, dt, config, forcing)?;
        out.push(next);
    }
    Ok(out)
}

/// Iterates of the Picard construction and the converged trajectory.
#[derive(Clone, Debug)]
pub struct PicardResult<S: Real> {
    pub times: Vec<f64>,
    pub trajectory: Vec<SplitState<S>>,
    pub iterations: usize,
    /// `max_t ‖v_n − v_{n−1}‖_{H¹}` per iteration.
    pub increments: Vec<f64>,
    /// `max_t max |w_corrected − w_uncorrected|` at the fixed point.
    pub w_gap: f64,
}

fn linearized_tendency<S: Real>(coef: &SplitState<S>, w_coef: &Field3<S>, k_coef: &Field2<S>, cur: &SplitState<S>) -> Tendency<S> {
    let mut mean_rhs = advect_horizontal_2d(&coef.mean, &cur.mean);
    mean_rhs.axpy(S::one(), k_coef);
    mean_rhs.scale(-S::one());

    let mean3 = Field3::extend(&cur.mean);
    let coef_mean3 = Field3::extend(&coef.mean);
    let mut f = advect_horizontal(&coef.fluct, &cur.fluct);
    f.axpy(S::one(), &advect_horizontal(&coef_mean3, &cur.fluct));
    f.axpy(S::one(), &advect_horizontal(&coef.fluct, &mean3));
    f.axpy(S::one(), &advect_vertical(w_coef, &cur.fluct));
    f.scale(-S::one());
    f.axpy(S::one(), &Field3::extend(k_coef));
    Tendency {
        mean_rhs,
        fluct_rhs: f,
    }
}

fn picard_sweep<S: Real>(
    initial: &SplitState<S>,
    coef: &[SplitState<S>],
    model: &ViscosityModel,
    dt: f64,
) -> Result<Vec<SplitState<S>>> {
    let mut out = Vec::with_capacity(coef.len());
    out.push(initial.clone());
    let mut prev: Option<(Tendency<S>, f64)> = None;
    for m in 0..coef.len() - 1 {
        let c = &coef[m];
        let w = reconstruct_w_corrected(&c.fluct);
        let k = coupling_k_unchecked(&c.fluct);
        let now = linearized_tendency(c, &w, &k, &out[m]);
        let next = advance(&out[m], &now, prev.as_ref(), model, dt, m as f64 * dt, None)?;
        prev = Some((now, dt));
        out.push(next);
    }
    Ok(out)
}

/// Picard construction on `[0, t_end]`: iterate `n` solves the linear
/// barotropic and baroclinic problems with coefficients `(v̄, ṽ, w)` from
/// iterate `n − 1`, `w` from the corrected reconstruction, starting from zero.
/// Each linear problem is discretized exactly like [`imex_step`] on a uniform
/// time grid, so the fixed point is the IMEX trajectory on that grid.
pub fn picard_solve<S: Real>(
    v0: &Field3<S>,
    model: &ViscosityModel,
    t_end: f64,
    config: &TimestepConfig,
) -> Result<PicardResult<S>> {
    let state = SolverState::from_velocity(v0, model)?;
    let dt = cfl_dt(&state, config);
    let (steps, dt) = uniform_steps(t_end, dt);
    picard_solve_on(&state.split, model, dt, steps, config)
}

pub fn picard_solve_on<S: Real>(
    initial: &SplitState<S>,
    model: &ViscosityModel,
    dt: f64,
    steps: usize,
    config: &TimestepConfig,
) -> Result<PicardResult<S>> {
    if !model.supports_picard() {
        return Err(Error::InvalidArgument(format!(
            "Picard iteration needs the full horizontal Laplacian, got model {model}"
        )));
    }
    let initial = prepare_split(initial);
    let g = initial.fluct.grid().clone();
    let mut iterate = vec![SplitState::zeros(&g); steps + 1];
    let mut increments: Vec<f64> = Vec::new();
    let mut rising = 0usize;
    for it in 1..=config.picard_max_iters {
        let next = picard_sweep(&initial, &iterate, model, dt)?;
        let (mut inc, mut scale) = (0.0f64, 0.0f64);
        for (a, b) in next.iter().zip(&iterate) {
            let va = a.reassemble();
            inc = inc.max(sobolev_norm(&va.sub(&b.reassemble()), 1).as_f64());
            scale = scale.max(sobolev_norm(&va, 1).as_f64());
        }
        if !inc.is_finite() {
            return Err(Error::NoContraction {
                iterations: it,
                increment: inc,
            });
        }
        if let Some(&last) = increments.last() {
            rising = if inc >= last { rising + 1 } else { 0 };
        }
        increments.push(inc);
        iterate = next;
        if inc <= config.picard_tol * scale {
            let w_gap = iterate
                .iter()
                .map(|s| {
                    reconstruct_w_corrected(&s.fluct)
                        .max_diff(&reconstruct_w_unchecked(&s.fluct))
                        .as_f64()
                })
                .fold(0.0, f64::max);
            return Ok(PicardResult {
                times: (0..=steps).map(|m| m as f64 * dt).collect(),
                trajectory: iterate,
                iterations: it,
                increments,
                w_gap,
            });
        }
        if rising >= 5 {
            return Err(Error::NoContraction {
                iterations: it,
                increment: inc,
            });
        }
    }
    Err(Error::NoContraction {
        iterations: config.picard_max_iters,
        increment: increments.last().copied().unwrap_or(f64::NAN),
    })
}

/// Run-loop knobs that are not part of the time-step configuration.
#[derive(Clone, Default)]
pub struct RunOptions<S: Real> {
    /// Diagnostics cadence in steps; 0 records only the first and last state.
    pub diag_every: usize,
    /// Band parameter for Rayleigh monitoring.
    pub eta: Option<f64>,
    /// Stop once the drift of `∂zz v` exceeds the band slack at `2η`.
    pub stop_on_certificate: bool,
    pub forcing: Option<SplitForcing<S>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunOutcome {
    Completed,
    /// The `2η` persistence certificate expired at this time.
    CertificateExpired { t: f64 },
}

/// Persistence window for the Rayleigh band: valid while the drift of `∂zz v`
/// stays below `slack`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Certificate {
    pub eta: f64,
    pub slack: f64,
    pub initial_pass: bool,
}

pub struct RunResult<S: Real> {
    pub state: SolverState<S>,
    pub initial: SplitState<S>,
    pub records: Vec<DiagnosticsRecord>,
    pub certificate: Option<Certificate>,
    /// `Ok` on normal termination; the error that stopped the run otherwise.
    pub outcome: Result<RunOutcome>,
}

/// Steps from `initial.t` to `config.t_end` with CFL-limited steps. The
/// observer sees every accepted state and its record when one is taken; an
/// observer error stops the run.
pub fn run<S: Real>(
    initial: SolverState<S>,
    model: &ViscosityModel,
    config: &TimestepConfig,
    options: &RunOptions<S>,
    mut observer: impl FnMut(&SolverState<S>, Option<&DiagnosticsRecord>) -> Result<()>,
) -> RunResult<S> {
    let start = initial.split.clone();
    let certificate = options.eta.map(|eta| {
        let dz = crate::calculus::apply_derivative(&start.reassemble(), crate::calculus::Axis::Z, 1);
        Certificate {
            eta,
            slack: band_slack(&start, eta),
            initial_pass: crate::diagnostics::rayleigh_check(&dz, eta).pass(),
        }
    });
    let mut records = Vec::new();
    let mut state = initial;
    let record = |s: &SolverState<S>, dt: f64| DiagnosticsRecord::evaluate(s.t, dt, &s.split, &start, model, options.eta);

    let mut outcome = (|| -> Result<RunOutcome> {
        let r = record(&state, 0.0)?;
        observer(&state, Some(&r))?;
        records.push(r);
        let tol = 1e-12 * config.t_end.max(1.0);
        while state.t < config.t_end - tol {
            let dt = cfl_dt(&state, config).min(config.t_end - state.t);
            let next = imex_step_forced(&state, model, dt, config, options.forcing.as_ref())?;
            state = next;
            let last = state.t >= config.t_end - tol;
            let take = last || (options.diag_every > 0 && state.step % options.diag_every == 0);
            let expired = match certificate {
                Some(c) if c.initial_pass && options.stop_on_certificate => {
                    rayleigh_drift(&state.split, &start).as_f64() > c.slack
                }
                _ => false,
            };
            if take || expired {
                let r = record(&state, dt)?;
                observer(&state, Some(&r))?;
                records.push(r);
            } else {
                observer(&state, None)?;
            }
            if expired {
                return Ok(RunOutcome::CertificateExpired { t: state.t });
            }
        }
        Ok(RunOutcome::Completed)
    })();
    if let Ok(RunOutcome::Completed) = outcome {
        if records.is_empty() {
            outcome = Err(Error::InvalidArgument("run produced no records".into()));
        }
    }
    RunResult {
        state,
        initial: start,
        records,
        certificate,
        outcome,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{DomainSpec, Grid};
    use crate::nonlinear::assemble_rhs;
    use std::f64::consts::PI;

    fn grid(n: usize, nz: usize) -> Arc<Grid<f64>> {
        Grid::new(DomainSpec::new(1.0, n, n, nz).unwrap()).unwrap()
    }

    fn shear(g: &Arc<Grid<f64>>, amp: f64) -> SplitState<f64> {
        SplitState {
            mean: Field2::from_fn(g, 2, |c, _, y| if c == 0 { amp * (PI * y).sin() } else { 0.0 }),
            fluct: Field3::zeros(g, 2),
        }
    }

    #[test]
    fn cfl_examples() {
        let g = grid(64, 5);
        let cfg = TimestepConfig {
            dt_max: 1e9,
            ..Default::default()
        };
        let zero = SolverState::from_split(SplitState::zeros(&g), 0.0, &ViscosityModel::Horizontal).unwrap();
        assert_eq!(cfl_dt(&zero, &cfg), 1e9);
        let mut s = zero.clone();
        s.split.mean = Field2::from_fn(&g, 2, |c, _, _| if c == 0 { 1.0 } else { 0.0 });
        assert!((cfl_dt(&s, &cfg) - 1.0 / 64.0).abs() < 1e-15);
        s.split.mean.scale(2.0);
        assert!((cfl_dt(&s, &cfg) - 1.0 / 128.0).abs() < 1e-15);
        assert!(matches!(imex_step(&s, &ViscosityModel::Horizontal, 0.1, &cfg), Err(Error::CflViolation { .. })));
    }

    #[test]
    fn zero_state_is_fixed() {
        let g = grid(8, 9);
        let cfg = TimestepConfig::default();
        for model in [ViscosityModel::Horizontal, ViscosityModel::HalfPerp, ViscosityModel::Inviscid] {
            let s = SolverState::from_split(SplitState::zeros(&g), 0.0, &model).unwrap();
            let n = imex_step(&s, &model, 0.01, &cfg).unwrap();
            assert_eq!(n.split.reassemble().max_abs(), 0.0);
        }
    }

    #[test]
    fn shear_decays_at_second_order() {
        let g = grid(16, 5);
        let cfg = TimestepConfig {
            dt_max: 1.0,
            ..Default::default()
        };
        let model = ViscosityModel::Horizontal;
        let t_end = 0.2;
        let err = |steps: usize| {
            let s = SolverState::from_split(shear(&g, 1.0), 0.0, &model).unwrap();
            let traj = imex_trajectory(&s, &model, t_end / steps as f64, steps, &cfg, None).unwrap();
            let exact = shear(&g, (-PI * PI * t_end).exp()).mean;
            traj.last().unwrap().split.mean.max_diff(&exact)
        };
        let (e1, e2) = (err(10), err(20));
        let order = (e1 / e2).log2();
        assert!((order - 2.0).abs() < 0.2, "{order}");
    }

    #[test]
    fn single_step_matches_assembled_rhs() {
        let g = grid(16, 17);
        let model = ViscosityModel::Inviscid;
        let cfg = TimestepConfig::default();
        let delta = 1e-3;
        let fl = Field3::from_fn(&g, 2, |c, x, _, z| if c == 0 { delta * (PI * x).cos() * (PI * z).sin() } else { 0.0 });
        let s = SolverState::from_split(SplitState { mean: Field2::zeros(&g, 2), fluct: fl }, 0.0, &model).unwrap();
        let dt = 1e-3;
        let n = imex_step(&s, &model, dt, &cfg).unwrap();
        let rhs = assemble_rhs(&s.split, &model).unwrap();
        let growth = n.split.fluct.sub(&s.split.fluct).scaled(1.0 / dt);
        assert!(growth.max_diff(&rhs.fluct_rhs) < 1e-12 + 1e-6 * rhs.fluct_rhs.max_abs());
        let mg = n.split.mean.sub(&s.split.mean).scaled(1.0 / dt);
        assert!(mg.max_diff(&rhs.mean_rhs) < 1e-12);
    }

    #[test]
    fn full_model_steps_with_both_closures() {
        use crate::viscosity::VerticalClosure;
        let g = grid(8, 17);
        let cfg = TimestepConfig::default();
        for closure in [VerticalClosure::OneSided, VerticalClosure::Neumann] {
            let model = ViscosityModel::Full {
                nu_h: 1.0,
                nu_v: 0.5,
                closure,
            };
            // cos(π(z+1)) has zero mean and zero slope at the walls
            let fl = Field3::from_fn(&g, 2, |c, x, _, z| if c == 0 { 0.01 * (PI * x).sin() * (PI * (z + 1.0)).cos() } else { 0.0 });
            let s = SolverState::from_split(SplitState { mean: Field2::zeros(&g, 2), fluct: fl.clone() }, 0.0, &model).unwrap();
            let mut cur = s;
            for _ in 0..20 {
                cur = imex_step(&cur, &model, 1e-3, &cfg).unwrap();
            }
            // the linear decay rate dominates: π² + ν π²
            let rate = PI * PI * 1.5;
            let ratio = cur.split.fluct.l2_norm() / fl.l2_norm();
            assert!((ratio - (-rate * 0.02f64).exp()).abs() < 5e-3, "{closure:?} {ratio}");
        }
    }

    #[test]
    fn blowup_threshold_trips() {
        let g = grid(8, 5);
        let model = ViscosityModel::Inviscid;
        let cfg = TimestepConfig {
            blowup_threshold: 1e-3,
            ..Default::default()
        };
        let s = SolverState::from_split(shear(&g, 1.0), 0.0, &model).unwrap();
        assert!(matches!(imex_step(&s, &model, 1e-3, &cfg), Err(Error::BlowupDetected { .. })));
    }

    #[test]
    fn picard_zero_and_forced_failure() {
        let g = grid(8, 9);
        let model = ViscosityModel::Horizontal;
        let cfg = TimestepConfig {
            dt_max: 0.01,
            ..Default::default()
        };
        let r = picard_solve(&Field3::zeros(&g, 2), &model, 0.05, &cfg).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.trajectory.iter().all(|s| s.reassemble().max_abs() == 0.0));

        let big = Field3::from_fn(&g, 2, |c, x, y, z| {
            if c == 0 {
                5.0 * (PI * y).sin() * z
            } else {
                5.0 * (PI * x).cos() * (1.0 + z * z)
            }
        });
        let tight = TimestepConfig {
            picard_max_iters: 2,
            ..cfg
        };
        assert!(matches!(picard_solve(&big, &model, 0.05, &tight), Err(Error::NoContraction { .. })));
        assert!(picard_solve(&big, &ViscosityModel::HalfPerp, 0.05, &cfg).is_err());
    }

    #[test]
    fn picard_fixed_point_is_imex_trajectory() {
        let g = grid(8, 9);
        let model = ViscosityModel::Horizontal;
        let cfg = TimestepConfig {
            dt_max: 0.005,
            ..Default::default()
        };
        let v0 = Field3::from_fn(&g, 2, |c, x, y, z| {
            if c == 0 {
                0.2 * (PI * y).sin() * (1.0 + 0.5 * z)
            } else {
                0.2 * (PI * x).cos() * z * z
            }
        });
        let r = picard_solve(&v0, &model, 0.05, &cfg).unwrap();
        let s = SolverState::from_velocity(&v0, &model).unwrap();
        let dt = r.times[1];
        let traj = imex_trajectory(&s, &model, dt, r.times.len() - 1, &cfg, None).unwrap();
        for (a, b) in r.trajectory.iter().zip(&traj) {
            let (va, vb) = (a.reassemble(), b.split.reassemble());
            assert!(va.sub(&vb).l2_norm() < 1e-9 * vb.l2_norm());
        }
        assert!(r.w_gap < 1e-12);
    }

    #[test]
    fn run_shear_decay_and_zero_run() {
        let g = grid(16, 5);
        let model = ViscosityModel::Horizontal;
        let cfg = TimestepConfig {
            dt_max: 0.01,
            t_end: 0.5,
            ..Default::default()
        };
        let s = SolverState::from_split(shear(&g, 1.0), 0.0, &model).unwrap();
        let mut seen = 0;
        let res = run(s, &model, &cfg, &RunOptions { diag_every: 10, ..Default::default() }, |_, _| {
            seen += 1;
            Ok(())
        });
        assert_eq!(res.outcome.unwrap(), RunOutcome::Completed);
        assert!((res.state.t - 0.5).abs() < 1e-12);
        let amp = res.state.split.mean.max_abs();
        assert!((amp - (-PI * PI / 2.0).exp()).abs() < 1e-3);
        assert_eq!(seen, res.state.step + 1);
        assert!(res.records.len() >= 6);

        let z = SolverState::from_split(SplitState::zeros(&g), 0.0, &model).unwrap();
        let res = run(z, &model, &TimestepConfig { t_end: 0.05, ..cfg }, &RunOptions::default(), |_, _| Ok(()));
        assert!(res.outcome.is_ok());
        for r in &res.records {
            assert!(r.residuals.div_mean < 1e-12 && r.residuals.fluct_mean < 1e-12 && r.residuals.w_boundary < 1e-12);
        }
    }
}
