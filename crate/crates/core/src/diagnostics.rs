//! Sobolev and Rayleigh-weighted norms, Rayleigh monitoring, invariant
//! residuals, energy budget and the anisotropic product estimate.

use std::fmt;

use crate::calculus::{
    apply_derivative, div_h_2d, mean_residual, mixed_derivative, reconstruct_w_unchecked, Axis,
    SplitState,
};
use crate::error::{Error, Result};
use crate::grid::Field3;
use crate::nonlinear::coupling_k;
use crate::viscosity::{apply_viscosity, ViscosityModel};
use crate::Real;

/// Cap on `1 / |·|` used by the Rayleigh band checks.
pub const W_MAX: f64 = 1e8;

/// How the terms of a Sobolev norm are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SobolevConvention {
    /// `Σ_{|α| ≤ s} ‖∂^α f‖`.
    #[default]
    Sum,
    /// `(Σ_{|α| ≤ s} ‖∂^α f‖²)^{1/2}`.
    RootSumSquare,
}

fn multi_indices(order: u32) -> impl Iterator<Item = (u32, u32, u32)> {
    (0..=order).flat_map(move |a| (0..=order - a).map(move |b| (a, b, order - a - b)))
}

/// `‖f‖_{H^s(Ω)}` in the sum convention.
pub fn sobolev_norm<S: Real>(f: &Field3<S>, s: u32) -> S {
    sobolev_norm_with(f, s, SobolevConvention::Sum)
}

pub fn sobolev_norm_with<S: Real>(f: &Field3<S>, s: u32, conv: SobolevConvention) -> S {
    let mut acc = S::zero();
    for order in 0..=s {
        for (a, b, c) in multi_indices(order) {
            let n = mixed_derivative(f, a, b, c).l2_norm();
            acc += match conv {
                SobolevConvention::Sum => n,
                SobolevConvention::RootSumSquare => n * n,
            };
        }
    }
    match conv {
        SobolevConvention::Sum => acc,
        SobolevConvention::RootSumSquare => acc.sqrt(),
    }
}

/// Grid location `(component, i, j, k)`.
pub type Locus = (usize, usize, usize, usize);

fn locus(grid_nx: usize, grid_ny: usize, comp: usize, idx: usize) -> Locus {
    let i = idx % grid_nx;
    let j = (idx / grid_nx) % grid_ny;
    let k = idx / (grid_nx * grid_ny);
    (comp, i, j, k)
}

/// Band check failure: extrema of the capped reciprocal and where they occur.
#[derive(Clone, Debug, PartialEq)]
pub struct RayleighViolated {
    pub min_inv: f64,
    pub max_inv: f64,
    pub argmin: Locus,
    pub argmax: Locus,
}

impl fmt::Display for RayleighViolated {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Rayleigh band violated: 1/|.| ranges over [{:.3e}, {:.3e}] (min at {:?}, max at {:?})",
            self.min_inv, self.max_inv, self.argmin, self.argmax
        )
    }
}

impl std::error::Error for RayleighViolated {}

/// Extrema of `min(1 / |x|, W_MAX)` over one component.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentBand {
    pub min_inv: f64,
    pub max_inv: f64,
    pub argmin: Locus,
    pub argmax: Locus,
    pub pass: bool,
}

fn band<S: Real>(f: &Field3<S>, comp: usize, eta: f64) -> ComponentBand {
    let g = f.grid();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut alo, mut ahi) = (0, 0);
    for (idx, &v) in f.comp(comp).iter().enumerate() {
        let a = v.as_f64().abs();
        let inv = if a * W_MAX <= 1.0 { W_MAX } else { 1.0 / a };
        if inv < lo {
            lo = inv;
            alo = idx;
        }
        if inv > hi {
            hi = inv;
            ahi = idx;
        }
    }
    let capped = hi >= W_MAX;
    ComponentBand {
        min_inv: lo,
        max_inv: hi,
        argmin: locus(g.nx(), g.ny(), comp, alo),
        argmax: locus(g.nx(), g.ny(), comp, ahi),
        pass: !capped && lo >= 1.0 / eta && hi <= eta,
    }
}

/// Weighted norm `‖f‖_{H^s_η}`: `‖f‖²_{H^{s−1}} + ‖∂z^s f‖² + Σ_{|α|=s, α₃=0}
/// ‖∂^α f / √|∂z f|‖²`, or the band violation when `1/|∂z f|` leaves
/// `[1/η, η]` anywhere.
pub fn eta_norm<S: Real>(f: &Field3<S>, s: u32, eta: f64) -> std::result::Result<S, RayleighViolated> {
    let dz = apply_derivative(f, Axis::Z, 1);
    for c in 0..f.ncomp() {
        let b = band(&dz, c, eta);
        if !b.pass {
            return Err(RayleighViolated {
                min_inv: b.min_inv,
                max_inv: b.max_inv,
                argmin: b.argmin,
                argmax: b.argmax,
            });
        }
    }
    let lower = if s == 0 { S::zero() } else { sobolev_norm(f, s - 1) };
    let top = mixed_derivative(f, 0, 0, s).l2_norm();
    let mut weighted = S::zero();
    for a in 0..=s {
        let d = mixed_derivative(f, a, s - a, 0);
        let comps = d
            .comps()
            .iter()
            .zip(dz.comps())
            .map(|(dc, wc)| dc.iter().zip(wc).map(|(&x, &w)| x / w.abs().sqrt()).collect())
            .collect();
        let q = Field3::from_comps(f.grid(), comps).expect("shape preserved");
        weighted += q.inner(&q);
    }
    Ok((lower * lower + top * top + weighted).sqrt())
}

/// Per-component Rayleigh band of `∂zz v`, computed from `∂z v`.
#[derive(Clone, Debug, PartialEq)]
pub struct RayleighReport {
    pub eta: f64,
    pub components: Vec<ComponentBand>,
}

impl RayleighReport {
    pub fn pass(&self) -> bool {
        self.components.iter().all(|c| c.pass)
    }
}

/// Checks `1/η ≤ 1/|∂zz v_i| ≤ η` at every node, given `dz_v = ∂z v`.
pub fn rayleigh_check<S: Real>(dz_v: &Field3<S>, eta: f64) -> RayleighReport {
    let dzz = apply_derivative(dz_v, Axis::Z, 1);
    RayleighReport {
        eta,
        components: (0..dzz.ncomp()).map(|c| band(&dzz, c, eta)).collect(),
    }
}

/// `∂zz v` as the first-derivative stencil applied twice, the operator used by
/// [`rayleigh_check`].
pub fn curvature<S: Real>(v: &Field3<S>) -> Field3<S> {
    apply_derivative(&apply_derivative(v, Axis::Z, 1), Axis::Z, 1)
}

/// `sup |∂zz v(t) − ∂zz v(0)|` of the reassembled velocities.
pub fn rayleigh_drift<S: Real>(state: &SplitState<S>, initial: &SplitState<S>) -> S {
    curvature(&state.reassemble()).max_diff(&curvature(&initial.reassemble()))
}

/// Distance of `|∂zz v₀|` from the edges of the `2η` band, minimised over the
/// grid: while the drift stays below it, the band check at `2η` cannot fail.
pub fn band_slack<S: Real>(initial: &SplitState<S>, eta: f64) -> f64 {
    let c = curvature(&initial.reassemble());
    let (lo, hi) = (1.0 / (2.0 * eta), 2.0 * eta);
    c.comps()
        .iter()
        .flatten()
        .map(|v| {
            let a = v.as_f64().abs();
            (a - lo).min(hi - a)
        })
        .fold(f64::INFINITY, f64::min)
}

/// Constraint residuals of a split state.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Residuals {
    /// `‖div_H v̄‖_{L²(G)}`.
    pub div_mean: f64,
    /// `‖vertical_average(ṽ)‖_{L²(Ω)}`.
    pub fluct_mean: f64,
    /// `max |w|` over `z = ±h`.
    pub w_boundary: f64,
    /// `max |∂z v|` over `z = ±h`.
    pub neumann: f64,
}

pub fn invariant_residuals<S: Real>(state: &SplitState<S>) -> Residuals {
    let w = reconstruct_w_unchecked(&state.fluct);
    let dz = apply_derivative(&state.reassemble(), Axis::Z, 1);
    Residuals {
        div_mean: div_h_2d(&state.mean).l2_norm().as_f64(),
        fluct_mean: mean_residual(&state.fluct).0.as_f64(),
        w_boundary: w.boundary_max_abs(false).max(w.boundary_max_abs(true)).as_f64(),
        neumann: dz.boundary_max_abs(false).max(dz.boundary_max_abs(true)).as_f64(),
    }
}

/// Kinetic energy and the rates that change it.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyBudget {
    /// `½ ‖v‖²`.
    pub kinetic: f64,
    /// `⟨A v, v⟩`, nonpositive for every model.
    pub dissipation: f64,
    /// `−2h ⟨K(ṽ), v̄⟩_G`, the rate at which the baroclinic mode feeds the
    /// barotropic one.
    pub transfer: f64,
}

pub fn energy_budget<S: Real>(state: &SplitState<S>, model: &ViscosityModel) -> Result<EnergyBudget> {
    let v = state.reassemble();
    let g = v.grid();
    let k = coupling_k(&state.fluct)?;
    let two_h = S::lit(2.0) * g.half_height();
    Ok(EnergyBudget {
        kinetic: (S::lit(0.5) * v.inner(&v)).as_f64(),
        dissipation: apply_viscosity(model, &v).inner(&v).as_f64(),
        transfer: (-two_h * k.inner(&state.mean)).as_f64(),
    })
}

/// Outcome of the anisotropic product estimate on one triple.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimateReport {
    pub lhs: f64,
    pub rhs: f64,
    /// `lhs / rhs`, zero when both vanish.
    pub ratio: f64,
}

/// `|⟨f g, hh⟩| / (‖f‖ ‖g‖_{H¹} (‖∇_H hh‖^{1/2} ‖hh‖^{1/2} + ‖hh‖))` for scalar
/// fields.
pub fn anisotropic_estimate_check<S: Real>(f: &Field3<S>, g: &Field3<S>, hh: &Field3<S>) -> Result<EstimateReport> {
    for (name, x) in [("f", f), ("g", g), ("hh", hh)] {
        if x.ncomp() != 1 {
            return Err(Error::Shape(format!("{name} must be scalar")));
        }
        if !x.is_finite() {
            return Err(Error::InvalidArgument(format!("{name} has non-finite values")));
        }
    }
    let fg = Field3::from_comps(
        f.grid(),
        vec![f.comp(0).iter().zip(g.comp(0)).map(|(&a, &b)| a * b).collect()],
    )
    .expect("shape preserved");
    let lhs = fg.inner(hh).abs();
    let hx = apply_derivative(hh, Axis::X, 1);
    let hy = apply_derivative(hh, Axis::Y, 1);
    let grad = (hx.inner(&hx) + hy.inner(&hy)).sqrt();
    let hn = hh.l2_norm();
    let rhs = f.l2_norm() * sobolev_norm(g, 1) * ((grad * hn).sqrt() + hn);
    let (lhs, rhs) = (lhs.as_f64(), rhs.as_f64());
    let ratio = if rhs > 0.0 {
        lhs / rhs
    } else if lhs == 0.0 {
        0.0
    } else {
        return Err(Error::DegenerateRhs { lhs });
    };
    Ok(EstimateReport { lhs, rhs, ratio })
}

/// One row of the diagnostics time series.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsRecord {
    pub t: f64,
    pub dt: f64,
    /// `(field tag, s, ‖·‖_{H^s})`.
    pub sobolev: Vec<(&'static str, u32, f64)>,
    pub residuals: Residuals,
    pub rayleigh: Option<RayleighReport>,
    /// The same band evaluated at `2η`.
    pub rayleigh_relaxed: Option<RayleighReport>,
    /// `‖∂z v‖_{H^3_η}`, absent when the band is violated or not monitored.
    pub eta_norm: Option<f64>,
    pub rayleigh_drift: f64,
    pub energy: EnergyBudget,
}

/// Orders reported in [`DiagnosticsRecord::sobolev`].
pub const SOBOLEV_ORDERS: [u32; 3] = [0, 1, 2];

impl DiagnosticsRecord {
    /// Evaluates every diagnostic on `state`; `initial` anchors the drift.
    pub fn evaluate<S: Real>(
        t: f64,
        dt: f64,
        state: &SplitState<S>,
        initial: &SplitState<S>,
        model: &ViscosityModel,
        eta: Option<f64>,
    ) -> Result<Self> {
        let v = state.reassemble();
        let mut sobolev = Vec::new();
        for s in SOBOLEV_ORDERS {
            sobolev.push(("v", s, sobolev_norm(&v, s).as_f64()));
        }
        sobolev.push(("mean", 0, state.mean.l2_norm().as_f64()));
        sobolev.push(("fluct", 0, state.fluct.l2_norm().as_f64()));
        let (rayleigh, rayleigh_relaxed, eta_norm) = match eta {
            Some(eta) => {
                let dz = apply_derivative(&v, Axis::Z, 1);
                let r = rayleigh_check(&dz, eta);
                let r2 = rayleigh_check(&dz, 2.0 * eta);
                let en = if v.grid().nz() >= 9 {
                    eta_norm(&dz, 3, eta).ok().map(|x| x.as_f64())
                } else {
                    None
                };
                (Some(r), Some(r2), en)
            }
            None => (None, None, None),
        };
        Ok(DiagnosticsRecord {
            t,
            dt,
            sobolev,
            residuals: invariant_residuals(state),
            rayleigh,
            rayleigh_relaxed,
            eta_norm,
            rayleigh_drift: rayleigh_drift(state, initial).as_f64(),
            energy: energy_budget(state, model)?,
        })
    }

    /// `‖v‖_{H²}`, the blow-up surrogate.
    pub fn surrogate_norm(&self) -> f64 {
        self.sobolev
            .iter()
            .find(|&&(tag, s, _)| tag == "v" && s == 2)
            .map_or(0.0, |&(_, _, n)| n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::split_modes;
    use crate::grid::{DomainSpec, Field2, Grid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn grid(n: usize, nz: usize) -> Arc<Grid<f64>> {
        Grid::new(DomainSpec::new(1.0, n, n, nz).unwrap()).unwrap()
    }

    #[test]
    fn sobolev_examples() {
        let g = grid(16, 9);
        assert_eq!(sobolev_norm(&Field3::zeros(&g, 1), 2), 0.0);
        let f = Field3::scalar_fn(&g, |x, _, _| (PI * x).sin());
        assert!((sobolev_norm(&f, 1) - (2.0 + 2.0 * PI)).abs() < 1e-12);
        assert!((sobolev_norm(&f, 0) - f.l2_norm()).abs() < 1e-12);
        let rss = sobolev_norm_with(&f, 1, SobolevConvention::RootSumSquare);
        assert!((rss - (4.0 + 4.0 * PI * PI).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn sobolev_is_monotone_in_order() {
        let g = grid(8, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..4 {
            let f = Field3::from_comps(&g, vec![(0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()]).unwrap();
            for s in 0..3 {
                assert!(sobolev_norm(&f, s + 1) >= sobolev_norm(&f, s));
            }
        }
    }

    #[test]
    fn eta_norm_examples() {
        let g = grid(8, 17);
        let crossing = Field3::scalar_fn(&g, |_, _, z| z * z + z);
        assert!(eta_norm(&crossing, 3, 4.0).is_err());

        let unit = Field3::scalar_fn(&g, |x, y, z| z + 0.1 * (PI * x).sin() * (PI * y).cos());
        let n = eta_norm(&unit, 3, 2.0).unwrap();
        let lower = sobolev_norm(&unit, 2);
        let top = mixed_derivative(&unit, 0, 0, 3).l2_norm();
        let weighted: f64 = (0..=3)
            .map(|a| {
                let d = mixed_derivative(&unit, a, 3 - a, 0);
                d.inner(&d)
            })
            .sum();
        assert!((n - (lower * lower + top * top + weighted).sqrt()).abs() < 1e-9 * n);
    }

    #[test]
    fn eta_norm_weight_is_banded() {
        // ∂z f = z² + 2 ∈ [2, 3]
        let g = grid(8, 33);
        let f = Field3::scalar_fn(&g, |x, _, z| z * z * z / 3.0 + 2.0 * z + 0.2 * (PI * x).cos());
        let n = eta_norm(&f, 3, 4.0).unwrap();
        let lower = sobolev_norm(&f, 2);
        let top = mixed_derivative(&f, 0, 0, 3).l2_norm();
        let weighted = n * n - lower * lower - top * top;
        let plain: f64 = (0..=3)
            .map(|a| {
                let d = mixed_derivative(&f, a, 3 - a, 0);
                d.inner(&d)
            })
            .sum();
        assert!(weighted >= plain / 3.0 * (1.0 - 1e-9));
        assert!(weighted <= plain / 2.0 * (1.0 + 1e-9));
        // fine-grid oracle: the weighted part is ∫ (π³ · 0.2)² sin²(πx) / (z² + 2)
        let exact = (0.2 * PI.powi(3)).powi(2) * 2.0 * (2.0 / 2f64.sqrt()) * (1.0 / 2f64.sqrt()).atan();
        assert!((weighted - exact).abs() < 1e-4 * exact, "{weighted} vs {exact}");
    }

    #[test]
    fn rayleigh_examples() {
        let g = grid(4, 17);
        let r = rayleigh_check(&Field3::scalar_fn(&g, |_, _, z| 2.0 * z), 2.0);
        assert!(r.pass());
        assert!((r.components[0].min_inv - 0.5).abs() < 1e-12);
        let r = rayleigh_check(&Field3::scalar_fn(&g, |_, _, z| 1.5 * z * z), 1e6);
        assert!(!r.pass());
        assert_eq!(r.components[0].max_inv, W_MAX);
        let cubic = Field3::scalar_fn(&g, |_, _, z| z + 4.0 * z * z * z);
        assert!(!rayleigh_check(&cubic, 12.5).pass());
        let r = rayleigh_check(&cubic, 13.0 + 1e-9);
        assert!(r.pass());
        assert!((r.components[0].min_inv - 1.0 / 13.0).abs() < 1e-10);
        assert!((r.components[0].max_inv - 1.0).abs() < 1e-10);
        assert_eq!(r.components[0].argmax.3, 8);
    }

    #[test]
    fn drift_examples() {
        let g = grid(8, 9);
        let v0 = Field3::from_fn(&g, 2, |c, x, _, z| (PI * x).sin() * z + c as f64 * z.powi(3));
        let s0 = split_modes(&v0);
        assert_eq!(rayleigh_drift(&s0, &s0), 0.0);
        let (t, c) = (0.3, -1.7);
        let v1 = v0.add(&Field3::from_fn(&g, 2, |_, _, _, z| t * c * z * z));
        let s1 = split_modes(&v1);
        assert!((rayleigh_drift(&s1, &s0) - 2.0 * c.abs() * t).abs() < 1e-10);
        assert_eq!(rayleigh_drift(&s1, &s0), rayleigh_drift(&s0, &s1));
    }

    #[test]
    fn residual_examples() {
        let g = grid(16, 17);
        let r = invariant_residuals(&crate::calculus::SplitState::zeros(&g));
        assert_eq!(r, Residuals::default());

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let amps: Vec<(f64, f64, f64)> = (0..5).map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(1..4) as f64, rng.gen_range(1..4) as f64)).collect();
        // v̄ = ∇^⊥ψ with ψ = Σ a sin(πpx) cos(πqy)
        let mean = Field2::from_fn(&g, 2, |c, x, y| {
            amps.iter()
                .map(|&(a, p, q)| {
                    if c == 0 {
                        a * PI * q * (PI * p * x).sin() * (PI * q * y).sin()
                    } else {
                        a * PI * p * (PI * p * x).cos() * (PI * q * y).cos()
                    }
                })
                .sum()
        });
        let fluct = Field3::from_fn(&g, 2, |c, x, y, z| if c == 0 { (PI * z).sin() * (PI * x).cos() * (PI * y).sin() } else { 0.0 });
        let r = invariant_residuals(&SplitState { mean, fluct });
        assert!(r.div_mean < 1e-10);
        assert!(r.fluct_mean < 1e-14);
    }

    #[test]
    fn estimate_examples() {
        let g = grid(8, 9);
        let one = Field3::scalar_fn(&g, |_, _, _| 1.0);
        let r = anisotropic_estimate_check(&one, &one, &one).unwrap();
        assert!((r.lhs - 8.0).abs() < 1e-12);
        assert!((r.ratio - 1.0 / 8f64.sqrt()).abs() < 1e-12);
        let r = anisotropic_estimate_check(&Field3::zeros(&g, 1), &one, &one).unwrap();
        assert_eq!(r.ratio, 0.0);
        let s = Field3::scalar_fn(&g, |x, _, _| (PI * x).sin());
        let r = anisotropic_estimate_check(&s, &s, &s).unwrap();
        // ∫ sin³ = 0; RHS = 2 · (2 + 2π) · (√(2π · 2) + 2)
        assert!(r.lhs < 1e-13);
        let rhs = 2.0 * (2.0 + 2.0 * PI) * ((2.0 * PI * 2.0).sqrt() + 2.0);
        assert!((r.rhs - rhs).abs() < 1e-10);
        let c = Field3::scalar_fn(&g, |x, _, _| (PI * x).cos());
        let r = anisotropic_estimate_check(&c, &c, &one).unwrap();
        // ∫ cos² = 4; RHS = 2 · (2 + 2π) · √8
        assert!((r.ratio - 4.0 / (2.0 * (2.0 + 2.0 * PI) * 8f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn record_zero_state() {
        let g = grid(8, 9);
        let s = SplitState::zeros(&g);
        let r = DiagnosticsRecord::evaluate(0.0, 0.1, &s, &s, &ViscosityModel::Horizontal, None).unwrap();
        assert_eq!(r.surrogate_norm(), 0.0);
        assert_eq!(r.energy, EnergyBudget::default());
        assert!(r.rayleigh.is_none());
    }
}
