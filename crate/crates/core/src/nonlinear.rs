//! Transport terms, the coupling term `K(ṽ)` and right-hand-side assembly for
//! the split `(v̄, ṽ)` system and for the unsplit velocity.

use crate::calculus::{
    apply_derivative, check_mean_free, div_h, mean_free_tolerance, reconstruct_w_corrected,
    reconstruct_w_unchecked, remove_vertical_mean, split_modes, vertical_average, Axis, SplitState,
};
use crate::error::Result;
use crate::grid::{dealiased, dealiased_2d, Field2, Field3};
use crate::pressure::leray_project;
use crate::viscosity::{apply_viscosity, apply_viscosity_2d, ViscosityModel};
use crate::Real;

/// Right-hand sides of the barotropic and baroclinic equations.
#[derive(Clone, Debug)]
pub struct Tendency<S: Real> {
    pub mean_rhs: Field2<S>,
    pub fluct_rhs: Field3<S>,
}

fn times<S: Real>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

fn advect_lattice<S: Real>(u1: &[S], u2: &[S], dx: &[S], dy: &[S]) -> Vec<S> {
    u1.iter()
        .zip(u2)
        .zip(dx.iter().zip(dy))
        .map(|((&a, &b), (&p, &q))| a * p + b * q)
        .collect()
}

/// `u₁ ∂x v + u₂ ∂y v` for each component of `v`, dealiased.
pub fn advect_horizontal<S: Real>(u: &Field3<S>, v: &Field3<S>) -> Field3<S> {
    assert_eq!(u.ncomp(), 2, "advecting velocity has two components");
    let g = v.grid();
    let comps = v
        .comps()
        .iter()
        .map(|c| {
            let dx = g.horizontal_derivative(c, 1, 0);
            let dy = g.horizontal_derivative(c, 0, 1);
            advect_lattice(u.comp(0), u.comp(1), &dx, &dy)
        })
        .collect();
    dealiased(&Field3::from_comps(g, comps).expect("shape preserved"))
}

pub fn advect_horizontal_2d<S: Real>(u: &Field2<S>, v: &Field2<S>) -> Field2<S> {
    assert_eq!(u.ncomp(), 2, "advecting velocity has two components");
    let g = v.grid();
    let comps = v
        .comps()
        .iter()
        .map(|c| {
            let dx = g.horizontal_derivative(c, 1, 0);
            let dy = g.horizontal_derivative(c, 0, 1);
            advect_lattice(u.comp(0), u.comp(1), &dx, &dy)
        })
        .collect();
    dealiased_2d(&Field2::from_comps(g, comps).expect("shape preserved"))
}

/// `w ∂z v` for scalar `w`, dealiased.
pub fn advect_vertical<S: Real>(w: &Field3<S>, v: &Field3<S>) -> Field3<S> {
    assert_eq!(w.ncomp(), 1, "vertical velocity is scalar");
    let g = v.grid();
    let dz = apply_derivative(v, Axis::Z, 1);
    let comps = dz.comps().iter().map(|c| times(w.comp(0), c)).collect();
    dealiased(&Field3::from_comps(g, comps).expect("shape preserved"))
}

fn coupling_integrand<S: Real>(fluct: &Field3<S>) -> Field3<S> {
    let div = div_h(fluct);
    let mut t = advect_horizontal(fluct, fluct);
    for c in 0..2 {
        let extra = times(fluct.comp(c), div.comp(0));
        for (a, b) in t.comp_mut(c).iter_mut().zip(extra) {
            *a += b;
        }
    }
    t
}

/// `K(ṽ) = (1/2h) ∫ (ṽ · ∇_H ṽ + ṽ div_H ṽ) dz`, dealiased.
pub fn coupling_k<S: Real>(fluct: &Field3<S>) -> Result<Field2<S>> {
    check_mean_free(fluct, mean_free_tolerance())?;
    Ok(coupling_k_unchecked(fluct))
}

pub(crate) fn coupling_k_unchecked<S: Real>(fluct: &Field3<S>) -> Field2<S> {
    dealiased_2d(&vertical_average(&coupling_integrand(fluct)))
}

/// Transport and coupling terms only, no viscosity and no projection:
/// `mean_rhs = −v̄·∇v̄ − K`, and `fluct_rhs` the mean-free part of
/// `−ṽ·∇ṽ − v̄·∇ṽ − ṽ·∇v̄ − w ∂z ṽ`.
pub fn transport_tendency<S: Real>(state: &SplitState<S>) -> Result<Tendency<S>> {
    let SplitState { mean, fluct } = state;
    let k = coupling_k(fluct)?;
    let mut mean_rhs = advect_horizontal_2d(mean, mean);
    mean_rhs.axpy(S::one(), &k);
    mean_rhs.scale(-S::one());

    let w = reconstruct_w_unchecked(fluct);
    let mean3 = Field3::extend(mean);
    let mut f = advect_horizontal(fluct, fluct);
    f.axpy(S::one(), &advect_horizontal(&mean3, fluct));
    f.axpy(S::one(), &advect_horizontal(fluct, &mean3));
    f.axpy(S::one(), &advect_vertical(&w, fluct));
    f.scale(-S::one());
    // the vertical average of the transport terms is −K up to quadrature;
    // removing it exactly is the same as adding K
    let fluct_rhs = remove_vertical_mean(&f);
    Ok(Tendency {
        mean_rhs,
        fluct_rhs,
    })
}

/// Full right-hand side of the coupled system. The barotropic part is
/// Leray-projected, which removes `∇_H p`.
pub fn assemble_rhs<S: Real>(state: &SplitState<S>, model: &ViscosityModel) -> Result<Tendency<S>> {
    let mut t = transport_tendency(state)?;
    t.mean_rhs.axpy(S::one(), &apply_viscosity_2d(model, &state.mean));
    t.mean_rhs = leray_project(&t.mean_rhs);
    let visc = apply_viscosity(model, &state.fluct);
    t.fluct_rhs.axpy(S::one(), &remove_vertical_mean(&visc));
    Ok(t)
}

/// `−v·∇_H v − w ∂z v + A v − ∇_H p` for the unsplit velocity, with `w` from
/// the corrected reconstruction and `p` the pressure that keeps the vertical
/// mean solenoidal.
pub fn unsplit_rhs<S: Real>(v: &Field3<S>, model: &ViscosityModel) -> Field3<S> {
    let w = reconstruct_w_corrected(v);
    let mut n = advect_horizontal(v, v);
    n.axpy(S::one(), &advect_vertical(&w, v));
    n.scale(-S::one());
    n.axpy(S::one(), &apply_viscosity(model, v));
    let parts = split_modes(&n);
    Field3::extend(&leray_project(&parts.mean)).add(&parts.fluct)
}
