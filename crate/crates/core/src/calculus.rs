//! Horizontal spectral derivatives, vertical finite differences and
//! quadrature, the barotropic/baroclinic split, and reconstruction of the
//! vertical velocity from the incompressibility constraint.

use crate::error::{Error, Result};
use crate::grid::{Field2, Field3};
use crate::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// `∂_axis^order f`, componentwise. Horizontal derivatives are spectral,
/// vertical ones use 4th-order stencils with one-sided closures at the walls.
pub fn apply_derivative<S: Real>(f: &Field3<S>, axis: Axis, order: u32) -> Field3<S> {
    let g = f.grid();
    let comps = f
        .comps()
        .iter()
        .map(|c| match axis {
            Axis::X => g.horizontal_derivative(c, order, 0),
            Axis::Y => g.horizontal_derivative(c, 0, order),
            Axis::Z => g.vertical_derivative(c, order),
        })
        .collect();
    Field3::from_comps(g, comps).expect("shape preserved")
}

/// Mixed derivative `∂x^ax ∂y^ay ∂z^az`.
pub fn mixed_derivative<S: Real>(f: &Field3<S>, ax: u32, ay: u32, az: u32) -> Field3<S> {
    let g = f.grid();
    let comps = f
        .comps()
        .iter()
        .map(|c| {
            let h = g.horizontal_derivative(c, ax, ay);
            if az > 0 {
                g.vertical_derivative(&h, az)
            } else {
                h
            }
        })
        .collect();
    Field3::from_comps(g, comps).expect("shape preserved")
}

/// Horizontal derivative of a 2D field; `Axis::Z` yields zero.
pub fn apply_derivative_2d<S: Real>(f: &Field2<S>, axis: Axis, order: u32) -> Field2<S> {
    let g = f.grid();
    let comps = f
        .comps()
        .iter()
        .map(|c| match axis {
            Axis::X => g.horizontal_derivative(c, order, 0),
            Axis::Y => g.horizontal_derivative(c, 0, order),
            Axis::Z if order == 0 => c.clone(),
            Axis::Z => vec![S::zero(); c.len()],
        })
        .collect();
    Field2::from_comps(g, comps).expect("shape preserved")
}

/// `div_H v = ∂x v₁ + ∂y v₂` of a two-component field.
pub fn div_h<S: Real>(v: &Field3<S>) -> Field3<S> {
    assert_eq!(v.ncomp(), 2, "div_H needs a two-component field");
    let g = v.grid();
    let mut d = g.horizontal_derivative(v.comp(0), 1, 0);
    for (a, b) in d.iter_mut().zip(g.horizontal_derivative(v.comp(1), 0, 1)) {
        *a += b;
    }
    Field3::from_comps(g, vec![d]).expect("shape preserved")
}

pub fn div_h_2d<S: Real>(v: &Field2<S>) -> Field2<S> {
    assert_eq!(v.ncomp(), 2, "div_H needs a two-component field");
    let g = v.grid();
    let mut d = g.horizontal_derivative(v.comp(0), 1, 0);
    for (a, b) in d.iter_mut().zip(g.horizontal_derivative(v.comp(1), 0, 1)) {
        *a += b;
    }
    Field2::from_comps(g, vec![d]).expect("shape preserved")
}

/// `∇_H p` of a scalar 2D field.
pub fn grad_h_2d<S: Real>(p: &Field2<S>) -> Field2<S> {
    assert_eq!(p.ncomp(), 1);
    let g = p.grid();
    let comps = vec![
        g.horizontal_derivative(p.comp(0), 1, 0),
        g.horizontal_derivative(p.comp(0), 0, 1),
    ];
    Field2::from_comps(g, comps).expect("shape preserved")
}

/// `(1/2h) ∫_{-h}^{h} f dz`. Composite Simpson for odd `nz`; Simpson plus a
/// closing 3/8 panel for even `nz`. Exact for cubics in `z` either way.
pub fn vertical_average<S: Real>(f: &Field3<S>) -> Field2<S> {
    let g = f.grid();
    let inv = S::one() / (S::lit(2.0) * g.half_height());
    let comps = f
        .comps()
        .iter()
        .map(|c| {
            let mut q = g.vertical_quadrature(c);
            q.iter_mut().for_each(|v| *v *= inv);
            q
        })
        .collect();
    Field2::from_comps(g, comps).expect("shape preserved")
}

/// Cumulative integral `∫_{-h}^{z} f dξ`; zero on the bottom level and equal to
/// the closed quadrature on the top level.
pub fn vertical_integral<S: Real>(f: &Field3<S>) -> Field3<S> {
    let g = f.grid();
    let comps = f.comps().iter().map(|c| g.cumulative_integral(c)).collect();
    Field3::from_comps(g, comps).expect("shape preserved")
}

/// Barotropic mean `v̄` and baroclinic fluctuation `ṽ = v − v̄`.
#[derive(Clone, Debug)]
pub struct SplitState<S: Real> {
    pub mean: Field2<S>,
    pub fluct: Field3<S>,
}

impl<S: Real> SplitState<S> {
    pub fn zeros(grid: &std::sync::Arc<crate::grid::Grid<S>>) -> Self {
        SplitState {
            mean: Field2::zeros(grid, 2),
            fluct: Field3::zeros(grid, 2),
        }
    }

    /// `v̄ + ṽ`.
    pub fn reassemble(&self) -> Field3<S> {
        Field3::extend(&self.mean).add(&self.fluct)
    }

    /// Subtracts the vertical average of the fluctuation (drift correction).
    pub fn reproject_fluct(&mut self) {
        self.fluct = remove_vertical_mean(&self.fluct);
    }
}

pub fn split_modes<S: Real>(v: &Field3<S>) -> SplitState<S> {
    let mean = vertical_average(v);
    let fluct = v.sub(&Field3::extend(&mean));
    SplitState { mean, fluct }
}

/// `f − vertical_average(f)`.
pub fn remove_vertical_mean<S: Real>(f: &Field3<S>) -> Field3<S> {
    f.sub(&Field3::extend(&vertical_average(f)))
}

/// Relative tolerance used for mean-freeness preconditions.
pub fn mean_free_tolerance<S: Real>() -> S {
    S::lit(1e-8).max(S::epsilon() * S::lit(1e3))
}

/// `‖vertical_average(f)‖_{L²(Ω)}` (the mean extended in `z`) and `‖f‖_{L²(Ω)}`.
pub fn mean_residual<S: Real>(f: &Field3<S>) -> (S, S) {
    let g = f.grid();
    let m = vertical_average(f).l2_norm() * (S::lit(2.0) * g.half_height()).sqrt();
    (m, f.l2_norm())
}

/// Errors with `MeanNotFree` unless `f` has zero vertical mean to `tol`
/// relative.
pub fn check_mean_free<S: Real>(f: &Field3<S>, tol: S) -> Result<()> {
    let (m, n) = mean_residual(f);
    if m > tol * n {
        return Err(Error::MeanNotFree {
            residual: m.as_f64(),
            tolerance: (tol * n).as_f64(),
        });
    }
    Ok(())
}

/// `w = −div_H ∫_{-h}^{z} ṽ dξ` for a mean-free fluctuation.
pub fn reconstruct_w<S: Real>(vt: &Field3<S>) -> Result<Field3<S>> {
    check_mean_free(vt, mean_free_tolerance())?;
    Ok(reconstruct_w_unchecked(vt))
}

pub(crate) fn reconstruct_w_unchecked<S: Real>(vt: &Field3<S>) -> Field3<S> {
    let mut w = div_h(&vertical_integral(vt));
    w.scale(-S::one());
    w
}

/// `w = −∫_{-h}^{z} div_H v + (z+h)/(2h) ∫_{-h}^{h} div_H v`, which vanishes at
/// both walls whatever the vertical mean of `v`.
pub fn reconstruct_w_corrected<S: Real>(v: &Field3<S>) -> Field3<S> {
    let g = v.grid();
    let d = div_h(v);
    let cum = g.cumulative_integral(d.comp(0));
    let plane = g.plane_len();
    let nz = g.nz();
    let total = cum[(nz - 1) * plane..].to_vec();
    let two_h = S::lit(2.0) * g.half_height();
    let mut w = vec![S::zero(); g.len()];
    for (k, &z) in g.zs().iter().enumerate() {
        let frac = (z + g.half_height()) / two_h;
        for p in 0..plane {
            w[k * plane + p] = -cum[k * plane + p] + frac * total[p];
        }
    }
    // the top level is exactly zero by construction; pin it against rounding
    for v in &mut w[(nz - 1) * plane..] {
        *v = S::zero();
    }
    Field3::from_comps(g, vec![w]).expect("shape preserved")
}
