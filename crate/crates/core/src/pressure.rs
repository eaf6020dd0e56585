//! Two-dimensional pressure Poisson problem and the Leray projection of the
//! barotropic velocity.

use rustfft::num_complex::Complex;

use crate::calculus::div_h_2d;
use crate::error::{Error, Result};
use crate::grid::{dealiased_2d, forward_transform_2d, inverse_transform_2d, Field2, Field3, Grid, Spectral2};
use crate::nonlinear::{advect_horizontal_2d, coupling_k};
use crate::viscosity::{apply_viscosity_2d, ViscosityModel};
use crate::Real;

/// Surface pressure in the zero-mean gauge.
#[derive(Clone, Debug)]
pub struct PressureField<S: Real> {
    pub p: Field2<S>,
}

impl<S: Real> PressureField<S> {
    pub fn zeros(grid: &std::sync::Arc<Grid<S>>) -> Self {
        PressureField {
            p: Field2::zeros(grid, 1),
        }
    }
}

/// Relative tolerance on the mean of a Poisson right-hand side.
pub fn compatibility_tolerance<S: Real>() -> S {
    S::lit(1e-8).max(S::epsilon() * S::lit(1e3))
}

/// `div_H (K(ṽ) + v̄ · ∇_H v̄)`, dealiased.
pub fn pressure_rhs<S: Real>(mean: &Field2<S>, fluct: &Field3<S>) -> Result<Field2<S>> {
    let k = coupling_k(fluct)?;
    let adv = advect_horizontal_2d(mean, mean);
    Ok(dealiased_2d(&div_h_2d(&k.add(&adv))))
}

/// Pressure source including the viscous contribution `−div_H(A v̄)`, which
/// vanishes for isotropic models acting on solenoidal fields but not for the
/// half-viscosity operators.
pub fn pressure_rhs_for_model<S: Real>(
    mean: &Field2<S>,
    fluct: &Field3<S>,
    model: &ViscosityModel,
) -> Result<Field2<S>> {
    let mut rhs = pressure_rhs(mean, fluct)?;
    let visc = apply_viscosity_2d(model, mean);
    rhs.axpy(-S::one(), &div_h_2d(&visc));
    Ok(rhs)
}

/// Solves `−Δ_H p = rhs` with `mean(p) = 0`.
pub fn solve_poisson2d<S: Real>(rhs: &Field2<S>) -> Result<PressureField<S>> {
    assert_eq!(rhs.ncomp(), 1, "Poisson right-hand side is scalar");
    let g = rhs.grid().clone();
    let n = S::from_usize_lossy(g.plane_len());
    let rms = (rhs.comp(0).iter().map(|&v| v * v).sum::<S>() / n).sqrt();
    let mean = rhs.mean(0);
    let tol = compatibility_tolerance::<S>() * rms;
    if mean.abs() > tol {
        return Err(Error::IncompatibleRhs {
            mean: mean.as_f64(),
            tolerance: tol.as_f64(),
        });
    }
    let mut spec = forward_transform_2d(rhs);
    let (nx, ny) = (g.nx(), g.ny());
    let zero = Complex::new(S::zero(), S::zero());
    let c = spec.comp_mut(0);
    for j in 0..ny {
        for i in 0..nx {
            let (kx, ky) = g.wavenumber(i, j);
            let k2 = kx * kx + ky * ky;
            c[i + nx * j] = if k2 == S::zero() { zero } else { c[i + nx * j] / k2 };
        }
    }
    Ok(PressureField {
        p: inverse_transform_2d(&spec),
    })
}

/// Leray projection in Fourier space, in place: `û ← û − k (k · û) / |k|²`.
pub(crate) fn project_spectral<S: Real>(spec: &mut Spectral2<S>) {
    let g = spec.grid().clone();
    let (nx, ny) = (g.nx(), g.ny());
    for j in 0..ny {
        for i in 0..nx {
            let kx = g.kx_d[i];
            let ky = g.ky_d[j];
            let k2 = kx * kx + ky * ky;
            if k2 == S::zero() {
                continue;
            }
            let idx = i + nx * j;
            let u = spec.comp(0)[idx];
            let v = spec.comp(1)[idx];
            let dot: Complex<S> = u * kx + v * ky;
            spec.comp_mut(0)[idx] = u - dot * (kx / k2);
            spec.comp_mut(1)[idx] = v - dot * (ky / k2);
        }
    }
}

/// Orthogonal projection of a 2D vector field onto its solenoidal part.
pub fn leray_project<S: Real>(v: &Field2<S>) -> Field2<S> {
    assert_eq!(v.ncomp(), 2);
    let mut spec = forward_transform_2d(v);
    project_spectral(&mut spec);
    inverse_transform_2d(&spec)
}
