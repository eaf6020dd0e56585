//! Viscosity operators: full, horizontal, the two half-horizontal variants,
//! the `A_ε` interpolating family and the inviscid case.

use std::fmt;

use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::calculus::{apply_derivative, Axis};
use crate::grid::{forward_transform, forward_transform_2d, inverse_transform, inverse_transform_2d, Field2, Field3, Grid};
use crate::Real;

/// Wall treatment of the vertical part of [`ViscosityModel::Full`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerticalClosure {
    /// Second-order one-sided closure; imposes nothing at the walls.
    #[default]
    OneSided,
    /// Ghost reflection enforcing `∂z v(±h) = 0`.
    Neumann,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ViscosityModel {
    /// `ν₁ Δ_H + ν₂ ∂zz` on both components.
    Full {
        nu_h: f64,
        nu_v: f64,
        #[serde(default)]
        closure: VerticalClosure,
    },
    /// `Δ_H` on both components.
    Horizontal,
    /// `A⊥ = diag(∂yy, ∂xx)`.
    HalfPerp,
    /// `A∥ = diag(∂xx, ∂yy)`.
    HalfPar,
    /// `A_ε = diag(ε∂xx + ∂yy, ∂xx + ε∂yy)`.
    Eps { eps: f64 },
    Inviscid,
}

impl ViscosityModel {
    pub fn tag(&self) -> &'static str {
        match self {
            ViscosityModel::Full { .. } => "full",
            ViscosityModel::Horizontal => "horizontal",
            ViscosityModel::HalfPerp => "half_perp",
            ViscosityModel::HalfPar => "half_par",
            ViscosityModel::Eps { .. } => "eps",
            ViscosityModel::Inviscid => "inviscid",
        }
    }

    /// Parameter problems, if any.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match *self {
            ViscosityModel::Full { nu_h, nu_v, .. } => {
                if !(nu_h.is_finite() && nu_h > 0.0) {
                    out.push(format!("full model needs nu_h > 0, got {nu_h}"));
                }
                if !(nu_v.is_finite() && nu_v >= 0.0) {
                    out.push(format!("full model needs nu_v >= 0, got {nu_v}"));
                }
            }
            ViscosityModel::Eps { eps } => {
                if !(eps > 0.0 && eps <= 1.0) {
                    out.push(format!("eps must lie in (0, 1], got {eps}"));
                }
            }
            _ => {}
        }
        out
    }

    /// Horizontal weights `(cxx, cyy)` of component `comp` (0 or 1): the
    /// operator is `cxx ∂xx + cyy ∂yy`.
    pub fn horizontal_weights(&self, comp: usize) -> (f64, f64) {
        match *self {
            ViscosityModel::Full { nu_h, .. } => (nu_h, nu_h),
            ViscosityModel::Horizontal => (1.0, 1.0),
            ViscosityModel::HalfPerp => {
                if comp == 0 {
                    (0.0, 1.0)
                } else {
                    (1.0, 0.0)
                }
            }
            ViscosityModel::HalfPar => {
                if comp == 0 {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            ViscosityModel::Eps { eps } => {
                if comp == 0 {
                    (eps, 1.0)
                } else {
                    (1.0, eps)
                }
            }
            ViscosityModel::Inviscid => (0.0, 0.0),
        }
    }

    /// Vertical viscosity and closure, when present.
    pub fn vertical(&self) -> Option<(f64, VerticalClosure)> {
        match *self {
            ViscosityModel::Full { nu_v, closure, .. } if nu_v > 0.0 => Some((nu_v, closure)),
            _ => None,
        }
    }

    pub fn is_inviscid(&self) -> bool {
        matches!(self, ViscosityModel::Inviscid)
    }

    /// Whether the model carries the full horizontal Laplacian (possibly
    /// `ε`-deformed), as the Picard construction requires.
    pub fn supports_picard(&self) -> bool {
        matches!(
            self,
            ViscosityModel::Horizontal | ViscosityModel::Full { .. } | ViscosityModel::Eps { .. }
        )
    }
}

impl fmt::Display for ViscosityModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViscosityModel::Full { nu_h, nu_v, closure } => {
                write!(f, "full(nu_h={nu_h}, nu_v={nu_v}, {closure:?})")
            }
            ViscosityModel::Eps { eps } => write!(f, "eps({eps})"),
            other => f.write_str(other.tag()),
        }
    }
}

/// Fourier symbol of the horizontal part at wavenumber `(kx, ky)`; always `≤ 0`.
pub fn implicit_symbol<S: Real>(model: &ViscosityModel, kx: S, ky: S, comp: usize) -> S {
    let (cxx, cyy) = model.horizontal_weights(comp);
    -(S::lit(cxx) * kx * kx + S::lit(cyy) * ky * ky)
}

/// Symbol table of component `comp` indexed like a spectral plane.
pub(crate) fn symbol_plane<S: Real>(model: &ViscosityModel, grid: &Grid<S>, comp: usize) -> Vec<S> {
    let (nx, ny) = (grid.nx(), grid.ny());
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (kx, ky) = grid.wavenumber(i, j);
            out.push(implicit_symbol(model, kx, ky, comp));
        }
    }
    out
}

fn apply_symbol<S: Real>(coeffs: &mut [Complex<S>], table: &[S]) {
    for level in coeffs.chunks_mut(table.len()) {
        for (c, &s) in level.iter_mut().zip(table) {
            *c = *c * s;
        }
    }
}

/// Applies the model to a two-component 3D velocity.
pub fn apply_viscosity<S: Real>(model: &ViscosityModel, v: &Field3<S>) -> Field3<S> {
    assert_eq!(v.ncomp(), 2, "viscosity acts on two-component velocities");
    let g = v.grid().clone();
    if model.is_inviscid() {
        return Field3::zeros(&g, 2);
    }
    let mut spec = forward_transform(v);
    for c in 0..2 {
        apply_symbol(spec.comp_mut(c), &symbol_plane(model, &g, c));
    }
    let mut out = inverse_transform(&spec);
    if let Some((nu_v, closure)) = model.vertical() {
        out.axpy(S::lit(nu_v), &vertical_second_difference(v, closure));
    }
    out
}

/// Horizontal part of the model applied to a 2D field.
pub fn apply_viscosity_2d<S: Real>(model: &ViscosityModel, v: &Field2<S>) -> Field2<S> {
    let g = v.grid().clone();
    if model.is_inviscid() {
        return v.zeros_like();
    }
    let mut spec = forward_transform_2d(v);
    for c in 0..v.ncomp() {
        apply_symbol(spec.comp_mut(c), &symbol_plane(model, &g, c));
    }
    inverse_transform_2d(&spec)
}

/// Second-order `∂zz` with the given wall closure.
pub fn vertical_second_difference<S: Real>(v: &Field3<S>, closure: VerticalClosure) -> Field3<S> {
    let g = v.grid().clone();
    let (plane, nz) = (g.plane_len(), g.nz());
    let inv = S::one() / (g.dz() * g.dz());
    let rows = vertical_rows(closure, nz);
    let comps = v
        .comps()
        .iter()
        .map(|c| {
            let mut out = vec![S::zero(); c.len()];
            for (k, (start, coeffs)) in rows.iter().enumerate() {
                let dst = &mut out[k * plane..(k + 1) * plane];
                for (l, &a) in coeffs.iter().enumerate() {
                    let src = &c[(start + l) * plane..(start + l + 1) * plane];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += S::lit(a) * s;
                    }
                }
                dst.iter_mut().for_each(|d| *d *= inv);
            }
            out
        })
        .collect();
    Field3::from_comps(&g, comps).expect("shape preserved")
}

fn vertical_rows(closure: VerticalClosure, nz: usize) -> Vec<(usize, Vec<f64>)> {
    (0..nz)
        .map(|k| match (closure, k) {
            (VerticalClosure::Neumann, 0) => (0, vec![-2.0, 2.0]),
            (VerticalClosure::Neumann, k) if k == nz - 1 => (nz - 2, vec![2.0, -2.0]),
            (VerticalClosure::OneSided, 0) => (0, vec![2.0, -5.0, 4.0, -1.0]),
            (VerticalClosure::OneSided, k) if k == nz - 1 => (nz - 4, vec![-1.0, 4.0, -5.0, 2.0]),
            (_, k) => (k - 1, vec![1.0, -2.0, 1.0]),
        })
        .collect()
}

/// Solves `(α − β ∂zz) x = r` down one vertical column, in place, where `∂zz`
/// is the closure-specific second difference (scaled by `1/Δz²` inside) and
/// `α`, `β` are real. Returns `false` on a singular system.
pub(crate) fn solve_vertical_column<S: Real>(
    closure: VerticalClosure,
    dz: S,
    alpha: S,
    beta: S,
    rhs: &mut [Complex<S>],
) -> bool {
    let n = rhs.len();
    let b = beta / (dz * dz);
    match closure {
        VerticalClosure::Neumann => {
            let mut lower = vec![-b; n];
            let mut diag = vec![alpha + S::lit(2.0) * b; n];
            let mut upper = vec![-b; n];
            upper[0] = -S::lit(2.0) * b;
            lower[n - 1] = -S::lit(2.0) * b;
            lower[0] = S::zero();
            upper[n - 1] = S::zero();
            diag[0] = alpha + S::lit(2.0) * b;
            thomas(&lower, &diag, &upper, rhs)
        }
        VerticalClosure::OneSided => {
            // The wall rows are combinations of their interior neighbours, so a
            // tridiagonal reduction leaves a zero pivot; use banded LU instead.
            let mut mat = vec![S::zero(); n * n];
            for (k, (start, coeffs)) in vertical_rows(closure, n).into_iter().enumerate() {
                for (l, c) in coeffs.into_iter().enumerate() {
                    mat[k * n + start + l] = -b * S::lit(c);
                }
                mat[k * n + k] += alpha;
            }
            banded_lu_solve(&mut mat, n, 3, rhs)
        }
    }
}

/// Gaussian elimination with partial pivoting on a dense row-major matrix whose
/// nonzeros sit within `band` of the diagonal.
fn banded_lu_solve<S: Real>(mat: &mut [S], n: usize, band: usize, rhs: &mut [Complex<S>]) -> bool {
    let reach = 2 * band;
    for k in 0..n {
        let last_row = (k + band).min(n - 1);
        let piv = (k..=last_row)
            .max_by(|&a, &c| mat[a * n + k].abs().partial_cmp(&mat[c * n + k].abs()).unwrap())
            .unwrap_or(k);
        if mat[piv * n + k] == S::zero() || !mat[piv * n + k].is_finite() {
            return false;
        }
        if piv != k {
            for j in k..(k + reach + 1).min(n) {
                mat.swap(k * n + j, piv * n + j);
            }
            rhs.swap(k, piv);
        }
        let p = mat[k * n + k];
        for i in k + 1..=last_row {
            let f = mat[i * n + k] / p;
            if f == S::zero() {
                continue;
            }
            for j in k..(k + reach + 1).min(n) {
                let v = mat[k * n + j];
                mat[i * n + j] -= f * v;
            }
            let r = rhs[k];
            rhs[i] = rhs[i] - r * f;
        }
    }
    for k in (0..n).rev() {
        let mut acc = rhs[k];
        for j in k + 1..(k + reach + 1).min(n) {
            acc = acc - rhs[j] * mat[k * n + j];
        }
        rhs[k] = acc / mat[k * n + k];
    }
    true
}

/// Thomas algorithm; returns `false` on a zero pivot.
fn thomas<S: Real>(lower: &[S], diag: &[S], upper: &[S], rhs: &mut [Complex<S>]) -> bool {
    let n = rhs.len();
    let mut c = vec![S::zero(); n];
    let mut beta = diag[0];
    if beta == S::zero() {
        return false;
    }
    rhs[0] = rhs[0] / beta;
    for k in 1..n {
        c[k] = upper[k - 1] / beta;
        beta = diag[k] - lower[k] * c[k];
        if beta == S::zero() || !beta.is_finite() {
            return false;
        }
        rhs[k] = (rhs[k] - rhs[k - 1] * lower[k]) / beta;
    }
    for k in (0..n - 1).rev() {
        let next = rhs[k + 1];
        rhs[k] = rhs[k] - next * c[k + 1];
    }
    true
}

/// `∂xx` / `∂yy` split used by tests and diagnostics.
pub fn directional_second_derivative<S: Real>(v: &Field3<S>, axis: Axis) -> Field3<S> {
    apply_derivative(v, axis, 2)
}
