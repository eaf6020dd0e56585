//! Discretized slab `G × (-h, h)` with `G = (-1, 1)²`, real and spectral field
//! storage, and horizontal transforms.
//!
//! Lattices are stored x-fastest, then y, then z: `idx = i + nx * (j + ny * k)`.
//! Horizontal nodes are `x_i = -1 + 2 i / nx`; vertical nodes are uniform and
//! include both walls, `z_k = -h + k Δz` with `Δz = 2h / (nz - 1)`.
//!
//! Spectral coefficients are mode amplitudes: `f(x, y) = Σ c(m) e^{iπ(mx x + my y)}`,
//! so the forward transform divides by `nx · ny`.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Real;

/// Geometry and resolution of the slab.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub half_height: f64,
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Default for DomainSpec {
    fn default() -> Self {
        DomainSpec {
            half_height: 1.0,
            nx: 16,
            ny: 16,
            nz: 17,
        }
    }
}

impl DomainSpec {
    pub fn new(half_height: f64, nx: usize, ny: usize, nz: usize) -> Result<Self> {
        let spec = DomainSpec {
            half_height,
            nx,
            ny,
            nz,
        };
        let problems = spec.problems();
        if problems.is_empty() {
            Ok(spec)
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    /// Cube `n × n × n` with `h = 1`.
    pub fn cube(n: usize) -> Result<Self> {
        Self::new(1.0, n, n, n)
    }

    /// Every violated invariant, for callers that want to collect them.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.half_height.is_finite() && self.half_height > 0.0) {
            out.push(format!(
                "half_height must be positive, got {}",
                self.half_height
            ));
        }
        for (name, n) in [("nx", self.nx), ("ny", self.ny)] {
            if n == 0 || n % 2 != 0 {
                out.push(format!("{name} must be a positive even integer, got {n}"));
            }
        }
        if self.nz < 4 {
            out.push(format!("nz must be at least 4, got {}", self.nz));
        }
        out
    }

    pub fn plane_len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dz(&self) -> f64 {
        2.0 * self.half_height / (self.nz as f64 - 1.0)
    }

    /// Volume of `Ω`, `4 · 2h`.
    pub fn volume(&self) -> f64 {
        8.0 * self.half_height
    }
}

impl fmt::Display for DomainSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{} (h = {})",
            self.nx, self.ny, self.nz, self.half_height
        )
    }
}

/// Sparse row of a vertical operator: `out[k] = scale · Σ coeffs[l] · f[start + l]`.
/// Coefficients are kept unscaled so constants are annihilated exactly.
#[derive(Clone, Debug)]
pub(crate) struct Stencil<S> {
    pub start: usize,
    pub coeffs: Vec<S>,
    pub scale: S,
}

/// One level of the cumulative vertical integral: `I[k] = I[base] + Σ c · f[l]`.
#[derive(Clone, Debug)]
pub(crate) struct CumulativeStep<S> {
    pub base: usize,
    pub terms: Vec<(usize, S)>,
}

/// Immutable grid context: coordinates, wavenumbers, FFT plans, quadrature and
/// vertical stencils. Shared between fields through an `Arc`.
pub struct Grid<S: Real> {
    spec: DomainSpec,
    pub(crate) h: S,
    pub(crate) dz: S,
    pub(crate) xs: Vec<S>,
    pub(crate) ys: Vec<S>,
    pub(crate) zs: Vec<S>,
    pub(crate) mx: Vec<i64>,
    pub(crate) my: Vec<i64>,
    pub(crate) kx: Vec<S>,
    pub(crate) ky: Vec<S>,
    /// First-derivative wavenumbers; the Nyquist entry is zero.
    pub(crate) kx_d: Vec<S>,
    pub(crate) ky_d: Vec<S>,
    phase: Vec<S>,
    fft_x: Arc<dyn Fft<S>>,
    ifft_x: Arc<dyn Fft<S>>,
    fft_y: Arc<dyn Fft<S>>,
    ifft_y: Arc<dyn Fft<S>>,
    pub(crate) wz: Vec<S>,
    pub(crate) cumulative: Vec<CumulativeStep<S>>,
    pub(crate) d1: Vec<Stencil<S>>,
    pub(crate) d2: Option<Vec<Stencil<S>>>,
}

impl<S: Real> fmt::Debug for Grid<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Grid").field("spec", &self.spec).finish()
    }
}

fn signed_mode(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

impl<S: Real> Grid<S> {
    pub fn new(spec: DomainSpec) -> Result<Arc<Self>> {
        let problems = spec.problems();
        if !problems.is_empty() {
            return Err(Error::InvalidArgument(problems.join("; ")));
        }
        let DomainSpec { nx, ny, nz, .. } = spec;
        let h = S::lit(spec.half_height);
        let dz = S::lit(spec.dz());
        let pi = S::PI();

        let xs = (0..nx)
            .map(|i| S::lit(-1.0 + 2.0 * i as f64 / nx as f64))
            .collect();
        let ys = (0..ny)
            .map(|j| S::lit(-1.0 + 2.0 * j as f64 / ny as f64))
            .collect();
        let zs = (0..nz)
            .map(|k| {
                if k == nz - 1 {
                    h
                } else {
                    -h + S::from_usize_lossy(k) * dz
                }
            })
            .collect();

        let mx: Vec<i64> = (0..nx).map(|i| signed_mode(i, nx)).collect();
        let my: Vec<i64> = (0..ny).map(|j| signed_mode(j, ny)).collect();
        let kx: Vec<S> = mx.iter().map(|&m| pi * S::lit(m as f64)).collect();
        let ky: Vec<S> = my.iter().map(|&m| pi * S::lit(m as f64)).collect();
        let kx_d = mx
            .iter()
            .zip(&kx)
            .map(|(&m, &k)| if m as usize == nx / 2 { S::zero() } else { k })
            .collect();
        let ky_d = my
            .iter()
            .zip(&ky)
            .map(|(&m, &k)| if m as usize == ny / 2 { S::zero() } else { k })
            .collect();

        // x_0 = -1 shifts every mode by e^{-iπm}; undo it so coefficients are
        // amplitudes with respect to x itself.
        let mut phase = Vec::with_capacity(nx * ny);
        for &b in &my {
            for &a in &mx {
                phase.push(if (a + b).rem_euclid(2) == 0 {
                    S::one()
                } else {
                    -S::one()
                });
            }
        }

        let mut planner = FftPlanner::new();
        let fft_x = planner.plan_fft_forward(nx);
        let ifft_x = planner.plan_fft_inverse(nx);
        let fft_y = planner.plan_fft_forward(ny);
        let ifft_y = planner.plan_fft_inverse(ny);

        let cumulative = cumulative_plan(nz, dz);
        let wz = quadrature_weights(&cumulative, nz);
        let d1 = first_derivative_stencils(nz, dz);
        let d2 = (nz >= 6).then(|| second_derivative_stencils(nz, dz));

        Ok(Arc::new(Grid {
            spec,
            h,
            dz,
            xs,
            ys,
            zs,
            mx,
            my,
            kx,
            ky,
            kx_d,
            ky_d,
            phase,
            fft_x,
            ifft_x,
            fft_y,
            ifft_y,
            wz,
            cumulative,
            d1,
            d2,
        }))
    }

    pub fn spec(&self) -> &DomainSpec {
        &self.spec
    }

    pub fn nx(&self) -> usize {
        self.spec.nx
    }

    pub fn ny(&self) -> usize {
        self.spec.ny
    }

    pub fn nz(&self) -> usize {
        self.spec.nz
    }

    pub fn plane_len(&self) -> usize {
        self.spec.plane_len()
    }

    pub fn len(&self) -> usize {
        self.spec.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spec.is_empty()
    }

    pub fn half_height(&self) -> S {
        self.h
    }

    pub fn dz(&self) -> S {
        self.dz
    }

    pub fn xs(&self) -> &[S] {
        &self.xs
    }

    pub fn ys(&self) -> &[S] {
        &self.ys
    }

    pub fn zs(&self) -> &[S] {
        &self.zs
    }

    /// Vertical quadrature weights; they sum to `2h`.
    pub fn vertical_weights(&self) -> &[S] {
        &self.wz
    }

    /// Area of one horizontal cell, `4 / (nx ny)`.
    pub fn cell_area(&self) -> S {
        S::lit(4.0) / S::from_usize_lossy(self.plane_len())
    }

    /// Signed mode indices `(mx, my)` of spectral slot `(i, j)`.
    pub fn mode(&self, i: usize, j: usize) -> (i64, i64) {
        (self.mx[i], self.my[j])
    }

    /// Wavenumbers `(π mx, π my)` of spectral slot `(i, j)`.
    pub fn wavenumber(&self, i: usize, j: usize) -> (S, S) {
        (self.kx[i], self.ky[j])
    }

    /// Spectral slot holding signed mode `(mx, my)`, if resolved.
    pub fn slot(&self, mx: i64, my: i64) -> Option<(usize, usize)> {
        let (nx, ny) = (self.nx() as i64, self.ny() as i64);
        if mx.abs() > nx / 2 || my.abs() > ny / 2 {
            return None;
        }
        Some((mx.rem_euclid(nx) as usize, my.rem_euclid(ny) as usize))
    }

    /// Whether the 2/3 rule keeps slot `(i, j)`.
    pub fn retained(&self, i: usize, j: usize) -> bool {
        3 * (self.mx[i].unsigned_abs() as usize) < self.nx()
            && 3 * (self.my[j].unsigned_abs() as usize) < self.ny()
    }

    /// Forward horizontal transform of a stack of planes (`len` a multiple of
    /// `nx · ny`).
    pub fn forward_lattice(&self, data: &[S]) -> Vec<Complex<S>> {
        let plane = self.plane_len();
        assert_eq!(data.len() % plane, 0, "lattice is not a stack of planes");
        let mut buf: Vec<Complex<S>> = data.iter().map(|&v| Complex::new(v, S::zero())).collect();
        let norm = S::one() / S::from_usize_lossy(plane);
        buf.par_chunks_mut(plane).for_each(|level| {
            self.transform_plane(level, &self.fft_x, &self.fft_y);
            for (c, &p) in level.iter_mut().zip(&self.phase) {
                *c = *c * (p * norm);
            }
        });
        buf
    }

    /// Inverse of [`Grid::forward_lattice`]; the imaginary part is discarded.
    pub fn inverse_lattice(&self, coeffs: &[Complex<S>]) -> Vec<S> {
        let plane = self.plane_len();
        assert_eq!(coeffs.len() % plane, 0, "lattice is not a stack of planes");
        let mut buf = coeffs.to_vec();
        buf.par_chunks_mut(plane).for_each(|level| {
            for (c, &p) in level.iter_mut().zip(&self.phase) {
                *c = *c * p;
            }
            self.transform_plane(level, &self.ifft_x, &self.ifft_y);
        });
        buf.into_iter().map(|c| c.re).collect()
    }

    fn transform_plane(&self, level: &mut [Complex<S>], fx: &Arc<dyn Fft<S>>, fy: &Arc<dyn Fft<S>>) {
        let (nx, ny) = (self.nx(), self.ny());
        fx.process(level);
        let mut t = vec![Complex::new(S::zero(), S::zero()); nx * ny];
        for j in 0..ny {
            for i in 0..nx {
                t[j + ny * i] = level[i + nx * j];
            }
        }
        fy.process(&mut t);
        for i in 0..nx {
            for j in 0..ny {
                level[i + nx * j] = t[j + ny * i];
            }
        }
    }

    /// Zeroes every coefficient outside the 2/3 band, in place.
    pub fn dealias_lattice(&self, coeffs: &mut [Complex<S>]) {
        let (nx, ny) = (self.nx(), self.ny());
        let zero = Complex::new(S::zero(), S::zero());
        for level in coeffs.chunks_mut(nx * ny) {
            for j in 0..ny {
                for i in 0..nx {
                    if !self.retained(i, j) {
                        level[i + nx * j] = zero;
                    }
                }
            }
        }
    }

    /// Applies `(i kx)^ax (i ky)^ay` to a stack of planes of coefficients.
    pub(crate) fn spectral_multiply(&self, coeffs: &mut [Complex<S>], ax: u32, ay: u32) {
        let (nx, ny) = (self.nx(), self.ny());
        for level in coeffs.chunks_mut(nx * ny) {
            for j in 0..ny {
                let fy = derivative_factor(self.ky[j], self.ky_d[j], ay);
                for i in 0..nx {
                    let fx = derivative_factor(self.kx[i], self.kx_d[i], ax);
                    level[i + nx * j] = level[i + nx * j] * fx * fy;
                }
            }
        }
    }

    /// Horizontal derivative `∂x^ax ∂y^ay` of a stack of planes, via transforms.
    pub(crate) fn horizontal_derivative(&self, data: &[S], ax: u32, ay: u32) -> Vec<S> {
        if ax == 0 && ay == 0 {
            return data.to_vec();
        }
        let mut c = self.forward_lattice(data);
        self.spectral_multiply(&mut c, ax, ay);
        self.inverse_lattice(&c)
    }

    /// Applies a list of vertical stencils to a 3D lattice.
    pub(crate) fn apply_vertical(&self, stencils: &[Stencil<S>], data: &[S]) -> Vec<S> {
        let plane = self.plane_len();
        let mut out = vec![S::zero(); data.len()];
        out.par_chunks_mut(plane)
            .zip(stencils.par_iter())
            .for_each(|(dst, st)| {
                for (l, &c) in st.coeffs.iter().enumerate() {
                    let src = &data[(st.start + l) * plane..(st.start + l + 1) * plane];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += c * s;
                    }
                }
                for d in dst.iter_mut() {
                    *d *= st.scale;
                }
            });
        out
    }

    /// `∂z^order` of a 3D lattice using the 4th-order stencils.
    pub(crate) fn vertical_derivative(&self, data: &[S], order: u32) -> Vec<S> {
        let mut cur = data.to_vec();
        let mut left = order;
        while left >= 2 {
            cur = match &self.d2 {
                Some(d2) => self.apply_vertical(d2, &cur),
                None => {
                    let once = self.apply_vertical(&self.d1, &cur);
                    self.apply_vertical(&self.d1, &once)
                }
            };
            left -= 2;
        }
        if left == 1 {
            cur = self.apply_vertical(&self.d1, &cur);
        }
        cur
    }

    /// Cumulative integral `∫_{-h}^{z_k} f dz` of a 3D lattice.
    pub(crate) fn cumulative_integral(&self, data: &[S]) -> Vec<S> {
        let plane = self.plane_len();
        let mut out = vec![S::zero(); data.len()];
        for (k, step) in self.cumulative.iter().enumerate().skip(1) {
            let (done, rest) = out.split_at_mut(k * plane);
            let dst = &mut rest[..plane];
            dst.copy_from_slice(&done[step.base * plane..(step.base + 1) * plane]);
            for &(l, c) in &step.terms {
                let src = &data[l * plane..(l + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += c * s;
                }
            }
        }
        out
    }

    /// `∫_{-h}^{h} f dz` of a 3D lattice, one value per horizontal node.
    pub(crate) fn vertical_quadrature(&self, data: &[S]) -> Vec<S> {
        let plane = self.plane_len();
        let mut out = vec![S::zero(); plane];
        for (k, &w) in self.wz.iter().enumerate() {
            for (d, &s) in out.iter_mut().zip(&data[k * plane..(k + 1) * plane]) {
                *d += w * s;
            }
        }
        out
    }
}

fn derivative_factor<S: Real>(k: S, k_odd: S, order: u32) -> Complex<S> {
    let i = Complex::new(S::zero(), S::one());
    match order {
        0 => Complex::new(S::one(), S::zero()),
        o if o % 2 == 0 => {
            let mag = k.powi(o as i32);
            let sign = if (o / 2) % 2 == 1 { -S::one() } else { S::one() };
            Complex::new(sign * mag, S::zero())
        }
        o => {
            let mag = k_odd.powi(o as i32);
            let base = Complex::new(mag, S::zero()) * i;
            if (o / 2) % 2 == 1 {
                -base
            } else {
                base
            }
        }
    }
}

fn stencil<S: Real>(start: usize, coeffs: &[f64], scale: S) -> Stencil<S> {
    Stencil {
        start,
        coeffs: coeffs.iter().map(|&c| S::lit(c)).collect(),
        scale,
    }
}

fn first_derivative_stencils<S: Real>(nz: usize, dz: S) -> Vec<Stencil<S>> {
    let s = S::one() / (S::lit(12.0) * dz);
    let b0 = [-25.0, 48.0, -36.0, 16.0, -3.0];
    let b1 = [-3.0, -10.0, 18.0, -6.0, 1.0];
    let centered = [1.0, -8.0, 0.0, 8.0, -1.0];
    (0..nz)
        .map(|k| {
            if nz < 5 {
                // only reachable for nz = 4: cubic one-sided fallback
                let c3: [[f64; 4]; 4] = [
                    [-11.0, 18.0, -9.0, 2.0],
                    [-2.0, -3.0, 6.0, -1.0],
                    [1.0, -6.0, 3.0, 2.0],
                    [-2.0, 9.0, -18.0, 11.0],
                ];
                return stencil(0, &c3[k], S::one() / (S::lit(6.0) * dz));
            }
            if k == 0 {
                stencil(0, &b0, s)
            } else if k == 1 {
                stencil(0, &b1, s)
            } else if k == nz - 2 {
                let c: Vec<f64> = b1.iter().rev().map(|v| -v).collect();
                stencil(nz - 5, &c, s)
            } else if k == nz - 1 {
                let c: Vec<f64> = b0.iter().rev().map(|v| -v).collect();
                stencil(nz - 5, &c, s)
            } else {
                stencil(k - 2, &centered, s)
            }
        })
        .collect()
}

fn second_derivative_stencils<S: Real>(nz: usize, dz: S) -> Vec<Stencil<S>> {
    let s = S::one() / (S::lit(12.0) * dz * dz);
    let b0 = [45.0, -154.0, 214.0, -156.0, 61.0, -10.0];
    let b1 = [10.0, -15.0, -4.0, 14.0, -6.0, 1.0];
    let centered = [-1.0, 16.0, -30.0, 16.0, -1.0];
    (0..nz)
        .map(|k| {
            if k == 0 {
                stencil(0, &b0, s)
            } else if k == 1 {
                stencil(0, &b1, s)
            } else if k == nz - 2 {
                let c: Vec<f64> = b1.iter().rev().copied().collect();
                stencil(nz - 6, &c, s)
            } else if k == nz - 1 {
                let c: Vec<f64> = b0.iter().rev().copied().collect();
                stencil(nz - 6, &c, s)
            } else {
                stencil(k - 2, &centered, s)
            }
        })
        .collect()
}

/// Cumulative integration plan. Simpson panels (plus one 3/8 panel when the
/// interval count is odd) fix the even/panel-end levels; intermediate levels use
/// 4-point cubic interval rules, so the scheme is 4th-order everywhere and the
/// value at `z = h` coincides with the closed quadrature rule.
fn cumulative_plan<S: Real>(nz: usize, dz: S) -> Vec<CumulativeStep<S>> {
    let mut plan = vec![CumulativeStep { base: 0, terms: Vec::new() }; nz];
    let c = |v: f64| S::lit(v) * dz;
    let simpson_end = if (nz - 1) % 2 == 0 { nz - 1 } else { nz - 4 };

    let mut p = 0;
    while p + 2 <= simpson_end {
        plan[p + 2] = CumulativeStep {
            base: p,
            terms: vec![(p, c(1.0 / 3.0)), (p + 1, c(4.0 / 3.0)), (p + 2, c(1.0 / 3.0))],
        };
        let terms = if p >= 1 {
            vec![
                (p - 1, c(-1.0 / 24.0)),
                (p, c(13.0 / 24.0)),
                (p + 1, c(13.0 / 24.0)),
                (p + 2, c(-1.0 / 24.0)),
            ]
        } else {
            vec![
                (p, c(9.0 / 24.0)),
                (p + 1, c(19.0 / 24.0)),
                (p + 2, c(-5.0 / 24.0)),
                (p + 3, c(1.0 / 24.0)),
            ]
        };
        plan[p + 1] = CumulativeStep { base: p, terms };
        p += 2;
    }
    if simpson_end != nz - 1 {
        let l = simpson_end;
        plan[l + 1] = CumulativeStep {
            base: l,
            terms: vec![
                (l, c(9.0 / 24.0)),
                (l + 1, c(19.0 / 24.0)),
                (l + 2, c(-5.0 / 24.0)),
                (l + 3, c(1.0 / 24.0)),
            ],
        };
        plan[l + 2] = CumulativeStep {
            base: l,
            terms: vec![(l, c(1.0 / 3.0)), (l + 1, c(4.0 / 3.0)), (l + 2, c(1.0 / 3.0))],
        };
        plan[l + 3] = CumulativeStep {
            base: l,
            terms: vec![
                (l, c(3.0 / 8.0)),
                (l + 1, c(9.0 / 8.0)),
                (l + 2, c(9.0 / 8.0)),
                (l + 3, c(3.0 / 8.0)),
            ],
        };
    }
    plan
}

/// Closed-rule weights implied by the cumulative plan's final level.
fn quadrature_weights<S: Real>(plan: &[CumulativeStep<S>], nz: usize) -> Vec<S> {
    // Expand I[nz-1] as a linear combination of samples.
    let mut rows: Vec<Vec<S>> = vec![vec![S::zero(); nz]; nz];
    for k in 1..nz {
        let mut row = rows[plan[k].base].clone();
        for &(l, c) in &plan[k].terms {
            row[l] += c;
        }
        rows[k] = row;
    }
    rows.pop().unwrap_or_default()
}

macro_rules! field_common {
    ($name:ident) => {
        impl<S: Real> $name<S> {
            pub fn grid(&self) -> &Arc<Grid<S>> {
                &self.grid
            }

            pub fn ncomp(&self) -> usize {
                self.comps.len()
            }

            pub fn comp(&self, c: usize) -> &[S] {
                &self.comps[c]
            }

            pub fn comp_mut(&mut self, c: usize) -> &mut [S] {
                &mut self.comps[c]
            }

            pub fn comps(&self) -> &[Vec<S>] {
                &self.comps
            }

            pub fn into_comps(self) -> Vec<Vec<S>> {
                self.comps
            }

            pub fn is_finite(&self) -> bool {
                self.comps.iter().flatten().all(|v| v.is_finite())
            }

            pub fn max_abs(&self) -> S {
                self.comps
                    .iter()
                    .flatten()
                    .fold(S::zero(), |m, v| m.max(v.abs()))
            }

            pub fn same_shape(&self, other: &Self) -> bool {
                self.grid.spec() == other.grid.spec() && self.ncomp() == other.ncomp()
            }

            fn check_shape(&self, other: &Self) {
                assert!(
                    self.same_shape(other),
                    "field shape mismatch: {} comps on {} vs {} comps on {}",
                    self.ncomp(),
                    self.grid.spec(),
                    other.ncomp(),
                    other.grid.spec()
                );
            }

            /// `self += alpha * other`.
            pub fn axpy(&mut self, alpha: S, other: &Self) {
                self.check_shape(other);
                for (a, b) in self.comps.iter_mut().zip(&other.comps) {
                    for (x, &y) in a.iter_mut().zip(b) {
                        *x += alpha * y;
                    }
                }
            }

            pub fn scale(&mut self, alpha: S) {
                for v in self.comps.iter_mut().flatten() {
                    *v *= alpha;
                }
            }

            pub fn scaled(&self, alpha: S) -> Self {
                let mut out = self.clone();
                out.scale(alpha);
                out
            }

            pub fn add(&self, other: &Self) -> Self {
                let mut out = self.clone();
                out.axpy(S::one(), other);
                out
            }

            pub fn sub(&self, other: &Self) -> Self {
                let mut out = self.clone();
                out.axpy(-S::one(), other);
                out
            }

            pub fn zeros_like(&self) -> Self {
                Self::zeros(&self.grid, self.ncomp())
            }

            /// Largest pointwise difference; panics on shape mismatch.
            pub fn max_diff(&self, other: &Self) -> S {
                self.check_shape(other);
                self.comps
                    .iter()
                    .flatten()
                    .zip(other.comps.iter().flatten())
                    .fold(S::zero(), |m, (&a, &b)| m.max((a - b).abs()))
            }
        }
    };
}

/// Real field on the 3D lattice with one or two components.
#[derive(Clone, Debug)]
pub struct Field3<S: Real> {
    grid: Arc<Grid<S>>,
    comps: Vec<Vec<S>>,
}

/// Real field on the horizontal lattice.
#[derive(Clone, Debug)]
pub struct Field2<S: Real> {
    grid: Arc<Grid<S>>,
    comps: Vec<Vec<S>>,
}

field_common!(Field3);
field_common!(Field2);

impl<S: Real> PartialEq for Field3<S> {
    fn eq(&self, other: &Self) -> bool {
        self.grid.spec() == other.grid.spec() && self.comps == other.comps
    }
}

impl<S: Real> PartialEq for Field2<S> {
    fn eq(&self, other: &Self) -> bool {
        self.grid.spec() == other.grid.spec() && self.comps == other.comps
    }
}

impl<S: Real> Field3<S> {
    pub fn zeros(grid: &Arc<Grid<S>>, ncomp: usize) -> Self {
        Field3 {
            grid: grid.clone(),
            comps: vec![vec![S::zero(); grid.len()]; ncomp],
        }
    }

    pub fn from_comps(grid: &Arc<Grid<S>>, comps: Vec<Vec<S>>) -> Result<Self> {
        if comps.is_empty() || comps.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::Shape(format!(
                "expected non-empty components of length {}",
                grid.len()
            )));
        }
        Ok(Field3 {
            grid: grid.clone(),
            comps,
        })
    }

    /// Samples `f(component, x, y, z)` at every node.
    pub fn from_fn(grid: &Arc<Grid<S>>, ncomp: usize, f: impl Fn(usize, S, S, S) -> S) -> Self {
        let (nx, ny) = (grid.nx(), grid.ny());
        let comps = (0..ncomp)
            .map(|c| {
                let mut data = Vec::with_capacity(grid.len());
                for &z in &grid.zs {
                    for j in 0..ny {
                        for i in 0..nx {
                            data.push(f(c, grid.xs[i], grid.ys[j], z));
                        }
                    }
                }
                data
            })
            .collect();
        Field3 {
            grid: grid.clone(),
            comps,
        }
    }

    /// Scalar field from `f(x, y, z)`.
    pub fn scalar_fn(grid: &Arc<Grid<S>>, f: impl Fn(S, S, S) -> S) -> Self {
        Self::from_fn(grid, 1, |_, x, y, z| f(x, y, z))
    }

    /// Constant-in-z extension of a horizontal field.
    pub fn extend(f2: &Field2<S>) -> Self {
        let nz = f2.grid.nz();
        let comps = f2
            .comps
            .iter()
            .map(|c| {
                let mut v = Vec::with_capacity(c.len() * nz);
                for _ in 0..nz {
                    v.extend_from_slice(c);
                }
                v
            })
            .collect();
        Field3 {
            grid: f2.grid.clone(),
            comps,
        }
    }

    /// Value at node `(i, j, k)` of component `c`.
    pub fn at(&self, c: usize, i: usize, j: usize, k: usize) -> S {
        let g = &self.grid;
        self.comps[c][i + g.nx() * (j + g.ny() * k)]
    }

    /// Horizontal plane `k` of component `c`.
    pub fn level(&self, c: usize, k: usize) -> &[S] {
        let p = self.grid.plane_len();
        &self.comps[c][k * p..(k + 1) * p]
    }

    /// Single-component view.
    pub fn component(&self, c: usize) -> Field3<S> {
        Field3 {
            grid: self.grid.clone(),
            comps: vec![self.comps[c].clone()],
        }
    }

    /// Pointwise-weighted inner product over `Ω` (all components summed).
    pub fn inner(&self, other: &Self) -> S {
        self.check_shape(other);
        let g = &self.grid;
        let p = g.plane_len();
        let mut total = S::zero();
        for (a, b) in self.comps.iter().zip(&other.comps) {
            for (k, &w) in g.wz.iter().enumerate() {
                let s: S = a[k * p..(k + 1) * p]
                    .iter()
                    .zip(&b[k * p..(k + 1) * p])
                    .map(|(&x, &y)| x * y)
                    .sum();
                total += w * s;
            }
        }
        total * g.cell_area()
    }

    /// Discrete `L²(Ω)` norm.
    pub fn l2_norm(&self) -> S {
        self.inner(self).max(S::zero()).sqrt()
    }

    /// Values on the plane `z = -h` (`top = false`) or `z = +h`.
    pub fn boundary_max_abs(&self, top: bool) -> S {
        let k = if top { self.grid.nz() - 1 } else { 0 };
        (0..self.ncomp())
            .flat_map(|c| self.level(c, k).iter().copied())
            .fold(S::zero(), |m, v| m.max(v.abs()))
    }

    /// Converts to another precision on a matching grid.
    pub fn cast<T: Real>(&self, grid: &Arc<Grid<T>>) -> Field3<T> {
        assert_eq!(self.grid.spec(), grid.spec());
        Field3 {
            grid: grid.clone(),
            comps: self
                .comps
                .iter()
                .map(|c| c.iter().map(|v| T::lit(v.as_f64())).collect())
                .collect(),
        }
    }
}

impl<S: Real> Field2<S> {
    pub fn zeros(grid: &Arc<Grid<S>>, ncomp: usize) -> Self {
        Field2 {
            grid: grid.clone(),
            comps: vec![vec![S::zero(); grid.plane_len()]; ncomp],
        }
    }

    pub fn from_comps(grid: &Arc<Grid<S>>, comps: Vec<Vec<S>>) -> Result<Self> {
        if comps.is_empty() || comps.iter().any(|c| c.len() != grid.plane_len()) {
            return Err(Error::Shape(format!(
                "expected non-empty components of length {}",
                grid.plane_len()
            )));
        }
        Ok(Field2 {
            grid: grid.clone(),
            comps,
        })
    }

    pub fn from_fn(grid: &Arc<Grid<S>>, ncomp: usize, f: impl Fn(usize, S, S) -> S) -> Self {
        let (nx, ny) = (grid.nx(), grid.ny());
        let comps = (0..ncomp)
            .map(|c| {
                let mut data = Vec::with_capacity(nx * ny);
                for j in 0..ny {
                    for i in 0..nx {
                        data.push(f(c, grid.xs[i], grid.ys[j]));
                    }
                }
                data
            })
            .collect();
        Field2 {
            grid: grid.clone(),
            comps,
        }
    }

    pub fn scalar_fn(grid: &Arc<Grid<S>>, f: impl Fn(S, S) -> S) -> Self {
        Self::from_fn(grid, 1, |_, x, y| f(x, y))
    }

    pub fn at(&self, c: usize, i: usize, j: usize) -> S {
        self.comps[c][i + self.grid.nx() * j]
    }

    pub fn component(&self, c: usize) -> Field2<S> {
        Field2 {
            grid: self.grid.clone(),
            comps: vec![self.comps[c].clone()],
        }
    }

    /// Inner product over `G`.
    pub fn inner(&self, other: &Self) -> S {
        self.check_shape(other);
        let s: S = self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| x * y).sum::<S>())
            .sum();
        s * self.grid.cell_area()
    }

    /// Discrete `L²(G)` norm.
    pub fn l2_norm(&self) -> S {
        self.inner(self).max(S::zero()).sqrt()
    }

    /// Horizontal mean `(1/|G|) ∫_G f` of component `c`.
    pub fn mean(&self, c: usize) -> S {
        let n = S::from_usize_lossy(self.grid.plane_len());
        self.comps[c].iter().copied().sum::<S>() / n
    }

    pub fn cast<T: Real>(&self, grid: &Arc<Grid<T>>) -> Field2<T> {
        assert_eq!(self.grid.spec(), grid.spec());
        Field2 {
            grid: grid.clone(),
            comps: self
                .comps
                .iter()
                .map(|c| c.iter().map(|v| T::lit(v.as_f64())).collect())
                .collect(),
        }
    }
}

/// Horizontal Fourier coefficients of a [`Field3`], per vertical level.
#[derive(Clone, Debug)]
pub struct Spectral3<S: Real> {
    grid: Arc<Grid<S>>,
    comps: Vec<Vec<Complex<S>>>,
}

/// Horizontal Fourier coefficients of a [`Field2`].
#[derive(Clone, Debug)]
pub struct Spectral2<S: Real> {
    grid: Arc<Grid<S>>,
    comps: Vec<Vec<Complex<S>>>,
}

macro_rules! spectral_common {
    ($name:ident) => {
        impl<S: Real> $name<S> {
            pub fn grid(&self) -> &Arc<Grid<S>> {
                &self.grid
            }

            pub fn ncomp(&self) -> usize {
                self.comps.len()
            }

            pub fn comp(&self, c: usize) -> &[Complex<S>] {
                &self.comps[c]
            }

            pub fn comp_mut(&mut self, c: usize) -> &mut [Complex<S>] {
                &mut self.comps[c]
            }

            /// 2/3-rule truncation.
            pub fn dealias(mut self) -> Self {
                for c in &mut self.comps {
                    self.grid.dealias_lattice(c);
                }
                self
            }

            /// Largest deviation from Hermitian symmetry `c(-m) = conj(c(m))`.
            pub fn hermitian_defect(&self) -> S {
                let g = &self.grid;
                let (nx, ny) = (g.nx(), g.ny());
                let mut worst = S::zero();
                for c in &self.comps {
                    for level in c.chunks(nx * ny) {
                        for j in 0..ny {
                            for i in 0..nx {
                                let ii = (nx - i) % nx;
                                let jj = (ny - j) % ny;
                                let d = level[i + nx * j] - level[ii + nx * jj].conj();
                                worst = worst.max(d.norm());
                            }
                        }
                    }
                }
                worst
            }
        }
    };
}

spectral_common!(Spectral3);
spectral_common!(Spectral2);

impl<S: Real> Spectral3<S> {
    /// Coefficient of mode `(mx, my)` at level `k`, or zero if unresolved.
    pub fn coefficient(&self, c: usize, k: usize, mx: i64, my: i64) -> Complex<S> {
        let g = &self.grid;
        match g.slot(mx, my) {
            Some((i, j)) => self.comps[c][i + g.nx() * (j + g.ny() * k)],
            None => Complex::new(S::zero(), S::zero()),
        }
    }
}

impl<S: Real> Spectral2<S> {
    pub fn coefficient(&self, c: usize, mx: i64, my: i64) -> Complex<S> {
        let g = &self.grid;
        match g.slot(mx, my) {
            Some((i, j)) => self.comps[c][i + g.nx() * j],
            None => Complex::new(S::zero(), S::zero()),
        }
    }
}

/// Horizontal transform of every level of every component.
pub fn forward_transform<S: Real>(f: &Field3<S>) -> Spectral3<S> {
    Spectral3 {
        grid: f.grid.clone(),
        comps: f.comps.iter().map(|c| f.grid.forward_lattice(c)).collect(),
    }
}

pub fn inverse_transform<S: Real>(f: &Spectral3<S>) -> Field3<S> {
    Field3 {
        grid: f.grid.clone(),
        comps: f.comps.iter().map(|c| f.grid.inverse_lattice(c)).collect(),
    }
}

pub fn forward_transform_2d<S: Real>(f: &Field2<S>) -> Spectral2<S> {
    Spectral2 {
        grid: f.grid.clone(),
        comps: f.comps.iter().map(|c| f.grid.forward_lattice(c)).collect(),
    }
}

pub fn inverse_transform_2d<S: Real>(f: &Spectral2<S>) -> Field2<S> {
    Field2 {
        grid: f.grid.clone(),
        comps: f.comps.iter().map(|c| f.grid.inverse_lattice(c)).collect(),
    }
}

/// 2/3-rule truncation of a spectral field.
pub fn dealias<S: Real>(f: Spectral3<S>) -> Spectral3<S> {
    f.dealias()
}

/// Removes aliased content from a physical field (transform, truncate, invert).
pub fn dealiased<S: Real>(f: &Field3<S>) -> Field3<S> {
    inverse_transform(&forward_transform(f).dealias())
}

pub fn dealiased_2d<S: Real>(f: &Field2<S>) -> Field2<S> {
    inverse_transform_2d(&forward_transform_2d(f).dealias())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(nx: usize, ny: usize, nz: usize) -> Arc<Grid<f64>> {
        Grid::new(DomainSpec::new(1.0, nx, ny, nz).unwrap()).unwrap()
    }

    fn random_field(g: &Arc<Grid<f64>>, ncomp: usize, seed: u64) -> Field3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let comps = (0..ncomp)
            .map(|_| (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        Field3::from_comps(g, comps).unwrap()
    }

    #[test]
    fn domain_validation() {
        assert!(DomainSpec::new(1.0, 7, 8, 8).is_err());
        assert!(DomainSpec::new(1.0, 8, 8, 3).is_err());
        assert!(DomainSpec::new(0.0, 8, 8, 8).is_err());
        let d = DomainSpec::new(0.5, 8, 8, 9).unwrap();
        assert_abs_diff_eq!(d.dz(), 1.0 / 8.0);
        assert_eq!(DomainSpec::new(-1.0, 3, 8, 2).unwrap_err().to_string().matches(';').count(), 2);
    }

    #[test]
    fn constant_field_has_only_mean_mode() {
        let g = grid(8, 8, 5);
        let f = Field3::scalar_fn(&g, |_, _, _| 2.5);
        let s = forward_transform(&f);
        for k in 0..5 {
            for (idx, c) in s.comp(0)[k * 64..(k + 1) * 64].iter().enumerate() {
                let expect = if idx == 0 { 2.5 } else { 0.0 };
                assert_abs_diff_eq!(c.re, expect, epsilon = 1e-14);
                assert_abs_diff_eq!(c.im, 0.0, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn sine_mode_matches_direct_dft() {
        let g = grid(8, 8, 4);
        let f = Field3::scalar_fn(&g, |x, _, _| (std::f64::consts::PI * x).sin());
        let s = forward_transform(&f);
        // independent oracle: direct summation (1/N) Σ f e^{-iπ(mx x + my y)}
        for mx in -3i64..=3 {
            for my in -3i64..=3 {
                let mut acc = Complex::new(0.0, 0.0);
                for j in 0..8 {
                    for i in 0..8 {
                        let (x, y) = (g.xs()[i], g.ys()[j]);
                        let ph = -std::f64::consts::PI * (mx as f64 * x + my as f64 * y);
                        acc += Complex::new(ph.cos(), ph.sin()) * f.at(0, i, j, 0);
                    }
                }
                acc /= 64.0;
                let c = s.coefficient(0, 0, mx, my);
                assert_abs_diff_eq!(c.re, acc.re, epsilon = 1e-14);
                assert_abs_diff_eq!(c.im, acc.im, epsilon = 1e-14);
            }
        }
        let plus = s.coefficient(0, 2, 1, 0);
        let minus = s.coefficient(0, 2, -1, 0);
        assert_abs_diff_eq!(plus.im, -0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(minus.im, 0.5, epsilon = 1e-14);
    }

    #[test]
    fn roundtrip_and_parseval() {
        let g = grid(12, 10, 6);
        let f = random_field(&g, 2, 7);
        let s = forward_transform(&f);
        let back = inverse_transform(&s);
        assert!(back.max_diff(&f) < 1e-12);
        assert!(s.hermitian_defect() < 1e-14);
        // per-level: (1/N) Σ f² = Σ |c|²
        for c in 0..2 {
            for k in 0..6 {
                let phys: f64 = f.level(c, k).iter().map(|v| v * v).sum::<f64>() / 120.0;
                let spec: f64 = s.comp(c)[k * 120..(k + 1) * 120].iter().map(|z| z.norm_sqr()).sum();
                assert!((phys - spec).abs() <= 1e-12 * phys);
            }
        }
    }

    #[test]
    fn transform_is_linear() {
        let g = grid(8, 8, 4);
        let f = random_field(&g, 1, 1);
        let h = random_field(&g, 1, 2);
        let combo = f.scaled(0.3).add(&h.scaled(-1.7));
        let lhs = forward_transform(&combo);
        let (sf, sh) = (forward_transform(&f), forward_transform(&h));
        for idx in 0..g.len() {
            let rhs = sf.comp(0)[idx] * 0.3 + sh.comp(0)[idx] * -1.7;
            assert!((lhs.comp(0)[idx] - rhs).norm() < 1e-14);
        }
    }

    #[test]
    fn dealias_cutoff_nx12() {
        let g = grid(12, 12, 4);
        // oracle: enumerate 3|m| < 12, i.e. |m| ≤ 3, as retained
        for i in 0..12 {
            for j in 0..12 {
                let (mx, my) = g.mode(i, j);
                let expect = mx.abs() <= 3 && my.abs() <= 3;
                assert_eq!(g.retained(i, j), expect, "mode ({mx},{my})");
            }
        }
        let high = Field3::scalar_fn(&g, |x, y, _| {
            (5.0 * std::f64::consts::PI * x).cos() + (6.0 * std::f64::consts::PI * y).cos()
        });
        assert!(dealiased(&high).max_abs() < 1e-13);
        let low = Field3::scalar_fn(&g, |x, y, z| (3.0 * std::f64::consts::PI * x).sin() * (std::f64::consts::PI * y).cos() * z);
        assert!(dealiased(&low).max_diff(&low) < 1e-13);
        let zero = Field3::zeros(&g, 2);
        assert_eq!(dealiased(&zero).max_abs(), 0.0);
    }

    #[test]
    fn quadrature_weights_sum_and_exactness() {
        for nz in [4usize, 5, 6, 7, 8, 9, 16, 17] {
            let g = grid(4, 4, nz);
            let w = g.vertical_weights();
            let z = g.zs();
            let total: f64 = w.iter().sum();
            assert_abs_diff_eq!(total, 2.0, epsilon = 1e-13);
            for p in 0..=3 {
                let q: f64 = w.iter().zip(z).map(|(w, z)| w * z.powi(p)).sum();
                let exact = if p % 2 == 0 { 2.0 / (p as f64 + 1.0) } else { 0.0 };
                assert_abs_diff_eq!(q, exact, epsilon = 1e-13);
            }
        }
    }

    #[test]
    fn single_precision_roundtrip() {
        let g = Grid::<f32>::new(DomainSpec::cube(8).unwrap()).unwrap();
        let f = Field3::from_fn(&g, 2, |c, x, y, z| (c as f32 + 1.0) * (x * 3.0).sin() + y * z);
        let back = inverse_transform(&forward_transform(&f));
        assert!(back.max_diff(&f) < 1e-5);
    }
}
