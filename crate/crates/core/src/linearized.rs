//! The linear transport-diffusion problem
//! `∂t v + a v + b·∇_H v + w ∂z v − Δ_H v = f`: its Galerkin system in
//! `H = H¹((−h, h), L²(G))`, an implicit-midpoint ODE integrator, the energy
//! bound, and a grid IMEX solver for cross-validation.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::calculus::{apply_derivative, Axis};
use crate::error::{Error, Result};
use crate::grid::{dealiased, forward_transform, inverse_transform, DomainSpec, Field3, Grid};
use crate::nonlinear::{advect_horizontal, advect_vertical};
use crate::timestepper::{cn_field3, uniform_steps};
use crate::viscosity::ViscosityModel;
use crate::Real;

/// Coefficients `a`, `b`, `w` frozen at one instant.
#[derive(Clone, Debug)]
pub struct CoefficientFrame<S: Real> {
    pub a: Field3<S>,
    pub b: Field3<S>,
    pub w: Field3<S>,
}

/// Scalar time profile `θ(t)`.
pub type Profile = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Separable source `f(t, x) = Σ θ_k(t) F_k(x)`.
#[derive(Clone, Default)]
pub struct Forcing<S: Real> {
    terms: Vec<(Profile, Field3<S>)>,
}

impl<S: Real> std::fmt::Debug for Forcing<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Forcing").field("terms", &self.terms.len()).finish()
    }
}

impl<S: Real> Forcing<S> {
    pub fn none() -> Self {
        Forcing { terms: Vec::new() }
    }

    /// Time-independent source.
    pub fn steady(f: Field3<S>) -> Self {
        Self::none().with_term(|_| 1.0, f)
    }

    pub fn with_term(mut self, theta: impl Fn(f64) -> f64 + Send + Sync + 'static, f: Field3<S>) -> Self {
        self.terms.push((Arc::new(theta), f));
        self
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// `f(t)` on the grid; `None` when there is no source.
    pub fn at(&self, t: f64) -> Option<Field3<S>> {
        let mut it = self.terms.iter();
        let (theta, f) = it.next()?;
        let mut out = f.scaled(S::lit(theta(t)));
        for (theta, f) in it {
            out.axpy(S::lit(theta(t)), f);
        }
        Some(out)
    }
}

/// Data of the linear problem. `a`, `b`, `w` are given at increasing times and
/// interpolated linearly; a single frame means constant coefficients.
#[derive(Clone, Debug)]
pub struct CoefficientData<S: Real> {
    frames: Vec<(f64, CoefficientFrame<S>)>,
    pub f: Forcing<S>,
}

/// Sup norms entering the energy bound.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SupNorms {
    pub a: f64,
    pub a_z: f64,
    pub b: f64,
    pub b_z: f64,
    pub w_z: f64,
}

fn sup<S: Real>(f: &Field3<S>) -> f64 {
    f.max_abs().as_f64()
}

fn sup_vector<S: Real>(b: &Field3<S>) -> f64 {
    b.comp(0)
        .iter()
        .zip(b.comp(1))
        .map(|(&x, &y)| (x * x + y * y).sqrt().as_f64())
        .fold(0.0, f64::max)
}

impl<S: Real> CoefficientData<S> {
    pub fn constant(a: Field3<S>, b: Field3<S>, w: Field3<S>, f: Forcing<S>) -> Result<Self> {
        Self::from_frames(vec![(0.0, CoefficientFrame { a, b, w })], f)
    }

    pub fn zeros(grid: &Arc<Grid<S>>) -> Self {
        CoefficientData {
            frames: vec![(
                0.0,
                CoefficientFrame {
                    a: Field3::zeros(grid, 1),
                    b: Field3::zeros(grid, 2),
                    w: Field3::zeros(grid, 1),
                },
            )],
            f: Forcing::none(),
        }
    }

    /// Validates shapes, time ordering and `w(±h) = 0`.
    pub fn from_frames(frames: Vec<(f64, CoefficientFrame<S>)>, f: Forcing<S>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument("coefficient data needs at least one frame".into()));
        }
        let grid = frames[0].1.a.grid().clone();
        for (i, (t, fr)) in frames.iter().enumerate() {
            if i > 0 && !(*t > frames[i - 1].0) {
                return Err(Error::InvalidArgument("coefficient frame times must increase".into()));
            }
            if fr.a.ncomp() != 1 || fr.b.ncomp() != 2 || fr.w.ncomp() != 1 {
                return Err(Error::Shape("a and w are scalar, b has two components".into()));
            }
            for x in [&fr.a, &fr.b, &fr.w] {
                if x.grid().spec() != grid.spec() {
                    return Err(Error::Shape("coefficients live on different grids".into()));
                }
            }
            let wb = fr.w.boundary_max_abs(false).max(fr.w.boundary_max_abs(true)).as_f64();
            if wb > 1e-10 {
                return Err(Error::InvalidArgument(format!("w must vanish at z = ±h, found {wb:.3e}")));
            }
        }
        Ok(CoefficientData { frames, f })
    }

    pub fn grid(&self) -> &Arc<Grid<S>> {
        self.frames[0].1.a.grid()
    }

    pub fn frames(&self) -> &[(f64, CoefficientFrame<S>)] {
        &self.frames
    }

    /// Coefficients at time `t` (clamped to the frame range).
    pub fn at(&self, t: f64) -> CoefficientFrame<S> {
        let fr = &self.frames;
        if fr.len() == 1 || t <= fr[0].0 {
            return fr[0].1.clone();
        }
        let last = fr.len() - 1;
        if t >= fr[last].0 {
            return fr[last].1.clone();
        }
        let k = fr.iter().position(|(s, _)| *s > t).expect("inside range") - 1;
        let (t0, a) = &fr[k];
        let (t1, b) = &fr[k + 1];
        let th = S::lit((t - t0) / (t1 - t0));
        let mix = |x: &Field3<S>, y: &Field3<S>| {
            let mut o = x.scaled(S::one() - th);
            o.axpy(th, y);
            o
        };
        CoefficientFrame {
            a: mix(&a.a, &b.a),
            b: mix(&a.b, &b.b),
            w: mix(&a.w, &b.w),
        }
    }

    /// Sup norms over every frame, with `z`-derivatives by finite differences.
    pub fn sup_norms(&self) -> SupNorms {
        let mut s = SupNorms::default();
        for (_, fr) in &self.frames {
            s.a = s.a.max(sup(&fr.a));
            s.a_z = s.a_z.max(sup(&apply_derivative(&fr.a, Axis::Z, 1)));
            s.b = s.b.max(sup_vector(&fr.b));
            s.b_z = s.b_z.max(sup_vector(&apply_derivative(&fr.b, Axis::Z, 1)));
            s.w_z = s.w_z.max(sup(&apply_derivative(&fr.w, Axis::Z, 1)));
        }
        s
    }
}

/// One-dimensional real Fourier factor on `(−1, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trig {
    Const,
    Cos(u32),
    Sin(u32),
}

impl Trig {
    /// `Const, cos πx, sin πx, cos 2πx, sin 2πx, …`.
    fn nth(n: usize) -> Trig {
        if n == 0 {
            Trig::Const
        } else if n % 2 == 1 {
            Trig::Cos(n.div_ceil(2) as u32)
        } else {
            Trig::Sin((n / 2) as u32)
        }
    }

    pub fn wavenumber(self) -> f64 {
        match self {
            Trig::Const => 0.0,
            Trig::Cos(m) | Trig::Sin(m) => PI * m as f64,
        }
    }

    fn eval(self, x: f64) -> f64 {
        match self {
            Trig::Const => 1.0,
            Trig::Cos(m) => (PI * m as f64 * x).cos(),
            Trig::Sin(m) => (PI * m as f64 * x).sin(),
        }
    }

    fn deriv(self, x: f64) -> f64 {
        let k = self.wavenumber();
        match self {
            Trig::Const => 0.0,
            Trig::Cos(_) => -k * (k * x).sin(),
            Trig::Sin(_) => k * (k * x).cos(),
        }
    }

    /// `∫_{−1}^{1} φ²`.
    fn norm_sq(self) -> f64 {
        match self {
            Trig::Const => 2.0,
            _ => 1.0,
        }
    }
}

/// `scale · X(x) Y(y) cos(m π (z + h) / 2h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BasisMode {
    pub x: Trig,
    pub y: Trig,
    pub m: u32,
    pub scale: f64,
}

impl BasisMode {
    /// `(kx, ky, m)`.
    pub fn triple(&self) -> (f64, f64, u32) {
        (self.x.wavenumber(), self.y.wavenumber(), self.m)
    }

    /// `‖X Y cos(…)‖²_H` before scaling.
    pub fn raw_h_norm_sq(&self, h: f64) -> f64 {
        let g = self.x.norm_sq() * self.y.norm_sq();
        let q = self.m as f64 * PI / (2.0 * h);
        let (zz, dz) = if self.m == 0 { (2.0 * h, 0.0) } else { (h, q * q * h) };
        g * (zz + dz)
    }
}

/// H-orthonormal tensor basis.
#[derive(Clone, Debug)]
pub struct GalerkinBasis {
    pub domain: DomainSpec,
    pub modes: Vec<BasisMode>,
}

impl GalerkinBasis {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }
}

/// `n_h` horizontal factors in shells of growing index (so 1, 4, 9, 16 give
/// square blocks), times the first `n_z` vertical cosines.
pub fn build_basis(n_h: usize, n_z: usize, domain: DomainSpec) -> Result<GalerkinBasis> {
    if n_h == 0 || n_z == 0 {
        return Err(Error::InvalidArgument("basis counts must be at least 1".into()));
    }
    let mut pairs = Vec::new();
    let mut shell = 0usize;
    while pairs.len() < n_h {
        for p in 0..=shell {
            for q in 0..=shell {
                if p.max(q) == shell {
                    pairs.push((p, q));
                }
            }
        }
        shell += 1;
    }
    pairs.truncate(n_h);
    let h = domain.half_height;
    let mut modes = Vec::with_capacity(n_h * n_z);
    for m in 0..n_z as u32 {
        for &(p, q) in &pairs {
            let mut mode = BasisMode {
                x: Trig::nth(p),
                y: Trig::nth(q),
                m,
                scale: 1.0,
            };
            mode.scale = 1.0 / mode.raw_h_norm_sq(h).sqrt();
            modes.push(mode);
        }
    }
    Ok(GalerkinBasis { domain, modes })
}

/// A basis function and the derivatives the H products need, on the grid.
struct Sampled {
    v: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    xz: Vec<f64>,
    yz: Vec<f64>,
    zz: Vec<f64>,
}

fn sample<S: Real>(mode: &BasisMode, grid: &Grid<S>) -> Sampled {
    let h = grid.half_height().as_f64();
    let q = mode.m as f64 * PI / (2.0 * h);
    let xs: Vec<f64> = grid.xs().iter().map(|v| v.as_f64()).collect();
    let ys: Vec<f64> = grid.ys().iter().map(|v| v.as_f64()).collect();
    let n = grid.len();
    let mut s = Sampled {
        v: Vec::with_capacity(n),
        x: Vec::with_capacity(n),
        y: Vec::with_capacity(n),
        z: Vec::with_capacity(n),
        xz: Vec::with_capacity(n),
        yz: Vec::with_capacity(n),
        zz: Vec::with_capacity(n),
    };
    for z in grid.zs().iter().map(|v| v.as_f64()) {
        let c = (q * (z + h)).cos() * mode.scale;
        let cz = -q * (q * (z + h)).sin() * mode.scale;
        let czz = -q * q * c;
        for &y in &ys {
            let (fy, dy) = (mode.y.eval(y), mode.y.deriv(y));
            for &x in &xs {
                let (fx, dx) = (mode.x.eval(x), mode.x.deriv(x));
                let xy = fx * fy;
                s.v.push(xy * c);
                s.x.push(dx * fy * c);
                s.y.push(fx * dy * c);
                s.z.push(xy * cz);
                s.xz.push(dx * fy * cz);
                s.yz.push(fx * dy * cz);
                s.zz.push(xy * czz);
            }
        }
    }
    s
}

/// Quadrature weights of `L²(Ω)` per lattice node.
fn node_weights<S: Real>(grid: &Grid<S>) -> Vec<f64> {
    let plane = grid.plane_len();
    let area = grid.cell_area().as_f64();
    let mut w = Vec::with_capacity(grid.len());
    for &wz in grid.vertical_weights() {
        w.extend(std::iter::repeat_n(wz.as_f64() * area, plane));
    }
    w
}

fn dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((&q, &x), &y)| q * x * y).sum()
}

fn lattice<S: Real>(f: &Field3<S>, c: usize) -> Vec<f64> {
    f.comp(c).iter().map(|v| v.as_f64()).collect()
}

/// Matrices of the Galerkin ODE for one coefficient frame.
#[derive(Clone, Debug)]
pub struct FrameMatrices {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub w: DMatrix<f64>,
}

/// `g' + [A + B + W + D] g = f_n(t)`, `g(0) = g0`.
#[derive(Clone)]
pub struct GalerkinSystem {
    pub frames: Vec<(f64, FrameMatrices)>,
    pub d: DMatrix<f64>,
    /// `(θ_k, ⟨F_k, Φ_i⟩_H)` for each forcing term.
    forcing: Vec<(Profile, DVector<f64>)>,
    pub g0: DVector<f64>,
}

impl std::fmt::Debug for GalerkinSystem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GalerkinSystem")
            .field("dim", &self.dim())
            .field("frames", &self.frames.len())
            .field("forcing_terms", &self.forcing.len())
            .finish()
    }
}

impl GalerkinSystem {
    pub fn dim(&self) -> usize {
        self.d.nrows()
    }

    /// `A + B + W + D` at time `t`.
    pub fn operator_at(&self, t: f64) -> DMatrix<f64> {
        let total = |m: &FrameMatrices| &m.a + &m.b + &m.w;
        let fr = &self.frames;
        let core = if fr.len() == 1 || t <= fr[0].0 {
            total(&fr[0].1)
        } else if t >= fr[fr.len() - 1].0 {
            total(&fr[fr.len() - 1].1)
        } else {
            let k = fr.iter().position(|(s, _)| *s > t).expect("inside range") - 1;
            let th = (t - fr[k].0) / (fr[k + 1].0 - fr[k].0);
            total(&fr[k].1) * (1.0 - th) + total(&fr[k + 1].1) * th
        };
        core + &self.d
    }

    pub fn forcing_at(&self, t: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        for (theta, v) in &self.forcing {
            out.axpy(theta(t), v, 1.0);
        }
        out
    }
}

/// H-inner product of each sampled pair, `⟨u, v⟩ + ⟨u_z, v_z⟩`.
fn h_products(w: &[f64], basis: &[Sampled], u: &[f64], uz: &[f64]) -> DVector<f64> {
    DVector::from_iterator(basis.len(), basis.iter().map(|p| dot(w, u, &p.v) + dot(w, uz, &p.z)))
}

fn product(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

fn fma(acc: &mut [f64], a: &[f64], b: &[f64]) {
    for ((o, &x), &y) in acc.iter_mut().zip(a).zip(b) {
        *o += x * y;
    }
}

/// H-Gram matrix of the basis sampled on `grid`.
pub fn gram_matrix<S: Real>(basis: &GalerkinBasis, grid: &Grid<S>) -> DMatrix<f64> {
    let w = node_weights(grid);
    let s: Vec<Sampled> = basis.modes.par_iter().map(|m| sample(m, grid)).collect();
    let n = s.len();
    let mut g = DMatrix::zeros(n, n);
    for j in 0..n {
        let col = h_products(&w, &s, &s[j].v, &s[j].z);
        g.set_column(j, &col);
    }
    g
}

/// Assembles the Galerkin system with every H-product taken by grid
/// quadrature; basis derivatives are exact, coefficient `z`-derivatives use
/// the finite-difference stencils.
pub fn assemble_system<S: Real>(coeff: &CoefficientData<S>, basis: &GalerkinBasis, v0: &Field3<S>) -> Result<GalerkinSystem> {
    let grid = coeff.grid().clone();
    if basis.domain != *grid.spec() {
        return Err(Error::Shape("basis and coefficients use different domains".into()));
    }
    let w = node_weights(&grid);
    let s: Vec<Sampled> = basis.modes.par_iter().map(|m| sample(m, &grid)).collect();
    let n = s.len();

    let mut d = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            d[(i, j)] = dot(&w, &s[j].x, &s[i].x)
                + dot(&w, &s[j].y, &s[i].y)
                + dot(&w, &s[j].xz, &s[i].xz)
                + dot(&w, &s[j].yz, &s[i].yz);
        }
    }

    let mut frames = Vec::with_capacity(coeff.frames().len());
    for (t, fr) in coeff.frames() {
        let a = lattice(&fr.a, 0);
        let az = lattice(&apply_derivative(&fr.a, Axis::Z, 1), 0);
        let (b1, b2) = (lattice(&fr.b, 0), lattice(&fr.b, 1));
        let bz = apply_derivative(&fr.b, Axis::Z, 1);
        let (b1z, b2z) = (lattice(&bz, 0), lattice(&bz, 1));
        let wv = lattice(&fr.w, 0);
        let wz = lattice(&apply_derivative(&fr.w, Axis::Z, 1), 0);
        let cols: Vec<[DVector<f64>; 3]> = (0..n)
            .into_par_iter()
            .map(|j| {
                let p = &s[j];
                let av = product(&a, &p.v);
                let mut avz = product(&az, &p.v);
                fma(&mut avz, &a, &p.z);

                let mut bv = product(&b1, &p.x);
                fma(&mut bv, &b2, &p.y);
                let mut bvz = product(&b1z, &p.x);
                fma(&mut bvz, &b2z, &p.y);
                fma(&mut bvz, &b1, &p.xz);
                fma(&mut bvz, &b2, &p.yz);

                let wv_ = product(&wv, &p.z);
                let mut wvz = product(&wz, &p.z);
                fma(&mut wvz, &wv, &p.zz);
                [
                    h_products(&w, &s, &av, &avz),
                    h_products(&w, &s, &bv, &bvz),
                    h_products(&w, &s, &wv_, &wvz),
                ]
            })
            .collect();
        let mut m = FrameMatrices {
            a: DMatrix::zeros(n, n),
            b: DMatrix::zeros(n, n),
            w: DMatrix::zeros(n, n),
        };
        for (j, [ca, cb, cw]) in cols.into_iter().enumerate() {
            m.a.set_column(j, &ca);
            m.b.set_column(j, &cb);
            m.w.set_column(j, &cw);
        }
        frames.push((*t, m));
    }

    let project = |f: &Field3<S>| {
        let fz = apply_derivative(f, Axis::Z, 1);
        h_products(&w, &s, &lattice(f, 0), &lattice(&fz, 0))
    };
    let forcing = coeff.f.terms.iter().map(|(theta, f)| (theta.clone(), project(f))).collect();
    Ok(GalerkinSystem {
        frames,
        d,
        forcing,
        g0: project(v0),
    })
}

/// Implicit-midpoint integration; returns `g` at `0, dt, …, T`.
pub fn integrate_ode(sys: &GalerkinSystem, t_end: f64, dt: f64) -> Result<Vec<(f64, DVector<f64>)>> {
    if !(dt > 0.0) || t_end < dt {
        return Err(Error::InvalidArgument(format!("need 0 < dt <= T, got dt = {dt}, T = {t_end}")));
    }
    let (steps, dt) = uniform_steps(t_end, dt);
    let n = sys.dim();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut g = sys.g0.clone();
    let mut out = vec![(0.0, g.clone())];
    for k in 0..steps {
        let t = k as f64 * dt;
        let tm = t + 0.5 * dt;
        let m = sys.operator_at(tm);
        let lhs = &eye + &m * (0.5 * dt);
        let rhs = (&eye - &m * (0.5 * dt)) * &g + sys.forcing_at(tm) * dt;
        g = lhs.lu().solve(&rhs).ok_or(Error::SingularStep { t })?;
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::SingularStep { t });
        }
        out.push(((k + 1) as f64 * dt, g.clone()));
    }
    Ok(out)
}

/// `Σ g_j Φ_j` on `grid`.
pub fn synthesize<S: Real>(basis: &GalerkinBasis, g: &DVector<f64>, grid: &Arc<Grid<S>>) -> Field3<S> {
    let mut acc = vec![0.0; grid.len()];
    for (mode, &c) in basis.modes.iter().zip(g.iter()) {
        if c == 0.0 {
            continue;
        }
        let s = sample(mode, grid);
        for (a, v) in acc.iter_mut().zip(&s.v) {
            *a += c * v;
        }
    }
    Field3::from_comps(grid, vec![acc.into_iter().map(S::lit).collect()]).expect("shape preserved")
}

/// Right-hand side of the energy estimate, evaluated literally:
/// `(‖v₀‖²_H + 2 ∫‖f‖²_{V'}) · exp((1/2 + ‖w_z‖ + 2(‖a‖ + ‖a_z‖) + 2(‖b‖ + ‖b_z‖)²) T)`.
/// `f_norms` are `(t, ‖f(t)‖_{V'})` samples integrated by the trapezoid rule.
pub fn energy_bound(v0_h_norm: f64, f_norms: &[(f64, f64)], norms: &SupNorms, t_end: f64) -> f64 {
    let f_int: f64 = f_norms
        .windows(2)
        .map(|p| 0.5 * (p[1].0 - p[0].0) * (p[0].1 * p[0].1 + p[1].1 * p[1].1))
        .sum();
    let bb = norms.b + norms.b_z;
    let rate = 0.5 + norms.w_z + 2.0 * (norms.a + norms.a_z) + 2.0 * bb * bb;
    (v0_h_norm * v0_h_norm + 2.0 * f_int) * (rate * t_end).exp()
}

/// `‖u‖²_H = ‖u‖² + ‖∂z u‖²`.
pub fn h_norm_sq<S: Real>(u: &Field3<S>) -> f64 {
    let uz = apply_derivative(u, Axis::Z, 1);
    (u.inner(u) + uz.inner(&uz)).as_f64()
}

/// `‖∇_H u‖²_H`.
pub fn grad_h_norm_sq<S: Real>(u: &Field3<S>) -> f64 {
    [Axis::X, Axis::Y].iter().map(|&ax| h_norm_sq(&apply_derivative(u, ax, 1))).sum()
}

/// `‖f‖_{V'}` with respect to the H pairing: per horizontal mode the H norm
/// is divided by `(1 + |k|²)^{1/2}`.
pub fn v_dual_norm<S: Real>(f: &Field3<S>) -> f64 {
    let g = f.grid().clone();
    let mut spec = forward_transform(f);
    let (nx, ny, plane) = (g.nx(), g.ny(), g.plane_len());
    for c in 0..f.ncomp() {
        for level in spec.comp_mut(c).chunks_mut(plane) {
            for j in 0..ny {
                for i in 0..nx {
                    let (kx, ky) = g.wavenumber(i, j);
                    let s = (S::one() + kx * kx + ky * ky).sqrt();
                    level[i + nx * j] = level[i + nx * j] / s;
                }
            }
        }
    }
    h_norm_sq(&inverse_transform(&spec)).sqrt()
}

/// `sup_t ‖v‖²_H + ∫ ‖∇_H v‖²_H dt` of a trajectory (trapezoid in time).
pub fn energy_functional<S: Real>(traj: &[(f64, Field3<S>)]) -> f64 {
    let sup = traj.iter().map(|(_, v)| h_norm_sq(v)).fold(0.0, f64::max);
    let grads: Vec<f64> = traj.iter().map(|(_, v)| grad_h_norm_sq(v)).collect();
    let int: f64 = traj
        .windows(2)
        .zip(grads.windows(2))
        .map(|(p, g)| 0.5 * (p[1].0 - p[0].0) * (g[0] + g[1]))
        .sum();
    sup + int
}

fn explicit_terms<S: Real>(fr: &CoefficientFrame<S>, v: &Field3<S>) -> Field3<S> {
    let av = Field3::from_comps(
        v.grid(),
        vec![fr.a.comp(0).iter().zip(v.comp(0)).map(|(&a, &x)| a * x).collect()],
    )
    .expect("shape preserved");
    let mut e = dealiased(&av);
    e.axpy(S::one(), &advect_horizontal(&fr.b, v));
    e.axpy(S::one(), &advect_vertical(&fr.w, v));
    e.scale(-S::one());
    e
}

fn advective_limit<S: Real>(fr: &CoefficientFrame<S>) -> f64 {
    let g = fr.a.grid();
    let rate = sup(&fr.b.component(0)) * g.nx() as f64 / 2.0
        + sup(&fr.b.component(1)) * g.ny() as f64 / 2.0
        + sup(&fr.w) / g.spec().dz()
        + sup(&fr.a);
    if rate > 0.0 {
        1.0 / rate
    } else {
        f64::INFINITY
    }
}

/// Grid solve: Crank–Nicolson on `Δ_H`, Adams–Bashforth on `a v + b·∇_H v +
/// w ∂z v`, trapezoidal forcing. Returns `v` at `0, dt, …, T`.
pub fn solve_linearized_grid<S: Real>(
    coeff: &CoefficientData<S>,
    v0: &Field3<S>,
    t_end: f64,
    dt: f64,
) -> Result<Vec<(f64, Field3<S>)>> {
    if v0.ncomp() != 1 || !v0.is_finite() {
        return Err(Error::InvalidArgument("initial data must be a finite scalar field".into()));
    }
    if !(dt > 0.0) || t_end < dt {
        return Err(Error::InvalidArgument(format!("need 0 < dt <= T, got dt = {dt}, T = {t_end}")));
    }
    let (steps, dt) = uniform_steps(t_end, dt);
    let model = ViscosityModel::Horizontal;
    let mut v = v0.clone();
    let mut out = vec![(0.0, v.clone())];
    let mut prev: Option<Field3<S>> = None;
    for k in 0..steps {
        let t = k as f64 * dt;
        let fr = coeff.at(t);
        let limit = advective_limit(&fr);
        if dt > limit {
            return Err(Error::CflViolation { dt, limit });
        }
        let now = explicit_terms(&fr, &v);
        let mut incr = match &prev {
            None => now.clone(),
            Some(old) => {
                let mut e = now.scaled(S::lit(1.5));
                e.axpy(S::lit(-0.5), old);
                e
            }
        };
        if let (Some(f0), Some(f1)) = (coeff.f.at(t), coeff.f.at(t + dt)) {
            incr.axpy(S::lit(0.5), &f0);
            incr.axpy(S::lit(0.5), &f1);
        }
        incr.scale(S::lit(dt));
        v = cn_field3(&model, &v, &incr, dt, t)?;
        prev = Some(now);
        out.push(((k + 1) as f64 * dt, v.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(n: usize, nz: usize) -> Arc<Grid<f64>> {
        Grid::new(DomainSpec::new(1.0, n, n, nz).unwrap()).unwrap()
    }

    #[test]
    fn basis_examples() {
        let g = grid(8, 9);
        let b = build_basis(1, 1, *g.spec()).unwrap();
        assert_eq!(b.len(), 1);
        assert!((b.modes[0].scale - 1.0 / 8f64.sqrt()).abs() < 1e-15);

        let b = build_basis(4, 3, *g.spec()).unwrap();
        assert_eq!(b.len(), 12);
        let gram = gram_matrix(&b, &g);
        assert!((gram - DMatrix::identity(12, 12)).amax() < 1e-12);

        let mode = BasisMode {
            x: Trig::Cos(1),
            y: Trig::Const,
            m: 1,
            scale: 1.0,
        };
        let exact = 8.0 / 4.0 * (1.0 + PI * PI / 4.0);
        assert!((mode.raw_h_norm_sq(1.0) - exact).abs() < 1e-13);
        let s = sample(&mode, &g);
        let w = node_weights(&g);
        let quad = dot(&w, &s.v, &s.v) + dot(&w, &s.z, &s.z);
        assert!((quad - exact).abs() < 1e-12);
    }

    #[test]
    fn shells_give_square_blocks() {
        let spec = DomainSpec::cube(8).unwrap();
        for (nh, side) in [(1usize, 1usize), (4, 2), (9, 3), (16, 4)] {
            let b = build_basis(nh, 1, spec).unwrap();
            let mut xs: Vec<_> = b.modes.iter().map(|m| format!("{:?}", m.x)).collect();
            xs.sort();
            xs.dedup();
            assert_eq!(xs.len(), side);
        }
    }

    #[test]
    fn system_examples() {
        let g = grid(8, 9);
        let basis = build_basis(9, 2, *g.spec()).unwrap();
        let zero = assemble_system(&CoefficientData::zeros(&g), &basis, &Field3::zeros(&g, 1)).unwrap();
        let fm = &zero.frames[0].1;
        assert_eq!(fm.a.amax(), 0.0);
        assert_eq!(fm.b.amax(), 0.0);
        assert_eq!(fm.w.amax(), 0.0);
        assert!((&zero.d - zero.d.transpose()).amax() < 1e-12);
        assert!(zero.d.clone().symmetric_eigenvalues().min() > -1e-12);

        // horizontal modes only, constant b: skew-symmetric
        let flat = build_basis(9, 1, *g.spec()).unwrap();
        let b = Field3::from_fn(&g, 2, |c, _, _, _| if c == 0 { 0.7 } else { -0.4 });
        let data = CoefficientData::constant(Field3::zeros(&g, 1), b, Field3::zeros(&g, 1), Forcing::none()).unwrap();
        let sys = assemble_system(&data, &flat, &Field3::zeros(&g, 1)).unwrap();
        let bm = &sys.frames[0].1.b;
        assert!(bm.amax() > 0.1);
        assert!((bm + bm.transpose()).amax() < 1e-12);

        // mode (π, 0, 0): D = π²
        let idx = flat.modes.iter().position(|m| m.x == Trig::Cos(1) && m.y == Trig::Const).unwrap();
        assert!((sys.d[(idx, idx)] - PI * PI).abs() < 1e-12);
    }

    #[test]
    fn ode_examples() {
        let mk = |d: f64, g0: f64| GalerkinSystem {
            frames: vec![(
                0.0,
                FrameMatrices {
                    a: DMatrix::zeros(1, 1),
                    b: DMatrix::zeros(1, 1),
                    w: DMatrix::zeros(1, 1),
                },
            )],
            d: DMatrix::from_element(1, 1, d),
            forcing: Vec::new(),
            g0: DVector::from_element(1, g0),
        };
        let frozen = integrate_ode(&mk(0.0, 2.5), 1.0, 0.1).unwrap();
        assert!(frozen.iter().all(|(_, g)| g[0] == 2.5));
        let err = |dt: f64| {
            let tr = integrate_ode(&mk(PI * PI, 1.0), 0.2, dt).unwrap();
            (tr.last().unwrap().1[0] - (-PI * PI * 0.2f64).exp()).abs()
        };
        let ratio = err(0.01) / err(0.005);
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
        assert!(integrate_ode(&mk(1.0, 1.0), 0.1, 0.0).is_err());
    }

    #[test]
    fn energy_bound_examples() {
        let zero = SupNorms::default();
        assert!((energy_bound(1.0, &[], &zero, 1.0) - 0.5f64.exp()).abs() < 1e-15);
        assert_eq!(energy_bound(0.0, &[(0.0, 0.0), (1.0, 0.0)], &zero, 1.0), 0.0);
        let wz = SupNorms {
            w_z: 1.0,
            ..zero
        };
        assert!((energy_bound(1.0, &[], &wz, 2.0) - 3f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn grid_solver_examples() {
        let g = grid(16, 9);
        let v0 = Field3::scalar_fn(&g, |x, _, _| (PI * x).sin());
        let data = CoefficientData::zeros(&g);
        let tr = solve_linearized_grid(&data, &v0, 0.1, 1e-4).unwrap();
        let exact = v0.scaled((-PI * PI * 0.1f64).exp());
        let last = &tr.last().unwrap().1;
        assert!(last.max_diff(&exact) < 1e-4 * exact.max_abs());
        let z = solve_linearized_grid(&data, &Field3::zeros(&g, 1), 0.1, 1e-2).unwrap();
        assert!(z.iter().all(|(_, v)| v.max_abs() == 0.0));
    }

    #[test]
    fn grid_solver_recovers_manufactured_solution() {
        let h = 1.0;
        let err = |n: usize, nz: usize, dt: f64| {
            let g = grid(n, nz);
            let a = Field3::scalar_fn(&g, |_, y, z| 0.3 + 0.1 * (PI * y).cos() * z);
            let b = Field3::from_fn(&g, 2, |c, x, _, _| if c == 0 { 0.2 } else { 0.1 * (PI * x).sin() });
            let w = Field3::scalar_fn(&g, |x, _, z| 0.2 * (PI * x).cos() * (1.0 - z * z));
            let q = PI / (2.0 * h);
            let vstar = |x: f64, z: f64| (PI * x).sin() * (q * z).cos();
            // f = ∂t v* + a v* + b·∇v* + w ∂z v* − Δ v*, with v* = e^{−t} V
            let f = Field3::scalar_fn(&g, |x, y, z| {
                let v = vstar(x, z);
                let vx = PI * (PI * x).cos() * (q * z).cos();
                let vz = -q * (PI * x).sin() * (q * z).sin();
                let aa = 0.3 + 0.1 * (PI * y).cos() * z;
                let ww = 0.2 * (PI * x).cos() * (1.0 - z * z);
                -v + aa * v + 0.2 * vx + ww * vz + PI * PI * v
            });
            let data = CoefficientData::constant(a, b, w, Forcing::none().with_term(|t| (-t).exp(), f)).unwrap();
            let v0 = Field3::scalar_fn(&g, |x, _, z| vstar(x, z));
            let tr = solve_linearized_grid(&data, &v0, 0.2, dt).unwrap();
            tr.last().unwrap().1.max_diff(&v0.scaled((-0.2f64).exp()))
        };
        let e1 = err(16, 17, 2e-2);
        let e2 = err(16, 17, 1e-2);
        assert!(err(16, 17, 1e-3) < 1e-5);
        assert!((e1 / e2).log2() > 1.7, "{e1:e} {e2:e}");
    }

    #[test]
    fn w_quadratic_form_is_bounded() {
        let g = grid(8, 17);
        let basis = build_basis(9, 3, *g.spec()).unwrap();
        let w = Field3::scalar_fn(&g, |x, y, z| (0.5 + 0.3 * (PI * x).sin() * (PI * y).cos()) * (1.0 - z * z));
        let data = CoefficientData::constant(Field3::zeros(&g, 1), Field3::zeros(&g, 2), w, Forcing::none()).unwrap();
        let sys = assemble_system(&data, &basis, &Field3::zeros(&g, 1)).unwrap();
        let wz = data.sup_norms().w_z;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let v = DVector::from_fn(basis.len(), |_, _| rng.gen_range(-1.0..1.0));
            let q = v.dot(&(&sys.frames[0].1.w * &v));
            assert!(q.abs() <= 0.5 * wz * v.norm_squared() * 1.01, "{q} vs {}", 0.5 * wz * v.norm_squared());
        }
    }

    #[test]
    fn repeated_grid_solves_agree() {
        let g = grid(8, 9);
        let w = Field3::scalar_fn(&g, |x, _, z| 0.3 * (PI * x).sin() * (1.0 - z * z));
        let b = Field3::from_fn(&g, 2, |c, _, y, _| if c == 0 { 0.2 * (PI * y).cos() } else { 0.1 });
        let data = CoefficientData::constant(Field3::scalar_fn(&g, |_, _, z| 0.1 * z), b, w, Forcing::none()).unwrap();
        let v0 = Field3::scalar_fn(&g, |x, y, z| (PI * x).cos() * (PI * y).sin() + z);
        let a = solve_linearized_grid(&data, &v0, 0.05, 1e-3).unwrap();
        let b = solve_linearized_grid(&data, &v0, 0.05, 1e-3).unwrap();
        let gap = a.iter().zip(&b).map(|(x, y)| x.1.max_diff(&y.1)).fold(0.0, f64::max);
        assert!(gap < 1e-13, "{gap:e}");
    }

    #[test]
    fn rejects_w_not_vanishing_at_walls() {
        let g = grid(8, 9);
        let w = Field3::scalar_fn(&g, |_, _, z| z);
        assert!(CoefficientData::constant(Field3::zeros(&g, 1), Field3::zeros(&g, 2), w, Forcing::none()).is_err());
    }

    #[test]
    fn dual_norm_is_weaker_than_h_norm() {
        let g = grid(8, 9);
        let f = Field3::scalar_fn(&g, |x, _, z| (PI * x).cos() * z);
        let d = v_dual_norm(&f);
        assert!((d - h_norm_sq(&f).sqrt() / (1.0 + PI * PI).sqrt()).abs() < 1e-12);
    }
}
