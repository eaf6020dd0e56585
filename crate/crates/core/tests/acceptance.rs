//! Acceptance gate: one test per criterion, each printing a PASS/FAIL line
//! with the measured value and its tolerance.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use primeq::calculus::{apply_derivative, split_modes, Axis, SplitState};
use primeq::diagnostics::{anisotropic_estimate_check, invariant_residuals};
use primeq::driver::{compare_linearized, eps_continuation, linearized_problem, run_command, TIMESERIES};
use primeq::grid::{DomainSpec, Field3, Grid};
use primeq::io::{parse_config, random_smooth, read_snapshot, write_snapshot, InitialCondition, LinearizedConfig, Snapshot};
use primeq::linearized::{energy_bound, energy_functional, h_norm_sq, solve_linearized_grid, v_dual_norm, CoefficientData, Forcing};
use primeq::nonlinear::{assemble_rhs, Tendency};
use primeq::timestepper::{
    imex_trajectory, picard_solve, prepare_split, run, RunOptions, SolverState, SplitForcing, TimestepConfig,
};
use primeq::viscosity::ViscosityModel;

fn grid(n: usize, nz: usize) -> Arc<Grid<f64>> {
    Grid::new(DomainSpec::new(1.0, n, n, nz).unwrap()).unwrap()
}

fn report(id: u32, title: &str, pass: bool, detail: &str) {
    let line = format!("acceptance {id:>2} {} {title}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    // written past the test harness capture so the verdict always shows
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {id} failed: {detail}");
}

#[test]
fn criterion_01_operator_exactness() {
    let g = grid(16, 9);
    let mut worst: f64 = 0.0;
    for mx in 0..8i32 {
        for my in 0..8i32 {
            let (kx, ky) = (PI * mx as f64, PI * my as f64);
            let f = Field3::scalar_fn(&g, |x, y, _| (kx * x + ky * y).sin());
            let checks = [
                (Axis::X, 1, Field3::scalar_fn(&g, |x, y, _| kx * (kx * x + ky * y).cos())),
                (Axis::Y, 1, Field3::scalar_fn(&g, |x, y, _| ky * (kx * x + ky * y).cos())),
                (Axis::X, 2, Field3::scalar_fn(&g, |x, y, _| -kx * kx * (kx * x + ky * y).sin())),
                (Axis::Y, 2, Field3::scalar_fn(&g, |x, y, _| -ky * ky * (kx * x + ky * y).sin())),
            ];
            for (axis, order, exact) in checks {
                let scale = 1f64.max(exact.max_abs());
                worst = worst.max(apply_derivative(&f, axis, order).max_diff(&exact) / scale);
            }
        }
    }
    let q = PI / 2.0;
    let errs: Vec<(f64, f64)> = [17usize, 33, 65, 129]
        .iter()
        .map(|&nz| {
            let g = grid(4, nz);
            let f = Field3::scalar_fn(&g, |_, _, z| (q * z).sin());
            let d1 = Field3::scalar_fn(&g, |_, _, z| q * (q * z).cos());
            let d2 = Field3::scalar_fn(&g, |_, _, z| -q * q * (q * z).sin());
            (
                apply_derivative(&f, Axis::Z, 1).max_diff(&d1),
                apply_derivative(&f, Axis::Z, 2).max_diff(&d2),
            )
        })
        .collect();
    let orders: Vec<f64> = errs
        .windows(2)
        .flat_map(|w| [(w[0].0 / w[1].0).log2(), (w[0].1 / w[1].1).log2()])
        .collect();
    let min_order = orders.iter().cloned().fold(f64::INFINITY, f64::min);
    report(
        1,
        "operator exactness",
        worst < 1e-12 && min_order >= 3.7,
        &format!("spectral rel. error {worst:.2e} (< 1e-12), min vertical order {min_order:.2} over nz = 17..129 (>= 3.7)"),
    );
}

#[test]
fn criterion_02_structural_invariants() {
    let g = grid(32, 32);
    let v0 = random_smooth(&g, 2, 0.5, 2, 11);
    let model = ViscosityModel::Horizontal;
    let cfg = TimestepConfig {
        t_end: 0.2,
        ..Default::default()
    };
    let s0 = SolverState::from_velocity(&v0, &model).unwrap();
    let mut worst = [0.0f64; 3];
    let mut steps = 0;
    let res = run(s0, &model, &cfg, &RunOptions::default(), |s, _| {
        let r = invariant_residuals(&s.split);
        let (m, f) = (s.split.mean.l2_norm(), s.split.fluct.l2_norm());
        worst[0] = worst[0].max(r.div_mean / m);
        worst[1] = worst[1].max(r.fluct_mean / f);
        worst[2] = worst[2].max(r.w_boundary / f);
        steps += 1;
        Ok(())
    });
    let ok = res.outcome.is_ok() && (res.state.t - 0.2).abs() < 1e-12;
    report(
        2,
        "structural invariants (32^3, T = 0.2)",
        ok && worst[0] < 1e-8 && worst[1] < 1e-8 && worst[2] < 1e-6,
        &format!(
            "{steps} states; div/|mean| {:.2e} (< 1e-8), mean(fluct)/|fluct| {:.2e} (< 1e-8), w(+-h)/|fluct| {:.2e} (< 1e-6)",
            worst[0], worst[1], worst[2]
        ),
    );
}

#[test]
fn criterion_03_energy_bound() {
    let g = grid(24, 24);
    let (t_end, dt) = (0.2, 0.002);
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let cfg = LinearizedConfig {
            coefficient_amplitude: 0.2 + 0.1 * seed as f64,
            forcing_amplitude: if seed % 2 == 0 { 0.0 } else { 0.5 },
            seed,
            ..Default::default()
        };
        let data = linearized_problem(&g, &cfg).unwrap();
        let v0 = random_smooth(&g, 1, 1.0, 2, 100 + seed);
        let traj = solve_linearized_grid(&data, &v0, t_end, dt).unwrap();
        let f_norms: Vec<(f64, f64)> = traj.iter().map(|(t, _)| (*t, data.f.at(*t).map_or(0.0, |f| v_dual_norm(&f)))).collect();
        let bound = energy_bound(h_norm_sq(&v0).sqrt(), &f_norms, &data.sup_norms(), t_end);
        worst = worst.max(energy_functional(&traj) / bound);
    }
    report(
        3,
        "energy bound (10 coefficient sets, 24^3)",
        worst <= 1.05,
        &format!("max energy / bound {worst:.4} (<= 1.05)"),
    );
}

#[test]
fn criterion_04_galerkin_grid() {
    let g = grid(16, 33);
    let (c, by, a) = (0.05, 0.5, 0.3);
    let w = Field3::scalar_fn(&g, |_, _, z| c * (PI * (z + 1.0) / 2.0).sin());
    let data = CoefficientData::constant(
        Field3::scalar_fn(&g, |_, _, _| a),
        Field3::from_fn(&g, 2, |k, _, _, _| if k == 1 { by } else { 0.0 }),
        w,
        Forcing::none(),
    )
    .unwrap();
    let v0 = Field3::scalar_fn(&g, |x, y, z| {
        let q = PI * (z + 1.0) / 2.0;
        1.0 + (PI * x).cos() * (1.0 + 0.5 * (PI * y).cos()) * q.cos() + 0.3 * (PI * y).cos()
    });
    let dist: Vec<f64> = [(4, 2), (9, 3), (16, 4)]
        .iter()
        .map(|&(nh, nz)| {
            let s = compare_linearized(&data, &v0, nh, nz, 0.1, 1e-3).unwrap();
            s.iter().map(|x| x.distance).fold(0.0, f64::max)
        })
        .collect();
    let monotone = dist.windows(2).all(|w| w[1] < w[0]);
    report(
        4,
        "Galerkin/grid cross-validation",
        monotone && dist[2] < 1e-3,
        &format!(
            "max_t relative H distance for n = 8, 27, 64: {:.2e}, {:.2e}, {:.2e} (decreasing, last < 1e-3)",
            dist[0], dist[1], dist[2]
        ),
    );
}

#[test]
fn criterion_05_picard_imex() {
    let g = grid(16, 17);
    let model = ViscosityModel::Horizontal;
    let v0 = random_smooth(&g, 2, 0.1, 2, 5);
    let cfg = TimestepConfig {
        dt_max: 5e-3,
        ..Default::default()
    };
    let p = picard_solve(&v0, &model, 0.05, &cfg).unwrap();
    let dt = p.times[1] - p.times[0];
    let s0 = SolverState::from_velocity(&v0, &model).unwrap();
    let imex = imex_trajectory(&s0, &model, dt, p.times.len() - 1, &cfg, None).unwrap();
    let scale = imex.iter().map(|s| s.velocity().max_abs()).fold(0.0, f64::max);
    let gap = p
        .trajectory
        .iter()
        .zip(&imex)
        .map(|(a, b)| a.reassemble().max_diff(&b.velocity()))
        .fold(0.0, f64::max)
        / scale;
    report(
        5,
        "Picard vs IMEX (T = 0.05)",
        gap < 1e-6 && p.w_gap < 1e-10,
        &format!(
            "{} iterations; relative gap {gap:.2e} (< 1e-6), corrected vs uncorrected w {:.2e} (< 1e-10)",
            p.iterations, p.w_gap
        ),
    );
}

#[test]
fn criterion_06_neumann_preservation() {
    let g = grid(16, 17);
    let model = ViscosityModel::Horizontal;
    let v0 = Field3::from_fn(&g, 2, |c, x, y, z| {
        let p = (PI * (z + 1.0)).cos();
        if c == 0 {
            0.5 * (PI * x).sin() * p
        } else {
            0.3 * (PI * y).cos() * (PI * x).sin() * p
        }
    });
    let s0 = SolverState::from_velocity(&v0, &model).unwrap();
    let initial = invariant_residuals(&s0.split).neumann;
    let cfg = TimestepConfig {
        t_end: 0.2,
        ..Default::default()
    };
    let mut worst: f64 = 0.0;
    let res = run(s0, &model, &cfg, &RunOptions::default(), |s, _| {
        worst = worst.max(invariant_residuals(&s.split).neumann);
        Ok(())
    });
    let ratio = worst / initial;
    report(
        6,
        "Neumann preservation (T = 0.2)",
        res.outcome.is_ok() && ratio < 10.0,
        &format!("initial wall slope {initial:.2e}, max over run {worst:.2e}, ratio {ratio:.2} (< 10)"),
    );
}

#[test]
fn criterion_07_eps_continuation() {
    let g = grid(16, 17);
    let ic = InitialCondition::Rayleigh {
        amplitude: 1.0,
        perturbation: 0.2,
    };
    let v0: Field3<f64> = primeq::io::initial_velocity(&ic, &g).unwrap();
    let cfg = TimestepConfig {
        t_end: 0.1,
        ..Default::default()
    };
    let options = RunOptions {
        diag_every: 1,
        eta: Some(2.5),
        stop_on_certificate: true,
        forcing: None,
    };
    let ladder = [0.25, 0.125, 0.0625, 0.03125, 0.015625];
    let rungs = eps_continuation(&v0, &ladder, &cfg, &options, |_, _| Ok(())).unwrap();
    let d: Vec<f64> = rungs.iter().filter_map(|r| r.distance_to_next).collect();
    let decreasing = d.windows(2).all(|w| w[1] < w[0]);
    let reached = rungs.iter().all(|r| (r.final_t - 0.1).abs() < 1e-12);
    let band = rungs.iter().all(|r| {
        let honoured = r.initial_pass == Some(true) && r.certificate_expired.is_none();
        !honoured || r.relaxed_pass_throughout == Some(true)
    });
    let initial_pass = rungs.iter().all(|r| r.initial_pass == Some(true));
    report(
        7,
        "eps continuation (eps = 1/4 .. 1/32, T = 0.1)",
        decreasing && reached && band && initial_pass,
        &format!(
            "distances {} (strictly decreasing), band at eta passes at t = 0: {initial_pass}, 2*eta band held while certified: {band}",
            d.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
        ),
    );
}

/// Forcing that makes `e^{−t} V` an exact solution of the discrete system.
fn manufactured(v: &SplitState<f64>, model: &ViscosityModel) -> SplitForcing<f64> {
    let r1 = assemble_rhs(v, model).unwrap();
    let two = SplitState {
        mean: v.mean.scaled(2.0),
        fluct: v.fluct.scaled(2.0),
    };
    let r2 = assemble_rhs(&two, model).unwrap();
    // R(sV) = s L V + s² N(V)
    let n_mean = r2.mean_rhs.sub(&r1.mean_rhs.scaled(2.0)).scaled(0.5);
    let n_fluct = r2.fluct_rhs.sub(&r1.fluct_rhs.scaled(2.0)).scaled(0.5);
    let l_mean = r1.mean_rhs.sub(&n_mean);
    let l_fluct = r1.fluct_rhs.sub(&n_fluct);
    let (vm, vf) = (v.mean.clone(), v.fluct.clone());
    Arc::new(move |t: f64| {
        let (e1, e2) = ((-t).exp(), (-2.0 * t).exp());
        let mut mean = vm.add(&l_mean).scaled(-e1);
        mean.axpy(-e2, &n_mean);
        let mut fluct = vf.add(&l_fluct).scaled(-e1);
        fluct.axpy(-e2, &n_fluct);
        Tendency {
            mean_rhs: mean,
            fluct_rhs: fluct,
        }
    })
}

#[test]
fn criterion_08_manufactured_convergence() {
    let g = grid(16, 17);
    let model = ViscosityModel::Horizontal;
    let v = prepare_split(&split_modes(&random_smooth(&g, 2, 0.5, 2, 21)));
    let forcing = manufactured(&v, &model);
    let t_end: f64 = 0.4;
    let cfg = TimestepConfig {
        dt_max: 1.0,
        ..Default::default()
    };
    let exact = v.reassemble().scaled((-t_end).exp());
    let errs: Vec<f64> = [10usize, 20, 40, 80]
        .iter()
        .map(|&n| {
            let s0 = SolverState::from_split(v.clone(), 0.0, &model).unwrap();
            let tr = imex_trajectory(&s0, &model, t_end / n as f64, n, &cfg, Some(&forcing)).unwrap();
            tr.last().unwrap().velocity().max_diff(&exact)
        })
        .collect();
    let orders: Vec<f64> = errs.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let ok = orders.iter().all(|o| (1.7..=2.3).contains(o));
    report(
        8,
        "manufactured solution, temporal order",
        ok,
        &format!(
            "errors {} ; observed orders {} (in [1.7, 2.3])",
            errs.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(", "),
            orders.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ")
        ),
    );
}

#[test]
fn criterion_09_product_estimate_constant() {
    let sup = |n: usize| {
        let g = grid(n, 2 * n + 1);
        (0..200u64)
            .map(|k| {
                let m = 1 + (k % 2) as i64;
                let f = random_smooth(&g, 1, 1.0, m, 3 * k);
                let gg = random_smooth(&g, 1, 1.0, m, 3 * k + 1);
                let h = random_smooth(&g, 1, 1.0, 2, 3 * k + 2);
                anisotropic_estimate_check(&f, &gg, &h).unwrap().ratio
            })
            .fold(0.0, f64::max)
    };
    let (c1, c2) = (sup(8), sup(16));
    let change = (c2 - c1).abs() / c1;
    report(
        9,
        "product estimate constant under refinement",
        change < 0.1,
        &format!("sup ratio {c1:.4} on 8^2x17, {c2:.4} on 16^2x33, change {:.2}% (< 10%)", 100.0 * change),
    );
}

#[test]
fn criterion_10_determinism_and_io() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = |dir: &std::path::Path| {
        parse_config(&format!(
            "output_dir = {:?}\ndiag_every = 1\neta = 2.0\n[domain]\nnx = 16\nny = 16\nnz = 17\n[timestep]\nt_end = 0.05\n[initial]\npreset = \"random\"\namplitude = 0.3\nseed = 7\n",
            dir.display().to_string()
        ))
        .unwrap()
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_command(&cfg(&a)).unwrap();
    run_command(&cfg(&b)).unwrap();
    let same_series = std::fs::read(a.join(TIMESERIES)).unwrap() == std::fs::read(b.join(TIMESERIES)).unwrap();

    let g = grid(16, 17);
    let model = ViscosityModel::Horizontal;
    let s = SolverState::from_velocity(&random_smooth(&g, 2, 1.0, 3, 99), &model).unwrap();
    let snap = Snapshot::from_state(&s, &model);
    let path = tmp.path().join("x.snap");
    write_snapshot(&snap, &path).unwrap();
    let back = read_snapshot(&path).unwrap();
    let bits = |x: &Snapshot| {
        let mut out: Vec<u64> = x.v.comps().iter().flatten().map(|v| v.to_bits()).collect();
        out.extend(x.w.iter().flat_map(|w| w.comp(0).iter().map(|v| v.to_bits())));
        out.extend(x.p.iter().flat_map(|p| p.comp(0).iter().map(|v| v.to_bits())));
        out.push(x.t.to_bits());
        out
    };
    let exact = bits(&back) == bits(&snap);
    report(
        10,
        "determinism and snapshot round trip",
        same_series && exact,
        &format!("rerun series identical: {same_series}, snapshot bit-exact: {exact}"),
    );
}
