use biooss::grid::*;
use biooss::linalg::{det3, eye3, max_abs_diff3, mul3, trace3, Mat3};
use biooss::scan::DiagonalizedSystem;
use biooss::spectral::*;
use nalgebra::Matrix3;
use num_complex::Complex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

type C = Complex<f64>;

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.gen_range(lo.ln()..hi.ln())).exp()
}

fn draw(rng: &mut ChaCha8Rng) -> (LocalParams<f64>, FourierMode<f64>) {
    let lp = LocalParams::new(
        rng.gen_range(0.01..5.0),
        log_uniform(rng, 1e-3, 1.0),
        log_uniform(rng, 1e-3, 1.0),
        log_uniform(rng, 1e-3, 1.0),
    );
    (lp, FourierMode::new(rng.gen_range(-PI..PI), rng.gen_range(-PI..PI)))
}

/// Eigenvalues from nalgebra's complex Schur form.
fn oracle_eigenvalues(m: &Mat3<f64>) -> [C; 3] {
    let nm = Matrix3::from_fn(|r, c| m[r][c]);
    let ev = nm.schur().eigenvalues().expect("complex Schur is triangular");
    [ev[0], ev[1], ev[2]]
}

/// Max over ours of the distance to the nearest unused oracle eigenvalue.
fn match_error(ours: &[C; 3], oracle: &[C; 3]) -> f64 {
    let mut used = [false; 3];
    let mut worst = 0.0f64;
    for l in ours {
        let (k, d) = (0..3)
            .filter(|&k| !used[k])
            .map(|k| (k, (oracle[k] - l).norm()))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        used[k] = true;
        worst = worst.max(d);
    }
    worst
}

fn residual(m: &Mat3<f64>, t: &EigenTriple<f64>) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..3 {
        let v = [t.p[0][k], t.p[1][k], t.p[2][k]];
        let nv = (v.iter().map(|x| x.norm_sqr()).sum::<f64>()).sqrt();
        for r in 0..3 {
            let mv = m[r][0] * v[0] + m[r][1] * v[1] + m[r][2] * v[2];
            worst = worst.max((mv - t.lambda[k] * v[r]).norm() / nv);
        }
    }
    worst
}

#[test]
fn eigenvalues_match_dense_solver() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let (lp, mode) = draw(&mut rng);
        let m = mode_matrix(&lp, &mode);
        let ours = eigenvalues_exact(&lp, &mode);
        assert!(match_error(&ours, &oracle_eigenvalues(&m)) <= 1e-10);
        let ms = stencil_mode_matrix(&lp, &mode, 1.0);
        let ours = stencil_eigenvalues(&lp, &mode, 1.0);
        assert!(match_error(&ours, &oracle_eigenvalues(&ms)) <= 1e-10);
    }
}

#[test]
fn sample_point_matches_dense_solver() {
    let lp = LocalParams::new(1.0, 0.1, 0.1, 0.01);
    let mode = FourierMode::new(PI, 0.0);
    let m = mode_matrix(&lp, &mode);
    assert!(match_error(&eigenvalues_exact(&lp, &mode), &oracle_eigenvalues(&m)) <= 1e-10);
}

#[test]
fn determinant_and_trace_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..1000 {
        let (lp, mode) = draw(&mut rng);
        let (a, b) = (lp.alpha(), lp.beta());
        let m = mode_matrix(&lp, &mode);
        let l = eigenvalues_exact(&lp, &mode);
        let prod = l[0] * l[1] * l[2];
        let closed = a * b * b * (1.0 + lp.c * lp.c * lp.dt * lp.dt * mode.norm_sq());
        assert!((prod - C::new(closed, 0.0)).norm() <= 1e-10 * closed.max(1.0));
        assert!((det3(&m) - C::new(closed, 0.0)).norm() <= 1e-10 * closed.max(1.0));
        assert!((l[0] + l[1] + l[2] - C::new(a + 2.0 * b, 0.0)).norm() <= 1e-12);
        assert!((trace3(&m) - C::new(a + 2.0 * b, 0.0)).norm() <= 1e-12);
    }
}

#[test]
fn conjugate_pairs_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let (lp, mode) = draw(&mut rng);
        for model in [SymbolModel::Continuous, SymbolModel::Stencil] {
            let op = ModeOperator::new(&lp, &mode, model, 1.0);
            if op.discriminant() < 0.0 {
                let l = op.eigenvalues();
                assert_eq!(l[2], l[1].conj());
                assert!(l[1].im > 0.0);
            }
        }
    }
}

#[test]
fn eigenvectors_residual_inverse_and_reconstruction() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut checked = 0;
    for _ in 0..1000 {
        let (lp, mode) = draw(&mut rng);
        let m = mode_matrix(&lp, &mode);
        let t = match eigenvectors(&lp, &mode, eigenvalues_exact(&lp, &mode)) {
            Ok(t) => t,
            Err(_) => continue,
        };
        checked += 1;
        assert!(residual(&m, &t) <= 1e-9);
        assert!(max_abs_diff3(&mul3(&t.p, &t.p_inv), &eye3()) <= 1e-10);
        assert!(max_abs_diff3(&t.reconstruct(), &m) <= 1e-9);

        let ms = stencil_mode_matrix(&lp, &mode, 1.0);
        if let Ok(ts) = stencil_eigen(&lp, &mode, 1.0) {
            assert!(residual(&ms, &ts) <= 1e-9);
            assert!(max_abs_diff3(&ts.reconstruct(), &ms) <= 1e-9);
        }
    }
    assert!(checked > 990);
}

#[test]
fn approximation_error_stays_within_damping_gap() {
    // Away from the critical-damping boundary (alpha beta s >= 1/16 + (alpha - beta)^2/4)
    // the approximate pair differs from the exact one by at most |alpha - beta|^2 / 2.
    let dt = 0.1;
    let lp0 = LocalParams::<f64>::new(1.0, 0.1, 0.2, dt);
    let (a, b) = (lp0.alpha(), lp0.beta());
    let gap = (a - b).abs();
    let mut n = 0;
    for k in 1..=400 {
        let xi = k as f64 * 0.05;
        for c in [0.5, 1.0, 3.0, 10.0] {
            let lp = LocalParams { c, ..lp0 };
            let mode = FourierMode::new(xi, 0.3 * xi);
            let s = c * c * dt * dt * mode.norm_sq();
            if a * b * s < 1.0 / 16.0 + gap * gap / 4.0 {
                continue;
            }
            let exact = eigenvalues_exact(&lp, &mode);
            let (l2, l3) = eigenvalues_paper_approx(&lp, &mode).unwrap();
            assert!((l2 - exact[1]).norm() <= gap * gap / 2.0);
            assert!((l3 - exact[2]).norm() <= gap * gap / 2.0);
            n += 1;
        }
    }
    assert!(n > 100);
}

#[test]
fn stencil_mode_matrix_is_exact_for_plane_waves() {
    // Step a complex plane wave v e^{i (xi_x i + xi_y j)} through the real
    // stepper (real and imaginary parts separately) and compare with M v.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let s = GridShape::<f64>::new(6, 8, 0.9, 0.07).unwrap();
    let lp = LocalParams::new(1.3, 0.4, 0.25, 0.07);
    let prm = PhysicalParams::uniform(&s, lp.c, lp.kp, lp.ko);
    for m in periodic_modes(&s) {
        let v = [C::new(rng.gen(), rng.gen()), C::new(rng.gen(), rng.gen()), C::new(rng.gen(), rng.gen())];
        let wave = |comp: C, i: usize, j: usize| comp * C::from_polar(1.0, m.mode.xi_x * s.dx * i as f64 + m.mode.xi_y * s.dx * j as f64);
        let part = |re: bool| {
            let f = |c: usize| Field::from_fn(6, 8, |i, j| if re { wave(v[c], i, j).re } else { wave(v[c], i, j).im });
            GridState { p: f(0), ox: f(1), oy: f(2) }
        };
        let zero = Field::zeros(6, 8);
        let re = step(&part(true), &prm, &zero, &s, BoundaryCondition::Periodic).unwrap();
        let im = step(&part(false), &prm, &zero, &s, BoundaryCondition::Periodic).unwrap();
        let mm = stencil_mode_matrix(&lp, &m.mode, s.dx);
        let mv: Vec<C> = (0..3).map(|r| mm[r][0] * v[0] + mm[r][1] * v[1] + mm[r][2] * v[2]).collect();
        for i in 0..6 {
            for j in 0..8 {
                for (c, f) in [(0, (&re.p, &im.p)), (1, (&re.ox, &im.ox)), (2, (&re.oy, &im.oy))] {
                    let got = C::new(f.0.get(i, j), f.1.get(i, j));
                    assert!((got - wave(mv[c], i, j)).norm() < 1e-13);
                }
            }
        }
    }
}

#[test]
fn closed_form_bound_does_not_certify_the_stepper_with_damping() {
    // Finding recorded with the stability criterion: with damping, the exact
    // discrete bound is strictly below the closed form and the stepper
    // is unstable in between.
    let s = GridShape::<f64>::new(8, 8, 1.0, 0.5).unwrap();
    let prm = PhysicalParams::uniform(&s, 1.0, 0.9, 0.05);
    let eq = stability_bound(&prm, &s).get(0, 0);
    let exact = discrete_stability_bound(&prm, &s).get(0, 0);
    assert!(exact < eq);
    let c = 0.5 * (eq + exact);
    let r = check_stability(&PhysicalParams::uniform(&s, c, 0.9, 0.05), &s, SymbolModel::Stencil);
    assert!(!r.is_stable());
}

#[test]
fn fig2_bands_give_increasing_speeds() {
    let s = GridShape::<f64>::new(64, 64, 1.0, 0.01).unwrap();
    for fm in [FrequencyModel::Eq21Exact, FrequencyModel::Eq21ClosedForm, FrequencyModel::Stepper] {
        let cs: Vec<f64> = [(0.0, 10.0), (10.0, 20.0), (20.0, 30.0), (30.0, 40.0)]
            .iter()
            .map(|&b| init_for_band(b, (1.0, 1.0), &s, ReferenceMode::NyquistDiagonal, fm).unwrap().c)
            .collect();
        assert!(cs.windows(2).all(|w| w[0] < w[1]), "{fm:?}: {cs:?}");
    }
}

#[test]
fn symbol_check_limits() {
    let s = GridShape::<f64>::new(64, 64, 0.5, 0.01).unwrap();
    let r = fourier_symbol_check(&s);
    let first = &r.rows[0];
    let xi = first.mode.norm_sq().sqrt();
    // Taylor: deviation ~ xi dx / 2
    assert!((first.relative_deviation - xi * s.dx / 2.0).abs() < xi * xi * s.dx * s.dx);
    assert!((r.max_relative_deviation - symbol_deviation(&FourierMode::new(PI / s.dx, PI / s.dx), s.dx)).abs() < 1e-12);
    // monotone along an axis
    let axis: Vec<f64> = (1..=32).map(|m| symbol_deviation(&FourierMode::new(2.0 * PI * m as f64 / 32.0, 0.0), s.dx)).collect();
    assert!(axis.windows(2).all(|w| w[0] < w[1]));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Parameters that pass the stencil check never grow any eigen-coordinate.
    #[test]
    fn checked_parameters_never_grow_modes(
        n in 3usize..7,
        frac in 0.05f64..1.0,
        kp in 1e-3f64..1.0,
        ko in 1e-3f64..1.0,
        dt in 0.01f64..1.0,
        seed in any::<u64>(),
    ) {
        let s = GridShape::<f64>::new(n, n + 1, 1.0, dt).unwrap();
        let c = frac * discrete_bound_local(kp, ko, dt, 1.0);
        let prm = PhysicalParams::uniform(&s, c, kp, ko);
        prop_assert!(check_stability(&prm, &s, SymbolModel::Stencil).is_stable());
        let sys = DiagonalizedSystem::from_params(&prm, &s, BoundaryCondition::Periodic).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = |rng: &mut ChaCha8Rng| Field::from_fn(n, n + 1, |_, _| rng.gen_range(-1.0..1.0));
        let mut x = GridState { p: f(&mut rng), ox: f(&mut rng), oy: f(&mut rng) };
        let nrm = x.norm();
        x = GridState { p: x.p.map(|v| v / nrm), ox: x.ox.map(|v| v / nrm), oy: x.oy.map(|v| v / nrm) };
        let z0: Vec<f64> = sys.eigen_coordinates(&x).iter().map(|z| z.norm()).collect();
        let stepper = Stepper::new(s, &prm, BoundaryCondition::Periodic).unwrap();
        for t in 1..=10_000 {
            stepper.advance(&mut x, None).unwrap();
            if t % 500 == 0 || t == 10_000 {
                let z = sys.eigen_coordinates(&x);
                for (a, b) in z.iter().zip(&z0) {
                    prop_assert!(a.norm() <= b * (1.0 + 1e-9) + 1e-14);
                }
            }
        }
    }
}
