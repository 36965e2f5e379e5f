use biooss::grid::*;
use biooss::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BCS: [BoundaryCondition; 2] = [BoundaryCondition::ZeroPad, BoundaryCondition::Periodic];

fn random_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Field<f64> {
    Field::from_fn(h, w, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_state(rng: &mut ChaCha8Rng, s: &GridShape<f64>) -> GridState<f64> {
    GridState {
        p: random_field(rng, s.height, s.width),
        ox: random_field(rng, s.height, s.width),
        oy: random_field(rng, s.height, s.width),
    }
}

fn random_params(rng: &mut ChaCha8Rng, s: &GridShape<f64>) -> PhysicalParams<f64> {
    PhysicalParams {
        c: Field::from_fn(s.height, s.width, |_, _| rng.gen_range(0.1..1.5)),
        kp: Field::from_fn(s.height, s.width, |_, _| rng.gen_range(0.01..1.0)),
        ko: Field::from_fn(s.height, s.width, |_, _| rng.gen_range(0.01..1.0)),
    }
}

/// Hand-written stencil step used as an independent reference.
fn naive_step(x: &GridState<f64>, prm: &PhysicalParams<f64>, drive: &Field<f64>, s: &GridShape<f64>, bc: BoundaryCondition) -> GridState<f64> {
    let (h, w) = (s.height as i64, s.width as i64);
    let at = |f: &Field<f64>, i: i64, j: i64| -> f64 {
        match bc {
            BoundaryCondition::ZeroPad => {
                if i < 0 || j < 0 || i >= h || j >= w { 0.0 } else { f.get(i as usize, j as usize) }
            }
            BoundaryCondition::Periodic => f.get(i.rem_euclid(h) as usize, j.rem_euclid(w) as usize),
        }
    };
    let mut oxs = x.ox.clone();
    let mut oys = x.oy.clone();
    for i in 0..h {
        for j in 0..w {
            let gx = (at(&x.p, i, j) - at(&x.p, i - 1, j)) / s.dx;
            let gy = (at(&x.p, i, j) - at(&x.p, i, j - 1)) / s.dx;
            oxs.set(i as usize, j as usize, x.ox.get(i as usize, j as usize) - s.dt * gx);
            oys.set(i as usize, j as usize, x.oy.get(i as usize, j as usize) - s.dt * gy);
        }
    }
    let mut out = x.clone();
    for i in 0..h {
        for j in 0..w {
            let (iu, ju) = (i as usize, j as usize);
            let div = (at(&oxs, i + 1, j) - at(&oxs, i, j) + at(&oys, i, j + 1) - at(&oys, i, j)) / s.dx;
            let c = prm.c.get(iu, ju);
            let pstar = x.p.get(iu, ju) - c * c * s.dt * div + s.dt * drive.get(iu, ju);
            out.p.set(iu, ju, pstar / (1.0 + s.dt * prm.kp.get(iu, ju)));
            out.ox.set(iu, ju, oxs.get(iu, ju) / (1.0 + s.dt * prm.ko.get(iu, ju)));
            out.oy.set(iu, ju, oys.get(iu, ju) / (1.0 + s.dt * prm.ko.get(iu, ju)));
        }
    }
    out
}

#[test]
fn constant_field_gradient() {
    let s = GridShape::<f64>::new(4, 4, 1.0, 0.1).unwrap();
    let p = Field::filled(4, 4, 5.0);
    let (gx, gy) = gradient(&p, &s, BoundaryCondition::ZeroPad).unwrap();
    for i in 1..4 {
        for j in 1..4 {
            assert_eq!((gx.get(i, j), gy.get(i, j)), (0.0, 0.0));
        }
    }
    for j in 0..4 {
        assert_eq!(gx.get(0, j), 5.0);
    }
}

#[test]
fn ramp_gradient_wraps_on_periodic_grid() {
    let s = GridShape::<f64>::new(4, 4, 1.0, 0.1).unwrap();
    let p = Field::from_fn(4, 4, |i, _| i as f64);
    let (gx, gy) = gradient(&p, &s, BoundaryCondition::Periodic).unwrap();
    for j in 0..4 {
        for i in 1..4 {
            assert_eq!(gx.get(i, j), 1.0);
        }
        assert_eq!(gx.get(0, j), -3.0);
    }
    assert_eq!(gy.max_abs(), 0.0);
}

#[test]
fn divergence_examples() {
    let s = GridShape::<f64>::new(4, 4, 1.0, 0.1).unwrap();
    let k = Field::filled(4, 4, 2.5);
    let d = divergence(&k, &k, &s, BoundaryCondition::Periodic).unwrap();
    assert_eq!(d.max_abs(), 0.0);

    let ox = Field::from_fn(4, 4, |i, _| i as f64);
    let d = divergence(&ox, &Field::zeros(4, 4), &s, BoundaryCondition::ZeroPad).unwrap();
    for j in 0..4 {
        for i in 0..3 {
            assert_eq!(d.get(i, j), 1.0);
        }
        assert_eq!(d.get(3, j), -3.0);
    }
}

#[test]
fn operators_reject_mismatched_shapes() {
    let s = GridShape::<f64>::new(4, 4, 1.0, 0.1).unwrap();
    assert!(matches!(gradient(&Field::zeros(3, 4), &s, BoundaryCondition::ZeroPad), Err(Error::Shape(_))));
    assert!(matches!(
        divergence(&Field::zeros(4, 4), &Field::zeros(4, 3), &s, BoundaryCondition::ZeroPad),
        Err(Error::Shape(_))
    ));
}

#[test]
fn adjoint_pair_on_six_by_six() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = GridShape::<f64>::new(6, 6, 1.0, 0.1).unwrap();
    for bc in BCS {
        let p = random_field(&mut rng, 6, 6);
        let (ox, oy) = (random_field(&mut rng, 6, 6), random_field(&mut rng, 6, 6));
        let (gx, gy) = gradient(&p, &s, bc).unwrap();
        let lhs = gx.dot(&ox) + gy.dot(&oy);
        let rhs = -p.dot(&divergence(&ox, &oy, &s, bc).unwrap());
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn pure_damping_of_constant_pressure_interior() {
    let s = GridShape::<f64>::new(5, 5, 1.0, 0.2).unwrap();
    let prm = PhysicalParams::uniform(&s, 0.8, 0.5, 0.3);
    let x = GridState { p: Field::filled(5, 5, 3.0), ox: Field::zeros(5, 5), oy: Field::zeros(5, 5) };
    let y = step(&x, &prm, &Field::zeros(5, 5), &s, BoundaryCondition::ZeroPad).unwrap();
    for i in 1..4 {
        for j in 1..4 {
            assert_eq!(y.ox.get(i, j), 0.0);
            assert_eq!(y.oy.get(i, j), 0.0);
        }
    }
    // Interior cells away from the ramps that o* creates at rows/cols 0.
    for i in 1..4 {
        for j in 1..4 {
            if i + 1 < 4 && j + 1 < 4 {
                assert!((y.p.get(i, j) - 3.0 / 1.1).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn zero_speed_damps_pressure_norm_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = GridShape::<f64>::new(5, 7, 1.0, 0.1).unwrap();
    let prm = PhysicalParams::uniform(&s, 0.0, 0.4, 0.2);
    let mut x = random_state(&mut rng, &s);
    for bc in BCS {
        for _ in 0..5 {
            let y = step(&x, &prm, &Field::zeros(5, 7), &s, bc).unwrap();
            let ratio = y.p.norm_sq().sqrt() / x.p.norm_sq().sqrt();
            assert!((ratio - 1.0 / 1.04).abs() < 1e-14);
            x = y;
        }
    }
}

#[test]
fn damping_block_scaling() {
    let s = GridShape::<f64>::new(3, 3, 1.0, 0.1).unwrap();
    let prm = PhysicalParams::uniform(&s, 1.0, 0.1, 0.1);
    let a = assemble_coupling_matrix(&prm, &s, BoundaryCondition::ZeroPad).unwrap();
    let undamped = assemble_coupling_matrix(&PhysicalParams::uniform(&s, 1.0, 1e-300, 1e-300), &s, BoundaryCondition::ZeroPad).unwrap();
    for (x, y) in a.data.iter().zip(&undamped.data) {
        assert!((x - y / 1.01).abs() < 1e-15);
    }
}

#[test]
fn step_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for bc in BCS {
        for (h, w) in [(2, 2), (3, 5), (8, 8), (7, 4)] {
            let s = GridShape::<f64>::new(h, w, 0.7, 0.05).unwrap();
            let prm = random_params(&mut rng, &s);
            let x = random_state(&mut rng, &s);
            let d = random_field(&mut rng, h, w);
            let got = step(&x, &prm, &d, &s, bc).unwrap();
            let want = naive_step(&x, &prm, &d, &s, bc);
            assert!(got.max_abs_diff(&want) < 1e-14);
        }
    }
}

#[test]
fn step_matches_dense_matrix_with_drive() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let s = GridShape::<f64>::new(8, 8, 1.0, 0.1).unwrap();
    for bc in BCS {
        let prm = random_params(&mut rng, &s);
        let x = random_state(&mut rng, &s);
        let d = random_field(&mut rng, 8, 8);
        let a = assemble_coupling_matrix(&prm, &s, bc).unwrap();
        let mut want = a.matvec(&x.to_vec());
        for k in 0..64 {
            want[k] += prm.alpha(s.dt).as_slice()[k] * s.dt * d.as_slice()[k];
        }
        let got = step(&x, &prm, &d, &s, bc).unwrap().to_vec();
        let err = got.iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(err < 1e-12, "{bc:?}: {err}");
    }
}

#[test]
fn coupling_matrix_rows_for_smallest_grid() {
    // 2x2 periodic grid, negligible damping, c = dt = dx = 1: write the
    // first pressure row and first velocity rows out by hand.
    let s = GridShape::<f64>::new(2, 2, 1.0, 1.0).unwrap();
    let prm = PhysicalParams::uniform(&s, 1.0, 1e-9, 1e-9);
    let a = assemble_coupling_matrix(&prm, &s, BoundaryCondition::ZeroPad).unwrap();
    let row = |r: usize| (0..12).map(|c| a.get(r, c)).collect::<Vec<f64>>();
    // ox row for cell 0: beta * (ox_0 - dt (p_0 - 0))
    let ox0 = row(4);
    let want_ox0 = [-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    for (g, w) in ox0.iter().zip(want_ox0) {
        assert!((g - w).abs() < 1e-8);
    }
    // ox row for cell 2 (i = 1, j = 0): ox_2 - (p_2 - p_0)
    let ox2 = row(6);
    let want_ox2 = [1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    for (g, w) in ox2.iter().zip(want_ox2) {
        assert!((g - w).abs() < 1e-8);
    }
    // p row for cell 0: p_0 - div(o*) with o* = o - G p
    // div at 0 = (o*x_2 - o*x_0) + (o*y_1 - o*y_0)
    // o*x_2 = ox_2 - p_2 + p_0, o*x_0 = ox_0 - p_0, o*y_1 = oy_1 - p_1 + p_0, o*y_0 = oy_0 - p_0
    // p_new = p_0 - [ox_2 - ox_0 + oy_1 - oy_0 - p_2 - p_1 + 4 p_0]
    let p0 = row(0);
    let want_p0 = [-3.0, 1.0, 1.0, 0.0, 1.0, 0.0, -1.0, 0.0, 1.0, -1.0, 0.0, 0.0];
    for (g, w) in p0.iter().zip(want_p0) {
        assert!((g - w).abs() < 1e-8, "{p0:?}");
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = GridShape::<f64>::new(6, 5, 1.0, 0.1).unwrap();
    let prm = random_params(&mut rng, &s);
    let x = random_state(&mut rng, &s);
    let drives: Vec<Field<f64>> = (0..20).map(|_| random_field(&mut rng, 6, 5)).collect();
    let a = simulate(&x, &prm, &drives, &s, BoundaryCondition::ZeroPad, 4).unwrap();
    let b = simulate(&x, &prm, &drives, &s, BoundaryCondition::ZeroPad, 4).unwrap();
    assert_eq!(a, b);
}

#[test]
fn blow_up_reports_step_index() {
    let s = GridShape::<f64>::new(4, 4, 1.0, 1.0).unwrap();
    let prm = PhysicalParams::uniform(&s, 50.0, 1e-6, 1e-6);
    let mut x = GridState::zeros(&s);
    x.p.set(1, 1, 1.0);
    let drives = vec![Field::zeros(4, 4); 2000];
    match simulate(&x, &prm, &drives, &s, BoundaryCondition::Periodic, 1000) {
        Err(Error::NonFinite { step: Some(n), .. }) => assert!(n > 1 && n <= 2000),
        other => panic!("expected a numeric failure, got {:?}", other.map(|f| f.len())),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn zero_is_a_fixed_point(h in 2usize..9, w in 2usize..9, periodic in any::<bool>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = GridShape::<f64>::new(h, w, 1.0, 0.1).unwrap();
        let prm = random_params(&mut rng, &s);
        let bc = if periodic { BoundaryCondition::Periodic } else { BoundaryCondition::ZeroPad };
        let y = step(&GridState::zeros(&s), &prm, &Field::zeros(h, w), &s, bc).unwrap();
        prop_assert_eq!(y, GridState::zeros(&s));
    }

    #[test]
    fn adjoint_pair_holds(h in 2usize..12, w in 2usize..12, dx in 0.2f64..3.0, periodic in any::<bool>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = GridShape::<f64>::new(h, w, dx, 0.1).unwrap();
        let bc = if periodic { BoundaryCondition::Periodic } else { BoundaryCondition::ZeroPad };
        let p = random_field(&mut rng, h, w);
        let (ox, oy) = (random_field(&mut rng, h, w), random_field(&mut rng, h, w));
        let (gx, gy) = gradient(&p, &s, bc).unwrap();
        let lhs = gx.dot(&ox) + gy.dot(&oy) + p.dot(&divergence(&ox, &oy, &s, bc).unwrap());
        let scale = p.norm_sq().sqrt() * (ox.norm_sq() + oy.norm_sq()).sqrt() / dx;
        prop_assert!(lhs.abs() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn step_equals_coupling_matrix(h in 2usize..9, w in 2usize..9, periodic in any::<bool>(), seed in any::<u64>()) {
        prop_assume!(h * w <= 64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = GridShape::<f64>::new(h, w, 1.0, rng.gen_range(0.01..0.5)).unwrap();
        let bc = if periodic { BoundaryCondition::Periodic } else { BoundaryCondition::ZeroPad };
        let prm = random_params(&mut rng, &s);
        let x = random_state(&mut rng, &s);
        let a = assemble_coupling_matrix(&prm, &s, bc).unwrap();
        let want = a.matvec(&x.to_vec());
        let got = step(&x, &prm, &Field::zeros(h, w), &s, bc).unwrap().to_vec();
        let err = got.iter().zip(&want).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        prop_assert!(err <= 1e-12);
    }
}
