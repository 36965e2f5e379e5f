use biooss::grid::{BoundaryCondition, GridShape, PhysicalParams};
use biooss::model::*;
use biooss::spectral::{check_stability, frequency_map, ReferenceMode, SymbolModel};
use biooss::Error;
use proptest::prelude::*;

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn seq(values: Vec<Vec<f64>>) -> Sequence {
    Sequence::new(values, TimeSemantics::Physical { dt: 0.01 }).unwrap()
}

fn zero_layer(shape: GridShape<f64>, m: usize, params: PhysicalParams<f64>, bc: BoundaryCondition) -> LayerSpec {
    let n = shape.cells();
    LayerSpec {
        b: Matrix::zeros(n, m),
        wz: Matrix::zeros(3 * n, 3 * n),
        wg: Matrix::zeros(3 * n, 3 * n),
        c: Matrix::zeros(m, 3 * n),
        d: Matrix::zeros(m, m),
        glu_w1: Matrix::zeros(m, m),
        glu_w2: Matrix::zeros(m, m),
        params,
        shape,
        bc,
        allow_unstable: false,
    }
}

fn random_matrix(rows: usize, cols: usize, seed: u64, scale: f64) -> Matrix {
    // splitmix64, independent of the crate's generators
    let mut s = seed;
    Matrix::from_fn(rows, cols, |_, _| {
        s = s.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = s;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
        scale * ((z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0)
    })
}

#[test]
fn glu_with_zero_gate_weights_halves() {
    let w1 = Matrix::zeros(3, 3);
    let w2 = random_matrix(3, 3, 1, 1.0);
    let x = [0.3, -1.2, 2.0];
    let out = glu(&x, &w1, &w2).unwrap();
    let v = w2.matvec(&x);
    for k in 0..3 {
        assert!((out[k] - 0.5 * v[k]).abs() < 1e-15);
    }
    let z = glu(&x, &w2, &Matrix::zeros(3, 3)).unwrap();
    assert!(z.iter().all(|&v| v == 0.0));
}

#[test]
fn glu_random_four_dim_against_scalar_evaluation() {
    let w1 = random_matrix(4, 4, 2, 1.0);
    let w2 = random_matrix(4, 4, 3, 1.0);
    let x = [0.5, -0.25, 1.5, -2.0];
    let out = glu(&x, &w1, &w2).unwrap();
    for k in 0..4 {
        let mut a = 0.0;
        let mut b = 0.0;
        for c in 0..4 {
            a += w1.get(k, c) * x[c];
            b += w2.get(k, c) * x[c];
        }
        assert!((out[k] - sig(a) * b).abs() < 1e-14);
    }
    assert!(glu(&x[..3], &w1, &w2).is_err());
}

#[test]
fn gated_update_scalar_hand_value() {
    let one = Matrix::identity(1);
    let out = gated_update(&[1.0], &[2.0], &one, &one).unwrap()[0];
    let expect = sig(1.0) * 1f64.tanh() + (1.0 - sig(1.0)) * 2.0;
    assert!((out - expect).abs() < 1e-15);
    assert!((out - 1.095).abs() < 1e-3);
}

#[test]
fn gated_update_saturation_limits() {
    let x = [0.7, 0.4];
    let prev = [3.0, -5.0];
    let wz = random_matrix(2, 2, 4, 1.0);
    let neg = Matrix::from_fn(2, 2, |r, c| if r == c { -1e4 } else { 0.0 });
    let out = gated_update(&x, &prev, &wz, &neg).unwrap();
    for k in 0..2 {
        assert!((out[k] - prev[k]).abs() < 1e-12);
    }
    let pos = Matrix::from_fn(2, 2, |r, c| if r == c { 1e4 } else { 0.0 });
    let out = gated_update(&[0.7, 0.4], &prev, &Matrix::zeros(2, 2), &pos).unwrap();
    assert!(out.iter().all(|v| v.abs() < 1e-12));
    assert!(gated_update(&x, &prev[..1], &wz, &neg).is_err());
}

proptest! {
    #[test]
    fn gate_output_lies_between_candidate_and_previous(
        x in proptest::collection::vec(-3.0f64..3.0, 5),
        prev in proptest::collection::vec(-3.0f64..3.0, 5),
        seed in 0u64..1000,
    ) {
        let wz = random_matrix(5, 5, seed, 2.0);
        let wg = random_matrix(5, 5, seed + 7, 2.0);
        let out = gated_update(&x, &prev, &wz, &wg).unwrap();
        let cand: Vec<f64> = wz.matvec(&x).into_iter().map(f64::tanh).collect();
        for k in 0..5 {
            let lo = cand[k].min(prev[k]);
            let hi = cand[k].max(prev[k]);
            prop_assert!(out[k] >= lo - 1e-15 && out[k] <= hi + 1e-15);
        }
    }
}

#[test]
fn residual_identity_path() {
    let shape = GridShape::<f64>::new(3, 3, 1.0, 0.01).unwrap();
    let mut layer = zero_layer(shape, 2, PhysicalParams::uniform(&shape, 0.5, 0.1, 0.1), BoundaryCondition::ZeroPad);
    layer.d = Matrix::identity(2);
    let u = seq((0..10).map(|t| vec![(t as f64 * 0.3).sin(), -0.5 + t as f64 * 0.1]).collect());
    let out = layer_forward(&layer, &u, Engine::Sequential).unwrap();
    assert_eq!(out.values, u.values);
}

fn uniform_random_layer(shape: GridShape<f64>, m: usize, seed: u64, bc: BoundaryCondition) -> LayerSpec {
    let n = shape.cells();
    let s = 3 * n;
    LayerSpec {
        b: random_matrix(n, m, seed, 1.0),
        wz: random_matrix(s, s, seed + 1, 1.0 / (s as f64).sqrt()),
        wg: random_matrix(s, s, seed + 2, 1.0 / (s as f64).sqrt()),
        c: random_matrix(m, s, seed + 3, 1.0 / (s as f64).sqrt()),
        d: random_matrix(m, m, seed + 4, 0.5),
        glu_w1: random_matrix(m, m, seed + 5, 0.5),
        glu_w2: random_matrix(m, m, seed + 6, 0.5),
        params: PhysicalParams::uniform(&shape, 30.0, 0.5, 0.2),
        shape,
        bc,
        allow_unstable: false,
    }
}

fn rel_err(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        for (p, q) in x.iter().zip(y) {
            num = num.max((p - q).abs());
            den = den.max(p.abs().max(q.abs()));
        }
    }
    num / den
}

#[test]
fn engines_agree_on_full_layer() {
    let shape = GridShape::<f64>::new(8, 8, 1.0, 0.01).unwrap();
    let layer = uniform_random_layer(shape, 3, 11, BoundaryCondition::Periodic);
    let u = seq((0..64).map(|t| (0..3).map(|k| ((t * (k + 2)) as f64 * 0.21).sin()).collect()).collect());
    let a = layer_forward(&layer, &u, Engine::Sequential).unwrap();
    let b = layer_forward(&layer, &u, Engine::Scan).unwrap();
    assert!(rel_err(&a.values, &b.values) <= 1e-6);
}

#[test]
fn engines_agree_on_linear_core_over_128_steps() {
    let shape = GridShape::<f64>::new(8, 8, 1.0, 0.01).unwrap();
    let layer = uniform_random_layer(shape, 2, 21, BoundaryCondition::Periodic);
    let u = seq((0..128).map(|t| vec![(t as f64 * 0.37).cos(), (t as f64 * 0.05).sin()]).collect());
    let a = layer_forward_with_head(&layer, &u, Engine::Sequential, HeadMode::Linear).unwrap();
    let b = layer_forward_with_head(&layer, &u, Engine::Scan, HeadMode::Linear).unwrap();
    assert!(rel_err(&a.values, &b.values) <= 1e-8);
}

#[test]
fn scan_engine_needs_periodic_and_uniform_params() {
    let shape = GridShape::<f64>::new(4, 4, 1.0, 0.01).unwrap();
    let layer = uniform_random_layer(shape, 2, 3, BoundaryCondition::ZeroPad);
    let u = seq(vec![vec![1.0, 0.0]; 4]);
    assert!(matches!(layer_forward(&layer, &u, Engine::Scan), Err(Error::Unsupported(_))));
    let mut layer = uniform_random_layer(shape, 2, 3, BoundaryCondition::Periodic);
    layer.params.c.set(0, 0, 1.0);
    assert!(matches!(layer_forward(&layer, &u, Engine::Scan), Err(Error::Unsupported(_))));
}

fn naive_dft_peak(x: &[f64], dt: f64) -> f64 {
    let n = x.len();
    let mean = x.iter().sum::<f64>() / n as f64;
    let mut best = (0usize, -1.0f64);
    for k in 1..n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let ph = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
            re += (v - mean) * ph.cos();
            im += (v - mean) * ph.sin();
        }
        let pw = re * re + im * im;
        if pw > best.1 {
            best = (k, pw);
        }
    }
    best.0 as f64 / (n as f64 * dt)
}

#[test]
fn five_hertz_sine_drives_five_hertz_pressure() {
    let dt = 0.01;
    let shape = GridShape::<f64>::new(6, 6, 1.0, dt).unwrap();
    let mut layer = zero_layer(shape, 1, PhysicalParams::uniform(&shape, 20.0, 1.0, 1.0), BoundaryCondition::ZeroPad);
    layer.b = Matrix::from_fn(shape.cells(), 1, |_, _| 1.0);
    let t_len = 1600;
    let u: Vec<Vec<f64>> = (0..t_len).map(|t| vec![(2.0 * std::f64::consts::PI * 5.0 * t as f64 * dt).sin()]).collect();
    let states = layer_states(&layer, &u, Engine::Sequential).unwrap();
    let center = shape.idx(3, 3);
    let trace: Vec<f64> = states[t_len / 2..].iter().map(|s| s[center]).collect();
    let f = naive_dft_peak(&trace, dt);
    assert!((f - 5.0).abs() <= 1.0 / (trace.len() as f64 * dt) + 1e-9, "peak at {f}");
}

/// Two steps on a 2x2 zero-padded grid with m = 1, expanded by hand.
#[test]
fn hand_unrolled_two_step_trace() {
    let shape = GridShape::<f64>::new(2, 2, 0.5, 0.1).unwrap();
    let (dx, dt) = (0.5, 0.1);
    let mut params = PhysicalParams::uniform(&shape, 0.0, 0.0, 0.0);
    let cs = [0.3, 0.5, 0.7, 0.2];
    let kps = [0.1, 0.4, 0.9, 0.2];
    let kos = [0.6, 0.3, 0.2, 0.8];
    for k in 0..4 {
        params.c.set(k / 2, k % 2, cs[k]);
        params.kp.set(k / 2, k % 2, kps[k]);
        params.ko.set(k / 2, k % 2, kos[k]);
    }
    let mut layer = zero_layer(shape, 1, params, BoundaryCondition::ZeroPad);
    layer.b = random_matrix(4, 1, 40, 1.0);
    layer.wz = random_matrix(12, 12, 41, 0.5);
    layer.wg = random_matrix(12, 12, 42, 0.5);
    layer.c = random_matrix(1, 12, 43, 0.5);
    layer.d = Matrix::from_vec(1, 1, vec![0.8]).unwrap();
    layer.glu_w1 = Matrix::from_vec(1, 1, vec![-0.6]).unwrap();
    layer.glu_w2 = Matrix::from_vec(1, 1, vec![1.3]).unwrap();
    let inputs = [0.9, -0.4];

    // cells: 0=(0,0) 1=(0,1) 2=(1,0) 3=(1,1); x = row, y = column
    let mut p = [0.0f64; 4];
    let mut ox = [0.0f64; 4];
    let mut oy = [0.0f64; 4];
    let mut expected = Vec::new();
    for &u in &inputs {
        let drive: Vec<f64> = (0..4).map(|k| layer.b.get(k, 0) * u).collect();
        let up = [0.0, 0.0, p[0], p[1]];
        let left = [0.0, p[0], 0.0, p[2]];
        let mut sx = [0.0; 4];
        let mut sy = [0.0; 4];
        for k in 0..4 {
            sx[k] = ox[k] - dt * (p[k] - up[k]) / dx;
            sy[k] = oy[k] - dt * (p[k] - left[k]) / dx;
        }
        let down = [sx[2], sx[3], 0.0, 0.0];
        let right = [sy[1], 0.0, sy[3], 0.0];
        for k in 0..4 {
            let div = (down[k] - sx[k]) / dx + (right[k] - sy[k]) / dx;
            p[k] = (p[k] - cs[k] * cs[k] * dt * div + dt * drive[k]) / (1.0 + dt * kps[k]);
            ox[k] = sx[k] / (1.0 + dt * kos[k]);
            oy[k] = sy[k] / (1.0 + dt * kos[k]);
        }
        let x: Vec<f64> = p.iter().chain(&ox).chain(&oy).copied().collect();
        let mut h = [0.0; 12];
        for r in 0..12 {
            let mut zs = 0.0;
            let mut gs = 0.0;
            for c in 0..12 {
                zs += layer.wz.get(r, c) * x[c];
                gs += layer.wg.get(r, c) * x[c];
            }
            h[r] = sig(gs) * zs.tanh();
        }
        let mut y = 0.8 * u;
        for r in 0..12 {
            y += layer.c.get(0, r) * h[r];
        }
        let a = 0.5 * y * (1.0 + libm::erf(y / 2f64.sqrt()));
        expected.push(sig(-0.6 * a) * 1.3 * a + u);
    }
    let out = layer_forward(&layer, &seq(inputs.iter().map(|&v| vec![v]).collect()), Engine::Sequential).unwrap();
    for t in 0..2 {
        assert!((out.values[t][0] - expected[t]).abs() <= 1e-12);
    }
}

fn small_model(seed: u64) -> ModelSpec {
    let shape = GridShape::<f64>::new(4, 4, 1.0, 0.01).unwrap();
    init_model(seed, &ModelDims::new(2, 3, 2, 2), &shape, BoundaryCondition::ZeroPad, None).unwrap()
}

#[test]
fn single_layer_model_is_layer_plus_output_map() {
    let shape = GridShape::<f64>::new(4, 4, 1.0, 0.01).unwrap();
    let mut dims = ModelDims::new(2, 2, 3, 1);
    dims.pooling = Pooling::LastStep;
    let model = init_model(5, &dims, &shape, BoundaryCondition::ZeroPad, None).unwrap();
    let u = seq((0..20).map(|t| vec![(t as f64).sin(), 0.1 * t as f64]).collect());
    let logits = model_forward(&model, &u).unwrap();
    let layer = &model.layers[0];
    let tr = layer_trace(layer, &u.values, None, Engine::Sequential, HeadMode::Full).unwrap();
    let last = tr.a.last().unwrap();
    let expect: Vec<f64> = model.w_out.matvec(last).iter().zip(&model.b_out).map(|(a, b)| a + b).collect();
    assert_eq!(logits.as_vector().unwrap(), expect.as_slice());
    let out = layer_forward(layer, &u, Engine::Sequential).unwrap();
    assert_eq!(out.values, tr.outputs);
}

#[test]
fn swapping_identical_layers_changes_nothing() {
    let mut model = small_model(9);
    model.layers[1] = model.layers[0].clone();
    let u = seq((0..30).map(|t| vec![(t as f64 * 0.2).cos(), (t as f64 * 0.9).sin()]).collect());
    let a = model_forward(&model, &u).unwrap();
    model.layers.swap(0, 1);
    let b = model_forward(&model, &u).unwrap();
    assert_eq!(a, b);
}

#[test]
fn repeated_calls_have_no_hidden_state() {
    let model = small_model(3);
    let u = seq((0..25).map(|t| vec![(t as f64 * 0.5).sin(), 1.0]).collect());
    assert_eq!(model_forward(&model, &u).unwrap(), model_forward(&model, &u).unwrap());
}

#[test]
fn long_run_logits_are_finite() {
    let model = small_model(12);
    let u = seq((0..1000).map(|t| vec![(t as f64 * 0.3).sin(), (t as f64 * 0.07).cos()]).collect());
    let out = model_forward(&model, &u).unwrap();
    assert!(out.as_vector().unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn per_step_pooling_returns_a_sequence() {
    let shape = GridShape::<f64>::new(3, 3, 1.0, 0.01).unwrap();
    let mut dims = ModelDims::new(1, 2, 1, 1);
    dims.pooling = Pooling::PerStep;
    let model = init_model(1, &dims, &shape, BoundaryCondition::ZeroPad, None).unwrap();
    let u = seq(vec![vec![0.5]; 7]);
    match model_forward(&model, &u).unwrap() {
        ModelOutput::Sequence(s) => {
            assert_eq!(s.len(), 7);
            assert_eq!(s.channels(), 1);
        }
        _ => panic!("expected a sequence"),
    }
}

#[test]
fn init_is_deterministic_per_seed() {
    assert_eq!(small_model(17), small_model(17));
    assert_ne!(small_model(17), small_model(18));
}

#[test]
fn initialized_parameters_pass_the_stability_check() {
    let shape = GridShape::<f64>::new(5, 4, 0.8, 0.02).unwrap();
    for seed in 0..40 {
        let mut dims = ModelDims::new(1, 2, 2, 2);
        dims.uniform_params = seed % 2 == 0;
        let model = init_model(seed, &dims, &shape, BoundaryCondition::Periodic, None).unwrap();
        for layer in &model.layers {
            assert!(check_stability(&layer.params, &shape, SymbolModel::Stencil).is_stable());
        }
    }
}

#[test]
fn weights_respect_fan_in_bounds() {
    let model = small_model(4);
    let layer = &model.layers[0];
    let s = layer.state_len() as f64;
    assert!(layer.wz.data.iter().all(|v| v.abs() <= 1.0 / s.sqrt()));
    assert!(layer.d.data.iter().all(|v| v.abs() <= 1.0 / 3f64.sqrt()));
    for l in &model.layers {
        assert!(l.params.kp.as_slice().iter().all(|&k| (1e-3..=1.0).contains(&k)));
        assert!(l.params.ko.as_slice().iter().all(|&k| (1e-3..=1.0).contains(&k)));
        assert!(l.params.c.as_slice().iter().all(|&c| c > 0.0));
    }
}

#[test]
fn quadrant_band_plan_layout() {
    let shape = GridShape::<f64>::new(16, 16, 1.0, 0.01).unwrap();
    let plan = BandPlan::quadrants(&shape, QUADRANT_BANDS, (1.0, 1.0));
    let model = init_model(2, &ModelDims::new(1, 1, 1, 1), &shape, BoundaryCondition::ZeroPad, Some(&plan)).unwrap();
    let params = &model.layers[0].params;
    let f = frequency_map(params, &shape, &ReferenceMode::NyquistDiagonal.resolve(&shape), plan.frequency_model);
    // bottom-left, bottom-right, top-left, top-right
    let probes = [(12, 4), (12, 12), (4, 4), (4, 12)];
    for (q, &(i, j)) in probes.iter().enumerate() {
        let (lo, hi) = QUADRANT_BANDS[q];
        let v = f.get(i, j);
        assert!(v > lo && v < hi, "quadrant {q}: {v}");
        assert!((v - (lo + hi) / 2.0).abs() < 1e-6);
    }
    assert!(params.c.get(12, 4) < params.c.get(12, 12));
    assert!(params.c.get(12, 12) < params.c.get(4, 4));
    assert!(params.c.get(4, 4) < params.c.get(4, 12));
}

#[test]
fn mismatched_input_width_is_rejected() {
    let model = small_model(1);
    let u = seq(vec![vec![0.0; 5]; 4]);
    assert!(matches!(model_forward(&model, &u), Err(Error::Shape(_))));
}

#[test]
fn unstable_layer_is_rejected_unless_allowed() {
    let shape = GridShape::<f64>::new(4, 4, 1.0, 0.01).unwrap();
    let mut layer = zero_layer(shape, 1, PhysicalParams::uniform(&shape, 200.0, 0.1, 0.1), BoundaryCondition::ZeroPad);
    let u = seq(vec![vec![1.0]; 3]);
    assert!(matches!(layer_forward(&layer, &u, Engine::Sequential), Err(Error::Unstable { .. })));
    layer.allow_unstable = true;
    assert!(layer_forward(&layer, &u, Engine::Sequential).is_ok());
}

#[test]
fn blow_up_reports_layer_and_step() {
    let shape = GridShape::<f64>::new(4, 4, 1.0, 0.01).unwrap();
    let mut layer = zero_layer(shape, 1, PhysicalParams::uniform(&shape, 400.0, 0.1, 0.1), BoundaryCondition::ZeroPad);
    layer.allow_unstable = true;
    layer.b = Matrix::from_fn(16, 1, |r, _| if r == 5 { 1.0 } else { 0.0 });
    let u = seq(vec![vec![1.0]; 3000]);
    match layer_forward(&layer, &u, Engine::Sequential) {
        Err(Error::NonFinite { step: Some(s), field }) => {
            assert!(s > 1 && s <= 3000);
            assert!(field.starts_with("layer 0"));
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}
