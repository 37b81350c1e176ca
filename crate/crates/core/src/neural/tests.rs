use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec(head: HeadMode) -> NetworkSpec {
    NetworkSpec {
        ego_width: 3,
        vehicle_width: 4,
        max_vehicles: 5,
        shared: vec![6, 5],
        merged: vec![4],
        head,
        n_actions: 3,
    }
}

const MODES: [HeadMode; 3] = [HeadMode::Monolithic, HeadMode::FactoredMin, HeadMode::FactoredPlusMerged];

fn random_input(spec: &NetworkSpec, batch: usize, rng: &mut ChaCha8Rng) -> NetInput {
    let mut input = NetInput::zeros(batch, spec);
    input.ego.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    for b in 0..batch {
        for j in 0..spec.max_vehicles {
            if rng.random::<f64>() < 0.7 {
                input.mask[[b, j]] = 1.0;
                for f in 0..spec.vehicle_width {
                    input.vehicles[[b, j, f]] = rng.random_range(-1.0..1.0);
                }
            }
        }
    }
    input
}

/// Loss `0.5 * sum((q - y)^2) + 0.5 * sum(mask * (q_f - y_f)^2)`.
fn loss(net: &Network, p: &Parameters, input: &NetInput, y: &Array2<f64>, yf: &Array2<f64>) -> f64 {
    let fwd = net.forward(p, input).unwrap();
    let mut l = 0.5 * (&fwd.q - y).mapv(|v| v * v).sum();
    if let Some(f) = &fwd.factored {
        let m = net.spec().max_vehicles;
        for r in 0..f.nrows() {
            if input.mask[[r / m, r % m]] > 0.0 {
                l += 0.5 * f.row(r).iter().zip(yf.row(r)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
        }
    }
    l
}

fn analytic(net: &Network, p: &Parameters, input: &NetInput, y: &Array2<f64>, yf: &Array2<f64>) -> Vec<f64> {
    let fwd = net.forward(p, input).unwrap();
    let dq = &fwd.q - y;
    let dqf = fwd.factored.as_ref().map(|f| f - yf);
    net.backward(p, &fwd, &dq, dqf.as_ref()).unwrap()
}

#[test]
fn gradient_matches_central_differences() {
    for mode in MODES {
        let s = spec(mode);
        let net = Network::new(s.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // Zero-initialised biases can leave a unit exactly at the ReLU kink,
        // where one-sided derivatives differ; jitter to a generic point.
        let mut p = net.init(&mut rng);
        p.values.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        let input = random_input(&s, 4, &mut rng);
        let y = Array2::from_shape_fn((4, s.n_actions), |_| rng.random_range(-1.0..1.0));
        let yf = Array2::from_shape_fn((4 * s.max_vehicles, s.n_actions), |_| rng.random_range(-1.0..1.0));
        let g = analytic(&net, &p, &input, &y, &yf);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.values[i] += h;
            let mut minus = p.clone();
            minus.values[i] -= h;
            let fd = (loss(&net, &plus, &input, &y, &yf) - loss(&net, &minus, &input, &y, &yf)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-7);
            worst = worst.max(rel);
            assert!(rel <= 1e-4, "{mode:?} param {i}: analytic {} numeric {fd}", g[i]);
        }
        assert!(worst <= 1e-4);
    }
}

#[test]
fn factored_min_example() {
    // One shared unit, identity-like head: q_j = feature of slot j.
    let s = NetworkSpec {
        ego_width: 1,
        vehicle_width: 2,
        max_vehicles: 3,
        shared: vec![2],
        merged: vec![],
        head: HeadMode::FactoredMin,
        n_actions: 2,
    };
    let net = Network::new(s).unwrap();
    let mut p = Parameters::zeros(net.n_params());
    // Shared layer: 3 inputs -> 2 units, pass vehicle features through
    // shifted by +10 so relu is the identity on them.
    let shared = net.shared[0];
    p.values[shared.offset + 2] = 1.0; // in 1 -> unit 0
    p.values[shared.offset + 2 * 2 + 1] = 1.0; // in 2 -> unit 1
    p.values[shared.offset + 6] = 10.0;
    p.values[shared.offset + 7] = 10.0;
    let head = net.head.unwrap();
    p.values[head.offset] = 1.0;
    p.values[head.offset + 3] = 1.0;
    p.values[head.offset + 4] = -10.0;
    p.values[head.offset + 5] = -10.0;
    let q = net.q_values(&p, &[0.0], &[vec![0.0, -1.0], vec![-0.5, -0.2]], &[true, true]).unwrap();
    assert_eq!(q.to_vec(), vec![-0.5, -1.0]);
}

#[test]
fn free_road_value_without_vehicles() {
    let s = spec(HeadMode::FactoredMin);
    let net = Network::new(s.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut p = net.init(&mut rng);
    let free = net.free.unwrap();
    p.values[free..free + 3].copy_from_slice(&[1.5, -2.0, 0.25]);
    let q = net.q_values(&p, &[0.1, 0.2, 0.3], &[], &[]).unwrap();
    assert_eq!(q.to_vec(), vec![1.5, -2.0, 0.25]);
    // Gradient lands on the free-road constants only.
    let input = net.single_input(&[0.1, 0.2, 0.3], &[], &[]).unwrap();
    let fwd = net.forward(&p, &input).unwrap();
    let g = net.backward(&p, &fwd, &Array2::from_elem((1, 3), 1.0), None).unwrap();
    for (i, gi) in g.iter().enumerate() {
        let expect = if (free..free + 3).contains(&i) { 1.0 } else { 0.0 };
        assert_eq!(*gi, expect, "param {i}");
    }
}

#[test]
fn non_argmin_head_gets_no_gradient() {
    let s = spec(HeadMode::FactoredMin);
    let net = Network::new(s.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = net.init(&mut rng);
    let mut input = NetInput::zeros(1, &s);
    input.ego.row_mut(0).fill(0.3);
    input.mask[[0, 0]] = 1.0;
    input.mask[[0, 1]] = 1.0;
    input.vehicles.slice_mut(s![0, 0, ..]).fill(0.5);
    input.vehicles.slice_mut(s![0, 1, ..]).fill(-0.5);
    let fwd = net.forward(&p, &input).unwrap();
    let j = fwd.argmin(0, 0).unwrap();
    let other = 1 - j;
    // Only action 0 carries gradient; the factored head weights for action 0
    // receive gradient from slot j only: dW[:,0] = h_j.
    let mut dq = Array2::zeros((1, 3));
    dq[[0, 0]] = 1.0;
    let g = net.backward(&p, &fwd, &dq, None).unwrap();
    let head = net.head.unwrap();
    let h_last = fwd.cache.shared_h.last().unwrap();
    for f in 0..head.n_in {
        assert_eq!(g[head.offset + f * head.n_out], h_last[[j, f]]);
        assert_eq!(g[head.offset + f * head.n_out + 1], 0.0);
    }
    assert!(h_last.row(other).iter().any(|v| *v != 0.0) || h_last.row(j).iter().all(|v| *v == 0.0));
}

#[test]
fn zero_loss_gradient_is_zero() {
    for mode in MODES {
        let s = spec(mode);
        let net = Network::new(s.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = net.init(&mut rng);
        let input = random_input(&s, 3, &mut rng);
        let fwd = net.forward(&p, &input).unwrap();
        let g = net.backward(&p, &fwd, &Array2::zeros((3, 3)), None).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn non_finite_loss_reports_batch_index() {
    let s = spec(HeadMode::Monolithic);
    let net = Network::new(s.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = net.init(&mut rng);
    let input = random_input(&s, 4, &mut rng);
    let fwd = net.forward(&p, &input).unwrap();
    let mut dq = Array2::zeros((4, 3));
    dq[[2, 1]] = f64::NAN;
    assert!(matches!(net.backward(&p, &fwd, &dq, None), Err(NeuralError::NonFiniteLoss { index: 2 })));
}

#[test]
fn zero_parameters_give_constant_output() {
    for mode in MODES {
        let s = spec(mode);
        let net = Network::new(s.clone()).unwrap();
        let p = Parameters::zeros(net.n_params());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let input = random_input(&s, 6, &mut rng);
        let q = net.forward(&p, &input).unwrap().q;
        assert!(q.iter().all(|v| *v == 0.0));
    }
}

#[test]
fn dimension_errors() {
    assert!(Network::new(NetworkSpec { shared: vec![], ..spec(HeadMode::Monolithic) }).is_err());
    assert!(Network::new(NetworkSpec { merged: vec![0], ..spec(HeadMode::Monolithic) }).is_err());
    let net = Network::new(spec(HeadMode::Monolithic)).unwrap();
    let p = Parameters::zeros(net.n_params());
    let mut bad = NetInput::zeros(2, net.spec());
    bad.ego = Array2::zeros((2, 7));
    assert!(matches!(net.forward(&p, &bad), Err(NeuralError::Dimension(_))));
    assert!(net.forward(&Parameters::zeros(3), &NetInput::zeros(1, net.spec())).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for mode in MODES {
        let net = Network::new(spec(mode)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = net.init(&mut rng);
        let mut buf = Vec::new();
        write_parameters(&mut buf, &net, &p).unwrap();
        let (net2, p2) = read_parameters(&mut buf.as_slice()).unwrap();
        assert_eq!(net2, net);
        assert!(p.values.iter().zip(&p2.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        buf[0] = b'X';
        assert!(read_parameters(&mut buf.as_slice()).is_err());
    }
}

#[test]
fn target_sync_is_a_deep_copy() {
    let net = Network::new(spec(HeadMode::FactoredPlusMerged)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut src = net.init(&mut rng);
    let mut dst = Parameters::zeros(net.n_params());
    dst.copy_from(&src);
    dst.copy_from(&src);
    let input = random_input(net.spec(), 2, &mut rng);
    assert_eq!(net.forward(&src, &input).unwrap().q, net.forward(&dst, &input).unwrap().q);
    let mut st = AdamState::new(net.n_params());
    let g = vec![1.0; net.n_params()];
    apply_update(&mut src, &g, &mut st, &AdamConfig::default()).unwrap();
    assert_ne!(net.forward(&src, &input).unwrap().q, net.forward(&dst, &input).unwrap().q);
}

#[test]
fn optimizer_decreases_regression_loss() {
    let s = spec(HeadMode::FactoredPlusMerged);
    let net = Network::new(s.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut p = net.init(&mut rng);
    let input = random_input(&s, 8, &mut rng);
    let y = Array2::from_shape_fn((8, 3), |_| rng.random_range(-1.0..1.0));
    let yf = Array2::zeros((8 * s.max_vehicles, 3));
    let mut st = AdamState::new(net.n_params());
    let cfg = AdamConfig { lr: 1e-2, ..Default::default() };
    let first = loss(&net, &p, &input, &y, &yf);
    for _ in 0..200 {
        let g = analytic(&net, &p, &input, &y, &yf);
        apply_update(&mut p, &g, &mut st, &cfg).unwrap();
    }
    assert!(loss(&net, &p, &input, &y, &yf) < 0.5 * first);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_and_mask_invariance(seed in 0u64..10_000, mode_idx in 0usize..3) {
        let s = spec(MODES[mode_idx]);
        let net = Network::new(s.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = net.init(&mut rng);
        let input = random_input(&s, 1, &mut rng);
        let q = net.forward(&p, &input).unwrap().q;

        // Random permutation of slots.
        let mut perm: Vec<usize> = (0..s.max_vehicles).collect();
        for i in (1..perm.len()).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut shuffled = input.clone();
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.mask[[0, dst]] = input.mask[[0, src]];
            shuffled.vehicles.slice_mut(s![0, dst, ..]).assign(&input.vehicles.slice(s![0, src, ..]));
        }
        let q2 = net.forward(&p, &shuffled).unwrap().q;
        for (a, b) in q.iter().zip(q2.iter()) {
            prop_assert!((a - b).abs() <= 1e-12);
        }

        // Garbage in an absent slot changes nothing.
        let mut masked = input.clone();
        if let Some(j) = (0..s.max_vehicles).find(|j| input.mask[[0, *j]] == 0.0) {
            masked.vehicles.slice_mut(s![0, j, ..]).fill(123.0);
            prop_assert_eq!(net.forward(&p, &masked).unwrap().q, q.clone());
        }

        // Factored-min bound.
        if MODES[mode_idx] == HeadMode::FactoredMin {
            let fwd = net.forward(&p, &input).unwrap();
            let f = fwd.factored.as_ref().unwrap();
            for j in 0..s.max_vehicles {
                if input.mask[[0, j]] > 0.0 {
                    for a in 0..s.n_actions {
                        prop_assert!(fwd.q[[0, a]] <= f[[j, a]]);
                    }
                }
            }
        }
    }
}

