use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> NdArray {
    NdArray::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Central-difference oracle: builds the graph from scratch for every
/// perturbed input and compares against the tape gradient of
/// `sum(out ⊙ weights)`.
fn fd_check(inputs: &[NdArray], seed: u64, build: impl Fn(&mut Tape, &[Var]) -> Var) {
    const H: f64 = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |xs: &[NdArray], w: Option<&NdArray>| -> (f64, Tape, Vec<Var>, Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        let weights = match w {
            Some(w) => w.clone(),
            None => NdArray::ones(tape.shape(out)),
        };
        let wv = tape.leaf(weights);
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        (tape.value(loss).data()[0], tape, vars, loss)
    };
    let shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.shape(out).to_vec()
    };
    let weights = random(&shape, &mut rng);
    let (_, tape, vars, loss) = eval(inputs, Some(&weights));
    let grads = tape.gradients(loss).unwrap();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| NdArray::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let numeric = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * H);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                rel < 1e-4,
                "input {k} element {i}: analytic {a}, numeric {numeric}, rel {rel}"
            );
        }
    }
}

#[test]
fn fd_matmul_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    fd_check(&[a, b], 2, |t, v| t.matmul(v[0], v[1]).unwrap());
}

#[test]
fn matmul_grad_of_sum_is_b_transpose() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    let mut t = Tape::new();
    let av = t.leaf(a);
    let bv = t.leaf(b.clone());
    let c = t.matmul(av, bv).unwrap();
    let s = t.sum(c);
    let g = t.gradients(s).unwrap();
    // d/dA sum(AB) = 1 · Bᵀ, i.e. each row equals the row sums of B
    let ga = g.get(av).unwrap();
    for i in 0..3 {
        for k in 0..4 {
            let row_sum: f64 = (0..5).map(|j| b.get(&[k, j])).sum();
            assert!((ga.get(&[i, k]) - row_sum).abs() < 1e-12);
        }
    }
}

#[test]
fn fd_elementwise_and_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 4], &mut rng);
    let bias = random(&[4], &mut rng);
    fd_check(&[a.clone(), b.clone()], 5, |t, v| t.add(v[0], v[1]).unwrap());
    fd_check(&[a.clone(), b], 6, |t, v| t.mul(v[0], v[1]).unwrap());
    fd_check(&[a.clone()], 7, |t, v| t.scale(v[0], -2.5));
    fd_check(&[a, bias], 8, |t, v| t.add_bias(v[0], v[1]).unwrap());
}

#[test]
fn fd_relu_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random(&[4, 5], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    fd_check(&[a], 10, |t, v| t.relu(v[0]));
}

#[test]
fn fd_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&[2, 3, 4], &mut rng);
    let b = random(&[2, 2, 4], &mut rng);
    fd_check(&[a.clone()], 12, |t, v| t.reshape(v[0], &[6, 4]).unwrap());
    fd_check(&[a.clone()], 13, |t, v| t.permute(v[0], &[2, 0, 1]).unwrap());
    fd_check(&[a.clone(), b], 14, |t, v| t.concat(&[v[0], v[1]], 1).unwrap());
    fd_check(&[a.clone()], 15, |t, v| t.mean_axes(v[0], &[0, 2]).unwrap());
    fd_check(&[a], 16, |t, v| t.sum(v[0]));
}

#[test]
fn fd_softmax_each_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let a = random(&[2, 3, 4], &mut rng);
    for axis in 0..3 {
        fd_check(&[a.clone()], 18 + axis as u64, |t, v| t.softmax(v[0], axis).unwrap());
    }
}

#[test]
fn fd_temporal_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random(&[2, 3, 7, 2], &mut rng);
    let w = random(&[4, 3, 3], &mut rng);
    let b = random(&[4], &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 2)] {
        fd_check(&[x.clone(), w.clone(), b.clone()], 22, |t, v| {
            t.temporal_conv(v[0], v[1], Some(v[2]), stride, pad).unwrap()
        });
    }
}

#[test]
fn fd_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let q = random(&[2, 5, 6], &mut rng);
    let k = random(&[2, 5, 6], &mut rng);
    let v = random(&[2, 5, 4], &mut rng);
    fd_check(&[q, k, v], 32, |t, x| t.attention(x[0], x[1], x[2], 2, 0.7).unwrap().0);
}

#[test]
fn attention_matches_unfused_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (b, tt, h, d) = (3, 4, 2, 3);
    let q = random(&[b, tt, h * d], &mut rng);
    let k = random(&[b, tt, h * d], &mut rng);
    let v = random(&[b, tt, h * d], &mut rng);
    let mut t = Tape::new();
    let (qv, kv, vv) = (t.leaf(q), t.leaf(k), t.leaf(v));
    let (fused, weights) = t.attention(qv, kv, vv, h, 0.5).unwrap();
    let heads = |t: &mut Tape, x: Var| {
        let x = t.reshape(x, &[b, tt, h, d]).unwrap();
        t.permute(x, &[0, 2, 1, 3]).unwrap()
    };
    let (qh, kh, vh) = (heads(&mut t, qv), heads(&mut t, kv), heads(&mut t, vv));
    let kt = t.transpose(kh).unwrap();
    let s = t.matmul(qh, kt).unwrap();
    let s = t.scale(s, 0.5);
    let w = t.softmax(s, 3).unwrap();
    let o = t.matmul(w, vh).unwrap();
    let o = t.permute(o, &[0, 2, 1, 3]).unwrap();
    let o = t.reshape(o, &[b, tt, h * d]).unwrap();
    for (a, e) in t.value(fused).data().iter().zip(t.value(o).data()) {
        assert!((a - e).abs() < 1e-12);
    }
    for (a, e) in t.value(weights).data().iter().zip(t.value(w).data()) {
        assert!((a - e).abs() < 1e-12);
    }
}

#[test]
fn fd_batch_norm_train_and_eval() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x = random(&[3, 2, 4, 2], &mut rng);
    let gamma = random(&[2], &mut rng);
    let beta = random(&[2], &mut rng);
    for mode in [Mode::Train, Mode::Eval] {
        fd_check(&[x.clone(), gamma.clone(), beta.clone()], 24, |t, v| {
            let mut stats = BatchNormStats::new(2);
            stats.running_mean = alloc::vec![0.3, -0.2];
            stats.running_var = alloc::vec![0.5, 2.0];
            stats.updates = 1;
            t.batch_norm(v[0], v[1], v[2], 1, &mut stats, mode).unwrap()
        });
    }
}

#[test]
fn fd_normalize_adjacency() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let base = NdArray::from_rows(&[
        [0.0, 1.0, 0.0, 1.0],
        [1.0, 0.0, 1.0, 0.0],
        [0.0, 1.0, 0.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
    ])
    .unwrap();
    let mask = random(&[4, 4], &mut rng).map(|v| 1.0 + 0.5 * v);
    fd_check(&[mask], 26, |t, v| t.normalize_adjacency(&base, v[0]).unwrap());
}

#[test]
fn fd_huber_both_branches() {
    let pred = NdArray::new(alloc::vec![4, 1], alloc::vec![0.3, -0.02, 1.0, 0.5]).unwrap();
    let target = NdArray::new(alloc::vec![4, 1], alloc::vec![0.0, 0.0, 1.05, -1.0]).unwrap();
    fd_check(&[pred], 27, |t, v| t.huber_loss(v[0], &target, 0.1).unwrap());
}

#[test]
fn softmax_examples() {
    let mut t = Tape::new();
    let x = t.leaf(NdArray::full(&[4], 2.0));
    let y = t.softmax(x, 0).unwrap();
    assert_eq!(t.value(y).data(), &[0.25; 4]);

    let x = t.leaf(NdArray::new(alloc::vec![2], alloc::vec![0.0, libm::log(3.0)]).unwrap());
    let y = t.softmax(x, 0).unwrap();
    assert!((t.value(y).data()[0] - 0.25).abs() < 1e-15);
    assert!((t.value(y).data()[1] - 0.75).abs() < 1e-15);

    let base = NdArray::new(alloc::vec![3], alloc::vec![0.1, -2.0, 3.5]).unwrap();
    let a = t.leaf(base.clone());
    let b = t.leaf(base.map(|v| v + 123.0));
    let ya = t.softmax(a, 0).unwrap();
    let yb = t.softmax(b, 0).unwrap();
    assert!(t.value(ya).max_abs_diff(t.value(yb)).unwrap() < 1e-12);
}

#[test]
fn batch_norm_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut t = Tape::new();
    let gamma = t.leaf(NdArray::ones(&[2]));
    let beta = t.leaf(NdArray::zeros(&[2]));

    // already standardized per channel (biased variance 1)
    let raw = random(&[4, 2, 5, 3], &mut rng);
    let mut stats = BatchNormStats::new(2);
    let x = t.leaf(raw);
    let y = t.batch_norm(x, gamma, beta, 1, &mut stats, Mode::Train).unwrap();
    let std_x = t.value(y).clone();
    // a fixed point of the layer has mean 0 and variance exactly 1 - eps
    let mut fixed = std_x.clone();
    for c in 0..2 {
        let idx: alloc::vec::Vec<[usize; 4]> = (0..4)
            .flat_map(|n| (0..5).flat_map(move |tt| (0..3).map(move |v| [n, c, tt, v])))
            .collect();
        let m = idx.iter().map(|i| std_x.get(i)).sum::<f64>() / idx.len() as f64;
        let var = idx.iter().map(|i| (std_x.get(i) - m).powi(2)).sum::<f64>() / idx.len() as f64;
        let k = libm::sqrt((1.0 - BatchNormStats::DEFAULT_EPS) / var);
        for i in &idx {
            fixed.set(i, (std_x.get(i) - m) * k);
        }
    }
    let x2 = t.leaf(fixed.clone());
    let y2 = t.batch_norm(x2, gamma, beta, 1, &mut stats, Mode::Train).unwrap();
    assert!(t.value(y2).max_abs_diff(&fixed).unwrap() < 1e-6);

    // per-channel mean ~0 and variance ~1
    for c in 0..2 {
        let vals: alloc::vec::Vec<f64> = (0..4)
            .flat_map(|n| (0..5).flat_map(move |tt| (0..3).map(move |v| (n, tt, v))))
            .map(|(n, tt, v)| std_x.get(&[n, c, tt, v]))
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }

    // constant channel -> zeros
    let mut stats = BatchNormStats::new(2);
    let x = t.leaf(NdArray::full(&[2, 2, 3, 1], 7.0));
    let y = t.batch_norm(x, gamma, beta, 1, &mut stats, Mode::Train).unwrap();
    assert!(t.value(y).data().iter().all(|v| *v == 0.0));
    assert!((stats.running_mean[0] - 0.7).abs() < 1e-12);

    // eval before training uses mean 0 / var 1
    let fresh = BatchNormStats::new(2);
    let mut fresh2 = fresh.clone();
    let x = t.leaf(NdArray::full(&[1, 2, 1, 1], 3.0));
    let y = t.batch_norm(x, gamma, beta, 1, &mut fresh2, Mode::Eval).unwrap();
    let expect = 3.0 / libm::sqrt(1.0 + BatchNormStats::DEFAULT_EPS);
    assert!((t.value(y).data()[0] - expect).abs() < 1e-15);
    assert_eq!(fresh, fresh2);
}

#[test]
fn temporal_conv_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut t = Tape::new();
    let xv = random(&[2, 3, 5, 4], &mut rng);
    let x = t.leaf(xv.clone());
    let mut eye = NdArray::zeros(&[3, 3, 1]);
    for c in 0..3 {
        eye.set(&[c, c, 0], 1.0);
    }
    let w = t.leaf(eye);
    let y = t.temporal_conv(x, w, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &xv);

    let x = t.leaf(NdArray::zeros(&[1, 1, 4, 2]));
    let w = t.leaf(NdArray::zeros(&[1, 1, 3]));
    let y = t.temporal_conv(x, w, None, 2, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 2, 2]);

    // constant input, averaging kernel, no padding -> same constant
    let x = t.leaf(NdArray::full(&[1, 2, 6, 3], 4.5));
    let w = t.leaf(NdArray::full(&[1, 2, 3], 1.0 / 6.0));
    let y = t.temporal_conv(x, w, None, 1, 0).unwrap();
    assert!(t.value(y).data().iter().all(|v| (v - 4.5).abs() < 1e-12));

    let x = t.leaf(NdArray::zeros(&[1, 1, 2, 1]));
    let w = t.leaf(NdArray::zeros(&[1, 1, 5]));
    assert!(matches!(
        t.temporal_conv(x, w, None, 1, 1),
        Err(Error::InvalidKernel(_))
    ));
}

#[test]
fn backward_edge_cases() {
    let mut store = ParamStore::new();
    let p = store.add("p", NdArray::from_fn(&[2, 3], |i| i as f64), true);
    let frozen = store.add("frozen", NdArray::ones(&[2]), false);

    // constant loss
    let mut t = Tape::new();
    let c = t.leaf(NdArray::scalar(4.0));
    let _ = t.param(&store, p);
    t.backward(c, &mut store).unwrap();
    assert!(store.get(p).grad.data().iter().all(|g| *g == 0.0));

    // sum of parameters, twice without zero-grad
    let mut t = Tape::new();
    let pv = t.param(&store, p);
    let fv = t.param(&store, frozen);
    let s1 = t.sum(pv);
    let s2 = t.sum(fv);
    let s = t.add(s1, s2).unwrap();
    t.backward(s, &mut store).unwrap();
    assert!(store.get(p).grad.data().iter().all(|g| *g == 1.0));
    let once = store.get(p).grad.clone();
    t.backward(s, &mut store).unwrap();
    assert_eq!(store.get(p).grad, once.map(|g| 2.0 * g));
    assert!(store.get(frozen).grad.data().iter().all(|g| *g == 0.0));

    store.zero_grad();
    assert!(store.get(p).grad.data().iter().all(|g| *g == 0.0));

    // non-scalar loss
    assert!(matches!(t.backward(pv, &mut store), Err(Error::Contract(_))));
}

#[test]
fn adjacency_guard_rejects_nonpositive_degree() {
    let base = NdArray::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
    let mut t = Tape::new();
    let mask = t.leaf(NdArray::full(&[2, 2], -1.0));
    assert!(matches!(t.normalize_adjacency(&base, mask), Err(Error::Numeric(_))));
}

proptest! {
    #[test]
    fn reshape_and_transpose_round_trip(
        dims in proptest::collection::vec(1usize..4, 2..5),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&dims, &mut rng);
        let flat = a.reshape(&[a.len()]).unwrap().reshape(&dims).unwrap();
        prop_assert_eq!(&flat, &a);
        let rank = dims.len();
        let mut axes: alloc::vec::Vec<usize> = (0..rank).collect();
        axes.rotate_left(1);
        let mut inverse = alloc::vec![0; rank];
        for (i, &ax) in axes.iter().enumerate() { inverse[ax] = i; }
        let back = a.permute(&axes).unwrap().permute(&inverse).unwrap();
        prop_assert_eq!(back, a);
    }

    #[test]
    fn softmax_sums_to_one(
        vals in proptest::collection::vec(-50.0f64..50.0, 1..40),
    ) {
        let mut t = Tape::new();
        let x = t.leaf(NdArray::new(alloc::vec![vals.len()], vals).unwrap());
        let y = t.softmax(x, 0).unwrap();
        let s = t.value(y).sum();
        prop_assert!((s - 1.0).abs() <= 1e-12);
        prop_assert!(t.value(y).data().iter().all(|v| *v >= 0.0 && *v <= 1.0));
    }
}
