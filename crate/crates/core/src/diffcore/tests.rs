use super::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn feeds() -> Feeds {
    Feeds::new()
}

#[test]
fn relu_forward_matches_definition() {
    let store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
    let y = g.relu(x);
    let out = g.forward(&store, &feeds(), y).unwrap();
    assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn matmul_identity_returns_operand() {
    let store = ParamStore::new();
    let mut g = Graph::new();
    let eye = g.constant(Tensor::new(
        vec![3, 3],
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    ));
    let m_data: Vec<f64> = (0..9).map(|v| v as f64 * 0.37 - 1.1).collect();
    let m = g.constant(Tensor::new(vec![3, 3], m_data.clone()));
    let prod = g.matmul(eye, m).unwrap();
    let out = g.forward(&store, &feeds(), prod).unwrap();
    assert_eq!(out.data(), m_data.as_slice());
}

#[test]
fn conv2d_ones_sums_to_nine() {
    let store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.constant(Tensor::filled(&[1, 3, 3], 1.0));
    let k = g.constant(Tensor::filled(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, Padding::Valid).unwrap();
    let out = g.forward(&store, &feeds(), y).unwrap();
    assert_eq!(out.shape(), &[1, 1, 1]);
    assert_eq!(out.data(), &[9.0]);
}

#[test]
fn backward_product_rule() {
    let mut store = ParamStore::new();
    let px = store.register("x", Tensor::from_vec(vec![2.0]));
    let py = store.register("y", Tensor::from_vec(vec![3.0]));
    let mut g = Graph::new();
    let x = g.param(&store, px);
    let y = g.param(&store, py);
    let prod = g.mul(x, y).unwrap();
    let loss = g.mean_all(prod);
    g.forward(&store, &feeds(), loss).unwrap();
    let grads = g.backward(&store, loss).unwrap();
    assert_eq!(grads.param_grad(&g, px).unwrap().data(), &[3.0]);
    assert_eq!(grads.param_grad(&g, py).unwrap().data(), &[2.0]);
}

#[test]
fn backward_mean_relu_subgradient() {
    let mut store = ParamStore::new();
    let px = store.register("x", Tensor::from_vec(vec![-1.0, 4.0]));
    let mut g = Graph::new();
    let x = g.param(&store, px);
    let r = g.relu(x);
    let loss = g.mean_all(r);
    g.forward(&store, &feeds(), loss).unwrap();
    let grads = g.backward(&store, loss).unwrap();
    assert_eq!(grads.param_grad(&g, px).unwrap().data(), &[0.0, 0.5]);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut store = ParamStore::new();
    let px = store.register("x", Tensor::from_vec(vec![1.0, 2.0]));
    let mut g = Graph::new();
    let x = g.param(&store, px);
    let y = g.relu(x);
    g.forward(&store, &feeds(), y).unwrap();
    assert!(matches!(
        g.backward(&store, y),
        Err(DiffError::LossNotScalar { .. })
    ));
}

#[test]
fn forward_rejects_missing_or_misshapen_feeds() {
    let store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.input("x", vec![2]);
    let y = g.relu(x);
    assert!(matches!(
        g.forward(&store, &feeds(), y),
        Err(DiffError::MissingFeed { .. })
    ));
    let mut f = Feeds::new();
    f.insert("x", Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    assert!(matches!(
        g.forward(&store, &f, y),
        Err(DiffError::FeedShapeMismatch { .. })
    ));
}

#[test]
fn forward_surfaces_non_finite_values() {
    let store = ParamStore::new();
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![1.0e308]));
    let big = g.scale(x, 1.0e308, 0.0);
    assert!(matches!(
        g.forward(&store, &feeds(), big),
        Err(DiffError::NonFinite { .. })
    ));
}

#[test]
fn forward_is_deterministic_and_pure() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pw = store.register("w", Tensor::uniform(&[4, 4], 1.0, &mut rng));
    let before = store.hash_subset(&[pw]);
    let mut g = Graph::new();
    let w = g.param(&store, pw);
    let x = g.constant(Tensor::uniform(&[4, 4], 1.0, &mut rng));
    let h = g.matmul(w, x).unwrap();
    let r = g.relu(h);
    let loss = g.mean_all(r);
    let a = g.forward(&store, &feeds(), loss).unwrap();
    let b = g.forward(&store, &feeds(), loss).unwrap();
    assert!(a.bits_eq(&b));
    assert_eq!(store.hash_subset(&[pw]), before);
}

/// Finite-difference oracle over every parameter of a freshly built graph.
fn fd_report(
    store: &ParamStore,
    build: impl Fn(&mut Graph, &ParamStore) -> NodeId,
) -> GradCheckReport {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    check_gradients(&mut g, store, &feeds(), loss, 1e-5, 1e-6).unwrap()
}

#[test]
fn matmul_chain_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut store = ParamStore::new();
    let pa = store.register("a", Tensor::uniform(&[4, 3], 1.0, &mut rng));
    let pb = store.register("b", Tensor::uniform(&[3, 5], 1.0, &mut rng));
    let pc = store.register("c", Tensor::uniform(&[5, 2], 1.0, &mut rng));
    let report = fd_report(&store, |g, s| {
        let a = g.param(s, pa);
        let b = g.param(s, pb);
        let c = g.param(s, pc);
        let ab = g.matmul(a, b).unwrap();
        let r = g.relu(ab);
        let abc = g.matmul(r, c).unwrap();
        g.mean_all(abc)
    });
    assert!(report.all_pass(), "max rel err {}", report.max_rel_err);
}

#[test]
fn matmul_transpose_variants_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut store = ParamStore::new();
    let pa = store.register("a", Tensor::uniform(&[3, 4], 1.0, &mut rng));
    let pb = store.register("b", Tensor::uniform(&[5, 4], 1.0, &mut rng));
    let pv = store.register("v", Tensor::uniform(&[3], 1.0, &mut rng));
    let report = fd_report(&store, |g, s| {
        let a = g.param(s, pa);
        let b = g.param(s, pb);
        let v = g.param(s, pv);
        // a^T has shape [4,3]; x = a^T v is [4]; y = b * (a x) paths
        let x = g.matmul_t(a, v, true, false).unwrap(); // [4]
        let xr = g.reshape(x, vec![1, 4]).unwrap();
        let y = g.matmul_t(xr, b, false, true).unwrap(); // [1,5]
        g.mean_all(y)
    });
    assert!(report.all_pass(), "max rel err {}", report.max_rel_err);
}

#[test]
fn conv_and_broadcast_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut store = ParamStore::new();
    let pk = store.register("kernel", Tensor::uniform(&[3, 2, 3, 3], 0.8, &mut rng));
    let pbias = store.register("bias", Tensor::uniform(&[3], 0.5, &mut rng));
    let pmod = store.register("mod", Tensor::uniform(&[3, 2], 0.4, &mut rng));
    let input = Tensor::uniform(&[2, 5, 5], 1.0, &mut rng);
    let report = fd_report(&store, |g, s| {
        let k = g.param(s, pk);
        let b = g.param(s, pbias);
        let m = g.param(s, pmod);
        let x = g.constant(input.clone());
        let one_plus_m = g.scale(m, 1.0, 1.0);
        let kmod = g.mul_chan(k, one_plus_m).unwrap();
        let conv = g.conv2d(x, kmod, Padding::Same).unwrap();
        let biased = g.add_chan(conv, b).unwrap();
        let act = g.relu(biased);
        let pooled = g.mean_keep(act, 1).unwrap();
        let row = g.reshape(pooled, vec![1, 3]).unwrap();
        let sq = g.mul(row, row).unwrap();
        g.mean_all(sq)
    });
    assert!(report.all_pass(), "max rel err {}", report.max_rel_err);
}

#[test]
fn gather_concat_softmax_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut store = ParamStore::new();
    let pt = store.register("table", Tensor::uniform(&[5, 3], 1.0, &mut rng));
    let pw = store.register("w", Tensor::uniform(&[4, 9], 0.6, &mut rng));
    let pb = store.register("b", Tensor::uniform(&[4], 0.3, &mut rng));
    let report = fd_report(&store, |g, s| {
        let t = g.param(s, pt);
        let w = g.param(s, pw);
        let b = g.param(s, pb);
        // Repeated row 3 checks gradient accumulation into the same table row.
        let e1 = g.gather(t, vec![1, 3]).unwrap();
        let e2 = g.gather(t, vec![3]).unwrap();
        let flat1 = g.reshape(e1, vec![1, 6]).unwrap();
        let flat2 = g.reshape(e2, vec![1, 3]).unwrap();
        let cat = g.concat(&[flat1, flat2], 1).unwrap();
        let logits = g.matmul_t(cat, w, false, true).unwrap();
        let shifted = g.add_rows(logits, b).unwrap();
        g.softmax_xent(shifted, vec![2]).unwrap()
    });
    assert!(report.all_pass(), "max rel err {}", report.max_rel_err);
}

#[test]
fn primitive_gradients_pass_on_three_sizes() {
    for (seed, (m, k, n)) in [(23u64, (2, 3, 4)), (29, (3, 5, 2)), (31, (6, 4, 3))] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let pa = store.register("a", Tensor::uniform(&[m, k], 1.0, &mut rng));
        let pb = store.register("b", Tensor::uniform(&[k, n], 1.0, &mut rng));
        let report = fd_report(&store, |g, s| {
            let a = g.param(s, pa);
            let b = g.param(s, pb);
            let ab = g.matmul(a, b).unwrap();
            let sc = g.scale(ab, 0.7, -0.2);
            let r = g.relu(sc);
            g.mean_all(r)
        });
        assert!(
            report.all_pass(),
            "size {:?} max rel err {}",
            (m, k, n),
            report.max_rel_err
        );
    }
}

#[test]
fn disconnected_parameter_checks_out_with_zero_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let mut store = ParamStore::new();
    let pw = store.register("w", Tensor::uniform(&[2, 2], 1.0, &mut rng));
    let p_unused = store.register("unused", Tensor::uniform(&[3], 1.0, &mut rng));
    let mut g = Graph::new();
    let w = g.param(&store, pw);
    let _orphan = g.param(&store, p_unused);
    let sq = g.mul(w, w).unwrap();
    let loss = g.mean_all(sq);
    let report = check_gradients(&mut g, &store, &feeds(), loss, 1e-5, 1e-6).unwrap();
    let entry = report
        .entries
        .iter()
        .find(|e| e.name == "unused")
        .expect("unused param present in report");
    assert_eq!(entry.max_rel_err, 0.0);
    assert!(entry.pass);
    assert!(report.all_pass());
}

#[test]
fn linear_layer_weights_pass_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut store = ParamStore::new();
    let pw = store.register("w", Tensor::uniform(&[2, 5], 1.0, &mut rng)); // 10 weights
    let x = Tensor::uniform(&[5], 1.0, &mut rng);
    let report = fd_report(&store, |g, s| {
        let w = g.param(s, pw);
        let xv = g.constant(x.clone());
        let y = g.matmul(w, xv).unwrap();
        let r = g.relu(y);
        g.mean_all(r)
    });
    assert!(report.all_pass(), "max rel err {}", report.max_rel_err);
    assert!(report.max_rel_err <= 1e-6);
}

#[test]
fn conv_modulation_gradient_at_zero_matches_unit_scale_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let kernel = Tensor::uniform(&[2, 2, 3, 3], 0.8, &mut rng);
    let input = Tensor::uniform(&[2, 4, 4], 1.0, &mut rng);

    // Path 1: kernel * (1 + M) with M = 0.
    let mut store_m = ParamStore::new();
    let pm = store_m.register("m", Tensor::zeros(&[2, 2]));
    let mut g1 = Graph::new();
    let loss1 = {
        let m = g1.param(&store_m, pm);
        let k = g1.constant(kernel.clone());
        let x = g1.constant(input.clone());
        let one_plus = g1.scale(m, 1.0, 1.0);
        let km = g1.mul_chan(k, one_plus).unwrap();
        let c = g1.conv2d(x, km, Padding::Valid).unwrap();
        g1.mean_all(c)
    };
    let report = check_gradients(&mut g1, &store_m, &feeds(), loss1, 1e-5, 1e-6).unwrap();
    assert!(report.all_pass(), "max rel err {}", report.max_rel_err);
    let grads1 = g1.backward(&store_m, loss1).unwrap();
    let gm = grads1.param_grad(&g1, pm).unwrap().clone();

    // Path 2: kernel * S with S = 1.
    let mut store_s = ParamStore::new();
    let ps = store_s.register("s", Tensor::filled(&[2, 2], 1.0));
    let mut g2 = Graph::new();
    let loss2 = {
        let sfac = g2.param(&store_s, ps);
        let k = g2.constant(kernel.clone());
        let x = g2.constant(input.clone());
        let km = g2.mul_chan(k, sfac).unwrap();
        let c = g2.conv2d(x, km, Padding::Valid).unwrap();
        g2.mean_all(c)
    };
    g2.forward(&store_s, &feeds(), loss2).unwrap();
    let grads2 = g2.backward(&store_s, loss2).unwrap();
    let gs = grads2.param_grad(&g2, ps).unwrap();
    for (a, b) in gm.data().iter().zip(gs.data()) {
        assert!(rel_err(*a, *b) <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn check_gradients_rejects_bad_arguments() {
    let mut store = ParamStore::new();
    let pw = store.register("w", Tensor::from_vec(vec![1.0]));
    let mut g = Graph::new();
    let w = g.param(&store, pw);
    let loss = g.mean_all(w);
    assert!(matches!(
        check_gradients(&mut g, &store, &feeds(), loss, 0.0, 1e-6),
        Err(DiffError::InvalidArgument(_))
    ));
    assert!(matches!(
        check_gradients(&mut g, &store, &feeds(), loss, 1e-5, -1.0),
        Err(DiffError::InvalidArgument(_))
    ));
}

#[test]
fn frozen_params_still_receive_gradients() {
    let mut store = ParamStore::new();
    let pw = store.register("w", Tensor::from_vec(vec![2.0]));
    store.set_frozen(pw, true);
    let mut g = Graph::new();
    let w = g.param(&store, pw);
    let sq = g.mul(w, w).unwrap();
    let loss = g.mean_all(sq);
    g.forward(&store, &feeds(), loss).unwrap();
    let grads = g.backward(&store, loss).unwrap();
    assert_eq!(grads.param_grad(&g, pw).unwrap().data(), &[4.0]);
}
