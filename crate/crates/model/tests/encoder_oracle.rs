//! Encoder forward pass against plain nested-loop arithmetic.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use qroute_core::{generate_instance, Instance};
use qroute_model::encoder::{BnMode, ScoreSite, ValueSite};
use qroute_model::params::ParamStore;
use qroute_model::tape::Tape;
use qroute_model::tensor::Mat;
use qroute_model::{Config, Model, Variant};

type Dense = Vec<Vec<f64>>;

fn dense(m: &Mat) -> Dense {
    (0..m.rows).map(|r| m.row(r).to_vec()).collect()
}

fn mm(a: &Dense, b: &Dense) -> Dense {
    let (n, k, p) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; p]; n];
    for i in 0..n {
        for j in 0..p {
            out[i][j] = (0..k).map(|t| a[i][t] * b[t][j]).sum();
        }
    }
    out
}

fn batch_norm_train(x: &Dense, gamma: &[f64], beta: &[f64], eps: f64) -> Dense {
    let n = x.len() as f64;
    let d = x[0].len();
    let mut out = x.clone();
    for c in 0..d {
        let mean = x.iter().map(|r| r[c]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
        for (o, r) in out.iter_mut().zip(x) {
            o[c] = gamma[c] * (r[c] - mean) / (var + eps).sqrt() + beta[c];
        }
    }
    out
}

fn close(a: &Dense, b: &Mat, tol: f64) {
    assert_eq!((a.len(), a[0].len()), b.shape());
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            let w = b.at(r, c);
            assert!((v - w).abs() <= tol * (1.0 + v.abs()), "({r},{c}): dense {v} vs tape {w}");
        }
    }
}

fn small(variant: Variant, d: usize, layers: usize) -> Config {
    let mut c = if variant == Variant::Quantum { Config::default() } else { Config::classical() };
    c.encoder.d_x = d;
    c.encoder.layers = layers;
    c.decoder.heads = 1;
    c.qsim.n_layers = 2;
    c
}

fn instance(m: usize, seed: u64) -> Instance {
    generate_instance(m, 30, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn param(store: &ParamStore, name: &str) -> Dense {
    dense(store.get(store.id(name).unwrap()))
}

/// Node and edge embeddings in training mode.
fn dense_init(store: &ParamStore, inst: &Instance, eps: f64) -> (Dense, Dense) {
    let n = inst.num_nodes();
    let c = inst.capacity() as f64;
    let nf: Dense = (0..n).map(|i| vec![inst.coords()[i][0], inst.coords()[i][1], inst.demands()[i] as f64 / c]).collect();
    let ef: Dense = (0..n * n).map(|k| vec![inst.distance(k / n, k % n)]).collect();
    let affine = |x: &Dense, a: &str, b: &str| {
        let b = param(store, b);
        mm(x, &param(store, a)).into_iter().map(|r| r.iter().zip(&b[0]).map(|(p, q)| p + q).collect()).collect::<Dense>()
    };
    let x = batch_norm_train(
        &affine(&nf, "enc/node/a", "enc/node/b"),
        &param(store, "enc/node/bn_gamma")[0],
        &param(store, "enc/node/bn_beta")[0],
        eps,
    );
    let e = batch_norm_train(
        &affine(&ef, "enc/edge/a", "enc/edge/b"),
        &param(store, "enc/edge/bn_gamma")[0],
        &param(store, "enc/edge/bn_beta")[0],
        eps,
    );
    (x, e)
}

/// Classical attention of layer `l` by explicit concatenation `[x_i ‖ x_j ‖ ê_ij]`.
fn dense_attention(store: &ParamStore, x: &Dense, e: &Dense, l: usize, slope: f64) -> Dense {
    let n = x.len();
    let p = |s: &str| param(store, &format!("enc/layer{l}/{s}"));
    let (wa, wb, wc, b, g) = (p("score/w_a"), p("score/w_b"), p("score/w_c"), p("score/b"), p("g"));
    let w: Dense = wa.iter().chain(&wb).chain(&wc).cloned().collect();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            let cat: Vec<f64> = x[i].iter().chain(&x[j]).chain(&e[i * n + j]).copied().collect();
            let h = mm(&vec![cat], &w);
            let s: f64 = h[0].iter().zip(&b[0]).zip(&g).map(|((hv, bv), gv)| (hv + bv) * gv[0]).sum();
            out[i][j] = if s > 0.0 { s } else { slope * s };
        }
        let mx = out[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = out[i].iter().map(|v| (v - mx).exp()).sum();
        for v in out[i].iter_mut() {
            *v = (*v - mx).exp() / z;
        }
    }
    out
}

#[test]
fn init_embeddings_match_dense_reimplementation() {
    let model = Model::new(&small(Variant::Classical, 6, 1), 3).unwrap();
    let inst = instance(4, 11);
    let mut tape = Tape::new(&model.store);
    let (x, e, stats) = model.encoder.init_embeddings(&mut tape, &inst, BnMode::Train).unwrap();
    let (dx, de) = dense_init(&model.store, &inst, model.config.encoder.bn_eps);
    close(&dx, tape.value(x), 1e-12);
    close(&de, tape.value(e), 1e-12);
    let stats = stats.unwrap();
    assert_eq!((stats.node_rows, stats.edge_rows), (5, 25));
}

#[test]
fn attention_and_layer_match_dense_reimplementation() {
    let model = Model::new(&small(Variant::Classical, 5, 2), 8).unwrap();
    let inst = instance(6, 12);
    let mut tape = Tape::new(&model.store);
    let (x, e, _) = model.encoder.init_embeddings(&mut tape, &inst, BnMode::Train).unwrap();
    let (dx, de) = dense_init(&model.store, &inst, model.config.encoder.bn_eps);
    let slope = model.config.encoder.leaky_slope;
    let a = model.encoder.attention_coefficients(&mut tape, x, e, 0).unwrap();
    let da = dense_attention(&model.store, &dx, &de, 0, slope);
    close(&da, tape.value(a), 1e-12);

    let x1 = model.encoder.layer_forward(&mut tape, x, a, 0).unwrap();
    let msg = mm(&da, &mm(&dx, &param(&model.store, "enc/layer0/value/w1")));
    let dx1: Dense = msg.iter().zip(&dx).map(|(m, r)| m.iter().zip(r).map(|(p, q)| p + q).collect()).collect();
    close(&dx1, tape.value(x1), 1e-12);

    let emb = model.encoder.encode(&mut tape, &inst, BnMode::Train).unwrap();
    let a1 = dense_attention(&model.store, &dx1, &de, 1, slope);
    let msg = mm(&a1, &mm(&dx1, &param(&model.store, "enc/layer1/value/w1")));
    let dx2: Dense = msg.iter().zip(&dx1).map(|(m, r)| m.iter().zip(r).map(|(p, q)| p + q).collect()).collect();
    close(&dx2, tape.value(emb.nodes), 1e-12);
    let n = dx2.len() as f64;
    let mean: Vec<f64> = (0..dx2[0].len()).map(|c| dx2.iter().map(|r| r[c]).sum::<f64>() / n).collect();
    close(&vec![mean], tape.value(emb.graph), 1e-12);
}

/// Two customers, `d_x = 1`, hand-set parameters.
#[test]
fn two_customer_attention_by_hand() {
    let mut model = Model::new(&small(Variant::Classical, 1, 1), 0).unwrap();
    let coords = vec![[0.0, 0.0], [0.6, 0.8], [0.0, 0.5]];
    let inst = Instance::new(coords, vec![0, 3, 6], 10).unwrap();
    let set = |store: &mut ParamStore, name: &str, v: f64| {
        let id = store.id(name).unwrap();
        store.get_mut(id).data[0] = v;
    };
    let s = &mut model.store;
    // x = BN(x-coordinate): node rows (0, 0.6, 0) give mean 0.2, variance 0.08.
    for (name, v) in [
        ("enc/node/a", 1.0),
        ("enc/node/b", 0.0),
        ("enc/edge/b", 0.0),
        ("enc/edge/a", 1.0),
        ("enc/layer0/score/w_a", 1.0),
        ("enc/layer0/score/w_b", 2.0),
        ("enc/layer0/score/w_c", 0.0),
        ("enc/layer0/score/b", 0.5),
        ("enc/layer0/g", 1.0),
    ] {
        set(s, name, v);
    }
    for k in 1..3 {
        let id = s.id("enc/node/a").unwrap();
        s.get_mut(id).data[k] = 0.0;
    }
    let mut tape = Tape::new(&model.store);
    let (x, e, _) = model.encoder.init_embeddings(&mut tape, &inst, BnMode::Train).unwrap();
    let a = model.encoder.attention_coefficients(&mut tape, x, e, 0).unwrap();

    let sd = (0.08f64 + 1e-5).sqrt();
    let xs = [-0.2 / sd, 0.4 / sd, -0.2 / sd];
    for i in 0..3 {
        let z: Vec<f64> = (0..3)
            .map(|j| {
                let s = xs[i] + 2.0 * xs[j] + 0.5;
                if s > 0.0 { s } else { 0.2 * s }
            })
            .collect();
        let total: f64 = z.iter().map(|v| v.exp()).sum();
        for j in 0..3 {
            let want = z[j].exp() / total;
            let got = tape.value(a).at(i, j);
            assert!((want - got).abs() < 1e-12, "a[{i}][{j}] {got} vs {want}");
        }
    }
    // Depot and customer 2 share the same x-coordinate, so their rows coincide.
    assert_eq!(tape.value(a).row(0), tape.value(a).row(2));
}

#[test]
fn equal_scores_give_uniform_rows_and_zero_w1_is_identity() {
    let mut model = Model::new(&small(Variant::Classical, 4, 1), 2).unwrap();
    for name in ["enc/layer0/g", "enc/layer0/value/w1"] {
        let id = model.store.id(name).unwrap();
        *model.store.get_mut(id) = Mat::zeros(4, if name.ends_with('g') { 1 } else { 4 });
    }
    let inst = instance(5, 3);
    let mut tape = Tape::new(&model.store);
    let (x, e, _) = model.encoder.init_embeddings(&mut tape, &inst, BnMode::Train).unwrap();
    let a = model.encoder.attention_coefficients(&mut tape, x, e, 0).unwrap();
    assert!(tape.value(a).data.iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-15));
    let x1 = model.encoder.layer_forward(&mut tape, x, a, 0).unwrap();
    assert_eq!(tape.value(x1), tape.value(x));
    let emb = model.encoder.encode(&mut tape, &inst, BnMode::Train).unwrap();
    let mut t2 = Tape::new(&model.store);
    let (x0, _, _) = model.encoder.init_embeddings(&mut t2, &inst, BnMode::Train).unwrap();
    let mean = t2.mean_rows(x0);
    assert_eq!(tape.value(emb.graph), t2.value(mean));
}

#[test]
fn eval_mode_with_unit_running_stats_is_scale_and_shift() {
    let model = Model::new(&small(Variant::Classical, 4, 1), 5).unwrap();
    let inst = instance(3, 5);
    let mut tape = Tape::new(&model.store);
    let (x, _, stats) = model.encoder.init_embeddings(&mut tape, &inst, BnMode::Eval).unwrap();
    assert!(stats.is_none());
    let s = &model.store;
    let (a, b) = (param(s, "enc/node/a"), param(s, "enc/node/b"));
    let eps = model.config.encoder.bn_eps;
    for i in 0..inst.num_nodes() {
        let f = [inst.coords()[i][0], inst.coords()[i][1], inst.demands()[i] as f64 / 30.0];
        for c in 0..4 {
            let pre: f64 = (0..3).map(|k| f[k] * a[k][c]).sum::<f64>() + b[0][c];
            assert!((pre / (1.0 + eps).sqrt() - tape.value(x).at(i, c)).abs() < 1e-14);
        }
    }
}

#[test]
fn identical_nodes_get_identical_embeddings() {
    let model = Model::new(&small(Variant::Quantum, 6, 2), 1).unwrap();
    let inst = Instance::new(vec![[0.1, 0.1], [0.5, 0.7], [0.5, 0.7], [0.9, 0.2]], vec![0, 4, 4, 2], 10).unwrap();
    let mut tape = Tape::new(&model.store);
    let emb = model.encoder.encode(&mut tape, &inst, BnMode::Train).unwrap();
    let x = tape.value(emb.nodes);
    assert_eq!(x.row(1), x.row(2));
}

#[test]
fn both_variants_share_shapes_and_rows_are_stochastic() {
    let inst = instance(7, 9);
    for v in [Variant::Classical, Variant::Quantum] {
        let model = Model::new(&small(v, 6, 2), 4).unwrap();
        assert!(matches!(model.encoder.layers[0].score, ScoreSite::Quantum(_)) == (v == Variant::Quantum));
        assert!(matches!(model.encoder.layers[0].value, ValueSite::Classical(_)));
        let mut tape = Tape::new(&model.store);
        let emb = model.encoder.encode(&mut tape, &inst, BnMode::Train).unwrap();
        assert_eq!(tape.shape(emb.nodes), (8, 6));
        assert_eq!(tape.shape(emb.edges), (64, 6));
        assert_eq!(tape.shape(emb.graph), (1, 6));
        for a in &emb.attention {
            for r in 0..8 {
                assert!((tape.value(*a).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn single_row_batch_norm_is_refused() {
    let model = Model::new(&small(Variant::Classical, 4, 1), 0).unwrap();
    let mut tape = Tape::new(&model.store);
    let nf = tape.constant(Mat::zeros(1, 4));
    assert!(model.encoder.node_bn.apply(&mut tape, nf, BnMode::Train, 1e-5).is_err());
}

#[test]
fn zero_layer_config_counts_input_maps_only() {
    let mut c = Config::classical();
    c.encoder.layers = 0;
    let counts = Model::new(&c, 0).unwrap().count_encoder_parameters();
    let d = c.encoder.d_x;
    // affine maps and batch-normalization scale/shift
    assert_eq!(counts.total, 3 * d + d + 2 * d + d + d + 2 * d);
    assert_eq!(counts.quantum, 0);
}

fn permuted_outputs(variant: Variant, m: usize, seed: u64, perm: &[usize]) -> (Mat, Mat, Mat, Mat) {
    let model = Model::new(&small(variant, 6, 2), seed).unwrap();
    let inst = instance(m, seed);
    let other = inst.permute_customers(perm).unwrap();
    let run = |i: &Instance| {
        let mut tape = Tape::new(&model.store);
        let emb = model.encoder.encode(&mut tape, i, BnMode::Train).unwrap();
        (tape.value(emb.nodes).clone(), tape.value(emb.graph).clone())
    };
    let (a, ga) = run(&inst);
    let (b, gb) = run(&other);
    (a, ga, b, gb)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn permutation_equivariance(seed in 0u64..1000, m in 2usize..8, quantum in any::<bool>(), shuffle in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (1..=m).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let variant = if quantum { Variant::Quantum } else { Variant::Classical };
        let (a, ga, b, gb) = permuted_outputs(variant, m, seed, &perm);
        // customer perm[k-1] of the original sits at position k of the permuted instance
        let tol = 1e-10;
        for c in 0..a.cols {
            prop_assert!((a.at(0, c) - b.at(0, c)).abs() < tol);
        }
        for (k, &src) in perm.iter().enumerate() {
            for c in 0..a.cols {
                prop_assert!((a.at(src, c) - b.at(k + 1, c)).abs() < tol, "node {} col {}", src, c);
            }
        }
        for c in 0..ga.cols {
            prop_assert!((ga.at(0, c) - gb.at(0, c)).abs() < tol);
        }
    }
}

#[test]
fn running_statistics_follow_momentum() {
    let mut model = Model::new(&small(Variant::Classical, 3, 1), 0).unwrap();
    let inst = instance(4, 1);
    let stats = {
        let mut tape = Tape::new(&model.store);
        model.encoder.encode(&mut tape, &inst, BnMode::Train).unwrap().bn_stats.unwrap()
    };
    model.encoder.update_running_stats(&mut model.store, &stats);
    let rm = model.store.get(model.encoder.node_bn.running_mean);
    let rv = model.store.get(model.encoder.node_bn.running_var);
    for c in 0..3 {
        assert!((rm.data[c] - 0.1 * stats.node.0[c]).abs() < 1e-15);
        assert!((rv.data[c] - (0.9 + 0.1 * stats.node.1[c] * 5.0 / 4.0)).abs() < 1e-15);
    }
}
