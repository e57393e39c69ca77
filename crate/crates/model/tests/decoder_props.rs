//! Decoder step function, decoding strategies and their probability identities.

use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qroute_core::{generate_instance, validate_solution, EnvState, Instance};
use qroute_model::decoder::{argmax_masked, Trajectory};
use qroute_model::encoder::BnMode;
use qroute_model::tape::{Mask, Tape};
use qroute_model::tensor::Mat;
use qroute_model::{Config, Model, ModelError, Variant};

fn small(variant: Variant, d: usize, heads: usize) -> Config {
    let mut c = if variant == Variant::Quantum { Config::default() } else { Config::classical() };
    c.encoder.d_x = d;
    c.encoder.layers = 2;
    c.decoder.heads = heads;
    c.qsim.n_layers = 2;
    c
}

fn instance(m: usize, seed: u64) -> Instance {
    generate_instance(m, 30, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn set_zero(model: &mut Model, name: &str) {
    let id = model.store.id(name).unwrap();
    let m = model.store.get_mut(id);
    m.data.iter_mut().for_each(|v| *v = 0.0);
}

#[test]
fn context_vector_matches_dense_reimplementation() {
    let model = Model::new(&small(Variant::Classical, 6, 3), 4).unwrap();
    let inst = instance(5, 2);
    let mut tape = Tape::new(&model.store);
    let emb = model.encoder.encode(&mut tape, &inst, BnMode::Train).unwrap();
    let cache = model.decoder.prepare(&mut tape, &emb);
    let env = EnvState::reset(&inst).step(2).unwrap().0;
    let mask: Mask = Arc::new(env.feasible_mask().unwrap());
    let load = env.remaining_load() as f64 / 30.0;
    let q = model.decoder.query(&mut tape, &cache, &[2], &[load]);
    let weights: Vec<_> = (0..3)
        .map(|h| {
            let s = model.decoder.step_scores_first(&mut tape, &cache, q, h);
            tape.masked_softmax_rows(s, &mask)
        })
        .collect();
    let c = model.decoder.context_vector(&mut tape, &cache, &weights);
    let logits = model.decoder.second_logits(&mut tape, &cache, c);

    let s = &model.store;
    let get = |n: &str| s.get(s.id(n).unwrap()).clone();
    let (wq, bq, wk, wv, wf) = (get("dec/w_q"), get("dec/b_q"), get("dec/w_k"), get("dec/w_v"), get("dec/w_f"));
    let x = tape.value(emb.nodes).clone();
    let g = tape.value(emb.graph).clone();
    let n = inst.num_nodes();
    let d = 6;
    let ctx: Vec<f64> = g.data.iter().chain(x.row(2)).copied().chain([load]).collect();
    let qd: Vec<f64> = (0..d).map(|j| (0..2 * d + 1).map(|i| ctx[i] * wq.at(i, j)).sum::<f64>() + bq.data[j]).collect();
    let proj = |w: &Mat| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..d).map(|j| (0..d).map(|k| x.at(i, k) * w.at(k, j)).sum()).collect()).collect()
    };
    let (k, v) = (proj(&wk), proj(&wv));
    let dv = 2;
    let mut cat = vec![0.0; d];
    for h in 0..3 {
        let cols = h * dv..(h + 1) * dv;
        let u: Vec<f64> = (0..n)
            .map(|i| cols.clone().map(|c| qd[c] * k[i][c]).sum::<f64>() / (dv as f64).sqrt())
            .collect();
        let mx = (0..n).filter(|&i| mask[i]).map(|i| u[i]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..n).filter(|&i| mask[i]).map(|i| (u[i] - mx).exp()).sum();
        for c in cols {
            cat[c] = (0..n).filter(|&i| mask[i]).map(|i| (u[i] - mx).exp() / z * v[i][c]).sum();
        }
    }
    let cd: Vec<f64> = (0..d).map(|j| (0..d).map(|i| cat[i] * wf.at(i, j)).sum()).collect();
    for j in 0..d {
        assert!((cd[j] - tape.value(c).data[j]).abs() < 1e-12);
    }
    for i in 0..n {
        let want = 10.0 * ((0..d).map(|c| cd[c] * k[i][c]).sum::<f64>() / (dv as f64).sqrt()).tanh();
        assert!((want - tape.value(logits).data[i]).abs() < 1e-12);
        assert!(want.abs() <= 10.0);
    }
}

#[test]
fn step_probability_examples() {
    let model = Model::new(&small(Variant::Classical, 4, 1), 0).unwrap();
    let mut tape = Tape::new(&model.store);
    let logits = tape.constant(Mat::row_vector(vec![1.0, 1.0, 3.0, -2.0]));
    let mask: Mask = Arc::new(vec![true, true, false, true]);
    let lp = model.decoder.step_probabilities(&mut tape, logits, &mask, 1.0).unwrap();
    let p: Vec<f64> = tape.value(lp).data.iter().map(|v| v.exp()).collect();
    assert_eq!(p[2], 0.0);
    let z = 2.0 * 1f64.exp() + (-2f64).exp();
    assert!((p[0] - 1f64.exp() / z).abs() < 1e-15);
    assert_eq!(p[0], p[1]);
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let two = Arc::new(vec![true, true, false, false]);
    let lp = model.decoder.step_probabilities(&mut tape, logits, &two, 1.0).unwrap();
    assert_eq!(tape.value(lp).data[0].exp(), 0.5);

    let hot = model.decoder.step_probabilities(&mut tape, logits, &mask, 1e12).unwrap();
    for i in [0, 1, 3] {
        assert!((tape.value(hot).data[i].exp() - 1.0 / 3.0).abs() < 1e-9);
    }
    for k in [0.0, -1.0, f64::NAN] {
        assert!(matches!(model.decoder.step_probabilities(&mut tape, logits, &mask, k), Err(ModelError::Config(_))));
    }
}

#[test]
fn orthogonal_query_and_key_score_zero() {
    let mut model = Model::new(&small(Variant::Classical, 4, 1), 0).unwrap();
    set_zero(&mut model, "dec/w_k");
    let inst = instance(3, 0);
    let mut tape = Tape::new(&model.store);
    let emb = model.encoder.encode(&mut tape, &inst, BnMode::Train).unwrap();
    let cache = model.decoder.prepare(&mut tape, &emb);
    let q = model.decoder.query(&mut tape, &cache, &[0], &[1.0]);
    let s = model.decoder.step_scores_first(&mut tape, &cache, q, 0);
    assert!(tape.value(s).data.iter().all(|&v| v == 0.0));
}

#[test]
fn single_head_single_allowed_node_passes_its_value_through() {
    let model = Model::new(&small(Variant::Classical, 4, 1), 3).unwrap();
    let inst = instance(3, 1);
    let mut tape = Tape::new(&model.store);
    let emb = model.encoder.encode(&mut tape, &inst, BnMode::Train).unwrap();
    let cache = model.decoder.prepare(&mut tape, &emb);
    let mask: Mask = Arc::new(vec![false, false, true, false]);
    let q = model.decoder.query(&mut tape, &cache, &[1], &[0.5]);
    let s = model.decoder.step_scores_first(&mut tape, &cache, q, 0);
    let a = tape.masked_softmax_rows(s, &mask);
    assert_eq!(tape.value(a).data, vec![0.0, 0.0, 1.0, 0.0]);
    let c = model.decoder.context_vector(&mut tape, &cache, &[a]);
    let v2 = tape.gather_rows(cache.value_heads[0], &[2]);
    let wf = tape.param(model.decoder.w_f);
    let want = tape.matmul(v2, wf);
    assert_eq!(tape.value(c), tape.value(want));
}

#[test]
fn all_masked_row_is_an_error() {
    let model = Model::new(&small(Variant::Classical, 4, 1), 3).unwrap();
    let inst = instance(3, 1);
    let mut tape = Tape::new(&model.store);
    let emb = model.encoder.encode(&mut tape, &inst, BnMode::Train).unwrap();
    let cache = model.decoder.prepare(&mut tape, &emb);
    let mask: Mask = Arc::new(vec![false; 4]);
    let r = model.decoder.step_rows(&mut tape, &cache, &[1], &[0.5], &mask, 1.0);
    assert!(matches!(r, Err(ModelError::NoFeasibleAction { .. })));
}

#[test]
fn single_customer_route_and_greedy_determinism() {
    let model = Model::new(&small(Variant::Quantum, 6, 2), 1).unwrap();
    let one = Instance::new(vec![[0.2, 0.2], [0.9, 0.1]], vec![0, 5], 10).unwrap();
    assert_eq!(model.greedy(&one).unwrap().route.sequence(), &[0, 1, 0]);
    let inst = instance(12, 4);
    let a = model.greedy(&inst).unwrap();
    let b = model.greedy(&inst).unwrap();
    assert_eq!(a.route, b.route);
    assert_eq!(a.log_prob, b.log_prob);
    assert!(a.log_prob <= 0.0);
}

#[test]
fn uniform_policy_on_two_customers_splits_evenly() {
    let mut model = Model::new(&small(Variant::Classical, 4, 1), 2).unwrap();
    set_zero(&mut model, "dec/w_k");
    let inst = Instance::new(vec![[0.5, 0.5], [0.1, 0.1], [0.9, 0.9]], vec![0, 1, 1], 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 10_000;
    let mut first = 0;
    for _ in 0..n {
        let (r, _) = model.sample_best(&inst, 1, 1.0, &mut rng).unwrap();
        if r.route.sequence()[1] == 1 {
            first += 1;
        }
        // first customer, then the other customer or the depot; the rest is forced
        assert!((r.log_prob - 2.0 * 0.5f64.ln()).abs() < 1e-12);
    }
    let sigma = (n as f64 * 0.25).sqrt();
    assert!((first as f64 - n as f64 / 2.0).abs() < 3.0 * sigma, "{first} of {n}");
}

/// Each step's empirical action frequencies against its probabilities.
#[test]
fn sampling_frequencies_match_step_probabilities() {
    let model = Model::new(&small(Variant::Classical, 8, 2), 6).unwrap();
    let inst = instance(6, 6);
    let mut tape = Tape::new(&model.store);
    let emb = model.encoder.encode(&mut tape, &inst, BnMode::Eval).unwrap();
    let cache = model.decoder.prepare(&mut tape, &emb);
    let env = EnvState::reset(&inst).step(3).unwrap().0;
    let mask: Mask = Arc::new(env.feasible_mask().unwrap());
    let load = env.remaining_load() as f64 / 30.0;
    let out = model.decoder.step_rows(&mut tape, &cache, &[3], &[load], &mask, 2.5).unwrap();
    let lp = tape.value(out.log_probs).data.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 10_000;
    let mut counts = vec![0usize; lp.len()];
    for _ in 0..n {
        counts[qroute_model::decoder::sample_masked(&lp, &mask, &mut rng)] += 1;
    }
    for (i, &c) in counts.iter().enumerate() {
        let p = lp[i].exp();
        if !mask[i] {
            assert_eq!(c, 0);
            continue;
        }
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma + 1.0, "node {i}: {c} draws, p {p}");
    }
}

/// Whole-episode frequencies of the first two actions on a frozen policy.
#[test]
fn episode_sampling_matches_first_step_distribution() {
    let model = Model::new(&small(Variant::Quantum, 6, 2), 2).unwrap();
    let inst = instance(4, 3);
    let first = {
        let mut tape = Tape::new(&model.store);
        let emb = model.encoder.encode(&mut tape, &inst, BnMode::Eval).unwrap();
        let cache = model.decoder.prepare(&mut tape, &emb);
        let mask: Mask = Arc::new(EnvState::reset(&inst).feasible_mask().unwrap());
        let out = model.decoder.step_rows(&mut tape, &cache, &[0], &[1.0], &mask, 1.3).unwrap();
        tape.value(out.log_probs).data.iter().map(|v| v.exp()).collect::<Vec<_>>()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 10_000;
    let mut counts = vec![0usize; first.len()];
    for _ in 0..n {
        let (r, _) = model.sample_best(&inst, 1, 1.3, &mut rng).unwrap();
        counts[r.route.sequence()[1]] += 1;
    }
    assert_eq!(counts[0], 0);
    for (i, &c) in counts.iter().enumerate().skip(1) {
        let p = first[i];
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sigma + 1.0, "node {i}: {c} draws, p {p}");
    }
}

#[test]
fn log_prob_is_the_product_of_step_probabilities() {
    let model = Model::new(&small(Variant::Classical, 8, 2), 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in 0..20 {
        let inst = instance(10, s);
        let (r, _) = model.sample_best(&inst, 1, 2.5, &mut rng).unwrap();
        let product: f64 = r
            .trajectory
            .actions
            .iter()
            .zip(&r.step_probs)
            .map(|(&a, p)| p[a])
            .product();
        let lp = r.log_prob.exp();
        assert!((lp - product).abs() <= 1e-9 * product, "{lp} vs {product}");
        for (t, p) in r.step_probs.iter().enumerate() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let row = &r.trajectory.mask[t * 11..(t + 1) * 11];
            for (i, &ok) in row.iter().enumerate() {
                if !ok {
                    assert_eq!(p[i], 0.0);
                }
            }
        }
    }
}

/// Re-evaluating a stored trajectory in one batch reproduces the step-by-step values bit for bit.
#[test]
fn batched_evaluation_equals_stepwise_decoding() {
    for variant in [Variant::Classical, Variant::Quantum] {
        let model = Model::new(&small(variant, 6, 2), 3).unwrap();
        let inst = instance(8, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = model.rollout(&inst, 2.5, BnMode::Train, &mut rng).unwrap();
        let mut tape = Tape::new(&model.store);
        let emb = model.encoder.encode(&mut tape, &inst, BnMode::Train).unwrap();
        let cache = model.decoder.prepare(&mut tape, &emb);
        let traj = Trajectory::replay(&inst, &r.decode.trajectory.actions).unwrap();
        assert_eq!(traj, r.decode.trajectory);
        let (total, _, lp) = model.decoder.evaluate(&mut tape, &cache, &traj, 2.5).unwrap();
        assert_eq!(tape.value(total).item(), r.decode.log_prob);
        let n = inst.num_nodes();
        for (t, p) in r.decode.step_probs.iter().enumerate() {
            let row: Vec<f64> = tape.value(lp).row(t).iter().map(|v| v.exp()).collect();
            assert_eq!(&row, p);
        }
        assert_eq!(tape.value(lp).shape(), (traj.len(), n));
    }
}

#[test]
fn temperature_never_changes_the_greedy_choice() {
    let model = Model::new(&small(Variant::Classical, 8, 2), 12).unwrap();
    let inst = instance(15, 12);
    let greedy = model.greedy(&inst).unwrap();
    let mut tape = Tape::new(&model.store);
    let emb = model.encoder.encode(&mut tape, &inst, BnMode::Eval).unwrap();
    let cache = model.decoder.prepare(&mut tape, &emb);
    let traj = &greedy.trajectory;
    let mask: Mask = Arc::new(traj.mask.clone());
    for k in [0.1, 1.0, 1.2, 1.8, 2.5, 40.0] {
        let out = model.decoder.step_rows(&mut tape, &cache, &traj.current, &traj.load_frac, &mask, k).unwrap();
        let n = inst.num_nodes();
        for t in 0..traj.len() {
            let lp = &tape.value(out.log_probs).row(t).to_vec();
            let m = &traj.mask[t * n..(t + 1) * n];
            assert_eq!(argmax_masked(lp, m), traj.actions[t], "temperature {k}, step {t}");
        }
    }
}

fn fuzz_model(seed: u64, variant: Variant) -> Model {
    let mut model = Model::new(&small(variant, 8, 2), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let scale = rng.gen_range(0.1..20.0);
    for id in model.store.ids().collect::<Vec<_>>() {
        if model.store.is_trainable(id) {
            model.store.get_mut(id).data.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0) * scale);
        }
    }
    model
}

#[test]
fn decoded_routes_are_feasible_for_random_parameters() {
    for draw in 0..1000u64 {
        let variant = if draw % 10 == 0 { Variant::Quantum } else { Variant::Classical };
        let model = fuzz_model(draw, variant);
        let mut rng = ChaCha8Rng::seed_from_u64(draw);
        let m = rng.gen_range(1..=12);
        let cap = rng.gen_range(9..=30);
        let inst = generate_instance(m, cap, &mut rng).unwrap();
        let g = model.greedy(&inst).unwrap();
        let (s, _) = model.sample_best(&inst, 1, 2.5, &mut rng).unwrap();
        for r in [&g.route, &s.route] {
            let report = validate_solution(&inst, r);
            assert!(report.feasible, "draw {draw}: {:?}", report.violations);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn same_seed_same_sample(seed in any::<u64>(), m in 1usize..10) {
        let model = Model::new(&small(Variant::Classical, 4, 2), 1).unwrap();
        let inst = instance(m, seed);
        let a = model.sample_best(&inst, 3, 2.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = model.sample_best(&inst, 3, 2.5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a.0.route, b.0.route);
        prop_assert_eq!(a.1, b.1);
    }
}
