use fastrm::relevancy::{
    attention_grads, attention_grads_with, binarize, compute_relevancy, extract_vision, propagate, replayed_logit,
};
use fastrm::tensor::Tensor;
use fastrm::toy::model::AttnOverride;
use fastrm::toy::{Distribution, ModelConfig, QaSample, ToyModel};
use fastrm::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;
use common::oracles::{random_attention3, unrolled3};

fn model(layers: usize, heads: usize, seed: u64) -> ToyModel {
    ToyModel::init(ModelConfig {
        n_layers: layers,
        n_heads: heads,
        d_model: 8,
        grid: 2,
        vocab_size: 32,
        max_seq_len: 24,
        mlp_dim: 8,
        seed,
    })
    .unwrap()
}

fn trace_for(m: &ToyModel, seed: u64) -> fastrm::toy::GenerationTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = QaSample::generate(Distribution::InDomain, 2, &mut rng);
    m.generate_greedy(&s.scene, &s.question_tokens()).unwrap()
}

#[test]
fn attention_gradient_matches_central_differences() {
    let eps = 1e-6;
    for (layers, heads) in [(1, 1), (2, 2)] {
        let m = model(layers, heads, 11);
        let t = trace_for(&m, 3);
        let i = t.n_out() - 1;
        let ag = attention_grads(&m, &t, i).unwrap();
        let n = t.n_in() + i;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for layer in 0..layers {
            for _ in 0..25 {
                let h = rng.gen_range(0..heads);
                let r = rng.gen_range(0..n);
                let c = rng.gen_range(0..=r);
                let idx = h * n * n + r * n + c;
                let probe = |s: f64| {
                    let mut delta = Tensor::zeros(&[heads, n, n]);
                    delta.data_mut()[idx] = s;
                    replayed_logit(&m, &t, i, Some(AttnOverride { layer, delta })).unwrap()
                };
                let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
                let an = ag.grads[layer].data()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-2);
                assert!(rel <= 1e-4, "layer {layer} ({h},{r},{c}): fd {fd} analytic {an}");
            }
        }
    }
}

#[test]
fn single_layer_single_head_is_closed_form() {
    let m = model(1, 1, 4);
    let t = trace_for(&m, 8);
    for i in 0..t.n_out() {
        let ag = attention_grads(&m, &t, i).unwrap();
        let r = compute_relevancy(&m, &t, i).unwrap();
        let n = t.n_in() + i;
        assert_eq!(r.size(), n);
        for row in 0..n {
            for col in 0..n {
                let k = row * n + col;
                let expect = if row == col { 1.0 } else { 0.0 } + (ag.grads[0].data()[k] * ag.attention[0].data()[k]).max(0.0);
                assert_eq!(r.matrix.data()[k], expect);
            }
        }
    }
}

#[test]
fn relevancy_grows_by_one_per_step_and_is_nonnegative() {
    let m = model(2, 2, 6);
    let t = trace_for(&m, 1);
    for i in 0..t.n_out() {
        let r = compute_relevancy(&m, &t, i).unwrap();
        assert_eq!(r.size(), t.n_in() + i);
        assert!(r.matrix.data().iter().all(|&v| v >= 0.0));
        assert_eq!(r, compute_relevancy(&m, &t, i).unwrap());
    }
}

#[test]
fn replayed_attention_matches_trace() {
    let m = model(2, 2, 2);
    let t = trace_for(&m, 9);
    for i in 0..t.n_out() {
        let ag = attention_grads(&m, &t, i).unwrap();
        for (l, a) in ag.attention.iter().enumerate() {
            let stored = t.step_attention(l, i).unwrap();
            for (x, y) in a.data().iter().zip(stored.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn step_gradients_ignore_later_tokens() {
    let m = model(2, 2, 3);
    let mut t = trace_for(&m, 4);
    let before = attention_grads(&m, &t, 0).unwrap();
    t.output.push(5);
    t.output.push(6);
    let after = attention_grads(&m, &t, 0).unwrap();
    assert_eq!(before.grads, after.grads);
}

#[test]
fn foreign_trace_is_a_state_error() {
    let t = trace_for(&model(1, 1, 1), 2);
    assert!(matches!(attention_grads(&model(1, 1, 2), &t, 0), Err(Error::State(_))));
}

#[test]
fn constant_logit_has_zero_attention_gradient() {
    // Zeroing the output head makes every logit constant.
    let mut m = model(2, 2, 7);
    let idx = m.params().index_of("lm_head").unwrap();
    m.params_mut().param_mut(idx).value.data_mut().fill(0.0);
    let t = trace_for(&m, 3);
    let ag = attention_grads_with(&m, &t, 0, None).unwrap();
    assert!(ag.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    let r = compute_relevancy(&m, &t, 0).unwrap();
    assert_eq!(r.matrix, Tensor::eye(t.n_in()));
}

proptest! {
    #[test]
    fn propagation_matches_unrolled_recurrence(seed in any::<u64>(), layers in 1usize..4, heads in 1usize..4) {
        let (a, g) = random_attention3(seed, layers, heads);
        let got = propagate(&a, &g).unwrap();
        let want = unrolled3(&a, &g);
        for x in 0..3 {
            for y in 0..3 {
                prop_assert!((got.data()[x * 3 + y] - want[x][y]).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn binarize_matches_direct_rule(v in prop::collection::vec(0.0f64..10.0, 1..50), t in prop::sample::select(vec![0.1, 0.3, 0.5, 1.0])) {
        let max = v.iter().cloned().fold(0.0, f64::max);
        prop_assume!(max > 0.0);
        let bits = binarize(&v, t).unwrap();
        prop_assert!(bits.iter().any(|&b| b));
        for (j, &b) in bits.iter().enumerate() {
            prop_assert_eq!(b, v[j] >= max * t);
        }
    }

    #[test]
    fn extract_vision_is_last_row_prefix(n in 1usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = rng.gen_range(0..=n);
        let m = Tensor::from_vec(&[n, n], (0..n * n).map(|_| rng.gen()).collect()).unwrap();
        let r = fastrm::relevancy::RelevancyMatrix { token_index: 0, matrix: m.clone() };
        let v = extract_vision(&r, p).unwrap();
        prop_assert_eq!(v.len(), p);
        for j in 0..p {
            prop_assert_eq!(v[j], m.at(n - 1, j));
        }
    }
}
