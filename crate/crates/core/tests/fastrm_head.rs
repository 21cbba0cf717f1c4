use fastrm::autodiff::Graph;
use fastrm::fastrm::{FastRm, FastRmConfig};
use fastrm::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(head: &mut FastRm, name: &str, values: &[f64]) {
    let idx = head.params().index_of(name).unwrap();
    head.params_mut().param_mut(idx).value.data_mut().copy_from_slice(values);
}

fn random_hidden(rows: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(&[rows, d], (0..rows * d).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn two_token_case_by_hand() {
    let mut head = FastRm::init(FastRmConfig::new(2, 0)).unwrap();
    set(&mut head, "norm.gain", &[2.0, 0.5]);
    set(&mut head, "norm.bias", &[0.1, -0.3]);
    set(&mut head, "attn.wq", &[1.0, 0.0, 0.0, 2.0]);
    set(&mut head, "attn.wk", &[0.5, 1.0, -1.0, 0.0]);
    let h = Tensor::from_vec(&[2, 2], vec![1.0, 3.0, 2.0, -2.0]).unwrap();

    // Patch row [1, 3]: mean 2, variance 1. Query row [2, -2]: mean 0, variance 4.
    let s0 = 1.0 / (1.0f64 + 1e-5).sqrt();
    let s1 = 1.0 / (4.0f64 + 1e-5).sqrt();
    let kn = [-s0 * 2.0 + 0.1, s0 * 0.5 - 0.3];
    let qn = [2.0 * s1 * 2.0 + 0.1, -2.0 * s1 * 0.5 - 0.3];
    let key = [kn[0] * 0.5 - kn[1], kn[0]];
    let query = [qn[0], 2.0 * qn[1]];
    let logit = (key[0] * query[0] + key[1] * query[1]) / 2f64.sqrt();
    let want = 1.0 / (1.0 + (-logit).exp());

    let got = head.forward(&h, 1).unwrap();
    assert_eq!(got.len(), 1);
    assert!((got[0] - want).abs() < 1e-12, "{} vs {want}", got[0]);
}

#[test]
fn graph_forward_matches_direct_forward() {
    let head = FastRm::init(FastRmConfig::new(6, 4)).unwrap();
    let p = 5;
    let hs: Vec<Tensor> = (0..3).map(|s| random_hidden(p + 3, 6, s)).collect();
    let mut g = Graph::new();
    let pv = head.bind(&mut g);
    let patches: Vec<f64> = hs.iter().flat_map(|h| h.data()[..p * 6].to_vec()).collect();
    let queries: Vec<f64> = hs.iter().flat_map(|h| h.row(h.rows() - 1).to_vec()).collect();
    let pn = g.constant(Tensor::from_vec(&[3 * p, 6], patches).unwrap());
    let qn = g.constant(Tensor::from_vec(&[3, 6], queries).unwrap());
    let out = head.forward_graph(&mut g, &pv, pn, qn, p).unwrap();
    for (b, h) in hs.iter().enumerate() {
        let direct = head.forward(h, p).unwrap();
        for (j, v) in direct.iter().enumerate() {
            assert!((g.value(out).data()[b * p + j] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn initial_predictions_are_near_one_half() {
    let head = FastRm::init(FastRmConfig::new(48, 11)).unwrap();
    let mut total = 0.0;
    let mut count = 0;
    for seed in 0..20 {
        let out = head.forward(&random_hidden(50, 48, seed), 36).unwrap();
        total += out.iter().sum::<f64>();
        count += out.len();
    }
    let mean = total / count as f64;
    assert!((0.4..=0.6).contains(&mean), "mean initial probability {mean}");
}

#[test]
fn checkpoint_round_trip_and_rejection() {
    let head = FastRm::init(FastRmConfig::new(8, 2)).unwrap();
    let mut bytes = Vec::new();
    head.write_to(&mut bytes).unwrap();
    assert_eq!(FastRm::read_from(&mut bytes.as_slice()).unwrap(), head);
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(FastRm::read_from(&mut bad.as_slice()).is_err());
    assert!(FastRm::read_from(&mut &bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn width_mismatch_and_bad_prefix_are_errors() {
    let head = FastRm::init(FastRmConfig::new(8, 2)).unwrap();
    assert!(head.forward(&random_hidden(6, 7, 0), 3).is_err());
    assert!(head.forward(&random_hidden(6, 8, 0), 6).is_err());
    assert!(head.forward(&random_hidden(6, 8, 0), 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn outputs_are_probabilities(seed in any::<u64>(), p in 1usize..20, extra in 1usize..6) {
        let head = FastRm::init(FastRmConfig::new(8, seed)).unwrap();
        let out = head.forward(&random_hidden(p + extra, 8, seed), p).unwrap();
        prop_assert_eq!(out.len(), p);
        prop_assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    /// Only the patch rows and the predicting row are read.
    #[test]
    fn rows_between_patches_and_query_are_ignored(seed in any::<u64>(), p in 1usize..10, extra in 2usize..6) {
        let head = FastRm::init(FastRmConfig::new(8, seed)).unwrap();
        let h = random_hidden(p + extra, 8, seed);
        let mut moved = h.clone();
        for r in p..p + extra - 1 {
            for v in moved.row_mut(r) {
                *v = -*v * 3.0 + 1.0;
            }
        }
        prop_assert_eq!(head.forward(&h, p).unwrap(), head.forward(&moved, p).unwrap());
        let mut tail = random_hidden(p + extra + 4, 8, seed ^ 1);
        tail.data_mut()[..(p + extra) * 8].copy_from_slice(h.data());
        prop_assert_eq!(head.forward(&h, p).unwrap(), head.forward_at(&tail, p + extra, p).unwrap());
    }

    /// Reordering the patch rows reorders the scores the same way.
    #[test]
    fn patch_permutation_equivariance(seed in any::<u64>(), p in 2usize..12) {
        let head = FastRm::init(FastRmConfig::new(8, seed)).unwrap();
        let h = random_hidden(p + 2, 8, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..p).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let mut shuffled = h.clone();
        for (dst, &src) in perm.iter().enumerate() {
            shuffled.row_mut(dst).copy_from_slice(h.row(src));
        }
        let base = head.forward(&h, p).unwrap();
        let out = head.forward(&shuffled, p).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            prop_assert_eq!(out[dst], base[src]);
        }
    }
}
