//! Central-difference gradient oracle, independent of the reverse sweep.

use std::rc::Rc;

use fastrm::autodiff::{AttnLayout, Graph, Mask, Var};
use fastrm::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;

type Build = dyn Fn(&mut Graph, &[Var]) -> Var;

fn eval(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).data()[0]
}

/// Max relative error between reverse-mode and central-difference gradients
/// over every entry of every input.
pub fn max_rel_error(build: &Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_EPS;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * FD_EPS);
            let a = analytic[i].data()[j];
            let denom = a.abs().max(numeric.abs()).max(1e-2);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// Projects a tensor onto a fixed random direction so every output entry
/// contributes a distinct weight to the scalar loss.
fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, g.value(x).shape(), 1.0);
    let w = g.constant(w);
    let y = g.mul(x, w).unwrap();
    g.sum(y)
}

/// One gradient check per differentiable op, all drawn from `seed`.
pub fn op_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let s = seed;

    let a = rand_tensor(&mut rng, &[3, 4], 1.0);
    let b = rand_tensor(&mut rng, &[4, 2], 1.0);
    out.push(("matmul", max_rel_error(&|g, v| { let c = g.matmul(v[0], v[1]).unwrap(); g.sum(c) }, &[a.clone(), b])));

    let c = rand_tensor(&mut rng, &[3, 4], 1.0);
    out.push(("add", max_rel_error(&move |g, v| { let y = g.add(v[0], v[1]).unwrap(); project(g, y, s) }, &[a.clone(), c.clone()])));
    out.push(("mul", max_rel_error(&move |g, v| { let y = g.mul(v[0], v[1]).unwrap(); project(g, y, s) }, &[a.clone(), c.clone()])));
    out.push(("scale", max_rel_error(&move |g, v| { let y = g.scale(v[0], -1.7); project(g, y, s) }, &[a.clone()])));
    let bias = rand_tensor(&mut rng, &[4], 1.0);
    out.push(("add_row", max_rel_error(&move |g, v| { let y = g.add_row(v[0], v[1]).unwrap(); project(g, y, s) }, &[a.clone(), bias])));
    let wide = rand_tensor(&mut rng, &[3, 4], 3.0);
    out.push(("gelu", max_rel_error(&move |g, v| { let y = g.gelu(v[0]); project(g, y, s) }, &[wide.clone()])));
    out.push(("sigmoid", max_rel_error(&move |g, v| { let y = g.sigmoid(v[0]); project(g, y, s) }, &[wide.clone()])));

    let x = rand_tensor(&mut rng, &[3, 5], 2.0);
    let gain = rand_tensor(&mut rng, &[5], 1.5);
    let lb = rand_tensor(&mut rng, &[5], 1.0);
    out.push(("layer_norm", max_rel_error(&move |g, v| { let y = g.layer_norm(v[0], v[1], v[2]).unwrap(); project(g, y, s) }, &[x, gain, lb])));

    let sm = rand_tensor(&mut rng, &[2, 5], 2.0);
    out.push(("softmax_rows", max_rel_error(&move |g, v| { let y = g.softmax_rows(v[0], None).unwrap(); project(g, y, s) }, &[sm.clone()])));
    let mask = Mask::new(2, 5, vec![true, false, true, true, false, false, true, true, true, true]).unwrap();
    out.push(("softmax_rows_masked", max_rel_error(&move |g, v| { let y = g.softmax_rows(v[0], Some(&mask)).unwrap(); project(g, y, s) }, &[sm])));

    let table = rand_tensor(&mut rng, &[6, 3], 1.0);
    out.push(("embedding", max_rel_error(&move |g, v| { let y = g.embedding(v[0], &[4, 1, 4, 0]).unwrap(); project(g, y, s) }, &[table.clone()])));
    let other = rand_tensor(&mut rng, &[2, 3], 1.0);
    out.push(("concat_rows", max_rel_error(&move |g, v| { let y = g.concat_rows(&[v[0], v[1]]).unwrap(); project(g, y, s) }, &[table.clone(), other])));
    out.push(("slice_rows", max_rel_error(&move |g, v| { let y = g.slice_rows(v[0], 2, 3).unwrap(); project(g, y, s) }, &[table.clone()])));
    out.push(("gather_rows", max_rel_error(&move |g, v| { let y = g.gather_rows(v[0], &[5, 0, 5]).unwrap(); project(g, y, s) }, &[table])));

    let logits = rand_tensor(&mut rng, &[3, 4], 1.0);
    let targets = Tensor::from_vec(&[3, 4], (0..12).map(|i| ((i * 7 + seed as usize) % 3 == 0) as u8 as f64).collect()).unwrap();
    out.push(("binary_cross_entropy", max_rel_error(&move |g, v| { let p = g.sigmoid(v[0]); g.binary_cross_entropy(p, &targets).unwrap() }, &[logits.clone()])));
    out.push(("cross_entropy", max_rel_error(&|g, v| g.cross_entropy(v[0], &[1, 3, 0]).unwrap(), &[logits])));

    let layout = Rc::new(AttnLayout::new(2, 2, &[3, 2]));
    let q = rand_tensor(&mut rng, &[5, 4], 1.0);
    let k = rand_tensor(&mut rng, &[5, 4], 1.0);
    let vv = rand_tensor(&mut rng, &[5, 4], 1.0);
    let l2 = Rc::clone(&layout);
    out.push(("attention", max_rel_error(&move |g, v| {
        let sc = g.attn_scores(v[0], v[1], &l2, 0.7).unwrap();
        let a = g.causal_softmax(sc, &l2).unwrap();
        let o = g.attn_mix(a, v[2], &l2).unwrap();
        project(g, o, s)
    }, &[q.clone(), k.clone(), vv])));

    let gq = rand_tensor(&mut rng, &[2, 3], 1.0);
    let gk = rand_tensor(&mut rng, &[6, 3], 1.0);
    out.push(("group_dot", max_rel_error(&move |g, v| { let y = g.group_dot(v[0], v[1], 3).unwrap(); project(g, y, s) }, &[gq, gk])));

    // Two-layer MLP with a cross-entropy head.
    let x = rand_tensor(&mut rng, &[4, 3], 1.0);
    let w1 = rand_tensor(&mut rng, &[3, 5], 0.8);
    let b1 = rand_tensor(&mut rng, &[5], 0.2);
    let w2 = rand_tensor(&mut rng, &[5, 3], 0.8);
    let b2 = rand_tensor(&mut rng, &[3], 0.2);
    out.push(("mlp_2layer", max_rel_error(&|g, v| {
        let h = g.matmul(v[0], v[1]).unwrap();
        let h = g.add_row(h, v[2]).unwrap();
        let h = g.gelu(h);
        let o = g.matmul(h, v[3]).unwrap();
        let o = g.add_row(o, v[4]).unwrap();
        g.cross_entropy(o, &[0, 2, 1, 2]).unwrap()
    }, &[x, w1, b1, w2, b2])));
    out
}
