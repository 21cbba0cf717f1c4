//! Straight-line reference implementations used to cross-check the library.

use fastrm::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Relevancy propagation for three tokens, written out without loops over
/// matrices.
pub fn unrolled3(a: &[Tensor], g: &[Tensor]) -> [[f64; 3]; 3] {
    let mut r = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for (al, gl) in a.iter().zip(g) {
        let heads = al.shape()[0];
        let mut e = [[0.0; 3]; 3];
        for h in 0..heads {
            for (x, row) in e.iter_mut().enumerate() {
                for (y, cell) in row.iter_mut().enumerate() {
                    let k = h * 9 + x * 3 + y;
                    let prod = al.data()[k] * gl.data()[k];
                    if prod > 0.0 {
                        *cell += prod / heads as f64;
                    }
                }
            }
        }
        let old = r;
        for x in 0..3 {
            for y in 0..3 {
                r[x][y] = old[x][y] + e[x][0] * old[0][y] + e[x][1] * old[1][y] + e[x][2] * old[2][y];
            }
        }
    }
    r
}

/// Random causal attention (rows sum to one) and unconstrained gradients,
/// `layers` of `[heads, 3, 3]` each.
pub fn random_attention3(seed: u64, layers: usize, heads: usize) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Vec::new();
    let mut g = Vec::new();
    for _ in 0..layers {
        let mut at = Tensor::zeros(&[heads, 3, 3]);
        for h in 0..heads {
            for x in 0..3 {
                let w: Vec<f64> = (0..=x).map(|_| rng.gen::<f64>() + 1e-3).collect();
                let s: f64 = w.iter().sum();
                for (y, v) in w.iter().enumerate() {
                    at.data_mut()[h * 9 + x * 3 + y] = v / s;
                }
            }
        }
        a.push(at);
        g.push(Tensor::from_vec(&[heads, 3, 3], (0..heads * 9).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap());
    }
    (a, g)
}

/// Threshold labels by sorting: walk the values from largest down and mark
/// each one still at or above `threshold` times the first. `None` when no
/// value is positive.
pub fn sorted_labels(v: &[f64], threshold: f64) -> Option<Vec<bool>> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
    let top = v[*order.first()?];
    if top <= 0.0 {
        return None;
    }
    let mut out = vec![false; v.len()];
    for &j in &order {
        if v[j] < top * threshold {
            break;
        }
        out[j] = true;
    }
    Some(out)
}

/// Trapezoid area computed by summing thin rectangles.
pub fn rectangle_area(xs: &[f64], ys: &[f64], slices: usize) -> f64 {
    let mut area = 0.0;
    for k in 0..xs.len() - 1 {
        let w = (xs[k + 1] - xs[k]) / slices as f64;
        for s in 0..slices {
            let t = (s as f64 + 0.5) / slices as f64;
            area += w * (ys[k] + t * (ys[k + 1] - ys[k]));
        }
    }
    area
}
