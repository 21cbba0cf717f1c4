//! Answers one question about a random scene and prints each answer token's
//! relevancy maps from both methods as grids.
//!
//! cargo run --release --example explain -- toy.tlvm fastrm.frmc [scene_seed]

use std::path::Path;

use fastrm::bench::{explain_baseline, explain_fastrm};
use fastrm::fastrm::FastRm;
use fastrm::toy::vocab::render;
use fastrm::toy::{Distribution, QaSample, ToyModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn show(map: &[f64], grid: usize) {
    let max = map.iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    for row in map.chunks(grid) {
        let cells: Vec<String> = row.iter().map(|v| format!("{:4.2}", v / max)).collect();
        println!("  {}", cells.join(" "));
    }
}

fn main() -> fastrm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let model = ToyModel::load(Path::new(args.get(1).map_or("runs/pretrain-toy/toy.tlvm", String::as_str)))?;
    let head = FastRm::load(Path::new(args.get(2).map_or("runs/train-fastrm/fastrm.frmc", String::as_str)))?;
    let seed: u64 = args.get(3).map_or(7, |v| v.parse().expect("scene_seed"));
    let grid = model.config().grid;
    let sample = QaSample::generate(Distribution::InDomain, grid, &mut ChaCha8Rng::seed_from_u64(seed));
    let trace = model.generate_greedy(&sample.scene, &sample.question_tokens())?;
    println!("question: {}", render(&sample.question_tokens()));
    println!("answer:   {}  (expected {})", render(trace.answer()), render(&sample.answer));
    println!("object at patch {}", sample.oracle_patch);
    let base = explain_baseline(&model, &trace)?;
    let fast = explain_fastrm(&head, &trace)?;
    for i in 0..trace.n_explained() {
        println!("token {i} gradient relevancy");
        show(&base[i], grid);
        println!("token {i} head");
        show(&fast[i], grid);
    }
    Ok(())
}
