//! Retrains the head at several labeling thresholds and scores each on
//! held-out perturbation curves.
//!
//! cargo run --release --example ablate -- toy.tlvm [n_queries] [eval_samples]

use std::path::Path;

use fastrm::distill::{build_from_stream, held_out_queries, TrainConfig};
use fastrm::experiment::{ablate_labeled, ablation_csv, AblationEval};
use fastrm::toy::ToyModel;

fn main() -> fastrm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let model = ToyModel::load(Path::new(args.get(1).map_or("runs/pretrain-toy/toy.tlvm", String::as_str)))?;
    let n: usize = args.get(2).map_or(3000, |v| v.parse().expect("n_queries"));
    let n_eval: usize = args.get(3).map_or(200, |v| v.parse().expect("eval_samples"));
    let thresholds = [0.1, 0.3, 0.5];
    let datasets = build_from_stream(&model, n, 0, &thresholds, |_, _| {})?;
    let mut samples = held_out_queries(n_eval * 10, model.config().grid, 0);
    samples.truncate(n_eval);
    let eval = AblationEval {
        model: &model,
        samples: &samples,
        seed: 0,
    };
    let points = ablate_labeled(&eval, &datasets, &TrainConfig::default())?;
    print!("{}", ablation_csv(&points));
    Ok(())
}
