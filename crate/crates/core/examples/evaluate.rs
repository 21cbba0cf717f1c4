//! Threshold sweep of the head against its labels, then positive and
//! negative perturbation curves for every saliency method.
//!
//! cargo run --release --example evaluate -- toy.tlvm fastrm.frmc dataset.frmd [n_samples]

use std::path::Path;

use fastrm::distill::{held_out_queries, Dataset};
use fastrm::eval::{
    best_accuracy_threshold, classify_metrics, constant_f1, default_thresholds, head_predictions, metrics_csv,
    prevalence, Method, PerturbationSetup,
};
use fastrm::fastrm::FastRm;
use fastrm::toy::ToyModel;

fn main() -> fastrm::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &'static str| args.get(i).map_or(d, String::as_str).to_string();
    let model = ToyModel::load(Path::new(&arg(1, "runs/pretrain-toy/toy.tlvm")))?;
    let head = FastRm::load(Path::new(&arg(2, "runs/train-fastrm/fastrm.frmc")))?;
    let dataset = Dataset::load(Path::new(&arg(3, "runs/gen-dataset/dataset.frmd")))?;
    let n: usize = arg(4, "100").parse().expect("n_samples");

    let (_, held) = dataset.split();
    let (preds, targets) = head_predictions(&head, &held)?;
    let rows = classify_metrics(&preds, &targets, &default_thresholds())?;
    print!("{}", metrics_csv(&rows));
    println!(
        "constant F1 {:.3}  accuracy-best threshold {:?}",
        constant_f1(prevalence(&targets)),
        best_accuracy_threshold(&rows)
    );

    let mut queries = held_out_queries(n * 10, model.config().grid, dataset.manifest.query_seed);
    queries.truncate(n);
    let methods = [Method::FastRm, Method::Baseline, Method::RawAttention, Method::Random];
    for c in PerturbationSetup::new(&model, Some(&head)).run(&queries, &methods)? {
        println!("{:<14} {:<9} auc {:.3}", c.method.name(), c.direction.name(), c.auc);
    }
    Ok(())
}
