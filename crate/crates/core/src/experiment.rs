//! Ablation sweeps over the distillation settings, plus heatmap export.

use std::io::Write;
use std::path::Path;

use crate::distill::{build_datasets, train, train_with, Dataset, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{classify_metrics, find_curve, head_predictions, Direction, Method, PerturbationSetup};
use crate::fastrm::FastRm;
use crate::toy::scene::QaSample;
use crate::toy::ToyModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AblationAxis {
    LabelingThreshold,
    DatasetSize,
    Steps,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::LabelingThreshold => "labeling_threshold",
            AblationAxis::DatasetSize => "dataset_size",
            AblationAxis::Steps => "steps",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [AblationAxis::LabelingThreshold, AblationAxis::DatasetSize, AblationAxis::Steps]
            .into_iter()
            .find(|a| a.name() == s)
    }

    pub fn default_values(self) -> Vec<f64> {
        match self {
            AblationAxis::LabelingThreshold => vec![0.1, 0.3, 0.5],
            AblationAxis::DatasetSize => vec![500.0, 2000.0, 10000.0, 20000.0],
            AblationAxis::Steps => vec![500.0, 1500.0, 3500.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationPoint {
    pub axis: AblationAxis,
    pub value: f64,
    /// Samples the head was trained on (train split only).
    pub train_samples: usize,
    pub pp_auc: f64,
    pub np_auc: f64,
    /// Held-out micro-F1 at classification threshold 0.5.
    pub f1: f64,
}

/// What every ablation point is scored on.
pub struct AblationEval<'a> {
    pub model: &'a ToyModel,
    /// Queries for the perturbation curves.
    pub samples: &'a [QaSample],
    pub seed: u64,
}

impl AblationEval<'_> {
    /// Perturbation AUCs of `head` on the eval queries, plus its held-out F1
    /// on `dataset`.
    pub fn score(&self, axis: AblationAxis, value: f64, head: &FastRm, dataset: &Dataset) -> Result<AblationPoint> {
        let mut setup = PerturbationSetup::new(self.model, Some(head));
        setup.seed = self.seed;
        let curves = setup.run(self.samples, &[Method::FastRm])?;
        let pick = |d| find_curve(&curves, Method::FastRm, d).map(|c| c.auc).expect("both directions run");
        let (train_set, held) = dataset.split();
        let (preds, targets) = head_predictions(head, &held)?;
        let f1 = classify_metrics(&preds, &targets, &[0.5])?[0].f1;
        Ok(AblationPoint {
            axis,
            value,
            train_samples: train_set.len(),
            pp_auc: pick(Direction::Positive),
            np_auc: pick(Direction::Negative),
            f1,
        })
    }
}

/// Relabels `queries` at each threshold and trains one head per label set.
pub fn ablate_labeling_threshold(
    eval: &AblationEval,
    queries: &[QaSample],
    query_seed: u64,
    thresholds: &[f64],
    config: &TrainConfig,
) -> Result<Vec<AblationPoint>> {
    let mut datasets = build_datasets(eval.model, queries, thresholds, |_, _| {})?;
    for ds in &mut datasets {
        ds.manifest.query_seed = query_seed;
    }
    ablate_labeled(eval, &datasets, config)
}

/// Trains one head per already-labeled dataset, keyed by its labeling
/// threshold.
pub fn ablate_labeled(eval: &AblationEval, datasets: &[Dataset], config: &TrainConfig) -> Result<Vec<AblationPoint>> {
    datasets
        .iter()
        .map(|ds| {
            let t = ds.manifest.labeling_threshold;
            let cfg = TrainConfig {
                labeling_threshold: t,
                ..config.clone()
            };
            let (head, _) = train(ds, &cfg)?;
            eval.score(AblationAxis::LabelingThreshold, t, &head, ds)
        })
        .collect()
}

/// Trains on prefixes of `dataset` holding at least each listed sample count.
pub fn ablate_dataset_size(eval: &AblationEval, dataset: &Dataset, sizes: &[usize], config: &TrainConfig) -> Result<Vec<AblationPoint>> {
    sizes
        .iter()
        .map(|&n| {
            let ds = dataset.truncate_samples(n);
            let (head, _) = train(&ds, config)?;
            eval.score(AblationAxis::DatasetSize, n as f64, &head, &ds)
        })
        .collect()
}

/// One run to the largest step count, scored at every listed count.
pub fn ablate_steps(eval: &AblationEval, dataset: &Dataset, steps: &[usize], config: &TrainConfig) -> Result<Vec<AblationPoint>> {
    let max = steps.iter().copied().max().ok_or_else(|| Error::Config("no step counts given".into()))?;
    let cfg = TrainConfig {
        steps: max,
        ..config.clone()
    };
    let mut snapshots = Vec::new();
    train_with(dataset, &cfg, |k, head| {
        if steps.contains(&k) {
            snapshots.push((k, head.clone()));
        }
    })?;
    snapshots
        .iter()
        .map(|(k, head)| eval.score(AblationAxis::Steps, *k as f64, head, dataset))
        .collect()
}

pub fn ablation_csv(points: &[AblationPoint]) -> String {
    let mut out = String::from("axis,value,train_samples,pp_auc,np_auc,f1\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            p.axis.name(),
            p.value,
            p.train_samples,
            p.pp_auc,
            p.np_auc,
            p.f1
        ));
    }
    out
}

/// 8-bit binary graymap of a `grid × grid` map, each cell drawn as a
/// `cell × cell` block, scaled so the largest value is white.
pub fn heatmap_pgm(values: &[f64], grid: usize, cell: usize) -> Result<Vec<u8>> {
    if values.len() != grid * grid || grid == 0 || cell == 0 {
        return Err(Error::Data(format!("{} values for a {grid}x{grid} heatmap", values.len())));
    }
    let max = values.iter().copied().fold(0.0, f64::max);
    let side = grid * cell;
    let mut out = format!("P5\n{side} {side}\n255\n").into_bytes();
    for y in 0..side {
        for x in 0..side {
            let v = values[(y / cell) * grid + x / cell];
            let level = if max > 0.0 { (v.max(0.0) / max * 255.0).round() } else { 0.0 };
            out.push(level as u8);
        }
    }
    Ok(out)
}

pub fn write_heatmap(path: &Path, values: &[f64], grid: usize) -> Result<()> {
    let bytes = heatmap_pgm(values, grid, 16)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let img = heatmap_pgm(&[0.0, 1.0, 0.5, 0.25], 2, 2).unwrap();
        let header = b"P5\n4 4\n255\n";
        assert_eq!(&img[..header.len()], header);
        let px = &img[header.len()..];
        assert_eq!(px.len(), 16);
        assert_eq!(&px[..4], &[0, 0, 255, 255]);
        assert_eq!(&px[8..12], &[128, 128, 64, 64]);
    }

    #[test]
    fn axis_names_round_trip() {
        for a in [AblationAxis::LabelingThreshold, AblationAxis::DatasetSize, AblationAxis::Steps] {
            assert_eq!(AblationAxis::parse(a.name()), Some(a));
        }
    }
}
