//! Threshold metrics for predicted patch labels and perturbation curves for
//! saliency rankings.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::distill::TrainingSample;
use crate::error::{Error, Result};
use crate::fastrm::FastRm;
use crate::relevancy::{compute_relevancy, extract_vision, raw_attention};
use crate::toy::generate::GenerationTrace;
use crate::toy::model::mask_patches;
use crate::toy::scene::QaSample;
use crate::toy::ToyModel;

/// Classification thresholds 0.1 … 0.9.
pub fn default_thresholds() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

/// Mask fractions 0, 0.1, … 0.9.
pub fn default_fractions() -> Vec<f64> {
    (0..10).map(|k| k as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Micro-averaged confusion counts per threshold; a patch is predicted
/// relevant when its probability is `>=` the threshold.
pub fn classify_metrics(predictions: &[Vec<f64>], targets: &[Vec<bool>], thresholds: &[f64]) -> Result<Vec<ThresholdRow>> {
    if predictions.len() != targets.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    for (i, (p, t)) in predictions.iter().zip(targets).enumerate() {
        if p.len() != t.len() {
            return Err(Error::Data(format!("sample {i}: {} scores for {} labels", p.len(), t.len())));
        }
    }
    Ok(thresholds
        .iter()
        .map(|&thr| {
            let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
            for (p, t) in predictions.iter().zip(targets) {
                for (&score, &label) in p.iter().zip(t) {
                    match (score >= thr, label) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, false) => tn += 1,
                        (false, true) => fn_ += 1,
                    }
                }
            }
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ThresholdRow {
                threshold: thr,
                tp,
                fp,
                tn,
                fn_,
                accuracy: ratio(tp + tn, tp + fp + tn + fn_),
                precision,
                recall,
                f1,
            }
        })
        .collect())
}

/// Threshold with the highest accuracy; the lower threshold wins ties.
pub fn best_accuracy_threshold(rows: &[ThresholdRow]) -> Option<f64> {
    rows.iter()
        .fold(None::<&ThresholdRow>, |best, r| match best {
            Some(b) if b.accuracy >= r.accuracy => Some(b),
            _ => Some(r),
        })
        .map(|r| r.threshold)
}

pub fn metrics_csv(rows: &[ThresholdRow]) -> String {
    let mut out = String::from("threshold,accuracy,precision,recall,f1,tp,fp,tn,fn\n");
    for r in rows {
        out.push_str(&format!(
            "{:.1},{:.6},{:.6},{:.6},{:.6},{},{},{},{}\n",
            r.threshold, r.accuracy, r.precision, r.recall, r.f1, r.tp, r.fp, r.tn, r.fn_
        ));
    }
    out
}

/// Head probabilities alongside the stored targets.
pub fn head_predictions(head: &FastRm, samples: &[&TrainingSample]) -> Result<(Vec<Vec<f64>>, Vec<Vec<bool>>)> {
    let preds = samples
        .iter()
        .map(|s| head.forward(&s.hidden, s.target.len()))
        .collect::<Result<Vec<_>>>()?;
    Ok((preds, samples.iter().map(|s| s.target.clone()).collect()))
}

/// Share of positive labels.
pub fn prevalence(targets: &[Vec<bool>]) -> f64 {
    let total: usize = targets.iter().map(Vec::len).sum();
    let pos = targets.iter().flatten().filter(|&&b| b).count();
    ratio(pos, total)
}

/// F1 of the constant predictor that marks every patch relevant, the only
/// constant output with nonzero F1: `2π / (1 + π)`.
pub fn constant_f1(prevalence: f64) -> f64 {
    2.0 * prevalence / (1.0 + prevalence)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Most relevant patches removed first.
    Positive,
    /// Least relevant patches removed first.
    Negative,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Positive => "positive",
            Direction::Negative => "negative",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    FastRm,
    Baseline,
    RawAttention,
    Random,
    /// One-hot at the cell that determines the answer.
    Oracle,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::FastRm => "fastrm",
            Method::Baseline => "baseline",
            Method::RawAttention => "raw_attention",
            Method::Random => "random",
            Method::Oracle => "oracle",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        [Method::FastRm, Method::Baseline, Method::RawAttention, Method::Random, Method::Oracle]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

/// How token-level maps combine into one ranking per sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    #[default]
    FirstToken,
    MaxOverTokens,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationCurve {
    pub method: Method,
    pub direction: Direction,
    pub fractions: Vec<f64>,
    pub accuracy: Vec<f64>,
    pub auc: f64,
}

/// Trapezoidal area under `(fractions, values)`, divided by the span of
/// the fraction axis.
pub fn auc(fractions: &[f64], values: &[f64]) -> Result<f64> {
    if fractions.len() != values.len() {
        return Err(Error::Data(format!("{} fractions for {} values", fractions.len(), values.len())));
    }
    if fractions.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: fractions.len() });
    }
    if fractions.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Data("fractions must be strictly increasing".into()));
    }
    let area: f64 = fractions
        .windows(2)
        .zip(values.windows(2))
        .map(|(f, v)| (f[1] - f[0]) * (v[0] + v[1]) / 2.0)
        .sum();
    Ok(area / (fractions[fractions.len() - 1] - fractions[0]))
}

/// Number of patches removed at fraction `f`: `ceil(f * p)`.
pub fn mask_count(f: f64, p: usize) -> usize {
    // Guard against 0.3 * 10 = 3.0000000000000004 rounding up.
    (((f * p as f64) - 1e-9).ceil().max(0.0) as usize).min(p)
}

/// Patch indices in removal order. Ties go to the lower index.
pub fn removal_order(scores: &[f64], direction: Direction) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        let ord = match direction {
            Direction::Positive => scores[b].total_cmp(&scores[a]),
            Direction::Negative => scores[a].total_cmp(&scores[b]),
        };
        ord.then(a.cmp(&b))
    });
    idx
}

/// Exact-match accuracy of the model on `samples` when each sample's
/// patches are removed following `orders[k]`, one value per fraction.
pub fn accuracy_under_masking(model: &ToyModel, samples: &[QaSample], orders: &[Vec<usize>], fractions: &[f64]) -> Result<Vec<f64>> {
    if samples.len() != orders.len() {
        return Err(Error::Data(format!("{} rankings for {} samples", orders.len(), samples.len())));
    }
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let p = model.config().n_patches();
    let mut hits = vec![0usize; fractions.len()];
    for (s, order) in samples.iter().zip(orders) {
        if order.len() != p {
            return Err(Error::Data(format!("ranking of length {} for {p} patches", order.len())));
        }
        let emb = model.embed_scene(&s.scene)?;
        let q = s.question_tokens();
        for (k, &f) in fractions.iter().enumerate() {
            let masked = mask_patches(&emb, &order[..mask_count(f, p)])?;
            if model.answer(&masked, &q)? == s.answer {
                hits[k] += 1;
            }
        }
    }
    Ok(hits.iter().map(|&h| h as f64 / samples.len() as f64).collect())
}

/// Per-sample saliency from one of the non-random methods.
pub fn saliency(
    method: Method,
    model: &ToyModel,
    head: Option<&FastRm>,
    sample: &QaSample,
    trace: &GenerationTrace,
    aggregation: Aggregation,
) -> Result<Vec<f64>> {
    let p = trace.n_patches;
    let tokens = match aggregation {
        Aggregation::FirstToken => 1,
        Aggregation::MaxOverTokens => trace.n_explained(),
    };
    let mut out = vec![f64::NEG_INFINITY; p];
    for i in 0..tokens {
        let map = match method {
            Method::FastRm => {
                let head = head.ok_or_else(|| Error::Config("fastrm saliency needs a head checkpoint".into()))?;
                head.forward(&trace.hidden_prefix(i)?, p)?
            }
            Method::Baseline => extract_vision(&compute_relevancy(model, trace, i)?, p)?,
            Method::RawAttention => raw_attention(trace, i)?,
            Method::Oracle => (0..p).map(|j| (j == sample.oracle_patch) as u8 as f64).collect(),
            Method::Random => return Err(Error::Config("random saliency has no per-sample map".into())),
        };
        if map.len() != p {
            return Err(Error::Data(format!("saliency of length {} for {p} patches", map.len())));
        }
        for (o, v) in out.iter_mut().zip(map) {
            *o = o.max(v);
        }
    }
    Ok(out)
}

pub struct PerturbationSetup<'a> {
    pub model: &'a ToyModel,
    pub head: Option<&'a FastRm>,
    pub fractions: Vec<f64>,
    pub aggregation: Aggregation,
    /// Trials averaged for the random ranking.
    pub random_trials: usize,
    pub seed: u64,
}

impl<'a> PerturbationSetup<'a> {
    pub fn new(model: &'a ToyModel, head: Option<&'a FastRm>) -> Self {
        PerturbationSetup {
            model,
            head,
            fractions: default_fractions(),
            aggregation: Aggregation::FirstToken,
            random_trials: 5,
            seed: 0,
        }
    }

    /// Both directions of every requested method on `samples`.
    pub fn run(&self, samples: &[QaSample], methods: &[Method]) -> Result<Vec<PerturbationCurve>> {
        crate::alloc::tune_malloc();
        let p = self.model.config().n_patches();
        let traces = samples
            .iter()
            .map(|s| self.model.generate_greedy(&s.scene, &s.question_tokens()))
            .collect::<Result<Vec<_>>>()?;
        let mut curves = Vec::new();
        for &method in methods {
            for direction in [Direction::Positive, Direction::Negative] {
                let accuracy = if method == Method::Random {
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (direction == Direction::Negative) as u64);
                    let mut total = vec![0.0; self.fractions.len()];
                    for _ in 0..self.random_trials.max(1) {
                        let orders: Vec<Vec<usize>> = samples
                            .iter()
                            .map(|_| {
                                let mut o: Vec<usize> = (0..p).collect();
                                o.shuffle(&mut rng);
                                o
                            })
                            .collect();
                        let acc = accuracy_under_masking(self.model, samples, &orders, &self.fractions)?;
                        total.iter_mut().zip(acc).for_each(|(t, a)| *t += a);
                    }
                    total.iter().map(|t| t / self.random_trials.max(1) as f64).collect()
                } else {
                    let orders = samples
                        .iter()
                        .zip(&traces)
                        .map(|(s, t)| {
                            let sal = saliency(method, self.model, self.head, s, t, self.aggregation)?;
                            Ok(removal_order(&sal, direction))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    accuracy_under_masking(self.model, samples, &orders, &self.fractions)?
                };
                curves.push(PerturbationCurve {
                    method,
                    direction,
                    auc: auc(&self.fractions, &accuracy)?,
                    fractions: self.fractions.clone(),
                    accuracy,
                });
            }
        }
        Ok(curves)
    }
}

pub fn find_curve(curves: &[PerturbationCurve], method: Method, direction: Direction) -> Option<&PerturbationCurve> {
    curves.iter().find(|c| c.method == method && c.direction == direction)
}

pub fn curves_csv(curves: &[PerturbationCurve]) -> String {
    let mut out = String::from("method,direction,fraction,accuracy\n");
    for c in curves {
        for (f, a) in c.fractions.iter().zip(&c.accuracy) {
            out.push_str(&format!("{},{},{:.1},{:.6}\n", c.method.name(), c.direction.name(), f, a));
        }
    }
    out
}

pub fn auc_csv(curves: &[PerturbationCurve]) -> String {
    let mut out = String::from("method,direction,auc\n");
    for c in curves {
        out.push_str(&format!("{},{},{:.6}\n", c.method.name(), c.direction.name(), c.auc));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions_score_one() {
        let t = vec![vec![true, false, false], vec![false, true, true]];
        let p: Vec<Vec<f64>> = t.iter().map(|r| r.iter().map(|&b| b as u8 as f64).collect()).collect();
        for row in classify_metrics(&p, &t, &default_thresholds()).unwrap() {
            assert_eq!(row.accuracy, 1.0);
            assert_eq!(row.f1, 1.0);
        }
    }

    #[test]
    fn half_predictions_at_half_threshold_are_all_positive() {
        let t = vec![vec![true, false, false, false], vec![false, true, false, false]];
        let p = vec![vec![0.5; 4]; 2];
        let row = &classify_metrics(&p, &t, &[0.5]).unwrap()[0];
        let prev = 0.25;
        assert_eq!(row.fn_ + row.tn, 0);
        assert!((row.f1 - 2.0 * prev / (1.0 + prev)).abs() < 1e-12);
    }

    #[test]
    fn length_mismatch_is_data_error() {
        assert!(matches!(classify_metrics(&[vec![0.1]], &[], &[0.5]), Err(Error::Data(_))));
        assert!(matches!(classify_metrics(&[vec![0.1]], &[vec![true, false]], &[0.5]), Err(Error::Data(_))));
    }

    #[test]
    fn auc_closed_forms() {
        let f = default_fractions();
        assert!((auc(&f, &vec![0.7; 10]).unwrap() - 0.7).abs() < 1e-12);
        assert!((auc(&[0.0, 1.0], &[1.0, 0.0]).unwrap() - 0.5).abs() < 1e-12);
        assert!(auc(&[0.0, 0.5, 0.4], &[1.0, 1.0, 1.0]).is_err());
        assert!(auc(&[0.0], &[1.0]).is_err());
    }

    #[test]
    fn mask_counts_are_ceilings() {
        assert_eq!(mask_count(0.0, 36), 0);
        assert_eq!(mask_count(0.1, 36), 4);
        assert_eq!(mask_count(0.3, 10), 3);
        assert_eq!(mask_count(0.9, 36), 33);
    }

    #[test]
    fn removal_order_breaks_ties_by_index() {
        let s = [0.2, 0.9, 0.2, 0.9, 0.1];
        assert_eq!(removal_order(&s, Direction::Positive), vec![1, 3, 0, 2, 4]);
        assert_eq!(removal_order(&s, Direction::Negative), vec![4, 0, 2, 1, 3]);
    }
}
