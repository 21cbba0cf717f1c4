//! Entropy of relevancy maps as a correctness signal.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::fastrm::FastRm;
use crate::relevancy::{compute_relevancy, extract_vision};
use crate::toy::generate::DecodeOptions;
use crate::toy::scene::QaSample;
use crate::toy::vocab::Token;
use crate::toy::{ModelInput, ToyModel};

/// Shannon entropy (natural log) of `scores` after normalizing them to sum
/// to one.
pub fn entropy(scores: &[f64]) -> Result<f64> {
    if scores.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Degenerate("scores must be finite and nonnegative".into()));
    }
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("scores sum to zero".into()));
    }
    Ok(scores
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| {
            let p = v / total;
            -p * p.ln()
        })
        .sum())
}

/// Gaussian kernel density estimate with Silverman's bandwidth.
#[derive(Clone, Debug, PartialEq)]
pub struct Kde {
    pub points: Vec<f64>,
    pub bandwidth: f64,
}

pub const KDE_MIN_POINTS: usize = 10;

pub fn kde_fit(values: &[f64]) -> Result<Kde> {
    let n = values.len();
    if n < KDE_MIN_POINTS {
        return Err(Error::InsufficientData { needed: KDE_MIN_POINTS, got: n });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sigma = var.sqrt();
    if !(sigma > 0.0) {
        return Err(Error::Degenerate("KDE needs values with nonzero spread".into()));
    }
    Ok(Kde {
        points: values.to_vec(),
        bandwidth: 1.06 * sigma * (n as f64).powf(-0.2),
    })
}

impl Kde {
    pub fn density(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (self.points.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
        norm * self
            .points
            .iter()
            .map(|&p| {
                let z = (x - p) / h;
                (-0.5 * z * z).exp()
            })
            .sum::<f64>()
    }

    /// `(x, density)` on `n` evenly spaced points spanning the data plus
    /// three bandwidths on either side.
    pub fn curve(&self, n: usize) -> Vec<(f64, f64)> {
        let lo = self.points.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * self.bandwidth;
        let hi = self.points.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * self.bandwidth;
        let n = n.max(2);
        (0..n)
            .map(|k| {
                let x = lo + (hi - lo) * k as f64 / (n - 1) as f64;
                (x, self.density(x))
            })
            .collect()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Midpoint between the mean entropy of correct and incorrect answers.
pub fn confidence_threshold(correct: &[f64], incorrect: &[f64]) -> Result<f64> {
    if correct.is_empty() || incorrect.is_empty() {
        return Err(Error::InsufficientData {
            needed: 1,
            got: correct.len().min(incorrect.len()),
        });
    }
    Ok((mean(correct) + mean(incorrect)) / 2.0)
}

/// Outcome counts where "positive" means the answer is predicted correct
/// (entropy below the threshold).
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceReport {
    pub tau: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfidenceReport {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn below_fraction(&self) -> f64 {
        (self.tp + self.fp) as f64 / self.total().max(1) as f64
    }

    /// Share of below-threshold samples that are answered correctly.
    pub fn below_tp_rate(&self) -> f64 {
        let below = self.tp + self.fp;
        if below == 0 {
            0.0
        } else {
            self.tp as f64 / below as f64
        }
    }

    /// Unconditional accuracy of the audited samples.
    pub fn accuracy(&self) -> f64 {
        (self.tp + self.fn_) as f64 / self.total().max(1) as f64
    }

    pub fn summary(&self) -> String {
        format!(
            "tau={:.6}\nsamples={}\nbelow_fraction={:.6}\ntp={}\nfp={}\ntn={}\nfn={}\nbelow_tp_rate={:.6}\naccuracy={:.6}\n",
            self.tau,
            self.total(),
            self.below_fraction(),
            self.tp,
            self.fp,
            self.tn,
            self.fn_,
            self.below_tp_rate(),
            self.accuracy()
        )
    }
}

/// Counts outcomes on an audit set. `audit_ids` and `fit_ids` identify the
/// samples; any overlap is refused.
pub fn audit(entropies: &[f64], correct: &[bool], tau: f64, audit_ids: &[u64], fit_ids: &[u64]) -> Result<ConfidenceReport> {
    if entropies.len() != correct.len() || entropies.len() != audit_ids.len() {
        return Err(Error::Data(format!(
            "{} entropies, {} correctness flags, {} ids",
            entropies.len(),
            correct.len(),
            audit_ids.len()
        )));
    }
    if !tau.is_finite() {
        return Err(Error::Data("threshold must be finite".into()));
    }
    let fit: HashSet<u64> = fit_ids.iter().copied().collect();
    if let Some(id) = audit_ids.iter().find(|id| fit.contains(id)) {
        return Err(Error::Protocol(format!(
            "sample {id} appears in both the threshold-fitting and audit sets"
        )));
    }
    let mut r = ConfidenceReport { tau, tp: 0, fp: 0, tn: 0, fn_: 0 };
    for (&h, &ok) in entropies.iter().zip(correct) {
        match (h < tau, ok) {
            (true, true) => r.tp += 1,
            (true, false) => r.fp += 1,
            (false, false) => r.tn += 1,
            (false, true) => r.fn_ += 1,
        }
    }
    Ok(r)
}

/// Entropy of one sample's first-token map and whether the model answered
/// it correctly.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSample {
    pub id: u64,
    pub entropy: f64,
    pub correct: bool,
}

/// Scores `samples` with the head's maps, or with gradient relevancy when
/// `head` is `None`.
pub fn score_samples(model: &ToyModel, head: Option<&FastRm>, samples: &[QaSample], ids: &[u64]) -> Result<Vec<ScoredSample>> {
    let inputs: Vec<(ModelInput, Vec<Token>)> = samples
        .iter()
        .map(|s| (ModelInput::new(&s.scene, s.question_tokens()), s.answer.clone()))
        .collect();
    score_inputs(model, head, &inputs, ids)
}

/// As [`score_samples`] for prepared inputs paired with their expected answers.
pub fn score_inputs(model: &ToyModel, head: Option<&FastRm>, inputs: &[(ModelInput, Vec<Token>)], ids: &[u64]) -> Result<Vec<ScoredSample>> {
    if inputs.len() != ids.len() {
        return Err(Error::Data(format!("{} samples, {} ids", inputs.len(), ids.len())));
    }
    inputs
        .iter()
        .zip(ids)
        .map(|((input, answer), &id)| {
            let trace = model.generate_input(input, DecodeOptions::default())?;
            let p = trace.n_patches;
            let map = match head {
                Some(h) => h.forward(&trace.hidden_prefix(0)?, p)?,
                None => extract_vision(&compute_relevancy(model, &trace, 0)?, p)?,
            };
            Ok(ScoredSample {
                id,
                entropy: entropy(&map)?,
                correct: trace.answer() == answer.as_slice(),
            })
        })
        .collect()
}

/// Inputs whose patch features carry uniform noise in `[-σ, σ]`, with `σ`
/// drawn per sample from `U(0, max_noise)`. Gives a clean-to-degraded mix
/// on which the model makes mistakes.
pub fn noisy_inputs(samples: &[QaSample], max_noise: f64, seed: u64) -> Vec<(ModelInput, Vec<Token>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_65);
    samples
        .iter()
        .map(|s| {
            let mut input = ModelInput::new(&s.scene, s.question_tokens());
            let sigma = max_noise * rng.gen::<f64>();
            for v in input.features.data_mut() {
                *v += sigma * rng.gen_range(-1.0..=1.0);
            }
            (input, s.answer.clone())
        })
        .collect()
}

/// Fits τ on `fit` and audits `audit` with it.
pub fn fit_and_audit(fit: &[ScoredSample], audit_set: &[ScoredSample]) -> Result<ConfidenceReport> {
    let (good, bad): (Vec<&ScoredSample>, Vec<&ScoredSample>) = fit.iter().partition(|s| s.correct);
    let good: Vec<f64> = good.iter().map(|s| s.entropy).collect();
    let bad: Vec<f64> = bad.iter().map(|s| s.entropy).collect();
    let tau = confidence_threshold(&good, &bad)?;
    let h: Vec<f64> = audit_set.iter().map(|s| s.entropy).collect();
    let ok: Vec<bool> = audit_set.iter().map(|s| s.correct).collect();
    let ids: Vec<u64> = audit_set.iter().map(|s| s.id).collect();
    let fit_ids: Vec<u64> = fit.iter().map(|s| s.id).collect();
    audit(&h, &ok, tau, &ids, &fit_ids)
}

/// One row per sample: `id,entropy,correct,set`.
pub fn scores_csv(fit: &[ScoredSample], audit_set: &[ScoredSample]) -> String {
    let mut out = String::from("id,entropy,correct,set\n");
    for (set, rows) in [("fit", fit), ("audit", audit_set)] {
        for s in rows {
            out.push_str(&format!("{},{:.9},{},{}\n", s.id, s.entropy, s.correct as u8, set));
        }
    }
    out
}

pub fn density_csv(curve: &[(f64, f64)]) -> String {
    let mut out = String::from("x,density\n");
    for (x, y) in curve {
        out.push_str(&format!("{x:.9},{y:.9}\n"));
    }
    out
}
