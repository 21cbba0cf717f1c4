//! Temperature-0 decoding with full attention capture.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::toy::config::ANSWER_CAP;
use crate::toy::model::{AttnRecord, ModelInput, ToyModel};
use crate::toy::scene::Scene;
use crate::toy::vocab::{Token, EOS};

/// Everything observed during one greedy generation.
///
/// Positions `[0, n_patches)` are patch tokens, then the prompt, then the
/// generated tokens. Attention is stored once per layer as `[heads, N, N]`;
/// causality makes the matrices seen at step `i` exactly the leading
/// `(n_in + i)` block.
#[derive(Clone, Debug)]
pub struct GenerationTrace {
    pub n_patches: usize,
    pub prompt: Vec<Token>,
    pub output: Vec<Token>,
    pub attention: Vec<Tensor>,
    /// Final-layer hidden states, `N × d`.
    pub hidden: Tensor,
    /// Vocabulary logits that produced each output token.
    pub logits: Vec<Vec<f64>>,
    pub features: Tensor,
    pub masked: Vec<usize>,
    pub model_fingerprint: String,
}

impl GenerationTrace {
    pub fn n_in(&self) -> usize {
        self.n_patches + self.prompt.len()
    }

    pub fn n_out(&self) -> usize {
        self.output.len()
    }

    pub fn len(&self) -> usize {
        self.n_in() + self.n_out()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Generated tokens without the closing end token.
    pub fn answer(&self) -> &[Token] {
        match self.output.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.output,
        }
    }

    /// Output positions that get explanations: the answer tokens, or the
    /// lone end token when the answer is empty.
    pub fn n_explained(&self) -> usize {
        self.answer().len().max(1).min(self.n_out())
    }

    /// Model input whose final position predicts output token `step`.
    pub fn replay_input(&self, step: usize) -> Result<ModelInput> {
        if step >= self.n_out() {
            return Err(Error::Bounds { index: step, extent: self.n_out() });
        }
        let mut tokens = self.prompt.clone();
        tokens.extend_from_slice(&self.output[..step]);
        Ok(ModelInput {
            features: self.features.clone(),
            masked: self.masked.clone(),
            tokens,
        })
    }

    /// Hidden states of positions `[0, n_in + step)`.
    pub fn hidden_prefix(&self, step: usize) -> Result<Tensor> {
        self.hidden.slice_rows(0, self.n_in() + step)
    }

    /// Attention of `layer` as seen while producing output token `step`.
    pub fn step_attention(&self, layer: usize, step: usize) -> Result<Tensor> {
        let full = &self.attention[layer];
        let (h, n) = (full.shape()[0], full.shape()[1]);
        let m = self.n_in() + step;
        if m > n {
            return Err(Error::Bounds { index: m, extent: n });
        }
        let mut out = Tensor::zeros(&[h, m, m]);
        for hd in 0..h {
            for i in 0..m {
                let src = hd * n * n + i * n;
                let dst = hd * m * m + i * m;
                out.data_mut()[dst..dst + m].copy_from_slice(&full.data()[src..src + m]);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    /// Stop after this many tokens if no end token appears.
    pub max_new: usize,
    /// Ignore the end token and emit exactly this many tokens.
    pub forced_len: Option<usize>,
    /// Keep attention and hidden states.
    pub record: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            max_new: ANSWER_CAP,
            forced_len: None,
            record: true,
        }
    }
}

pub(crate) struct Decoded {
    pub output: Vec<Token>,
    pub logits: Vec<Vec<f64>>,
    pub hidden: Option<Tensor>,
    pub attention: Option<Vec<Tensor>>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn decode(model: &ToyModel, patch_emb: &Tensor, prompt: &[Token], opts: DecodeOptions) -> Result<Decoded> {
    let cfg = model.config();
    let n_in = patch_emb.rows() + prompt.len();
    let budget = opts.forced_len.unwrap_or(opts.max_new);
    if budget == 0 {
        return Err(Error::Contract("decoding needs room for at least one token".into()));
    }
    if n_in + budget > cfg.max_seq_len {
        return Err(Error::Capacity { len: n_in + budget, max: cfg.max_seq_len });
    }
    let mut cache = model.new_cache();
    let mut rec = opts.record.then(|| AttnRecord::new(cfg.n_layers, cfg.n_heads));
    let mut hidden_rows: Vec<f64> = Vec::new();

    let mut x = Tensor::zeros(&[n_in, cfg.d_model]);
    x.data_mut()[..patch_emb.len()].copy_from_slice(patch_emb.data());
    x.data_mut()[patch_emb.len()..].copy_from_slice(model.token_embeddings(&[], prompt)?.data());
    let h = model.extend(&mut cache, x, rec.as_mut())?;
    let mut logits = model.logits_row(h.row(h.rows() - 1));
    if opts.record {
        hidden_rows.extend_from_slice(h.data());
    }

    let mut output = Vec::new();
    let mut all_logits = Vec::new();
    loop {
        let next = argmax(&logits);
        output.push(next);
        all_logits.push(std::mem::take(&mut logits));
        let done = match opts.forced_len {
            Some(n) => output.len() == n,
            None => next == EOS || output.len() == opts.max_new,
        };
        if done && !opts.record {
            break;
        }
        let context: Vec<Token> = prompt.iter().chain(&output[..output.len() - 1]).copied().collect();
        let h = model.extend(&mut cache, model.token_embeddings(&context, &[next])?, rec.as_mut())?;
        if opts.record {
            hidden_rows.extend_from_slice(h.data());
        }
        if done {
            break;
        }
        logits = model.logits_row(h.row(0));
    }
    let n = n_in + output.len();
    Ok(Decoded {
        output,
        logits: all_logits,
        hidden: opts
            .record
            .then(|| Tensor::from_vec(&[n, cfg.d_model], hidden_rows))
            .transpose()?,
        attention: rec.map(AttnRecord::into_tensors),
    })
}

impl ToyModel {
    /// Greedy decoding until the end token or the answer cap.
    pub fn generate_greedy(&self, scene: &Scene, question: &[Token]) -> Result<GenerationTrace> {
        self.generate_input(&ModelInput::new(scene, question.to_vec()), DecodeOptions::default())
    }

    pub fn generate_input(&self, input: &ModelInput, opts: DecodeOptions) -> Result<GenerationTrace> {
        let emb = self.embed_features(&input.features)?;
        let emb = crate::toy::model::mask_patches(&emb, &input.masked)?;
        let d = decode(self, &emb, &input.tokens, DecodeOptions { record: true, ..opts })?;
        Ok(GenerationTrace {
            n_patches: input.features.rows(),
            prompt: input.tokens.clone(),
            output: d.output,
            attention: d.attention.expect("recorded"),
            hidden: d.hidden.expect("recorded"),
            logits: d.logits,
            features: input.features.clone(),
            masked: input.masked.clone(),
            model_fingerprint: self.fingerprint(),
        })
    }

    /// Greedy answer (end token stripped) from precomputed patch embeddings.
    pub fn answer(&self, patch_emb: &Tensor, question: &[Token]) -> Result<Vec<Token>> {
        let d = decode(
            self,
            patch_emb,
            question,
            DecodeOptions {
                record: false,
                ..Default::default()
            },
        )?;
        let mut out = d.output;
        if out.last() == Some(&EOS) {
            out.pop();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::config::ModelConfig;
    use crate::toy::scene::{Distribution, QaSample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ToyModel {
        ToyModel::init(ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            grid: 3,
            vocab_size: 32,
            max_seq_len: 40,
            mlp_dim: 16,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn greedy_is_deterministic_and_capped() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let s = QaSample::generate(Distribution::InDomain, 3, &mut rng);
            let a = m.generate_greedy(&s.scene, &s.question_tokens()).unwrap();
            let b = m.generate_greedy(&s.scene, &s.question_tokens()).unwrap();
            assert_eq!(a.output, b.output);
            assert_eq!(a.hidden, b.hidden);
            assert!((1..=ANSWER_CAP).contains(&a.n_out()));
            assert_eq!(a.hidden.rows(), a.len());
        }
    }

    #[test]
    fn attention_is_causal_and_normalized() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = QaSample::generate(Distribution::Shifted, 3, &mut rng);
        let t = m.generate_greedy(&s.scene, &s.question_tokens()).unwrap();
        let n = t.len();
        for layer in &t.attention {
            assert_eq!(layer.shape(), &[2, n, n]);
            for h in 0..2 {
                for i in 0..n {
                    let row = &layer.data()[h * n * n + i * n..h * n * n + (i + 1) * n];
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(row[i + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }

    #[test]
    fn overflow_is_a_capacity_error() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = QaSample::generate(Distribution::InDomain, 3, &mut rng);
        let long: Vec<Token> = std::iter::repeat_n(3, 30).collect();
        assert!(matches!(m.generate_greedy(&s.scene, &long), Err(Error::Capacity { .. })));
    }

    #[test]
    fn forced_length_is_exact() {
        let m = small();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = QaSample::generate(Distribution::InDomain, 3, &mut rng);
        let input = ModelInput::new(&s.scene, s.question_tokens());
        let t = m
            .generate_input(&input, DecodeOptions { forced_len: Some(12), ..Default::default() })
            .unwrap();
        assert_eq!(t.n_out(), 12);
    }
}
