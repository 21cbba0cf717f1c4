use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::read_u64;
use crate::toy::vocab;

/// Shape of the toy decoder. Patch tokens come first in every sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    /// Side of the square patch grid.
    pub grid: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub mlp_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            grid: 6,
            vocab_size: 64,
            max_seq_len: 160,
            mlp_dim: 128,
            seed: 0,
        }
    }
}

/// Longest question template in tokens.
pub const MAX_QUESTION_LEN: usize = 7;

/// Generation stops after this many tokens even without an end token.
pub const ANSWER_CAP: usize = 8;

impl ModelConfig {
    pub fn n_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.mlp_dim == 0 {
            return fail("layers, heads, model and mlp widths must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads));
        }
        if self.n_patches() < 4 || self.grid > vocab::MAX_GRID {
            return fail(format!("grid side {} outside [2, {}]", self.grid, vocab::MAX_GRID));
        }
        if self.vocab_size < vocab::BASE_SIZE {
            return fail(format!("vocab_size {} below the {} words in use", self.vocab_size, vocab::BASE_SIZE));
        }
        let needed = self.n_patches() + MAX_QUESTION_LEN + ANSWER_CAP;
        if self.max_seq_len < needed {
            return fail(format!("max_seq_len {} shorter than a full sample ({needed})", self.max_seq_len));
        }
        Ok(())
    }

    pub(crate) fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        for v in [
            self.n_layers as u64,
            self.n_heads as u64,
            self.d_model as u64,
            self.grid as u64,
            self.vocab_size as u64,
            self.max_seq_len as u64,
            self.mlp_dim as u64,
            self.seed,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub(crate) fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut f = [0u64; 8];
        for v in &mut f {
            *v = read_u64(r)?;
        }
        let cfg = ModelConfig {
            n_layers: f[0] as usize,
            n_heads: f[1] as usize,
            d_model: f[2] as usize,
            grid: f[3] as usize,
            vocab_size: f[4] as usize,
            max_seq_len: f[5] as usize,
            mlp_dim: f[6] as usize,
            seed: f[7],
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
