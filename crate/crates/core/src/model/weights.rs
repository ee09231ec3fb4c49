use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, SeededSource};

/// Shape of the toy stacks that actually run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub encoder_layers: usize,
    pub lm_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Side of the square patch grid; `grid_side²` vision tokens enter the encoder.
    pub grid_side: usize,
    /// Values per patch (a `p x p` pixel tile flattened).
    pub patch_dim: usize,
    pub text_len: usize,
    pub vocab_size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 4,
            lm_layers: 4,
            hidden_dim: 32,
            num_heads: 4,
            ffn_dim: 64,
            grid_side: 8,
            patch_dim: 16,
            text_len: 4,
            vocab_size: 32,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("encoder_layers", self.encoder_layers),
            ("lm_layers", self.lm_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("grid_side", self.grid_side),
            ("patch_dim", self.patch_dim),
            ("text_len", self.text_len),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("toy.{name} must be at least 1")));
            }
        }
        if self.vocab_size < 16 {
            return Err(Error::Config("toy.vocab_size must be at least 16".into()));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "toy.hidden_dim {} is not divisible by toy.num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// One pre-norm transformer block. Field order is the synthesis order.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub ffn_down: Matrix,
    pub ffn_up: Matrix,
    pub wk: Matrix,
    pub wo: Matrix,
    pub wq: Matrix,
    pub wv: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyWeights {
    pub config: ToyConfig,
    pub seed: u64,
    pub encoder: Vec<BlockWeights>,
    pub lm: Vec<BlockWeights>,
    pub cls: Vec<f64>,
    pub lm_head: Matrix,
    pub patch_bias: Vec<f64>,
    pub patch_proj: Matrix,
    pub token_embed: Matrix,
}

impl ToyWeights {
    /// Fills every matrix from one splitmix64 stream, scaled by `1/√hidden`.
    ///
    /// Draw order: encoder blocks 0.., then LM blocks 0..; inside a block the
    /// matrices go alphabetically (`ffn_down`, `ffn_up`, `wk`, `wo`, `wq`,
    /// `wv`); then the globals alphabetically (`cls`, `lm_head`,
    /// `patch_bias`, `patch_proj`, `token_embed`). Each matrix is drawn in
    /// row-major order.
    pub fn synthesize(config: &ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut src = SeededSource::new(seed);
        let block = |src: &mut SeededSource| BlockWeights {
            ffn_down: src.matrix(config.ffn_dim, d, scale),
            ffn_up: src.matrix(d, config.ffn_dim, scale),
            wk: src.matrix(d, d, scale),
            wo: src.matrix(d, d, scale),
            wq: src.matrix(d, d, scale),
            wv: src.matrix(d, d, scale),
        };
        let encoder = (0..config.encoder_layers)
            .map(|_| block(&mut src))
            .collect();
        let lm = (0..config.lm_layers).map(|_| block(&mut src)).collect();
        Ok(Self {
            config: config.clone(),
            seed,
            encoder,
            lm,
            cls: src.vector(d, scale),
            lm_head: src.matrix(d, config.vocab_size, scale),
            patch_bias: src.vector(d, scale),
            patch_proj: src.matrix(config.patch_dim, d, scale),
            token_embed: src.matrix(config.vocab_size, d, scale),
        })
    }

    pub fn embed_token(&self, token: usize) -> Vec<f64> {
        self.token_embed
            .row(token % self.config.vocab_size)
            .to_vec()
    }
}
