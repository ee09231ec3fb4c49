use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer shape used for memory and FLOPs accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelGeometry {
    pub name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub num_heads: usize,
    pub bytes_per_element: usize,
    /// Vision tokens one image occupies at full resolution.
    pub reference_vision_tokens: usize,
}

impl ModelGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 || self.num_heads == 0
        {
            return Err(Error::Config(format!(
                "geometry {} has a zero dimension",
                self.name
            )));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !matches!(self.bytes_per_element, 1 | 2 | 4 | 8) {
            return Err(Error::Config(format!(
                "bytes_per_element must be 1, 2, 4 or 8, got {}",
                self.bytes_per_element
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// LLaVA-1.5-7B language model (Vicuna-7B): 32 layers, 4096 hidden, fp16.
    pub fn llava_15_7b() -> Self {
        Self {
            name: "llava-1.5-7b".into(),
            num_layers: 32,
            hidden_dim: 4096,
            ffn_dim: 11008,
            num_heads: 32,
            bytes_per_element: 2,
            reference_vision_tokens: 576,
        }
    }

    /// LLaVA-NeXT-7B shares the 7B language model; its dynamic high
    /// resolution yields five 576-token tiles.
    pub fn llava_next_7b() -> Self {
        Self {
            name: "llava-next-7b".into(),
            reference_vision_tokens: 2880,
            ..Self::llava_15_7b()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "llava-1.5-7b" => Ok(Self::llava_15_7b()),
            "llava-next-7b" => Ok(Self::llava_next_7b()),
            other => Err(Error::Config(format!(
                "unknown geometry preset {other:?} (known: llava-1.5-7b, llava-next-7b)"
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        for name in ["llava-1.5-7b", "llava-next-7b"] {
            let g = ModelGeometry::preset(name).unwrap();
            g.validate().unwrap();
            assert_eq!(g.name, name);
            assert_eq!((g.num_layers, g.hidden_dim, g.ffn_dim), (32, 4096, 11008));
            assert_eq!(g.bytes_per_element, 2);
        }
        assert!(ModelGeometry::preset("gpt-2").is_err());
    }

    #[test]
    fn rejects_bad_geometry() {
        let mut g = ModelGeometry::llava_15_7b();
        g.num_heads = 3;
        assert!(g.validate().is_err());
        let mut g = ModelGeometry::llava_15_7b();
        g.bytes_per_element = 3;
        assert!(g.validate().is_err());
    }
}
