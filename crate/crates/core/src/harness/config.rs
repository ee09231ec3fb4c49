use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::DecodeConfig;
use crate::encode::EncodeConfig;
use crate::error::{Error, Result};
use crate::model::{ModelGeometry, ToyConfig};
use crate::prefill::PrefillConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Mustdrop,
    None,
    RandomDrop,
    FastvLike,
    EncoderOnly,
}

impl Baseline {
    pub const ALL: [Baseline; 5] = [
        Baseline::Mustdrop,
        Baseline::None,
        Baseline::RandomDrop,
        Baseline::FastvLike,
        Baseline::EncoderOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Mustdrop => "mustdrop",
            Baseline::None => "none",
            Baseline::RandomDrop => "random_drop",
            Baseline::FastvLike => "fastv_like",
            Baseline::EncoderOnly => "encoder_only",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown baseline {name:?}")))
    }

    /// Whether the policy needs a fixed keep count.
    pub fn needs_keep(self) -> bool {
        matches!(
            self,
            Baseline::RandomDrop | Baseline::FastvLike | Baseline::EncoderOnly
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixtureKind {
    Noise,
    Blocks,
    Needle,
    ImageFile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixtureSpec {
    pub kind: FixtureKind,
    /// Per-patch noise amplitude for `blocks` and the needle background.
    pub noise: Option<f64>,
    /// Needle norm relative to the background colour.
    pub needle_scale: f64,
    /// Input image for `image_file`.
    pub path: Option<PathBuf>,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            kind: FixtureKind::Needle,
            noise: None,
            needle_scale: 12.0,
            path: None,
        }
    }
}

impl FixtureSpec {
    pub fn validate(&self) -> Result<()> {
        if let Some(n) = self.noise {
            if !(n.is_finite() && n >= 0.0) {
                return Err(Error::Config(format!("fixture.noise {n} must be >= 0")));
            }
        }
        if !(self.needle_scale.is_finite() && self.needle_scale > 0.0) {
            return Err(Error::Config("fixture.needle_scale must be > 0".into()));
        }
        if self.kind == FixtureKind::ImageFile && self.path.is_none() {
            return Err(Error::Config(
                "fixture.path is required for image_file".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Fixture seed for `run`.
    pub seed: u64,
    pub model_seed: u64,
    pub baseline: Baseline,
    /// Accounting preset name.
    pub geometry: String,
    /// Fixture seeds `0..suite_size` form the evaluation suite.
    pub suite_size: usize,
    pub toy: ToyConfig,
    pub encode: EncodeConfig,
    pub prefill: PrefillConfig,
    pub decode: DecodeConfig,
    pub fixture: FixtureSpec,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model_seed: 42,
            baseline: Baseline::Mustdrop,
            geometry: "llava-1.5-7b".into(),
            suite_size: 100,
            toy: ToyConfig::default(),
            encode: EncodeConfig::default(),
            prefill: PrefillConfig::default(),
            decode: DecodeConfig::default(),
            fixture: FixtureSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.toy.validate()?;
        self.encode
            .validate(self.toy.encoder_layers, self.toy.grid_side)?;
        self.prefill.validate(self.toy.lm_layers)?;
        self.decode.validate(self.toy.lm_layers)?;
        self.fixture.validate()?;
        self.geometry()?;
        if self.suite_size == 0 {
            return Err(Error::Config("suite_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<ModelGeometry> {
        ModelGeometry::preset(&self.geometry)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Scales a token count given against the geometry's reference image
    /// to this config's patch grid.
    pub fn scaled_budget(&self, reference_count: f64) -> Result<f64> {
        let reference = self.geometry()?.reference_vision_tokens as f64;
        Ok(reference_count * self.toy.num_patches() as f64 / reference)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let text = c.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn budget_mode_round_trips() {
        let mut c = PipelineConfig::default();
        c.prefill.gamma = None;
        c.prefill.budget = Some(7.0);
        c.fixture.path = Some("a.pgm".into());
        let text = c.to_toml_string().unwrap();
        assert_eq!(PipelineConfig::from_toml_str(&text).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml_str("seed = 1\nsed = 2\n").is_err());
        assert!(PipelineConfig::from_toml_str("[prefill]\ngama = 0.1\n").is_err());
        assert!(PipelineConfig::from_toml_str("baseline = \"fastv\"\n").is_err());
    }

    #[test]
    fn partial_file_uses_defaults() {
        let c = PipelineConfig::from_toml_str("seed = 3\nbaseline = \"random_drop\"\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.baseline, Baseline::RandomDrop);
        assert_eq!(c.toy, ToyConfig::default());
    }

    #[test]
    fn invalid_sub_configs_fail() {
        assert!(PipelineConfig::from_toml_str("[prefill]\nprune_layers = [9]\n").is_err());
        assert!(PipelineConfig::from_toml_str("geometry = \"gpt\"\n").is_err());
        assert!(PipelineConfig::from_toml_str("[fixture]\nkind = \"image_file\"\n").is_err());
    }

    #[test]
    fn budget_scaling() {
        let c = PipelineConfig::default();
        assert!((c.scaled_budget(64.0).unwrap() - 64.0 * 64.0 / 576.0).abs() < 1e-12);
        assert_eq!(c.scaled_budget(576.0).unwrap(), 64.0);
    }

    #[test]
    fn baseline_names() {
        for b in Baseline::ALL {
            assert_eq!(Baseline::parse(b.name()).unwrap(), b);
        }
        assert!(Baseline::parse("fastv").is_err());
    }
}
