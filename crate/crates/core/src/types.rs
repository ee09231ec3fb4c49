use std::fmt;

use serde::{Deserialize, Serialize};

/// Stable identity of a token across every stage of one pipeline run.
///
/// Id 0 is the encoder's CLS token, `1..=num_patches` are the original
/// patches in row-major order, and text and generated tokens follow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub const CLS: TokenId = TokenId(0);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl From<usize> for TokenId {
    fn from(v: usize) -> Self {
        TokenId(v as u32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Text,
}
