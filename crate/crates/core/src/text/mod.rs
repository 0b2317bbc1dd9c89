//! Text prompts: class and variant mappings, modality detection, longest-match
//! resolution and the text-encoder contract.

mod encoder;
pub mod mapping;
mod resolve;
mod rules;

use serde::{Deserialize, Serialize};

pub use encoder::{TextEncoder, TextQuery, ToyTextEncoder, DEFAULT_EMBED_DIM};
pub use mapping::{
    build_mappings, normalize_text, standardize_name, ClassMapping, Corpus, VariantEntry,
    VariantMapping,
};
pub use resolve::{detect_modality, PromptResolver, ResolvedPrompt};

use crate::error::{invalid, Error};

pub const BUNDLED_CORPUS: &str = include_str!("../../assets/prompt_corpus.json");
pub const BUNDLED_FIXTURES: &str = include_str!("../../assets/prompt_fixtures.json");
pub const BUNDLED_CLASS_MAPPING: &str = include_str!("../../assets/class_mapping.json");
pub const BUNDLED_VARIANT_MAPPING: &str = include_str!("../../assets/variant_mapping.json");

/// Anatomy (0) or lesion (1) dictionary selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum InstanceLabel {
    Anatomy = 0,
    Lesion = 1,
}

impl TryFrom<u8> for InstanceLabel {
    type Error = Error;
    fn try_from(v: u8) -> Result<Self, Error> {
        match v {
            0 => Ok(Self::Anatomy),
            1 => Ok(Self::Lesion),
            _ => Err(invalid(format!("instance label must be 0 or 1, got {v}"))),
        }
    }
}

impl From<InstanceLabel> for u8 {
    fn from(l: InstanceLabel) -> u8 {
        l as u8
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptFixture {
    pub sentence: String,
    pub instance_label: u8,
}

pub fn bundled_fixtures() -> Vec<PromptFixture> {
    serde_json::from_str(BUNDLED_FIXTURES).expect("bundled fixtures parse")
}
