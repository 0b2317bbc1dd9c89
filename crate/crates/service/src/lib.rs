//! Command-line tools and the HTTP session service around `medalseg-core`.

pub mod cli;
pub mod error;
pub mod render;
pub mod rle;
pub mod server;
pub mod session;

use std::path::Path;

use medalseg_core::decoder::ToyBackbone;
use medalseg_core::pipeline::{Models, PromptRequest};
use medalseg_core::text::{InstanceLabel, PromptResolver, ToyTextEncoder};
use serde::Deserialize;

/// The models a run needs, owned: the toy backbone (which is also the
/// refiner), the matching text encoder and the bundled prompt resolver.
pub struct Kit {
    pub backbone: ToyBackbone,
    pub encoder: ToyTextEncoder,
    pub resolver: PromptResolver,
}

impl Kit {
    pub fn bundled() -> Self {
        Self::with_backbone(ToyBackbone::bundled(0))
    }

    /// Loads a backbone sidecar; the text encoder follows its seed and
    /// embedding width.
    pub fn from_sidecar(path: &Path) -> medalseg_core::Result<Self> {
        Ok(Self::with_backbone(ToyBackbone::load_sidecar(path)?))
    }

    pub fn load(path: Option<&Path>) -> medalseg_core::Result<Self> {
        match path {
            Some(p) => Self::from_sidecar(p),
            None => Ok(Self::bundled()),
        }
    }

    fn with_backbone(backbone: ToyBackbone) -> Self {
        let cfg = backbone.config();
        let encoder = ToyTextEncoder::new(cfg.seed, cfg.text_dim);
        Self { backbone, encoder, resolver: PromptResolver::bundled() }
    }

    pub fn models(&self) -> Models<'_> {
        Models { backbone: &self.backbone, refiner: &self.backbone, encoder: &self.encoder, resolver: &self.resolver }
    }
}

/// A prompt given either as a bare sentence (anatomy) or in full.
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum PromptInput {
    Sentence(String),
    Full(PromptRequest),
}

impl From<PromptInput> for PromptRequest {
    fn from(p: PromptInput) -> Self {
        match p {
            PromptInput::Sentence(s) => PromptRequest::new(s, InstanceLabel::Anatomy),
            PromptInput::Full(p) => p,
        }
    }
}

