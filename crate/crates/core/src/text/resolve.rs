use regex::Regex;
use serde::{Deserialize, Serialize};

use super::mapping::{normalize_text, ClassMapping, VariantMapping};
use super::rules::MODALITY_KEYWORDS;
use super::InstanceLabel;
use crate::error::{invalid, Error, Result};
use crate::volume::Modality;

/// A sentence pinned to one class of one modality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedPrompt {
    pub sentence: String,
    pub instance_label: InstanceLabel,
    pub modality: Modality,
    pub class_id: u32,
    pub canonical_name: String,
}

fn contains_term(padded: &str, term: &str) -> bool {
    // both sides are normalized, so whole-word containment is a padded search
    padded.contains(&format!(" {term} "))
}

/// Keyword-based modality detection, case-insensitive.
pub fn detect_modality(sentence: &str) -> Result<Modality> {
    let norm = normalize_text(sentence);
    if norm.is_empty() {
        return Err(invalid("empty prompt"));
    }
    let padded = format!(" {norm} ");
    for (m, words) in MODALITY_KEYWORDS {
        if words.iter().any(|w| contains_term(&padded, w)) {
            return Ok(*m);
        }
    }
    Err(Error::UnresolvedModality(sentence.to_string()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Direction {
    Left,
    Right,
    Bilateral,
}

struct DirectionPatterns {
    left: Regex,
    right: Regex,
    bilateral: Regex,
}

impl DirectionPatterns {
    fn new() -> Self {
        Self {
            left: Regex::new(r"(?i)\b(left|lt)\b|\bl\.").unwrap(),
            right: Regex::new(r"(?i)\b(right|rt)\b|\br\.").unwrap(),
            bilateral: Regex::new(r"(?i)\b(bilateral|both)\b").unwrap(),
        }
    }

    fn detect(&self, sentence: &str) -> Option<Direction> {
        let l = self.left.is_match(sentence);
        let r = self.right.is_match(sentence);
        if self.bilateral.is_match(sentence) || (l && r) {
            Some(Direction::Bilateral)
        } else if l {
            Some(Direction::Left)
        } else if r {
            Some(Direction::Right)
        } else {
            None
        }
    }
}

/// Resolves free-text prompts against a class mapping.
pub struct PromptResolver {
    classes: ClassMapping,
    variants: VariantMapping,
    directions: DirectionPatterns,
}

impl PromptResolver {
    pub fn new(classes: ClassMapping, variants: VariantMapping) -> Result<Self> {
        if let Some(e) = variants
            .entries()
            .iter()
            .find(|e| !classes.contains_name(&e.canonical))
        {
            return Err(Error::MappingBuild(format!(
                "variant {:?} targets unknown class {:?}",
                e.term, e.canonical
            )));
        }
        Ok(Self {
            classes,
            variants,
            directions: DirectionPatterns::new(),
        })
    }

    /// Resolver over the mapping files shipped with the crate.
    pub fn bundled() -> Self {
        let classes = ClassMapping::from_json(super::BUNDLED_CLASS_MAPPING)
            .expect("bundled class mapping parses");
        let variants = VariantMapping::from_json(super::BUNDLED_VARIANT_MAPPING)
            .expect("bundled variant mapping parses");
        Self::new(classes, variants).expect("bundled mappings are consistent")
    }

    pub fn classes(&self) -> &ClassMapping {
        &self.classes
    }

    pub fn variants(&self) -> &VariantMapping {
        &self.variants
    }

    pub fn resolve(&self, sentence: &str, label: InstanceLabel) -> Result<ResolvedPrompt> {
        let modality = detect_modality(sentence)?;
        self.resolve_with_modality(sentence, label, modality)
    }

    /// Longest matching term whose class lives in the modality's dictionary
    /// for `label`; ties go to the lexicographically smallest canonical name.
    /// A direction word in the sentence then moves an undirected match to its
    /// left/right class, and "bilateral" moves a directed match back.
    pub fn resolve_with_modality(
        &self,
        sentence: &str,
        label: InstanceLabel,
        modality: Modality,
    ) -> Result<ResolvedPrompt> {
        let unresolved = || Error::UnresolvedClass {
            sentence: sentence.to_string(),
            modality,
        };
        let dict = self.classes.dict(modality, label).ok_or_else(unresolved)?;
        let padded = format!(" {} ", normalize_text(sentence));

        let mut best: Option<(usize, &str)> = None;
        for e in self.variants.entries() {
            if let Some((len, _)) = best {
                if e.precedence < len {
                    break;
                }
            }
            if !dict.contains_key(&e.canonical) || !contains_term(&padded, &e.term) {
                continue;
            }
            best = match best {
                Some((len, name)) if name <= e.canonical.as_str() => Some((len, name)),
                _ => Some((e.precedence, e.canonical.as_str())),
            };
        }
        let (_, mut name) = best.ok_or_else(unresolved)?;

        match self.directions.detect(sentence) {
            Some(Direction::Bilateral) => {
                if let Some(rest) = strip_direction(name) {
                    if let Some((k, _)) = find_ci(dict, &rest) {
                        name = k;
                    }
                }
            }
            Some(d) if strip_direction(name).is_none() => {
                let side = if d == Direction::Left { "left" } else { "right" };
                if let Some((k, _)) = find_ci(dict, &format!("{side} {name}")) {
                    name = k;
                }
            }
            _ => {}
        }

        Ok(ResolvedPrompt {
            sentence: sentence.to_string(),
            instance_label: label,
            modality,
            class_id: dict[name],
            canonical_name: name.to_string(),
        })
    }
}

fn strip_direction(name: &str) -> Option<String> {
    let lower = name.to_lowercase();
    ["left ", "right "]
        .iter()
        .find_map(|p| lower.strip_prefix(p).map(str::to_string))
}

fn find_ci<'a>(
    dict: &'a std::collections::BTreeMap<String, u32>,
    name: &str,
) -> Option<(&'a str, u32)> {
    let want = name.to_lowercase();
    dict.iter()
        .find(|(k, _)| k.to_lowercase() == want)
        .map(|(k, v)| (k.as_str(), *v))
}
