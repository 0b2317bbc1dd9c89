//! Class and variant mappings built from a prompt corpus.
//!
//! Corpus schema:
//!
//! ```json
//! {
//!   "datasets": {
//!     "CT_Name": {
//!       "instance_label": 0,
//!       "classes": { "1": { "name": "Liver", "prompts": ["..."], "variants": ["..."] } }
//!     }
//!   },
//!   "pinned_ids": { "CT": { "Liver": 1 } }
//! }
//! ```
//!
//! The dataset prefix before the first `_` names the modality. Class names are
//! standardized into canonical names; each canonical name gets one id per
//! modality, shared by the anatomy and lesion dictionaries.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::rules::{ADJECTIVES, ALIASES, DIRECTIONS, FILLER, LESION_FAMILY, PLURALS, SUFFIXES};
use super::InstanceLabel;
use crate::error::{Error, Result};
use crate::volume::Modality;

fn build_err(msg: impl Into<String>) -> Error {
    Error::MappingBuild(msg.into())
}

/// Lowercase, non-alphanumerics to spaces, single spaces, trimmed.
pub fn normalize_text(s: &str) -> String {
    let mapped: String = s
        .chars()
        .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { ' ' })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn noun_of(adj: &str) -> Option<&'static str> {
    ADJECTIVES.iter().find(|(_, a)| *a == adj).map(|(n, _)| *n)
}

fn adjective_of(noun: &str) -> Option<&'static str> {
    ADJECTIVES.iter().find(|(n, _)| *n == noun).map(|(_, a)| *a)
}

/// An organ word can be swapped for its other form only when it ends the name
/// or precedes a lesion-type word, so "splenic vein" is left alone.
fn swappable(words: &[String], i: usize) -> bool {
    i + 1 == words.len() || SUFFIXES.contains(&words[i + 1].as_str())
}

/// Canonical class name for a raw corpus or prompt string.
///
/// Adjectives become nouns ("renal" -> "kidney"), filler words drop out,
/// lesion suffixes are pluralized, a trailing direction moves to the front,
/// and a small alias table catches synonyms.
pub fn standardize_name(raw: &str) -> String {
    let mut words: Vec<String> = normalize_text(raw).split(' ').map(str::to_string).collect();
    for i in 0..words.len() {
        if swappable(&words, i) {
            if let Some(n) = noun_of(&words[i]) {
                words[i] = n.to_string();
            }
        }
    }
    words.retain(|w| !FILLER.contains(&w.as_str()));
    if let Some(last) = words.last_mut() {
        if let Some((_, p)) = PLURALS.iter().find(|(s, _)| *s == last.as_str()) {
            *last = p.to_string();
        }
    }
    if words.len() > 1 && DIRECTIONS.contains(&words[words.len() - 1].as_str()) {
        let d = words.pop().unwrap();
        words.insert(0, d);
    }
    let mut joined = words.join(" ");
    if let Some((_, to)) = ALIASES.iter().find(|(from, _)| *from == joined) {
        joined = to.to_string();
    }
    capitalize(&joined)
}

/// Variant terms derived from a canonical name by rule.
pub fn generated_variants(canonical: &str) -> BTreeSet<String> {
    let base = normalize_text(canonical);
    let words: Vec<String> = base.split(' ').map(str::to_string).collect();
    let mut forms: BTreeSet<Vec<String>> = BTreeSet::new();
    forms.insert(words.clone());

    if words.len() == 1 && !words[0].ends_with('s') {
        forms.insert(vec![format!("{}s", words[0])]);
    }
    if let Some(last) = words.last() {
        if LESION_FAMILY.contains(&last.as_str()) {
            for s in LESION_FAMILY {
                let mut w = words.clone();
                *w.last_mut().unwrap() = s.to_string();
                forms.insert(w);
            }
        } else if last == "nodules" || last == "cysts" {
            let mut w = words.clone();
            w.last_mut().unwrap().pop();
            forms.insert(w);
        }
    }

    let mut with_adj = forms.clone();
    for f in &forms {
        for i in 0..f.len() {
            if swappable(f, i) {
                if let Some(a) = adjective_of(&f[i]) {
                    let mut w = f.clone();
                    w[i] = a.to_string();
                    with_adj.insert(w);
                }
            }
        }
    }

    let mut out = BTreeSet::new();
    for f in with_adj {
        if f.len() > 1 && DIRECTIONS.contains(&f[0].as_str()) {
            let mut w = f[1..].to_vec();
            w.push(f[0].clone());
            out.insert(w.join(" "));
        }
        out.insert(f.join(" "));
    }
    out
}

#[derive(Clone, Debug, Deserialize)]
pub struct CorpusClass {
    pub name: String,
    #[serde(default)]
    pub prompts: Vec<String>,
    #[serde(default)]
    pub variants: Vec<String>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct CorpusDataset {
    pub instance_label: u8,
    pub classes: BTreeMap<String, CorpusClass>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct Corpus {
    pub datasets: BTreeMap<String, CorpusDataset>,
    #[serde(default)]
    pub pinned_ids: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Corpus {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn modality_of_dataset(name: &str) -> Result<Modality> {
    let prefix = name.split('_').next().unwrap_or_default();
    Modality::from_str(prefix)
        .map_err(|_| build_err(format!("dataset {name:?} has no recognizable modality prefix")))
}

/// Per-modality, per-instance-label dictionaries of canonical name to id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassMapping {
    dicts: BTreeMap<Modality, [BTreeMap<String, u32>; 2]>,
}

type MappingJson = BTreeMap<String, BTreeMap<String, BTreeMap<String, u32>>>;

impl ClassMapping {
    pub fn dict(&self, m: Modality, l: InstanceLabel) -> Option<&BTreeMap<String, u32>> {
        self.dicts.get(&m).map(|d| &d[l as usize])
    }

    pub fn id(&self, m: Modality, l: InstanceLabel, name: &str) -> Option<u32> {
        self.dict(m, l).and_then(|d| d.get(name).copied())
    }

    /// Canonical name of an id within a modality, whichever label holds it.
    pub fn name_of(&self, m: Modality, id: u32) -> Option<&str> {
        let d = self.dicts.get(&m)?;
        d.iter()
            .flat_map(|x| x.iter())
            .find(|(_, v)| **v == id)
            .map(|(k, _)| k.as_str())
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.dicts.keys().copied()
    }

    /// True if the canonical name appears in any dictionary.
    pub fn contains_name(&self, name: &str) -> bool {
        self.dicts.values().any(|d| d.iter().any(|x| x.contains_key(name)))
    }

    pub fn len(&self) -> usize {
        self.dicts.values().map(|d| d[0].len() + d[1].len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn insert(&mut self, m: Modality, l: InstanceLabel, name: String, id: u32) {
        self.dicts.entry(m).or_default()[l as usize].insert(name, id);
    }

    pub fn to_json(&self) -> String {
        let mut out: MappingJson = BTreeMap::new();
        for (m, d) in &self.dicts {
            let e = out.entry(m.as_str().to_string()).or_default();
            for (l, dict) in d.iter().enumerate() {
                e.insert(l.to_string(), dict.clone());
            }
        }
        serde_json::to_string_pretty(&out).expect("string maps serialize") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: MappingJson = serde_json::from_str(s)?;
        let mut out = ClassMapping::default();
        for (m, by_label) in raw {
            let m = Modality::from_str(&m)?;
            for (l, dict) in by_label {
                let l = l
                    .parse::<u8>()
                    .ok()
                    .and_then(|v| InstanceLabel::try_from(v).ok())
                    .ok_or_else(|| build_err(format!("bad instance label key {l:?}")))?;
                for (name, id) in dict {
                    out.insert(m, l, name, id);
                }
            }
            out.dicts.entry(m).or_default();
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantEntry {
    pub term: String,
    pub canonical: String,
    /// Term length in characters; longer terms are tried first.
    pub precedence: usize,
}

/// Variant term to canonical name, sorted by descending precedence then term.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VariantMapping {
    entries: Vec<VariantEntry>,
}

impl VariantMapping {
    pub fn new(mut entries: Vec<VariantEntry>) -> Self {
        entries.sort_by(|a, b| b.precedence.cmp(&a.precedence).then_with(|| a.term.cmp(&b.term)));
        Self { entries }
    }

    pub fn entries(&self) -> &[VariantEntry] {
        &self.entries
    }

    pub fn canonical(&self, term: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|e| e.term == term)
            .map(|e| e.canonical.as_str())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("entries serialize") + "\n"
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let entries: Vec<VariantEntry> = serde_json::from_str(s)?;
        Ok(Self::new(entries))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Source {
    Generated,
    Declared,
    Canonical,
}

/// Builds both mappings. Deterministic: the same corpus always yields the same
/// JSON bytes.
pub fn build_mappings(corpus: &Corpus) -> Result<(ClassMapping, VariantMapping)> {
    // canonical names per modality in first-appearance order
    let mut order: BTreeMap<Modality, Vec<String>> = BTreeMap::new();
    let mut members: Vec<(Modality, InstanceLabel, String)> = Vec::new();
    let mut terms: BTreeMap<String, BTreeMap<Source, BTreeSet<String>>> = BTreeMap::new();
    let mut add_term = |term: String, src: Source, canonical: &str| {
        if !term.is_empty() {
            terms
                .entry(term)
                .or_default()
                .entry(src)
                .or_default()
                .insert(canonical.to_string());
        }
    };

    for (ds_name, ds) in &corpus.datasets {
        let m = modality_of_dataset(ds_name)?;
        let l = InstanceLabel::try_from(ds.instance_label).map_err(|_| {
            build_err(format!("dataset {ds_name:?}: instance_label must be 0 or 1"))
        })?;
        let mut keys: Vec<&String> = ds.classes.keys().collect();
        keys.sort_by_key(|k| (k.parse::<u64>().unwrap_or(u64::MAX), (*k).clone()));
        for k in keys {
            let class = &ds.classes[k];
            let canonical = standardize_name(&class.name);
            if canonical.is_empty() {
                return Err(build_err(format!("dataset {ds_name:?} class {k}: empty name")));
            }
            let seen = order.entry(m).or_default();
            if !seen.contains(&canonical) {
                seen.push(canonical.clone());
            }
            members.push((m, l, canonical.clone()));
            add_term(normalize_text(&canonical), Source::Canonical, &canonical);
            add_term(normalize_text(&class.name), Source::Declared, &canonical);
            for v in &class.variants {
                add_term(normalize_text(v), Source::Declared, &canonical);
            }
            for v in generated_variants(&canonical) {
                add_term(v, Source::Generated, &canonical);
            }
        }
    }

    let mut ids: BTreeMap<Modality, BTreeMap<String, u32>> = BTreeMap::new();
    for (m_name, pins) in &corpus.pinned_ids {
        let m = Modality::from_str(m_name)
            .map_err(|_| build_err(format!("pinned_ids: unknown modality {m_name:?}")))?;
        let table = ids.entry(m).or_default();
        let mut taken: BTreeMap<u32, &str> = BTreeMap::new();
        for (name, id) in pins {
            let canonical = standardize_name(name);
            if *id == 0 {
                return Err(build_err(format!("{m}: id 0 is reserved for background")));
            }
            if let Some(other) = taken.insert(*id, name) {
                return Err(build_err(format!(
                    "{m}: classes {other:?} and {name:?} are both pinned to id {id}"
                )));
            }
            if !order.get(&m).is_some_and(|o| o.contains(&canonical)) {
                return Err(build_err(format!("{m}: pinned class {name:?} is not in the corpus")));
            }
            if table.insert(canonical.clone(), *id).is_some() {
                return Err(build_err(format!("{m}: class {canonical:?} pinned twice")));
            }
        }
    }
    for (m, names) in &order {
        let table = ids.entry(*m).or_default();
        let mut used: BTreeSet<u32> = table.values().copied().collect();
        let mut next = 1u32;
        for name in names {
            if table.contains_key(name) {
                continue;
            }
            while used.contains(&next) {
                next += 1;
            }
            table.insert(name.clone(), next);
            used.insert(next);
        }
    }

    let mut classes = ClassMapping::default();
    for (m, l, name) in members {
        let id = ids[&m][&name];
        classes.insert(m, l, name, id);
    }

    let mut entries = Vec::new();
    for (term, by_src) in terms {
        let (src, canon) = by_src.iter().next_back().expect("at least one source");
        if canon.len() > 1 {
            match src {
                Source::Generated => continue,
                _ => {
                    return Err(build_err(format!(
                        "term {term:?} maps to several classes: {canon:?}"
                    )))
                }
            }
        }
        let canonical = canon.iter().next().unwrap().clone();
        entries.push(VariantEntry {
            precedence: term.chars().count(),
            term,
            canonical,
        });
    }
    Ok((classes, VariantMapping::new(entries)))
}
