//! Gazetteer-based entity linking and surface-pattern relation extraction.

use std::collections::{BTreeSet, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};

use super::graph::Triple;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseFold {
    #[default]
    Lowercase,
    Exact,
}

impl CaseFold {
    fn fold(self, c: char) -> char {
        match self {
            CaseFold::Lowercase => c.to_lowercase().next().unwrap_or(c),
            CaseFold::Exact => c,
        }
    }
}

/// One `gazetteer.json` entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GazetteerEntry {
    pub entity_id: String,
    pub aliases: Vec<String>,
}

/// Surface-form dictionary mapping aliases to entity ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GazetteerData", into = "GazetteerData")]
pub struct Gazetteer {
    fold: CaseFold,
    entries: Vec<GazetteerEntry>,
    // folded alias chars, entity id; longest first
    compiled: Vec<(Vec<char>, String)>,
}

#[derive(Serialize, Deserialize)]
struct GazetteerData {
    #[serde(default)]
    fold: CaseFold,
    entries: Vec<GazetteerEntry>,
}

impl TryFrom<GazetteerData> for Gazetteer {
    type Error = Error;
    fn try_from(d: GazetteerData) -> Result<Self> {
        Gazetteer::new(d.entries, d.fold)
    }
}

impl From<Gazetteer> for GazetteerData {
    fn from(g: Gazetteer) -> Self {
        GazetteerData {
            fold: g.fold,
            entries: g.entries,
        }
    }
}

fn normalize_alias(alias: &str, fold: CaseFold) -> Vec<char> {
    let collapsed = alias.split_whitespace().collect::<Vec<_>>().join(" ");
    collapsed.chars().map(|c| fold.fold(c)).collect()
}

impl Gazetteer {
    pub fn new(entries: Vec<GazetteerEntry>, fold: CaseFold) -> Result<Self> {
        let mut owner: HashMap<Vec<char>, String> = HashMap::new();
        for e in &entries {
            if e.entity_id.trim().is_empty() {
                return Err(Error::Validation(
                    "gazetteer entry with empty entity_id".into(),
                ));
            }
            if e.aliases.is_empty() {
                return Err(Error::Validation(format!(
                    "entity {} has no aliases",
                    e.entity_id
                )));
            }
            for a in &e.aliases {
                let key = normalize_alias(a, fold);
                if key.is_empty() {
                    return Err(Error::Validation(format!(
                        "entity {} has an empty alias",
                        e.entity_id
                    )));
                }
                match owner.get(&key) {
                    Some(prev) if prev != &e.entity_id => {
                        return Err(Error::Conflict(format!(
                            "alias {a:?} maps to both {prev} and {}",
                            e.entity_id
                        )))
                    }
                    _ => {
                        owner.insert(key, e.entity_id.clone());
                    }
                }
            }
        }
        let mut compiled: Vec<(Vec<char>, String)> = owner.into_iter().collect();
        compiled.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        Ok(Self {
            fold,
            entries,
            compiled,
        })
    }

    pub fn from_json_reader<R: Read>(reader: R) -> Result<Self> {
        let entries: Vec<GazetteerEntry> = serde_json::from_reader(reader)?;
        Self::new(entries, CaseFold::Lowercase)
    }

    pub fn is_empty(&self) -> bool {
        self.compiled.is_empty()
    }

    pub fn entries(&self) -> &[GazetteerEntry] {
        &self.entries
    }

    pub fn entity_ids(&self) -> BTreeSet<String> {
        self.entries.iter().map(|e| e.entity_id.clone()).collect()
    }

    /// Adds entries, e.g. from a second gazetteer file.
    pub fn extend(&mut self, more: Vec<GazetteerEntry>) -> Result<()> {
        let mut all = self.entries.clone();
        all.extend(more);
        *self = Self::new(all, self.fold)?;
        Ok(())
    }
}

/// A linked mention; `start..end` is a byte range into the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityLink {
    pub entity: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityLinkSet {
    pub source_id: String,
    pub links: Vec<EntityLink>,
}

impl EntityLinkSet {
    pub fn new(source_id: impl Into<String>, links: Vec<EntityLink>) -> Self {
        Self {
            source_id: source_id.into(),
            links,
        }
    }

    /// Builds a link set without spans, for callers that only know entity ids.
    pub fn from_entities<I, S>(source_id: impl Into<String>, entities: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(
            source_id,
            entities
                .into_iter()
                .map(|e| EntityLink {
                    entity: e.into(),
                    start: 0,
                    end: 0,
                })
                .collect(),
        )
    }

    /// Distinct linked entity ids.
    pub fn entities(&self) -> BTreeSet<String> {
        self.links.iter().map(|l| l.entity.clone()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Left-to-right longest match over word-aligned positions. Matches never
/// overlap; whitespace runs in the text match a single space in an alias.
pub fn link_entities(source_id: &str, text: &str, gazetteer: &Gazetteer) -> EntityLinkSet {
    // (folded char, byte offset of the original char)
    let mut chars: Vec<(char, usize)> = Vec::with_capacity(text.len());
    let mut prev_space = false;
    for (off, c) in text.char_indices() {
        if c.is_whitespace() {
            if !prev_space {
                chars.push((' ', off));
            }
            prev_space = true;
        } else {
            chars.push((gazetteer.fold.fold(c), off));
            prev_space = false;
        }
    }
    let byte_end = |idx: usize| -> usize { chars.get(idx).map_or(text.len(), |&(_, off)| off) };

    let mut links = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let at_word_start = i == 0 || !is_word_char(chars[i - 1].0);
        if at_word_start && is_word_char(chars[i].0) {
            let hit = gazetteer.compiled.iter().find(|(alias, _)| {
                let end = i + alias.len();
                end <= chars.len()
                    && chars[i..end]
                        .iter()
                        .map(|&(c, _)| c)
                        .eq(alias.iter().copied())
                    && (end == chars.len() || !is_word_char(chars[end].0))
            });
            if let Some((alias, entity)) = hit {
                let end = i + alias.len();
                links.push(EntityLink {
                    entity: entity.clone(),
                    start: chars[i].1,
                    end: byte_end(end),
                });
                i = end;
                continue;
            }
        }
        i += 1;
    }
    EntityLinkSet::new(source_id, links)
}

/// A relation and the surface phrases that express it between two mentions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationPattern {
    pub relation: String,
    pub phrases: Vec<String>,
}

impl RelationPattern {
    pub fn new<I, S>(relation: impl Into<String>, phrases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            relation: relation.into(),
            phrases: phrases.into_iter().map(Into::into).collect(),
        }
    }
}

fn word_tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !is_word_char(c))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn contains_phrase(haystack: &[String], phrase: &[String]) -> bool {
    !phrase.is_empty() && haystack.windows(phrase.len()).any(|w| w == phrase)
}

/// Extracts `(head, relation, tail)` triples from consecutive linked mentions
/// whose connecting text contains a relation phrase. The connecting text may
/// not cross a sentence terminator.
pub fn extract_triples_pattern(
    text: &str,
    gazetteer: &Gazetteer,
    patterns: &[RelationPattern],
) -> Vec<Triple> {
    let links = link_entities("", text, gazetteer).links;
    let compiled: Vec<(&str, Vec<Vec<String>>)> = patterns
        .iter()
        .map(|p| {
            (
                p.relation.as_str(),
                p.phrases.iter().map(|ph| word_tokens(ph)).collect(),
            )
        })
        .collect();
    let mut out: Vec<Triple> = Vec::new();
    for pair in links.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let gap = &text[a.end..b.start];
        if gap.contains(['.', '?', '!', ';']) {
            continue;
        }
        let gap_words = word_tokens(gap);
        for (relation, phrases) in &compiled {
            if phrases.iter().any(|ph| contains_phrase(&gap_words, ph)) {
                let t = Triple::new(&a.entity, *relation, &b.entity);
                if !out.contains(&t) {
                    out.push(t);
                }
            }
        }
    }
    out
}
