//! Knowledge base, alias index and candidate generation.
//!
//! Candidates are found by exact lookup of the normalized mention surface in
//! an alias dictionary. Each alias maps to its entities ordered by descending
//! popularity (ties by ascending id), so pruning to the top `K` is a prefix
//! cut and the popularity prior comes for free.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

/// Description attached to the synthetic NIL option.
pub const NIL_DESCRIPTION: &str = "This is a NIL option";
/// Option text used for the synthetic NIL option.
pub const NIL_NAME: &str = "NIL";
/// Literal used for NIL in corpus and decision files.
pub const NIL_LABEL: &str = "NIL";

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

impl EntityId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EntityId {
    fn from(s: &str) -> Self {
        Self(s.to_string())
    }
}

/// One line of the KB file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    pub id: EntityId,
    #[serde(rename = "name")]
    pub canonical_name: String,
    #[serde(default)]
    pub description: String,
    pub aliases: Vec<String>,
    #[serde(default)]
    pub popularity: u64,
}

#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    entities: Vec<Entity>,
    by_id: HashMap<EntityId, usize>,
}

impl PartialEq for KnowledgeBase {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
    }
}

impl KnowledgeBase {
    pub fn new(entities: Vec<Entity>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(entities.len());
        for (i, e) in entities.iter().enumerate() {
            if by_id.insert(e.id.clone(), i).is_some() {
                return Err(Error::DuplicateEntity(e.id.0.clone()));
            }
        }
        Ok(Self { entities, by_id })
    }

    pub fn get(&self, id: &EntityId) -> Option<&Entity> {
        self.by_id.get(id).map(|&i| &self.entities[i])
    }

    pub fn contains(&self, id: &EntityId) -> bool {
        self.by_id.contains_key(id)
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut entities = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: Entity = serde_json::from_str(&line)
                .map_err(|err| Error::Format(format!("KB line {}: {err}", lineno + 1)))?;
            entities.push(e);
        }
        Self::new(entities)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entities {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn normalize_once(s: &str) -> String {
    let folded: String = s.nfkc().flat_map(char::to_lowercase).collect();
    let folded: String = folded.nfkc().collect();
    folded.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercase, NFKC-normalize and collapse whitespace.
///
/// Case folding and compatibility decomposition can feed each other on
/// unusual code points, so the fold is repeated until it reaches a fixed
/// point; that makes the function idempotent for every input.
pub fn normalize_surface(surface: &str) -> String {
    let mut cur = normalize_once(surface);
    for _ in 0..8 {
        let next = normalize_once(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Normalized alias → entities with popularity.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AliasIndex {
    entries: BTreeMap<String, Vec<(EntityId, u64)>>,
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    alias: String,
    entities: Vec<(EntityId, u64)>,
}

impl AliasIndex {
    /// Index every alias (and the canonical name) of every entity.
    pub fn build(kb: &KnowledgeBase) -> Self {
        let mut entries: BTreeMap<String, Vec<(EntityId, u64)>> = BTreeMap::new();
        for e in kb.entities() {
            let keys: BTreeSet<String> = e
                .aliases
                .iter()
                .chain(std::iter::once(&e.canonical_name))
                .map(|a| normalize_surface(a))
                .filter(|a| !a.is_empty())
                .collect();
            for key in keys {
                entries
                    .entry(key)
                    .or_default()
                    .push((e.id.clone(), e.popularity));
            }
        }
        for list in entries.values_mut() {
            list.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        }
        Self { entries }
    }

    /// Entities for an already-normalized alias, most popular first.
    pub fn lookup(&self, normalized: &str) -> &[(EntityId, u64)] {
        self.entries
            .get(normalized)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn aliases(&self) -> impl Iterator<Item = (&str, &[(EntityId, u64)])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn generate_candidates(&self, mention_surface: &str, k: usize, with_nil: bool) -> CandidateSet {
        let surface = normalize_surface(mention_surface);
        let entities = self
            .lookup(&surface)
            .iter()
            .take(k)
            .map(|(id, _)| id.clone())
            .collect();
        CandidateSet {
            surface,
            entities,
            includes_nil: with_nil,
        }
    }

    /// Most popular entity for the surface with `p(e|m) = pop(e) / Σ pop`.
    ///
    /// An alias whose entities all have zero popularity gets a uniform prior.
    pub fn prior_baseline(&self, mention_surface: &str) -> Prior {
        let list = self.lookup(&normalize_surface(mention_surface));
        let Some((best, best_pop)) = list.first() else {
            return Prior {
                entity: None,
                probability: 0.0,
            };
        };
        let total: u64 = list.iter().map(|(_, p)| p).sum();
        let probability = if total == 0 {
            1.0 / list.len() as f64
        } else {
            *best_pop as f64 / total as f64
        };
        Prior {
            entity: Some(best.clone()),
            probability,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for (alias, entities) in &self.entries {
            let line = IndexLine {
                alias: alias.clone(),
                entities: entities.clone(),
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: IndexLine = serde_json::from_str(&line)
                .map_err(|err| Error::Format(format!("index line {}: {err}", lineno + 1)))?;
            entries.insert(rec.alias, rec.entities);
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    /// `None` means NIL.
    pub entity: Option<EntityId>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CandidateOption {
    Entity(EntityId),
    Nil,
}

impl CandidateOption {
    /// Inverse of [`CandidateOption::label`].
    pub fn from_label(label: &str) -> Self {
        if label == NIL_LABEL {
            CandidateOption::Nil
        } else {
            CandidateOption::Entity(EntityId::new(label))
        }
    }

    pub fn entity(&self) -> Option<&EntityId> {
        match self {
            CandidateOption::Entity(id) => Some(id),
            CandidateOption::Nil => None,
        }
    }

    pub fn is_nil(&self) -> bool {
        matches!(self, CandidateOption::Nil)
    }

    pub fn label(&self) -> &str {
        match self {
            CandidateOption::Entity(id) => id.as_str(),
            CandidateOption::Nil => NIL_LABEL,
        }
    }
}

/// Pruned candidates for one mention; the NIL option, if any, comes last.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub surface: String,
    pub entities: Vec<EntityId>,
    pub includes_nil: bool,
}

impl CandidateSet {
    /// Number of options including NIL.
    pub fn len(&self) -> usize {
        self.entities.len() + usize::from(self.includes_nil)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn option(&self, j: usize) -> CandidateOption {
        match self.entities.get(j) {
            Some(id) => CandidateOption::Entity(id.clone()),
            None => {
                assert!(self.includes_nil && j == self.entities.len(), "option index out of range");
                CandidateOption::Nil
            }
        }
    }

    pub fn options(&self) -> impl Iterator<Item = CandidateOption> + '_ {
        (0..self.len()).map(|j| self.option(j))
    }

    pub fn index_of(&self, target: &CandidateOption) -> Option<usize> {
        match target {
            CandidateOption::Entity(id) => self.entities.iter().position(|e| e == id),
            CandidateOption::Nil => self.includes_nil.then_some(self.entities.len()),
        }
    }

    pub fn nil_index(&self) -> Option<usize> {
        self.includes_nil.then_some(self.entities.len())
    }

    /// Training-time recall fix: put the gold entity in place of the least
    /// popular candidate when candidate generation missed it.
    pub fn inject_gold(&mut self, gold: &EntityId, k: usize) {
        if self.entities.contains(gold) {
            return;
        }
        if self.entities.len() >= k.max(1) {
            self.entities.pop();
        }
        self.entities.push(gold.clone());
    }

    /// (description, option text) for option `j`.
    pub fn option_text<'a>(&self, kb: &'a KnowledgeBase, j: usize) -> Result<(&'a str, &'a str)> {
        match self.option(j) {
            CandidateOption::Entity(id) => {
                let e = kb.get(&id).ok_or_else(|| Error::UnknownEntity(id.0.clone()))?;
                Ok((e.description.as_str(), e.canonical_name.as_str()))
            }
            CandidateOption::Nil => Ok((NIL_DESCRIPTION, NIL_NAME)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ent(id: &str, aliases: &[&str], pop: u64) -> Entity {
        Entity {
            id: id.into(),
            canonical_name: aliases[0].to_string(),
            description: String::new(),
            aliases: aliases.iter().map(|s| s.to_string()).collect(),
            popularity: pop,
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_surface("Li  Na "), "li na");
        assert_eq!(normalize_surface(""), "");
        assert_eq!(normalize_surface("\u{3000}Ｌｉ\tＮａ"), "li na");
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = KnowledgeBase::new(vec![ent("a", &["x"], 1), ent("a", &["y"], 2)]).unwrap_err();
        assert!(matches!(err, Error::DuplicateEntity(id) if id == "a"));
    }

    #[test]
    fn shared_alias_sorted_by_popularity() {
        let kb = KnowledgeBase::new(vec![
            ent("e_b", &["Li Na"], 90),
            ent("e_a", &["li na"], 100),
        ])
        .unwrap();
        let index = AliasIndex::build(&kb);
        assert_eq!(
            index.lookup("li na"),
            &[(EntityId::from("e_a"), 100), (EntityId::from("e_b"), 90)]
        );
    }

    #[test]
    fn normalization_collapses_aliases() {
        let kb = KnowledgeBase::new(vec![ent("e", &["X", "x "], 3)]).unwrap();
        let index = AliasIndex::build(&kb);
        assert_eq!(index.len(), 1);
        assert_eq!(index.lookup("x"), &[(EntityId::from("e"), 3)]);
    }

    #[test]
    fn popularity_ties_break_by_id() {
        let kb = KnowledgeBase::new(vec![ent("b", &["s"], 5), ent("a", &["s"], 5)]).unwrap();
        let index = AliasIndex::build(&kb);
        let ids: Vec<_> = index.lookup("s").iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(ids, ["a", "b"]);
        assert_eq!(index.prior_baseline("s").entity, Some("a".into()));
    }

    #[test]
    fn top_k_pruning() {
        let pops = [100, 90, 50, 40, 10, 5];
        let kb = KnowledgeBase::new(
            pops.iter()
                .enumerate()
                .map(|(i, &p)| ent(&format!("e{i}"), &["amb"], p))
                .collect(),
        )
        .unwrap();
        let index = AliasIndex::build(&kb);
        let set = index.generate_candidates("AMB", 5, false);
        let ids: Vec<_> = set.entities.iter().map(EntityId::as_str).collect();
        assert_eq!(ids, ["e0", "e1", "e2", "e3", "e4"]);
        assert_eq!(set.len(), 5);
    }

    #[test]
    fn unknown_surface_yields_only_nil() {
        let index = AliasIndex::build(&KnowledgeBase::default());
        let set = index.generate_candidates("nobody", 5, true);
        assert!(set.entities.is_empty());
        assert_eq!(set.len(), 1);
        assert_eq!(set.option(0), CandidateOption::Nil);
        assert!(index.generate_candidates("nobody", 5, false).is_empty());
    }

    #[test]
    fn prior_examples() {
        let kb = KnowledgeBase::new(vec![
            ent("solo", &["only"], 7),
            ent("big", &["pair"], 3),
            ent("small", &["pair"], 1),
        ])
        .unwrap();
        let index = AliasIndex::build(&kb);
        let p = index.prior_baseline("only");
        assert_eq!(p.entity, Some("solo".into()));
        assert_eq!(p.probability, 1.0);
        let p = index.prior_baseline("pair");
        assert_eq!(p.entity, Some("big".into()));
        assert_eq!(p.probability, 0.75);
        let p = index.prior_baseline("missing");
        assert_eq!(p.entity, None);
        assert_eq!(p.probability, 0.0);
    }

    #[test]
    fn gold_injection_replaces_last() {
        let mut set = CandidateSet {
            surface: "s".into(),
            entities: vec!["a".into(), "b".into()],
            includes_nil: true,
        };
        set.inject_gold(&"z".into(), 2);
        assert_eq!(set.entities, vec![EntityId::from("a"), EntityId::from("z")]);
        set.inject_gold(&"a".into(), 2);
        assert_eq!(set.entities.len(), 2);
        let mut short = CandidateSet {
            surface: "s".into(),
            entities: vec!["a".into()],
            includes_nil: false,
        };
        short.inject_gold(&"z".into(), 5);
        assert_eq!(short.entities.len(), 2);
        assert_eq!(short.index_of(&CandidateOption::Entity("z".into())), Some(1));
    }

    #[test]
    fn kb_jsonl_round_trip() {
        let kb = KnowledgeBase::new(vec![ent("a", &["x", "y"], 4)]).unwrap();
        let mut buf = Vec::new();
        kb.write_jsonl(&mut buf).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.contains("\"name\":\"x\""));
        let back = KnowledgeBase::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.entities(), kb.entities());
        assert!(matches!(
            KnowledgeBase::read_jsonl("{\"id\":1}\n".as_bytes()),
            Err(Error::Format(_))
        ));
    }
}
