use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single `(head, relation, tail)` fact.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl Triple {
    pub fn new(
        head: impl Into<String>,
        relation: impl Into<String>,
        tail: impl Into<String>,
    ) -> Self {
        Self {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
        }
    }

    fn validate(&self) -> std::result::Result<(), &'static str> {
        if self.head.trim().is_empty() {
            return Err("empty head");
        }
        if self.relation.trim().is_empty() {
            return Err("empty relation");
        }
        if self.tail.trim().is_empty() {
            return Err("empty tail");
        }
        Ok(())
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.head, self.relation, self.tail)
    }
}

/// Interned triple: indices into the graph's entity and relation vocabularies.
pub type TripleIds = (usize, usize, usize);

/// Deduplicated triple store with entity and relation vocabularies.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GraphData", into = "GraphData")]
pub struct KnowledgeGraph {
    entities: Vec<String>,
    relations: Vec<String>,
    entity_index: HashMap<String, usize>,
    relation_index: HashMap<String, usize>,
    triples: BTreeSet<TripleIds>,
}

#[derive(Serialize, Deserialize)]
struct GraphData {
    entities: Vec<String>,
    relations: Vec<String>,
    triples: Vec<TripleIds>,
}

impl TryFrom<GraphData> for KnowledgeGraph {
    type Error = Error;

    fn try_from(d: GraphData) -> Result<Self> {
        let mut g = KnowledgeGraph::new();
        for e in d.entities {
            g.register_entity(&e)?;
        }
        for r in d.relations {
            g.register_relation(&r)?;
        }
        for (h, r, t) in d.triples {
            if h >= g.entities.len() || t >= g.entities.len() || r >= g.relations.len() {
                return Err(Error::Validation(format!(
                    "triple ({h},{r},{t}) references unregistered ids"
                )));
            }
            g.triples.insert((h, r, t));
        }
        Ok(g)
    }
}

impl From<KnowledgeGraph> for GraphData {
    fn from(g: KnowledgeGraph) -> Self {
        GraphData {
            entities: g.entities,
            relations: g.relations,
            triples: g.triples.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub records: usize,
    pub new: usize,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_entity(&mut self, name: &str) -> Result<usize> {
        intern(&mut self.entities, &mut self.entity_index, name, "entity")
    }

    pub fn register_relation(&mut self, name: &str) -> Result<usize> {
        intern(
            &mut self.relations,
            &mut self.relation_index,
            name,
            "relation",
        )
    }

    /// Inserts a triple, registering its ids. Returns `true` if it was new.
    pub fn insert(&mut self, triple: &Triple) -> Result<bool> {
        triple.validate().map_err(|m| Error::Validation(m.into()))?;
        let h = self.register_entity(&triple.head)?;
        let r = self.register_relation(&triple.relation)?;
        let t = self.register_entity(&triple.tail)?;
        Ok(self.triples.insert((h, r, t)))
    }

    /// Ingests triples; either every record is valid and applied, or nothing is.
    pub fn ingest<I: IntoIterator<Item = Triple>>(&mut self, triples: I) -> Result<IngestReport> {
        let triples: Vec<Triple> = triples.into_iter().collect();
        for (i, t) in triples.iter().enumerate() {
            t.validate()
                .map_err(|m| Error::Validation(format!("record {}: {m}", i + 1)))?;
        }
        let mut new = 0;
        for t in &triples {
            if self.insert(t)? {
                new += 1;
            }
        }
        Ok(IngestReport {
            records: triples.len(),
            new,
        })
    }

    /// Reads `head<TAB>relation<TAB>tail` lines. Blank lines and lines starting
    /// with `#` are skipped. Parsing is all-or-nothing.
    pub fn ingest_tsv<R: BufRead>(&mut self, reader: R) -> Result<IngestReport> {
        let triples = parse_tsv(reader)?;
        self.ingest(triples)
    }

    pub fn write_tsv<W: Write>(&self, mut out: W) -> Result<()> {
        for t in self.triples() {
            writeln!(out, "{}\t{}\t{}", t.head, t.relation, t.tail)?;
        }
        Ok(())
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entity_index.get(name).copied()
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_index.get(name).copied()
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn relations(&self) -> &[String] {
        &self.relations
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains_ids(&self, ids: TripleIds) -> bool {
        self.triples.contains(&ids)
    }

    pub fn triple_ids(&self) -> impl Iterator<Item = TripleIds> + '_ {
        self.triples.iter().copied()
    }

    pub fn triples(&self) -> impl Iterator<Item = Triple> + '_ {
        self.triples
            .iter()
            .map(|&(h, r, t)| Triple::new(&self.entities[h], &self.relations[r], &self.entities[t]))
    }

    /// Triples mentioning any of the given entities, in store order.
    pub fn triples_touching<'a>(
        &'a self,
        entities: &'a BTreeSet<String>,
    ) -> impl Iterator<Item = Triple> + 'a {
        self.triples()
            .filter(move |t| entities.contains(&t.head) || entities.contains(&t.tail))
    }
}

fn intern(
    names: &mut Vec<String>,
    index: &mut HashMap<String, usize>,
    name: &str,
    what: &str,
) -> Result<usize> {
    if name.trim().is_empty() {
        return Err(Error::Validation(format!("empty {what} id")));
    }
    if let Some(&i) = index.get(name) {
        return Ok(i);
    }
    names.push(name.to_owned());
    index.insert(name.to_owned(), names.len() - 1);
    Ok(names.len() - 1)
}

pub fn parse_tsv<R: BufRead>(reader: R) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = trimmed.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        let t = Triple::new(cols[0].trim(), cols[1].trim(), cols[2].trim());
        t.validate()
            .map_err(|m| Error::Validation(format!("line {lineno}: {m}")))?;
        out.push(t);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ingest_and_dedup() {
        let mut g = KnowledgeGraph::new();
        let t = Triple::new("Statute X", "applies_to", "Contract Law");
        assert_eq!(g.ingest([t.clone()]).unwrap().new, 1);
        let again = g.ingest([t.clone()]).unwrap();
        assert_eq!((again.records, again.new), (1, 0));
        assert_eq!(g.len(), 1);
        assert_eq!(g.triples().next().unwrap(), t);
    }

    #[test]
    fn self_loops_are_allowed() {
        let mut g = KnowledgeGraph::new();
        assert!(g.insert(&Triple::new("A", "related_to", "A")).unwrap());
    }

    #[test]
    fn tsv_errors_name_the_line() {
        let mut g = KnowledgeGraph::new();
        let src = "# comment\nA\tcites\tB\n\nC\t\tD\n";
        match g.ingest_tsv(src.as_bytes()) {
            Err(Error::Validation(m)) => assert!(m.contains("line 4"), "{m}"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.is_empty(), "ingest must be all-or-nothing");

        match g.ingest_tsv("A\tcites\n".as_bytes()) {
            Err(Error::Parse { line: 1, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn serde_round_trip() {
        let mut g = KnowledgeGraph::new();
        g.ingest([
            Triple::new("A", "cites", "B"),
            Triple::new("B", "overruled_by", "C"),
        ])
        .unwrap();
        let s = serde_json::to_string(&g).unwrap();
        let back: KnowledgeGraph = serde_json::from_str(&s).unwrap();
        assert_eq!(back, g);
    }

    fn name() -> impl Strategy<Value = String> {
        "[A-Za-z][A-Za-z0-9 _]{0,6}[A-Za-z0-9]".prop_map(|s| s)
    }

    proptest! {
        #[test]
        fn ingest_then_export_is_the_deduplicated_set(
            triples in prop::collection::vec((name(), name(), name()), 1..30)
        ) {
            let triples: Vec<Triple> = triples.into_iter().map(|(h, r, t)| Triple::new(h, r, t)).collect();
            let mut g = KnowledgeGraph::new();
            g.ingest(triples.clone()).unwrap();
            let mut buf = Vec::new();
            g.write_tsv(&mut buf).unwrap();
            let exported: BTreeSet<Triple> = parse_tsv(buf.as_slice()).unwrap().into_iter().collect();
            let expected: BTreeSet<Triple> = triples.into_iter().collect();
            prop_assert_eq!(exported, expected);
        }
    }
}
