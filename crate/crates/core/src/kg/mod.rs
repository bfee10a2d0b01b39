//! Knowledge graph storage, loading and K-hop raw context construction.

mod context;

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::hash_str;

pub use context::{hop_sets, raw_context, raw_context_with, ContextOptions, Direction, Neighbor, RawContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct EntityId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct RelationId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct TripleId(pub u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TripleId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
}

/// Dense string ↔ id map, ids assigned in first-seen order.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    names: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    pub fn intern(&mut self, name: &str) -> u32 {
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = self.names.len() as u32;
        self.names.push(name.to_string());
        self.ids.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, name: &str) -> Option<u32> {
        self.ids.get(name).copied()
    }

    pub fn name(&self, id: u32) -> &str {
        &self.names[id as usize]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct LineError {
    pub line: usize,
    pub msg: String,
}

/// Summary written next to a loaded graph.
#[derive(Clone, Debug, Default, Serialize, PartialEq)]
pub struct LoadReport {
    pub lines: usize,
    pub entities: usize,
    pub relations: usize,
    pub triples: usize,
    pub duplicates: usize,
    pub self_loops: usize,
    pub line_errors: Vec<LineError>,
}

/// Immutable after construction; every query is a pure function.
#[derive(Clone, Debug, Default)]
pub struct KnowledgeGraph {
    entities: Vocab,
    relations: Vocab,
    triples: Vec<Triple>,
    seen: HashSet<Triple>,
    out_index: Vec<Vec<TripleId>>,
    in_index: Vec<Vec<TripleId>>,
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_entity(&mut self, name: &str) -> Result<EntityId> {
        if name.is_empty() {
            return Err(Error::invalid("kg", "empty entity name"));
        }
        let id = self.entities.intern(name);
        if self.out_index.len() < self.entities.len() {
            self.out_index.push(Vec::new());
            self.in_index.push(Vec::new());
        }
        Ok(EntityId(id))
    }

    pub fn add_relation(&mut self, name: &str) -> Result<RelationId> {
        if name.is_empty() {
            return Err(Error::invalid("kg", "empty relation name"));
        }
        Ok(RelationId(self.relations.intern(name)))
    }

    /// Inserts a triple by name. Returns `false` when it was already present.
    pub fn add_triple(&mut self, head: &str, relation: &str, tail: &str) -> Result<bool> {
        let h = self.add_entity(head)?;
        let r = self.add_relation(relation)?;
        let t = self.add_entity(tail)?;
        Ok(self.insert(Triple {
            head: h,
            relation: r,
            tail: t,
        }))
    }

    fn insert(&mut self, triple: Triple) -> bool {
        if !self.seen.insert(triple) {
            return false;
        }
        let id = TripleId(self.triples.len() as u32);
        self.triples.push(triple);
        self.out_index[triple.head.index()].push(id);
        self.in_index[triple.tail.index()].push(id);
        true
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn num_triples(&self) -> usize {
        self.triples.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn triple(&self, id: TripleId) -> Triple {
        self.triples[id.index()]
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.seen.contains(t)
    }

    pub fn entity_id(&self, name: &str) -> Option<EntityId> {
        self.entities.get(name).map(EntityId)
    }

    pub fn require_entity(&self, name: &str) -> Result<EntityId> {
        self.entity_id(name)
            .ok_or_else(|| Error::UnknownEntity(name.to_string()))
    }

    pub fn relation_id(&self, name: &str) -> Option<RelationId> {
        self.relations.get(name).map(RelationId)
    }

    pub fn entity_name(&self, id: EntityId) -> &str {
        self.entities.name(id.0)
    }

    pub fn relation_name(&self, id: RelationId) -> &str {
        self.relations.name(id.0)
    }

    pub fn entity_names(&self) -> &[String] {
        self.entities.names()
    }

    pub fn relation_names(&self) -> &[String] {
        self.relations.names()
    }

    pub fn has_entity(&self, id: EntityId) -> bool {
        id.index() < self.entities.len()
    }

    /// Triples with `e` as head.
    pub fn outgoing(&self, e: EntityId) -> &[TripleId] {
        &self.out_index[e.index()]
    }

    /// Triples with `e` as tail.
    pub fn incoming(&self, e: EntityId) -> &[TripleId] {
        &self.in_index[e.index()]
    }

    /// Content hash over vocabularies and triples, in id order.
    pub fn content_hash(&self) -> String {
        let mut s = String::new();
        for n in self.entities.names() {
            s.push_str(n);
            s.push('\n');
        }
        s.push('\u{1}');
        for n in self.relations.names() {
            s.push_str(n);
            s.push('\n');
        }
        s.push('\u{1}');
        for t in &self.triples {
            s.push_str(&format!("{} {} {}\n", t.head.0, t.relation.0, t.tail.0));
        }
        hash_str(&s)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for t in &self.triples {
            out.push_str(self.entity_name(t.head));
            out.push('\t');
            out.push_str(self.relation_name(t.relation));
            out.push('\t');
            out.push_str(self.entity_name(t.tail));
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str, source: &str) -> Result<(Self, LoadReport)> {
        parse(text, source, false)
    }

    /// Like [`parse_tsv`](Self::parse_tsv) but skips malformed lines and
    /// records them in the report instead of failing.
    pub fn parse_tsv_lenient(text: &str, source: &str) -> Result<(Self, LoadReport)> {
        parse(text, source, true)
    }
}

fn parse(text: &str, source: &str, lenient: bool) -> Result<(KnowledgeGraph, LoadReport)> {
    let mut kg = KnowledgeGraph::new();
    let mut report = LoadReport::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        report.lines = line_no;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let problem = if fields.len() != 3 {
            Some(format!("expected 3 tab-separated fields, found {}", fields.len()))
        } else if fields[0].is_empty() || fields[2].is_empty() {
            Some("empty entity name".to_string())
        } else if fields[1].is_empty() {
            Some("empty relation name".to_string())
        } else {
            None
        };
        if let Some(msg) = problem {
            if lenient {
                report.line_errors.push(LineError { line: line_no, msg });
                continue;
            }
            return Err(Error::Parse {
                path: source.to_string(),
                line: line_no,
                msg,
            });
        }
        if fields[0] == fields[2] {
            report.self_loops += 1;
        }
        if !kg.add_triple(fields[0], fields[1], fields[2])? {
            report.duplicates += 1;
        }
    }
    report.entities = kg.num_entities();
    report.relations = kg.num_relations();
    report.triples = kg.num_triples();
    Ok((kg, report))
}

/// Reads a `head<TAB>relation<TAB>tail` file.
pub fn load_triples(path: &Path) -> Result<(KnowledgeGraph, LoadReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string(), false)
}

pub fn load_triples_lenient(path: &Path) -> Result<(KnowledgeGraph, LoadReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, &path.display().to_string(), true)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file() {
        let (kg, report) = KnowledgeGraph::parse_tsv("", "t").unwrap();
        assert_eq!(kg.num_entities(), 0);
        assert_eq!(kg.num_triples(), 0);
        assert_eq!(report.duplicates, 0);
    }

    #[test]
    fn three_lines_four_entities() {
        let text = "a\tr\tb\n# comment\n\nb\ts\tc\nc\tr\td\n";
        let (kg, report) = KnowledgeGraph::parse_tsv(text, "t").unwrap();
        assert_eq!(kg.num_triples(), 3);
        assert_eq!(kg.num_entities(), 4);
        assert_eq!(kg.num_relations(), 2);
        assert_eq!(report.triples, 3);
        assert_eq!(kg.entity_names(), &["a", "b", "c", "d"]);
    }

    #[test]
    fn duplicate_line_counted() {
        let (kg, report) = KnowledgeGraph::parse_tsv("a\tr\tb\na\tr\tb\n", "t").unwrap();
        assert_eq!(kg.num_triples(), 1);
        assert_eq!(report.duplicates, 1);
    }

    #[test]
    fn parallel_edges_are_distinct() {
        let (kg, _) = KnowledgeGraph::parse_tsv("a\tr\tb\na\ts\tb\n", "t").unwrap();
        assert_eq!(kg.num_triples(), 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = KnowledgeGraph::parse_tsv("a\tr\tb\nbroken line\n", "f.tsv").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e:?}"),
        }
        assert!(KnowledgeGraph::parse_tsv("\tr\tb\n", "f").is_err());
        assert!(KnowledgeGraph::parse_tsv("a\t\tb\n", "f").is_err());
    }

    #[test]
    fn lenient_records_errors() {
        let (kg, report) =
            KnowledgeGraph::parse_tsv_lenient("a\tr\tb\nbad\nc\tr\t\n", "f").unwrap();
        assert_eq!(kg.num_triples(), 1);
        assert_eq!(report.line_errors.len(), 2);
        assert_eq!(report.line_errors[0].line, 2);
    }

    #[test]
    fn indexes_match_triples() {
        let (kg, _) = KnowledgeGraph::parse_tsv("a\tr\tb\nb\tr\ta\na\ts\ta\n", "t").unwrap();
        let a = kg.entity_id("a").unwrap();
        assert_eq!(kg.outgoing(a).len(), 2);
        assert_eq!(kg.incoming(a).len(), 2);
        for (i, t) in kg.triples().iter().enumerate() {
            assert!(kg.outgoing(t.head).contains(&TripleId(i as u32)));
            assert!(kg.incoming(t.tail).contains(&TripleId(i as u32)));
        }
    }
}
