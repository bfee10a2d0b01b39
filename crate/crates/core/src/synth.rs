//! Seeded synthetic world: a small typed knowledge graph, a templated
//! corpus over it, triple-relevance annotations and relation labels, some
//! of which are only recoverable through a 2-hop path.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph, Triple, TripleId};
use crate::rng::{substream, Rng as Chacha};
use crate::tasks::SelectionGold;
use crate::text::{split_words, to_jsonl, CorpusRecord, MentionRecord};

pub const TRIPLES_FILE: &str = "triples.tsv";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const SELECTION_FILE: &str = "selection_gold.jsonl";
pub const RELATION_FILE: &str = "relation_gold.jsonl";

const INSTANCE_OF: &str = "instance_of";

/// Cue phrases per relation; a sentence using one expresses that relation.
const CUES: [(&str, [&str; 2]); 10] = [
    ("instance_of", ["is a", "is an example of a"]),
    ("born_in", ["was born in", "is a native of"]),
    ("lives_in", ["lives in", "resides in"]),
    ("educated_at", ["studied at", "graduated from"]),
    ("works_for", ["works for", "is employed by"]),
    ("located_in", ["is located in", "lies in"]),
    ("citizen_of", ["is a citizen of", "holds citizenship of"]),
    ("founded_by", ["was founded by", "was started by"]),
    ("spouse_of", ["is married to", "is the spouse of"]),
    ("field_of_work", ["researches", "works on"]),
];

const NEUTRAL_PAIR: [&str; 3] = [
    "{h} and {t} are related .",
    "{h} is connected to {t} .",
    "there is a link between {h} and {t} .",
];

const NEUTRAL_SINGLE: [&str; 3] = ["{h} is well known .", "people often talk about {h} .", "we read about {h} today ."];

/// Relation paths whose composition is planted as a label.
const COMPOSITES: [(&str, &str); 5] = [
    ("born_in", "located_in"),
    ("lives_in", "located_in"),
    ("works_for", "located_in"),
    ("educated_at", "located_in"),
    ("founded_by", "born_in"),
];

const PERSON_SUBTYPES: [&str; 3] = ["scientist", "artist", "athlete"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub persons: usize,
    pub cities: usize,
    pub countries: usize,
    pub companies: usize,
    pub universities: usize,
    pub fields: usize,
    pub sentences: usize,
    /// Sentence-type proportions; the remainder are cue sentences.
    pub single_frac: f64,
    pub double_cue_frac: f64,
    pub neutral_direct_frac: f64,
    pub two_hop_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            persons: 100,
            cities: 35,
            countries: 8,
            companies: 20,
            universities: 12,
            fields: 10,
            sentences: 500,
            single_frac: 0.08,
            double_cue_frac: 0.08,
            neutral_direct_frac: 0.08,
            two_hop_frac: 0.30,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationGold {
    pub sentence_id: usize,
    pub head: MentionRecord,
    pub tail: MentionRecord,
    pub label: String,
    /// Length of the shortest KG path carrying the label.
    pub hops: usize,
}

#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub kg: KnowledgeGraph,
    pub corpus: Vec<CorpusRecord>,
    pub selection: Vec<SelectionGold>,
    pub relations: Vec<RelationGold>,
}

fn pseudo_words<R: Rng + ?Sized>(n: usize, taken: &mut HashSet<String>, rng: &mut R) -> Vec<String> {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syll = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syll {
            w.push(C[rng.gen_range(0..C.len())] as char);
            w.push(V[rng.gen_range(0..V.len())] as char);
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct Builder {
    kg: KnowledgeGraph,
}

impl Builder {
    fn add(&mut self, h: &str, r: &str, t: &str) -> Result<()> {
        self.kg.add_triple(h, r, t)?;
        Ok(())
    }
}

fn build_kg(cfg: &SynthConfig, rng: &mut Chacha) -> Result<KnowledgeGraph> {
    let mut taken: HashSet<String> = CUES
        .iter()
        .flat_map(|(_, c)| c.iter().flat_map(|p| split_words(p)))
        .chain(NEUTRAL_PAIR.iter().chain(&NEUTRAL_SINGLE).flat_map(|t| split_words(t)))
        .collect();
    let types = ["person", "city", "country", "company", "university", "field"];
    taken.extend(types.iter().chain(&PERSON_SUBTYPES).map(|s| s.to_string()));
    let persons = pseudo_words(cfg.persons, &mut taken, rng);
    let cities = pseudo_words(cfg.cities, &mut taken, rng);
    let countries = pseudo_words(cfg.countries, &mut taken, rng);
    let companies = pseudo_words(cfg.companies, &mut taken, rng);
    let universities = pseudo_words(cfg.universities, &mut taken, rng);
    let fields = pseudo_words(cfg.fields, &mut taken, rng);
    let mut b = Builder { kg: KnowledgeGraph::new() };
    let pick = |v: &Vec<String>, rng: &mut Chacha| v[rng.gen_range(0..v.len())].clone();

    for (group, ty) in [
        (&persons, "person"),
        (&cities, "city"),
        (&countries, "country"),
        (&companies, "company"),
        (&universities, "university"),
        (&fields, "field"),
    ] {
        for e in group {
            b.add(e, INSTANCE_OF, ty)?;
        }
    }
    for p in &persons {
        if rng.gen_bool(0.4) {
            let sub = PERSON_SUBTYPES[rng.gen_range(0..PERSON_SUBTYPES.len())];
            b.add(p, INSTANCE_OF, sub)?;
        }
    }
    for c in &cities {
        let k = pick(&countries, rng);
        b.add(c, "located_in", &k)?;
    }
    for u in &universities {
        let c = pick(&cities, rng);
        b.add(u, "located_in", &c)?;
    }
    for o in &companies {
        let c = pick(&cities, rng);
        b.add(o, "located_in", &c)?;
        let p = pick(&persons, rng);
        b.add(o, "founded_by", &p)?;
    }
    for p in &persons {
        let c = pick(&cities, rng);
        b.add(p, "born_in", &c)?;
        for (rel, pool, prob) in [
            ("lives_in", &cities, 0.5),
            ("educated_at", &universities, 0.5),
            ("works_for", &companies, 0.5),
            ("citizen_of", &countries, 0.4),
            ("field_of_work", &fields, 0.4),
        ] {
            if rng.gen_bool(prob) {
                let t = pick(pool, rng);
                b.add(p, rel, &t)?;
            }
        }
    }
    let mut shuffled = persons.clone();
    shuffled.shuffle(rng);
    for pair in shuffled.chunks(2).take(15) {
        if let [a, c] = pair {
            b.add(a, "spouse_of", c)?;
        }
    }
    Ok(b.kg)
}

fn cue_phrase(rel: &str, rng: &mut Chacha) -> &'static str {
    let (_, phrases) = CUES.iter().find(|(r, _)| *r == rel).expect("every relation has cues");
    phrases[rng.gen_range(0..phrases.len())]
}

/// Renders `template` (with `{h}`, `{t}`, `{x}` slots) and records mention
/// spans in `[CLS]`-prefixed token positions.
fn render(template: &str, slots: &[(&str, &str)]) -> (String, Vec<MentionRecord>) {
    let mut words = Vec::new();
    let mut mentions = Vec::new();
    for w in template.split_whitespace() {
        match slots.iter().find(|(k, _)| *k == w) {
            Some((_, name)) => {
                let pos = words.len() + 1;
                mentions.push(MentionRecord {
                    start: pos,
                    end: pos + 1,
                    entity: name.to_string(),
                });
                words.push(name.to_string());
            }
            None => words.push(w.to_string()),
        }
    }
    (words.join(" "), mentions)
}

fn linked(kg: &KnowledgeGraph, a: EntityId, b: EntityId) -> bool {
    kg.outgoing(a).iter().any(|&t| kg.triple(t).tail == b) || kg.incoming(a).iter().any(|&t| kg.triple(t).head == b)
}

/// Every `(h, label, t)` with a planted 2-hop path and no direct edge.
fn two_hop_paths(kg: &KnowledgeGraph) -> Vec<(EntityId, String, EntityId)> {
    let mut out = BTreeSet::new();
    for (r1, r2) in COMPOSITES {
        let (Some(r1id), Some(r2id)) = (kg.relation_id(r1), kg.relation_id(r2)) else {
            continue;
        };
        for t1 in kg.triples().iter().filter(|t| t.relation == r1id) {
            for &t2 in kg.outgoing(t1.tail) {
                let t2 = kg.triple(t2);
                if t2.relation == r2id && t2.tail != t1.head && !linked(kg, t1.head, t2.tail) {
                    out.insert((t1.head, format!("{r1}/{r2}"), t2.tail));
                }
            }
        }
    }
    out.into_iter().collect()
}

pub fn gen_synth(cfg: &SynthConfig, seed: u64) -> Result<SyntheticWorld> {
    let mut rng = substream(seed, "kg-gen");
    let kg = build_kg(cfg, &mut rng)?;
    let mut rng = substream(seed, "corpus-gen");
    let inst = kg.relation_id(INSTANCE_OF).expect("instance_of present");
    let factual: Vec<TripleId> = (0..kg.num_triples() as u32)
        .map(TripleId)
        .filter(|&t| kg.triple(t).relation != inst)
        .collect();
    let all: Vec<TripleId> = (0..kg.num_triples() as u32).map(TripleId).collect();
    let paths = two_hop_paths(&kg);
    if paths.is_empty() {
        return Err(Error::Config("synthetic graph has no 2-hop paths to plant".into()));
    }
    let typed: Vec<EntityId> = kg
        .triples()
        .iter()
        .filter(|t| t.relation == inst)
        .map(|t| t.head)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();

    // Type entities are hubs; their mentions get no relevance annotation.
    let typed_set: BTreeSet<EntityId> = typed.iter().copied().collect();
    let n = cfg.sentences;
    let count = |f: f64| (f * n as f64).round() as usize;
    let (n_single, n_double, n_direct, n_two) = (
        count(cfg.single_frac),
        count(cfg.double_cue_frac),
        count(cfg.neutral_direct_frac),
        count(cfg.two_hop_frac),
    );
    let n_cue = n
        .checked_sub(n_single + n_double + n_direct + n_two)
        .ok_or_else(|| Error::Config("sentence-type fractions exceed 1".into()))?;
    let mut kinds: Vec<u8> = [(0u8, n_single), (1, n_cue), (2, n_double), (3, n_direct), (4, n_two)]
        .iter()
        .flat_map(|&(k, c)| std::iter::repeat_n(k, c))
        .collect();
    kinds.shuffle(&mut rng);

    let name = |e: EntityId| kg.entity_name(e).to_string();
    let mut corpus = Vec::with_capacity(n);
    let mut selection = Vec::new();
    let mut relations = Vec::new();
    // Gold for one mention: its incident triples carrying a cued relation.
    let gold_for = |e: EntityId, rels: &BTreeSet<&str>| -> Vec<u32> {
        let mut ids: Vec<u32> = kg
            .outgoing(e)
            .iter()
            .chain(kg.incoming(e))
            .filter(|&&t| rels.contains(kg.relation_name(kg.triple(t).relation)))
            .map(|t| t.0)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        ids.sort_unstable();
        ids
    };

    for (sid, kind) in kinds.into_iter().enumerate() {
        match kind {
            0 => {
                let e = typed[rng.gen_range(0..typed.len())];
                let tpl = NEUTRAL_SINGLE[rng.gen_range(0..NEUTRAL_SINGLE.len())];
                let (text, mentions) = render(tpl, &[("{h}", &name(e))]);
                corpus.push(CorpusRecord { text, mentions });
            }
            1 => {
                let t: Triple = kg.triple(all[rng.gen_range(0..all.len())]);
                let rel = kg.relation_name(t.relation);
                let tpl = format!("{{h}} {} {{t}} .", cue_phrase(rel, &mut rng));
                let (text, mentions) = render(&tpl, &[("{h}", &name(t.head)), ("{t}", &name(t.tail))]);
                let rels = BTreeSet::from([rel]);
                for e in [t.head, t.tail].into_iter().filter(|e| typed_set.contains(e)) {
                    selection.push(SelectionGold {
                        sentence_id: sid,
                        mention_entity: name(e),
                        relevant_triples: gold_for(e, &rels),
                    });
                }
                relations.push(RelationGold {
                    sentence_id: sid,
                    head: mentions[0].clone(),
                    tail: mentions[1].clone(),
                    label: rel.to_string(),
                    hops: 1,
                });
                corpus.push(CorpusRecord { text, mentions });
            }
            2 => {
                // Subject with two distinct facts of different relations.
                let (t1, t2) = loop {
                    let t1 = kg.triple(factual[rng.gen_range(0..factual.len())]);
                    let others: Vec<Triple> = kg
                        .outgoing(t1.head)
                        .iter()
                        .map(|&t| kg.triple(t))
                        .filter(|t| t.relation != t1.relation && t.relation != inst && t.tail != t1.tail)
                        .collect();
                    if !others.is_empty() {
                        break (t1, others[rng.gen_range(0..others.len())]);
                    }
                };
                let (r1, r2) = (kg.relation_name(t1.relation), kg.relation_name(t2.relation));
                let tpl = format!(
                    "{{h}} {} {{t}} and {} {{x}} .",
                    cue_phrase(r1, &mut rng),
                    cue_phrase(r2, &mut rng)
                );
                let (text, mentions) = render(
                    &tpl,
                    &[("{h}", &name(t1.head)), ("{t}", &name(t1.tail)), ("{x}", &name(t2.tail))],
                );
                for (e, rels) in [
                    (t1.head, BTreeSet::from([r1, r2])),
                    (t1.tail, BTreeSet::from([r1])),
                    (t2.tail, BTreeSet::from([r2])),
                ] {
                    selection.push(SelectionGold {
                        sentence_id: sid,
                        mention_entity: name(e),
                        relevant_triples: gold_for(e, &rels),
                    });
                }
                relations.push(RelationGold {
                    sentence_id: sid,
                    head: mentions[0].clone(),
                    tail: mentions[1].clone(),
                    label: r1.to_string(),
                    hops: 1,
                });
                corpus.push(CorpusRecord { text, mentions });
            }
            3 => {
                let t = kg.triple(factual[rng.gen_range(0..factual.len())]);
                let tpl = NEUTRAL_PAIR[rng.gen_range(0..NEUTRAL_PAIR.len())];
                let (text, mentions) = render(tpl, &[("{h}", &name(t.head)), ("{t}", &name(t.tail))]);
                relations.push(RelationGold {
                    sentence_id: sid,
                    head: mentions[0].clone(),
                    tail: mentions[1].clone(),
                    label: kg.relation_name(t.relation).to_string(),
                    hops: 1,
                });
                corpus.push(CorpusRecord { text, mentions });
            }
            _ => {
                let (h, label, t) = paths[rng.gen_range(0..paths.len())].clone();
                let tpl = NEUTRAL_PAIR[rng.gen_range(0..NEUTRAL_PAIR.len())];
                let (text, mentions) = render(tpl, &[("{h}", &name(h)), ("{t}", &name(t))]);
                relations.push(RelationGold {
                    sentence_id: sid,
                    head: mentions[0].clone(),
                    tail: mentions[1].clone(),
                    label,
                    hops: 2,
                });
                corpus.push(CorpusRecord { text, mentions });
            }
        }
    }
    let two_hop = relations.iter().filter(|r| r.hops == 2).count();
    if !relations.is_empty() && (two_hop as f64) < 0.3 * relations.len() as f64 {
        return Err(Error::Config(format!(
            "only {two_hop} of {} relation examples need a 2-hop path; at least 30% required",
            relations.len()
        )));
    }
    Ok(SyntheticWorld {
        kg,
        corpus,
        selection,
        relations,
    })
}

impl SyntheticWorld {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            (TRIPLES_FILE, self.kg.to_tsv()),
            (CORPUS_FILE, to_jsonl(&self.corpus)?),
            (SELECTION_FILE, to_jsonl(&self.selection)?),
            (RELATION_FILE, to_jsonl(&self.relations)?),
        ];
        for (f, body) in files {
            let p = dir.join(f);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Type label vocabulary (targets of `instance_of`) and each entity's set.
pub fn typing_labels(kg: &KnowledgeGraph) -> (Vec<String>, BTreeMap<EntityId, BTreeSet<usize>>) {
    let Some(inst) = kg.relation_id(INSTANCE_OF) else {
        return (Vec::new(), BTreeMap::new());
    };
    let labels: Vec<String> = kg
        .triples()
        .iter()
        .filter(|t| t.relation == inst)
        .map(|t| kg.entity_name(t.tail).to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut per = BTreeMap::new();
    for t in kg.triples().iter().filter(|t| t.relation == inst) {
        let i = labels.binary_search_by(|l| l.as_str().cmp(kg.entity_name(t.tail))).expect("label listed");
        per.entry(t.head).or_insert_with(BTreeSet::new).insert(i);
    }
    (labels, per)
}

/// `train`, `dev` or `test` for a sentence id (80/10/10).
pub fn split_of(sentence_id: usize) -> &'static str {
    match sentence_id % 10 {
        0 => "test",
        1 => "dev",
        _ => "train",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_world_shape() {
        let w = gen_synth(&SynthConfig::default(), 7).unwrap();
        let (e, r, t) = (w.kg.num_entities(), w.kg.num_relations(), w.kg.num_triples());
        assert!((170..=230).contains(&e), "{e}");
        assert_eq!(r, 10);
        assert!((500..=750).contains(&t), "{t}");
        assert_eq!(w.corpus.len(), 500);
        for c in &w.corpus {
            assert!((1..=3).contains(&c.mentions.len()));
            let words = split_words(&c.text);
            for m in &c.mentions {
                assert_eq!(words[m.start - 1], m.entity);
            }
        }
    }

    #[test]
    fn deterministic() {
        let a = gen_synth(&SynthConfig::default(), 3).unwrap();
        let b = gen_synth(&SynthConfig::default(), 3).unwrap();
        assert_eq!(a.kg.to_tsv(), b.kg.to_tsv());
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.relations, b.relations);
    }

    #[test]
    fn two_hop_labels_have_no_direct_edge() {
        let w = gen_synth(&SynthConfig::default(), 11).unwrap();
        for r in w.relations.iter().filter(|r| r.hops == 2) {
            let h = w.kg.entity_id(&r.head.entity).unwrap();
            let t = w.kg.entity_id(&r.tail.entity).unwrap();
            assert!(!linked(&w.kg, h, t));
        }
    }
}
