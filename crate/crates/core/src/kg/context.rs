use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use serde::Serialize;

use super::{EntityId, KnowledgeGraph, RelationId, TripleId};
use crate::error::{Error, Result};
use crate::rng::substream;

/// Orientation of a triple as seen from the entity owning a neighbor list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `(neighbor, r, self)`
    Incoming,
    /// `(self, r, neighbor)`
    Outgoing,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Incoming => Direction::Outgoing,
            Direction::Outgoing => Direction::Incoming,
        }
    }

    /// `+1` for incoming, `-1` for outgoing: the sign applied to the relation
    /// vector in messages and keys.
    pub fn sign(self) -> f64 {
        match self {
            Direction::Incoming => 1.0,
            Direction::Outgoing => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Incoming => "incoming",
            Direction::Outgoing => "outgoing",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Neighbor {
    pub entity: EntityId,
    pub relation: RelationId,
    pub direction: Direction,
    pub triple: TripleId,
}

/// The K-hop sub-graph around one mentioned entity.
#[derive(Clone, Debug, PartialEq)]
pub struct RawContext {
    pub center: EntityId,
    pub hop_sets: Vec<BTreeSet<EntityId>>,
    pub context_triples: BTreeSet<TripleId>,
    /// Every entity of the context maps to its incident context triples.
    pub neighbor_lists: BTreeMap<EntityId, Vec<Neighbor>>,
}

impl RawContext {
    pub fn k(&self) -> usize {
        self.hop_sets.len() - 1
    }

    /// All context entities, sorted.
    pub fn entities(&self) -> Vec<EntityId> {
        self.neighbor_lists.keys().copied().collect()
    }

    pub fn neighbors(&self, e: EntityId) -> &[Neighbor] {
        self.neighbor_lists.get(&e).map_or(&[], Vec::as_slice)
    }

    pub fn center_neighbors(&self) -> &[Neighbor] {
        self.neighbors(self.center)
    }

    pub fn is_isolated(&self) -> bool {
        self.center_neighbors().is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextOptions {
    pub k: usize,
    /// Upper bound on the size of each hop set; larger sets are downsampled
    /// uniformly with a generator keyed by `(seed, center, hop)`.
    pub max_neighbors_per_hop: Option<usize>,
    pub seed: u64,
}

impl ContextOptions {
    pub fn exact(k: usize) -> Self {
        Self {
            k,
            max_neighbors_per_hop: None,
            seed: 0,
        }
    }
}

fn check_center(kg: &KnowledgeGraph, m: EntityId) -> Result<()> {
    if kg.has_entity(m) {
        Ok(())
    } else {
        Err(Error::UnknownEntity(format!("#{}", m.0)))
    }
}

fn expand(kg: &KnowledgeGraph, frontier: &BTreeSet<EntityId>, seen: &BTreeSet<EntityId>) -> BTreeSet<EntityId> {
    let mut next = BTreeSet::new();
    for &e in frontier {
        for &t in kg.outgoing(e) {
            let tail = kg.triple(t).tail;
            if !seen.contains(&tail) {
                next.insert(tail);
            }
        }
        for &t in kg.incoming(e) {
            let head = kg.triple(t).head;
            if !seen.contains(&head) {
                next.insert(head);
            }
        }
    }
    next
}

fn hop_sets_with(kg: &KnowledgeGraph, m: EntityId, opts: &ContextOptions) -> Result<Vec<BTreeSet<EntityId>>> {
    check_center(kg, m)?;
    let mut sets = vec![BTreeSet::from([m])];
    let mut seen = sets[0].clone();
    for hop in 1..=opts.k {
        let mut next = expand(kg, &sets[hop - 1], &seen);
        if let Some(cap) = opts.max_neighbors_per_hop {
            if next.len() > cap {
                let mut rng = substream(opts.seed, &format!("hop-cap/{}/{}", m.0, hop));
                let all: Vec<EntityId> = next.into_iter().collect();
                next = sample(&mut rng, all.len(), cap)
                    .into_iter()
                    .map(|i| all[i])
                    .collect();
            }
        }
        seen.extend(next.iter().copied());
        sets.push(next);
    }
    Ok(sets)
}

/// Entities exactly `i` undirected steps from `m`, for `i = 0..=k`.
pub fn hop_sets(kg: &KnowledgeGraph, m: EntityId, k: usize) -> Result<Vec<BTreeSet<EntityId>>> {
    hop_sets_with(kg, m, &ContextOptions::exact(k))
}

/// Every triple with both endpoints within `k` hops of `m`.
pub fn raw_context(kg: &KnowledgeGraph, m: EntityId, k: usize) -> Result<RawContext> {
    raw_context_with(kg, m, &ContextOptions::exact(k))
}

pub fn raw_context_with(kg: &KnowledgeGraph, m: EntityId, opts: &ContextOptions) -> Result<RawContext> {
    let hop_sets = hop_sets_with(kg, m, opts)?;
    let members: BTreeSet<EntityId> = hop_sets.iter().flatten().copied().collect();
    let mut context_triples = BTreeSet::new();
    for &e in &members {
        for &t in kg.outgoing(e) {
            if members.contains(&kg.triple(t).tail) {
                context_triples.insert(t);
            }
        }
    }
    let mut neighbor_lists: BTreeMap<EntityId, Vec<Neighbor>> =
        members.iter().map(|&e| (e, Vec::new())).collect();
    for &id in &context_triples {
        let t = kg.triple(id);
        neighbor_lists.get_mut(&t.tail).unwrap().push(Neighbor {
            entity: t.head,
            relation: t.relation,
            direction: Direction::Incoming,
            triple: id,
        });
        neighbor_lists.get_mut(&t.head).unwrap().push(Neighbor {
            entity: t.tail,
            relation: t.relation,
            direction: Direction::Outgoing,
            triple: id,
        });
    }
    Ok(RawContext {
        center: m,
        hop_sets,
        context_triples,
        neighbor_lists,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kg(lines: &[(&str, &str, &str)]) -> KnowledgeGraph {
        let mut kg = KnowledgeGraph::new();
        for (h, r, t) in lines {
            kg.add_triple(h, r, t).unwrap();
        }
        kg
    }

    fn ids(kg: &KnowledgeGraph, names: &[&str]) -> BTreeSet<EntityId> {
        names.iter().map(|n| kg.entity_id(n).unwrap()).collect()
    }

    #[test]
    fn isolated_center() {
        let mut g = kg(&[("x", "r", "y")]);
        let m = g.add_entity("m").unwrap();
        let sets = hop_sets(&g, m, 2).unwrap();
        assert_eq!(sets, vec![BTreeSet::from([m]), BTreeSet::new(), BTreeSet::new()]);
    }

    #[test]
    fn chain() {
        let g = kg(&[("a", "r", "b"), ("b", "r", "c")]);
        let a = g.entity_id("a").unwrap();
        let sets = hop_sets(&g, a, 2).unwrap();
        assert_eq!(sets, vec![ids(&g, &["a"]), ids(&g, &["b"]), ids(&g, &["c"])]);
        let ctx = raw_context(&g, a, 2).unwrap();
        assert_eq!(ctx.context_triples.len(), 2);
    }

    #[test]
    fn triangle() {
        let g = kg(&[("a", "r", "b"), ("b", "r", "c"), ("c", "r", "a")]);
        let a = g.entity_id("a").unwrap();
        let sets = hop_sets(&g, a, 2).unwrap();
        assert_eq!(sets, vec![ids(&g, &["a"]), ids(&g, &["b", "c"]), BTreeSet::new()]);
    }

    #[test]
    fn ring_internal_edge_included() {
        let g = kg(&[("m", "r", "x"), ("y", "r", "m"), ("x", "s", "y"), ("y", "s", "z")]);
        let m = g.entity_id("m").unwrap();
        let ctx = raw_context(&g, m, 1).unwrap();
        assert_eq!(ctx.context_triples.len(), 3);
        assert!(ctx.context_triples.contains(&TripleId(2)));
        assert!(!ctx.context_triples.contains(&TripleId(3)));
    }

    #[test]
    fn k_zero_keeps_only_self_loops() {
        let g = kg(&[("m", "r", "x"), ("m", "s", "m")]);
        let m = g.entity_id("m").unwrap();
        let ctx = raw_context(&g, m, 0).unwrap();
        assert_eq!(ctx.context_triples, BTreeSet::from([TripleId(1)]));
        let dirs: Vec<Direction> = ctx.center_neighbors().iter().map(|n| n.direction).collect();
        assert_eq!(dirs, vec![Direction::Incoming, Direction::Outgoing]);
    }

    #[test]
    fn unknown_center() {
        let g = kg(&[("a", "r", "b")]);
        assert!(matches!(hop_sets(&g, EntityId(99), 1), Err(Error::UnknownEntity(_))));
    }

    #[test]
    fn cap_downsamples_deterministically() {
        let mut g = KnowledgeGraph::new();
        for i in 0..20 {
            g.add_triple("hub", "r", &format!("n{i}")).unwrap();
        }
        let hub = g.entity_id("hub").unwrap();
        let opts = ContextOptions {
            k: 1,
            max_neighbors_per_hop: Some(5),
            seed: 3,
        };
        let a = raw_context_with(&g, hub, &opts).unwrap();
        let b = raw_context_with(&g, hub, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hop_sets[1].len(), 5);
        assert_eq!(a.context_triples.len(), 5);
    }
}
