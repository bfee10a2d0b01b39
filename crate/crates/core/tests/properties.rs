use std::collections::BTreeSet;
use std::rc::Rc;

use dynkc::kg::{hop_sets, raw_context, raw_context_with, ContextOptions, EntityId, KnowledgeGraph};
use dynkc::numerics::{grad_check, ParamStore, Tape, Tensor};
use dynkc::pipeline::Dataset;
use dynkc::pretrain::{build_batch, PretrainConfig};
use dynkc::rng::substream;
use dynkc::synth::{gen_synth, SynthConfig};
use dynkc::text::{insert_markers, tokenize, Gazetteer, MarkerTask, Span};
use proptest::prelude::*;

fn graph(n: usize, edges: &[(usize, usize, usize)]) -> KnowledgeGraph {
    let mut kg = KnowledgeGraph::new();
    for i in 0..n {
        kg.add_entity(&format!("e{i}")).unwrap();
    }
    for &(h, r, t) in edges {
        kg.add_triple(&format!("e{}", h % n), &format!("r{r}"), &format!("e{}", t % n)).unwrap();
    }
    kg
}

fn edges() -> impl Strategy<Value = (usize, Vec<(usize, usize, usize)>)> {
    (1usize..40).prop_flat_map(|n| (Just(n), prop::collection::vec((0..n, 0usize..3, 0..n), 0..80)))
}

proptest! {
    #[test]
    fn hop_sets_partition_the_reachable_ball((n, e) in edges(), k in 0usize..4, c in 0usize..40) {
        let kg = graph(n, &e);
        let m = EntityId((c % n) as u32);
        let sets = hop_sets(&kg, m, k).unwrap();
        prop_assert_eq!(sets.len(), k + 1);
        prop_assert_eq!(&sets[0], &BTreeSet::from([m]));
        let mut seen = BTreeSet::new();
        for s in &sets {
            for x in s {
                prop_assert!(seen.insert(*x), "entity in two hop sets");
            }
        }
        // Growing K only appends sets.
        let more = hop_sets(&kg, m, k + 1).unwrap();
        prop_assert_eq!(&more[..=k], &sets[..]);
    }

    #[test]
    fn context_triples_stay_inside_the_ball((n, e) in edges(), k in 0usize..3, c in 0usize..40) {
        let kg = graph(n, &e);
        let ctx = raw_context(&kg, EntityId((c % n) as u32), k).unwrap();
        let members: BTreeSet<EntityId> = ctx.hop_sets.iter().flatten().copied().collect();
        for &t in &ctx.context_triples {
            let tr = kg.triple(t);
            prop_assert!(members.contains(&tr.head) && members.contains(&tr.tail));
        }
        let incident: usize = ctx.neighbor_lists.values().map(Vec::len).sum();
        prop_assert_eq!(incident, 2 * ctx.context_triples.len());
    }

    #[test]
    fn capped_hops_respect_the_cap((n, e) in edges(), cap in 1usize..5, seed in 0u64..5) {
        let kg = graph(n, &e);
        let opts = ContextOptions { k: 2, max_neighbors_per_hop: Some(cap), seed };
        let a = raw_context_with(&kg, EntityId(0), &opts).unwrap();
        prop_assert!(a.hop_sets.iter().skip(1).all(|s| s.len() <= cap));
        prop_assert_eq!(a, raw_context_with(&kg, EntityId(0), &opts).unwrap());
    }

    #[test]
    fn segment_softmax_groups_sum_to_one(
        vals in prop::collection::vec(-30.0f64..30.0, 1..30),
        groups in 1usize..5,
    ) {
        let seg: Rc<[usize]> = (0..vals.len()).map(|i| i % groups).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::column(vals.clone())).unwrap();
        let y = tape.segment_softmax(x, seg.clone(), groups).unwrap();
        let out = tape.value(y).data().to_vec();
        for g in 0..groups.min(vals.len()) {
            let s: f64 = out.iter().zip(seg.iter()).filter(|(_, &sg)| sg == g).map(|(v, _)| v).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn segment_ops_gradients() {
    let mut store = ParamStore::new();
    let mut rng = substream(3, "seg");
    let x = store.add("x", Tensor::uniform(7, 1, 2.0, &mut rng)).unwrap();
    let m = store.add("m", Tensor::uniform(7, 3, 1.0, &mut rng)).unwrap();
    let seg: Rc<[usize]> = Rc::from(vec![0, 1, 0, 2, 1, 0, 2]);
    let report = grad_check(&store, 1e-5, 1e-6, |s, t| {
        let xv = t.param(s, x)?;
        let mv = t.param(s, m)?;
        let w = t.segment_softmax(xv, seg.clone(), 3)?;
        let wm = t.mul_col(mv, w)?;
        let agg = t.segment_sum(wm, seg.clone(), 3)?;
        let sq = t.mul(agg, agg)?;
        t.sum(sq)
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn corruption_rates_match_configuration() {
    let world = gen_synth(&SynthConfig::default(), 2).unwrap();
    let ds = Dataset::from_world(&world).unwrap();
    let cfg = PretrainConfig::default();
    let positions: Vec<usize> = (0..ds.texts.len()).collect();
    let batch = build_batch(&ds.texts, &positions, &ds.vocab, ds.kg.num_entities(), &cfg, 2, 0).unwrap();
    assert!(batch.num_alignments() >= 1000);
    assert!((batch.dea_mask_rate() - 0.15).abs() <= 0.02, "{}", batch.dea_mask_rate());
    // Rounded per sentence and at least one per sentence, so only roughly 15%.
    let mlm = batch.mlm_rate(&ds.vocab);
    assert!((0.12..=0.25).contains(&mlm), "{mlm}");
    for ex in &batch.examples {
        assert_eq!(ex.alignments.len(), ex.input.mentions.len());
        for c in &ex.candidates {
            assert_eq!(c.len(), 16);
            assert_eq!(c.iter().collect::<BTreeSet<_>>().len(), 16);
        }
    }
}

#[test]
fn tokenize_then_mark_round_trips_spans() {
    let world = gen_synth(&SynthConfig::default(), 4).unwrap();
    let ds = Dataset::from_world(&world).unwrap();
    let gaz = Gazetteer::from_kg(&ds.kg);
    for (rec, at) in ds.records.iter().zip(&ds.texts).take(100) {
        let tok = tokenize(&rec.text, &ds.vocab, &gaz);
        assert_eq!(tok.tokens, at.tokens);
        assert_eq!(tok.mentions, at.mentions);
        let target = at.mentions[0].span;
        let marked = insert_markers(at, &ds.vocab, MarkerTask::EntityTyping { target }).unwrap();
        assert_eq!(marked.len(), at.len() + 1);
        assert_eq!(marked.mentions[0].span, Span::new(target.start + 1, target.end + 1));
        assert!(insert_markers(&marked, &ds.vocab, MarkerTask::EntityTyping { target: marked.mentions[0].span }).is_err());
    }
}
