use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary};
use crate::error::{Error, Result};
use crate::kg::{EntityId, KnowledgeGraph};

/// Token span `[start, end)` in the `[CLS]`-prefixed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mention {
    pub span: Span,
    pub entity: EntityId,
}

/// A tokenised sentence with `[CLS]` at position 0 and linked mentions.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedText {
    pub tokens: Vec<TokenId>,
    /// Sorted by start, non-overlapping.
    pub mentions: Vec<Mention>,
    pub attention_mask: Vec<bool>,
}

impl AnnotatedText {
    pub fn new(tokens: Vec<TokenId>, mut mentions: Vec<Mention>) -> Result<Self> {
        mentions.sort_by_key(|m| m.span);
        let at = Self {
            attention_mask: vec![true; tokens.len()],
            tokens,
            mentions,
        };
        at.validate()?;
        Ok(at)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.attention_mask.len() != self.tokens.len() {
            return Err(Error::invalid("annotated_text", "mask length differs from tokens"));
        }
        if self.mentions.len() > self.tokens.len() {
            return Err(Error::invalid("annotated_text", "more mentions than tokens"));
        }
        let mut prev_end = 1;
        for m in &self.mentions {
            let Span { start, end } = m.span;
            if start == 0 {
                return Err(Error::invalid("annotated_text", "mention covers position 0"));
            }
            if start >= end || end > self.tokens.len() {
                return Err(Error::invalid(
                    "annotated_text",
                    format!("span {start}..{end} out of bounds for {} tokens", self.tokens.len()),
                ));
            }
            if start < prev_end {
                return Err(Error::invalid(
                    "annotated_text",
                    format!("span {start}..{end} overlaps previous mention"),
                ));
            }
            prev_end = end;
        }
        Ok(())
    }

    /// Number of unpadded positions.
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    /// Appends `[PAD]` tokens (masked out) up to `len`.
    pub fn pad_to(&self, len: usize, pad: TokenId) -> Self {
        let mut out = self.clone();
        while out.tokens.len() < len {
            out.tokens.push(pad);
            out.attention_mask.push(false);
        }
        out
    }

    pub fn mention_with_span(&self, span: Span) -> Option<usize> {
        self.mentions.iter().position(|m| m.span == span)
    }

    pub fn position_of(&self, token: TokenId) -> Option<usize> {
        self.tokens.iter().position(|&t| t == token)
    }

    /// Joins two sentences as `[CLS] a… [SEP] b…` (`b`'s own `[CLS]` dropped).
    pub fn pair(a: &Self, b: &Self, sep: TokenId) -> Result<Self> {
        let offset = a.tokens.len();
        let mut tokens = a.tokens.clone();
        tokens.push(sep);
        tokens.extend_from_slice(&b.tokens[1..]);
        let mut mentions = a.mentions.clone();
        mentions.extend(b.mentions.iter().map(|m| Mention {
            span: Span::new(m.span.start + offset, m.span.end + offset),
            entity: m.entity,
        }));
        Self::new(tokens, mentions)
    }
}

/// Splits on whitespace; punctuation characters become single tokens;
/// everything is lowercased.
pub fn split_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() || ch == '_' {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                words.push(ch.to_lowercase().collect());
            }
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

/// Exact-match surface form → entity lookup.
#[derive(Clone, Debug, Default)]
pub struct Gazetteer {
    forms: HashMap<Vec<String>, EntityId>,
    max_len: usize,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: &str, entity: EntityId) {
        let words = split_words(surface);
        if words.is_empty() {
            return;
        }
        self.max_len = self.max_len.max(words.len());
        self.forms.insert(words, entity);
    }

    /// One surface form per entity: its name with `_` read as a space.
    pub fn from_kg(kg: &KnowledgeGraph) -> Self {
        let mut g = Self::new();
        for (i, name) in kg.entity_names().iter().enumerate() {
            g.insert(&name.replace('_', " "), EntityId(i as u32));
        }
        g
    }

    pub fn len(&self) -> usize {
        self.forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forms.is_empty()
    }

    fn lookup(&self, words: &[String]) -> Option<EntityId> {
        self.forms.get(words).copied()
    }
}

/// Tokenises `text`, prepends `[CLS]` and links mentions by greedy
/// left-to-right longest match against `gazetteer`.
pub fn tokenize(text: &str, vocab: &Vocabulary, gazetteer: &Gazetteer) -> AnnotatedText {
    let words = split_words(text);
    let mut tokens = Vec::with_capacity(words.len() + 1);
    tokens.push(vocab.specials().cls);
    tokens.extend(words.iter().map(|w| vocab.id_or_unk(w)));
    let mut mentions = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let longest = gazetteer.max_len.min(words.len() - i);
        let hit = (1..=longest)
            .rev()
            .find_map(|len| gazetteer.lookup(&words[i..i + len]).map(|e| (len, e)));
        match hit {
            Some((len, entity)) => {
                mentions.push(Mention {
                    span: Span::new(i + 1, i + 1 + len),
                    entity,
                });
                i += len;
            }
            None => i += 1,
        }
    }
    AnnotatedText {
        attention_mask: vec![true; tokens.len()],
        tokens,
        mentions,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MarkerTask {
    EntityTyping { target: Span },
    RelationClassification { head: Span, tail: Span },
}

/// Inserts `[ENT]` before the typing target, or `[HD]`/`[TL]` before the
/// head/tail mentions, shifting every later span.
pub fn insert_markers(at: &AnnotatedText, vocab: &Vocabulary, task: MarkerTask) -> Result<AnnotatedText> {
    let sp = vocab.specials();
    if at.tokens.iter().any(|&t| sp.is_marker(t)) {
        return Err(Error::Marker("markers already inserted".into()));
    }
    let require = |span: Span| {
        at.mention_with_span(span)
            .map(|_| span)
            .ok_or_else(|| Error::Marker(format!("no mention with span {}..{}", span.start, span.end)))
    };
    let mut inserts: Vec<(usize, TokenId)> = match task {
        MarkerTask::EntityTyping { target } => vec![(require(target)?.start, sp.ent)],
        MarkerTask::RelationClassification { head, tail } => {
            if head == tail {
                return Err(Error::Marker("head and tail spans are identical".into()));
            }
            vec![(require(head)?.start, sp.hd), (require(tail)?.start, sp.tl)]
        }
    };
    inserts.sort_by_key(|a| std::cmp::Reverse(a.0));
    let mut out = at.clone();
    for (pos, tok) in inserts {
        out.tokens.insert(pos, tok);
        out.attention_mask.insert(pos, true);
        for m in &mut out.mentions {
            if m.span.start >= pos {
                m.span.start += 1;
                m.span.end += 1;
            }
        }
    }
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionRecord {
    pub start: usize,
    pub end: usize,
    pub entity: String,
}

/// One line of `corpus.jsonl`. Mention offsets index the `[CLS]`-prefixed
/// token sequence produced by [`split_words`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub text: String,
    pub mentions: Vec<MentionRecord>,
}

impl CorpusRecord {
    pub fn annotate(&self, vocab: &Vocabulary, kg: &KnowledgeGraph) -> Result<AnnotatedText> {
        let words = split_words(&self.text);
        let mut tokens = Vec::with_capacity(words.len() + 1);
        tokens.push(vocab.specials().cls);
        tokens.extend(words.iter().map(|w| vocab.id_or_unk(w)));
        let mentions = self
            .mentions
            .iter()
            .map(|m| {
                Ok(Mention {
                    span: Span::new(m.start, m.end),
                    entity: kg.require_entity(&m.entity)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        AnnotatedText::new(tokens, mentions)
    }
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusRecord>> {
    read_jsonl(path)
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

pub fn to_jsonl<T: Serialize>(items: &[T]) -> Result<String> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Vocabulary, KnowledgeGraph) {
        let mut kg = KnowledgeGraph::new();
        kg.add_triple("paris", "capital_of", "france").unwrap();
        kg.add_triple("new_york_city", "located_in", "usa").unwrap();
        kg.add_triple("york", "located_in", "england").unwrap();
        let vocab = Vocabulary::build(["paris", "new", "york", "city", "is", "big", "a", "b", "c"]);
        (vocab, kg)
    }

    #[test]
    fn single_known_word() {
        let (vocab, kg) = setup();
        let gaz = Gazetteer::from_kg(&kg);
        let at = tokenize("Paris", &vocab, &gaz);
        assert_eq!(at.len(), 2);
        assert_eq!(at.mentions.len(), 1);
        assert_eq!(at.mentions[0].entity, kg.entity_id("paris").unwrap());
        assert_eq!(at.mentions[0].span, Span::new(1, 2));
    }

    #[test]
    fn longest_match_wins() {
        let (vocab, kg) = setup();
        let gaz = Gazetteer::from_kg(&kg);
        let at = tokenize("New York City is big.", &vocab, &gaz);
        assert_eq!(at.mentions.len(), 1);
        assert_eq!(at.mentions[0].entity, kg.entity_id("new_york_city").unwrap());
        assert_eq!(at.mentions[0].span, Span::new(1, 4));
        assert_eq!(*at.tokens.last().unwrap(), vocab.specials().unk);
    }

    #[test]
    fn no_hits() {
        let (vocab, kg) = setup();
        let at = tokenize("it is big", &vocab, &Gazetteer::from_kg(&kg));
        assert!(at.mentions.is_empty());
        assert_eq!(at.tokens[1], vocab.specials().unk);
    }

    fn abc(vocab: &Vocabulary, mentions: Vec<Mention>) -> AnnotatedText {
        let toks = vec![
            vocab.specials().cls,
            vocab.id("a").unwrap(),
            vocab.id("b").unwrap(),
            vocab.id("c").unwrap(),
        ];
        AnnotatedText::new(toks, mentions).unwrap()
    }

    #[test]
    fn typing_marker_shifts_span() {
        let (vocab, _) = setup();
        let at = abc(&vocab, vec![Mention { span: Span::new(2, 3), entity: EntityId(0) }]);
        let out = insert_markers(&at, &vocab, MarkerTask::EntityTyping { target: Span::new(2, 3) }).unwrap();
        let sp = vocab.specials();
        assert_eq!(out.tokens[2], sp.ent);
        assert_eq!(out.tokens[3], vocab.id("b").unwrap());
        assert_eq!(out.mentions[0].span, Span::new(3, 4));
    }

    #[test]
    fn relation_markers_shift_later_span_by_two() {
        let (vocab, _) = setup();
        let at = abc(
            &vocab,
            vec![
                Mention { span: Span::new(1, 2), entity: EntityId(0) },
                Mention { span: Span::new(3, 4), entity: EntityId(1) },
            ],
        );
        let task = MarkerTask::RelationClassification {
            head: Span::new(1, 2),
            tail: Span::new(3, 4),
        };
        let out = insert_markers(&at, &vocab, task).unwrap();
        let sp = vocab.specials();
        assert_eq!(out.tokens[1], sp.hd);
        assert_eq!(out.tokens[4], sp.tl);
        assert_eq!(out.mentions[0].span, Span::new(2, 3));
        assert_eq!(out.mentions[1].span, Span::new(5, 6));
        assert!(insert_markers(&out, &vocab, task).is_err());
    }

    #[test]
    fn missing_span_errors() {
        let (vocab, _) = setup();
        let at = abc(&vocab, vec![]);
        let res = insert_markers(&at, &vocab, MarkerTask::EntityTyping { target: Span::new(1, 2) });
        assert!(matches!(res, Err(Error::Marker(_))));
    }

    #[test]
    fn invalid_spans_rejected() {
        let (vocab, _) = setup();
        let toks = vec![vocab.specials().cls, vocab.id("a").unwrap()];
        let m = |s, e| Mention { span: Span::new(s, e), entity: EntityId(0) };
        assert!(AnnotatedText::new(toks.clone(), vec![m(0, 1)]).is_err());
        assert!(AnnotatedText::new(toks.clone(), vec![m(1, 3)]).is_err());
        assert!(AnnotatedText::new(toks.clone(), vec![m(1, 2), m(1, 2)]).is_err());
        assert!(AnnotatedText::new(toks, vec![m(1, 2)]).is_ok());
    }

    #[test]
    fn corpus_record_resolves_entities() {
        let (vocab, kg) = setup();
        let rec = CorpusRecord {
            text: "paris is big".into(),
            mentions: vec![MentionRecord { start: 1, end: 2, entity: "paris".into() }],
        };
        let at = rec.annotate(&vocab, &kg).unwrap();
        assert_eq!(at.mentions[0].entity, kg.entity_id("paris").unwrap());
        let bad = CorpusRecord {
            mentions: vec![MentionRecord { start: 1, end: 2, entity: "rome".into() }],
            ..rec
        };
        assert!(matches!(bad.annotate(&vocab, &kg), Err(Error::UnknownEntity(_))));
    }
}
