use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::hash_str;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const ENT: &str = "[ENT]";
pub const HD: &str = "[HD]";
pub const TL: &str = "[TL]";
pub const UNK: &str = "[UNK]";

pub const RESERVED: [&str; 8] = [PAD, CLS, SEP, MASK, ENT, HD, TL, UNK];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Specials {
    pub pad: TokenId,
    pub cls: TokenId,
    pub sep: TokenId,
    pub mask: TokenId,
    pub ent: TokenId,
    pub hd: TokenId,
    pub tl: TokenId,
    pub unk: TokenId,
}

impl Specials {
    pub fn is_marker(&self, t: TokenId) -> bool {
        t == self.ent || t == self.hd || t == self.tl
    }

    pub fn is_special(&self, t: TokenId) -> bool {
        [
            self.pad, self.cls, self.sep, self.mask, self.ent, self.hd, self.tl, self.unk,
        ]
        .contains(&t)
    }
}

/// Token ↔ id map with dense ids; stored as one token per line.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    specials: Specials,
}

impl Vocabulary {
    /// Reserved tokens first, then `words` in first-seen order.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut ids: HashMap<String, TokenId> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), TokenId(i as u32)))
            .collect();
        for w in words {
            if !ids.contains_key(w) {
                ids.insert(w.to_string(), TokenId(tokens.len() as u32));
                tokens.push(w.to_string());
            }
        }
        Self::from_parts(tokens, ids).expect("reserved tokens inserted above")
    }

    fn from_parts(tokens: Vec<String>, ids: HashMap<String, TokenId>) -> Result<Self> {
        let get = |name: &str| {
            ids.get(name)
                .copied()
                .ok_or_else(|| Error::invalid("vocabulary", format!("missing reserved token {name}")))
        };
        let specials = Specials {
            pad: get(PAD)?,
            cls: get(CLS)?,
            sep: get(SEP)?,
            mask: get(MASK)?,
            ent: get(ENT)?,
            hd: get(HD)?,
            tl: get(TL)?,
            unk: get(UNK)?,
        };
        Ok(Self {
            tokens,
            ids,
            specials,
        })
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut ids = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let tok = line.strip_suffix('\r').unwrap_or(line);
            if tok.is_empty() {
                return Err(Error::Parse {
                    path: source.into(),
                    line: i + 1,
                    msg: "empty token".into(),
                });
            }
            if ids.insert(tok.to_string(), TokenId(tokens.len() as u32)).is_some() {
                return Err(Error::Parse {
                    path: source.into(),
                    line: i + 1,
                    msg: format!("duplicate token `{tok}`"),
                });
            }
            tokens.push(tok.to_string());
        }
        Self::from_parts(tokens, ids)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn specials(&self) -> &Specials {
        &self.specials
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(self.specials.unk)
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id.index()]
    }

    pub fn hash(&self) -> String {
        hash_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_first_and_dense() {
        let v = Vocabulary::build(["a", "b", "a"]);
        assert_eq!(v.len(), RESERVED.len() + 2);
        assert_eq!(v.token(TokenId(0)), PAD);
        assert_eq!(v.id("b"), Some(TokenId(9)));
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::build(["x", "y"]);
        let back = Vocabulary::parse(&v.to_text(), "v").unwrap();
        assert_eq!(back.to_text(), v.to_text());
        assert_eq!(back.specials(), v.specials());
    }

    #[test]
    fn rejects_missing_or_duplicate_reserved() {
        assert!(Vocabulary::parse("[PAD]\n[CLS]\nx\n", "v").is_err());
        let mut text = Vocabulary::build(["x"]).to_text();
        text.push_str("[CLS]\n");
        assert!(Vocabulary::parse(&text, "v").is_err());
    }
}
