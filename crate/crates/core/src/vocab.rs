//! Token vocabularies with reserved ids and min-count pruning.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("vocabulary file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("duplicate token `{0}`")]
    Duplicate(String),
}

/// Dense token ↔ id map. Reserved tokens occupy the first ids and are never pruned.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabRepr", into = "VocabRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    reserved: usize,
    unk: Option<u32>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    tokens: Vec<String>,
    counts: Vec<u64>,
    reserved: usize,
    unk: Option<String>,
}

impl TryFrom<VocabRepr> for Vocabulary {
    type Error = VocabError;

    fn try_from(r: VocabRepr) -> Result<Self, VocabError> {
        Vocabulary::from_parts(r.tokens, r.counts, r.reserved, r.unk.as_deref())
    }
}

impl From<Vocabulary> for VocabRepr {
    fn from(v: Vocabulary) -> Self {
        let unk = v.unk.map(|i| v.tokens[i as usize].clone());
        VocabRepr { tokens: v.tokens, counts: v.counts, reserved: v.reserved, unk }
    }
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, counts: Vec<u64>, reserved: usize, unk: Option<&str>) -> Result<Self, VocabError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(VocabError::Duplicate(t.clone()));
            }
        }
        let unk = unk.and_then(|u| index.get(u).copied());
        Ok(Self { tokens, counts, reserved, unk, index })
    }

    /// Reserved tokens first (in the given order), then every counted token with
    /// `count >= min_count` by descending count, ties broken lexicographically.
    /// `unk`, if given, must be one of the reserved tokens.
    pub fn build(reserved: &[&str], unk: Option<&str>, counts: &BTreeMap<String, u64>, min_count: u64) -> Self {
        let mut tokens: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
        let mut freq: Vec<u64> = reserved.iter().map(|t| counts.get(*t).copied().unwrap_or(0)).collect();
        let mut rest: Vec<(&String, u64)> =
            counts.iter().filter(|(t, c)| **c >= min_count && !reserved.contains(&t.as_str())).map(|(t, c)| (t, *c)).collect();
        rest.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        for (t, c) in rest {
            tokens.push(t.clone());
            freq.push(c);
        }
        Self::from_parts(tokens, freq, reserved.len(), unk).expect("tokens are unique")
    }

    /// A closed vocabulary with zero counts.
    pub fn fixed(tokens: &[String]) -> Self {
        Self::from_parts(tokens.to_vec(), vec![0; tokens.len()], tokens.len(), None).expect("tokens are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn reserved_len(&self) -> usize {
        self.reserved
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Falls back to UNK; `None` only when the token is unknown and there is no UNK.
    pub fn id_or_unk(&self, token: &str) -> Option<u32> {
        self.get(token).or(self.unk)
    }

    pub fn unk_id(&self) -> Option<u32> {
        self.unk
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn count(&self, id: u32) -> u64 {
        self.counts[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `token<TAB>id<TAB>count` per line. Tabs, newlines and backslashes in tokens are escaped.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}", escape(t), i, self.counts[i]);
        }
        out
    }

    pub fn from_tsv(text: &str, reserved: usize, unk: Option<&str>) -> Result<Self, VocabError> {
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let err = |message: &str| VocabError::Format { line: n + 1, message: message.to_string() };
            let mut parts = line.split('\t');
            let (Some(tok), Some(id), Some(count), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(err("expected three tab-separated fields"));
            };
            let id: usize = id.parse().map_err(|_| err("bad id"))?;
            if id != tokens.len() {
                return Err(err("ids must be dense and ascending"));
            }
            tokens.push(unescape(tok));
            counts.push(count.parse().map_err(|_| err("bad count"))?);
        }
        Self::from_parts(tokens, counts, reserved, unk)
    }
}

fn escape(t: &str) -> String {
    t.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

fn unescape(t: &str) -> String {
    let mut out = String::with_capacity(t.len());
    let mut chars = t.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some(other) => out.push(other),
                None => out.push('\\'),
            }
        } else {
            out.push(c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
        pairs.iter().map(|(t, c)| (t.to_string(), *c)).collect()
    }

    #[test]
    fn min_count_prunes_but_keeps_reserved() {
        let c = counts(&[("SUM", 12), ("rare", 9), ("AVERAGE", 10), ("[UNK]", 0)]);
        let v = Vocabulary::build(&["[UNK]", "$ENDSKETCH$"], Some("[UNK]"), &c, 10);
        assert_eq!(v.tokens(), &["[UNK]", "$ENDSKETCH$", "SUM", "AVERAGE"]);
        assert_eq!(v.get("rare"), None);
        assert_eq!(v.id_or_unk("rare"), Some(0));
        let all = Vocabulary::build(&["[UNK]"], Some("[UNK]"), &c, 1);
        assert!(all.get("rare").is_some());
    }

    #[test]
    fn ties_are_lexicographic() {
        let c = counts(&[("b", 3), ("a", 3), ("c", 5)]);
        let v = Vocabulary::build(&[], None, &c, 1);
        assert_eq!(v.tokens(), &["c", "a", "b"]);
    }

    #[test]
    fn tsv_round_trip() {
        let c = counts(&[("\"a\tb\"", 3), ("x\\y", 4)]);
        let v = Vocabulary::build(&["[UNK]"], Some("[UNK]"), &c, 1);
        let back = Vocabulary::from_tsv(&v.to_tsv(), 1, Some("[UNK]")).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_tsv("a\t1\t3\n", 0, None).is_err());
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build(&["[UNK]"], Some("[UNK]"), &counts(&[("q", 2)]), 1);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.unk_id(), Some(0));
    }
}
