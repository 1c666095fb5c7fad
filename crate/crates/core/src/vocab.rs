//! Whitespace tokenization and frequency-ranked vocabularies.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Splits on whitespace; no other normalization.
pub fn tokenize(utterance: &str) -> Vec<String> {
    utterance.split_whitespace().map(str::to_string).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    index: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocab {
    /// Ranks tokens by descending frequency, ties broken lexicographically,
    /// and keeps at most `max_size` entries including the reserved four.
    pub fn build<'a, I>(tokens: I, max_size: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in tokens {
            if !RESERVED.contains(&t) {
                *counts.entry(t).or_default() += 1;
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let keep = max_size.saturating_sub(RESERVED.len());
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(keep).map(|(t, _)| t.to_string()))
            .collect();
        Vocab::from_tokens(tokens).expect("ranked tokens are unique")
    }

    /// Builds from an index-ordered token list whose first four entries are
    /// the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocabulary must start with the reserved tokens".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocab { index, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn numericalize(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn denumericalize(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_string)
                    .ok_or(Error::Vocab { index: i, size: self.len() })
            })
            .collect()
    }

    /// Joins token strings with single spaces, dropping reserved tokens.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= RESERVED.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line, in index order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let tokens = r.lines().collect::<std::io::Result<Vec<_>>>()?;
        Vocab::from_tokens(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("a b  c"), vec!["a", "b", "c"]);
        assert!(tokenize("").is_empty());
        let toks = tokenize("  x   y z ");
        assert_eq!(tokenize(&toks.join(" ")), toks);
    }

    #[test]
    fn small_corpus_indices() {
        let v = Vocab::build("a a b".split(' '), 6);
        assert_eq!(v.tokens(), &["<pad>", "<unk>", "<bos>", "<eos>", "a", "b"]);
        assert_eq!((v.id("<pad>"), v.id("<unk>"), v.id("<bos>"), v.id("<eos>")), (0, 1, 2, 3));
        assert_eq!((v.id("a"), v.id("b")), (4, 5));
    }

    #[test]
    fn cap_maps_overflow_to_unk() {
        let v = Vocab::build("a a b".split(' '), 5);
        assert_eq!(v.len(), 5);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn rank_order_matches_counting_oracle() {
        let words = ["the", "cat", "sat", "on", "mat", "dog", "ran", "far"];
        let corpus: Vec<&str> = (0..50usize).map(|i| words[(i * i + 3 * i) % words.len()]).collect();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for w in &corpus {
            *counts.entry(w).or_default() += 1;
        }
        let mut expected: Vec<&str> = counts.keys().copied().collect();
        // stable sort over lexicographic keys keeps lexicographic tie order
        expected.sort_by_key(|w| std::cmp::Reverse(counts[w]));
        let v = Vocab::build(corpus.iter().copied(), 100);
        let got: Vec<&str> = v.tokens()[4..].iter().map(String::as_str).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::build("x y y z z z".split(' '), 10);
        let mut buf = Vec::new();
        v.write_to(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "<pad>\n<unk>\n<bos>\n<eos>\nz\ny\nx\n");
        assert_eq!(Vocab::read_from(&buf[..]).unwrap(), v);
        assert!(Vocab::read_from(&b"a\nb\n"[..]).is_err());
    }

    proptest! {
        #[test]
        fn numericalize_inverts_denumericalize(words in proptest::collection::vec("[a-e]{1,3}", 1..30)) {
            let v = Vocab::build(words.iter().map(String::as_str), 1000);
            let ids: Vec<usize> = words.iter().map(|w| v.id(w)).collect();
            prop_assert_eq!(v.denumericalize(&ids).unwrap(), words.clone());
            prop_assert_eq!(v.numericalize(&words.join(" ")), ids);
        }
    }
}
