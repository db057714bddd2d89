//! Tokenization, vocabulary construction, and id/surface conversion.
//!
//! Two segmentation modes (whitespace and character), a frequency-ordered
//! vocabulary with a fixed block of special tokens, and a line-per-token
//! vocab file format. Out-of-vocabulary tokens map to UNK at encode time.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
/// The no-insertion token used by insertion labels.
pub const EMPTY: TokenId = 4;
pub const NUM_SPECIALS: usize = 5;

/// Fixed surfaces, in id order, written first in every vocab file.
pub const SPECIAL_SURFACES: [&str; NUM_SPECIALS] = ["<pad>", "<bos>", "<eos>", "<unk>", "<empty>"];

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < NUM_SPECIALS
}

#[derive(Debug, Error)]
pub enum TextError {
    #[error("max vocab size {max_size} is smaller than the {NUM_SPECIALS} special tokens")]
    MaxSizeTooSmall { max_size: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocab file {path}: {reason}")]
    BadVocabFile { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A sentence as a dense sequence of vocabulary ids. Never contains PAD;
/// padding is a batching concern.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq {
    ids: Vec<TokenId>,
}

impl TokenSeq {
    pub fn new(ids: Vec<TokenId>) -> Self {
        debug_assert!(ids.iter().all(|&i| i != PAD));
        TokenSeq { ids }
    }

    pub fn empty() -> Self {
        TokenSeq { ids: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn push(&mut self, id: TokenId) {
        self.ids.push(id);
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.ids.iter().copied()
    }
}

impl From<Vec<TokenId>> for TokenSeq {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSeq::new(ids)
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.ids)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TokenizeMode {
    #[default]
    Whitespace,
    Char,
}

/// Deterministic segmentation. Whitespace mode splits on Unicode whitespace;
/// char mode yields one token per non-whitespace character.
pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    match mode {
        TokenizeMode::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
        TokenizeMode::Char => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(String::from)
            .collect(),
    }
}

pub fn detokenize(tokens: &[String], mode: TokenizeMode) -> String {
    match mode {
        TokenizeMode::Whitespace => tokens.join(" "),
        TokenizeMode::Char => tokens.concat(),
    }
}

/// The normal form preserved by tokenize/detokenize round trips.
pub fn normalize(text: &str, mode: TokenizeMode) -> String {
    detokenize(&tokenize(text, mode), mode)
}

/// Immutable id <-> surface table. Ids are dense `0..size()`, specials first
/// in fixed order, then corpus tokens by descending frequency and
/// lexicographic tie-break.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from tokenized sentences. `max_size` bounds the
    /// total size including the special block.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Vocab, TextError>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if max_size < NUM_SPECIALS {
            return Err(TextError::MaxSizeTooSmall { max_size });
        }
        let mut freq: HashMap<&str, u64> = HashMap::new();
        let mut saw_any = false;
        for sent in corpus {
            saw_any = true;
            for tok in sent {
                if SPECIAL_SURFACES.contains(&tok.as_str()) {
                    continue;
                }
                *freq.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
        if !saw_any {
            return Err(TextError::EmptyCorpus);
        }
        let mut by_freq: Vec<(&str, u64)> = freq.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        by_freq.truncate(max_size - NUM_SPECIALS);
        Ok(Vocab::from_tokens(by_freq.into_iter().map(|(t, _)| t.to_owned())))
    }

    /// Assembles a vocabulary from the given non-special tokens, in order.
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Vocab {
        let mut all: Vec<String> = SPECIAL_SURFACES.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let index = all
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocab { tokens: all, index }
    }

    /// Total size, special block included.
    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Width of the insertion predictor's output: every vocab id plus the
    /// trailing no-insert class at index `size()`.
    pub fn ins_classes(&self) -> usize {
        self.size() + 1
    }

    /// Class index meaning "insert nothing here".
    pub fn no_insert_class(&self) -> usize {
        self.size()
    }

    pub fn id(&self, surface: &str) -> TokenId {
        self.index.get(surface).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.index.contains_key(surface)
    }

    pub fn surface(&self, id: TokenId) -> &str {
        &self.tokens[id as usize]
    }

    pub fn encode(&self, tokens: &[String]) -> TokenSeq {
        TokenSeq::new(tokens.iter().map(|t| self.id(t)).collect())
    }

    pub fn decode(&self, seq: &TokenSeq) -> Vec<String> {
        seq.iter().map(|id| self.surface(id).to_owned()).collect()
    }

    pub fn decode_to_string(&self, seq: &TokenSeq, mode: TokenizeMode) -> String {
        detokenize(&self.decode(seq), mode)
    }

    /// Ids of all non-special tokens, the pool noise insertions draw from.
    pub fn non_special_ids(&self) -> Vec<TokenId> {
        (NUM_SPECIALS as TokenId..self.size() as TokenId).collect()
    }

    /// One token per line, line number = id, specials first.
    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut out = String::new();
        for tok in &self.tokens {
            out.push_str(tok);
            out.push('\n');
        }
        let mut f = fs::File::create(path)?;
        f.write_all(out.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, TextError> {
        let text = fs::read_to_string(path)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < NUM_SPECIALS {
            return Err(TextError::BadVocabFile {
                path: path.display().to_string(),
                reason: format!("only {} lines, need at least {NUM_SPECIALS}", lines.len()),
            });
        }
        for (i, want) in SPECIAL_SURFACES.iter().enumerate() {
            if lines[i] != *want {
                return Err(TextError::BadVocabFile {
                    path: path.display().to_string(),
                    reason: format!("line {i} is {:?}, expected special {want:?}", lines[i]),
                });
            }
        }
        let mut seen = HashMap::new();
        for (i, line) in lines.iter().enumerate() {
            if let Some(prev) = seen.insert(*line, i) {
                return Err(TextError::BadVocabFile {
                    path: path.display().to_string(),
                    reason: format!("duplicate token {line:?} at lines {prev} and {i}"),
                });
            }
        }
        Ok(Vocab::from_tokens(
            lines[NUM_SPECIALS..].iter().map(|s| s.to_string()),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sents(texts: &[&str]) -> Vec<Vec<String>> {
        texts
            .iter()
            .map(|t| tokenize(t, TokenizeMode::Whitespace))
            .collect()
    }

    #[test]
    fn whitespace_tokenize_basic() {
        assert_eq!(
            tokenize("a b b d", TokenizeMode::Whitespace),
            vec!["a", "b", "b", "d"]
        );
    }

    #[test]
    fn whitespace_tokenize_empty() {
        assert!(tokenize("", TokenizeMode::Whitespace).is_empty());
    }

    #[test]
    fn char_tokenize_splits_characters() {
        assert_eq!(tokenize("abbd", TokenizeMode::Char), vec!["a", "b", "b", "d"]);
    }

    #[test]
    fn detokenize_round_trip_normalizes() {
        for mode in [TokenizeMode::Whitespace, TokenizeMode::Char] {
            let t = "  a  b\tc ";
            let norm = normalize(t, mode);
            assert_eq!(normalize(&norm, mode), norm);
            assert_eq!(detokenize(&tokenize(t, mode), mode), norm);
        }
    }

    #[test]
    fn build_vocab_contains_corpus_tokens_and_specials() {
        let corpus = sents(&["a b", "a c"]);
        let refs: Vec<&[String]> = corpus.iter().map(|s| s.as_slice()).collect();
        let v = Vocab::build(refs, 100).unwrap();
        assert_eq!(v.size(), NUM_SPECIALS + 3);
        for (i, s) in SPECIAL_SURFACES.iter().enumerate() {
            assert_eq!(v.surface(i as TokenId), *s);
        }
        // a has frequency 2, b and c tie at 1 and order lexicographically
        assert_eq!(v.surface(NUM_SPECIALS as TokenId), "a");
        assert_eq!(v.surface(NUM_SPECIALS as TokenId + 1), "b");
        assert_eq!(v.surface(NUM_SPECIALS as TokenId + 2), "c");
    }

    #[test]
    fn build_vocab_truncates_to_most_frequent() {
        let corpus = sents(&["a b"]);
        let refs: Vec<&[String]> = corpus.iter().map(|s| s.as_slice()).collect();
        let v = Vocab::build(refs, NUM_SPECIALS + 1).unwrap();
        assert_eq!(v.size(), NUM_SPECIALS + 1);
        // tie between a and b resolved lexicographically
        assert_eq!(v.surface(NUM_SPECIALS as TokenId), "a");
        assert!(!v.contains("b"));
    }

    #[test]
    fn build_vocab_tie_break_matches_brute_force_sort() {
        let corpus = sents(&["b c", "c b", "a a"]);
        let refs: Vec<&[String]> = corpus.iter().map(|s| s.as_slice()).collect();
        let v = Vocab::build(refs, 100).unwrap();
        // brute-force oracle: count, sort by (-count, token)
        let mut counts = vec![("a", 2u64), ("b", 2), ("c", 2)];
        counts.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(y.0)));
        for (i, (tok, _)) in counts.iter().enumerate() {
            assert_eq!(v.surface((NUM_SPECIALS + i) as TokenId), *tok);
        }
    }

    #[test]
    fn build_vocab_max_size_below_specials_is_config_error() {
        let corpus = sents(&["a"]);
        let refs: Vec<&[String]> = corpus.iter().map(|s| s.as_slice()).collect();
        assert!(matches!(
            Vocab::build(refs, NUM_SPECIALS - 1),
            Err(TextError::MaxSizeTooSmall { .. })
        ));
    }

    #[test]
    fn encode_decode_round_trip_in_vocab() {
        let corpus = sents(&["a b c"]);
        let refs: Vec<&[String]> = corpus.iter().map(|s| s.as_slice()).collect();
        let v = Vocab::build(refs, 100).unwrap();
        let toks = tokenize("c a b", TokenizeMode::Whitespace);
        let seq = v.encode(&toks);
        assert_eq!(v.decode(&seq), toks);
    }

    #[test]
    fn oov_maps_to_unk() {
        let corpus = sents(&["a"]);
        let refs: Vec<&[String]> = corpus.iter().map(|s| s.as_slice()).collect();
        let v = Vocab::build(refs, 100).unwrap();
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn vocab_file_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = sents(&["b a", "b"]);
        let refs: Vec<&[String]> = corpus.iter().map(|s| s.as_slice()).collect();
        let v = Vocab::build(refs, 100).unwrap();
        let p1 = dir.path().join("v1.vocab");
        let p2 = dir.path().join("v2.vocab");
        v.save(&p1).unwrap();
        let v2 = Vocab::load(&p1).unwrap();
        v2.save(&p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(v.size(), v2.size());
    }

    #[test]
    fn vocab_load_rejects_bad_special_block() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.vocab");
        fs::write(&p, "<pad>\n<bos>\n<eos>\n<unk>\nnot-empty\nx\n").unwrap();
        assert!(matches!(
            Vocab::load(&p),
            Err(TextError::BadVocabFile { .. })
        ));
    }
}
