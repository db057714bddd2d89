//! Noise synthesis: corrupt clean sources while recording the exact inverse
//! edit trace, plus the deterministic toy task used to generate parallel
//! corpora at desk scale.
//!
//! Draws run left to right, site by site: at each token the deletion draw is
//! considered first, then repetition, then a typo, and finally an insertion
//! draw at the boundary following the token (the sentence-start boundary gets
//! its own draw before the first token). Repeats duplicate the current token
//! in place. A typo swaps two adjacent characters of the surface form and is
//! recorded in the trace as delete + insert.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::editsup::{trace_from_noise, trace_to_json, trace_from_json, EditError, EditTrace, NoiseRecord};
use crate::textops::{tokenize, TextError, TokenId, TokenSeq, TokenizeMode, Vocab};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("invalid noise spec: {0}")]
    InvalidSpec(String),
    #[error("invalid task spec: {0}")]
    InvalidTask(String),
    #[error("bad noise ops: {0}")]
    BadOps(String),
    #[error("corpus file line {line}: {reason}")]
    BadCorpusFile { line: usize, reason: String },
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-sentence corruption rates and the per-sentence edit budget.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct NoiseSpec {
    /// Probability of deleting each token.
    pub p_delete: f64,
    /// Probability of inserting a random token at each boundary.
    pub p_insert: f64,
    /// Probability of duplicating each token in place.
    pub p_repeat: f64,
    /// Probability of corrupting each token's surface (adjacent-char swap).
    pub p_typo: f64,
    /// Cap on atomic edits (trace deletions + insertions) per sentence.
    pub max_edits: usize,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            p_delete: 0.1,
            p_insert: 0.1,
            p_repeat: 0.1,
            p_typo: 0.05,
            max_edits: 4,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), NoiseError> {
        for (name, p) in [
            ("p_delete", self.p_delete),
            ("p_insert", self.p_insert),
            ("p_repeat", self.p_repeat),
            ("p_typo", self.p_typo),
        ] {
            if !(0.0..=1.0).contains(&p) || p.is_nan() {
                return Err(NoiseError::InvalidSpec(format!("{name}={p} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// A spec that never edits; the corresponding pairs have empty traces.
    pub fn silent() -> Self {
        NoiseSpec {
            p_delete: 0.0,
            p_insert: 0.0,
            p_repeat: 0.0,
            p_typo: 0.0,
            ..NoiseSpec::default()
        }
    }
}

/// One atomic corruption, indexed against the clean sequence: `pos` is a
/// clean token index, `gap` a clean boundary index (0 = before first token).
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NoiseOp {
    Delete { pos: usize },
    Insert { gap: usize, token: TokenId },
    Repeat { pos: usize },
    Typo { pos: usize, corrupted: TokenId },
}

impl NoiseOp {
    /// Atomic edits the inverse trace will need to undo this op.
    pub fn trace_cost(&self) -> usize {
        match self {
            NoiseOp::Typo { .. } => 2,
            _ => 1,
        }
    }
}

/// Tallies of applied noise ops, reported by corpus synthesis.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct NoiseCounts {
    pub deletions: usize,
    pub insertions: usize,
    pub repeats: usize,
    pub typos: usize,
    /// Token positions seen, the denominator for per-position rates.
    pub positions: usize,
    /// Boundaries seen, the denominator for the insertion rate.
    pub boundaries: usize,
}

impl NoiseCounts {
    pub fn add_ops(&mut self, ops: &[NoiseOp], clean_len: usize) {
        for op in ops {
            match op {
                NoiseOp::Delete { .. } => self.deletions += 1,
                NoiseOp::Insert { .. } => self.insertions += 1,
                NoiseOp::Repeat { .. } => self.repeats += 1,
                NoiseOp::Typo { .. } => self.typos += 1,
            }
        }
        self.positions += clean_len;
        self.boundaries += clean_len + 1;
    }

    pub fn merge(&mut self, other: &NoiseCounts) {
        self.deletions += other.deletions;
        self.insertions += other.insertions;
        self.repeats += other.repeats;
        self.typos += other.typos;
        self.positions += other.positions;
        self.boundaries += other.boundaries;
    }
}

/// A corrupted sentence with the exact trace back to its clean form.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyPair {
    pub clean: TokenSeq,
    pub noisy: TokenSeq,
    pub trace: EditTrace,
}

fn swap_adjacent_chars(surface: &str, at: usize) -> String {
    let mut chars: Vec<char> = surface.chars().collect();
    chars.swap(at, at + 1);
    chars.into_iter().collect()
}

/// Draws the corruption ops for one sentence. Budget-capped: an op whose
/// trace cost would exceed `max_edits` is skipped.
pub fn draw_ops<R: Rng + ?Sized>(
    clean: &TokenSeq,
    spec: &NoiseSpec,
    vocab: &Vocab,
    rng: &mut R,
) -> Vec<NoiseOp> {
    let pool = vocab.non_special_ids();
    let mut ops = Vec::new();
    let mut budget = spec.max_edits;
    let push = |op: NoiseOp, budget: &mut usize, ops: &mut Vec<NoiseOp>| -> bool {
        let cost = op.trace_cost();
        if cost <= *budget {
            *budget -= cost;
            ops.push(op);
            true
        } else {
            false
        }
    };
    let draw_insert = |gap: usize, budget: &mut usize, ops: &mut Vec<NoiseOp>, rng: &mut R| {
        if !pool.is_empty() && rng.random::<f64>() < spec.p_insert {
            let token = pool[rng.random_range(0..pool.len())];
            push(NoiseOp::Insert { gap, token }, budget, ops);
        }
    };
    draw_insert(0, &mut budget, &mut ops, rng);
    for (i, tok) in clean.iter().enumerate() {
        let mut edited = false;
        if rng.random::<f64>() < spec.p_delete {
            edited = push(NoiseOp::Delete { pos: i }, &mut budget, &mut ops);
        }
        if !edited && rng.random::<f64>() < spec.p_repeat {
            edited = push(NoiseOp::Repeat { pos: i }, &mut budget, &mut ops);
        }
        if !edited && rng.random::<f64>() < spec.p_typo {
            let surface = vocab.surface(tok);
            let n_chars = surface.chars().count();
            if n_chars >= 2 {
                let at = rng.random_range(0..n_chars - 1);
                let corrupted = swap_adjacent_chars(surface, at);
                if corrupted != surface {
                    let corrupted = vocab.id(&corrupted);
                    push(NoiseOp::Typo { pos: i, corrupted }, &mut budget, &mut ops);
                }
            }
        }
        draw_insert(i + 1, &mut budget, &mut ops, rng);
    }
    ops
}

/// Applies corruption ops to a clean sequence, returning the noisy sequence
/// and the alignment record the trace is built from. At most one token op per
/// position and one insertion per gap.
pub fn apply_ops(clean: &TokenSeq, ops: &[NoiseOp]) -> Result<(TokenSeq, NoiseRecord), NoiseError> {
    let n = clean.len();
    let mut token_op: Vec<Option<&NoiseOp>> = vec![None; n];
    let mut gap_ins: Vec<Option<TokenId>> = vec![None; n + 1];
    for op in ops {
        match op {
            NoiseOp::Delete { pos } | NoiseOp::Repeat { pos } | NoiseOp::Typo { pos, .. } => {
                if *pos >= n {
                    return Err(NoiseError::BadOps(format!("position {pos} out of range")));
                }
                if token_op[*pos].replace(op).is_some() {
                    return Err(NoiseError::BadOps(format!("two ops at position {pos}")));
                }
            }
            NoiseOp::Insert { gap, token } => {
                if *gap > n {
                    return Err(NoiseError::BadOps(format!("gap {gap} out of range")));
                }
                if gap_ins[*gap].replace(*token).is_some() {
                    return Err(NoiseError::BadOps(format!("two insertions at gap {gap}")));
                }
            }
        }
    }

    let clean_ids = clean.ids();
    let mut noisy = Vec::with_capacity(n + ops.len());
    let mut kept = Vec::with_capacity(n + ops.len());
    let mut missing = Vec::new();
    let mut kept_count = 0usize;
    for i in 0..=n {
        if let Some(tok) = gap_ins[i] {
            noisy.push(tok);
            kept.push(false);
        }
        if i == n {
            break;
        }
        match token_op[i] {
            Some(NoiseOp::Delete { .. }) => {
                missing.push((kept_count, clean_ids[i]));
            }
            Some(NoiseOp::Repeat { .. }) => {
                noisy.push(clean_ids[i]);
                kept.push(true);
                kept_count += 1;
                noisy.push(clean_ids[i]);
                kept.push(false);
            }
            Some(NoiseOp::Typo { corrupted, .. }) => {
                noisy.push(*corrupted);
                kept.push(false);
                missing.push((kept_count, clean_ids[i]));
            }
            _ => {
                noisy.push(clean_ids[i]);
                kept.push(true);
                kept_count += 1;
            }
        }
    }
    Ok((TokenSeq::new(noisy), NoiseRecord { kept, missing }))
}

/// Corrupts a clean sequence with drawn ops and builds the inverse trace.
pub fn inject_noise<R: Rng + ?Sized>(
    clean: &TokenSeq,
    spec: &NoiseSpec,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<NoisyPair, NoiseError> {
    spec.validate()?;
    let ops = draw_ops(clean, spec, vocab, rng);
    inject_noise_with_ops(clean, &ops)
}

/// The deterministic path: applies the given ops instead of drawing them.
pub fn inject_noise_with_ops(clean: &TokenSeq, ops: &[NoiseOp]) -> Result<NoisyPair, NoiseError> {
    let (noisy, record) = apply_ops(clean, ops)?;
    let trace = trace_from_noise(&noisy, clean, &record)?;
    Ok(NoisyPair {
        clean: clean.clone(),
        noisy,
        trace,
    })
}

/// How source token content is drawn.
#[derive(Copy, Clone, Debug, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskContent {
    /// Contiguous walks over the ordered alphabet (wrapping), starting at a
    /// random offset. Every corruption leaves a detectable footprint and the
    /// damaged token is inferable from its neighbors, which is what makes
    /// edit prediction learnable at this scale.
    #[default]
    Walk,
    /// Independent uniform draws; insertions and deletions of random tokens
    /// are then statistically invisible.
    Uniform,
}

/// Deterministic source-to-target mapping: token-wise dictionary substitution
/// composed with optional sequence reversal, plus the source content model
/// and length range the generator samples uniformly.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TaskSpec {
    pub src_alphabet: Vec<String>,
    pub mapping: BTreeMap<String, String>,
    pub reverse: bool,
    pub content: TaskContent,
    pub len_min: usize,
    pub len_max: usize,
    /// Tokenization mode for external text in this task's language.
    pub tokenize_mode: TokenizeMode,
}

impl Default for TaskSpec {
    fn default() -> Self {
        // two-letter tokens so the adjacent-swap typo channel is live
        let words = [
            "an", "be", "ce", "do", "el", "fa", "go", "ha", "it", "jo", "ka", "lu", "mi", "no",
            "or", "pa", "qi", "ro", "su", "ta",
        ];
        let alphabet: Vec<String> = words.iter().map(|s| s.to_string()).collect();
        let mapping = alphabet
            .iter()
            .map(|s| (s.clone(), s.to_uppercase()))
            .collect();
        TaskSpec {
            src_alphabet: alphabet,
            mapping,
            reverse: false,
            content: TaskContent::default(),
            len_min: 3,
            len_max: 9,
            tokenize_mode: TokenizeMode::Whitespace,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), NoiseError> {
        if self.src_alphabet.is_empty() {
            return Err(NoiseError::InvalidTask("empty source alphabet".into()));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(NoiseError::InvalidTask(format!(
                "bad length range [{}, {}]",
                self.len_min, self.len_max
            )));
        }
        Ok(())
    }

    /// The deterministic image of a source sentence. Unmapped tokens pass
    /// through unchanged.
    pub fn map_source(&self, src: &[String]) -> Vec<String> {
        let mut out: Vec<String> = src
            .iter()
            .map(|t| self.mapping.get(t).cloned().unwrap_or_else(|| t.clone()))
            .collect();
        if self.reverse {
            out.reverse();
        }
        out
    }
}

/// Generates `n` parallel sentence pairs as surface tokens.
pub fn synth_task<R: Rng + ?Sized>(
    spec: &TaskSpec,
    n: usize,
    rng: &mut R,
) -> Result<Vec<(Vec<String>, Vec<String>)>, NoiseError> {
    spec.validate()?;
    let k = spec.src_alphabet.len();
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.random_range(spec.len_min..=spec.len_max);
        let src: Vec<String> = match spec.content {
            TaskContent::Walk => {
                let start = rng.random_range(0..k);
                (0..len)
                    .map(|i| spec.src_alphabet[(start + i) % k].clone())
                    .collect()
            }
            TaskContent::Uniform => (0..len)
                .map(|_| spec.src_alphabet[rng.random_range(0..k)].clone())
                .collect(),
        };
        let tgt = spec.map_source(&src);
        out.push((src, tgt));
    }
    Ok(out)
}

/// One training record: clean and noisy source, target, and the gold trace
/// from noisy back to clean.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub clean: TokenSeq,
    pub noisy: TokenSeq,
    pub target: TokenSeq,
    pub trace: EditTrace,
}

fn surfaces(seq: &TokenSeq, vocab: &Vocab) -> String {
    seq.iter()
        .map(|id| vocab.surface(id).to_owned())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn record_to_json(rec: &CorpusRecord, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Value {
    json!({
        "clean": surfaces(&rec.clean, src_vocab),
        "noisy": surfaces(&rec.noisy, src_vocab),
        "target": surfaces(&rec.target, tgt_vocab),
        "trace": trace_to_json(&rec.trace, src_vocab),
    })
}

/// JSON-lines corpus writer; one record per sentence pair.
pub fn write_corpus(
    path: &Path,
    records: &[CorpusRecord],
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
) -> Result<(), NoiseError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, &record_to_json(rec, src_vocab, tgt_vocab))
            .map_err(|e| NoiseError::BadOps(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(
    path: &Path,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
) -> Result<Vec<CorpusRecord>, NoiseError> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v: Value = serde_json::from_str(line).map_err(|e| NoiseError::BadCorpusFile {
            line: i + 1,
            reason: e.to_string(),
        })?;
        let field = |name: &str| -> Result<Vec<String>, NoiseError> {
            let s = v
                .get(name)
                .and_then(Value::as_str)
                .ok_or_else(|| NoiseError::BadCorpusFile {
                    line: i + 1,
                    reason: format!("missing field {name}"),
                })?;
            Ok(tokenize(s, TokenizeMode::Whitespace))
        };
        let clean = src_vocab.encode(&field("clean")?);
        let noisy = src_vocab.encode(&field("noisy")?);
        let target = tgt_vocab.encode(&field("target")?);
        let trace = v
            .get("trace")
            .map(|t| trace_from_json(t, src_vocab))
            .transpose()?
            .unwrap_or_default();
        if trace.replay(&noisy)? != clean {
            return Err(NoiseError::BadCorpusFile {
                line: i + 1,
                reason: "trace does not replay noisy to clean".into(),
            });
        }
        out.push(CorpusRecord {
            clean,
            noisy,
            target,
            trace,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::split_seed;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn char_vocab() -> Vocab {
        Vocab::from_tokens(('a'..='j').map(String::from))
    }

    fn seq(v: &Vocab, s: &str) -> TokenSeq {
        v.encode(&tokenize(s, TokenizeMode::Char))
    }

    #[test]
    fn silent_spec_is_noop() {
        let v = char_vocab();
        let clean = seq(&v, "abcd");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pair = inject_noise(&clean, &NoiseSpec::silent(), &v, &mut rng).unwrap();
        assert_eq!(pair.noisy, clean);
        assert!(pair.trace.is_empty());
    }

    #[test]
    fn forced_repeat_and_delete_reproduce_canonical_pattern() {
        let v = char_vocab();
        let clean = seq(&v, "abcd");
        let ops = vec![NoiseOp::Repeat { pos: 1 }, NoiseOp::Delete { pos: 2 }];
        let pair = inject_noise_with_ops(&clean, &ops).unwrap();
        assert_eq!(pair.noisy, seq(&v, "abbd"));
        assert_eq!(pair.trace.rounds.len(), 1);
        let round = &pair.trace.rounds[0];
        assert_eq!(round.del_mask, vec![false, false, true, false]);
        assert_eq!(
            round.ins_labels,
            vec![
                crate::textops::EMPTY,
                crate::textops::EMPTY,
                v.id("c"),
                crate::textops::EMPTY
            ]
        );
        assert_eq!(pair.trace.replay(&pair.noisy).unwrap(), clean);
    }

    #[test]
    fn typo_is_recorded_as_delete_plus_insert() {
        let v = Vocab::from_tokens(["have", "we"].map(String::from));
        let clean = v.encode(&["we".into(), "have".into()]);
        let corrupted = v.id("ahve"); // OOV, maps to UNK
        let ops = vec![NoiseOp::Typo { pos: 1, corrupted }];
        let pair = inject_noise_with_ops(&clean, &ops).unwrap();
        assert_eq!(pair.trace.atomic_edits(), 2);
        assert_eq!(pair.trace.replay(&pair.noisy).unwrap(), clean);
    }

    #[test]
    fn round_trip_holds_over_random_corpus() {
        // replay oracle over 1000 generated sequences with default rates
        let v = char_vocab();
        let spec = NoiseSpec::default();
        for i in 0..1000u64 {
            let mut gen_rng = ChaCha8Rng::seed_from_u64(split_seed(9, "gen", i));
            let len = gen_rng.random_range(1..=12);
            let ids: Vec<TokenId> = (0..len)
                .map(|_| gen_rng.random_range(5..v.size() as TokenId))
                .collect();
            let clean = TokenSeq::new(ids);
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(9, "noise", i));
            let pair = inject_noise(&clean, &spec, &v, &mut rng).unwrap();
            assert_eq!(pair.trace.replay(&pair.noisy).unwrap(), clean, "case {i}");
            assert!(pair.trace.atomic_edits() <= spec.max_edits);
        }
    }

    #[test]
    fn same_seed_same_pair() {
        let v = char_vocab();
        let clean = seq(&v, "abcdefgh");
        let spec = NoiseSpec {
            p_delete: 0.3,
            p_insert: 0.3,
            p_repeat: 0.3,
            p_typo: 0.0,
            max_edits: 6,
            seed: 5,
        };
        let mut r1 = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut r2 = ChaCha8Rng::seed_from_u64(spec.seed);
        let p1 = inject_noise(&clean, &spec, &v, &mut r1).unwrap();
        let p2 = inject_noise(&clean, &spec, &v, &mut r2).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn edit_budget_is_respected_under_heavy_noise() {
        let v = char_vocab();
        let clean = seq(&v, "abcdefghij");
        let spec = NoiseSpec {
            p_delete: 1.0,
            p_insert: 1.0,
            p_repeat: 1.0,
            p_typo: 1.0,
            max_edits: 3,
            seed: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pair = inject_noise(&clean, &spec, &v, &mut rng).unwrap();
        assert!(pair.trace.atomic_edits() <= 3);
        assert_eq!(pair.trace.replay(&pair.noisy).unwrap(), clean);
    }

    #[test]
    fn invalid_probability_is_rejected() {
        let v = char_vocab();
        let clean = seq(&v, "ab");
        let spec = NoiseSpec {
            p_delete: 1.5,
            ..NoiseSpec::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            inject_noise(&clean, &spec, &v, &mut rng),
            Err(NoiseError::InvalidSpec(_))
        ));
    }

    #[test]
    fn task_mapping_and_reversal() {
        let spec = TaskSpec::default();
        assert_eq!(
            spec.map_source(&["an".into(), "be".into()]),
            vec!["AN".to_string(), "BE".to_string()]
        );
        let rev = TaskSpec {
            reverse: true,
            ..TaskSpec::default()
        };
        assert_eq!(
            rev.map_source(&["an".into(), "be".into()]),
            vec!["BE".to_string(), "AN".to_string()]
        );
    }

    #[test]
    fn synth_task_is_reproducible_from_seed() {
        let spec = TaskSpec::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let c1 = synth_task(&spec, 50, &mut r1).unwrap();
        let c2 = synth_task(&spec, 50, &mut r2).unwrap();
        assert_eq!(c1, c2);
        for (src, tgt) in &c1 {
            assert_eq!(tgt, &spec.map_source(src));
            assert!(src.len() >= spec.len_min && src.len() <= spec.len_max);
        }
    }

    #[test]
    fn corpus_file_round_trip() {
        let v = char_vocab();
        let tgt_vocab = Vocab::from_tokens(('A'..='J').map(String::from));
        let clean = seq(&v, "abcd");
        let pair =
            inject_noise_with_ops(&clean, &[NoiseOp::Repeat { pos: 1 }, NoiseOp::Delete { pos: 2 }])
                .unwrap();
        let rec = CorpusRecord {
            clean: pair.clean,
            noisy: pair.noisy,
            target: tgt_vocab.encode(&["A".into(), "B".into(), "C".into(), "D".into()]),
            trace: pair.trace,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_corpus(&path, &[rec.clone()], &v, &tgt_vocab).unwrap();
        let back = read_corpus(&path, &v, &tgt_vocab).unwrap();
        assert_eq!(back, vec![rec]);
        // same write twice is byte-identical
        let path2 = dir.path().join("corpus2.jsonl");
        write_corpus(&path2, &back, &v, &tgt_vocab).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn noise_counts_tally_applied_ops() {
        let mut counts = NoiseCounts::default();
        counts.add_ops(
            &[
                NoiseOp::Delete { pos: 0 },
                NoiseOp::Insert { gap: 1, token: 7 },
                NoiseOp::Repeat { pos: 2 },
                NoiseOp::Typo { pos: 3, corrupted: 3 },
            ],
            4,
        );
        assert_eq!(counts.deletions, 1);
        assert_eq!(counts.insertions, 1);
        assert_eq!(counts.repeats, 1);
        assert_eq!(counts.typos, 1);
        assert_eq!(counts.positions, 4);
        assert_eq!(counts.boundaries, 5);
    }
}
