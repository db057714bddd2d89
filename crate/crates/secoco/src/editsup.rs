//! The edit-operation algebra: deletion masks, per-boundary insertion labels,
//! alternating-round traces, and supervision sampling.
//!
//! A round first deletes the masked positions, then inserts at most one token
//! per boundary of the post-deletion sequence. A sequence of n tokens exposes
//! n+1 boundaries (sentence start, between each adjacent pair, sentence end).
//! Traces built from recorded noise are as short as possible: one deletion
//! pass, then one insertion round per pending token at the most contested
//! boundary.

use rand::Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::textops::{TokenId, TokenSeq, Vocab, EMPTY};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EditError {
    #[error("deletion mask has {got} bits for a sequence of {expected} tokens")]
    MaskLength { expected: usize, got: usize },
    #[error("insertion labels have {got} entries, expected {expected} boundaries")]
    LabelLength { expected: usize, got: usize },
    #[error("inconsistent noise record: {0}")]
    InconsistentRecord(String),
    #[error("malformed trace serialization: {0}")]
    BadSerialization(String),
}

/// One correction iteration: delete, then insert.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditRound {
    /// One bit per position of the sequence the round applies to; true = delete.
    pub del_mask: Vec<bool>,
    /// One vocab-or-EMPTY id per boundary of the post-deletion sequence.
    pub ins_labels: Vec<TokenId>,
}

impl EditRound {
    /// A round that changes nothing on a sequence of `len` tokens.
    pub fn identity(len: usize) -> Self {
        EditRound {
            del_mask: vec![false; len],
            ins_labels: vec![EMPTY; len + 1],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.del_mask.iter().all(|&d| !d) && self.ins_labels.iter().all(|&l| l == EMPTY)
    }

    /// Deletions plus insertions performed by this round.
    pub fn atomic_edits(&self) -> usize {
        let dels = self.del_mask.iter().filter(|&&d| d).count();
        let inss = self.ins_labels.iter().filter(|&&l| l != EMPTY).count();
        dels + inss
    }
}

/// Ordered rounds transforming one sequence into another.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EditTrace {
    pub rounds: Vec<EditRound>,
}

impl EditTrace {
    pub fn empty() -> Self {
        EditTrace { rounds: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.rounds.is_empty()
    }

    pub fn atomic_edits(&self) -> usize {
        self.rounds.iter().map(EditRound::atomic_edits).sum()
    }

    /// Applies every round in order.
    pub fn replay(&self, start: &TokenSeq) -> Result<TokenSeq, EditError> {
        let mut cur = start.clone();
        for round in &self.rounds {
            cur = apply_round(&cur, round)?;
        }
        Ok(cur)
    }

    /// The sequence after each round, starting with `start` itself.
    pub fn intermediates(&self, start: &TokenSeq) -> Result<Vec<TokenSeq>, EditError> {
        let mut out = vec![start.clone()];
        for round in &self.rounds {
            let next = apply_round(out.last().unwrap(), round)?;
            out.push(next);
        }
        Ok(out)
    }
}

/// Keeps exactly the positions with mask false, in order.
pub fn apply_deletions(seq: &TokenSeq, mask: &[bool]) -> Result<TokenSeq, EditError> {
    if mask.len() != seq.len() {
        return Err(EditError::MaskLength {
            expected: seq.len(),
            got: mask.len(),
        });
    }
    Ok(TokenSeq::new(
        seq.iter()
            .zip(mask)
            .filter(|(_, &del)| !del)
            .map(|(id, _)| id)
            .collect(),
    ))
}

/// A non-EMPTY label at boundary j inserts that token between positions j-1
/// and j; boundary 0 is the sentence start, boundary n the end.
pub fn apply_insertions(seq: &TokenSeq, labels: &[TokenId]) -> Result<TokenSeq, EditError> {
    if labels.len() != seq.len() + 1 {
        return Err(EditError::LabelLength {
            expected: seq.len() + 1,
            got: labels.len(),
        });
    }
    let mut out = Vec::with_capacity(seq.len() + labels.len());
    for (j, id) in seq.iter().enumerate() {
        if labels[j] != EMPTY {
            out.push(labels[j]);
        }
        out.push(id);
    }
    if labels[seq.len()] != EMPTY {
        out.push(labels[seq.len()]);
    }
    Ok(TokenSeq::new(out))
}

/// Deletion strictly before insertion within a round.
pub fn apply_round(seq: &TokenSeq, round: &EditRound) -> Result<TokenSeq, EditError> {
    let deleted = apply_deletions(seq, &round.del_mask)?;
    apply_insertions(&deleted, &round.ins_labels)
}

/// Alignment between a noisy sequence and its clean source, recorded while
/// noise is injected. `kept[i]` marks noisy position i as aligned to clean;
/// `missing` lists clean tokens absent from the noisy sequence, each anchored
/// at a gap of the kept subsequence (gap g sits before the g-th kept token),
/// in clean order.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct NoiseRecord {
    pub kept: Vec<bool>,
    pub missing: Vec<(usize, TokenId)>,
}

/// Builds the shortest alternating delete/insert decomposition consistent
/// with a noise record: all deletions in the first round, insertions packed
/// one per boundary per round.
pub fn trace_from_noise(
    noisy: &TokenSeq,
    clean: &TokenSeq,
    record: &NoiseRecord,
) -> Result<EditTrace, EditError> {
    if record.kept.len() != noisy.len() {
        return Err(EditError::InconsistentRecord(format!(
            "kept flags cover {} positions, noisy has {}",
            record.kept.len(),
            noisy.len()
        )));
    }
    let kept: Vec<TokenId> = noisy
        .iter()
        .zip(&record.kept)
        .filter(|(_, &k)| k)
        .map(|(id, _)| id)
        .collect();
    // integrity: interleaving kept tokens with missing tokens must give clean
    let mut rebuilt = Vec::with_capacity(kept.len() + record.missing.len());
    let mut miss_iter = record.missing.iter().peekable();
    for (g, &tok) in kept.iter().enumerate() {
        while let Some(&&(gap, m)) = miss_iter.peek() {
            if gap == g {
                rebuilt.push(m);
                miss_iter.next();
            } else if gap < g {
                return Err(EditError::InconsistentRecord(
                    "missing tokens out of gap order".into(),
                ));
            } else {
                break;
            }
        }
        rebuilt.push(tok);
    }
    for &(gap, m) in miss_iter {
        if gap != kept.len() {
            return Err(EditError::InconsistentRecord(format!(
                "missing token anchored past the last gap ({gap} > {})",
                kept.len()
            )));
        }
        rebuilt.push(m);
    }
    if rebuilt != clean.ids() {
        return Err(EditError::InconsistentRecord(
            "kept tokens plus missing tokens do not reproduce the clean sequence".into(),
        ));
    }

    let del_mask: Vec<bool> = record.kept.iter().map(|&k| !k).collect();
    let any_deletion = del_mask.iter().any(|&d| d);
    if !any_deletion && record.missing.is_empty() {
        return Ok(EditTrace::empty());
    }

    // Pending insertions per gap, in clean order.
    let mut pending: Vec<Vec<TokenId>> = vec![Vec::new(); kept.len() + 1];
    for &(gap, tok) in &record.missing {
        pending[gap].push(tok);
    }
    // anchor[g]: boundary index in the current sequence where gap g's next
    // insertion goes. Strictly increasing across gaps.
    let mut anchors: Vec<usize> = (0..=kept.len()).collect();
    let mut queues: Vec<std::collections::VecDeque<TokenId>> =
        pending.into_iter().map(Into::into).collect();

    let mut cur = noisy.clone();
    let mut rounds = Vec::new();
    let mut first = true;
    while first || queues.iter().any(|q| !q.is_empty()) {
        let mask = if first {
            del_mask.clone()
        } else {
            vec![false; cur.len()]
        };
        first = false;
        // labels index boundaries of this round's post-deletion sequence
        let post_del_len = mask.iter().filter(|&&d| !d).count();
        let mut labels = vec![EMPTY; post_del_len + 1];
        for (g, q) in queues.iter_mut().enumerate() {
            if let Some(tok) = q.pop_front() {
                labels[anchors[g]] = tok;
            }
        }
        // shift anchors by the insertions placed before them this round;
        // a gap that inserted moves past its own new token as well
        let placed: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l != EMPTY)
            .map(|(j, _)| j)
            .collect();
        let old_anchors = anchors.clone();
        for (g, anchor) in anchors.iter_mut().enumerate() {
            let before = placed.iter().filter(|&&j| j < old_anchors[g]).count();
            // anchors are strictly increasing, so a placed label at this gap's
            // anchor can only be its own; the next insertion goes after it
            let own = placed.contains(&old_anchors[g]);
            *anchor = old_anchors[g] + before + usize::from(own);
        }
        let round = EditRound {
            del_mask: mask,
            ins_labels: labels,
        };
        cur = apply_round(&cur, &round)?;
        rounds.push(round);
    }
    Ok(EditTrace { rounds })
}

/// One round of predictor supervision: the deletion example pairs a round's
/// input sequence with its mask, the insertion example pairs the
/// post-deletion sequence with its labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Supervision {
    pub del_seq: TokenSeq,
    pub del_mask: Vec<bool>,
    pub ins_seq: TokenSeq,
    pub ins_labels: Vec<TokenId>,
}

impl Supervision {
    /// All-keep, all-EMPTY supervision that leaves `seq` fixed.
    pub fn identity(seq: &TokenSeq) -> Self {
        Supervision {
            del_seq: seq.clone(),
            del_mask: vec![false; seq.len()],
            ins_seq: seq.clone(),
            ins_labels: vec![EMPTY; seq.len() + 1],
        }
    }
}

/// Picks one round uniformly and returns its supervision. An empty trace
/// yields identity supervision on `start`.
pub fn sample_supervision<R: Rng + ?Sized>(
    start: &TokenSeq,
    trace: &EditTrace,
    rng: &mut R,
) -> Result<Supervision, EditError> {
    if trace.is_empty() {
        return Ok(Supervision::identity(start));
    }
    let t = rng.random_range(0..trace.rounds.len());
    let mut cur = start.clone();
    for round in &trace.rounds[..t] {
        cur = apply_round(&cur, round)?;
    }
    let round = &trace.rounds[t];
    let deleted = apply_deletions(&cur, &round.del_mask)?;
    Ok(Supervision {
        del_seq: cur,
        del_mask: round.del_mask.clone(),
        ins_seq: deleted,
        ins_labels: round.ins_labels.clone(),
    })
}

/// Serializes a trace as `[{"del": "0010", "ins": ["", "", "c", ""]}, ...]`
/// with surface forms; EMPTY is the empty string.
pub fn trace_to_json(trace: &EditTrace, vocab: &Vocab) -> Value {
    Value::Array(
        trace
            .rounds
            .iter()
            .map(|r| {
                let del: String = r.del_mask.iter().map(|&d| if d { '1' } else { '0' }).collect();
                let ins: Vec<Value> = r
                    .ins_labels
                    .iter()
                    .map(|&l| {
                        if l == EMPTY {
                            json!("")
                        } else {
                            json!(vocab.surface(l))
                        }
                    })
                    .collect();
                json!({ "del": del, "ins": ins })
            })
            .collect(),
    )
}

pub fn trace_from_json(value: &Value, vocab: &Vocab) -> Result<EditTrace, EditError> {
    let arr = value
        .as_array()
        .ok_or_else(|| EditError::BadSerialization("trace is not an array".into()))?;
    let mut rounds = Vec::with_capacity(arr.len());
    for v in arr {
        let del = v
            .get("del")
            .and_then(Value::as_str)
            .ok_or_else(|| EditError::BadSerialization("round missing del string".into()))?;
        let del_mask: Vec<bool> = del
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(EditError::BadSerialization(format!(
                    "bad mask character {other:?}"
                ))),
            })
            .collect::<Result<_, _>>()?;
        let ins = v
            .get("ins")
            .and_then(Value::as_array)
            .ok_or_else(|| EditError::BadSerialization("round missing ins array".into()))?;
        let ins_labels: Vec<TokenId> = ins
            .iter()
            .map(|s| {
                let s = s
                    .as_str()
                    .ok_or_else(|| EditError::BadSerialization("insertion label not a string".into()))?;
                Ok(if s.is_empty() { EMPTY } else { vocab.id(s) })
            })
            .collect::<Result<_, EditError>>()?;
        rounds.push(EditRound { del_mask, ins_labels });
    }
    Ok(EditTrace { rounds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textops::{Vocab, EMPTY};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn abc_vocab() -> Vocab {
        Vocab::from_tokens(["a", "b", "c", "d"].map(String::from))
    }

    fn seq(v: &Vocab, toks: &str) -> TokenSeq {
        v.encode(&crate::textops::tokenize(toks, crate::textops::TokenizeMode::Char))
    }

    #[test]
    fn delete_third_position() {
        let v = abc_vocab();
        let s = seq(&v, "abbd");
        let out = apply_deletions(&s, &[false, false, true, false]).unwrap();
        assert_eq!(out, seq(&v, "abd"));
    }

    #[test]
    fn all_zero_mask_is_identity() {
        let v = abc_vocab();
        let s = seq(&v, "abcd");
        assert_eq!(apply_deletions(&s, &[false; 4]).unwrap(), s);
    }

    #[test]
    fn delete_all_yields_empty() {
        let v = abc_vocab();
        let s = seq(&v, "ab");
        assert_eq!(apply_deletions(&s, &[true, true]).unwrap(), TokenSeq::empty());
    }

    #[test]
    fn mask_length_mismatch_is_rejected() {
        let v = abc_vocab();
        let s = seq(&v, "ab");
        assert_eq!(
            apply_deletions(&s, &[true]),
            Err(EditError::MaskLength { expected: 2, got: 1 })
        );
    }

    #[test]
    fn insert_c_at_boundary_two() {
        let v = abc_vocab();
        let s = seq(&v, "abd");
        let c = v.id("c");
        let out = apply_insertions(&s, &[EMPTY, EMPTY, c, EMPTY]).unwrap();
        assert_eq!(out, seq(&v, "abcd"));
    }

    #[test]
    fn all_empty_labels_is_identity() {
        let v = abc_vocab();
        let s = seq(&v, "abd");
        assert_eq!(apply_insertions(&s, &[EMPTY; 4]).unwrap(), s);
    }

    #[test]
    fn insert_into_empty_sequence() {
        let v = abc_vocab();
        let x = v.id("a");
        let out = apply_insertions(&TokenSeq::empty(), &[x]).unwrap();
        assert_eq!(out, seq(&v, "a"));
    }

    #[test]
    fn label_length_mismatch_is_rejected() {
        let v = abc_vocab();
        let s = seq(&v, "ab");
        assert_eq!(
            apply_insertions(&s, &[EMPTY, EMPTY]),
            Err(EditError::LabelLength { expected: 3, got: 2 })
        );
    }

    #[test]
    fn canonical_round_applies_deletion_then_insertion() {
        let v = abc_vocab();
        let round = EditRound {
            del_mask: vec![false, false, true, false],
            ins_labels: vec![EMPTY, EMPTY, v.id("c"), EMPTY],
        };
        let out = apply_round(&seq(&v, "abbd"), &round).unwrap();
        assert_eq!(out, seq(&v, "abcd"));
    }

    #[test]
    fn identity_round_is_identity() {
        let v = abc_vocab();
        let s = seq(&v, "abcd");
        assert_eq!(apply_round(&s, &EditRound::identity(4)).unwrap(), s);
    }

    #[test]
    fn trace_from_noise_canonical_case_is_one_round() {
        // noisy abbd vs clean abcd: second b is extra, c is missing at gap 2
        let v = abc_vocab();
        let noisy = seq(&v, "abbd");
        let clean = seq(&v, "abcd");
        let record = NoiseRecord {
            kept: vec![true, true, false, true],
            missing: vec![(2, v.id("c"))],
        };
        let trace = trace_from_noise(&noisy, &clean, &record).unwrap();
        assert_eq!(trace.rounds.len(), 1);
        assert_eq!(trace.rounds[0].del_mask, vec![false, false, true, false]);
        assert_eq!(
            trace.rounds[0].ins_labels,
            vec![EMPTY, EMPTY, v.id("c"), EMPTY]
        );
        assert_eq!(trace.replay(&noisy).unwrap(), clean);
    }

    #[test]
    fn trace_from_noise_identical_sequences_give_empty_trace() {
        let v = abc_vocab();
        let s = seq(&v, "abcd");
        let record = NoiseRecord {
            kept: vec![true; 4],
            missing: vec![],
        };
        let trace = trace_from_noise(&s, &s, &record).unwrap();
        assert!(trace.is_empty());
    }

    #[test]
    fn trace_from_noise_stacks_same_gap_insertions_across_rounds() {
        // clean abcd, noise deleted b and c (adjacent): two insertions at one gap
        let v = abc_vocab();
        let noisy = seq(&v, "ad");
        let clean = seq(&v, "abcd");
        let record = NoiseRecord {
            kept: vec![true, true],
            missing: vec![(1, v.id("b")), (1, v.id("c"))],
        };
        let trace = trace_from_noise(&noisy, &clean, &record).unwrap();
        assert_eq!(trace.rounds.len(), 2);
        assert_eq!(trace.replay(&noisy).unwrap(), clean);
        assert!(trace.atomic_edits() <= 2);
    }

    #[test]
    fn trace_from_noise_rejects_inconsistent_record() {
        let v = abc_vocab();
        let noisy = seq(&v, "ab");
        let clean = seq(&v, "abcd");
        let record = NoiseRecord {
            kept: vec![true, true],
            missing: vec![], // c and d unaccounted for
        };
        assert!(matches!(
            trace_from_noise(&noisy, &clean, &record),
            Err(EditError::InconsistentRecord(_))
        ));
    }

    #[test]
    fn sample_supervision_single_round_is_deterministic() {
        let v = abc_vocab();
        let noisy = seq(&v, "abbd");
        let trace = trace_from_noise(
            &noisy,
            &seq(&v, "abcd"),
            &NoiseRecord {
                kept: vec![true, true, false, true],
                missing: vec![(2, v.id("c"))],
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sup = sample_supervision(&noisy, &trace, &mut rng).unwrap();
        assert_eq!(sup.del_seq, noisy);
        assert_eq!(sup.del_mask, vec![false, false, true, false]);
        assert_eq!(sup.ins_seq, seq(&v, "abd"));
        assert_eq!(sup.ins_labels, vec![EMPTY, EMPTY, v.id("c"), EMPTY]);
    }

    #[test]
    fn sample_supervision_empty_trace_is_identity() {
        let v = abc_vocab();
        let clean = seq(&v, "abcd");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sup = sample_supervision(&clean, &EditTrace::empty(), &mut rng).unwrap();
        assert_eq!(sup, Supervision::identity(&clean));
        // identity supervision keeps the sequence fixed under apply_round
        let round = EditRound {
            del_mask: sup.del_mask,
            ins_labels: sup.ins_labels,
        };
        assert_eq!(apply_round(&clean, &round).unwrap(), clean);
    }

    #[test]
    fn trace_json_round_trip() {
        let v = abc_vocab();
        let trace = EditTrace {
            rounds: vec![EditRound {
                del_mask: vec![false, false, true, false],
                ins_labels: vec![EMPTY, EMPTY, v.id("c"), EMPTY],
            }],
        };
        let j = trace_to_json(&trace, &v);
        assert_eq!(
            serde_json::to_string(&j).unwrap(),
            r#"[{"del":"0010","ins":["","","c",""]}]"#
        );
        assert_eq!(trace_from_json(&j, &v).unwrap(), trace);
    }

    proptest! {
        // Compositional oracle: apply_round equals sequential sub-operations.
        #[test]
        fn round_equals_sequential_composition(
            toks in prop::collection::vec(5u32..9, 0..12),
            mask_bits in prop::collection::vec(any::<bool>(), 0..12),
            ins_bits in prop::collection::vec(prop::option::of(5u32..9), 0..13),
        ) {
            let s = TokenSeq::new(toks);
            let mut mask = mask_bits;
            mask.resize(s.len(), false);
            let deleted = apply_deletions(&s, &mask).unwrap();
            let mut labels: Vec<TokenId> = ins_bits
                .into_iter()
                .map(|o| o.unwrap_or(EMPTY))
                .collect();
            labels.resize(deleted.len() + 1, EMPTY);
            let round = EditRound { del_mask: mask, ins_labels: labels.clone() };
            let direct = apply_round(&s, &round).unwrap();
            let composed = apply_insertions(&deleted, &labels).unwrap();
            prop_assert_eq!(direct, composed);
        }

        // Replay oracle over random alignments: kept subsequence plus anchored
        // missing tokens always reconstructs clean, in at most max-multiplicity rounds.
        #[test]
        fn trace_from_noise_replays_to_clean(
            kept_tokens in prop::collection::vec(5u32..9, 0..10),
            extra in prop::collection::vec((0usize..11, 5u32..9), 0..4),
            missing in prop::collection::vec((0usize..11, 5u32..9), 0..4),
        ) {
            // build noisy = kept tokens with extras spliced in, clean = kept with missing spliced in
            let mut missing = missing;
            missing.iter_mut().for_each(|m| m.0 %= kept_tokens.len() + 1);
            missing.sort_by_key(|m| m.0);
            let mut extra = extra;
            extra.iter_mut().for_each(|e| e.0 %= kept_tokens.len() + 1);
            extra.sort_by_key(|e| e.0);

            let mut noisy = Vec::new();
            let mut kept_flags = Vec::new();
            let mut ei = 0;
            for (i, &t) in kept_tokens.iter().enumerate() {
                while ei < extra.len() && extra[ei].0 == i {
                    noisy.push(extra[ei].1);
                    kept_flags.push(false);
                    ei += 1;
                }
                noisy.push(t);
                kept_flags.push(true);
            }
            while ei < extra.len() {
                noisy.push(extra[ei].1);
                kept_flags.push(false);
                ei += 1;
            }

            let mut clean = Vec::new();
            let mut mi = 0;
            for (i, &t) in kept_tokens.iter().enumerate() {
                while mi < missing.len() && missing[mi].0 == i {
                    clean.push(missing[mi].1);
                    mi += 1;
                }
                clean.push(t);
            }
            while mi < missing.len() {
                clean.push(missing[mi].1);
                mi += 1;
            }

            let noisy = TokenSeq::new(noisy);
            let clean = TokenSeq::new(clean);
            let record = NoiseRecord { kept: kept_flags, missing: missing.clone() };
            let trace = trace_from_noise(&noisy, &clean, &record).unwrap();
            prop_assert_eq!(trace.replay(&noisy).unwrap(), clean);
            prop_assert!(trace.atomic_edits() <= extra.len() + missing.len());
            // minimality: number of rounds is the max gap multiplicity (or 1 for pure deletion)
            let mut mult = std::collections::HashMap::new();
            for (g, _) in &missing {
                *mult.entry(*g).or_insert(0usize) += 1;
            }
            let max_mult = mult.values().copied().max().unwrap_or(0);
            let expected_rounds = if extra.is_empty() && missing.is_empty() {
                0
            } else {
                max_mult.max(1)
            };
            prop_assert_eq!(trace.rounds.len(), expected_rounds);
        }
    }
}
