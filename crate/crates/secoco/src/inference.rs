//! The two decoding modes: end-to-end translation (encoder-decoder only,
//! predictor heads never invoked) and iterative editing, which applies
//! predicted deletions then insertions round by round until the input stops
//! changing, then translates the corrected sequence.

use std::collections::HashSet;

use crate::editsup::{apply_deletions, apply_round, EditRound, EditTrace};
use crate::model::{ModelError, SecocoModel, SrcBatch, TgtBatch};
use crate::numerics::{Graph, Scalar, Tensor};
use crate::textops::{is_special, TokenId, TokenSeq, Vocab, BOS, EMPTY, EOS, PAD, UNK};

/// Outcome of the correction loop. `converged` means the final iteration made
/// zero edits; hitting the iteration cap or revisiting a sequence does not
/// count as convergence.
#[derive(Clone, Debug, PartialEq)]
pub struct EditResult {
    pub corrected: TokenSeq,
    pub trace: EditTrace,
    pub n_iters: usize,
    pub converged: bool,
}

struct Hypothesis {
    ids: Vec<TokenId>,
    logp: f64,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        // +1 counts the terminating EOS so empty outputs stay comparable
        self.logp / (self.ids.len() as f64 + 1.0)
    }
}

/// Encodes a single sequence and hands back the hidden states as a plain
/// tensor, detached from any graph.
fn encode_detached<F: Scalar>(
    model: &SecocoModel<F>,
    src: &TokenSeq,
) -> Result<(Tensor<F>, usize), ModelError> {
    let mut g = Graph::new();
    let pn = model.leaves(&mut g);
    let batch = SrcBatch::build(&[src], model.cfg().max_len)?;
    let h = model.encode(&mut g, &pn, &batch, None)?;
    Ok((g.value(h).clone(), batch.lens[0]))
}

fn tile_rows<F: Scalar>(h: &Tensor<F>, rows: usize) -> Tensor<F> {
    let mut shape = h.shape().to_vec();
    shape[0] = rows;
    let mut data = Vec::with_capacity(h.numel() * rows);
    for _ in 0..rows {
        data.extend_from_slice(h.data());
    }
    Tensor::from_vec(&shape, data)
}

/// Beam-search translation with length-normalized scores; width 1 is greedy
/// argmax chaining. The predictor heads are not invoked. An empty input
/// translates to the empty (EOS-only) output.
pub fn translate_e2e<F: Scalar>(
    model: &SecocoModel<F>,
    src: &TokenSeq,
    beam: usize,
) -> Result<TokenSeq, ModelError> {
    assert!(beam >= 1, "beam width must be at least 1");
    if src.is_empty() {
        return Ok(TokenSeq::empty());
    }
    let (h, src_len) = encode_detached(model, src)?;
    let max_out = model.cfg().max_len - 1;
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut live: Vec<Hypothesis> = vec![Hypothesis {
        ids: Vec::new(),
        logp: 0.0,
    }];
    for t in 0..max_out {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<TokenSeq> = live.iter().map(|b| TokenSeq::new(b.ids.clone())).collect();
        let refs: Vec<&TokenSeq> = prefixes.iter().collect();
        let tgt = TgtBatch::build(&refs, model.cfg().max_len)?;
        let mut g = Graph::new();
        let pn = model.leaves(&mut g);
        let hb = g.constant(tile_rows(&h, live.len()));
        let logits = model.decode_logits(&mut g, &pn, hb, &vec![src_len; live.len()], &tgt, None)?;
        let v = model.cfg().tgt_vocab;
        let mut candidates: Vec<(usize, TokenId, f64)> = Vec::new();
        for (i, hyp) in live.iter().enumerate() {
            let row = &g.value(logits).data()[(i * tgt.cols + t) * v..(i * tgt.cols + t) * v + v];
            // log-softmax in f64
            let mx = row.iter().copied().fold(F::neg_infinity(), F::max).f64();
            let lse: f64 = row.iter().map(|&x| (x.f64() - mx).exp()).sum::<f64>().ln() + mx;
            for (tok, &x) in row.iter().enumerate() {
                let tok = tok as TokenId;
                // structural specials are never generated; UNK may be
                if tok == PAD || tok == BOS || tok == EMPTY {
                    continue;
                }
                candidates.push((i, tok, hyp.logp + x.f64() - lse));
            }
        }
        candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.1.cmp(&b.1)));
        let mut next: Vec<Hypothesis> = Vec::new();
        let mut accepted = 0usize;
        for &(i, tok, logp) in candidates.iter() {
            if accepted >= beam {
                break;
            }
            accepted += 1;
            let mut ids = live[i].ids.clone();
            if tok == EOS {
                // an EOS candidate takes a beam slot and retires
                finished.push(Hypothesis { ids, logp });
            } else {
                ids.push(tok);
                next.push(Hypothesis { ids, logp });
            }
        }
        live = next;
        if t + 1 == max_out {
            finished.extend(live.drain(..));
        }
    }
    finished.extend(live);
    let best = finished
        .into_iter()
        .max_by(|a, b| a.normalized().partial_cmp(&b.normalized()).unwrap())
        .expect("beam search always yields at least one hypothesis");
    Ok(TokenSeq::new(
        best.ids.into_iter().filter(|&i| i != EOS).collect(),
    ))
}

/// Greedy translation of many sequences in one lockstep batch: one encoder
/// call, then one decoder call per output position. Row results equal
/// per-sentence greedy decoding exactly (PAD columns are masked out of
/// attention and rows are batch-independent).
pub fn translate_batch_greedy<F: Scalar>(
    model: &SecocoModel<F>,
    srcs: &[&TokenSeq],
) -> Result<Vec<TokenSeq>, ModelError> {
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let max_len = model.cfg().max_len;
    let mut g = Graph::new();
    let pn = model.leaves(&mut g);
    let batch = SrcBatch::build(srcs, max_len)?;
    let h = model.encode(&mut g, &pn, &batch, None)?;
    let h_src = g.value(h).clone();
    let rows = batch.rows;
    let v = model.cfg().tgt_vocab;
    let mut prefixes: Vec<Vec<TokenId>> = vec![Vec::new(); rows];
    let mut done = vec![false; rows];
    for t in 0..max_len - 1 {
        if done.iter().all(|&d| d) {
            break;
        }
        // finished rows ride along with a stable EOS filler; the causal mask
        // keeps their kept prefix unaffected
        let padded: Vec<TokenSeq> = prefixes
            .iter()
            .map(|p| {
                let mut ids = p.clone();
                ids.resize(t, EOS);
                TokenSeq::new(ids)
            })
            .collect();
        let refs: Vec<&TokenSeq> = padded.iter().collect();
        let tgt = TgtBatch::build(&refs, max_len)?;
        let mut g = Graph::new();
        let pn = model.leaves(&mut g);
        let hb = g.constant(h_src.clone());
        let logits = model.decode_logits(&mut g, &pn, hb, &batch.lens, &tgt, None)?;
        let data = g.value(logits).data();
        for (r, prefix) in prefixes.iter_mut().enumerate() {
            if done[r] {
                continue;
            }
            let row = &data[(r * tgt.cols + t) * v..(r * tgt.cols + t) * v + v];
            let mut best = EOS as usize;
            for (c, &x) in row.iter().enumerate() {
                let tok = c as TokenId;
                if tok == PAD || tok == BOS || tok == EMPTY {
                    continue;
                }
                if x > row[best] {
                    best = c;
                }
            }
            if best as TokenId == EOS {
                done[r] = true;
            } else {
                prefix.push(best as TokenId);
            }
        }
    }
    Ok(prefixes.into_iter().map(TokenSeq::new).collect())
}

/// Per-position delete decisions (prob > threshold) for each sequence,
/// batched through one encoder call. Sentinels and PAD are excluded.
pub fn predict_del_masks<F: Scalar>(
    model: &SecocoModel<F>,
    seqs: &[&TokenSeq],
    threshold: f64,
) -> Result<Vec<Vec<bool>>, ModelError> {
    let mut g = Graph::new();
    let pn = model.leaves(&mut g);
    let batch = SrcBatch::build(seqs, model.cfg().max_len)?;
    let h = model.encode(&mut g, &pn, &batch, None)?;
    let probs = model.deletion_probs(&mut g, &pn, h);
    let cols = batch.cols;
    let data = g.value(probs).data();
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(r, s)| {
            (0..s.len())
                .map(|i| data[r * cols + 1 + i].f64() > threshold)
                .collect()
        })
        .collect())
}

/// Per-boundary insertion labels (argmax class) for each sequence, batched.
/// The no-insert class and structural specials map to EMPTY; UNK insertions
/// are allowed.
pub fn predict_ins_labels<F: Scalar>(
    model: &SecocoModel<F>,
    seqs: &[&TokenSeq],
) -> Result<Vec<Vec<TokenId>>, ModelError> {
    let mut g = Graph::new();
    let pn = model.leaves(&mut g);
    let batch = SrcBatch::build(seqs, model.cfg().max_len)?;
    let h = model.encode(&mut g, &pn, &batch, None)?;
    let logits = model.insertion_logits(&mut g, &pn, h);
    let classes = model.cfg().ins_classes();
    let slots = batch.cols - 1;
    let data = g.value(logits).data();
    let no_insert = model.cfg().no_insert_class();
    Ok(seqs
        .iter()
        .enumerate()
        .map(|(r, s)| {
            (0..=s.len())
                .map(|j| {
                    let row = &data[(r * slots + j) * classes..(r * slots + j + 1) * classes];
                    let mut best = 0usize;
                    for (c, &x) in row.iter().enumerate() {
                        if x > row[best] {
                            best = c;
                        }
                    }
                    let class = best as u32;
                    if class == no_insert || (is_special(class) && class != UNK) {
                        EMPTY
                    } else {
                        class
                    }
                })
                .collect()
        })
        .collect())
}

/// One predicted edit round on `cur`: deletions from the current encoding,
/// insertions from a fresh encoding of the post-deletion sequence.
fn predict_round<F: Scalar>(
    model: &SecocoModel<F>,
    cur: &TokenSeq,
    threshold: f64,
) -> Result<EditRound, ModelError> {
    let del_mask = predict_del_masks(model, &[cur], threshold)?.pop().unwrap();
    let mid = apply_deletions(cur, &del_mask).expect("mask built for this sequence");
    let ins_labels = predict_ins_labels(model, &[&mid])?.pop().unwrap();
    Ok(EditRound {
        del_mask,
        ins_labels,
    })
}

/// Iterative correction to a fixpoint: per iteration, delete positions above
/// the threshold, re-encode, insert argmax labels; stop on a zero-edit
/// iteration, on revisiting a sequence (oscillation), or at max_iters.
pub fn correct_iteratively<F: Scalar>(
    model: &SecocoModel<F>,
    src: &TokenSeq,
    max_iters: usize,
    del_threshold: f64,
) -> Result<EditResult, ModelError> {
    assert!(max_iters >= 1, "max_iters must be at least 1");
    let mut cur = src.clone();
    let mut seen: HashSet<Vec<TokenId>> = HashSet::new();
    seen.insert(cur.ids().to_vec());
    let mut rounds = Vec::new();
    let mut n_iters = 0;
    let mut converged = false;
    for _ in 0..max_iters {
        n_iters += 1;
        let round = predict_round(model, &cur, del_threshold)?;
        if round.is_identity() {
            converged = true;
            break;
        }
        let next = apply_round(&cur, &round).expect("predicted round fits its sequence");
        if next.len() + 2 > model.cfg().max_len {
            // refuse a round that grows past encoder capacity
            break;
        }
        rounds.push(round);
        if !seen.insert(next.ids().to_vec()) {
            cur = next;
            break;
        }
        cur = next;
    }
    Ok(EditResult {
        corrected: cur,
        trace: EditTrace { rounds },
        n_iters,
        converged,
    })
}

/// Correct to a fixpoint, then translate the corrected sequence. The edit
/// result rides along for rendering.
pub fn translate_edit<F: Scalar>(
    model: &SecocoModel<F>,
    src: &TokenSeq,
    beam: usize,
    max_iters: usize,
    del_threshold: f64,
) -> Result<(TokenSeq, EditResult), ModelError> {
    let edit = correct_iteratively(model, src, max_iters, del_threshold)?;
    let translation = translate_e2e(model, &edit.corrected, beam)?;
    Ok((translation, edit))
}

/// Textual diff of a trace: one line per iteration, deleted tokens marked
/// [-tok-], insertions [+tok+].
pub fn render_trace(start: &TokenSeq, trace: &EditTrace, vocab: &Vocab) -> String {
    let mut out = String::new();
    let mut cur = start.clone();
    for (i, round) in trace.rounds.iter().enumerate() {
        let mut parts: Vec<String> = Vec::new();
        let mut kept_idx = 0usize;
        for (pos, tok) in cur.iter().enumerate() {
            if round.del_mask[pos] {
                parts.push(format!("[-{}-]", vocab.surface(tok)));
            } else {
                if round.ins_labels[kept_idx] != EMPTY {
                    parts.push(format!("[+{}+]", vocab.surface(round.ins_labels[kept_idx])));
                }
                parts.push(vocab.surface(tok).to_string());
                kept_idx += 1;
            }
        }
        if round.ins_labels[kept_idx] != EMPTY {
            parts.push(format!("[+{}+]", vocab.surface(round.ins_labels[kept_idx])));
        }
        out.push_str(&format!("iter {}: {}\n", i + 1, parts.join(" ")));
        cur = apply_round(&cur, round).expect("trace replays over its own rounds");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::textops::Vocab;

    fn tiny_model() -> SecocoModel<f32> {
        SecocoModel::init(
            ModelConfig {
                d_model: 16,
                n_heads: 2,
                n_enc_layers: 1,
                n_dec_layers: 1,
                d_ffn: 32,
                max_len: 16,
                src_vocab: 12,
                tgt_vocab: 12,
                dropout: 0.0,
            },
            42,
        )
        .unwrap()
    }

    #[test]
    fn empty_input_translates_to_empty_output() {
        let m = tiny_model();
        let out = translate_e2e(&m, &TokenSeq::empty(), 5).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn greedy_is_argmax_chaining() {
        // beam 1 must match a hand-rolled argmax loop over decode_logits
        let m = tiny_model();
        let src = TokenSeq::new(vec![5, 6, 7]);
        let got = translate_e2e(&m, &src, 1).unwrap();

        let (h, src_len) = encode_detached(&m, &src).unwrap();
        let mut ids: Vec<TokenId> = Vec::new();
        for t in 0..15 {
            let mut g = Graph::new();
            let pn = m.leaves(&mut g);
            let hb = g.constant(h.clone());
            let prefix = TokenSeq::new(ids.clone());
            let tgt = TgtBatch::build(&[&prefix], 16).unwrap();
            let logits = m
                .decode_logits(&mut g, &pn, hb, &[src_len], &tgt, None)
                .unwrap();
            let v = 12;
            let row = &g.value(logits).data()[t * v..(t + 1) * v];
            // same generatable vocabulary as the decoder: no PAD/BOS/EMPTY
            let mut best = EOS as usize;
            for (c, &x) in row.iter().enumerate() {
                if c as u32 == PAD || c as u32 == BOS || c as u32 == EMPTY {
                    continue;
                }
                if x > row[best] {
                    best = c;
                }
            }
            if best as u32 == EOS {
                break;
            }
            ids.push(best as u32);
        }
        assert_eq!(got, TokenSeq::new(ids));
    }

    #[test]
    fn correction_terminates_within_max_iters() {
        let m = tiny_model();
        let src = TokenSeq::new(vec![5, 6, 7, 8]);
        let res = correct_iteratively(&m, &src, 5, 0.5).unwrap();
        assert!(res.n_iters <= 5);
        // untrained model may or may not converge; the trace must replay
        assert_eq!(res.trace.replay(&src).unwrap(), res.corrected);
    }

    #[test]
    fn zero_heads_model_predicts_no_edits() {
        // a zeroed insertion head is uniform, argmax lands on class 0 (PAD),
        // which maps to EMPTY; a zeroed deletion head sits at 0.5, below the
        // strict threshold. One iteration, converged, identity.
        let mut m = tiny_model();
        m.zero_param("w_del");
        m.zero_param("z_ins");
        let src = TokenSeq::new(vec![5, 6, 7]);
        let res = correct_iteratively(&m, &src, 5, 0.5).unwrap();
        assert!(res.converged);
        assert_eq!(res.n_iters, 1);
        assert_eq!(res.corrected, src);
        assert!(res.trace.is_empty());
        // edit-mode translation then equals e2e translation
        let (edit_tr, edit_res) = translate_edit(&m, &src, 3, 5, 0.5).unwrap();
        let e2e = translate_e2e(&m, &src, 3).unwrap();
        assert_eq!(edit_tr, e2e);
        assert!(edit_res.converged);
    }

    #[test]
    fn render_trace_marks_deletions_and_insertions() {
        let vocab = Vocab::from_tokens(["a", "b", "c", "d"].map(String::from));
        let start = vocab.encode(&["a".into(), "b".into(), "b".into(), "d".into()]);
        let trace = EditTrace {
            rounds: vec![EditRound {
                del_mask: vec![false, false, true, false],
                ins_labels: vec![EMPTY, EMPTY, vocab.id("c"), EMPTY],
            }],
        };
        let text = render_trace(&start, &trace, &vocab);
        assert_eq!(text, "iter 1: a b [-b-] [+c+] d\n");
    }
}
