//! Transformer encoder-decoder with two extra heads on the encoder: a
//! per-position deletion predictor (sigmoid over h·W) and a per-boundary
//! insertion predictor (softmax over [h_j; h_{j+1}]·Z with a trailing
//! no-insert class). Pre-norm blocks, sinusoidal positions, BOS/EOS
//! sentinels so start and end boundaries are expressible.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::numerics::{Graph, NodeId, Scalar, Tensor};
use crate::textops::{TokenSeq, BOS, EOS, PAD};

/// Ignore marker for insertion-label slots outside a row's real boundaries.
pub const INS_IGNORE: u32 = u32::MAX;

pub const CKPT_MAGIC: [u8; 4] = *b"SECO";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds max_len {max} (sentinels included)")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 2,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ffn: 128,
            max_len: 64,
            src_vocab: 0,
            tgt_vocab: 0,
            dropout: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.src_vocab == 0 || self.tgt_vocab == 0 {
            return Err(ModelError::BadConfig("vocab sizes must be set".into()));
        }
        if self.max_len < 3 {
            return Err(ModelError::BadConfig("max_len must fit sentinels".into()));
        }
        if self.dropout < 0.0 || self.dropout >= 1.0 {
            return Err(ModelError::BadConfig(format!("dropout {}", self.dropout)));
        }
        Ok(())
    }

    /// Width of the insertion head output: src vocab plus the no-insert class.
    pub fn ins_classes(&self) -> usize {
        self.src_vocab + 1
    }

    pub fn no_insert_class(&self) -> u32 {
        self.src_vocab as u32
    }
}

struct AttnIds {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

struct EncLayerIds {
    ln1: (usize, usize),
    attn: AttnIds,
    ln2: (usize, usize),
    ffn: (usize, usize, usize, usize),
}

struct DecLayerIds {
    ln1: (usize, usize),
    self_attn: AttnIds,
    ln2: (usize, usize),
    cross_attn: AttnIds,
    ln3: (usize, usize),
    ffn: (usize, usize, usize, usize),
}

struct Layout {
    src_embed: usize,
    tgt_embed: usize,
    enc: Vec<EncLayerIds>,
    enc_ln: (usize, usize),
    dec: Vec<DecLayerIds>,
    dec_ln: (usize, usize),
    w_del: usize,
    z_ins: usize,
    out_proj: usize,
}

/// All learnable arrays plus their deterministic name/order layout.
pub struct SecocoModel<F: Scalar> {
    cfg: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    layout: Layout,
}

/// Per-graph leaf nodes for every parameter, index-aligned with the model's
/// tensor order.
pub struct ParamNodes(pub Vec<NodeId>);

/// Optional dropout source threaded through forward passes.
pub struct Dropout<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub rate: f64,
}

struct LayoutBuilder<F: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    rng: ChaCha8Rng,
}

impl<F: Scalar> LayoutBuilder<F> {
    fn matrix(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let t = Tensor::xavier(rows, cols, &mut self.rng);
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn embedding(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let bound = (3.0 / cols as f64).sqrt();
        let t = Tensor::uniform(&[rows, cols], bound, &mut self.rng);
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn vector(&mut self, name: String, len: usize, v: F) -> usize {
        self.names.push(name);
        self.tensors.push(Tensor::filled(&[len], v));
        self.tensors.len() - 1
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> (usize, usize) {
        let g = self.vector(format!("{prefix}.g"), d, F::one());
        let b = self.vector(format!("{prefix}.b"), d, F::zero());
        (g, b)
    }

    fn attn(&mut self, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: self.matrix(format!("{prefix}.wq"), d, d),
            wk: self.matrix(format!("{prefix}.wk"), d, d),
            wv: self.matrix(format!("{prefix}.wv"), d, d),
            wo: self.matrix(format!("{prefix}.wo"), d, d),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, dff: usize) -> (usize, usize, usize, usize) {
        (
            self.matrix(format!("{prefix}.w1"), d, dff),
            self.vector(format!("{prefix}.b1"), dff, F::zero()),
            self.matrix(format!("{prefix}.w2"), dff, d),
            self.vector(format!("{prefix}.b2"), d, F::zero()),
        )
    }
}

impl<F: Scalar> SecocoModel<F> {
    /// Fresh parameters, deterministic in (config, seed).
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut b = LayoutBuilder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = cfg.d_model;
        let src_embed = b.embedding("src_embed".into(), cfg.src_vocab, d);
        let tgt_embed = b.embedding("tgt_embed".into(), cfg.tgt_vocab, d);
        let enc = (0..cfg.n_enc_layers)
            .map(|i| EncLayerIds {
                ln1: b.layer_norm(&format!("enc.{i}.ln1"), d),
                attn: b.attn(&format!("enc.{i}.attn"), d),
                ln2: b.layer_norm(&format!("enc.{i}.ln2"), d),
                ffn: b.ffn(&format!("enc.{i}.ffn"), d, cfg.d_ffn),
            })
            .collect();
        let enc_ln = b.layer_norm("enc.ln", d);
        let dec = (0..cfg.n_dec_layers)
            .map(|i| DecLayerIds {
                ln1: b.layer_norm(&format!("dec.{i}.ln1"), d),
                self_attn: b.attn(&format!("dec.{i}.self"), d),
                ln2: b.layer_norm(&format!("dec.{i}.ln2"), d),
                cross_attn: b.attn(&format!("dec.{i}.cross"), d),
                ln3: b.layer_norm(&format!("dec.{i}.ln3"), d),
                ffn: b.ffn(&format!("dec.{i}.ffn"), d, cfg.d_ffn),
            })
            .collect();
        let dec_ln = b.layer_norm("dec.ln", d);
        let w_del = b.matrix("w_del".into(), d, 1);
        let z_ins = b.matrix("z_ins".into(), 2 * d, cfg.ins_classes());
        let out_proj = b.matrix("out_proj".into(), d, cfg.tgt_vocab);
        let layout = Layout {
            src_embed,
            tgt_embed,
            enc,
            enc_ln,
            dec,
            dec_ln,
            w_del,
            z_ins,
            out_proj,
        };
        Ok(SecocoModel {
            cfg,
            names: b.names,
            tensors: b.tensors,
            layout,
        })
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Zeroes a named parameter; used by degenerate-head checks.
    pub fn zero_param(&mut self, name: &str) {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        let shape = self.tensors[i].shape().to_vec();
        self.tensors[i] = Tensor::zeros(&shape);
    }

    /// Registers every parameter as a graph leaf.
    pub fn leaves(&self, g: &mut Graph<F>) -> ParamNodes {
        ParamNodes(self.tensors.iter().map(|t| g.leaf(t.clone())).collect())
    }

    /// Gradients per parameter after backward, index-aligned with tensors().
    pub fn grads(&self, g: &Graph<F>, pn: &ParamNodes) -> Vec<Option<Tensor<F>>> {
        pn.0.iter().map(|&id| g.grad(id).cloned()).collect()
    }

    fn sinusoidal(&self, rows: usize, cols: usize) -> Tensor<F> {
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(rows * cols * d);
        let mut row = vec![0f64; d];
        for _ in 0..rows {
            for pos in 0..cols {
                for (i, slot) in row.iter_mut().enumerate() {
                    let pair = (i / 2) as f64;
                    let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
                    *slot = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                }
                data.extend(row.iter().map(|&v| F::c(v)));
            }
        }
        Tensor::from_vec(&[rows, cols, d], data)
    }

    fn dropout_node(
        &self,
        g: &mut Graph<F>,
        x: NodeId,
        dropout: &mut Option<Dropout<'_>>,
    ) -> NodeId {
        let Some(d) = dropout.as_mut() else {
            return x;
        };
        if d.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - d.rate;
        let shape = g.value(x).shape().to_vec();
        let mask: Vec<F> = (0..shape.iter().product())
            .map(|_| {
                if d.rng.random::<f64>() < keep {
                    F::c(1.0 / keep)
                } else {
                    F::zero()
                }
            })
            .collect();
        let m = g.constant(Tensor::from_vec(&shape, mask));
        g.mul(x, m)
    }

    /// Multi-head attention: queries from x_q, keys/values from x_kv, additive
    /// mask of shape (B, H, Lq, Lk).
    #[allow(clippy::too_many_arguments)]
    fn mha(
        &self,
        g: &mut Graph<F>,
        pn: &ParamNodes,
        ids: &AttnIds,
        x_q: NodeId,
        x_kv: NodeId,
        mask: NodeId,
        rows: usize,
        l_q: usize,
        l_kv: usize,
    ) -> NodeId {
        let d = self.cfg.d_model;
        let h = self.cfg.n_heads;
        let dh = d / h;
        let split = |g: &mut Graph<F>, x: NodeId, l: usize| {
            let r = g.reshape(x, &[rows, l, h, dh]);
            g.permute_0213(r) // (B, H, L, dh)
        };
        let q = g.matmul(x_q, pn.0[ids.wq]);
        let k = g.matmul(x_kv, pn.0[ids.wk]);
        let v = g.matmul(x_kv, pn.0[ids.wv]);
        let qh = split(g, q, l_q);
        let kh = split(g, k, l_kv);
        let vh = split(g, v, l_kv);
        let scale = F::c(1.0 / (dh as f64).sqrt());
        let ctx = g.attention(qh, kh, vh, mask, scale); // (B, H, Lq, dh)
        let merged = g.permute_0213(ctx);
        let flat = g.reshape(merged, &[rows, l_q, d]);
        g.matmul(flat, pn.0[ids.wo])
    }

    fn ffn_block(
        &self,
        g: &mut Graph<F>,
        pn: &ParamNodes,
        ids: (usize, usize, usize, usize),
        x: NodeId,
    ) -> NodeId {
        let h = g.matmul(x, pn.0[ids.0]);
        let h = g.add_bias(h, pn.0[ids.1]);
        let h = g.relu(h);
        let h = g.matmul(h, pn.0[ids.2]);
        g.add_bias(h, pn.0[ids.3])
    }

    #[allow(clippy::too_many_arguments)]
    fn embed_positions(
        &self,
        g: &mut Graph<F>,
        table: usize,
        pn: &ParamNodes,
        ids: &[u32],
        rows: usize,
        cols: usize,
        dropout: &mut Option<Dropout<'_>>,
    ) -> NodeId {
        let emb = g.embedding(pn.0[table], ids, &[rows, cols]);
        let scaled = g.scale(emb, F::c((self.cfg.d_model as f64).sqrt()));
        let pos = g.constant(self.sinusoidal(rows, cols));
        let x = g.add(scaled, pos);
        self.dropout_node(g, x, dropout)
    }

    /// Encodes a padded source batch into hidden states (B, L, d). PAD
    /// columns are masked out of attention.
    pub fn encode(
        &self,
        g: &mut Graph<F>,
        pn: &ParamNodes,
        batch: &SrcBatch,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<NodeId, ModelError> {
        if batch.cols > self.cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: batch.cols,
                max: self.cfg.max_len,
            });
        }
        let (rows, cols) = (batch.rows, batch.cols);
        let mask = g.constant(pad_attn_mask::<F>(
            rows,
            self.cfg.n_heads,
            cols,
            cols,
            &batch.lens,
        ));
        let mut x = self.embed_positions(
            g,
            self.layout.src_embed,
            pn,
            &batch.ids,
            rows,
            cols,
            &mut dropout,
        );
        for layer in &self.layout.enc {
            let normed = g.layer_norm(x, pn.0[layer.ln1.0], pn.0[layer.ln1.1]);
            let attn = self.mha(g, pn, &layer.attn, normed, normed, mask, rows, cols, cols);
            let attn = self.dropout_node(g, attn, &mut dropout);
            x = g.add(x, attn);
            let normed = g.layer_norm(x, pn.0[layer.ln2.0], pn.0[layer.ln2.1]);
            let ff = self.ffn_block(g, pn, layer.ffn, normed);
            let ff = self.dropout_node(g, ff, &mut dropout);
            x = g.add(x, ff);
        }
        Ok(g.layer_norm(x, pn.0[self.layout.enc_ln.0], pn.0[self.layout.enc_ln.1]))
    }

    /// Per-position deletion logits (B, L). Sentinel and PAD positions are a
    /// caller concern (loss weights, threshold slicing).
    pub fn deletion_logits(&self, g: &mut Graph<F>, pn: &ParamNodes, h: NodeId) -> NodeId {
        let (rows, cols) = (g.value(h).dim(0), g.value(h).dim(1));
        let logits = g.matmul(h, pn.0[self.layout.w_del]); // (B, L, 1)
        g.reshape(logits, &[rows, cols])
    }

    pub fn deletion_probs(&self, g: &mut Graph<F>, pn: &ParamNodes, h: NodeId) -> NodeId {
        let logits = self.deletion_logits(g, pn, h);
        g.sigmoid(logits)
    }

    /// Per-boundary insertion logits (B, L-1, |V|+1): boundary j looks at the
    /// concatenated states of positions j and j+1, sentinels included, so n
    /// real tokens yield n+1 meaningful boundary slots.
    pub fn insertion_logits(&self, g: &mut Graph<F>, pn: &ParamNodes, h: NodeId) -> NodeId {
        let cols = g.value(h).dim(1);
        let left = g.narrow(h, 1, 0, cols - 1);
        let right = g.narrow(h, 1, 1, cols - 1);
        let feat = g.concat_last(left, right);
        g.matmul(feat, pn.0[self.layout.z_ins])
    }

    pub fn insertion_probs(&self, g: &mut Graph<F>, pn: &ParamNodes, h: NodeId) -> NodeId {
        let logits = self.insertion_logits(g, pn, h);
        g.softmax_last(logits)
    }

    /// Teacher-forced decoder: next-token logits (B, Lt, tgt_vocab) over the
    /// target prefix batch, causally masked, cross-attending into `h_src`.
    pub fn decode_logits(
        &self,
        g: &mut Graph<F>,
        pn: &ParamNodes,
        h_src: NodeId,
        src_lens: &[usize],
        tgt: &TgtBatch,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<NodeId, ModelError> {
        if tgt.cols > self.cfg.max_len {
            return Err(ModelError::SequenceTooLong {
                len: tgt.cols,
                max: self.cfg.max_len,
            });
        }
        let (rows, cols) = (tgt.rows, tgt.cols);
        let src_cols = g.value(h_src).dim(1);
        let causal = g.constant(causal_attn_mask::<F>(rows, self.cfg.n_heads, cols));
        let cross = g.constant(pad_attn_mask::<F>(
            rows,
            self.cfg.n_heads,
            cols,
            src_cols,
            src_lens,
        ));
        let mut x = self.embed_positions(
            g,
            self.layout.tgt_embed,
            pn,
            &tgt.input_ids,
            rows,
            cols,
            &mut dropout,
        );
        for layer in &self.layout.dec {
            let normed = g.layer_norm(x, pn.0[layer.ln1.0], pn.0[layer.ln1.1]);
            let attn = self.mha(g, pn, &layer.self_attn, normed, normed, causal, rows, cols, cols);
            let attn = self.dropout_node(g, attn, &mut dropout);
            x = g.add(x, attn);
            let normed = g.layer_norm(x, pn.0[layer.ln2.0], pn.0[layer.ln2.1]);
            let attn = self.mha(
                g, pn, &layer.cross_attn, normed, h_src, cross, rows, cols, src_cols,
            );
            let attn = self.dropout_node(g, attn, &mut dropout);
            x = g.add(x, attn);
            let normed = g.layer_norm(x, pn.0[layer.ln3.0], pn.0[layer.ln3.1]);
            let ff = self.ffn_block(g, pn, layer.ffn, normed);
            let ff = self.dropout_node(g, ff, &mut dropout);
            x = g.add(x, ff);
        }
        let out = g.layer_norm(x, pn.0[self.layout.dec_ln.0], pn.0[self.layout.dec_ln.1]);
        Ok(g.matmul(out, pn.0[self.layout.out_proj]))
    }

    /// Joint objective: translation NLL plus, when `predictors` is on, the
    /// deletion BCE over the round-input sequences and the insertion CE over
    /// the post-deletion sequences, each averaged per token/boundary and
    /// summed with unit weights.
    ///
    /// Supervision sequences ride the same encoder call as the translation
    /// sources. Rows are deduplicated: a supervision sequence equal to its
    /// sample's source reuses that encoder row (identical inputs yield
    /// identical states, and the backward pass sums the contributions, which
    /// is the same gradient by linearity).
    pub fn joint_loss(
        &self,
        g: &mut Graph<F>,
        pn: &ParamNodes,
        batch: &LossBatch<F>,
        predictors: bool,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<LossNodes, ModelError> {
        let b = batch.src.rows;
        let h = if predictors && batch.extra.rows > 0 {
            let union = SrcBatch::stack(&[&batch.src, &batch.extra])?;
            self.encode(
                g,
                pn,
                &union,
                dropout.as_mut().map(|d| Dropout {
                    rng: d.rng,
                    rate: d.rate,
                }),
            )?
        } else {
            self.encode(
                g,
                pn,
                &batch.src,
                dropout.as_mut().map(|d| Dropout {
                    rng: d.rng,
                    rate: d.rate,
                }),
            )?
        };
        let h_src = if batch.extra.rows > 0 {
            g.narrow(h, 0, 0, b)
        } else {
            h
        };
        let logits = self.decode_logits(g, pn, h_src, &batch.src.lens, &batch.tgt, dropout)?;
        let flat = g.reshape(
            logits,
            &[batch.tgt.rows * batch.tgt.cols, self.cfg.tgt_vocab],
        );
        let nll = g.cross_entropy(flat, &batch.tgt.target_ids, Some(PAD));

        if !predictors {
            return Ok(LossNodes {
                total: nll,
                nll,
                del: None,
                ins: None,
            });
        }

        let cols = g.value(h).dim(1);
        let d = self.cfg.d_model;
        let rows_all = g.value(h).dim(0);
        let flat_h = g.reshape(h, &[rows_all, cols * d]);
        let gather = |g: &mut Graph<F>, rows: &[u32]| {
            let picked = g.embedding(flat_h, rows, &[rows.len()]);
            g.reshape(picked, &[rows.len(), cols, d])
        };
        let h_del = gather(g, &batch.del_rows);
        let h_ins = gather(g, &batch.ins_rows);
        let del_logits = self.deletion_logits(g, pn, h_del);
        let del = g.bce_with_logits(
            del_logits,
            batch.del_targets.clone(),
            batch.del_weights.clone(),
        );
        let ins_logits = self.insertion_logits(g, pn, h_ins);
        let flat_ins = g.reshape(ins_logits, &[b * (cols - 1), self.cfg.ins_classes()]);
        let ins = g.cross_entropy(flat_ins, &batch.ins_labels, Some(INS_IGNORE));
        let total = g.sum_scalars(&[nll, del, ins]);
        Ok(LossNodes {
            total,
            nll,
            del: Some(del),
            ins: Some(ins),
        })
    }
}

/// Scalar loss nodes produced by one joint forward pass.
pub struct LossNodes {
    pub total: NodeId,
    pub nll: NodeId,
    pub del: Option<NodeId>,
    pub ins: Option<NodeId>,
}

/// Sentinel-wrapped, PAD-padded id batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SrcBatch {
    pub ids: Vec<u32>,
    pub rows: usize,
    pub cols: usize,
    /// Real length per row including the two sentinels.
    pub lens: Vec<usize>,
}

impl SrcBatch {
    pub fn build(seqs: &[&TokenSeq], max_len: usize) -> Result<SrcBatch, ModelError> {
        Self::build_with_cols(seqs, max_len, 0)
    }

    /// Builds with at least `min_cols` columns so batches can be stacked.
    pub fn build_with_cols(
        seqs: &[&TokenSeq],
        max_len: usize,
        min_cols: usize,
    ) -> Result<SrcBatch, ModelError> {
        let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0) + 2;
        if longest > max_len {
            return Err(ModelError::SequenceTooLong {
                len: longest,
                max: max_len,
            });
        }
        let cols = longest.max(min_cols);
        let rows = seqs.len();
        let mut ids = vec![PAD; rows * cols];
        let mut lens = Vec::with_capacity(rows);
        for (r, seq) in seqs.iter().enumerate() {
            let row = &mut ids[r * cols..(r + 1) * cols];
            row[0] = BOS;
            for (i, id) in seq.iter().enumerate() {
                row[1 + i] = id;
            }
            row[1 + seq.len()] = EOS;
            lens.push(seq.len() + 2);
        }
        Ok(SrcBatch {
            ids,
            rows,
            cols,
            lens,
        })
    }

    /// Stacks batches row-wise; all must share `cols`.
    pub fn stack(parts: &[&SrcBatch]) -> Result<SrcBatch, ModelError> {
        let cols = parts[0].cols;
        if parts.iter().any(|p| p.cols != cols) {
            return Err(ModelError::BadConfig(
                "stacked batches must share their column count".into(),
            ));
        }
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut ids = Vec::with_capacity(rows * cols);
        let mut lens = Vec::with_capacity(rows);
        for p in parts {
            ids.extend_from_slice(&p.ids);
            lens.extend_from_slice(&p.lens);
        }
        Ok(SrcBatch {
            ids,
            rows,
            cols,
            lens,
        })
    }
}

/// Teacher-forcing target batch: inputs are BOS-prefixed, targets are
/// EOS-suffixed, PAD elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct TgtBatch {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
    pub rows: usize,
    pub cols: usize,
}

impl TgtBatch {
    pub fn build(seqs: &[&TokenSeq], max_len: usize) -> Result<TgtBatch, ModelError> {
        let longest = seqs.iter().map(|s| s.len()).max().unwrap_or(0) + 1;
        if longest > max_len {
            return Err(ModelError::SequenceTooLong {
                len: longest,
                max: max_len,
            });
        }
        let cols = longest;
        let rows = seqs.len();
        let mut input_ids = vec![PAD; rows * cols];
        let mut target_ids = vec![PAD; rows * cols];
        for (r, seq) in seqs.iter().enumerate() {
            let inp = &mut input_ids[r * cols..(r + 1) * cols];
            inp[0] = BOS;
            for (i, id) in seq.iter().enumerate() {
                inp[1 + i] = id;
            }
            let tgt = &mut target_ids[r * cols..(r + 1) * cols];
            for (i, id) in seq.iter().enumerate() {
                tgt[i] = id;
            }
            tgt[seq.len()] = EOS;
        }
        Ok(TgtBatch {
            input_ids,
            target_ids,
            rows,
            cols,
        })
    }
}

/// One collated training batch for the joint objective. Supervision
/// sequences that differ from their sample's source sit in `extra`; the
/// per-sample row indices address the stacked [src; extra] encoder output.
pub struct LossBatch<F> {
    pub src: SrcBatch,
    pub tgt: TgtBatch,
    /// Distinct supervision sequences not present in `src`, same column
    /// count as `src`.
    pub extra: SrcBatch,
    /// Per sample: encoder row carrying the round-input (deletion) sequence.
    pub del_rows: Vec<u32>,
    /// Per sample: encoder row carrying the post-deletion (insertion)
    /// sequence.
    pub ins_rows: Vec<u32>,
    /// 0/1 delete bit per (sample, col).
    pub del_targets: Vec<F>,
    /// 1 on real token positions, 0 on sentinels and PAD.
    pub del_weights: Vec<F>,
    /// Class id per boundary slot (sample-major, cols-1 slots per sample);
    /// INS_IGNORE outside real boundaries.
    pub ins_labels: Vec<u32>,
}

/// Additive attention mask (B, H, Lq, Lk): 0 where the key column is a real
/// position of that row, a large negative number on padding.
fn pad_attn_mask<F: Scalar>(
    rows: usize,
    heads: usize,
    l_q: usize,
    l_k: usize,
    lens: &[usize],
) -> Tensor<F> {
    let neg = F::c(-1e9);
    let mut data = vec![F::zero(); rows * heads * l_q * l_k];
    for (r, &len) in lens.iter().enumerate() {
        for h in 0..heads {
            for q in 0..l_q {
                let base = ((r * heads + h) * l_q + q) * l_k;
                for slot in data[base + len..base + l_k].iter_mut() {
                    *slot = neg;
                }
            }
        }
    }
    Tensor::from_vec(&[rows, heads, l_q, l_k], data)
}

/// Additive causal mask (B, H, L, L): key j visible to query i iff j <= i.
fn causal_attn_mask<F: Scalar>(rows: usize, heads: usize, l: usize) -> Tensor<F> {
    let neg = F::c(-1e9);
    let mut data = vec![F::zero(); rows * heads * l * l];
    for r in 0..rows {
        for h in 0..heads {
            for q in 0..l {
                let base = ((r * heads + h) * l + q) * l;
                for slot in data[base + q + 1..base + l].iter_mut() {
                    *slot = neg;
                }
            }
        }
    }
    Tensor::from_vec(&[rows, heads, l, l], data)
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic "SECO", version u32 LE, header length u64 LE,
// JSON header (config + named tensor index + caller metadata), then
// little-endian f32 payloads at the recorded offsets.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    meta: Value,
}

pub fn save_checkpoint<F: Scalar>(
    path: &Path,
    model: &SecocoModel<F>,
    extras: &[(String, Tensor<F>)],
    meta: &Value,
) -> Result<(), ModelError> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    let all: Vec<(&str, &Tensor<F>)> = model
        .names
        .iter()
        .map(String::as_str)
        .zip(model.tensors.iter())
        .chain(extras.iter().map(|(n, t)| (n.as_str(), t)))
        .collect();
    for (name, t) in &all {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += (t.numel() * 4) as u64;
    }
    let header = CkptHeader {
        config: model.cfg.clone(),
        tensors: entries,
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    w.write_all(&CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, t) in &all {
        for v in t.data() {
            w.write_all(&(v.f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint; extra tensors (optimizer state) come back alongside
/// the model. Shapes are validated against the config-derived layout.
pub fn load_checkpoint<F: Scalar>(
    path: &Path,
) -> Result<(SecocoModel<F>, Vec<(String, Tensor<F>)>, Value), ModelError> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if magic != CKPT_MAGIC {
        return Err(ModelError::Checkpoint("bad magic bytes".into()));
    }
    let mut word = [0u8; 4];
    f.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CKPT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let mut lenb = [0u8; 8];
    f.read_exact(&mut lenb)?;
    let header_len = u64::from_le_bytes(lenb) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: CkptHeader = serde_json::from_slice(&header_bytes)?;
    let mut payload = Vec::new();
    f.read_to_end(&mut payload)?;

    let mut model = SecocoModel::<F>::init(header.config.clone(), 0)?;
    let mut loaded = vec![false; model.tensors.len()];
    let mut extras = Vec::new();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(ModelError::Checkpoint(format!(
                "tensor {} extends past payload",
                entry.name
            )));
        }
        let data: Vec<F> = payload[start..end]
            .chunks_exact(4)
            .map(|b| F::c(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        let tensor = Tensor::from_vec(&entry.shape, data);
        if let Some(i) = model.names.iter().position(|n| n == &entry.name) {
            if model.tensors[i].shape() != entry.shape.as_slice() {
                return Err(ModelError::Checkpoint(format!(
                    "tensor {} has shape {:?}, config implies {:?}",
                    entry.name,
                    entry.shape,
                    model.tensors[i].shape()
                )));
            }
            model.tensors[i] = tensor;
            loaded[i] = true;
        } else {
            extras.push((entry.name.clone(), tensor));
        }
    }
    if let Some(i) = loaded.iter().position(|&l| !l) {
        return Err(ModelError::Checkpoint(format!(
            "checkpoint missing parameter {}",
            model.names[i]
        )));
    }
    Ok((model, extras, header.meta))
}
