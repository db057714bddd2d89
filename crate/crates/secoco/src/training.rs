//! Data pipeline, token batching, the joint multi-task training loop, and
//! checkpointing with resume.
//!
//! All randomness derives from the run seed: batch order per (seed, epoch),
//! supervision round sampling per (seed, epoch, sample), dropout per
//! (seed, step). Training is therefore step-addressable, which is what makes
//! resume exact: a run restarted at step k consumes the same batches the
//! uninterrupted run would have.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::mpsc;
use std::sync::Arc;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::editsup::{apply_deletions, sample_supervision, EditRound, EditTrace};
use crate::eval;
use crate::inference;
use crate::model::{
    load_checkpoint, save_checkpoint, Dropout, LossBatch, ModelConfig, ModelError, SecocoModel,
    SrcBatch, TgtBatch, INS_IGNORE,
};
use crate::noise::CorpusRecord;
use crate::numerics::{Adam, AdamHyper, Graph, Scalar, Tensor};
use crate::split_seed;
use crate::textops::{TokenSeq, EMPTY};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("loss became non-finite at step {step}; offending batch dumped to {dump}")]
    NonFiniteLoss { step: u64, dump: PathBuf },
    #[error("no usable training samples")]
    NoData,
    #[error("unknown training mode {0:?} (expected secoco, base, base-synthetic)")]
    BadMode(String),
}

/// Which loss terms and data mix are active.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Noisy+clean mix, predictor heads trained jointly.
    #[default]
    Secoco,
    /// Clean data only, predictor terms off.
    Base,
    /// Noisy+clean mix, predictor terms off.
    BaseSynthetic,
}

impl FromStr for TrainMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "secoco" => Ok(TrainMode::Secoco),
            "base" => Ok(TrainMode::Base),
            "base-synthetic" | "base_synthetic" => Ok(TrainMode::BaseSynthetic),
            other => Err(TrainError::BadMode(other.to_string())),
        }
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainMode::Secoco => "secoco",
            TrainMode::Base => "base",
            TrainMode::BaseSynthetic => "base-synthetic",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    /// Token budget per batch (rows x padded length, source side).
    pub batch_tokens: usize,
    pub max_steps: u64,
    pub warmup_steps: u64,
    pub base_lr: f64,
    pub seed: u64,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub mode: TrainMode,
    /// Bounded prefetch queue between the batch producer and the trainer.
    pub queue_depth: usize,
    /// Cap on validation sentences scored per eval.
    pub valid_cap: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_tokens: 2000,
            max_steps: 5000,
            warmup_steps: 400,
            base_lr: 2e-3,
            seed: 0,
            log_interval: 50,
            eval_interval: 500,
            mode: TrainMode::Secoco,
            queue_depth: 4,
            valid_cap: 200,
        }
    }
}

/// Inverse-square-root schedule with linear warmup.
pub fn inverse_sqrt_lr(base: f64, warmup: u64, step: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    if s < w {
        base * s / w
    } else {
        base * (w / s).sqrt()
    }
}

/// One training example: a source (noisy or clean), its clean form, the
/// target, and the trace supplying edit supervision (empty = identity).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub src: TokenSeq,
    pub clean: TokenSeq,
    pub target: TokenSeq,
    pub trace: EditTrace,
}

impl Sample {
    /// Padded-length cost used for token batching; trace intermediates never
    /// exceed max(noisy, clean).
    fn cost(&self) -> usize {
        let src = self.src.len().max(self.clean.len()) + 2;
        src.max(self.target.len() + 1)
    }
}

/// Expands corpus records into the mode's data mix. Noisy-aware modes pair
/// every record's noisy sample with a clean identity-supervision sample.
pub fn build_samples(records: &[CorpusRecord], mode: TrainMode) -> Vec<Sample> {
    let mut out = Vec::new();
    for rec in records {
        if mode != TrainMode::Base {
            out.push(Sample {
                src: rec.noisy.clone(),
                clean: rec.clean.clone(),
                target: rec.target.clone(),
                trace: rec.trace.clone(),
            });
        }
        out.push(Sample {
            src: rec.clean.clone(),
            clean: rec.clean.clone(),
            target: rec.target.clone(),
            trace: EditTrace::empty(),
        });
    }
    out
}

/// Length-bucketed batches for one epoch: shuffle by (seed, epoch), stable
/// sort by cost, chunk under the token budget, shuffle batch order. Batch
/// composition depends only on the cost multiset, so every epoch has the
/// same batch count.
pub fn plan_epoch(costs: &[usize], batch_tokens: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, "shuffle", epoch));
    let mut idx: Vec<usize> = (0..costs.len()).collect();
    shuffle(&mut idx, &mut rng);
    idx.sort_by_key(|&i| costs[i]);
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut max_cost = 0usize;
    for i in idx {
        let cost = costs[i].max(1);
        let new_max = max_cost.max(cost);
        if !cur.is_empty() && (cur.len() + 1) * new_max > batch_tokens {
            batches.push(std::mem::take(&mut cur));
            max_cost = 0;
        }
        max_cost = max_cost.max(cost);
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    shuffle(&mut batches, &mut rng);
    batches
}

fn shuffle<T, R: rand::Rng + ?Sized>(items: &mut [T], rng: &mut R) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Collates samples into one loss batch, sampling one supervision round per
/// sample from the given seeds. Supervision sequences equal to an existing
/// row are deduplicated into encoder row references.
pub fn collate<F: Scalar>(
    samples: &[&Sample],
    cfg: &ModelConfig,
    sup_seeds: &[u64],
) -> Result<LossBatch<F>, TrainError> {
    let mut sups = Vec::with_capacity(samples.len());
    for (s, &seed) in samples.iter().zip(sup_seeds) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sup = sample_supervision(&s.src, &s.trace, &mut rng)
            .expect("corpus traces replay over their own rounds");
        sups.push(sup);
    }
    let cols = samples
        .iter()
        .zip(&sups)
        .map(|(s, sup)| {
            (s.src.len() + 2)
                .max(sup.del_seq.len() + 2)
                .max(sup.ins_seq.len() + 2)
        })
        .max()
        .unwrap_or(3);

    let rows = samples.len();
    let mut extra_seqs: Vec<TokenSeq> = Vec::new();
    let mut del_rows = Vec::with_capacity(rows);
    let mut ins_rows = Vec::with_capacity(rows);
    let mut add_row = |seq: &TokenSeq, own_src: &TokenSeq, own_row: usize| -> u32 {
        if seq == own_src {
            own_row as u32
        } else if let Some(j) = extra_seqs.iter().position(|e| e == seq) {
            (rows + j) as u32
        } else {
            extra_seqs.push(seq.clone());
            (rows + extra_seqs.len() - 1) as u32
        }
    };
    for (r, (s, sup)) in samples.iter().zip(&sups).enumerate() {
        del_rows.push(add_row(&sup.del_seq, &s.src, r));
        ins_rows.push(add_row(&sup.ins_seq, &s.src, r));
    }

    let srcs: Vec<&TokenSeq> = samples.iter().map(|s| &s.src).collect();
    let tgts: Vec<&TokenSeq> = samples.iter().map(|s| &s.target).collect();
    let extras: Vec<&TokenSeq> = extra_seqs.iter().collect();
    let src = SrcBatch::build_with_cols(&srcs, cfg.max_len, cols)?;
    let extra = SrcBatch::build_with_cols(&extras, cfg.max_len, cols)?;
    let tgt = TgtBatch::build(&tgts, cfg.max_len)?;

    let mut del_targets = vec![F::zero(); rows * cols];
    let mut del_weights = vec![F::zero(); rows * cols];
    for (r, sup) in sups.iter().enumerate() {
        for (i, &bit) in sup.del_mask.iter().enumerate() {
            del_targets[r * cols + 1 + i] = if bit { F::one() } else { F::zero() };
            del_weights[r * cols + 1 + i] = F::one();
        }
    }
    let slots = cols - 1;
    let mut ins_labels = vec![INS_IGNORE; rows * slots];
    for (r, sup) in sups.iter().enumerate() {
        for (j, &label) in sup.ins_labels.iter().enumerate() {
            ins_labels[r * slots + j] = if label == EMPTY {
                cfg.no_insert_class()
            } else {
                label
            };
        }
    }
    Ok(LossBatch {
        src,
        tgt,
        extra,
        del_rows,
        ins_rows,
        del_targets,
        del_weights,
        ins_labels,
    })
}

/// One line of the JSONL metrics log. Contains no wall-clock fields, so two
/// identically seeded runs produce byte-identical logs.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MetricsEntry {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub nll: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub del: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ins: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid_bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub del_f1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ins_acc: Option<f64>,
}

pub struct TrainOutcome<F: Scalar> {
    pub model: SecocoModel<F>,
    pub metrics: Vec<MetricsEntry>,
    pub steps: u64,
    pub last_ckpt: PathBuf,
    pub best_ckpt: PathBuf,
    pub skipped_overlong: usize,
}

/// Validation scores on the noisy side: greedy-decode BLEU plus
/// teacher-forced first-round edit metrics.
pub fn validate<F: Scalar>(
    model: &SecocoModel<F>,
    records: &[CorpusRecord],
    cap: usize,
) -> Result<(f64, Option<eval::EditScores>), TrainError> {
    let subset = &records[..records.len().min(cap)];
    if subset.is_empty() {
        return Ok((0.0, None));
    }
    let noisy_refs: Vec<&TokenSeq> = subset.iter().map(|r| &r.noisy).collect();
    let outs = inference::translate_batch_greedy(model, &noisy_refs)?;
    let hyps: Vec<Vec<String>> = outs.iter().map(ids_as_tokens).collect();
    let refs: Vec<Vec<String>> = subset.iter().map(|r| ids_as_tokens(&r.target)).collect();
    let bleu = eval::bleu4(&hyps, &refs).unwrap_or(0.0);

    let noisy: Vec<&TokenSeq> = subset.iter().map(|r| &r.noisy).collect();
    let gold_rounds: Vec<EditRound> = subset
        .iter()
        .map(|r| {
            r.trace
                .rounds
                .first()
                .cloned()
                .unwrap_or_else(|| EditRound::identity(r.noisy.len()))
        })
        .collect();
    let post_del: Vec<TokenSeq> = subset
        .iter()
        .zip(&gold_rounds)
        .map(|(r, g)| apply_deletions(&r.noisy, &g.del_mask).expect("gold mask fits noisy"))
        .collect();
    let post_refs: Vec<&TokenSeq> = post_del.iter().collect();
    let masks = inference::predict_del_masks(model, &noisy, 0.5)?;
    let labels = inference::predict_ins_labels(model, &post_refs)?;
    let pred: Vec<EditTrace> = masks
        .into_iter()
        .zip(labels)
        .map(|(del_mask, ins_labels)| EditTrace {
            rounds: vec![EditRound {
                del_mask,
                ins_labels,
            }],
        })
        .collect();
    let gold: Vec<EditTrace> = gold_rounds
        .into_iter()
        .map(|r| EditTrace { rounds: vec![r] })
        .collect();
    let inputs: Vec<TokenSeq> = subset.iter().map(|r| r.noisy.clone()).collect();
    let scores = eval::edit_metrics(&pred, &gold, &inputs).ok();
    Ok((bleu, scores))
}

/// Injective id-to-token map so validation BLEU equals surface BLEU without
/// threading vocabularies through the trainer.
fn ids_as_tokens(seq: &TokenSeq) -> Vec<String> {
    seq.iter().map(|id| id.to_string()).collect()
}

fn adam_extras<F: Scalar>(model: &SecocoModel<F>, adam: &Adam<F>) -> Vec<(String, Tensor<F>)> {
    let (m, v) = adam.moments();
    model
        .names()
        .iter()
        .zip(m)
        .map(|(n, t)| (format!("adam.m.{n}"), t.clone()))
        .chain(
            model
                .names()
                .iter()
                .zip(v)
                .map(|(n, t)| (format!("adam.v.{n}"), t.clone())),
        )
        .collect()
}

fn adam_from_extras<F: Scalar>(
    model: &SecocoModel<F>,
    extras: &[(String, Tensor<F>)],
    hyper: AdamHyper,
    step: u64,
) -> Result<Adam<F>, TrainError> {
    let find = |name: String| -> Result<Tensor<F>, TrainError> {
        extras
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| {
                TrainError::Model(ModelError::Checkpoint(format!(
                    "resume checkpoint lacks optimizer tensor {name}"
                )))
            })
    };
    let mut m = Vec::new();
    let mut v = Vec::new();
    for n in model.names() {
        m.push(find(format!("adam.m.{n}"))?);
        v.push(find(format!("adam.v.{n}"))?);
    }
    Ok(Adam::from_state(hyper, m, v, step))
}

/// Runs (or resumes) training: writes `metrics.jsonl`, `last.ckpt`, and
/// `best.ckpt` (by noisy-validation BLEU) under `out_dir`.
pub fn train<F: Scalar>(
    model_cfg: &ModelConfig,
    tcfg: &TrainConfig,
    train_records: &[CorpusRecord],
    valid_records: &[CorpusRecord],
    out_dir: &Path,
    resume: bool,
    config_echo: &Value,
) -> Result<TrainOutcome<F>, TrainError> {
    fs::create_dir_all(out_dir)?;
    let last_ckpt = out_dir.join("last.ckpt");
    let best_ckpt = out_dir.join("best.ckpt");
    let metrics_path = out_dir.join("metrics.jsonl");

    let all = build_samples(train_records, tcfg.mode);
    let mut skipped = 0usize;
    let samples: Vec<Sample> = all
        .into_iter()
        .filter(|s| {
            let fits = s.cost() <= model_cfg.max_len;
            if !fits {
                skipped += 1;
            }
            fits
        })
        .collect();
    if samples.is_empty() {
        return Err(TrainError::NoData);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} sentences exceeding max_len {}", model_cfg.max_len);
    }

    let hyper = AdamHyper {
        lr: tcfg.base_lr,
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-8,
    };
    let (mut model, mut adam, start_step) = if resume && last_ckpt.exists() {
        let (model, extras, meta) = load_checkpoint::<F>(&last_ckpt)?;
        let step = meta
            .get("step")
            .and_then(Value::as_u64)
            .ok_or_else(|| TrainError::Model(ModelError::Checkpoint("missing step".into())))?;
        let adam = adam_from_extras(&model, &extras, hyper, step)?;
        log::info!("resumed from {} at step {step}", last_ckpt.display());
        (model, adam, step)
    } else {
        let model = SecocoModel::init(model_cfg.clone(), split_seed(tcfg.seed, "init", 0))?;
        let shapes: Vec<&[usize]> = model.tensors().iter().map(|t| t.shape()).collect();
        let adam = Adam::new(&shapes, hyper);
        (model, adam, 0)
    };

    let mut metrics: Vec<MetricsEntry> = Vec::new();
    let mut log_file = BufWriter::new(if start_step == 0 {
        let mut f = fs::File::create(&metrics_path)?;
        serde_json::to_writer(&mut f, &json!({ "config": config_echo }))?;
        f.write_all(b"\n")?;
        f
    } else {
        fs::OpenOptions::new().append(true).open(&metrics_path)?
    });

    // batch producer: prefetches collated batches through a bounded queue
    let shared = Arc::new(samples);
    let costs: Vec<usize> = shared.iter().map(Sample::cost).collect();
    let bpe = plan_epoch(&costs, tcfg.batch_tokens, tcfg.seed, 0).len() as u64;
    let (tx, rx) = mpsc::sync_channel::<(u64, LossBatch<F>, Vec<usize>)>(tcfg.queue_depth.max(1));
    let producer = {
        let samples = Arc::clone(&shared);
        let cfg = model_cfg.clone();
        let tcfg = tcfg.clone();
        let costs = costs.clone();
        thread::spawn(move || {
            let n = samples.len() as u64;
            let mut plan: Vec<Vec<usize>> = Vec::new();
            let mut plan_epoch_idx = u64::MAX;
            for step in start_step + 1..=tcfg.max_steps {
                let epoch = (step - 1) / bpe;
                if epoch != plan_epoch_idx {
                    plan = plan_epoch(&costs, tcfg.batch_tokens, tcfg.seed, epoch);
                    plan_epoch_idx = epoch;
                }
                let idxs = &plan[((step - 1) % bpe) as usize];
                let refs: Vec<&Sample> = idxs.iter().map(|&i| &samples[i]).collect();
                let seeds: Vec<u64> = idxs
                    .iter()
                    .map(|&i| split_seed(tcfg.seed, "sup", epoch * n + i as u64))
                    .collect();
                let batch = match collate::<F>(&refs, &cfg, &seeds) {
                    Ok(b) => b,
                    Err(_) => break,
                };
                if tx.send((step, batch, idxs.clone())).is_err() {
                    break;
                }
            }
        })
    };

    let predictors = tcfg.mode == TrainMode::Secoco;
    let mut best_bleu = f64::NEG_INFINITY;
    let mut final_step = start_step;
    for (step, batch, idxs) in rx {
        let mut g = Graph::new();
        let pn = model.leaves(&mut g);
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(split_seed(tcfg.seed, "dropout", step));
        let dropout = (model_cfg.dropout > 0.0).then(|| Dropout {
            rng: &mut dropout_rng,
            rate: model_cfg.dropout,
        });
        let losses = model.joint_loss(&mut g, &pn, &batch, predictors, dropout)?;
        let total = g.scalar_f64(losses.total);
        if !total.is_finite() {
            let dump = out_dir.join("nan_batch.json");
            let payload = json!({
                "step": step,
                "sample_indices": idxs,
                "src_ids": idxs.iter().map(|&i| shared[i].src.ids().to_vec()).collect::<Vec<_>>(),
                "loss": format!("{total}"),
            });
            fs::write(&dump, serde_json::to_vec_pretty(&payload)?)?;
            return Err(TrainError::NonFiniteLoss { step, dump });
        }
        g.backward(losses.total)?;
        let grads = model.grads(&g, &pn);
        let lr = inverse_sqrt_lr(tcfg.base_lr, tcfg.warmup_steps, step);
        adam.step(model.tensors_mut(), &grads, lr);
        final_step = step;

        let mut entry = None;
        if step % tcfg.log_interval == 0 || step == 1 || step == tcfg.max_steps {
            entry = Some(MetricsEntry {
                step,
                lr,
                loss: total,
                nll: g.scalar_f64(losses.nll),
                del: losses.del.map(|n| g.scalar_f64(n)),
                ins: losses.ins.map(|n| g.scalar_f64(n)),
                valid_bleu: None,
                del_f1: None,
                ins_acc: None,
            });
        }
        if step % tcfg.eval_interval == 0 || step == tcfg.max_steps {
            let (bleu, edit) = validate(&model, valid_records, tcfg.valid_cap)?;
            let e = entry.get_or_insert(MetricsEntry {
                step,
                lr,
                loss: total,
                nll: g.scalar_f64(losses.nll),
                del: losses.del.map(|n| g.scalar_f64(n)),
                ins: losses.ins.map(|n| g.scalar_f64(n)),
                valid_bleu: None,
                del_f1: None,
                ins_acc: None,
            });
            e.valid_bleu = Some(bleu);
            if let Some(s) = edit {
                e.del_f1 = Some(s.del_f1);
                e.ins_acc = Some(s.ins_accuracy);
            }
            let meta = json!({
                "step": step,
                "adam": adam.hyper(),
                "config": config_echo,
            });
            save_checkpoint(&last_ckpt, &model, &adam_extras(&model, &adam), &meta)?;
            if bleu > best_bleu {
                best_bleu = bleu;
                save_checkpoint(&best_ckpt, &model, &[], &meta)?;
            }
        }
        if let Some(e) = entry {
            serde_json::to_writer(&mut log_file, &e)?;
            log_file.write_all(b"\n")?;
            log::info!(
                "step {} loss {:.4} nll {:.4} lr {:.2e}{}",
                e.step,
                e.loss,
                e.nll,
                e.lr,
                e.valid_bleu
                    .map(|b| format!(" valid_bleu {b:.2}"))
                    .unwrap_or_default()
            );
            metrics.push(e);
        }
    }
    let _ = producer.join();
    log_file.flush()?;

    if final_step == start_step && start_step < tcfg.max_steps {
        // producer stopped before delivering a single batch
        return Err(TrainError::NoData);
    }
    if !best_ckpt.exists() {
        let meta = json!({ "step": final_step, "adam": adam.hyper(), "config": config_echo });
        save_checkpoint(&best_ckpt, &model, &[], &meta)?;
    }
    Ok(TrainOutcome {
        model,
        metrics,
        steps: final_step,
        last_ckpt,
        best_ckpt,
        skipped_overlong: skipped,
    })
}
