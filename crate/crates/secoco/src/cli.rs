//! Operator surface: synth, train, translate, and eval subcommands over a
//! single JSON run config. Every config field can be overridden on the
//! command line with `--set path.to.field=value`; a handful of common knobs
//! get dedicated flags. All randomness flows from the run seed, split per
//! subsystem, so any artifact is reproducible from its echoed config.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::eval::{self, EvalReport};
use crate::inference;
use crate::model::{load_checkpoint, ModelConfig, SecocoModel};
use crate::noise::{
    draw_ops, inject_noise_with_ops, read_corpus, synth_task, CorpusRecord,
    NoiseCounts, NoiseSpec, TaskSpec,
};
use crate::split_seed;
use crate::textops::{tokenize, TokenSeq, Vocab};
use crate::training::{self, train, TrainConfig, TrainMode};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Text(#[from] crate::textops::TextError),
    #[error(transparent)]
    Noise(#[from] crate::noise::NoiseError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Splits {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl Default for Splits {
    fn default() -> Self {
        Splits {
            train: 5000,
            valid: 500,
            test: 500,
        }
    }
}

/// Union of all subsystem configs plus paths. The top-level seed is the
/// single randomness source; per-subsystem seeds are derived from it.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub noise: NoiseSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub splits: Splits,
    pub data_dir: PathBuf,
    pub ckpt_dir: PathBuf,
    pub max_vocab: usize,
    pub beam: usize,
    pub max_iters: usize,
    pub del_threshold: f64,
    /// Sentences timed per latency measurement (0 = whole test set).
    pub latency_cap: usize,
    pub latency_warmup: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            task: TaskSpec::default(),
            noise: NoiseSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            splits: Splits::default(),
            data_dir: PathBuf::from("data"),
            ckpt_dir: PathBuf::from("runs"),
            max_vocab: 1000,
            beam: 5,
            max_iters: 5,
            del_threshold: 0.5,
            latency_cap: 200,
            latency_warmup: 5,
        }
    }
}

impl RunConfig {
    pub fn echo(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    fn src_vocab_path(&self) -> PathBuf {
        self.data_dir.join("src.vocab")
    }

    fn tgt_vocab_path(&self) -> PathBuf {
        self.data_dir.join("tgt.vocab")
    }

    fn split_path(&self, name: &str) -> PathBuf {
        self.data_dir.join(format!("{name}.jsonl"))
    }

    fn load_vocabs(&self) -> Result<(Vocab, Vocab), CliError> {
        Ok((
            Vocab::load(&self.src_vocab_path())?,
            Vocab::load(&self.tgt_vocab_path())?,
        ))
    }

    fn load_split(&self, name: &str, src: &Vocab, tgt: &Vocab) -> Result<Vec<CorpusRecord>, CliError> {
        Ok(read_corpus(&self.split_path(name), src, tgt)?)
    }

    fn default_checkpoint(&self) -> PathBuf {
        self.ckpt_dir.join("secoco").join("best.ckpt")
    }
}

/// Loads a config file (or defaults), applies `--set path=value` overrides,
/// then an optional seed override.
pub fn load_config(
    path: Option<&Path>,
    sets: &[String],
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let mut value: Value = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => json!({}),
    };
    for set in sets {
        let (key, raw) = set
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects path=value, got {set:?}")))?;
        let parsed: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
        let mut slot = &mut value;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .ok_or_else(|| CliError::Config(format!("cannot descend into {key}")))?
                .entry(part)
                .or_insert(json!({}));
        }
        *slot = parsed;
    }
    let mut cfg: RunConfig = serde_json::from_value(value)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    // derived subsystem seeds; the config seed is the single source
    cfg.noise.seed = split_seed(cfg.seed, "noise", 0);
    cfg.train.seed = split_seed(cfg.seed, "train", 0);
    Ok(cfg)
}

#[derive(Parser)]
#[command(name = "secoco", version, about = "Self-correcting encoding: noisy-data synthesis, joint training, and robust decoding")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Field override, repeatable: --set train.max_steps=100
    #[arg(long = "set")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate vocabularies and noisy train/valid/test splits with traces.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory (defaults to the config's data_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model in one of the three modes.
    Train {
        #[command(flatten)]
        common: Common,
        /// secoco | base | base-synthetic (defaults to the config's mode).
        #[arg(long)]
        mode: Option<String>,
        /// Continue from the run directory's last checkpoint.
        #[arg(long)]
        resume: bool,
        /// Run directory (defaults to ckpt_dir/<mode>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Translate a text file of noisy sources.
    Translate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Input file, one sentence per line.
        #[arg(long)]
        input: PathBuf,
        /// e2e | edit
        #[arg(long, default_value = "e2e")]
        mode: String,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Write per-sentence edit traces alongside the translations.
        #[arg(long)]
        show_edits: bool,
        /// Output file (stdout when omitted; edits go to <out>.edits).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split: BLEU, edit metrics, latency.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated decode modes to score.
        #[arg(long, default_value = "e2e,edit")]
        modes: String,
        /// Report path (defaults to <checkpoint dir>/eval.json).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump the k worst sentences by sentence BLEU.
        #[arg(long)]
        worst: Option<usize>,
    },
}

/// Entry point for the binary. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SECOCO_LOG", "warn"))
        .try_init()
        .ok();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap handles --help/--version through this path
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Synth { common, out } => {
            let mut cfg = load_config(common.config.as_deref(), &common.sets, common.seed)?;
            if let Some(dir) = out {
                cfg.data_dir = dir;
            }
            let stats = cmd_synth(&cfg)?;
            print!("{}", render_synth_stats(&cfg, &stats));
            Ok(())
        }
        Cmd::Train {
            common,
            mode,
            resume,
            out,
        } => {
            let mut cfg = load_config(common.config.as_deref(), &common.sets, common.seed)?;
            if let Some(m) = mode {
                cfg.train.mode = TrainMode::from_str(&m)?;
            }
            let summary = cmd_train(&cfg, resume, out)?;
            println!(
                "trained {} steps (mode {}), checkpoints in {}",
                summary.steps,
                cfg.train.mode,
                summary.run_dir.display()
            );
            Ok(())
        }
        Cmd::Translate {
            common,
            checkpoint,
            input,
            mode,
            beam,
            max_iters,
            show_edits,
            out,
        } => {
            let mut cfg = load_config(common.config.as_deref(), &common.sets, common.seed)?;
            if let Some(b) = beam {
                cfg.beam = b;
            }
            if let Some(m) = max_iters {
                cfg.max_iters = m;
            }
            cmd_translate(
                &cfg,
                &TranslateOpts {
                    checkpoint,
                    input,
                    mode: DecodeMode::from_str(&mode)?,
                    show_edits,
                    out,
                },
            )
        }
        Cmd::Eval {
            common,
            checkpoint,
            modes,
            out,
            worst,
        } => {
            let cfg = load_config(common.config.as_deref(), &common.sets, common.seed)?;
            let modes = modes
                .split(',')
                .filter(|s| !s.is_empty())
                .map(DecodeMode::from_str)
                .collect::<Result<Vec<_>, _>>()?;
            let report = cmd_eval(&cfg, checkpoint, &modes, worst, out.clone())?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    E2e,
    Edit,
}

impl FromStr for DecodeMode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "e2e" => Ok(DecodeMode::E2e),
            "edit" => Ok(DecodeMode::Edit),
            other => Err(CliError::Config(format!(
                "unknown decode mode {other:?} (expected e2e or edit)"
            ))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::E2e => "e2e",
            DecodeMode::Edit => "edit",
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SynthStats {
    pub sentences: usize,
    pub counts: NoiseCounts,
}

/// Synthesizes the task corpus, builds vocabularies from the training split,
/// injects noise with recorded traces, and writes all artifacts.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthStats, CliError> {
    cfg.task.validate()?;
    cfg.noise.validate()?;
    fs::create_dir_all(&cfg.data_dir)?;
    let n_total = cfg.splits.train + cfg.splits.valid + cfg.splits.test;
    let mut task_rng = ChaCha8Rng::seed_from_u64(split_seed(cfg.seed, "task", 0));
    let pairs = synth_task(&cfg.task, n_total, &mut task_rng)?;

    let train_pairs = &pairs[..cfg.splits.train];
    let src_sents: Vec<&[String]> = train_pairs.iter().map(|(s, _)| s.as_slice()).collect();
    let tgt_sents: Vec<&[String]> = train_pairs.iter().map(|(_, t)| t.as_slice()).collect();
    let src_vocab = Vocab::build(src_sents, cfg.max_vocab)?;
    let tgt_vocab = Vocab::build(tgt_sents, cfg.max_vocab)?;
    src_vocab.save(&cfg.src_vocab_path())?;
    tgt_vocab.save(&cfg.tgt_vocab_path())?;

    let mut counts = NoiseCounts::default();
    let mut records = Vec::with_capacity(n_total);
    for (i, (src, tgt)) in pairs.iter().enumerate() {
        let clean = src_vocab.encode(src);
        let target = tgt_vocab.encode(tgt);
        let mut rng =
            ChaCha8Rng::seed_from_u64(split_seed(cfg.noise.seed, "sentence", i as u64));
        let ops = draw_ops(&clean, &cfg.noise, &src_vocab, &mut rng);
        counts.add_ops(&ops, clean.len());
        let pair = inject_noise_with_ops(&clean, &ops)?;
        records.push(CorpusRecord {
            clean,
            noisy: pair.noisy,
            target,
            trace: pair.trace,
        });
    }

    let (a, b) = (cfg.splits.train, cfg.splits.train + cfg.splits.valid);
    crate::noise::write_corpus(&cfg.split_path("train"), &records[..a], &src_vocab, &tgt_vocab)?;
    crate::noise::write_corpus(&cfg.split_path("valid"), &records[a..b], &src_vocab, &tgt_vocab)?;
    crate::noise::write_corpus(&cfg.split_path("test"), &records[b..], &src_vocab, &tgt_vocab)?;

    let stats = SynthStats {
        sentences: n_total,
        counts,
    };
    let meta = json!({ "config": cfg.echo(), "stats": stats });
    fs::write(
        cfg.data_dir.join("synth_meta.json"),
        serde_json::to_vec_pretty(&meta)?,
    )?;
    Ok(stats)
}

/// Per-category counts and empirical rates next to their nominal settings.
pub fn render_synth_stats(cfg: &RunConfig, stats: &SynthStats) -> String {
    let c = &stats.counts;
    let pos = c.positions.max(1) as f64;
    let bnd = c.boundaries.max(1) as f64;
    format!(
        "sentences: {}\npositions: {}\nrandom deletion: {} (rate {:.4}, nominal {:.4})\nrandom insertion: {} (rate {:.4}, nominal {:.4})\nrepeated words: {} (rate {:.4}, nominal {:.4})\ntypos: {} (rate {:.4}, nominal {:.4})\n",
        stats.sentences,
        c.positions,
        c.deletions,
        c.deletions as f64 / pos,
        cfg.noise.p_delete,
        c.insertions,
        c.insertions as f64 / bnd,
        cfg.noise.p_insert,
        c.repeats,
        c.repeats as f64 / pos,
        cfg.noise.p_repeat,
        c.typos,
        c.typos as f64 / pos,
        cfg.noise.p_typo,
    )
}

pub struct TrainSummary {
    pub steps: u64,
    pub run_dir: PathBuf,
    pub last_ckpt: PathBuf,
    pub best_ckpt: PathBuf,
}

/// Trains in the config's mode and writes checkpoints plus the metrics log.
pub fn cmd_train(
    cfg: &RunConfig,
    resume: bool,
    out: Option<PathBuf>,
) -> Result<TrainSummary, CliError> {
    let (src_vocab, tgt_vocab) = cfg.load_vocabs()?;
    let train_recs = cfg.load_split("train", &src_vocab, &tgt_vocab)?;
    let valid_recs = cfg.load_split("valid", &src_vocab, &tgt_vocab)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.src_vocab = src_vocab.size();
    model_cfg.tgt_vocab = tgt_vocab.size();
    let run_dir = out.unwrap_or_else(|| cfg.ckpt_dir.join(cfg.train.mode.to_string()));
    let outcome = train::<f32>(
        &model_cfg,
        &cfg.train,
        &train_recs,
        &valid_recs,
        &run_dir,
        resume,
        &cfg.echo(),
    )?;
    Ok(TrainSummary {
        steps: outcome.steps,
        run_dir,
        last_ckpt: outcome.last_ckpt,
        best_ckpt: outcome.best_ckpt,
    })
}

pub struct TranslateOpts {
    pub checkpoint: Option<PathBuf>,
    pub input: PathBuf,
    pub mode: DecodeMode,
    pub show_edits: bool,
    pub out: Option<PathBuf>,
}

fn load_model_checked(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(SecocoModel<f32>, Vocab, Vocab), CliError> {
    let (src_vocab, tgt_vocab) = cfg.load_vocabs()?;
    let path = checkpoint
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.default_checkpoint());
    let (model, _, _) = load_checkpoint::<f32>(&path)?;
    if model.cfg().src_vocab != src_vocab.size() || model.cfg().tgt_vocab != tgt_vocab.size() {
        return Err(CliError::Config(format!(
            "checkpoint was trained with vocab sizes {}x{}, data dir has {}x{}",
            model.cfg().src_vocab,
            model.cfg().tgt_vocab,
            src_vocab.size(),
            tgt_vocab.size()
        )));
    }
    Ok((model, src_vocab, tgt_vocab))
}

/// Translates a file of sources line by line; `--show-edits` renders each
/// sentence's iteration diffs next to the output.
pub fn cmd_translate(cfg: &RunConfig, opts: &TranslateOpts) -> Result<(), CliError> {
    let (model, src_vocab, tgt_vocab) = load_model_checked(cfg, opts.checkpoint.as_deref())?;
    let text = fs::read_to_string(&opts.input)?;
    let mut translations = String::new();
    let mut edits = String::new();
    for (i, line) in text.lines().enumerate() {
        let tokens = tokenize(line, cfg.task.tokenize_mode);
        let src = src_vocab.encode(&tokens);
        let out = match opts.mode {
            DecodeMode::E2e => inference::translate_e2e(&model, &src, cfg.beam)?,
            DecodeMode::Edit => {
                let (out, edit) = inference::translate_edit(
                    &model,
                    &src,
                    cfg.beam,
                    cfg.max_iters,
                    cfg.del_threshold,
                )?;
                if opts.show_edits {
                    edits.push_str(&format!(
                        "sentence {}: {} iterations{}\n{}",
                        i + 1,
                        edit.n_iters,
                        if edit.converged { "" } else { " (not converged)" },
                        inference::render_trace(&src, &edit.trace, &src_vocab),
                    ));
                }
                out
            }
        };
        translations.push_str(&tgt_vocab.decode_to_string(&out, cfg.task.tokenize_mode));
        translations.push('\n');
    }
    match &opts.out {
        Some(path) => {
            fs::write(path, &translations)?;
            if opts.show_edits {
                fs::write(path.with_extension("edits"), &edits)?;
            }
        }
        None => {
            print!("{translations}");
            if opts.show_edits {
                print!("{edits}");
            }
        }
    }
    Ok(())
}

/// Scores a checkpoint on the test split; one report block per decode mode,
/// teacher-forced edit metrics shared across blocks.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<PathBuf>,
    modes: &[DecodeMode],
    worst: Option<usize>,
    out: Option<PathBuf>,
) -> Result<Value, CliError> {
    let (model, src_vocab, tgt_vocab) = load_model_checked(cfg, checkpoint.as_deref())?;
    let test = cfg.load_split("test", &src_vocab, &tgt_vocab)?;
    if test.is_empty() {
        return Err(CliError::Eval(eval::EvalError::EmptyCorpus));
    }
    let refs: Vec<Vec<String>> = test.iter().map(|r| tgt_vocab.decode(&r.target)).collect();
    let (_, edit_scores) = training::validate(&model, &test, test.len())?;
    let latency_set: Vec<TokenSeq> = test
        .iter()
        .take(if cfg.latency_cap == 0 {
            test.len()
        } else {
            cfg.latency_cap
        })
        .map(|r| r.noisy.clone())
        .collect();

    let mut blocks = BTreeMap::new();
    let mut worst_dump = String::new();
    for mode in modes {
        let mut hyps = Vec::with_capacity(test.len());
        let mut iters = Vec::new();
        for rec in &test {
            let out = match mode {
                DecodeMode::E2e => inference::translate_e2e(&model, &rec.noisy, cfg.beam)?,
                DecodeMode::Edit => {
                    let (out, edit) = inference::translate_edit(
                        &model,
                        &rec.noisy,
                        cfg.beam,
                        cfg.max_iters,
                        cfg.del_threshold,
                    )?;
                    iters.push(edit.n_iters as f64);
                    out
                }
            };
            hyps.push(tgt_vocab.decode(&out));
        }
        let bleu = eval::bleu4(&hyps, &refs)?;
        let latency_ms = match mode {
            DecodeMode::E2e => eval::measure_latency(
                |s| inference::translate_e2e(&model, s, cfg.beam),
                &latency_set,
                cfg.latency_warmup,
            )?,
            DecodeMode::Edit => eval::measure_latency(
                |s| {
                    inference::translate_edit(&model, s, cfg.beam, cfg.max_iters, cfg.del_threshold)
                },
                &latency_set,
                cfg.latency_warmup,
            )?,
        };
        let avg_iterations = if iters.is_empty() {
            None
        } else {
            Some(iters.iter().sum::<f64>() / iters.len() as f64)
        };
        blocks.insert(
            mode.to_string(),
            EvalReport {
                bleu,
                edit: edit_scores.clone(),
                avg_iterations,
                latency_ms: Some(latency_ms),
            },
        );
        if let Some(k) = worst {
            worst_dump.push_str(&format!("# mode {mode}\n"));
            for (i, score) in eval::worst_k(&hyps, &refs, k) {
                worst_dump.push_str(&format!(
                    "sentence {} bleu {score:.2}\n  src: {}\n  hyp: {}\n  ref: {}\n",
                    i + 1,
                    src_vocab
                        .decode_to_string(&test[i].noisy, cfg.task.tokenize_mode),
                    crate::textops::detokenize(&hyps[i], cfg.task.tokenize_mode),
                    crate::textops::detokenize(&refs[i], cfg.task.tokenize_mode),
                ));
            }
        }
    }
    let report = json!({ "config": cfg.echo(), "modes": blocks });
    let out_path = out.unwrap_or_else(|| {
        checkpoint
            .as_deref()
            .unwrap_or(&cfg.default_checkpoint())
            .parent()
            .unwrap_or(Path::new("."))
            .join("eval.json")
    });
    let mut f = fs::File::create(&out_path)?;
    f.write_all(serde_json::to_string_pretty(&report)?.as_bytes())?;
    f.write_all(b"\n")?;
    if worst.is_some() {
        fs::write(out_path.with_extension("worst.txt"), worst_dump)?;
    }
    Ok(report)
}
