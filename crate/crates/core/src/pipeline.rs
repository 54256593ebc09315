//! Pipeline stages behind the `race` command line: preprocessing, vocabulary,
//! the two training stages, indexing, retrieval, generation and evaluation.
//!
//! Every stage reads and writes plain files so that any stage can be rerun on
//! its own. Outputs depend only on the inputs and the seed.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use tensorgrad::{AdamW, AdamWConfig, Checkpoint, ParamSet};

use crate::corpus::{self, CorpusSplit, PreparedRecord};
use crate::error::{invalid, Error, Result};
use crate::metrics::{evaluate_all, EvalReport};
use crate::model::{training_step, Example, ExemplarIds, ModelConfig, RaceModel, RetrievalMode, Strategy};
use crate::retrieval::{build_index, embed_diff, NnGen, RetrievalIndex, TfIdf};
use crate::vocab::{build_vocab, decode, encode, Vocab};

/// Flat key/value configuration; every key has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: PathBuf,
    pub workdir: PathBuf,
    pub seed: u64,
    pub schema_check: bool,
    pub train_ratio: f64,
    pub valid_ratio: f64,
    pub test_ratio: f64,
    pub max_diff_tokens: usize,
    pub max_msg_tokens: usize,
    pub min_freq: usize,
    pub max_vocab: usize,

    pub ret_d_model: usize,
    pub ret_heads: usize,
    pub ret_enc_layers: usize,
    pub ret_dec_layers: usize,
    pub ret_ffn_dim: usize,
    pub ret_rel_clip: usize,
    pub ret_dropout: f64,
    pub ret_epochs: usize,

    pub gen_d_model: usize,
    pub gen_heads: usize,
    pub gen_enc_layers: usize,
    pub gen_dec_layers: usize,
    pub gen_ffn_dim: usize,
    pub gen_rel_clip: usize,
    pub gen_dropout: f64,
    pub gen_epochs: usize,
    /// Start the generator from the retriever's weights where names and
    /// shapes agree.
    pub gen_warm_start: bool,
    /// Share the token embedding with the output projection.
    pub tie_output: bool,

    pub init_std: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,

    pub k: usize,
    pub guider: bool,
    pub guider_bias: bool,
    /// Train the generator without exemplars (plain encoder-decoder).
    pub no_retrieval: bool,
    /// `greedy` or `beam`.
    pub strategy: String,
    pub beam_width: usize,
    pub max_gen_len: usize,
    pub baselines: bool,
    pub nngen_k: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.jsonl"),
            workdir: PathBuf::from("work"),
            seed: 42,
            schema_check: false,
            train_ratio: 0.8,
            valid_ratio: 0.1,
            test_ratio: 0.1,
            max_diff_tokens: 200,
            max_msg_tokens: 50,
            min_freq: 1,
            max_vocab: crate::vocab::DEFAULT_MAX_SIZE,
            ret_d_model: 128,
            ret_heads: 4,
            ret_enc_layers: 2,
            ret_dec_layers: 2,
            ret_ffn_dim: 512,
            ret_rel_clip: 16,
            ret_dropout: 0.1,
            ret_epochs: 10,
            gen_d_model: 128,
            gen_heads: 4,
            gen_enc_layers: 2,
            gen_dec_layers: 2,
            gen_ffn_dim: 512,
            gen_rel_clip: 16,
            gen_dropout: 0.1,
            gen_epochs: 10,
            gen_warm_start: false,
            tie_output: true,
            init_std: 0.02,
            lr: 3e-4,
            weight_decay: 0.01,
            warmup_steps: 100,
            batch_size: 32,
            k: 1,
            guider: true,
            guider_bias: true,
            no_retrieval: false,
            strategy: "greedy".into(),
            beam_width: 5,
            max_gen_len: 30,
            baselines: false,
            nngen_k: 5,
        }
    }
}

impl PipelineConfig {
    /// Parses a TOML document, then applies `key=value` overrides whose
    /// values are TOML literals (bare words are read as strings).
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| invalid!("config: {e}"))?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| invalid!("override {o:?} is not key=value"))?;
            let value = match format!("v = {v}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").unwrap(),
                Err(_) => toml::Value::String(v.to_string()),
            };
            table.insert(k.trim().to_string(), value);
        }
        let cfg: Self = table.try_into().map_err(|e| invalid!("config: {e}"))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.k == 0 || self.nngen_k == 0 || self.max_gen_len == 0 {
            return Err(invalid!("batch_size, k, nngen_k and max_gen_len must be positive"));
        }
        if self.max_msg_tokens > self.max_diff_tokens {
            return Err(invalid!("max_msg_tokens must not exceed max_diff_tokens"));
        }
        self.strategy()?;
        Ok(())
    }

    pub fn strategy(&self) -> Result<Strategy> {
        match self.strategy.as_str() {
            "greedy" => Ok(Strategy::Greedy),
            "beam" => Ok(Strategy::Beam { width: self.beam_width }),
            s => Err(invalid!("unknown strategy {s:?}")),
        }
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup_steps: self.warmup_steps,
            ..AdamWConfig::default()
        }
    }

    pub fn retriever_model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.ret_d_model,
            num_heads: self.ret_heads,
            enc_layers: self.ret_enc_layers,
            dec_layers: self.ret_dec_layers,
            ffn_dim: self.ret_ffn_dim,
            rel_clip: self.ret_rel_clip,
            vocab_size,
            max_diff_len: self.max_diff_tokens,
            max_msg_len: self.max_msg_tokens + 2,
            dropout: self.ret_dropout,
            init_std: self.init_std,
            retrieval: RetrievalMode::None,
            tie_output: self.tie_output,
            ..ModelConfig::default()
        }
    }

    pub fn generator_model(&self, vocab_size: usize) -> ModelConfig {
        let retrieval = if self.no_retrieval {
            RetrievalMode::None
        } else if self.guider {
            RetrievalMode::Guided
        } else {
            RetrievalMode::Unguided
        };
        ModelConfig {
            d_model: self.gen_d_model,
            num_heads: self.gen_heads,
            enc_layers: self.gen_enc_layers,
            dec_layers: self.gen_dec_layers,
            ffn_dim: self.gen_ffn_dim,
            rel_clip: self.gen_rel_clip,
            vocab_size,
            max_diff_len: self.max_diff_tokens,
            max_msg_len: self.max_msg_tokens + 2,
            dropout: self.gen_dropout,
            init_std: self.init_std,
            retrieval,
            guider_bias: self.guider_bias,
            num_exemplars: self.k,
            tie_output: self.tie_output,
            ..ModelConfig::default()
        }
    }
}

/// Seed for a named random stream derived from the run seed.
pub fn substream(seed: u64, name: &str) -> u64 {
    let h = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(name.as_bytes())
        .finalize();
    u64::from_le_bytes(h[..8].try_into().unwrap())
}

/// Emits one newline-delimited JSON event on stderr.
pub fn log_event(event: &str, fields: serde_json::Value) {
    let mut obj = json!({ "event": event });
    if let (Some(o), serde_json::Value::Object(f)) = (obj.as_object_mut(), fields) {
        o.extend(f);
    }
    eprintln!("{obj}");
}

/// File names inside a work directory.
#[derive(Clone, Debug)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn create(&self) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))
    }

    fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn split(&self, split: &str) -> PathBuf {
        self.file(&format!("{split}.jsonl"))
    }
    pub fn vocab(&self) -> PathBuf {
        self.file("vocab.txt")
    }
    pub fn retriever(&self) -> PathBuf {
        self.file("retriever.ckpt")
    }
    pub fn retriever_log(&self) -> PathBuf {
        self.file("retriever.loss.jsonl")
    }
    pub fn index(&self) -> PathBuf {
        self.file("index.bin")
    }
    pub fn exemplars(&self, split: &str) -> PathBuf {
        self.file(&format!("exemplars.{split}.jsonl"))
    }
    pub fn generator(&self) -> PathBuf {
        self.file("generator.ckpt")
    }
    pub fn generator_log(&self) -> PathBuf {
        self.file("generator.loss.jsonl")
    }
    pub fn hypotheses(&self, split: &str, system: &str) -> PathBuf {
        self.file(&format!("hyps.{split}.{system}.jsonl"))
    }
    pub fn provenance(&self, split: &str) -> PathBuf {
        self.file(&format!("provenance.{split}.jsonl"))
    }
    pub fn report(&self, split: &str, system: &str) -> PathBuf {
        self.file(&format!("report.{split}.{system}.json"))
    }
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "required input is missing"),
        ))
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| invalid!("serialization: {e}"))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Renders diffs and messages of an already split corpus and writes one
/// preprocessed file per split.
pub fn write_prepared(split: &CorpusSplit, wd: &Workdir) -> Result<[usize; 3]> {
    wd.create()?;
    let parts = [&split.train, &split.validation, &split.test];
    let mut counts = [0; 3];
    for ((name, records), n) in SPLITS.iter().zip(parts).zip(&mut counts) {
        let prepared: Vec<PreparedRecord> = records.iter().map(PreparedRecord::from_commit).collect();
        corpus::write_jsonl(&wd.split(name), &prepared)?;
        *n = prepared.len();
    }
    Ok(counts)
}

/// Load, filter, split and render the corpus named in the config.
pub fn cmd_preprocess(cfg: &PipelineConfig) -> Result<[usize; 3]> {
    require(&cfg.corpus)?;
    let records = corpus::load_corpus(&cfg.corpus, cfg.schema_check)?;
    let kept = corpus::filter_records(&records, cfg.max_diff_tokens, cfg.max_msg_tokens);
    let split = corpus::split_corpus(
        &kept,
        [cfg.train_ratio, cfg.valid_ratio, cfg.test_ratio],
        substream(cfg.seed, "split"),
    )?;
    let counts = write_prepared(&split, &Workdir::new(&cfg.workdir))?;
    log_event(
        "preprocess",
        json!({ "loaded": records.len(), "kept": kept.len(), "train": counts[0], "valid": counts[1], "test": counts[2] }),
    );
    Ok(counts)
}

/// Vocabulary over the training split's diffs and messages.
pub fn cmd_vocab(cfg: &PipelineConfig) -> Result<Vocab> {
    let wd = Workdir::new(&cfg.workdir);
    require(&wd.split("train"))?;
    let train: Vec<PreparedRecord> = corpus::read_jsonl(&wd.split("train"))?;
    let seqs = train.iter().flat_map(|r| [&r.action_tokens, &r.msg_tokens]);
    let vocab = build_vocab(seqs, cfg.min_freq, cfg.max_vocab)?;
    vocab.save(&wd.vocab())?;
    log_event("vocab", json!({ "size": vocab.len(), "hash": vocab.hash() }));
    Ok(vocab)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: String,
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub seed: u64,
}

pub fn save_model(path: &Path, model: &RaceModel<f32>, meta: &CheckpointMeta) -> Result<()> {
    let value = serde_json::to_value(meta).map_err(|e| invalid!("serialization: {e}"))?;
    Checkpoint::new(value, model.params.clone()).save(path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(RaceModel<f32>, CheckpointMeta)> {
    require(path)?;
    let ckpt = Checkpoint::<f32>::load(path)?;
    let meta: CheckpointMeta =
        serde_json::from_value(ckpt.metadata).map_err(|e| invalid!("checkpoint metadata: {e}"))?;
    let model = RaceModel::from_params(meta.model.clone(), ckpt.params)?;
    Ok((model, meta))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn load_vocab(path: &Path) -> Result<Vocab> {
    require(path)?;
    Vocab::load(path)
}

fn check_vocab(vocab: &Vocab, meta: &CheckpointMeta) -> Result<()> {
    if vocab.hash() != meta.vocab_hash {
        return Err(invalid!(
            "vocabulary hash {} does not match the checkpoint's {}",
            vocab.hash(),
            meta.vocab_hash
        ));
    }
    Ok(())
}

fn diff_ids(tokens: &[String], vocab: &Vocab, cfg: &ModelConfig) -> Result<Vec<usize>> {
    Ok(encode(tokens, vocab, cfg.max_diff_len, false)?.real_ids())
}

fn target_ids(tokens: &[String], vocab: &Vocab, cfg: &ModelConfig) -> Result<Vec<usize>> {
    Ok(encode(tokens, vocab, cfg.max_msg_len, true)?.real_ids())
}

/// Exemplar encoder input; message tokens are capped like targets.
fn exemplar_ids(r: &Retrieved, vocab: &Vocab, cfg: &ModelConfig) -> Result<ExemplarIds> {
    Ok(ExemplarIds {
        diff: diff_ids(&r.diff_tokens, vocab, cfg)?,
        msg: encode(&r.msg_tokens, vocab, cfg.max_msg_len - 2, false)?.real_ids(),
    })
}

/// Mini-batch training with a per-epoch shuffle; returns the mean loss of
/// each epoch and writes them to `log_path`, one JSON line per epoch.
pub fn train_epochs(
    model: &mut RaceModel<f32>,
    examples: &[Example],
    epochs: usize,
    batch_size: usize,
    opt: AdamWConfig,
    seed: u64,
    stage: &str,
    log_path: &Path,
) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(invalid!("no training examples"));
    }
    let mut opt = AdamW::new(opt);
    let mut rng = ChaCha8Rng::seed_from_u64(substream(seed, &format!("{stage}.shuffle")));
    let dropout = substream(seed, &format!("{stage}.dropout"));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut losses = Vec::with_capacity(epochs);
    let mut log = String::new();
    let mut step = 0u64;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let seed = dropout.wrapping_add(step.wrapping_mul(batch_size as u64));
            sum += training_step(model, &mut opt, &batch, seed)?;
            batches += 1;
            step += 1;
        }
        let loss = sum / batches as f64;
        losses.push(loss);
        let line = json!({ "stage": stage, "epoch": epoch, "loss": loss });
        log.push_str(&line.to_string());
        log.push('\n');
        log_event("epoch", line);
    }
    fs::write(log_path, log).map_err(|e| Error::io(log_path, e))?;
    Ok(losses)
}

/// Stage I: an encoder-decoder without exemplars trained on diff → message.
/// Its encoder produces the retrieval vectors.
pub fn cmd_train_retriever(cfg: &PipelineConfig) -> Result<Vec<f64>> {
    let wd = Workdir::new(&cfg.workdir);
    require(&wd.split("train"))?;
    let vocab = load_vocab(&wd.vocab())?;
    let train: Vec<PreparedRecord> = corpus::read_jsonl(&wd.split("train"))?;
    let mc = cfg.retriever_model(vocab.len());
    let examples = train
        .iter()
        .map(|r| {
            Ok(Example {
                diff: diff_ids(&r.action_tokens, &vocab, &mc)?,
                exemplars: Vec::new(),
                target: target_ids(&r.msg_tokens, &vocab, &mc)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut model = RaceModel::<f32>::new(mc.clone(), substream(cfg.seed, "retriever.init"))?;
    let losses = train_epochs(
        &mut model,
        &examples,
        cfg.ret_epochs,
        cfg.batch_size,
        cfg.optimizer(),
        cfg.seed,
        "retriever",
        &wd.retriever_log(),
    )?;
    let meta = CheckpointMeta {
        stage: "retriever".into(),
        model: mc,
        vocab_hash: vocab.hash(),
        seed: cfg.seed,
    };
    save_model(&wd.retriever(), &model, &meta)?;
    Ok(losses)
}

/// Index over a preprocessed file using a retriever checkpoint.
pub fn cmd_index(checkpoint: &Path, vocab_path: &Path, records_path: &Path, out: &Path) -> Result<RetrievalIndex> {
    require(records_path)?;
    let (model, meta) = load_model(checkpoint)?;
    let vocab = load_vocab(vocab_path)?;
    let records: Vec<PreparedRecord> = corpus::read_jsonl(records_path)?;
    let index = build_index(&model, &vocab, &meta.vocab_hash, &file_hash(checkpoint)?, &records)?;
    index.save(out)?;
    log_event("index", json!({ "entries": index.len(), "width": index.width() }));
    Ok(index)
}

/// One retrieved neighbour as stored in an exemplar file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieved {
    pub id: String,
    pub similarity: f64,
    pub diff_tokens: Vec<String>,
    pub msg_tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarLine {
    pub id: String,
    pub exemplars: Vec<Retrieved>,
}

/// Top-`k` neighbours of every record in `in_path`. With `exclude_self` a
/// probe never retrieves its own id.
pub fn cmd_retrieve(
    index_path: &Path,
    checkpoint: &Path,
    vocab_path: &Path,
    in_path: &Path,
    k: usize,
    exclude_self: bool,
    out: &Path,
) -> Result<Vec<ExemplarLine>> {
    require(index_path)?;
    require(in_path)?;
    let index = RetrievalIndex::load(index_path)?;
    if index.encoder_checkpoint_hash != file_hash(checkpoint)? {
        return Err(invalid!("index was built with a different encoder checkpoint"));
    }
    let (model, meta) = load_model(checkpoint)?;
    let vocab = load_vocab(vocab_path)?;
    check_vocab(&vocab, &meta)?;
    let probes: Vec<PreparedRecord> = corpus::read_jsonl(in_path)?;
    let mut lines = Vec::with_capacity(probes.len());
    for p in &probes {
        // Probes already in the index reuse the stored vector; encoding is
        // deterministic so this is the same vector.
        let vector = match index.get(&p.id) {
            Some(e) if e.diff_tokens == p.action_tokens => e.vector.clone(),
            _ => embed_diff(&model, &vocab, &p.action_tokens)?,
        };
        let hits = index.query(&vector, k, exclude_self.then_some(p.id.as_str()))?;
        let exemplars = hits
            .into_iter()
            .map(|h| {
                let e = index.get(&h.id).expect("hit is in the index");
                Retrieved {
                    id: h.id,
                    similarity: h.similarity,
                    diff_tokens: e.diff_tokens.clone(),
                    msg_tokens: e.msg_tokens.clone(),
                }
            })
            .collect();
        lines.push(ExemplarLine {
            id: p.id.clone(),
            exemplars,
        });
    }
    corpus::write_jsonl(out, &lines)?;
    log_event("retrieve", json!({ "probes": lines.len(), "k": k, "exclude_self": exclude_self }));
    Ok(lines)
}

/// Exemplars for each record, in record order; ids must match one to one.
fn align_exemplars(records: &[PreparedRecord], lines: Vec<ExemplarLine>, k: usize) -> Result<Vec<Vec<Retrieved>>> {
    let mut by_id: HashMap<String, Vec<Retrieved>> = HashMap::with_capacity(lines.len());
    for l in lines {
        if by_id.insert(l.id.clone(), l.exemplars).is_some() {
            return Err(invalid!("exemplar file lists {} twice", l.id));
        }
    }
    if by_id.len() != records.len() {
        return Err(invalid!(
            "exemplar file has {} ids but the split has {} records",
            by_id.len(),
            records.len()
        ));
    }
    records
        .iter()
        .map(|r| {
            let ex = by_id
                .remove(&r.id)
                .ok_or_else(|| invalid!("no exemplars for record {}", r.id))?;
            if ex.len() < k {
                return Err(invalid!("record {} has {} exemplars, need {k}", r.id, ex.len()));
            }
            Ok(ex.into_iter().take(k).collect())
        })
        .collect()
}

fn build_examples(
    records: &[PreparedRecord],
    exemplars: Option<&[Vec<Retrieved>]>,
    vocab: &Vocab,
    mc: &ModelConfig,
    with_target: bool,
) -> Result<Vec<Example>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let ex = match exemplars {
                Some(all) => all[i].iter().map(|e| exemplar_ids(e, vocab, mc)).collect::<Result<_>>()?,
                None => Vec::new(),
            };
            Ok(Example {
                diff: diff_ids(&r.action_tokens, vocab, mc)?,
                exemplars: ex,
                target: if with_target {
                    target_ids(&r.msg_tokens, vocab, mc)?
                } else {
                    Vec::new()
                },
            })
        })
        .collect()
}

/// Copies every parameter of `from` whose name and shape exist in `to`.
fn warm_start(to: &mut ParamSet<f32>, from: &ParamSet<f32>) -> usize {
    let mut copied = 0;
    for (_, name, t) in from.iter() {
        if let Some(dst) = to.by_name_mut(name) {
            if dst.shape() == t.shape() {
                dst.data_mut().copy_from_slice(t.data());
                copied += 1;
            }
        }
    }
    copied
}

/// Stage II: the exemplar-conditioned generator (or, with `no_retrieval`, a
/// plain encoder-decoder trained the same way).
pub fn cmd_train_generator(cfg: &PipelineConfig, exemplars_path: &Path) -> Result<Vec<f64>> {
    let wd = Workdir::new(&cfg.workdir);
    require(&wd.split("train"))?;
    let vocab = load_vocab(&wd.vocab())?;
    let train: Vec<PreparedRecord> = corpus::read_jsonl(&wd.split("train"))?;
    let mc = cfg.generator_model(vocab.len());
    let exemplars = if cfg.no_retrieval {
        None
    } else {
        require(exemplars_path)?;
        Some(align_exemplars(&train, corpus::read_jsonl(exemplars_path)?, cfg.k)?)
    };
    let examples = build_examples(&train, exemplars.as_deref(), &vocab, &mc, true)?;
    let mut model = RaceModel::<f32>::new(mc.clone(), substream(cfg.seed, "generator.init"))?;
    if cfg.gen_warm_start {
        let (retriever, meta) = load_model(&wd.retriever())?;
        check_vocab(&vocab, &meta)?;
        let n = warm_start(&mut model.params, &retriever.params);
        log_event("warm_start", json!({ "copied": n }));
    }
    let losses = train_epochs(
        &mut model,
        &examples,
        cfg.gen_epochs,
        cfg.batch_size,
        cfg.optimizer(),
        cfg.seed,
        "generator",
        &wd.generator_log(),
    )?;
    let meta = CheckpointMeta {
        stage: "generator".into(),
        model: mc,
        vocab_hash: vocab.hash(),
        seed: cfg.seed,
    };
    save_model(&wd.generator(), &model, &meta)?;
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub id: String,
    pub tokens: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub id: String,
    pub exemplar_ids: Vec<String>,
    pub similarities: Vec<f64>,
    pub lambdas: Vec<f64>,
}

/// Paths for one generation run.
#[derive(Clone, Debug)]
pub struct GenerateArgs {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub records: PathBuf,
    pub exemplars: PathBuf,
    pub train: PathBuf,
    pub hypotheses: PathBuf,
    pub provenance: PathBuf,
    pub report: PathBuf,
    /// `(hypotheses, report)` outputs for NNGen and TF-IDF.
    pub baseline_outputs: Option<[(PathBuf, PathBuf); 2]>,
}

impl GenerateArgs {
    pub fn in_workdir(wd: &Workdir, split: &str, baselines: bool) -> Self {
        Self {
            checkpoint: wd.generator(),
            vocab: wd.vocab(),
            records: wd.split(split),
            exemplars: wd.exemplars(split),
            train: wd.split("train"),
            hypotheses: wd.hypotheses(split, "race"),
            provenance: wd.provenance(split),
            report: wd.report(split, "race"),
            baseline_outputs: baselines.then(|| {
                [
                    (wd.hypotheses(split, "nngen"), wd.report(split, "nngen")),
                    (wd.hypotheses(split, "tfidf"), wd.report(split, "tfidf")),
                ]
            }),
        }
    }
}

fn references(records: &[PreparedRecord]) -> Vec<Vec<String>> {
    records.iter().map(|r| r.msg_tokens.clone()).collect()
}

fn write_system(hyps: &[Hypothesis], records: &[PreparedRecord], hyp_path: &Path, report_path: &Path) -> Result<EvalReport> {
    corpus::write_jsonl(hyp_path, hyps)?;
    let cands: Vec<Vec<String>> = hyps.iter().map(|h| h.tokens.clone()).collect();
    let report = evaluate_all(&cands, &references(records))?;
    write_json(report_path, &report)?;
    Ok(report)
}

/// Decodes every record of a split, writes hypotheses, exemplar provenance
/// and the metric report, and optionally the two IR baselines.
pub fn cmd_generate(args: &GenerateArgs, strategy: Strategy, max_gen_len: usize, nngen_k: usize) -> Result<EvalReport> {
    require(&args.records)?;
    let (model, meta) = load_model(&args.checkpoint)?;
    let vocab = load_vocab(&args.vocab)?;
    check_vocab(&vocab, &meta)?;
    let mc = model.config().clone();
    let records: Vec<PreparedRecord> = corpus::read_jsonl(&args.records)?;
    let exemplars = if mc.retrieval == RetrievalMode::None {
        None
    } else {
        require(&args.exemplars)?;
        Some(align_exemplars(
            &records,
            corpus::read_jsonl(&args.exemplars)?,
            mc.num_exemplars,
        )?)
    };
    let examples = build_examples(&records, exemplars.as_deref(), &vocab, &mc, false)?;
    let max_len = (max_gen_len + 1).min(mc.max_msg_len);
    let mut hyps = Vec::with_capacity(records.len());
    let mut prov = Vec::with_capacity(records.len());
    for (i, (r, ex)) in records.iter().zip(&examples).enumerate() {
        let out = model.generate(ex, strategy, max_len)?;
        hyps.push(Hypothesis {
            id: r.id.clone(),
            tokens: decode(&out.ids, &vocab)?,
        });
        let used = exemplars.as_ref().map_or(&[][..], |e| &e[i][..]);
        prov.push(Provenance {
            id: r.id.clone(),
            exemplar_ids: used.iter().map(|e| e.id.clone()).collect(),
            similarities: used.iter().map(|e| e.similarity).collect(),
            lambdas: out.lambdas,
        });
    }
    corpus::write_jsonl(&args.provenance, &prov)?;
    let report = write_system(&hyps, &records, &args.hypotheses, &args.report)?;
    log_event("generate", json!({ "system": "race", "n": hyps.len(), "bleu": report.bleu.corpus }));

    if let Some([(nn_hyp, nn_rep), (tf_hyp, tf_rep)]) = &args.baseline_outputs {
        require(&args.train)?;
        let train: Vec<PreparedRecord> = corpus::read_jsonl(&args.train)?;
        let nn = NnGen::new(&train)?;
        let tf = TfIdf::new(&train)?;
        let mut nn_h = Vec::with_capacity(records.len());
        let mut tf_h = Vec::with_capacity(records.len());
        for r in &records {
            nn_h.push(Hypothesis {
                id: r.id.clone(),
                tokens: nn.retrieve(&r.action_tokens, nngen_k)?.msg_tokens.clone(),
            });
            tf_h.push(Hypothesis {
                id: r.id.clone(),
                tokens: tf.retrieve(&r.action_tokens).msg_tokens.clone(),
            });
        }
        let a = write_system(&nn_h, &records, nn_hyp, nn_rep)?;
        let b = write_system(&tf_h, &records, tf_hyp, tf_rep)?;
        log_event("baselines", json!({ "nngen_bleu": a.bleu.corpus, "tfidf_bleu": b.bleu.corpus }));
    }
    Ok(report)
}

/// Scores a hypothesis file against the messages of a preprocessed split.
pub fn cmd_eval(hyps_path: &Path, refs_path: &Path, out: &Path) -> Result<EvalReport> {
    require(hyps_path)?;
    require(refs_path)?;
    let hyps: Vec<Hypothesis> = corpus::read_jsonl(hyps_path)?;
    let refs: Vec<PreparedRecord> = corpus::read_jsonl(refs_path)?;
    let by_id: HashMap<&str, &PreparedRecord> = refs.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut seen = HashSet::new();
    let mut matched = Vec::with_capacity(hyps.len());
    for h in &hyps {
        if !seen.insert(h.id.as_str()) {
            return Err(invalid!("hypothesis {} appears twice", h.id));
        }
        let r = by_id
            .get(h.id.as_str())
            .ok_or_else(|| invalid!("hypothesis {} has no reference", h.id))?;
        matched.push((*r).clone());
    }
    let cands: Vec<Vec<String>> = hyps.iter().map(|h| h.tokens.clone()).collect();
    let report = evaluate_all(&cands, &references(&matched))?;
    write_json(out, &report)?;
    Ok(report)
}

/// All stages in order, starting from the corpus file alone.
pub fn cmd_pipeline(cfg: &PipelineConfig) -> Result<EvalReport> {
    let wd = Workdir::new(&cfg.workdir);
    cmd_preprocess(cfg)?;
    cmd_vocab(cfg)?;
    cmd_train_retriever(cfg)?;
    run_from_index(cfg, &wd)
}

/// The stages after stage-I training, on an existing work directory.
pub fn run_from_index(cfg: &PipelineConfig, wd: &Workdir) -> Result<EvalReport> {
    cmd_index(&wd.retriever(), &wd.vocab(), &wd.split("train"), &wd.index())?;
    for (split, exclude) in [("train", true), ("test", false)] {
        cmd_retrieve(
            &wd.index(),
            &wd.retriever(),
            &wd.vocab(),
            &wd.split(split),
            cfg.k,
            exclude,
            &wd.exemplars(split),
        )?;
    }
    cmd_train_generator(cfg, &wd.exemplars("train"))?;
    cmd_generate(
        &GenerateArgs::in_workdir(wd, "test", cfg.baselines),
        cfg.strategy()?,
        cfg.max_gen_len,
        cfg.nngen_k,
    )
}
