//! Training loops for the frozen-encoder decoders and the two baselines.
//!
//! Every user turn of every dialogue is one example. Gradients are summed
//! over a batch of `batch_size` examples (each loss scaled by `1/B`), clipped
//! to `clip_norm` globally and applied with AdamW under a linear-warmup,
//! then-constant learning rate.

use std::collections::HashSet;
use std::path::PathBuf;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::save_checkpoint;
use crate::data::{build_context, encode_labels, tokenize, user_turn_indices, Dialogue, DialogueTask, Vocab};
use crate::error::{Error, Result};
use crate::model::{AutodialModel, Decoder, DecoderKind};
use crate::tensor::{clip_grad_norm, global_grad_norm, AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use crate::transformer::{
    classification_decoder_graph, encoder_forward, encoder_graph, generative_decoder_graph, ModelConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Autodial,
    Generative,
    Simpletod,
    PreFinetune,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::Autodial => "autodial",
            Self::Generative => "generative",
            Self::Simpletod => "simpletod",
            Self::PreFinetune => "pre_finetune",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Autodial, Self::Generative, Self::Simpletod, Self::PreFinetune]
            .into_iter()
            .find(|m| m.name() == s || m.name().replace('_', "-") == s)
    }

    /// Whether the shared encoder stays frozen in this mode.
    pub fn freezes_encoder(self) -> bool {
        matches!(self, Self::Autodial | Self::Generative)
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}

/// Style of the fine-tuning corpus, which selects the baseline learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusStyle {
    Multiwoz,
    Sgd,
}

/// Published learning rates for the full-size model.
pub fn published_lr(mode: TrainMode, style: CorpusStyle) -> f32 {
    match (mode, style) {
        (TrainMode::Autodial, _) => 7e-5,
        (TrainMode::Generative | TrainMode::Simpletod, CorpusStyle::Multiwoz) => 2e-5,
        (TrainMode::Generative | TrainMode::Simpletod, CorpusStyle::Sgd) => 1e-5,
        (TrainMode::PreFinetune, _) => 1e-6,
    }
}

/// Learning rates for the tiny preset, whose randomly initialized weights need
/// far larger steps than the published fine-tuning rates.
pub fn tiny_lr(mode: TrainMode) -> f32 {
    match mode {
        TrainMode::Autodial => 1e-3,
        TrainMode::Generative | TrainMode::Simpletod => 1e-3,
        TrainMode::PreFinetune => 5e-4,
    }
}

pub const PFT_DEFAULT_STEPS: u64 = 5_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lr: f32,
    pub warmup_updates: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub clip_norm: f32,
    pub max_seq_len: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
    /// Stop after this many optimizer updates, even mid-epoch.
    pub max_steps: Option<u64>,
    /// Precompute encoder states once when the encoder is frozen. Results are
    /// bit-identical to recomputing them every step.
    pub cache_encoder: bool,
}

impl TrainConfig {
    /// Published hyperparameters for `mode`.
    pub fn published(mode: TrainMode, style: CorpusStyle) -> Self {
        Self {
            mode,
            lr: published_lr(mode, style),
            warmup_updates: 100,
            epochs: 5,
            batch_size: 8,
            eval_batch_size: 16,
            clip_norm: 1.0,
            max_seq_len: 1000,
            seed: 13,
            adamw: AdamWConfig::default(),
            max_steps: (mode == TrainMode::PreFinetune).then_some(PFT_DEFAULT_STEPS),
            cache_encoder: false,
        }
    }

    /// Desk-scale settings for the tiny preset.
    pub fn tiny(mode: TrainMode) -> Self {
        Self {
            lr: tiny_lr(mode),
            max_seq_len: 128,
            ..Self::published(mode, CorpusStyle::Multiwoz)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs == 0 && self.max_steps.is_none() {
            return bad("epochs must be positive");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if self.max_seq_len < 3 {
            return bad("max_seq_len must be at least 3");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `cfg.lr` over `warmup_updates`, then constant.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f32 {
    if cfg.warmup_updates == 0 || step >= cfg.warmup_updates {
        cfg.lr
    } else {
        (cfg.lr as f64 * step as f64 / cfg.warmup_updates as f64) as f32
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub task: String,
    pub tasks: Vec<DialogueTask>,
    pub examples: usize,
    pub steps: u64,
    pub epoch_losses: Vec<f64>,
    /// Mean loss of each optimizer update, in order.
    pub step_losses: Vec<f32>,
    pub epoch_secs: Vec<f64>,
    /// Time spent precomputing encoder states, when caching.
    pub encoder_cache_secs: f64,
    pub updated_params: Vec<String>,
    pub grad_norms_pre_clip: Vec<f32>,
    pub grad_norms_post_clip: Vec<f32>,
    pub checkpoint: Option<PathBuf>,
    pub warnings: Vec<String>,
}

impl TrainReport {
    pub fn first_epoch_loss(&self) -> f64 {
        self.epoch_losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_epoch_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }

    pub fn mean_epoch_secs(&self) -> f64 {
        if self.epoch_secs.is_empty() {
            return 0.0;
        }
        self.epoch_secs.iter().sum::<f64>() / self.epoch_secs.len() as f64
    }

    pub fn total_secs(&self) -> f64 {
        self.encoder_cache_secs + self.epoch_secs.iter().sum::<f64>()
    }

    /// The report with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            epoch_secs: vec![0.0; self.epoch_secs.len()],
            encoder_cache_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "mode={} task={} examples={} steps={}\n",
            self.mode, self.task, self.examples, self.steps
        );
        for (i, (l, s)) in self.epoch_losses.iter().zip(&self.epoch_secs).enumerate() {
            out.push_str(&format!("epoch {:>3}  loss {:.5}  {:.2}s\n", i + 1, l, s));
        }
        out.push_str(&format!("updated parameters: {}\n", self.updated_params.len()));
        if let Some(p) = &self.checkpoint {
            out.push_str(&format!("checkpoint: {}\n", p.display()));
        }
        for w in &self.warnings {
            out.push_str(&format!("warning: {w}\n"));
        }
        out
    }
}

/// One user turn, tokenized once.
#[derive(Debug, Clone)]
struct Example<'c> {
    context: Vec<usize>,
    turn: &'c crate::data::Turn,
}

fn examples<'c>(corpus: &'c [Dialogue], vocab: &Vocab, max_seq_len: usize) -> Result<Vec<Example<'c>>> {
    let mut out = Vec::new();
    for d in corpus {
        for (t, &turn_idx) in user_turn_indices(d).iter().enumerate() {
            out.push(Example {
                context: build_context(d, t, vocab, max_seq_len)?,
                turn: &d.turns[turn_idx],
            });
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
enum Target {
    Labels(Vec<f32>),
    Sequence { input: Vec<usize>, output: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Item {
    example: usize,
    target: Target,
}

/// Decoder input `[bos, tag, y…]` and output `[pad, y…, eos]`; the tag is
/// given, never predicted.
pub fn teacher_forcing_pair(task: DialogueTask, target: &str, vocab: &Vocab, max_len: usize) -> (Vec<usize>, Vec<usize>) {
    let mut y = tokenize(target, vocab);
    y.truncate(max_len.saturating_sub(2));
    let mut input = vec![vocab.bos_id(), vocab.task_tag_id(task)];
    input.extend(&y);
    let mut output = vec![vocab.pad_id()];
    output.extend(&y);
    output.push(vocab.eos_id());
    (input, output)
}

fn items_for(decoder: &Decoder, exs: &[Example], vocab: &Vocab, max_len: usize) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    match &decoder.spec.kind {
        DecoderKind::Classification { source, labels } => {
            for (i, ex) in exs.iter().enumerate() {
                items.push(Item {
                    example: i,
                    target: Target::Labels(encode_labels(source.labels(ex.turn), labels)?),
                });
            }
        }
        DecoderKind::Generative { tasks } => {
            for (i, ex) in exs.iter().enumerate() {
                for &task in tasks {
                    let (input, output) = teacher_forcing_pair(task, &task.target_text(ex.turn), vocab, max_len);
                    items.push(Item {
                        example: i,
                        target: Target::Sequence { input, output },
                    });
                }
            }
        }
    }
    Ok(items)
}

fn task_seed(seed: u64, task: &str) -> u64 {
    let digest = Sha256::digest(format!("train:{seed}:{task}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

enum EncoderAccess<'a> {
    Frozen(&'a ParamStore),
    Trainable(&'a mut ParamStore),
}

impl EncoderAccess<'_> {
    fn store(&self) -> &ParamStore {
        match self {
            Self::Frozen(s) => s,
            Self::Trainable(s) => s,
        }
    }
}

struct Loop<'a> {
    model_cfg: &'a ModelConfig,
    cfg: &'a TrainConfig,
    encoder: EncoderAccess<'a>,
    decoder: &'a mut Decoder,
    contexts: Vec<&'a [usize]>,
    items: Vec<Item>,
}

#[derive(Default)]
struct LoopStats {
    steps: u64,
    epoch_losses: Vec<f64>,
    step_losses: Vec<f32>,
    epoch_secs: Vec<f64>,
    encoder_cache_secs: f64,
    pre: Vec<f32>,
    post: Vec<f32>,
}

impl Loop<'_> {
    fn example_loss(&self, cache: Option<&[Tensor]>, item: &Item, scale: f32) -> Result<(f32, crate::tensor::Gradients)> {
        let enc = self.encoder.store();
        let dec = &self.decoder.params;
        let spec = &self.decoder.spec;
        let ctx = self.contexts[item.example];
        let mut g = Graph::new();
        let memory = match cache {
            Some(c) => g.constant_ref(&c[item.example]),
            None => encoder_graph(&mut g, self.model_cfg, enc, ctx)?,
        };
        let mask = vec![true; ctx.len()];
        let loss = match &item.target {
            Target::Labels(t) => {
                let logits =
                    classification_decoder_graph(&mut g, self.model_cfg, dec, &spec.task, spec.layers, memory, &mask)?;
                g.bce_with_logits(logits, t)?
            }
            Target::Sequence { input, output } => {
                let logits = generative_decoder_graph(
                    &mut g,
                    self.model_cfg,
                    enc,
                    dec,
                    &spec.task,
                    spec.layers,
                    input,
                    memory,
                    &mask,
                )?;
                g.cross_entropy(logits, output, self.model_cfg.pad_id)?
            }
        };
        let value = g.value(loss).item();
        let scaled = g.scale(loss, scale);
        Ok((value, g.backward(scaled)?))
    }

    fn run(mut self) -> Result<LoopStats> {
        let cfg = self.cfg;
        let mut stats = LoopStats::default();
        let frozen = matches!(self.encoder, EncoderAccess::Frozen(_)) || self.encoder.store().all_frozen();
        let cache = if cfg.cache_encoder && frozen {
            let t0 = Instant::now();
            let fp: std::sync::Arc<str> = std::sync::Arc::from("");
            let c = self
                .contexts
                .iter()
                .map(|ctx| encoder_forward(self.model_cfg, self.encoder.store(), ctx, fp.clone()).map(|o| o.hidden))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            stats.encoder_cache_secs = t0.elapsed().as_secs_f64();
            Some(c)
        } else {
            None
        };

        let mut rng = ChaCha8Rng::seed_from_u64(task_seed(cfg.seed, &self.decoder.spec.task));
        let mut opt = AdamW::new(cfg.adamw);
        let mut order: Vec<usize> = (0..self.items.len()).collect();
        let budget = cfg.max_steps.unwrap_or(u64::MAX);
        let mut epoch = 0;
        while stats.steps < budget && (epoch < cfg.epochs || cfg.max_steps.is_some() && cfg.epochs == 0) {
            epoch += 1;
            let t0 = Instant::now();
            order.shuffle(&mut rng);
            let mut sum = 0.0f64;
            let mut seen = 0usize;
            for batch in order.chunks(cfg.batch_size) {
                if stats.steps >= budget {
                    break;
                }
                let scale = 1.0 / batch.len() as f32;
                let mut batch_loss = 0.0f64;
                for &i in batch {
                    let (loss, grads) = self.example_loss(cache.as_deref(), &self.items[i], scale)?;
                    if !loss.is_finite() {
                        return Err(Error::NonFiniteLoss(stats.steps));
                    }
                    batch_loss += loss as f64;
                    grads.accumulate_into(&mut self.decoder.params);
                    if let EncoderAccess::Trainable(e) = &mut self.encoder {
                        grads.accumulate_into(e);
                    }
                }
                sum += batch_loss;
                seen += batch.len();
                let mut stores: Vec<&mut ParamStore> = vec![&mut self.decoder.params];
                if let EncoderAccess::Trainable(e) = &mut self.encoder {
                    stores.push(e);
                }
                let pre = clip_grad_norm(&mut stores, cfg.clip_norm);
                let post = global_grad_norm(&stores);
                opt.step(&mut stores, lr_at(stats.steps + 1, cfg))?;
                for s in stores.iter_mut() {
                    s.zero_grad();
                }
                stats.pre.push(pre);
                stats.post.push(post);
                stats.step_losses.push((batch_loss / batch.len() as f64) as f32);
                stats.steps += 1;
            }
            let mean = sum / seen.max(1) as f64;
            stats.epoch_losses.push(mean);
            stats.epoch_secs.push(t0.elapsed().as_secs_f64());
            debug!("{} epoch {epoch}: loss {mean:.5}", self.decoder.spec.task);
        }
        Ok(stats)
    }
}

fn vocab_of(model: &AutodialModel) -> Result<Vocab> {
    model
        .vocab
        .clone()
        .ok_or_else(|| Error::Invalid("model has no vocabulary".into()))
}

fn trainable_names(stores: &[&ParamStore]) -> Vec<String> {
    stores
        .iter()
        .flat_map(|s| s.iter())
        .filter(|(_, t)| t.requires_grad)
        .map(|(n, _)| n.to_string())
        .collect()
}

fn report(cfg: &TrainConfig, decoder: &Decoder, examples: usize, stats: LoopStats, updated: Vec<String>) -> TrainReport {
    let tasks = match &decoder.spec.kind {
        DecoderKind::Classification { source, .. } => vec![*source],
        DecoderKind::Generative { tasks } => tasks.clone(),
    };
    info!(
        "{} {}: {} steps, loss {:?}",
        cfg.mode, decoder.spec.task, stats.steps, stats.epoch_losses
    );
    TrainReport {
        mode: cfg.mode,
        task: decoder.spec.task.clone(),
        tasks,
        examples,
        steps: stats.steps,
        epoch_losses: stats.epoch_losses,
        step_losses: stats.step_losses,
        epoch_secs: stats.epoch_secs,
        encoder_cache_secs: stats.encoder_cache_secs,
        updated_params: updated,
        grad_norms_pre_clip: stats.pre,
        grad_norms_post_clip: stats.post,
        checkpoint: None,
        warnings: Vec::new(),
    }
}

/// Trains one decoder against the frozen encoder.
fn train_frozen(
    model_cfg: &ModelConfig,
    encoder: &ParamStore,
    decoder: &mut Decoder,
    vocab: &Vocab,
    corpus: &[Dialogue],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let max_len = cfg.max_seq_len.min(model_cfg.max_seq_len);
    let exs = examples(corpus, vocab, max_len)?;
    let items = items_for(decoder, &exs, vocab, max_len)?;
    let n = exs.len();
    let stats = Loop {
        model_cfg,
        cfg,
        encoder: EncoderAccess::Frozen(encoder),
        contexts: exs.iter().map(|e| e.context.as_slice()).collect(),
        decoder,
        items,
    }
    .run()?;
    let updated = trainable_names(&[&decoder.params]);
    Ok(report(cfg, decoder, n, stats, updated))
}

fn require_frozen(model: &AutodialModel, cfg: &TrainConfig) -> Result<()> {
    if !model.encoder_frozen() {
        return Err(Error::Mode {
            mode: cfg.mode.to_string(),
            action: "train while the encoder is trainable".into(),
        });
    }
    Ok(())
}

/// Fits one classification decoder with binary cross-entropy. Only that
/// decoder's parameters change.
pub fn train_classification_decoder(
    model: &mut AutodialModel,
    task: &str,
    corpus: &[Dialogue],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Autodial {
        return Err(Error::Mode {
            mode: cfg.mode.to_string(),
            action: "train a classification decoder".into(),
        });
    }
    require_frozen(model, cfg)?;
    let vocab = vocab_of(model)?;
    let (mc, enc, dec) = model.split_mut(task)?;
    if !dec.spec.is_classification() {
        return Err(Error::WrongKind {
            task: task.into(),
            expected: "classification",
        });
    }
    train_frozen(mc, enc, dec, &vocab, corpus, cfg)
}

/// Trains several classification decoders at once, one thread each. Each run
/// is seeded by its task name, so the result equals sequential training.
pub fn train_classification_decoders_parallel(
    model: &mut AutodialModel,
    tasks: &[&str],
    corpus: &[Dialogue],
    cfg: &TrainConfig,
) -> Result<Vec<TrainReport>> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Autodial {
        return Err(Error::Mode {
            mode: cfg.mode.to_string(),
            action: "train classification decoders".into(),
        });
    }
    require_frozen(model, cfg)?;
    let vocab = vocab_of(model)?;
    let wanted: HashSet<&str> = tasks.iter().copied().collect();
    for t in tasks {
        if !model.decoder(t)?.spec.is_classification() {
            return Err(Error::WrongKind {
                task: t.to_string(),
                expected: "classification",
            });
        }
    }
    let (mc, enc, decs) = model.decoders_mut();
    let selected: Vec<&mut Decoder> = decs
        .into_iter()
        .filter(|d| wanted.contains(d.spec.task.as_str()))
        .collect();
    let results: Vec<Result<TrainReport>> = std::thread::scope(|s| {
        let handles: Vec<_> = selected
            .into_iter()
            .map(|d| {
                let vocab = &vocab;
                s.spawn(move || train_frozen(mc, enc, d, vocab, corpus, cfg))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Invalid("training thread panicked".into()))))
            .collect()
    });
    let mut reports = results.into_iter().collect::<Result<Vec<_>>>()?;
    let order: Vec<&str> = tasks.to_vec();
    reports.sort_by_key(|r| order.iter().position(|t| *t == r.task));
    Ok(reports)
}

/// Fits a generative decoder with teacher forcing while the encoder, and with
/// it the tied token table, stays frozen.
pub fn train_generative_decoder(
    model: &mut AutodialModel,
    task: &str,
    corpus: &[Dialogue],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if !cfg.mode.freezes_encoder() {
        return Err(Error::Mode {
            mode: cfg.mode.to_string(),
            action: "train a generative decoder against a frozen encoder".into(),
        });
    }
    require_frozen(model, cfg)?;
    let vocab = vocab_of(model)?;
    let (mc, enc, dec) = model.split_mut(task)?;
    if dec.spec.is_classification() {
        return Err(Error::WrongKind {
            task: task.into(),
            expected: "generative",
        });
    }
    train_frozen(mc, enc, dec, &vocab, corpus, cfg)
}

/// Trains the encoder and one generative decoder end to end on every task
/// of that decoder, mixed within each batch. The encoder is frozen again
/// afterwards and the model fingerprint refreshed.
pub fn train_simpletod(model: &mut AutodialModel, task: &str, corpus: &[Dialogue], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.mode.freezes_encoder() {
        return Err(Error::Mode {
            mode: cfg.mode.to_string(),
            action: "train the encoder".into(),
        });
    }
    let vocab = vocab_of(model)?;
    if model.decoder(task)?.spec.is_classification() {
        return Err(Error::WrongKind {
            task: task.into(),
            expected: "generative",
        });
    }
    model.unfreeze_encoder();
    let result = (|| {
        let (mc, enc, dec) = model.encoder_and_decoder_mut(task)?;
        let max_len = cfg.max_seq_len.min(mc.max_seq_len);
        let exs = examples(corpus, &vocab, max_len)?;
        let items = items_for(dec, &exs, &vocab, max_len)?;
        let n = exs.len();
        let contexts: Vec<&[usize]> = exs.iter().map(|e| e.context.as_slice()).collect();
        let stats = Loop {
            model_cfg: mc,
            cfg,
            encoder: EncoderAccess::Trainable(enc),
            decoder: dec,
            contexts,
            items,
        }
        .run()?;
        let updated = trainable_names(&[&*enc, &dec.params]);
        Ok(report(cfg, dec, n, stats, updated))
    })();
    model.freeze_encoder();
    model.refresh_fingerprint(&[task]);
    result
}

/// Dialogue ids and utterances shared by two corpora.
pub fn corpus_overlap(a: &[Dialogue], b: &[Dialogue]) -> usize {
    let ids: HashSet<&str> = a.iter().map(|d| d.dialogue_id.as_str()).collect();
    b.iter().filter(|d| ids.contains(d.dialogue_id.as_str())).count()
}

/// Multi-task end-to-end training of `task` (a generative decoder covering
/// all four tasks) for `cfg.max_steps` updates, then a checkpoint at `out`.
/// Overlap with the fine-tuning corpus is reported, not fatal.
pub fn pre_finetune(
    model: &mut AutodialModel,
    task: &str,
    pft_corpus: &[Dialogue],
    finetune_corpus: Option<&[Dialogue]>,
    cfg: &TrainConfig,
    out: Option<PathBuf>,
) -> Result<TrainReport> {
    if cfg.mode != TrainMode::PreFinetune {
        return Err(Error::Mode {
            mode: cfg.mode.to_string(),
            action: "pre-finetune".into(),
        });
    }
    let mut warnings = Vec::new();
    if let Some(ft) = finetune_corpus {
        let n = corpus_overlap(pft_corpus, ft);
        if n > 0 {
            let w = format!("{n} pre-finetuning dialogues share ids with the fine-tuning corpus");
            warn!("{w}");
            warnings.push(w);
        }
    }
    let mut rep = train_simpletod(model, task, pft_corpus, cfg)?;
    rep.warnings = warnings;
    if let Some(path) = out {
        save_checkpoint(model, &path)?;
        rep.checkpoint = Some(path);
    }
    Ok(rep)
}

/// Dispatches on `cfg.mode` and the decoder kind.
pub fn train(model: &mut AutodialModel, task: &str, corpus: &[Dialogue], cfg: &TrainConfig) -> Result<TrainReport> {
    match cfg.mode {
        TrainMode::Autodial if model.decoder(task)?.spec.is_classification() => {
            train_classification_decoder(model, task, corpus, cfg)
        }
        TrainMode::Autodial | TrainMode::Generative => train_generative_decoder(model, task, corpus, cfg),
        TrainMode::Simpletod => train_simpletod(model, task, corpus, cfg),
        TrainMode::PreFinetune => pre_finetune(model, task, corpus, None, cfg, None),
    }
}
