//! Greedy decoding, thresholded label prediction and concurrent multi-task
//! inference over one shared encoding.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{build_context, detokenize, parse_belief, user_turn_indices, BeliefState, Dialogue, DialogueTask, Vocab};
use crate::error::{Error, Result};
use crate::metrics::{exact_match_accuracy, joint_goal_accuracy, MetricError};
use crate::model::{AutodialModel, DecoderKind};
use crate::tensor::kernels::sigmoid;
use crate::transformer::EncoderOutput;

pub const DEFAULT_THRESHOLD: f32 = 0.5;
pub const DEFAULT_GEN_MAX_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    /// Labels with `sigmoid(logit) >= threshold` are predicted.
    pub threshold: f32,
    /// Upper bound on generated tokens, excluding the prompt.
    pub gen_max_len: usize,
    /// Keep generating past `eos` until `gen_max_len`; used for fixed-length timing.
    pub ignore_eos: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            gen_max_len: DEFAULT_GEN_MAX_LEN,
            ignore_eos: false,
        }
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// The task a generative decoder answers when none is named.
fn default_task(model: &AutodialModel, decoder: &str) -> Result<DialogueTask> {
    match &model.decoder(decoder)?.spec.kind {
        DecoderKind::Generative { tasks } => Ok(tasks[0]),
        DecoderKind::Classification { .. } => Err(Error::WrongKind {
            task: decoder.into(),
            expected: "generative",
        }),
    }
}

/// Greedy generation from `[bos, tag]`: appends the arg-max token (lowest id
/// on ties) until `eos` or `max_len` new tokens. Returns the new tokens
/// without `eos`.
pub fn greedy_decode_encoded(
    model: &AutodialModel,
    decoder: &str,
    task: DialogueTask,
    enc: &EncoderOutput,
    max_len: usize,
    ignore_eos: bool,
) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Invalid("max_len must be at least 1".into()));
    }
    let vocab = model
        .vocab
        .as_ref()
        .ok_or_else(|| Error::Invalid("model has no vocabulary".into()))?;
    if let DecoderKind::Generative { tasks } = &model.decoder(decoder)?.spec.kind {
        if !tasks.contains(&task) {
            return Err(Error::UnsupportedTask {
                task: decoder.into(),
                what: task.to_string(),
            });
        }
    }
    let cfg = model.config();
    let mut ids = vec![vocab.bos_id(), vocab.task_tag_id(task)];
    let prompt = ids.len();
    while ids.len() - prompt < max_len && ids.len() < cfg.max_seq_len {
        let logits = model.generative_logits(decoder, &ids, enc)?;
        let next = argmax(logits.row(ids.len() - 1));
        if next == vocab.eos_id() && !ignore_eos {
            break;
        }
        ids.push(next);
    }
    Ok(ids.split_off(prompt))
}

/// Encodes `context` and decodes greedily with the decoder's first task.
pub fn greedy_decode(model: &AutodialModel, decoder: &str, context: &[usize], max_len: usize) -> Result<Vec<usize>> {
    let task = default_task(model, decoder)?;
    let enc = model.encode_context(context)?;
    greedy_decode_encoded(model, decoder, task, &enc, max_len, false)
}

/// Labels whose probability reaches `threshold`, in label-space order.
pub fn predict_labels_encoded(
    model: &AutodialModel,
    task: &str,
    enc: &EncoderOutput,
    threshold: f32,
) -> Result<Vec<String>> {
    let logits = model.classification_logits(task, enc)?;
    let DecoderKind::Classification { labels, .. } = &model.decoder(task)?.spec.kind else {
        unreachable!("classification_logits checked the kind")
    };
    Ok(logits
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &z)| sigmoid(z) >= threshold)
        .map(|(i, _)| labels.label(i).expect("head width equals label count").to_string())
        .collect())
}

pub fn predict_labels(model: &AutodialModel, task: &str, context: &[usize], threshold: f32) -> Result<Vec<String>> {
    let enc = model.encode_context(context)?;
    predict_labels_encoded(model, task, &enc, threshold)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "lowercase")]
pub enum Payload {
    Labels(Vec<String>),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub payload: Payload,
    /// Decoder-only seconds on a monotonic clock.
    pub latency: f64,
    /// Position in which this result arrived, starting at 0.
    pub ordinal: usize,
}

/// Runs one decoder on a shared encoding.
pub fn run_decoder(model: &AutodialModel, task: &str, enc: &EncoderOutput, opts: &InferOptions) -> Result<Payload> {
    let d = model.decoder(task)?;
    match &d.spec.kind {
        DecoderKind::Classification { .. } => Ok(Payload::Labels(predict_labels_encoded(
            model,
            task,
            enc,
            opts.threshold,
        )?)),
        DecoderKind::Generative { tasks } => {
            let ids = greedy_decode_encoded(model, task, tasks[0], enc, opts.gen_max_len, opts.ignore_eos)?;
            let vocab = model.vocab.as_ref().expect("checked by greedy_decode_encoded");
            Ok(Payload::Text(detokenize(&ids, vocab)))
        }
    }
}

/// Encodes `context` once and runs every listed decoder on its own thread.
/// Results are returned in completion order.
pub fn infer_all(model: &AutodialModel, context: &[usize], tasks: &[&str], opts: &InferOptions) -> Result<Vec<TaskResult>> {
    if tasks.is_empty() {
        return Err(Error::Invalid("no tasks requested".into()));
    }
    for t in tasks {
        model.decoder(t)?;
    }
    let enc = model.encode_context(context)?;
    let enc = &enc;
    let (tx, rx) = mpsc::channel();
    std::thread::scope(|s| {
        for &task in tasks {
            let tx = tx.clone();
            s.spawn(move || {
                let t0 = Instant::now();
                let payload = run_decoder(model, task, enc, opts);
                let _ = tx.send((task.to_string(), payload, t0.elapsed().as_secs_f64()));
            });
        }
        drop(tx);
        let mut out = Vec::with_capacity(tasks.len());
        for (ordinal, (task, payload, latency)) in rx.iter().enumerate() {
            out.push(TaskResult {
                task,
                payload: payload?,
                latency,
                ordinal,
            });
        }
        Ok(out)
    })
}

/// Same payloads as [`infer_all`], one task after another.
pub fn infer_sequential(
    model: &AutodialModel,
    context: &[usize],
    tasks: &[&str],
    opts: &InferOptions,
) -> Result<Vec<TaskResult>> {
    let mut out = Vec::new();
    for (ordinal, &task) in tasks.iter().enumerate() {
        let enc = model.encode_context(context)?;
        let t0 = Instant::now();
        let payload = run_decoder(model, task, &enc, opts)?;
        out.push(TaskResult {
            task: task.to_string(),
            payload,
            latency: t0.elapsed().as_secs_f64(),
            ordinal,
        });
    }
    Ok(out)
}

/// Gold label set for a classification task, lowercased when `lowercase`.
pub fn gold_label_set(task: DialogueTask, turn: &crate::data::Turn, lowercase: bool) -> BTreeSet<String> {
    task.labels(turn)
        .iter()
        .map(|l| if lowercase { l.trim().to_lowercase() } else { l.clone() })
        .collect()
}

/// Label set read back from generated text: `;`-separated, lowercased.
pub fn labels_from_text(text: &str) -> BTreeSet<String> {
    text.split(';')
        .map(|s| s.split_whitespace().collect::<Vec<_>>().join(" "))
        .filter(|s| !s.is_empty())
        .collect()
}

/// Most frequent gold label set of `task` in `corpus` (ties: smallest set in
/// sorted order).
pub fn majority_label_set(corpus: &[Dialogue], task: DialogueTask) -> BTreeSet<String> {
    let mut counts: BTreeMap<BTreeSet<String>, usize> = BTreeMap::new();
    for d in corpus {
        for t in d.user_turns() {
            *counts.entry(gold_label_set(task, t, false)).or_default() += 1;
        }
    }
    let mut best: Option<(&BTreeSet<String>, usize)> = None;
    for (set, &n) in &counts {
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((set, n));
        }
    }
    best.map(|(s, _)| s.clone()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub decoder: String,
    pub task: DialogueTask,
    /// `exact_match` or `joint_goal_accuracy`.
    pub metric: String,
    pub score: f64,
    /// Majority-label-set (classification) or always-empty (DST) baseline.
    pub baseline: f64,
    pub examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scores: Vec<TaskScore>,
}

impl EvalReport {
    pub fn get(&self, decoder: &str, task: DialogueTask) -> Option<&TaskScore> {
        self.scores.iter().find(|s| s.decoder == decoder && s.task == task)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<12} {:<8} {:<20} {:>8} {:>9} {:>8}\n",
            "decoder", "task", "metric", "score", "baseline", "n"
        );
        for s in &self.scores {
            out.push_str(&format!(
                "{:<12} {:<8} {:<20} {:>8.4} {:>9.4} {:>8}\n",
                s.decoder, s.task, s.metric, s.score, s.baseline, s.examples
            ));
        }
        out
    }
}

fn metric(e: MetricError) -> Error {
    Error::Invalid(e.to_string())
}

/// Scores every listed decoder on every user turn of `test`, with gold history
/// as context. `train` supplies the majority-label-set baseline.
pub fn evaluate(
    model: &AutodialModel,
    train: &[Dialogue],
    test: &[Dialogue],
    decoders: &[&str],
    opts: &InferOptions,
) -> Result<EvalReport> {
    let vocab: &Vocab = model
        .vocab
        .as_ref()
        .ok_or_else(|| Error::Invalid("model has no vocabulary".into()))?;
    let mut encodings = Vec::new();
    let mut turns = Vec::new();
    for d in test {
        for (t, &idx) in user_turn_indices(d).iter().enumerate() {
            let ctx = build_context(d, t, vocab, model.config().max_seq_len)?;
            encodings.push(model.encode_context(&ctx)?);
            turns.push(&d.turns[idx]);
        }
    }
    if turns.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut scores = Vec::new();
    for &name in decoders {
        let spec = &model.decoder(name)?.spec;
        match &spec.kind {
            DecoderKind::Classification { source, .. } => {
                let task = *source;
                let mut pred = Vec::new();
                for enc in &encodings {
                    pred.push(predict_labels_encoded(model, name, enc, opts.threshold)?.into_iter().collect());
                }
                let gold: Vec<BTreeSet<String>> = turns.iter().map(|t| gold_label_set(task, t, false)).collect();
                let majority = majority_label_set(train, task);
                let base = vec![majority; gold.len()];
                scores.push(TaskScore {
                    decoder: name.into(),
                    task,
                    metric: "exact_match".into(),
                    score: exact_match_accuracy(&pred, &gold).map_err(metric)?,
                    baseline: exact_match_accuracy(&base, &gold).map_err(metric)?,
                    examples: gold.len(),
                });
            }
            DecoderKind::Generative { tasks } => {
                for &task in tasks {
                    let texts = encodings
                        .iter()
                        .map(|enc| {
                            greedy_decode_encoded(model, name, task, enc, opts.gen_max_len, false)
                                .map(|ids| detokenize(&ids, vocab))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let score = if task == DialogueTask::Dst {
                        let pred: Vec<BeliefState> = texts.iter().map(|s| parse_belief(s).belief).collect();
                        let gold: Vec<BeliefState> = turns.iter().map(|t| t.belief()).collect();
                        let empty = vec![BeliefState::default(); gold.len()];
                        TaskScore {
                            decoder: name.into(),
                            task,
                            metric: "joint_goal_accuracy".into(),
                            score: joint_goal_accuracy(&pred, &gold).map_err(metric)?,
                            baseline: joint_goal_accuracy(&empty, &gold).map_err(metric)?,
                            examples: gold.len(),
                        }
                    } else {
                        let pred: Vec<BTreeSet<String>> = texts.iter().map(|s| labels_from_text(s)).collect();
                        let gold: Vec<BTreeSet<String>> = turns.iter().map(|t| gold_label_set(task, t, true)).collect();
                        let majority: BTreeSet<String> =
                            majority_label_set(train, task).iter().map(|l| l.to_lowercase()).collect();
                        let base = vec![majority; gold.len()];
                        TaskScore {
                            decoder: name.into(),
                            task,
                            metric: "exact_match".into(),
                            score: exact_match_accuracy(&pred, &gold).map_err(metric)?,
                            baseline: exact_match_accuracy(&base, &gold).map_err(metric)?,
                            examples: gold.len(),
                        }
                    };
                    scores.push(score);
                }
            }
        }
    }
    Ok(EvalReport { scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelSpace;
    use crate::model::DecoderSpec;
    use crate::tensor::Tensor;
    use crate::transformer::ModelConfig;

    fn model() -> AutodialModel {
        let vocab = Vocab::build(["hotel area north south"]);
        let mut c = ModelConfig::tiny(vocab.len());
        c.d_model = 8;
        c.n_heads = 2;
        c.ffn_dim = 8;
        c.enc_layers = 1;
        c.max_seq_len = 16;
        AutodialModel::build(
            c,
            vec![
                DecoderSpec::classification(DialogueTask::Act, LabelSpace::new(["a", "b", "c"])),
                DecoderSpec::generative("dst", vec![DialogueTask::Dst], 1),
            ],
            1,
        )
        .unwrap()
        .with_vocab(vocab)
    }

    fn set_head(m: &mut AutodialModel, w: f32, b: Vec<f32>) {
        let p = &mut m.decoder_mut("act").unwrap().params;
        let hw = p.get_mut("decoder.act.head.w").unwrap();
        hw.data_mut().iter_mut().for_each(|x| *x = w);
        p.get_mut("decoder.act.head.b").unwrap().data_mut().copy_from_slice(&b);
    }

    #[test]
    fn threshold_semantics() {
        let mut m = model();
        let ctx = [1, 11, 12, 2];
        set_head(&mut m, 0.0, vec![-50.0; 3]);
        assert!(predict_labels(&m, "act", &ctx, 0.5).unwrap().is_empty());
        set_head(&mut m, 0.0, vec![0.0; 3]);
        assert_eq!(predict_labels(&m, "act", &ctx, 0.5).unwrap(), vec!["a", "b", "c"]);
        set_head(&mut m, 0.0, vec![-50.0, 50.0, -50.0]);
        assert_eq!(predict_labels(&m, "act", &ctx, 0.5).unwrap(), vec!["b"]);
    }

    #[test]
    fn greedy_bounds() {
        let m = model();
        let ctx = [1, 11, 2];
        assert!(greedy_decode(&m, "dst", &ctx, 1).unwrap().len() <= 1);
        let a = greedy_decode(&m, "dst", &ctx, 5).unwrap();
        assert_eq!(a, greedy_decode(&m, "dst", &ctx, 5).unwrap());
        assert!(matches!(greedy_decode(&m, "act", &ctx, 5), Err(Error::WrongKind { .. })));
        assert!(matches!(greedy_decode(&m, "x", &ctx, 5), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn eos_favoured_head_gives_empty_output() {
        let mut m = model();
        // Bias the decoder's final norm so every state aligns with the eos row
        // of the tied token table.
        let eos = m.vocab.as_ref().unwrap().eos_id();
        let d = m.config().d_model;
        let table = m.encoder().get("encoder.embed_tokens").unwrap().row(eos).to_vec();
        let dec = &mut m.decoder_mut("dst").unwrap().params;
        let ln = "decoder.dst.layer0.ln3";
        *dec.get_mut(&format!("{ln}.gamma")).unwrap() = Tensor::vector(vec![0.0; d]).unwrap();
        *dec.get_mut(&format!("{ln}.beta")).unwrap() = Tensor::vector(table.iter().map(|v| v * 1e4).collect()).unwrap();
        assert!(greedy_decode(&m, "dst", &[1, 11, 2], 8).unwrap().is_empty());
    }

    #[test]
    fn infer_all_single_encode_and_equivalence() {
        let m = model();
        let ctx = [1, 11, 13, 2];
        let opts = InferOptions {
            gen_max_len: 4,
            ..Default::default()
        };
        let before = m.encoder_invocations();
        let res = infer_all(&m, &ctx, &["act", "dst"], &opts).unwrap();
        assert_eq!(m.encoder_invocations(), before + 1);
        let mut ords: Vec<usize> = res.iter().map(|r| r.ordinal).collect();
        ords.sort();
        assert_eq!(ords, vec![0, 1]);
        let mut got: Vec<_> = res.into_iter().map(|r| (r.task, r.payload)).collect();
        let mut want: Vec<_> = infer_sequential(&m, &ctx, &["act", "dst"], &opts)
            .unwrap()
            .into_iter()
            .map(|r| (r.task, r.payload))
            .collect();
        got.sort();
        want.sort();
        assert_eq!(got, want);
        assert!(matches!(infer_all(&m, &ctx, &["act", "zzz"], &opts), Err(Error::UnknownTask(_))));
        assert!(infer_all(&m, &ctx, &[], &opts).is_err());
    }

    #[test]
    fn label_text_parsing() {
        let s = labels_from_text("hotel-inform ;  taxi-request ; ");
        assert_eq!(s.into_iter().collect::<Vec<_>>(), vec!["hotel-inform", "taxi-request"]);
        assert!(labels_from_text("").is_empty());
    }
}
