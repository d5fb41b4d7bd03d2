//! The composite model: one shared, frozen encoder and a registry of
//! independently trainable decoders.
//!
//! Decoder parameters live in their own [`ParamStore`] under
//! `decoder.<task>.…`, disjoint from `encoder.…` and from each other, so a
//! decoder can be attached, trained or shipped without touching anything else.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DialogueTask, LabelSpace, Vocab};
use crate::error::{Error, Result};
use crate::tensor::ParamStore;
use crate::transformer::{
    classification_decoder_forward, classification_decoder_layout, encoder_forward, encoder_layout,
    generative_decoder_forward, generative_decoder_layout, layout_numel, materialize, EncoderOutput, ModelConfig,
    ParamSpec,
};
use crate::tensor::Tensor;

pub const DEFAULT_CLS_LAYERS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DecoderKind {
    /// Multi-label classifier over `labels`, supervised by `source` annotations.
    Classification { source: DialogueTask, labels: LabelSpace },
    /// Autoregressive decoder producing the text targets of `tasks`.
    Generative { tasks: Vec<DialogueTask> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub task: String,
    pub kind: DecoderKind,
    pub layers: usize,
}

impl DecoderSpec {
    /// Two-layer classification decoder named after its task.
    pub fn classification(source: DialogueTask, labels: LabelSpace) -> Self {
        Self {
            task: source.name().to_string(),
            kind: DecoderKind::Classification { source, labels },
            layers: DEFAULT_CLS_LAYERS,
        }
    }

    pub fn generative(name: impl Into<String>, tasks: Vec<DialogueTask>, layers: usize) -> Self {
        Self {
            task: name.into(),
            kind: DecoderKind::Generative { tasks },
            layers,
        }
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.kind, DecoderKind::Classification { .. })
    }

    pub fn n_labels(&self) -> Option<usize> {
        match &self.kind {
            DecoderKind::Classification { labels, .. } => Some(labels.len()),
            DecoderKind::Generative { .. } => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.kind {
            DecoderKind::Classification { .. } => "classification",
            DecoderKind::Generative { .. } => "generative",
        }
    }

    pub fn layout(&self, cfg: &ModelConfig) -> Vec<ParamSpec> {
        match &self.kind {
            DecoderKind::Classification { labels, .. } => {
                classification_decoder_layout(cfg, &self.task, self.layers, labels.len())
            }
            DecoderKind::Generative { .. } => generative_decoder_layout(cfg, &self.task, self.layers),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = !self.task.is_empty()
            && self
                .task
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
        if !ok {
            return Err(Error::InvalidTaskName(self.task.clone()));
        }
        match &self.kind {
            DecoderKind::Classification { labels, .. } if labels.is_empty() => Err(Error::NoLabels),
            DecoderKind::Generative { tasks } if tasks.is_empty() => Err(Error::Invalid(format!(
                "generative decoder `{}` has no tasks",
                self.task
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub spec: DecoderSpec,
    pub params: ParamStore,
    /// Fingerprint of the encoder this decoder was initialized or trained against.
    pub encoder_fingerprint: String,
}

/// Stable per-task seed derived from the model seed.
fn decoder_seed(seed: u64, task: &str) -> u64 {
    let digest = Sha256::digest(format!("{seed}:{task}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// SHA-256 over the config and every encoder tensor (name, shape, bytes).
pub fn encoder_fingerprint(cfg: &ModelConfig, encoder: &ParamStore) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    for (name, t) in encoder.iter() {
        h.update(name.as_bytes());
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// SHA-256 of a store's tensor bytes, for before/after comparisons.
pub fn params_hash(store: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, t) in store.iter() {
        h.update(name.as_bytes());
        h.update(t.to_le_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug)]
pub struct AutodialModel {
    config: ModelConfig,
    encoder: ParamStore,
    decoders: BTreeMap<String, Decoder>,
    fingerprint: Arc<str>,
    encoder_calls: AtomicUsize,
    pub vocab: Option<Vocab>,
}

impl Clone for AutodialModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            encoder: self.encoder.clone(),
            decoders: self.decoders.clone(),
            fingerprint: self.fingerprint.clone(),
            encoder_calls: AtomicUsize::new(0),
            vocab: self.vocab.clone(),
        }
    }
}

impl AutodialModel {
    /// Initializes the encoder and one decoder per spec from `seed`. The
    /// encoder starts frozen.
    pub fn build(config: ModelConfig, specs: Vec<DecoderSpec>, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::NoDecoders);
        }
        let mut model = Self::encoder_only(config, seed)?;
        for spec in specs {
            model.attach_decoder(spec, seed)?;
        }
        Ok(model)
    }

    /// A model with an initialized encoder and no decoders yet.
    pub fn encoder_only(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = materialize(&encoder_layout(&config), false, &mut rng)?;
        Ok(Self::from_parts(config, encoder, BTreeMap::new()))
    }

    pub(crate) fn from_parts(config: ModelConfig, encoder: ParamStore, decoders: BTreeMap<String, Decoder>) -> Self {
        let fingerprint = Arc::from(encoder_fingerprint(&config, &encoder));
        Self {
            config,
            encoder,
            decoders,
            fingerprint,
            encoder_calls: AtomicUsize::new(0),
            vocab: None,
        }
    }

    pub fn with_vocab(mut self, vocab: Vocab) -> Self {
        self.vocab = Some(vocab);
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &ParamStore {
        &self.encoder
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn decoder(&self, task: &str) -> Result<&Decoder> {
        self.decoders.get(task).ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn decoder_mut(&mut self, task: &str) -> Result<&mut Decoder> {
        self.decoders.get_mut(task).ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    pub fn decoders(&self) -> impl Iterator<Item = &Decoder> {
        self.decoders.values()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.decoders.keys().map(String::as_str)
    }

    /// Split borrow used by training: the encoder read-only, one decoder mutable.
    pub fn split_mut(&mut self, task: &str) -> Result<(&ModelConfig, &ParamStore, &mut Decoder)> {
        let dec = self
            .decoders
            .get_mut(task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        Ok((&self.config, &self.encoder, dec))
    }

    /// Mutable access to the encoder and one decoder, for runs that train both.
    pub fn encoder_and_decoder_mut(&mut self, task: &str) -> Result<(&ModelConfig, &mut ParamStore, &mut Decoder)> {
        let dec = self
            .decoders
            .get_mut(task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        Ok((&self.config, &mut self.encoder, dec))
    }

    /// Disjoint mutable borrows of several decoders plus the shared encoder.
    pub fn decoders_mut(&mut self) -> (&ModelConfig, &ParamStore, Vec<&mut Decoder>) {
        (&self.config, &self.encoder, self.decoders.values_mut().collect())
    }

    /// Marks every encoder parameter non-trainable. Idempotent.
    pub fn freeze_encoder(&mut self) {
        self.encoder.set_trainable(false);
    }

    pub fn unfreeze_encoder(&mut self) {
        self.encoder.set_trainable(true);
    }

    pub fn encoder_frozen(&self) -> bool {
        self.encoder.all_frozen()
    }

    /// Recomputes the encoder fingerprint after the encoder was trained, and
    /// rebinds the listed decoders to it.
    pub fn refresh_fingerprint(&mut self, trained_with: &[&str]) {
        self.fingerprint = Arc::from(encoder_fingerprint(&self.config, &self.encoder));
        for task in trained_with {
            if let Some(d) = self.decoders.get_mut(*task) {
                d.encoder_fingerprint = self.fingerprint.to_string();
            }
        }
    }

    /// Adds a freshly initialized decoder. Existing components are untouched.
    pub fn attach_decoder(&mut self, spec: DecoderSpec, seed: u64) -> Result<()> {
        spec.validate()?;
        if self.decoders.contains_key(&spec.task) {
            return Err(Error::DuplicateTask(spec.task));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(decoder_seed(seed, &spec.task));
        let params = materialize(&spec.layout(&self.config), true, &mut rng)?;
        self.insert_decoder(Decoder {
            spec,
            params,
            encoder_fingerprint: self.fingerprint.to_string(),
        })
    }

    pub(crate) fn insert_decoder(&mut self, decoder: Decoder) -> Result<()> {
        let task = decoder.spec.task.clone();
        if self.decoders.contains_key(&task) {
            return Err(Error::DuplicateTask(task));
        }
        for name in decoder.params.names() {
            if self.encoder.contains(name) || self.decoders.values().any(|d| d.params.contains(name)) {
                return Err(Error::NameCollision(name.to_string()));
            }
        }
        self.decoders.insert(task, decoder);
        Ok(())
    }

    pub fn remove_decoder(&mut self, task: &str) -> Result<Decoder> {
        self.decoders.remove(task).ok_or_else(|| Error::UnknownTask(task.to_string()))
    }

    /// Runs the shared encoder once. The result can feed any number of decoders.
    pub fn encode_context(&self, ids: &[usize]) -> Result<EncoderOutput> {
        if ids.is_empty() {
            return Err(Error::EmptyInput);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::InputTooLong {
                len: ids.len(),
                max: self.config.max_seq_len,
            });
        }
        self.encoder_calls.fetch_add(1, Ordering::SeqCst);
        Ok(encoder_forward(&self.config, &self.encoder, ids, self.fingerprint.clone())?)
    }

    /// Number of encoder forward passes made through [`Self::encode_context`].
    pub fn encoder_invocations(&self) -> usize {
        self.encoder_calls.load(Ordering::SeqCst)
    }

    fn check_encoding(&self, enc: &EncoderOutput) -> Result<()> {
        if *enc.fingerprint != *self.fingerprint {
            return Err(Error::Invalid("encoder output comes from a different encoder".into()));
        }
        Ok(())
    }

    /// `[n_labels]` logits of a classification decoder.
    pub fn classification_logits(&self, task: &str, enc: &EncoderOutput) -> Result<Tensor> {
        self.check_encoding(enc)?;
        let d = self.decoder(task)?;
        if !d.spec.is_classification() {
            return Err(Error::WrongKind {
                task: task.to_string(),
                expected: "classification",
            });
        }
        Ok(classification_decoder_forward(&self.config, &d.params, task, d.spec.layers, enc)?)
    }

    /// `[T_dec, vocab]` logits of a generative decoder over `dec_ids`.
    pub fn generative_logits(&self, task: &str, dec_ids: &[usize], enc: &EncoderOutput) -> Result<Tensor> {
        self.check_encoding(enc)?;
        let d = self.decoder(task)?;
        if d.spec.is_classification() {
            return Err(Error::WrongKind {
                task: task.to_string(),
                expected: "generative",
            });
        }
        Ok(generative_decoder_forward(
            &self.config,
            &self.encoder,
            &d.params,
            task,
            d.spec.layers,
            dec_ids,
            enc,
        )?)
    }

    pub fn parameter_report(&self) -> ParameterReport {
        let mut rows = vec![ParamRow {
            component: "encoder".into(),
            kind: "encoder".into(),
            count: self.encoder.numel(),
            trainable: self.encoder.trainable_numel(),
        }];
        for d in self.decoders.values() {
            rows.push(ParamRow {
                component: format!("decoder.{}", d.spec.task),
                kind: d.spec.kind_name().into(),
                count: d.params.numel(),
                trainable: d.params.trainable_numel(),
            });
        }
        ParameterReport::with_total(rows)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamRow {
    pub component: String,
    pub kind: String,
    pub count: usize,
    pub trainable: usize,
}

/// Per-component parameter counts with a trailing `total` row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub rows: Vec<ParamRow>,
}

impl ParameterReport {
    fn with_total(mut rows: Vec<ParamRow>) -> Self {
        let total = ParamRow {
            component: "total".into(),
            kind: "total".into(),
            count: rows.iter().map(|r| r.count).sum(),
            trainable: rows.iter().map(|r| r.trainable).sum(),
        };
        rows.push(total);
        Self { rows }
    }

    /// Counts from layouts alone, with a frozen encoder and trainable
    /// decoders. Nothing is allocated, so any size can be reported.
    pub fn from_layout(config: &ModelConfig, specs: &[DecoderSpec]) -> Self {
        let enc = layout_numel(&encoder_layout(config));
        let mut rows = vec![ParamRow {
            component: "encoder".into(),
            kind: "encoder".into(),
            count: enc,
            trainable: 0,
        }];
        for s in specs {
            let n = layout_numel(&s.layout(config));
            rows.push(ParamRow {
                component: format!("decoder.{}", s.task),
                kind: s.kind_name().into(),
                count: n,
                trainable: n,
            });
        }
        Self::with_total(rows)
    }

    pub fn row(&self, component: &str) -> Option<&ParamRow> {
        self.rows.iter().find(|r| r.component == component)
    }

    pub fn count(&self, component: &str) -> usize {
        self.row(component).map_or(0, |r| r.count)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:<28} {:>15} {:>15} {:>10}\n", "component", "params", "trainable", "millions");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>15} {:>15} {:>9.1}M\n",
                r.component,
                r.count,
                r.trainable,
                r.count as f64 / 1e6
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<DecoderSpec> {
        vec![
            DecoderSpec::classification(DialogueTask::Act, LabelSpace::new(["a", "b", "c"])),
            DecoderSpec::generative("dst", vec![DialogueTask::Dst], 1),
        ]
    }

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::tiny(20);
        c.d_model = 8;
        c.n_heads = 2;
        c.ffn_dim = 16;
        c.enc_layers = 1;
        c.max_seq_len = 12;
        c
    }

    #[test]
    fn build_is_deterministic_and_frozen() {
        let a = AutodialModel::build(cfg(), specs(), 3).unwrap();
        let b = AutodialModel::build(cfg(), specs(), 3).unwrap();
        assert_eq!(a.encoder(), b.encoder());
        for t in ["act", "dst"] {
            assert_eq!(a.decoder(t).unwrap().params, b.decoder(t).unwrap().params);
        }
        assert!(a.encoder_frozen());
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = AutodialModel::build(cfg(), specs(), 4).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn build_errors() {
        assert!(matches!(AutodialModel::build(cfg(), vec![], 1), Err(Error::NoDecoders)));
        let mut dup = specs();
        dup.push(specs()[0].clone());
        assert!(matches!(AutodialModel::build(cfg(), dup, 1), Err(Error::DuplicateTask(t)) if t == "act"));
        let bad = DecoderSpec::generative("a.b", vec![DialogueTask::Dst], 1);
        assert!(matches!(AutodialModel::build(cfg(), vec![bad], 1), Err(Error::InvalidTaskName(_))));
        let empty = DecoderSpec::classification(DialogueTask::Act, LabelSpace::new(Vec::<String>::new()));
        assert!(matches!(AutodialModel::build(cfg(), vec![empty], 1), Err(Error::NoLabels)));
    }

    #[test]
    fn namespaces_are_disjoint() {
        let m = AutodialModel::build(cfg(), specs(), 1).unwrap();
        let mut seen = std::collections::HashSet::new();
        for n in m.encoder().names() {
            assert!(n.starts_with("encoder."));
            assert!(seen.insert(n.to_string()));
        }
        for d in m.decoders() {
            for n in d.params.names() {
                assert!(n.starts_with(&format!("decoder.{}.", d.spec.task)));
                assert!(seen.insert(n.to_string()));
            }
        }
    }

    #[test]
    fn freeze_is_idempotent() {
        let mut m = AutodialModel::build(cfg(), specs(), 1).unwrap();
        m.unfreeze_encoder();
        assert!(!m.encoder_frozen());
        m.freeze_encoder();
        let snapshot = m.encoder().clone();
        m.freeze_encoder();
        assert_eq!(m.encoder(), &snapshot);
        assert!(m.encoder_frozen());
    }

    #[test]
    fn attach_keeps_old_outputs() {
        let mut m = AutodialModel::build(cfg(), specs(), 1).unwrap();
        let enc = m.encode_context(&[1, 5, 6, 2]).unwrap();
        let before = m.classification_logits("act", &enc).unwrap();
        let gen_before = m.generative_logits("dst", &[1, 7], &enc).unwrap();
        m.attach_decoder(
            DecoderSpec::classification(DialogueTask::Intent, LabelSpace::new(["x", "y"])),
            9,
        )
        .unwrap();
        let enc2 = m.encode_context(&[1, 5, 6, 2]).unwrap();
        assert_eq!(enc, enc2);
        assert_eq!(m.classification_logits("act", &enc2).unwrap().to_le_bytes(), before.to_le_bytes());
        assert_eq!(m.generative_logits("dst", &[1, 7], &enc2).unwrap(), gen_before);
        assert!(matches!(
            m.attach_decoder(DecoderSpec::classification(DialogueTask::Intent, LabelSpace::new(["x"])), 2),
            Err(Error::DuplicateTask(_))
        ));
    }

    #[test]
    fn encode_context_bounds_and_counter() {
        let m = AutodialModel::build(cfg(), specs(), 1).unwrap();
        assert!(m.encode_context(&[1; 12]).is_ok());
        assert!(matches!(m.encode_context(&[1; 13]), Err(Error::InputTooLong { len: 13, max: 12 })));
        assert!(matches!(m.encode_context(&[]), Err(Error::EmptyInput)));
        assert_eq!(m.encoder_invocations(), 1);
    }

    #[test]
    fn shared_encoding_equals_fresh_encodings() {
        let m = AutodialModel::build(cfg(), specs(), 1).unwrap();
        let shared = m.encode_context(&[1, 4, 2]).unwrap();
        let a = m.classification_logits("act", &shared).unwrap();
        let b = m.generative_logits("dst", &[1], &shared).unwrap();
        let a2 = m.classification_logits("act", &m.encode_context(&[1, 4, 2]).unwrap()).unwrap();
        let b2 = m.generative_logits("dst", &[1], &m.encode_context(&[1, 4, 2]).unwrap()).unwrap();
        assert_eq!((a, b), (a2, b2));
    }

    #[test]
    fn wrong_kind_and_unknown_task() {
        let m = AutodialModel::build(cfg(), specs(), 1).unwrap();
        let enc = m.encode_context(&[1, 2]).unwrap();
        assert!(matches!(m.classification_logits("dst", &enc), Err(Error::WrongKind { .. })));
        assert!(matches!(m.generative_logits("act", &[1], &enc), Err(Error::WrongKind { .. })));
        assert!(matches!(m.classification_logits("nope", &enc), Err(Error::UnknownTask(_))));
    }

    #[test]
    fn report_matches_layout_and_store() {
        let m = AutodialModel::build(cfg(), specs(), 1).unwrap();
        let live = m.parameter_report();
        let planned = ParameterReport::from_layout(&cfg(), &specs());
        assert_eq!(live, planned);
        assert_eq!(live.row("encoder").unwrap().trainable, 0);
        let total = live.count("total");
        assert_eq!(total, live.count("encoder") + live.count("decoder.act") + live.count("decoder.dst"));
    }
}
