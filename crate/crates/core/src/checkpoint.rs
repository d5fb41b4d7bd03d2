//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ADCP" | version u32 | section count u32
//! per section: name_len u32 | name | offset u64 | length u64
//! section bodies
//! CRC-32 u32 over every preceding byte
//! ```
//!
//! A section body is `header_len u32 | header JSON | tensor count u32 |
//! tensors`, each tensor being `name_len u32 | name | rank u32 | dims u64… |
//! f32 data`. Sections are `meta`, `encoder` and `decoder.<task>`; a file
//! without an `encoder` section carries decoders only.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Vocab;
use crate::model::{encoder_fingerprint, AutodialModel, Decoder, DecoderSpec};
use crate::tensor::{ParamStore, Tensor};
use crate::transformer::{encoder_layout, ModelConfig, ParamSpec};

pub const MAGIC: &[u8; 4] = b"ADCP";
pub const VERSION: u32 = 1;

const META: &str = "meta";
const ENCODER: &str = "encoder";
const DECODER_PREFIX: &str = "decoder.";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch")]
    CrcMismatch,
    #[error("checkpoint lacks section `{0}`")]
    MissingSection(String),
    #[error("unknown tensor `{name}` in section `{section}`")]
    UnknownTensor { section: String, name: String },
    #[error("tensor `{0}` is missing")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("decoder `{task}` was trained against encoder {found}, model encoder is {expected}")]
    FingerprintMismatch {
        task: String,
        expected: String,
        found: String,
    },
    #[error("checkpoint config differs from the model config")]
    ConfigMismatch,
    #[error("malformed section header: {0}")]
    Header(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Serialize, Deserialize)]
struct MetaHeader {
    config: ModelConfig,
    encoder_fingerprint: String,
    vocab: Option<Vocab>,
}

#[derive(Serialize, Deserialize)]
struct DecoderHeader {
    spec: DecoderSpec,
    encoder_fingerprint: String,
}

/// Decoders read from a file, still unbound to any model.
#[derive(Debug, Clone)]
pub struct DecoderBundle {
    pub config: ModelConfig,
    pub vocab: Option<Vocab>,
    pub decoders: Vec<Decoder>,
}

fn encode_section(header: &impl Serialize, tensors: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    let h = serde_json::to_vec(header).expect("header serializes");
    out.extend((h.len() as u32).to_le_bytes());
    out.extend(h);
    out.extend((tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors.iter() {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.rank() as u32).to_le_bytes());
        for d in t.shape() {
            out.extend((*d as u64).to_le_bytes());
        }
        out.extend(t.to_le_bytes());
    }
    out
}

fn encode_file(sections: &[(String, Vec<u8>)]) -> Vec<u8> {
    let table_len: usize = sections.iter().map(|(n, _)| 4 + n.len() + 16).sum();
    let mut offset = (12 + table_len) as u64;
    let mut out = Vec::new();
    out.extend(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((sections.len() as u32).to_le_bytes());
    for (name, body) in sections {
        out.extend((name.len() as u32).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend(offset.to_le_bytes());
        out.extend((body.len() as u64).to_le_bytes());
        offset += body.len() as u64;
    }
    for (_, body) in sections {
        out.extend(body);
    }
    let crc = crc32fast::hash(&out);
    out.extend(crc.to_le_bytes());
    out
}

/// Writes through a sibling temp file and renames it into place, so readers
/// never observe a half-written checkpoint.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = dir.join(format!(".{file_name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn meta_section(model: &AutodialModel) -> (String, Vec<u8>) {
    let header = MetaHeader {
        config: model.config().clone(),
        encoder_fingerprint: model.fingerprint().to_string(),
        vocab: model.vocab.clone(),
    };
    (META.to_string(), encode_section(&header, &ParamStore::new()))
}

fn decoder_section(d: &Decoder) -> (String, Vec<u8>) {
    let header = DecoderHeader {
        spec: d.spec.clone(),
        encoder_fingerprint: d.encoder_fingerprint.clone(),
    };
    (format!("{DECODER_PREFIX}{}", d.spec.task), encode_section(&header, &d.params))
}

/// Serializes the encoder and every decoder.
pub fn to_bytes(model: &AutodialModel) -> Vec<u8> {
    let mut sections = vec![meta_section(model)];
    sections.push((ENCODER.to_string(), encode_section(&serde_json::Value::Null, model.encoder())));
    sections.extend(model.decoders().map(decoder_section));
    encode_file(&sections)
}

/// Serializes only the named decoders, for shipping against an existing encoder.
pub fn decoders_to_bytes(model: &AutodialModel, tasks: &[&str]) -> crate::Result<Vec<u8>> {
    let mut sections = vec![meta_section(model)];
    for t in tasks {
        sections.push(decoder_section(model.decoder(t)?));
    }
    Ok(encode_file(&sections))
}

pub fn save_checkpoint(model: &AutodialModel, path: impl AsRef<Path>) -> Result<()> {
    Ok(write_atomic(path.as_ref(), &to_bytes(model))?)
}

pub fn save_decoders(model: &AutodialModel, tasks: &[&str], path: impl AsRef<Path>) -> crate::Result<()> {
    let bytes = decoders_to_bytes(model, tasks)?;
    write_atomic(path.as_ref(), &bytes)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| CheckpointError::Header(e.to_string()))
    }
}

struct Section<'a> {
    header: &'a [u8],
    tensors: Vec<(String, Tensor)>,
}

fn parse_section(body: &[u8]) -> Result<Section<'_>> {
    let mut r = Reader { buf: body, pos: 0 };
    let hlen = r.u32()? as usize;
    let header = r.take(hlen)?;
    let count = r.u32()?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| CheckpointError::Truncated)?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or(CheckpointError::Truncated)?;
        let data = r
            .take(n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Header(e.to_string()))?;
        tensors.push((name, t));
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Header("trailing bytes in section".into()));
    }
    Ok(Section { header, tensors })
}

fn parse_file(bytes: &[u8]) -> Result<BTreeMap<String, &[u8]>> {
    if bytes.len() < 4 {
        return Err(if MAGIC.starts_with(bytes) {
            CheckpointError::Truncated
        } else {
            CheckpointError::BadMagic
        });
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let count = r.u32()?;
    let mut table = Vec::new();
    for _ in 0..count {
        let name = r.string()?;
        let offset = r.u64()? as usize;
        let len = r.u64()? as usize;
        table.push((name, offset, len));
    }
    let body_end = table
        .iter()
        .map(|&(_, o, l)| o.saturating_add(l))
        .max()
        .unwrap_or(r.pos)
        .max(r.pos);
    if bytes.len() < body_end.saturating_add(4) {
        return Err(CheckpointError::Truncated);
    }
    if bytes.len() != body_end + 4 {
        return Err(CheckpointError::Header("unexpected bytes after sections".into()));
    }
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(CheckpointError::CrcMismatch);
    }
    let mut out = BTreeMap::new();
    for (name, o, l) in table {
        out.insert(name, &bytes[o..o + l]);
    }
    Ok(out)
}

fn json<'a, T: Deserialize<'a>>(bytes: &'a [u8]) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| CheckpointError::Header(e.to_string()))
}

/// Checks tensors against the expected layout and builds a store.
fn store_from(section: &str, tensors: Vec<(String, Tensor)>, layout: &[ParamSpec], trainable: bool) -> Result<ParamStore> {
    let expected: BTreeMap<&str, &ParamSpec> = layout.iter().map(|p| (p.name.as_str(), p)).collect();
    let mut store = ParamStore::new();
    let mut seen = HashSet::new();
    for (name, t) in tensors {
        let Some(spec) = expected.get(name.as_str()) else {
            return Err(CheckpointError::UnknownTensor {
                section: section.to_string(),
                name,
            });
        };
        if t.shape() != spec.shape.as_slice() {
            return Err(CheckpointError::ShapeMismatch {
                found: t.shape().to_vec(),
                expected: spec.shape.clone(),
                name,
            });
        }
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Header(format!("duplicate tensor `{name}`")));
        }
        store
            .insert(name.clone(), t.with_requires_grad(trainable))
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
    }
    if let Some(missing) = expected.keys().find(|n| !seen.contains(**n)) {
        return Err(CheckpointError::MissingTensor(missing.to_string()));
    }
    Ok(store)
}

fn read_meta(sections: &BTreeMap<String, &[u8]>) -> Result<MetaHeader> {
    let body = sections
        .get(META)
        .ok_or_else(|| CheckpointError::MissingSection(META.into()))?;
    json(parse_section(body)?.header)
}

fn read_decoders(sections: &BTreeMap<String, &[u8]>, config: &ModelConfig) -> Result<Vec<Decoder>> {
    let mut out = Vec::new();
    for (name, body) in sections.iter().filter(|(n, _)| n.starts_with(DECODER_PREFIX)) {
        let section = parse_section(body)?;
        let header: DecoderHeader = json(section.header)?;
        if name[DECODER_PREFIX.len()..] != header.spec.task {
            return Err(CheckpointError::Header(format!("section `{name}` holds decoder `{}`", header.spec.task)));
        }
        let params = store_from(name, section.tensors, &header.spec.layout(config), true)?;
        out.push(Decoder {
            spec: header.spec,
            params,
            encoder_fingerprint: header.encoder_fingerprint,
        });
    }
    Ok(out)
}

/// Restores a full model. The encoder comes back frozen and every decoder
/// must have been trained against it.
pub fn from_bytes(bytes: &[u8]) -> crate::Result<AutodialModel> {
    let sections = parse_file(bytes)?;
    let meta = read_meta(&sections)?;
    meta.config.validate()?;
    let enc_body = sections
        .get(ENCODER)
        .ok_or_else(|| CheckpointError::MissingSection(ENCODER.into()))?;
    let enc = parse_section(enc_body)?;
    let encoder = store_from(ENCODER, enc.tensors, &encoder_layout(&meta.config), false)?;
    let fp = encoder_fingerprint(&meta.config, &encoder);
    if fp != meta.encoder_fingerprint {
        return Err(CheckpointError::FingerprintMismatch {
            task: ENCODER.into(),
            expected: fp,
            found: meta.encoder_fingerprint,
        }
        .into());
    }
    let mut model = AutodialModel::from_parts(meta.config.clone(), encoder, BTreeMap::new());
    model.vocab = meta.vocab;
    for d in read_decoders(&sections, &meta.config)? {
        check_binding(&model, &d)?;
        model.insert_decoder(d)?;
    }
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> crate::Result<AutodialModel> {
    from_bytes(&fs::read(path)?)
}

/// Reads decoder sections from any checkpoint without binding them.
pub fn read_decoder_bundle(bytes: &[u8]) -> crate::Result<DecoderBundle> {
    let sections = parse_file(bytes)?;
    let meta = read_meta(&sections)?;
    meta.config.validate()?;
    let decoders = read_decoders(&sections, &meta.config)?;
    Ok(DecoderBundle {
        config: meta.config,
        vocab: meta.vocab,
        decoders,
    })
}

fn check_binding(model: &AutodialModel, d: &Decoder) -> Result<()> {
    if d.encoder_fingerprint != model.fingerprint() {
        return Err(CheckpointError::FingerprintMismatch {
            task: d.spec.task.clone(),
            expected: model.fingerprint().to_string(),
            found: d.encoder_fingerprint.clone(),
        });
    }
    Ok(())
}

/// Attaches the decoders stored in `path` to `model`. Fails without changing
/// the model if any decoder was trained against a different encoder.
pub fn load_decoders_into(model: &mut AutodialModel, path: impl AsRef<Path>) -> crate::Result<Vec<String>> {
    let bundle = read_decoder_bundle(&fs::read(path)?)?;
    attach_bundle(model, bundle)
}

pub fn attach_bundle(model: &mut AutodialModel, bundle: DecoderBundle) -> crate::Result<Vec<String>> {
    if &bundle.config != model.config() {
        return Err(CheckpointError::ConfigMismatch.into());
    }
    for d in &bundle.decoders {
        check_binding(model, d)?;
        if model.decoder(&d.spec.task).is_ok() {
            return Err(crate::Error::DuplicateTask(d.spec.task.clone()));
        }
    }
    let mut names = Vec::new();
    for d in bundle.decoders {
        names.push(d.spec.task.clone());
        model.insert_decoder(d)?;
    }
    Ok(names)
}
