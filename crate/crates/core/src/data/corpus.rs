//! Line-delimited JSON corpus files: one dialogue object per line.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use super::{DataError, Dialogue, Speaker, Turn};

#[derive(Deserialize)]
struct RawTurn {
    speaker: Option<String>,
    text: Option<String>,
    belief_state: Option<Vec<[String; 3]>>,
    acts: Option<Vec<String>>,
    intents: Option<Vec<String>>,
    domains: Option<Vec<String>>,
}

#[derive(Deserialize)]
struct RawDialogue {
    dialogue_id: Option<String>,
    turns: Option<Vec<RawTurn>>,
}

fn required<T>(v: Option<T>, line: usize, field: &'static str) -> Result<T, DataError> {
    v.ok_or(DataError::MissingField { line, field })
}

fn parse_line(text: &str, line: usize) -> Result<Dialogue, DataError> {
    let raw: RawDialogue = serde_json::from_str(text).map_err(|e| DataError::Malformed {
        line,
        message: e.to_string(),
    })?;
    let dialogue_id = required(raw.dialogue_id, line, "dialogue_id")?;
    let mut turns = Vec::new();
    for rt in required(raw.turns, line, "turns")? {
        let tag = required(rt.speaker, line, "speaker")?;
        let speaker = match tag.as_str() {
            "user" => Speaker::User,
            "system" => Speaker::System,
            _ => return Err(DataError::UnknownSpeaker { line, tag }),
        };
        turns.push(Turn {
            speaker,
            text: required(rt.text, line, "text")?,
            belief_state: required(rt.belief_state, line, "belief_state")?,
            acts: required(rt.acts, line, "acts")?,
            intents: required(rt.intents, line, "intents")?,
            domains: required(rt.domains, line, "domains")?,
        });
    }
    for (i, t) in turns.iter().enumerate() {
        let expected = if i % 2 == 0 { Speaker::User } else { Speaker::System };
        if t.speaker != expected {
            return Err(DataError::Alternation {
                line,
                dialogue_id,
                turn: i,
            });
        }
    }
    if turns.is_empty() {
        return Err(DataError::NoUserTurn { line, dialogue_id });
    }
    Ok(Dialogue { dialogue_id, turns })
}

/// Parses corpus text. Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_corpus(text: &str) -> Result<Vec<Dialogue>, DataError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l, i + 1))
        .collect()
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialogue>, DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(parse_line(&line, i + 1)?);
        }
    }
    Ok(out)
}

pub fn write_corpus<W: Write>(mut w: W, corpus: &[Dialogue]) -> std::io::Result<()> {
    for d in corpus {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn save_corpus(path: impl AsRef<Path>, corpus: &[Dialogue]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, corpus)?;
    fs::write(path, buf)
}

/// SHA-256 of the serialized corpus, hex encoded.
pub fn corpus_fingerprint(corpus: &[Dialogue]) -> String {
    let mut buf = Vec::new();
    write_corpus(&mut buf, corpus).expect("writing to memory");
    hex::encode(Sha256::digest(&buf))
}
