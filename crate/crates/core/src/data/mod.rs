//! Corpus schema, tokenizer, context construction, label spaces and the
//! synthetic corpus generator.

mod belief;
mod context;
mod corpus;
mod labels;
pub mod synth;
mod vocab;

pub use belief::{parse_belief, serialize_belief, BeliefState, ParsedBelief};
pub use context::{build_context, user_turn_indices};
pub use corpus::{corpus_fingerprint, load_corpus, parse_corpus, save_corpus, write_corpus};
pub use labels::{build_label_spaces, encode_labels, LabelSpace, LabelSpaces};
pub use synth::{synth_corpus, GeneratorReport, SynthConfig};
pub use vocab::{detokenize, split_words, tokenize, Vocab};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: unknown speaker tag `{tag}`")]
    UnknownSpeaker { line: usize, tag: String },
    #[error("line {line}: dialogue `{dialogue_id}` does not alternate user/system starting with user (turn {turn})")]
    Alternation {
        line: usize,
        dialogue_id: String,
        turn: usize,
    },
    #[error("line {line}: dialogue `{dialogue_id}` has no user turn")]
    NoUserTurn { line: usize, dialogue_id: String },
    #[error("user turn {index} out of range ({available} user turns)")]
    TurnOutOfRange { index: usize, available: usize },
    #[error("max_seq_len {0} cannot hold bos, speaker tag and eos")]
    SeqLenTooSmall(usize),
    #[error("labels not in space: {0:?}")]
    UnknownLabels(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => vocab::USER,
            Speaker::System => vocab::SYSTEM,
        }
    }
}

/// One utterance with its annotations. System turns carry empty lists.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub belief_state: Vec<[String; 3]>,
    pub acts: Vec<String>,
    pub intents: Vec<String>,
    pub domains: Vec<String>,
}

impl Turn {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::System,
            text: text.into(),
            belief_state: Vec::new(),
            acts: Vec::new(),
            intents: Vec::new(),
            domains: Vec::new(),
        }
    }

    pub fn belief(&self) -> BeliefState {
        BeliefState::from_triplets(self.belief_state.iter().map(|[d, s, v]| (d.as_str(), s.as_str(), v.as_str())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
}

impl Dialogue {
    pub fn user_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.speaker == Speaker::User)
    }
}

/// The four dialogue tasks sharing one context.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DialogueTask {
    Dst,
    Act,
    Intent,
    Domain,
}

impl DialogueTask {
    pub const ALL: [DialogueTask; 4] = [Self::Dst, Self::Act, Self::Intent, Self::Domain];
    pub const CLASSIFICATION: [DialogueTask; 3] = [Self::Act, Self::Intent, Self::Domain];

    pub fn name(self) -> &'static str {
        match self {
            Self::Dst => "dst",
            Self::Act => "act",
            Self::Intent => "intent",
            Self::Domain => "domain",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Decoder prompt token announcing which task a generative decoder should solve.
    pub fn tag_token(self) -> &'static str {
        match self {
            Self::Dst => "<dst>",
            Self::Act => "<act>",
            Self::Intent => "<intent>",
            Self::Domain => "<domain>",
        }
    }

    /// Gold labels of a classification task; empty for DST.
    pub fn labels(self, turn: &Turn) -> &[String] {
        match self {
            Self::Dst => &[],
            Self::Act => &turn.acts,
            Self::Intent => &turn.intents,
            Self::Domain => &turn.domains,
        }
    }

    /// Text target for generative decoding: the serialized belief state for
    /// DST, otherwise the lowercased labels in sorted order joined by `" ; "`.
    pub fn target_text(self, turn: &Turn) -> String {
        match self {
            Self::Dst => serialize_belief(&turn.belief()),
            _ => {
                let mut labels: Vec<String> = self.labels(turn).iter().map(|l| l.trim().to_lowercase()).collect();
                labels.sort();
                labels.dedup();
                labels.join(" ; ")
            }
        }
    }
}

impl std::fmt::Display for DialogueTask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.name())
    }
}
