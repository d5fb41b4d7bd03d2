use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{serialize_belief, Dialogue, DialogueTask};

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const USER: &str = "<user>";
pub const SYSTEM: &str = "<system>";
pub const SEP: &str = ";";

/// Special tokens in id order. `pad`, `bos` and `eos` therefore sit at 0, 1, 2,
/// matching the model presets.
pub const SPECIALS: [&str; 11] = [
    PAD, BOS, EOS, UNK, USER, SYSTEM, SEP, "<dst>", "<act>", "<intent>", "<domain>",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = String;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '-'
}

/// Lowercases and splits on whitespace; every other non-word character
/// (anything but alphanumerics, `_` and `-`) becomes its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars().flat_map(char::to_lowercase) {
        if is_word_char(c) {
            cur.push(c);
            continue;
        }
        if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
        if !c.is_whitespace() {
            out.push(c.to_string());
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl Vocab {
    /// Specials followed by `words` in sorted order.
    pub fn build<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let specials: BTreeSet<&str> = SPECIALS.iter().copied().collect();
        let rest: BTreeSet<String> = words
            .into_iter()
            .flat_map(|w| split_words(w.as_ref()))
            .filter(|w| !specials.contains(w.as_str()))
            .collect();
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(rest).collect();
        Self::from_tokens(tokens).expect("specials are unique")
    }

    /// Vocabulary covering every utterance, belief serialization and label of `corpus`.
    pub fn from_corpus(corpus: &[Dialogue]) -> Self {
        let mut texts = Vec::new();
        for d in corpus {
            for t in &d.turns {
                texts.push(t.text.clone());
                texts.push(serialize_belief(&t.belief()));
                for task in DialogueTask::CLASSIFICATION {
                    texts.push(task.target_text(t));
                }
            }
        }
        Self::build(texts)
    }

    /// Restores a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, String> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(format!("special token {s} must have id {i}"));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate token `{t}`"));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    fn special(&self, s: &str) -> usize {
        self.index[s]
    }

    pub fn pad_id(&self) -> usize {
        self.special(PAD)
    }
    pub fn bos_id(&self) -> usize {
        self.special(BOS)
    }
    pub fn eos_id(&self) -> usize {
        self.special(EOS)
    }
    pub fn unk_id(&self) -> usize {
        self.special(UNK)
    }
    pub fn task_tag_id(&self, task: DialogueTask) -> usize {
        self.special(task.tag_token())
    }
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<usize> {
    split_words(text)
        .iter()
        .map(|w| vocab.id(w).unwrap_or_else(|| vocab.unk_id()))
        .collect()
}

/// Joins tokens with single spaces. Ids outside the vocabulary render as `<unk>`.
pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&i| vocab.token(i).unwrap_or(UNK))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::build(["book a taxi . to the museum"])
    }

    #[test]
    fn specials_come_first_and_once() {
        let v = Vocab::build(["; <user> hello"]);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
        assert_eq!(v.tokens().iter().filter(|t| t.as_str() == ";").count(), 1);
        assert_eq!((v.pad_id(), v.bos_id(), v.eos_id()), (0, 1, 2));
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        assert!(tokenize("", &v).is_empty());
        let ids = tokenize("Book a taxi.", &v);
        let expect: Vec<usize> = ["book", "a", "taxi", "."].iter().map(|w| v.id(w).unwrap()).collect();
        assert_eq!(ids, expect);
        assert_eq!(tokenize("zebra", &v), vec![v.unk_id()]);
        assert_eq!(detokenize(&tokenize("Book  a TAXI to the museum.", &v), &v), "book a taxi to the museum .");
    }

    #[test]
    fn labels_stay_whole_tokens() {
        assert_eq!(split_words("Hotel_Inform_area ; Taxi-Request"), ["hotel_inform_area", ";", "taxi-request"]);
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let v = vocab();
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocab = serde_json::from_str(&json).unwrap();
        assert_eq!(back.id("taxi"), v.id("taxi"));
        assert!(serde_json::from_str::<Vocab>(r#"["a","b"]"#).is_err());
    }
}
