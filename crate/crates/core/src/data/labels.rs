use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::{DataError, Dialogue, DialogueTask};

/// Sorted, duplicate-free label universe of one classification task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSpace {
    labels: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LabelSpace {
    fn from(labels: Vec<String>) -> Self {
        Self::new(labels)
    }
}

impl From<LabelSpace> for Vec<String> {
    fn from(s: LabelSpace) -> Self {
        s.labels
    }
}

impl LabelSpace {
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let labels: Vec<String> = labels
            .into_iter()
            .map(Into::into)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let index = labels.iter().enumerate().map(|(i, l)| (l.clone(), i)).collect();
        Self { labels, index }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn label(&self, i: usize) -> Option<&str> {
        self.labels.get(i).map(String::as_str)
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    /// Case-insensitive lookup, used to map generated text back to labels.
    pub fn find_lowercase(&self, label: &str) -> Option<&str> {
        let l = label.trim().to_lowercase();
        self.labels.iter().find(|s| s.to_lowercase() == l).map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpaces {
    pub acts: LabelSpace,
    pub intents: LabelSpace,
    pub domains: LabelSpace,
}

impl LabelSpaces {
    pub fn get(&self, task: DialogueTask) -> Option<&LabelSpace> {
        match task {
            DialogueTask::Dst => None,
            DialogueTask::Act => Some(&self.acts),
            DialogueTask::Intent => Some(&self.intents),
            DialogueTask::Domain => Some(&self.domains),
        }
    }
}

/// Sorted union of the labels observed for each classification task.
pub fn build_label_spaces(corpus: &[Dialogue]) -> LabelSpaces {
    let collect = |task: DialogueTask| {
        LabelSpace::new(
            corpus
                .iter()
                .flat_map(|d| d.turns.iter())
                .flat_map(move |t| task.labels(t).iter().cloned()),
        )
    };
    LabelSpaces {
        acts: collect(DialogueTask::Act),
        intents: collect(DialogueTask::Intent),
        domains: collect(DialogueTask::Domain),
    }
}

/// Multi-hot vector of length `|space|` with 1 at each gold label.
pub fn encode_labels(labels: &[String], space: &LabelSpace) -> Result<Vec<f32>, DataError> {
    let mut out = vec![0.0; space.len()];
    let mut unknown = Vec::new();
    for l in labels {
        match space.index(l) {
            Some(i) => out[i] = 1.0,
            None => unknown.push(l.clone()),
        }
    }
    if unknown.is_empty() {
        Ok(out)
    } else {
        Err(DataError::UnknownLabels(unknown))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Speaker, Turn};
    use proptest::prelude::*;

    fn user(acts: &[&str]) -> Turn {
        Turn {
            speaker: Speaker::User,
            text: "x".into(),
            belief_state: vec![],
            acts: acts.iter().map(|s| s.to_string()).collect(),
            intents: vec![],
            domains: vec![],
        }
    }

    fn dialogue(id: &str, acts: &[&str]) -> Dialogue {
        Dialogue {
            dialogue_id: id.into(),
            turns: vec![user(acts), Turn::system("ok")],
        }
    }

    #[test]
    fn spaces_are_sorted_unions() {
        let s = build_label_spaces(&[dialogue("1", &["b", "a"])]);
        assert_eq!(s.acts.labels(), ["a", "b"]);
        let s = build_label_spaces(&[dialogue("1", &["c"]), dialogue("2", &["a"])]);
        assert_eq!(s.acts.labels(), ["a", "c"]);
        for i in 0..s.acts.len() {
            assert_eq!(s.acts.index(s.acts.label(i).unwrap()), Some(i));
        }
    }

    #[test]
    fn encode_examples() {
        let space = LabelSpace::new(["a", "b", "c"]);
        assert_eq!(encode_labels(&[], &space).unwrap(), vec![0., 0., 0.]);
        let all: Vec<String> = space.labels().to_vec();
        assert_eq!(encode_labels(&all, &space).unwrap(), vec![1., 1., 1.]);
        assert_eq!(encode_labels(&["a".into(), "c".into()], &space).unwrap(), vec![1., 0., 1.]);
        assert!(matches!(
            encode_labels(&["z".into()], &space),
            Err(DataError::UnknownLabels(u)) if u == ["z"]
        ));
    }

    proptest! {
        #[test]
        fn encoding_is_injective(a in proptest::collection::btree_set(0usize..6, 0..6),
                                 b in proptest::collection::btree_set(0usize..6, 0..6)) {
            let space = LabelSpace::new((0..6).map(|i| format!("l{i}")));
            let to_labels = |s: &std::collections::BTreeSet<usize>| s.iter().map(|i| format!("l{i}")).collect::<Vec<_>>();
            let (ea, eb) = (encode_labels(&to_labels(&a), &space).unwrap(), encode_labels(&to_labels(&b), &space).unwrap());
            prop_assert_eq!(a == b, ea == eb);
        }
    }
}
