use super::{tokenize, DataError, Dialogue, Speaker, Vocab};

/// Positions in `dialogue.turns` of its user turns.
pub fn user_turn_indices(dialogue: &Dialogue) -> Vec<usize> {
    dialogue
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.speaker == Speaker::User)
        .map(|(i, _)| i)
        .collect()
}

/// Context `[bos, U_0, S_0, …, U_t, eos]` for the `t`-th user turn, each
/// utterance prefixed by its speaker tag.
///
/// When the sequence exceeds `max_seq_len`, whole leading utterances are
/// dropped, oldest first. If the final user utterance alone is still too long,
/// its earliest tokens are cut.
pub fn build_context(dialogue: &Dialogue, t: usize, vocab: &Vocab, max_seq_len: usize) -> Result<Vec<usize>, DataError> {
    if max_seq_len < 3 {
        return Err(DataError::SeqLenTooSmall(max_seq_len));
    }
    let users = user_turn_indices(dialogue);
    let &end = users.get(t).ok_or(DataError::TurnOutOfRange {
        index: t,
        available: users.len(),
    })?;
    let mut utterances: Vec<Vec<usize>> = dialogue.turns[..=end]
        .iter()
        .map(|turn| {
            let mut u = vec![vocab.id(turn.speaker.tag()).expect("speaker tags are specials")];
            u.extend(tokenize(&turn.text, vocab));
            u
        })
        .collect();
    let budget = max_seq_len - 2;
    let mut total: usize = utterances.iter().map(Vec::len).sum();
    let mut first = 0;
    while total > budget && first + 1 < utterances.len() {
        total -= utterances[first].len();
        first += 1;
    }
    let last = utterances.last_mut().expect("at least one utterance");
    if last.len() > budget {
        let cut = last.len() - budget;
        last.drain(1..1 + cut);
    }
    let mut ids = Vec::with_capacity(total.min(budget) + 2);
    ids.push(vocab.bos_id());
    for u in &utterances[first..] {
        ids.extend_from_slice(u);
    }
    ids.push(vocab.eos_id());
    Ok(ids)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Turn;

    fn user(text: &str) -> Turn {
        Turn {
            speaker: Speaker::User,
            text: text.into(),
            belief_state: vec![],
            acts: vec![],
            intents: vec![],
            domains: vec![],
        }
    }

    fn fixture() -> (Dialogue, Vocab) {
        let d = Dialogue {
            dialogue_id: "d".into(),
            turns: vec![
                user("a b c d"),
                Turn::system("e f"),
                user("g h"),
                Turn::system("i"),
            ],
        };
        let v = Vocab::build(["a b c d e f g h i"]);
        (d, v)
    }

    fn ids(v: &Vocab, toks: &[&str]) -> Vec<usize> {
        toks.iter().map(|t| v.id(t).unwrap()).collect()
    }

    #[test]
    fn first_turn() {
        let (d, v) = fixture();
        let c = build_context(&d, 0, &v, 100).unwrap();
        assert_eq!(c, ids(&v, &["<bos>", "<user>", "a", "b", "c", "d", "<eos>"]));
    }

    #[test]
    fn second_turn_includes_history_in_order() {
        let (d, v) = fixture();
        let c = build_context(&d, 1, &v, 100).unwrap();
        let expect = ids(
            &v,
            &["<bos>", "<user>", "a", "b", "c", "d", "<system>", "e", "f", "<user>", "g", "h", "<eos>"],
        );
        assert_eq!(c, expect);
    }

    #[test]
    fn overlong_history_drops_whole_leading_utterances() {
        let (d, v) = fixture();
        // Full context is 13 tokens; 10 forces U_0 (5 tokens) out but keeps S_0.
        let c = build_context(&d, 1, &v, 10).unwrap();
        assert_eq!(c, ids(&v, &["<bos>", "<system>", "e", "f", "<user>", "g", "h", "<eos>"]));
        // 7 drops S_0 as well.
        let c = build_context(&d, 1, &v, 7).unwrap();
        assert_eq!(c, ids(&v, &["<bos>", "<user>", "g", "h", "<eos>"]));
        // 4 cuts inside the final utterance, keeping its most recent tokens.
        let c = build_context(&d, 1, &v, 4).unwrap();
        assert_eq!(c, ids(&v, &["<bos>", "<user>", "h", "<eos>"]));
    }

    #[test]
    fn errors() {
        let (d, v) = fixture();
        assert!(matches!(
            build_context(&d, 2, &v, 100),
            Err(DataError::TurnOutOfRange { index: 2, available: 2 })
        ));
        assert!(matches!(build_context(&d, 0, &v, 2), Err(DataError::SeqLenTooSmall(2))));
    }

    #[test]
    fn length_bound_holds_for_every_budget() {
        let (d, v) = fixture();
        for max in 3..20 {
            for t in 0..2 {
                assert!(build_context(&d, t, &v, max).unwrap().len() <= max);
            }
        }
    }
}
