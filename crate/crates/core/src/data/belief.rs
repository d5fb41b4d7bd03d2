use std::collections::BTreeMap;

/// Canonical belief state: at most one value per `(domain, slot)`, all
/// fields lowercased with whitespace collapsed, iterated in `(domain, slot)` order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct BeliefState {
    slots: BTreeMap<(String, String), String>,
}

fn normalize(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

impl BeliefState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_triplets<'a>(triplets: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>) -> Self {
        let mut b = Self::new();
        for (d, s, v) in triplets {
            b.insert(d, s, v);
        }
        b
    }

    /// Inserts or replaces the value of `(domain, slot)`. Empty fields are ignored.
    pub fn insert(&mut self, domain: &str, slot: &str, value: &str) -> bool {
        let (d, s, v) = (normalize(domain), normalize(slot), normalize(value));
        if d.is_empty() || s.is_empty() || v.is_empty() || d.contains(' ') || s.contains(' ') {
            return false;
        }
        self.slots.insert((d, s), v);
        true
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, domain: &str, slot: &str) -> Option<&str> {
        self.slots.get(&(domain.to_string(), slot.to_string())).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, &str)> {
        self.slots.iter().map(|((d, s), v)| (d.as_str(), s.as_str(), v.as_str()))
    }

    pub fn is_superset_of(&self, other: &BeliefState) -> bool {
        other.iter().all(|(d, s, v)| self.get(d, s) == Some(v))
    }

    pub fn to_triplets(&self) -> Vec<[String; 3]> {
        self.iter().map(|(d, s, v)| [d.into(), s.into(), v.into()]).collect()
    }
}

/// `"domain slot value ; domain slot value"` in canonical order; `""` when empty.
pub fn serialize_belief(b: &BeliefState) -> String {
    b.iter()
        .map(|(d, s, v)| format!("{d} {s} {v}"))
        .collect::<Vec<_>>()
        .join(" ; ")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedBelief {
    pub belief: BeliefState,
    /// Non-empty fragments with fewer than three fields.
    pub dropped: usize,
}

/// Total, lenient inverse of [`serialize_belief`].
///
/// Each `;`-separated fragment with at least three whitespace fields yields
/// `(first, second, rest joined by spaces)`; shorter fragments are dropped and
/// counted. A repeated `(domain, slot)` keeps the later value.
pub fn parse_belief(s: &str) -> ParsedBelief {
    let mut out = ParsedBelief::default();
    for fragment in s.split(';') {
        let fields: Vec<&str> = fragment.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 3 {
            out.dropped += 1;
            continue;
        }
        out.belief.insert(fields[0], fields[1], &fields[2..].join(" "));
    }
    out
}
