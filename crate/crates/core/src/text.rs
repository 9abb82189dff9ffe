//! Tokenizer, vocabulary, and context-input serialization.
//!
//! A context input is laid out as
//! `[CLS] history state [SEP] current-turn [SEP]`, where the state region is
//! `[SLOT_SEP] slot-tokens [VAL_SEP] value-tokens` for each active slot in
//! lexicographic order.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::{Dialogue, Turn};
use crate::error::{DstError, Result};
use crate::ontology::{DialogueState, Ontology, NONE_VALUE};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const SLOT_SEP: &str = "[SLOT_SEP]";
pub const VAL_SEP: &str = "[VAL_SEP]";
pub const SPECIAL_TOKENS: [&str; 6] = [PAD, UNK, CLS, SEP, SLOT_SEP, VAL_SEP];

/// Lowercases, splits on whitespace, and emits each ASCII punctuation
/// character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(DstError::parse("vocabulary", format!("token `{t}` listed twice")));
            }
        }
        for s in SPECIAL_TOKENS {
            if !index.contains_key(s) {
                return Err(DstError::parse("vocabulary", format!("missing special {s}")));
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

    pub fn id(&self, token: &str) -> usize {
        self.index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.index[UNK])
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(UNK)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn to_json_string(&self) -> String {
        let map: BTreeMap<&str, usize> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        serde_json::to_string_pretty(&map).expect("vocab serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let map: BTreeMap<String, usize> =
            serde_json::from_str(text).map_err(|e| DstError::parse("vocabulary JSON", e))?;
        let mut tokens = vec![None; map.len()];
        for (t, i) in map {
            match tokens.get_mut(i) {
                Some(slot @ None) => *slot = Some(t),
                _ => return Err(DstError::parse("vocabulary JSON", format!("bad id {i}"))),
            }
        }
        Self::from_tokens(tokens.into_iter().map(|t| t.expect("dense ids")).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        Self::from_json_str(&text)
    }

    /// SHA-256 of the serialized mapping, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_json_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Specials first, then every corpus/ontology token by descending frequency,
/// ties broken lexicographically.
pub fn build_vocab(corpus: &[Dialogue], ontology: &Ontology) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut add = |text: &str| {
        for t in tokenize(text) {
            *counts.entry(t).or_default() += 1;
        }
    };
    for d in corpus {
        for t in &d.turns {
            add(&t.system_utterance);
            add(&t.user_utterance);
        }
    }
    for (j, slot) in ontology.slots().iter().enumerate() {
        add(slot);
        for v in ontology.values(j) {
            add(v);
        }
    }
    for s in SPECIAL_TOKENS {
        counts.remove(s);
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Vocabulary::from_tokens(tokens).expect("specials are unique")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContextInput {
    pub token_ids: Vec<usize>,
    pub history: Range<usize>,
    pub state: Range<usize>,
    pub current: Range<usize>,
    /// Token span of each active slot's serialized value.
    pub value_spans: BTreeMap<String, Range<usize>>,
    /// Number of oldest history turns dropped to fit `max_len`.
    pub dropped_turns: usize,
}

impl ContextInput {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

fn turn_ids(turn: &Turn, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids = vocab.encode(&turn.system_utterance);
    ids.extend(vocab.encode(&turn.user_utterance));
    ids
}

/// Serializes the previous state; returns ids and per-slot value spans
/// relative to the start of the region.
fn state_ids(
    state: &DialogueState,
    vocab: &Vocabulary,
) -> (Vec<usize>, BTreeMap<String, Range<usize>>) {
    let mut ids = Vec::new();
    let mut spans = BTreeMap::new();
    for (slot, value) in state.iter() {
        if value == NONE_VALUE {
            continue;
        }
        ids.push(vocab.id(SLOT_SEP));
        ids.extend(vocab.encode(slot));
        ids.push(vocab.id(VAL_SEP));
        let start = ids.len();
        ids.extend(vocab.encode(value));
        spans.insert(slot.to_string(), start..ids.len());
    }
    (ids, spans)
}

/// Builds the model input for one turn. History turns are dropped oldest
/// first until the sequence fits; the state and current turn are never cut.
pub fn build_context_input(
    history: &[Turn],
    prev_state: &DialogueState,
    current: &Turn,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<ContextInput> {
    let (b_ids, rel_spans) = state_ids(prev_state, vocab);
    let d_ids = turn_ids(current, vocab);
    let fixed = 3 + b_ids.len() + d_ids.len();
    if fixed > max_len {
        return Err(DstError::ContextTooLong {
            needed: fixed,
            max_len,
        });
    }
    let hist: Vec<Vec<usize>> = history.iter().map(|t| turn_ids(t, vocab)).collect();
    let mut budget = max_len - fixed;
    let mut keep_from = hist.len();
    while keep_from > 0 && hist[keep_from - 1].len() <= budget {
        budget -= hist[keep_from - 1].len();
        keep_from -= 1;
    }

    let mut ids = Vec::with_capacity(max_len);
    ids.push(vocab.id(CLS));
    let h_start = ids.len();
    for h in &hist[keep_from..] {
        ids.extend_from_slice(h);
    }
    let history_range = h_start..ids.len();
    let b_start = ids.len();
    ids.extend_from_slice(&b_ids);
    let state_range = b_start..ids.len();
    ids.push(vocab.id(SEP));
    let d_start = ids.len();
    ids.extend_from_slice(&d_ids);
    let current_range = d_start..ids.len();
    ids.push(vocab.id(SEP));

    let value_spans = rel_spans
        .into_iter()
        .map(|(s, r)| (s, r.start + b_start..r.end + b_start))
        .collect();
    Ok(ContextInput {
        token_ids: ids,
        history: history_range,
        state: state_range,
        current: current_range,
        value_spans,
        dropped_turns: keep_from,
    })
}

/// `[CLS] text [SEP]` ids for slot and value labels.
pub fn label_ids(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids = vec![vocab.id(CLS)];
    ids.extend(vocab.encode(text));
    ids.push(vocab.id(SEP));
    ids
}
