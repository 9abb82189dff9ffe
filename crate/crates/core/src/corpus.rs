//! Dialogue data model, corpus ingestion, splitting, and the synthetic
//! corpus generator.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DstError, Result};
use crate::ontology::{validate_state, DialogueState, Ontology, NONE_VALUE};
use crate::rng::{stream_rng, Stream};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub system_utterance: String,
    pub user_utterance: String,
    /// Cumulative state up to and including this turn.
    pub gold_state: DialogueState,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    dialogues: Vec<DialogueRecord>,
}

#[derive(Serialize, Deserialize)]
struct DialogueRecord {
    id: String,
    turns: Vec<TurnRecord>,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    system: String,
    user: String,
    #[serde(default)]
    state: BTreeMap<String, String>,
}

pub fn corpus_from_json_str(text: &str, ontology: &Ontology) -> Result<Vec<Dialogue>> {
    let file: CorpusFile =
        serde_json::from_str(text).map_err(|e| DstError::parse("corpus JSON", e))?;
    file.dialogues
        .into_iter()
        .map(|d| {
            if d.turns.is_empty() {
                return Err(DstError::Corpus {
                    dialogue: d.id,
                    turn: 0,
                    message: "dialogue has no turns".into(),
                });
            }
            let turns = d
                .turns
                .into_iter()
                .enumerate()
                .map(|(i, t)| {
                    let gold_state = DialogueState::from_sparse(&t.state, ontology);
                    let report = validate_state(&gold_state, ontology);
                    if let Some(v) = report.first() {
                        return Err(DstError::Corpus {
                            dialogue: d.id.clone(),
                            turn: i + 1,
                            message: v.to_string(),
                        });
                    }
                    Ok(Turn {
                        system_utterance: t.system,
                        user_utterance: t.user,
                        gold_state,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Dialogue { id: d.id, turns })
        })
        .collect()
}

/// Loads a corpus file, validating every gold state against `ontology`.
pub fn load_corpus(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
    corpus_from_json_str(&text, ontology)
}

pub fn corpus_to_json_string(dialogues: &[Dialogue]) -> String {
    let file = CorpusFile {
        dialogues: dialogues
            .iter()
            .map(|d| DialogueRecord {
                id: d.id.clone(),
                turns: d
                    .turns
                    .iter()
                    .map(|t| TurnRecord {
                        system: t.system_utterance.clone(),
                        user: t.user_utterance.clone(),
                        state: t.gold_state.to_sparse(),
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("corpus serializes")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_dialogues: usize,
    pub n_slots: usize,
    pub values_per_slot: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub p_new_slot: f64,
    pub p_change: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    /// The desk-scale corpus: 400 dialogues split 300/50/50, five slots with
    /// six values each, 3-6 turns.
    fn default() -> Self {
        Self {
            n_dialogues: 400,
            n_slots: 5,
            values_per_slot: 6,
            min_turns: 3,
            max_turns: 6,
            p_new_slot: 0.6,
            p_change: 0.4,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !prob_ok(self.p_new_slot) || !prob_ok(self.p_change) {
            return Err(DstError::Config("probabilities must lie in [0, 1]".into()));
        }
        if self.min_turns < 1 || self.max_turns < self.min_turns {
            return Err(DstError::Config("need max_turns >= min_turns >= 1".into()));
        }
        if self.n_slots == 0 || self.values_per_slot == 0 {
            return Err(DstError::Config("need at least one slot and one value".into()));
        }
        if self.values_per_slot > VALUE_WORDS.len() {
            return Err(DstError::Config(format!(
                "at most {} values per slot supported",
                VALUE_WORDS.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TurnEvent {
    Introduced { slot: String, value: String },
    Changed { slot: String, from: String, to: String },
}

impl TurnEvent {
    pub fn slot(&self) -> &str {
        match self {
            TurnEvent::Introduced { slot, .. } | TurnEvent::Changed { slot, .. } => slot,
        }
    }

    pub fn is_change(&self) -> bool {
        matches!(self, TurnEvent::Changed { .. })
    }
}

/// Dialogue id -> per-turn event lists (index 0 is turn 1).
pub type EventLog = BTreeMap<String, Vec<Vec<TurnEvent>>>;

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub ontology: Ontology,
    pub dialogues: Vec<Dialogue>,
    pub events: EventLog,
}

const SLOT_NAMES: [&str; 12] = [
    "train-day",
    "hotel-area",
    "restaurant-food",
    "taxi-destination",
    "attraction-type",
    "hotel-stars",
    "restaurant-area",
    "train-destination",
    "taxi-departure",
    "attraction-area",
    "hotel-parking",
    "train-departure",
];

// Each slot draws from its own slice of this list; slot j with k values
// uses words[(j*k) % len ..] cyclically.
const VALUE_WORDS: [&str; 36] = [
    "monday", "tuesday", "friday", "sunday", "north", "south", "east", "west", "centre",
    "chinese", "italian", "indian", "thai", "french", "museum", "park", "theatre", "college",
    "cinema", "church", "cheap", "moderate", "expensive", "cambridge", "ely", "london", "leicester",
    "norwich", "stansted", "kings", "peterborough", "broxbourne", "yes", "free", "two", "four",
];

const SYSTEM_PROMPTS: [&str; 6] = [
    "how can i help you ?",
    "anything else ?",
    "what else do you need ?",
    "noted , is there anything more ?",
    "sure , let me check that .",
    "okay , what would you like ?",
];

const FILLERS: [&str; 3] = ["that sounds good .", "thanks , keep going .", "let me think ."];

fn slot_name(j: usize) -> String {
    if j < SLOT_NAMES.len() {
        SLOT_NAMES[j].to_string()
    } else {
        format!("domain{j}-slot{j}")
    }
}

fn introduce_text(slot: &str, value: &str, variant: usize) -> String {
    match variant % 3 {
        0 => format!("i want {slot} to be {value}"),
        1 => format!("please set {slot} to {value}"),
        _ => format!("i need {slot} {value}"),
    }
}

fn change_text(slot: &str, value: &str, variant: usize) -> String {
    match variant % 2 {
        0 => format!("actually change {slot} to {value}"),
        _ => format!("no , make {slot} {value} instead"),
    }
}

/// Builds a templated corpus where turns introduce slots and, with
/// probability `p_change`, rewrite an already-set slot.
pub fn generate_synthetic_corpus(config: &SyntheticConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let k = config.values_per_slot;
    let slots: Vec<(String, Vec<String>)> = (0..config.n_slots)
        .map(|j| {
            let start = (j * k) % VALUE_WORDS.len();
            let vals = (0..k)
                .map(|i| VALUE_WORDS[(start + i) % VALUE_WORDS.len()].to_string())
                .collect();
            (slot_name(j), vals)
        })
        .collect();
    let ontology = Ontology::new(slots)?;

    let mut dialogues = Vec::with_capacity(config.n_dialogues);
    let mut events = EventLog::new();
    for d in 0..config.n_dialogues {
        let mut rng = stream_rng(config.seed, Stream::Corpus, &[d as u64]);
        let id = format!("syn-{d:05}");
        let n_turns = rng.gen_range(config.min_turns..=config.max_turns);
        let mut state = DialogueState::empty(&ontology);
        let mut turns = Vec::with_capacity(n_turns);
        let mut log = Vec::with_capacity(n_turns);
        for _ in 0..n_turns {
            let set: Vec<usize> = (0..ontology.num_slots())
                .filter(|&j| state.get(&ontology.slots()[j]) != Some(NONE_VALUE))
                .collect();
            let unset: Vec<usize> = (0..ontology.num_slots())
                .filter(|j| !set.contains(j))
                .collect();
            let mut clauses = Vec::new();
            let mut turn_events = Vec::new();

            // Draws happen unconditionally so the stream layout does not
            // depend on state.
            let change_draw: f64 = rng.gen();
            let new_draw: f64 = rng.gen();
            let variant: usize = rng.gen_range(0..6);

            if !set.is_empty() && change_draw < config.p_change {
                let j = *set.choose(&mut rng).expect("non-empty");
                let slot = &ontology.slots()[j];
                let from = state.get(slot).expect("total").to_string();
                let options: Vec<&String> = ontology
                    .values(j)
                    .iter()
                    .filter(|v| v.as_str() != NONE_VALUE && **v != from)
                    .collect();
                if let Some(to) = options.choose(&mut rng) {
                    clauses.push(change_text(slot, to, variant));
                    state.set(slot.clone(), (*to).clone());
                    turn_events.push(TurnEvent::Changed {
                        slot: slot.clone(),
                        from,
                        to: (*to).clone(),
                    });
                }
            }
            if !unset.is_empty() && new_draw < config.p_new_slot {
                let j = *unset.choose(&mut rng).expect("non-empty");
                let slot = &ontology.slots()[j];
                let options: Vec<&String> = ontology
                    .values(j)
                    .iter()
                    .filter(|v| v.as_str() != NONE_VALUE)
                    .collect();
                let value = (*options.choose(&mut rng).expect("non-empty values")).clone();
                clauses.push(introduce_text(slot, &value, variant));
                state.set(slot.clone(), value.clone());
                turn_events.push(TurnEvent::Introduced {
                    slot: slot.clone(),
                    value,
                });
            }
            let user = if clauses.is_empty() {
                FILLERS[variant % FILLERS.len()].to_string()
            } else {
                clauses.join(" and ") + " ."
            };
            let system = SYSTEM_PROMPTS[rng.gen_range(0..SYSTEM_PROMPTS.len())].to_string();
            turns.push(Turn {
                system_utterance: system,
                user_utterance: user,
                gold_state: state.clone(),
            });
            log.push(turn_events);
        }
        events.insert(id.clone(), log);
        dialogues.push(Dialogue { id, turns });
    }
    Ok(SyntheticCorpus {
        ontology,
        dialogues,
        events,
    })
}

/// Shuffles with `seed`, then cuts into three parts. Sizes are
/// `floor(f * n)` with the leftover handed out by largest remainder.
pub fn split_corpus<T: Clone>(
    corpus: &[T],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    let fr = [fractions.0, fractions.1, fractions.2];
    if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(DstError::Config(format!(
            "split fractions {fractions:?} must be in [0,1] and sum to 1"
        )));
    }
    let n = corpus.len();
    let raw: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = n - sizes.iter().sum::<usize>().min(n);
    let mut order: Vec<usize> = (0..3).collect();
    // Stable sort keeps earlier splits first on ties.
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).expect("finite")
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fr[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, Stream::Split, &[]));
    let take = |range: std::ops::Range<usize>| -> Vec<T> {
        idx[range].iter().map(|&i| corpus[i].clone()).collect()
    };
    let a = sizes[0];
    let b = a + sizes[1];
    Ok((take(0..a), take(a..b), take(b..n)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ont() -> Ontology {
        Ontology::new(vec![
            ("train-day", vec!["monday", "sunday"]),
            ("hotel-area", vec!["north", "south"]),
        ])
        .unwrap()
    }

    #[test]
    fn empty_corpus_loads() {
        let c = corpus_from_json_str(r#"{"dialogues":[]}"#, &ont()).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn two_by_three_fixture() {
        let text = r#"{"dialogues":[
          {"id":"d1","turns":[
            {"system":"hi","user":"i want train-day sunday","state":{"train-day":"sunday"}},
            {"system":"ok","user":"north please","state":{"train-day":"sunday","hotel-area":"north"}},
            {"system":"ok","user":"thanks","state":{"train-day":"sunday","hotel-area":"north"}}]},
          {"id":"d2","turns":[
            {"system":"hi","user":"x","state":{}},
            {"system":"hi","user":"y","state":{}},
            {"system":"hi","user":"z","state":{}}]}]}"#;
        let c = corpus_from_json_str(text, &ont()).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.iter().all(|d| d.turns.len() == 3));
        assert_eq!(c[0].id, "d1");
        assert_eq!(c[1].turns[0].gold_state.get("hotel-area"), Some("none"));
        let again = corpus_from_json_str(&corpus_to_json_string(&c), &ont()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn bad_value_names_dialogue_and_turn() {
        let text = r#"{"dialogues":[{"id":"d1","turns":[
            {"system":"a","user":"b","state":{"train-day":"sunday"}},
            {"system":"a","user":"b","state":{"train-day":"tuesday"}}]}]}"#;
        let err = corpus_from_json_str(text, &ont()).unwrap_err().to_string();
        assert!(err.contains("dialogue d1 turn 2"), "{err}");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SyntheticConfig {
            seed: 7,
            n_dialogues: 20,
            ..Default::default()
        };
        let a = generate_synthetic_corpus(&cfg).unwrap();
        let b = generate_synthetic_corpus(&cfg).unwrap();
        assert_eq!(
            corpus_to_json_string(&a.dialogues),
            corpus_to_json_string(&b.dialogues)
        );
        assert_eq!(a.events, b.events);
    }

    #[test]
    fn no_change_means_monotone_states() {
        let cfg = SyntheticConfig {
            p_change: 0.0,
            n_dialogues: 50,
            ..Default::default()
        };
        let c = generate_synthetic_corpus(&cfg).unwrap();
        for d in &c.dialogues {
            for w in d.turns.windows(2) {
                for (slot, v) in w[0].gold_state.iter() {
                    if v != NONE_VALUE {
                        assert_eq!(w[1].gold_state.get(slot), Some(v));
                    }
                }
            }
        }
        assert!(c.events.values().flatten().flatten().all(|e| !e.is_change()));
    }

    #[test]
    fn change_rate_tracks_p_change() {
        let cfg = SyntheticConfig {
            p_change: 0.5,
            n_dialogues: 400,
            seed: 11,
            ..Default::default()
        };
        let c = generate_synthetic_corpus(&cfg).unwrap();
        let (mut eligible, mut changes) = (0usize, 0usize);
        for d in &c.dialogues {
            let log = &c.events[&d.id];
            for (t, ev) in log.iter().enumerate() {
                let prev_active = if t == 0 {
                    0
                } else {
                    d.turns[t - 1].gold_state.active_slots().len()
                };
                if prev_active > 0 {
                    eligible += 1;
                    changes += ev.iter().filter(|e| e.is_change()).count();
                }
            }
        }
        assert!(eligible >= 1000, "only {eligible} eligible turns");
        let frac = changes as f64 / eligible as f64;
        assert!((frac - 0.5).abs() <= 0.05, "change fraction {frac}");
    }

    #[test]
    fn synthetic_states_follow_event_log() {
        let c = generate_synthetic_corpus(&SyntheticConfig {
            n_dialogues: 60,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        for d in &c.dialogues {
            let mut prev = DialogueState::empty(&c.ontology);
            for (t, turn) in d.turns.iter().enumerate() {
                assert!(validate_state(&turn.gold_state, &c.ontology).is_empty());
                let touched: Vec<&str> = c.events[&d.id][t].iter().map(|e| e.slot()).collect();
                for (slot, v) in turn.gold_state.iter() {
                    if prev.get(slot) != Some(v) {
                        assert!(touched.contains(&slot), "{} turn {} slot {slot}", d.id, t + 1);
                    }
                }
                for e in &c.events[&d.id][t] {
                    assert!(turn.user_utterance.contains(e.slot()));
                }
                prev = turn.gold_state.clone();
            }
        }
    }

    #[test]
    fn invalid_synthetic_config() {
        let bad = SyntheticConfig {
            p_change: 1.5,
            ..Default::default()
        };
        assert!(generate_synthetic_corpus(&bad).is_err());
        let bad = SyntheticConfig {
            min_turns: 4,
            max_turns: 3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_examples() {
        let items: Vec<u32> = (0..10).collect();
        let (a, b, c) = split_corpus(&items, (1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (10, 0, 0));
        let (a, b, c) = split_corpus(&items, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let again = split_corpus(&items, (0.8, 0.1, 0.1), 1).unwrap();
        assert_eq!((a.clone(), b.clone(), c.clone()), again);
        let mut all: Vec<u32> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, items);
        assert!(split_corpus(&items, (0.5, 0.1, 0.1), 1).is_err());
    }

    #[test]
    fn split_largest_remainder() {
        let items: Vec<u32> = (0..400).collect();
        let (a, b, c) = split_corpus(&items, (0.75, 0.125, 0.125), 0).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (300, 50, 50));
        let items: Vec<u32> = (0..7).collect();
        let (a, b, c) = split_corpus(&items, (0.5, 0.25, 0.25), 0).unwrap();
        // 3.5 / 1.75 / 1.75 -> floors 3/1/1, remainders .5 .75 .75
        assert_eq!((a.len(), b.len(), c.len()), (3, 2, 2));
    }

    proptest::proptest! {
        #[test]
        fn split_is_partition(n in 0usize..60, f0 in 0.0f64..1.0, f1s in 0.0f64..1.0, seed in 0u64..100) {
            let f1 = (1.0 - f0) * f1s;
            let f2 = (1.0 - f0 - f1).max(0.0);
            let items: Vec<usize> = (0..n).collect();
            let (a, b, c) = split_corpus(&items, (f0, f1, f2), seed).unwrap();
            let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
            all.sort();
            proptest::prop_assert_eq!(all, items);
        }
    }
}
