//! Noised previous-state construction.
//!
//! Each active slot of the previous state is independently replaced, with
//! probability `p`, by a different candidate value drawn uniformly from the
//! ontology. The noised state then feeds the same context builder as the
//! original, so the pair differs only inside the state region.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Turn;
use crate::error::{DstError, Result};
use crate::ontology::{DialogueState, Ontology, NONE_VALUE};
use crate::text::{build_context_input, ContextInput, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Noise threshold: per-active-slot replacement probability.
    pub p: f64,
    /// Admit "none" as a replacement, which can deactivate a slot.
    #[serde(default)]
    pub allow_none: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            p: 0.3,
            allow_none: false,
        }
    }
}

impl NoiseConfig {
    pub fn new(p: f64) -> Result<Self> {
        let c = Self {
            p,
            allow_none: false,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(DstError::Config(format!(
                "noise threshold {} outside [0, 1]",
                self.p
            )));
        }
        Ok(())
    }
}

/// Returns the noised state and the set of slots whose value was replaced.
///
/// Two uniform draws are consumed per noisable slot regardless of the
/// outcome, so runs with different `p` but the same stream noise nested
/// slot sets.
pub fn noise_state<R: Rng>(
    state: &DialogueState,
    ontology: &Ontology,
    config: &NoiseConfig,
    rng: &mut R,
) -> (DialogueState, BTreeSet<String>) {
    let mut out = state.clone();
    let mut replaced = BTreeSet::new();
    for slot in state.active_slots() {
        let Some(j) = ontology.slot_index(&slot) else {
            continue;
        };
        let current = state.get(&slot).expect("active slot present");
        let candidates: Vec<&String> = ontology
            .values(j)
            .iter()
            .filter(|v| v.as_str() != current && (config.allow_none || v.as_str() != NONE_VALUE))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let a: f64 = rng.gen();
        let pick = rng.gen_range(0..candidates.len());
        if a < config.p {
            out.set(slot.clone(), candidates[pick].clone());
            replaced.insert(slot);
        }
    }
    (out, replaced)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedPair {
    pub original: ContextInput,
    pub noised: ContextInput,
    pub noised_state: DialogueState,
    pub replaced: BTreeSet<String>,
}

/// Builds `(X_t, X_t⁺)` from one turn: same history and current turn, the
/// second with a noised previous state.
#[allow(clippy::too_many_arguments)]
pub fn make_noised_pair<R: Rng>(
    history: &[Turn],
    prev_state: &DialogueState,
    current: &Turn,
    vocab: &Vocabulary,
    max_len: usize,
    ontology: &Ontology,
    config: &NoiseConfig,
    rng: &mut R,
) -> Result<NoisedPair> {
    let original = build_context_input(history, prev_state, current, vocab, max_len)?;
    let (noised_state, replaced) = noise_state(prev_state, ontology, config, rng);
    let noised = if replaced.is_empty() {
        original.clone()
    } else {
        build_context_input(history, &noised_state, current, vocab, max_len)?
    };
    Ok(NoisedPair {
        original,
        noised,
        noised_state,
        replaced,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::validate_state;
    use crate::text::build_vocab;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ont() -> Ontology {
        Ontology::new(vec![
            ("train-day", vec!["monday", "sunday", "friday"]),
            ("hotel-area", vec!["a", "b"]),
            ("taxi-leave", vec!["only"]),
        ])
        .unwrap()
    }

    #[test]
    fn zero_threshold_is_identity() {
        let o = ont();
        let mut s = DialogueState::empty(&o);
        s.set("train-day", "sunday");
        s.set("hotel-area", "a");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (n, r) = noise_state(&s, &o, &NoiseConfig::new(0.0).unwrap(), &mut rng);
        assert_eq!(n, s);
        assert!(r.is_empty());
    }

    #[test]
    fn full_threshold_single_candidate() {
        let o = ont();
        let mut s = DialogueState::empty(&o);
        s.set("hotel-area", "a");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (n, r) = noise_state(&s, &o, &NoiseConfig::new(1.0).unwrap(), &mut rng);
        assert_eq!(n.get("hotel-area"), Some("b"));
        assert_eq!(r.into_iter().collect::<Vec<_>>(), ["hotel-area"]);
    }

    #[test]
    fn unnoisable_slot_skipped() {
        let o = ont();
        let mut s = DialogueState::empty(&o);
        s.set("taxi-leave", "only");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (n, r) = noise_state(&s, &o, &NoiseConfig::new(1.0).unwrap(), &mut rng);
        assert_eq!(n, s);
        assert!(r.is_empty());
        let cfg = NoiseConfig {
            p: 1.0,
            allow_none: true,
        };
        let (n, _) = noise_state(&s, &o, &cfg, &mut rng);
        assert_eq!(n.get("taxi-leave"), Some(NONE_VALUE));
    }

    #[test]
    fn replacement_rate_matches_threshold() {
        let o = ont();
        let mut s = DialogueState::empty(&o);
        s.set("train-day", "sunday");
        s.set("hotel-area", "b");
        let cfg = NoiseConfig::new(0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (mut draws, mut hits) = (0, 0);
        while draws < 10_000 {
            let (_, r) = noise_state(&s, &o, &cfg, &mut rng);
            draws += 2;
            hits += r.len();
        }
        let frac = hits as f64 / draws as f64;
        assert!((frac - 0.3).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn invalid_threshold() {
        assert!(NoiseConfig::new(1.2).is_err());
        assert!(NoiseConfig::new(-0.1).is_err());
    }

    fn turn(o: &Ontology, u: &str) -> Turn {
        Turn {
            system_utterance: "ok".into(),
            user_utterance: u.into(),
            gold_state: DialogueState::empty(o),
        }
    }

    #[test]
    fn pair_examples() {
        let o = ont();
        let vocab = build_vocab(&[], &o);
        let hist = vec![turn(&o, "sunday please")];
        let cur = turn(&o, "thanks");
        let empty = DialogueState::empty(&o);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = NoiseConfig::new(1.0).unwrap();
        let pair = make_noised_pair(&hist, &empty, &cur, &vocab, 64, &o, &cfg, &mut rng).unwrap();
        assert_eq!(pair.original, pair.noised);

        let mut prev = DialogueState::empty(&o);
        prev.set("hotel-area", "a");
        prev.set("train-day", "sunday");
        let cfg = NoiseConfig::new(0.5).unwrap();
        for seed in 0..20 {
            let mut r1 = ChaCha8Rng::seed_from_u64(seed);
            let mut r2 = ChaCha8Rng::seed_from_u64(seed);
            let p1 = make_noised_pair(&hist, &prev, &cur, &vocab, 64, &o, &cfg, &mut r1).unwrap();
            let p2 = make_noised_pair(&hist, &prev, &cur, &vocab, 64, &o, &cfg, &mut r2).unwrap();
            assert_eq!(p1, p2);
            // single-token values: equal lengths, differences only in spans
            assert_eq!(p1.original.len(), p1.noised.len());
            let spans: Vec<usize> = p1
                .replaced
                .iter()
                .flat_map(|s| p1.original.value_spans[s].clone())
                .collect();
            for i in 0..p1.original.len() {
                let same = p1.original.token_ids[i] == p1.noised.token_ids[i];
                assert_eq!(same, !spans.contains(&i), "seed {seed} pos {i}");
            }
        }
    }

    fn arb_state() -> impl Strategy<Value = (DialogueState, u64, f64)> {
        (0usize..4, 0usize..3, any::<u64>(), 0.0f64..=1.0).prop_map(|(d, a, seed, p)| {
            let o = ont();
            let mut s = DialogueState::empty(&o);
            s.set("train-day", ["monday", "sunday", "friday", "none"][d]);
            s.set("hotel-area", ["a", "b", "none"][a]);
            (s, seed, p)
        })
    }

    proptest! {
        #[test]
        fn noise_invariants((s, seed, p) in arb_state()) {
            let o = ont();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, replaced) = noise_state(&s, &o, &NoiseConfig::new(p).unwrap(), &mut rng);
            prop_assert!(validate_state(&n, &o).is_empty());
            prop_assert_eq!(n.active_slots(), s.active_slots());
            let differing: BTreeSet<String> = s
                .iter()
                .filter(|(k, v)| n.get(k) != Some(*v))
                .map(|(k, _)| k.to_string())
                .collect();
            prop_assert_eq!(&differing, &replaced);
            for slot in &replaced {
                prop_assert_ne!(n.get(slot), s.get(slot));
            }
        }
    }
}
