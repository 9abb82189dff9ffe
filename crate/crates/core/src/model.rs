//! Slot-value matching tracker: slot-context attention, distance-based value
//! distributions, state prediction, and the training losses.

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoder::{
    encode_label, encode_matrix, encode_sequence, multi_head_attention, AttentionParams,
    EncoderConfig, EncoderOutput, EncoderParams, LabelCache, weight_std,
};
use crate::error::{DstError, Result};
use crate::ontology::{DialogueState, Ontology};
use crate::params::{Mat, ParamGroup, ParamId, ParamStore};
use crate::text::{label_ids, ContextInput, Vocabulary};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Contrastive temperature τ.
    pub temperature: f64,
    /// Encode labels with the (trainable) context encoder instead of a
    /// frozen copy of its initial weights.
    #[serde(default)]
    pub share_label_encoder: bool,
    /// Include the previous state in the context input.
    #[serde(default = "yes")]
    pub use_previous_state: bool,
}

fn yes() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            temperature: DEFAULT_TEMPERATURE,
            share_label_encoder: false,
            use_previous_state: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DstError::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// All tracker parameters: context encoder, label encoder, and the
/// slot-context attention head with its layer norm.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub context: EncoderParams,
    pub label: EncoderParams,
    pub slot_attn: AttentionParams,
    pub slot_ln_gain: ParamId,
    pub slot_ln_bias: ParamId,
    label_cache: LabelCache,
}

/// Slot query and candidate-value representations, indexed like the ontology.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelTable {
    /// `1 × d` per slot.
    pub slots: Vec<Mat>,
    /// `|values| × d` per slot.
    pub values: Vec<Mat>,
}

/// Per-slot feature `r` from the slot-context attention, with the attention
/// weights of each head over the context tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotContextFeature {
    pub r: Vec<f64>,
    pub head_weights: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotDistribution {
    pub probs: Vec<f64>,
    pub distances: Vec<f64>,
}

impl SlotDistribution {
    /// Highest probability, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

impl ModelParams {
    pub fn init(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::rng::stream_rng(seed, crate::rng::Stream::Init, &[]);
        let mut store = ParamStore::new();
        let context = EncoderParams::init(
            &mut store,
            "context",
            ParamGroup::Encoder,
            &config.encoder,
            vocab_size,
            &mut rng,
        )?;
        let d = config.encoder.d_model;
        let slot_attn =
            AttentionParams::init(&mut store, "slot_attn", ParamGroup::Head, d, weight_std(d), &mut rng);
        let slot_ln_gain = store.add_const("slot_ln.gain", ParamGroup::Head, (1, d), 1.0);
        let slot_ln_bias = store.add_const("slot_ln.bias", ParamGroup::Head, (1, d), 0.0);
        let label = if config.share_label_encoder {
            context.clone()
        } else {
            context.duplicate(&mut store, "label", ParamGroup::Frozen)
        };
        Ok(Self {
            config,
            store,
            context,
            label,
            slot_attn,
            slot_ln_gain,
            slot_ln_bias,
            label_cache: LabelCache::new(),
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.encoder.d_model
    }

    pub fn label_cache(&self) -> &LabelCache {
        &self.label_cache
    }

    /// Label encodings for every slot and candidate value. Frozen labels
    /// are served from the cache.
    pub fn label_table(&self, vocab: &Vocabulary, ontology: &Ontology) -> Result<LabelTable> {
        let encode = |text: &str| -> Result<Mat> {
            if self.label.trainable {
                let h = encode_matrix(&self.store, &self.label, &label_ids(text, vocab))?;
                Ok(h.row(0).to_owned().insert_axis(Axis(0)))
            } else {
                encode_label(&self.store, &self.label, vocab, text, &self.label_cache)
            }
        };
        let mut slots = Vec::with_capacity(ontology.num_slots());
        let mut values = Vec::with_capacity(ontology.num_slots());
        for (j, slot) in ontology.slots().iter().enumerate() {
            slots.push(encode(slot)?);
            let rows = ontology
                .values(j)
                .iter()
                .map(|v| encode(v))
                .collect::<Result<Vec<_>>>()?;
            let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
            values.push(ndarray::concatenate(Axis(0), &views).expect("same width"));
        }
        Ok(LabelTable { slots, values })
    }
}

/// Label representations placed on a tape.
pub struct LabelVars {
    pub slots: Vec<Var>,
    pub values: Vec<Var>,
}

impl LabelVars {
    pub fn constants(tape: &mut Tape, table: &LabelTable) -> Self {
        Self {
            slots: table.slots.iter().map(|m| tape.constant(m.clone())).collect(),
            values: table.values.iter().map(|m| tape.constant(m.clone())).collect(),
        }
    }

    /// Leaves whose gradients are reported after backward.
    pub fn inputs(tape: &mut Tape, table: &LabelTable) -> Self {
        Self {
            slots: table.slots.iter().map(|m| tape.input(m.clone())).collect(),
            values: table.values.iter().map(|m| tape.input(m.clone())).collect(),
        }
    }
}

pub struct ContextForward {
    pub encoder: EncoderOutput,
    /// `1 × d` row 0 of the hidden states.
    pub cls: Var,
    /// Per slot: `1 × |values|` log-probabilities.
    pub log_probs: Vec<Var>,
    /// Per slot: `1 × |values|` distances.
    pub distances: Vec<Var>,
    /// Per slot, per head: `1 × |X|` slot-context attention weights.
    pub slot_weights: Vec<Vec<Var>>,
}

/// `r = LN(MultiHead(h_S, H, H))` on a tape.
pub fn slot_feature_on_tape(
    tape: &mut Tape,
    model: &ModelParams,
    slot_query: Var,
    hidden: Var,
) -> (Var, Vec<Var>) {
    let (a, w) = multi_head_attention(
        tape,
        &model.slot_attn,
        model.config.encoder.n_heads,
        slot_query,
        hidden,
    );
    let g = tape.param(model.slot_ln_gain);
    let b = tape.param(model.slot_ln_bias);
    (tape.layer_norm(a, g, b), w)
}

/// Encodes a context and scores every slot's candidates.
pub fn forward_context<R: Rng>(
    tape: &mut Tape,
    model: &ModelParams,
    labels: &LabelVars,
    ids: &[usize],
    rng: Option<&mut R>,
) -> Result<ContextForward> {
    let encoder = encode_sequence(tape, &model.context, ids, rng)?;
    let cls = tape.row(encoder.hidden, 0);
    let n_slots = labels.slots.len();
    let mut log_probs = Vec::with_capacity(n_slots);
    let mut distances = Vec::with_capacity(n_slots);
    let mut slot_weights = Vec::with_capacity(n_slots);
    // All slot queries attend in one pass; rows are independent.
    let queries = tape.stack_rows(&labels.slots);
    let (r_all, w_all) = slot_feature_on_tape(tape, model, queries, encoder.hidden);
    for j in 0..n_slots {
        let r = tape.row(r_all, j);
        let w: Vec<Var> = w_all.iter().map(|&h| tape.row(h, j)).collect();
        let dist = tape.l2_dist_rows(r, labels.values[j]);
        let logits = tape.scale(dist, -1.0);
        log_probs.push(tape.log_softmax_rows(logits));
        distances.push(dist);
        slot_weights.push(w);
    }
    Ok(ContextForward {
        encoder,
        cls,
        log_probs,
        distances,
        slot_weights,
    })
}

/// `Σ_j −log P(gold_j)` on a tape.
pub fn nll_on_tape(tape: &mut Tape, log_probs: &[Var], gold: &[usize]) -> Var {
    let picks: Vec<Var> = log_probs
        .iter()
        .zip(gold)
        .map(|(&lp, &g)| tape.pick_sum(lp, &[(0, g)]))
        .collect();
    let sum = tape.add_n(&picks);
    tape.scale(sum, -1.0)
}

/// Symmetric temperature-scaled contrastive loss on a tape. Rows `0..N` of
/// `z` are originals, rows `N..2N` their noised variants.
pub fn contrastive_on_tape(tape: &mut Tape, z: Var, temperature: f64) -> Result<Var> {
    let zv = tape.value(z);
    let two_n = zv.nrows();
    if two_n < 2 || !two_n.is_multiple_of(2) {
        return Err(DstError::Shape(format!(
            "contrastive batch needs an even row count >= 2, got {two_n}"
        )));
    }
    for (k, row) in zv.rows().into_iter().enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            return Err(DstError::ZeroVector(k));
        }
    }
    let n = two_n / 2;
    let zn = tape.normalize_rows(z);
    let sim = tape.matmul_nt(zn, zn);
    let logits = tape.scale(sim, 1.0 / temperature);
    let ls = tape.log_softmax_rows_no_diag(logits);
    let at: Vec<(usize, usize)> = (0..two_n).map(|i| (i, (i + n) % two_n)).collect();
    let s = tape.pick_sum(ls, &at);
    Ok(tape.scale(s, -1.0 / two_n as f64))
}

/// Slot-context feature for a plain hidden matrix.
pub fn slot_context_attention(
    model: &ModelParams,
    slot_query: &Mat,
    hidden: &Mat,
) -> Result<SlotContextFeature> {
    let d = model.d_model();
    if slot_query.dim() != (1, d) || hidden.ncols() != d || hidden.nrows() == 0 {
        return Err(DstError::Shape(format!(
            "slot query {:?} / context {:?} incompatible with d = {d}",
            slot_query.dim(),
            hidden.dim()
        )));
    }
    let mut tape = Tape::new(&model.store);
    let q = tape.constant(slot_query.clone());
    let h = tape.constant(hidden.clone());
    let (r, w) = slot_feature_on_tape(&mut tape, model, q, h);
    Ok(SlotContextFeature {
        r: tape.value(r).iter().copied().collect(),
        head_weights: w
            .iter()
            .map(|&v| tape.value(v).iter().copied().collect())
            .collect(),
    })
}

/// `P(v_i) = softmax_i(−‖r − h_{v_i}‖₂)` with max-shifted exponentials.
pub fn slot_value_distribution(r: &[f64], value_reps: &Mat) -> SlotDistribution {
    let distances: Vec<f64> = value_reps
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .zip(r)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let max_logit = distances.iter().fold(f64::NEG_INFINITY, |m, &d| m.max(-d));
    let exps: Vec<f64> = distances.iter().map(|d| (-d - max_logit).exp()).collect();
    let z: f64 = exps.iter().sum();
    SlotDistribution {
        probs: exps.into_iter().map(|e| e / z).collect(),
        distances,
    }
}

/// Per-slot distributions for one context in evaluation mode.
pub fn slot_distributions(
    model: &ModelParams,
    labels: &LabelTable,
    context: &ContextInput,
) -> Result<Vec<SlotDistribution>> {
    let mut tape = Tape::new(&model.store);
    let lv = LabelVars::constants(&mut tape, labels);
    let fwd = forward_context::<ChaCha8Rng>(&mut tape, model, &lv, &context.token_ids, None)?;
    Ok(fwd
        .distances
        .iter()
        .zip(&fwd.log_probs)
        .map(|(&d, &lp)| SlotDistribution {
            probs: tape.value(lp).iter().map(|v| v.exp()).collect(),
            distances: tape.value(d).iter().copied().collect(),
        })
        .collect())
}

/// Nearest candidate per slot; ties go to the lowest value index.
pub fn predict_state(
    model: &ModelParams,
    labels: &LabelTable,
    context: &ContextInput,
    ontology: &Ontology,
) -> Result<DialogueState> {
    let dists = slot_distributions(model, labels, context)?;
    Ok(state_from_distributions(&dists, ontology))
}

pub fn state_from_distributions(dists: &[SlotDistribution], ontology: &Ontology) -> DialogueState {
    let mut state = DialogueState::empty(ontology);
    for (j, dist) in dists.iter().enumerate() {
        let mut best = 0;
        for (i, &d) in dist.distances.iter().enumerate() {
            if d < dist.distances[best] {
                best = i;
            }
        }
        state.set(ontology.slots()[j].clone(), ontology.values(j)[best].clone());
    }
    state
}

/// Gold value indices in ontology order.
pub fn gold_indices(gold: &DialogueState, ontology: &Ontology) -> Result<Vec<usize>> {
    ontology
        .slots()
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let v = gold.get(s).unwrap_or(crate::ontology::NONE_VALUE);
            ontology
                .value_index(j, v)
                .ok_or_else(|| DstError::Ontology(format!("value `{v}` not a candidate of `{s}`")))
        })
        .collect()
}

/// `Σ_j −log P(gold value of slot j)` for one context.
pub fn dst_loss(
    model: &ModelParams,
    labels: &LabelTable,
    context: &ContextInput,
    gold: &DialogueState,
    ontology: &Ontology,
) -> Result<f64> {
    let gold = gold_indices(gold, ontology)?;
    let mut tape = Tape::new(&model.store);
    let lv = LabelVars::constants(&mut tape, labels);
    let fwd = forward_context::<ChaCha8Rng>(&mut tape, model, &lv, &context.token_ids, None)?;
    let nll = nll_on_tape(&mut tape, &fwd.log_probs, &gold);
    Ok(tape.scalar(nll))
}

/// Contrastive loss over `2N` rows: originals first, then their noised
/// variants in the same order. Mean over all `2N` anchors.
pub fn contrastive_loss(reps: &Mat, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(DstError::Config("temperature must be positive".into()));
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let z = tape.constant(reps.clone());
    let l = contrastive_on_tape(&mut tape, z, temperature)?;
    Ok(tape.scalar(l))
}

/// Which auxiliary terms enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub noised_tracking: bool,
    pub context_matching: bool,
}

impl LossTerms {
    pub const ALL: LossTerms = LossTerms {
        noised_tracking: true,
        context_matching: true,
    };

    pub fn weights(&self) -> ObjectiveWeights {
        ObjectiveWeights {
            original: if self.noised_tracking { 0.5 } else { 1.0 },
            noised: if self.noised_tracking { 0.5 } else { 0.0 },
            contrastive: if self.context_matching { 1.0 } else { 0.0 },
        }
    }
}

/// `(L_ori + L_nos)/2 + L_c`, with disabled terms dropped: without noised
/// tracking the first part is `L_ori` alone.
pub fn total_loss(l_ori: f64, l_nos: f64, l_c: f64, terms: LossTerms) -> f64 {
    let dst = if terms.noised_tracking {
        (l_ori + l_nos) / 2.0
    } else {
        l_ori
    };
    if terms.context_matching {
        dst + l_c
    } else {
        dst
    }
}

/// Linear weights of the three loss terms in the objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub original: f64,
    pub noised: f64,
    pub contrastive: f64,
}

pub fn dropout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::Ontology;
    use crate::text::build_vocab;
    use ndarray::array;
    use proptest::prelude::*;

    fn small_model(heads: usize, d: usize) -> ModelParams {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                n_layers: 1,
                n_heads: heads,
                d_model: d,
                d_ff: 2 * d,
                max_len: 32,
                dropout: 0.0,
            },
            ..Default::default()
        };
        ModelParams::init(cfg, 20, 1).unwrap()
    }

    #[test]
    fn single_token_attention_is_one() {
        let m = small_model(2, 8);
        let q = Mat::from_elem((1, 8), 0.3);
        let h = Mat::from_shape_fn((1, 8), |(_, c)| c as f64 * 0.1);
        let f = slot_context_attention(&m, &q, &h).unwrap();
        for w in &f.head_weights {
            assert_eq!(w, &[1.0]);
        }
        assert!(slot_context_attention(&m, &Mat::zeros((1, 4)), &h).is_err());
    }

    #[test]
    fn attention_weights_are_distributions() {
        let m = small_model(2, 8);
        let q = Mat::from_shape_fn((1, 8), |(_, c)| (c as f64).sin());
        let h = Mat::from_shape_fn((5, 8), |(r, c)| ((r * 7 + c) as f64).cos());
        let f = slot_context_attention(&m, &q, &h).unwrap();
        assert_eq!(f.head_weights.len(), 2);
        for w in &f.head_weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(w.iter().all(|&v| v >= 0.0));
        }
        assert!(f.r.iter().all(|v| v.is_finite()));
    }

    /// One head, identity projections, zero biases: r is the layer-normed
    /// softmax-weighted sum of the context rows.
    #[test]
    fn identity_projection_matches_hand_arithmetic() {
        let mut m = small_model(1, 2);
        for id in [m.slot_attn.wq, m.slot_attn.wk, m.slot_attn.wv, m.slot_attn.wo] {
            *m.store.get_mut(id) = array![[1.0, 0.0], [0.0, 1.0]];
        }
        let q = array![[1.0, 0.0]];
        let h = array![[2.0, 0.0], [0.0, 1.0]];
        // scores = q·hᵀ/√2 = [2/√2, 0]
        let s0 = 2.0 / 2f64.sqrt();
        let w0 = s0.exp() / (s0.exp() + 1.0);
        let w1 = 1.0 - w0;
        let a = [2.0 * w0, w1];
        let mean = (a[0] + a[1]) / 2.0;
        let var = ((a[0] - mean).powi(2) + (a[1] - mean).powi(2)) / 2.0;
        let expected: Vec<f64> = a.iter().map(|v| (v - mean) / (var + 1e-5).sqrt()).collect();
        let f = slot_context_attention(&m, &q, &h).unwrap();
        assert!((f.head_weights[0][0] - w0).abs() < 1e-12);
        for (g, e) in f.r.iter().zip(&expected) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn distribution_examples() {
        let r = [0.0, 0.0];
        let equi = array![[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let d = slot_value_distribution(&r, &equi);
        for p in &d.probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let two = array![[0.0, 0.0], [10.0, 0.0]];
        let d = slot_value_distribution(&r, &two);
        let z = 1.0 + (-10f64).exp();
        assert!((d.probs[0] - 1.0 / z).abs() < 1e-15);
        assert!((d.probs[1] - (-10f64).exp() / z).abs() < 1e-15);
        assert!((d.probs[0] - 0.99995).abs() < 1e-5);
        let one = array![[3.0, 4.0]];
        assert_eq!(slot_value_distribution(&r, &one).probs, vec![1.0]);
    }

    #[test]
    fn argmax_ties_pick_lowest_index() {
        let d = SlotDistribution {
            probs: vec![0.25, 0.375, 0.375],
            distances: vec![2.0, 1.0, 1.0],
        };
        assert_eq!(d.argmax(), 1);
    }

    proptest! {
        #[test]
        fn distribution_invariants(
            r in proptest::collection::vec(-3.0f64..3.0, 4),
            vals in proptest::collection::vec(-3.0f64..3.0, 4..24),
            scale in 0.1f64..10.0,
        ) {
            let k = vals.len() / 4;
            let v = Mat::from_shape_vec((k, 4), vals[..k * 4].to_vec()).unwrap();
            let d = slot_value_distribution(&r, &v);
            prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let argmin = d.distances.iter().enumerate()
                .fold(0, |b, (i, &x)| if x < d.distances[b] { i } else { b });
            prop_assert_eq!(d.argmax(), argmin);
            let rs: Vec<f64> = r.iter().map(|x| x * scale).collect();
            let ds = slot_value_distribution(&rs, &(&v * scale));
            let argmin_s = ds.distances.iter().enumerate()
                .fold(0, |b, (i, &x)| if x < ds.distances[b] { i } else { b });
            prop_assert_eq!(argmin_s, argmin);
        }
    }

    #[test]
    fn contrastive_examples() {
        let one = array![[0.3, -1.0, 2.0], [1.0, 0.5, 0.0]];
        assert!(contrastive_loss(&one, 0.1).unwrap().abs() < 1e-9);

        // Positives identical, everything else orthogonal, τ = 1.
        let z = array![
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0]
        ];
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        let got = contrastive_loss(&z, 1.0).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");

        let zero = array![[0.0, 0.0], [1.0, 1.0]];
        assert!(matches!(
            contrastive_loss(&zero, 0.1),
            Err(DstError::ZeroVector(0))
        ));
        assert!(contrastive_loss(&z, 0.0).is_err());
    }

    #[test]
    fn contrastive_permutation_invariant() {
        let z = Mat::from_shape_fn((8, 5), |(r, c)| ((r * 5 + c) as f64 * 0.37).sin() + 0.1);
        let base = contrastive_loss(&z, 0.1).unwrap();
        assert!(base >= 0.0);
        // permute pairs consistently: pair order (2, 0, 3, 1)
        let perm = [2usize, 0, 3, 1];
        let mut p = Mat::zeros((8, 5));
        for (new, &old) in perm.iter().enumerate() {
            p.row_mut(new).assign(&z.row(old));
            p.row_mut(new + 4).assign(&z.row(old + 4));
        }
        assert!((contrastive_loss(&p, 0.1).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.5, 1.5, 0.0, LossTerms::ALL), 1.5);
        assert_eq!(total_loss(2.0, 4.0, 1.0, LossTerms::ALL), 4.0);
        let cm = LossTerms {
            noised_tracking: false,
            context_matching: true,
        };
        assert_eq!(total_loss(2.0, 4.0, 1.0, cm), 3.0);
        let w = cm.weights();
        assert_eq!(
            w.original * 2.0 + w.noised * 4.0 + w.contrastive * 1.0,
            3.0
        );
    }

    fn toy_ontology() -> Ontology {
        Ontology::new(vec![
            ("train-day", vec!["monday", "sunday"]),
            ("hotel-area", vec!["north", "south", "east"]),
        ])
        .unwrap()
    }

    #[test]
    fn losses_and_prediction() {
        let o = toy_ontology();
        let vocab = build_vocab(&[], &o);
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                n_layers: 1,
                n_heads: 2,
                d_model: 8,
                d_ff: 16,
                max_len: 32,
                dropout: 0.0,
            },
            ..Default::default()
        };
        let m = ModelParams::init(cfg, vocab.len(), 3).unwrap();
        let labels = m.label_table(&vocab, &o).unwrap();
        assert_eq!(labels.values[0].dim(), (4, 8));
        let turn = crate::corpus::Turn {
            system_utterance: "hi".into(),
            user_utterance: "sunday north".into(),
            gold_state: DialogueState::empty(&o),
        };
        let ctx = crate::text::build_context_input(
            &[],
            &DialogueState::empty(&o),
            &turn,
            &vocab,
            32,
        )
        .unwrap();
        let p1 = predict_state(&m, &labels, &ctx, &o).unwrap();
        let p2 = predict_state(&m, &labels, &ctx, &o).unwrap();
        assert_eq!(p1, p2);
        let dists = slot_distributions(&m, &labels, &ctx).unwrap();
        for d in &dists {
            assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let loss = dst_loss(&m, &labels, &ctx, &p1, &o).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn zero_distance_value_wins() {
        let o = toy_ontology();
        let vocab = build_vocab(&[], &o);
        let m = ModelParams::init(
            ModelConfig {
                encoder: EncoderConfig {
                    n_layers: 1,
                    n_heads: 1,
                    d_model: 8,
                    d_ff: 8,
                    max_len: 16,
                    dropout: 0.0,
                },
                ..Default::default()
            },
            vocab.len(),
            2,
        )
        .unwrap();
        let mut labels = m.label_table(&vocab, &o).unwrap();
        let turn = crate::corpus::Turn {
            system_utterance: "x".into(),
            user_utterance: "y".into(),
            gold_state: DialogueState::empty(&o),
        };
        let ctx =
            crate::text::build_context_input(&[], &DialogueState::empty(&o), &turn, &vocab, 16)
                .unwrap();
        let mut tape = Tape::new(&m.store);
        let lv = LabelVars::constants(&mut tape, &labels);
        let fwd = forward_context::<ChaCha8Rng>(&mut tape, &m, &lv, &ctx.token_ids, None).unwrap();
        let j = o.slot_index("train-day").unwrap();
        let sunday = o.value_index(j, "sunday").unwrap();
        // Move the "sunday" label onto r for train-day.
        let (r, _) = slot_feature_on_tape(&mut tape, &m, lv.slots[j], fwd.encoder.hidden);
        labels.values[j].row_mut(sunday).assign(&tape.value(r).row(0));
        let pred = predict_state(&m, &labels, &ctx, &o).unwrap();
        assert_eq!(pred.get("train-day"), Some("sunday"));
    }

    #[test]
    fn one_candidate_and_uniform_losses() {
        let o = Ontology::new(vec![("a-b", vec!["none"])]).unwrap();
        let vocab = build_vocab(&[], &o);
        let m = small_model(1, 4);
        let _ = (&vocab, &m);
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let lp = tape.constant(array![[0.0]]);
        let l = nll_on_tape(&mut tape, &[lp], &[0]);
        assert_eq!(tape.scalar(l), 0.0);
        let k = 5.0f64;
        let uni = tape.constant(Mat::from_elem((1, 5), -k.ln()));
        let l = nll_on_tape(&mut tape, &[uni], &[3]);
        assert!((tape.scalar(l) - k.ln()).abs() < 1e-15);
    }
}
