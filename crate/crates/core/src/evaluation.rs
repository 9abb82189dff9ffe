//! Accuracy metrics, momentum analysis, noise probing and attention export.

use std::collections::{BTreeMap, BTreeSet};

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::corpus::{Dialogue, EventLog};
use crate::encoder::encode_matrix;
use crate::error::{DstError, Result};
use crate::inference::{context_prev_state, PredictionRecord};
use crate::model::{forward_context, predict_state, LabelTable, LabelVars, ModelParams};
use crate::noise::{noise_state, NoiseConfig};
use crate::ontology::{DialogueState, Ontology, NONE_VALUE};
use crate::params::Mat;
use crate::rng::{stream_rng, Stream};
use crate::text::{build_context_input, ContextInput, Vocabulary};

fn value<'a>(s: &'a DialogueState, slot: &str) -> &'a str {
    s.get(slot).unwrap_or(NONE_VALUE)
}

fn slots_of(r: &PredictionRecord) -> BTreeSet<&str> {
    r.pred.iter().chain(r.gold.iter()).map(|(k, _)| k).collect()
}

/// Every slot, including inactive ones, agrees.
pub fn turn_correct(r: &PredictionRecord) -> bool {
    slots_of(r)
        .into_iter()
        .all(|s| value(&r.pred, s) == value(&r.gold, s))
}

pub fn joint_goal_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(DstError::Empty("prediction records"));
    }
    let correct = records.iter().filter(|r| turn_correct(r)).count();
    Ok(correct as f64 / records.len() as f64)
}

pub fn slot_goal_accuracy(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(DstError::Empty("prediction records"));
    }
    let (mut correct, mut total) = (0usize, 0usize);
    for r in records {
        for s in slots_of(r) {
            total += 1;
            if value(&r.pred, s) == value(&r.gold, s) {
                correct += 1;
            }
        }
    }
    if total == 0 {
        return Err(DstError::Empty("slots"));
    }
    Ok(correct as f64 / total as f64)
}

/// Joint accuracy per 1-based turn index.
pub fn turn_level_accuracy(records: &[PredictionRecord]) -> BTreeMap<usize, f64> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = counts.entry(r.turn).or_default();
        e.1 += 1;
        if turn_correct(r) {
            e.0 += 1;
        }
    }
    counts
        .into_iter()
        .map(|(t, (c, n))| (t, c as f64 / n as f64))
        .collect()
}

/// Joint accuracy over the records selected by `keep`; `None` if none are.
pub fn subset_joint_accuracy(
    records: &[PredictionRecord],
    keep: impl Fn(&PredictionRecord) -> bool,
) -> Option<f64> {
    let sel: Vec<&PredictionRecord> = records.iter().filter(|r| keep(r)).collect();
    if sel.is_empty() {
        return None;
    }
    Some(sel.iter().filter(|r| turn_correct(r)).count() as f64 / sel.len() as f64)
}

/// Whether the event log has a value change at this record's turn.
pub fn is_change_turn(events: &EventLog, r: &PredictionRecord) -> bool {
    events
        .get(&r.dialogue_id)
        .and_then(|turns| turns.get(r.turn - 1))
        .is_some_and(|ev| ev.iter().any(|e| e.is_change()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentumReport {
    pub wrong_pairs_total: usize,
    pub wrong_pairs_carried: usize,
    pub momentum_proportion: Option<f64>,
    pub gold_pairs_total: usize,
    pub gold_pairs_carried: usize,
    pub gold_carryover_ratio: Option<f64>,
}

pub fn momentum_proportion(carried: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| carried as f64 / total as f64)
}

/// From the second turn on, counts wrong non-none predicted pairs and how
/// many of them repeat the previous turn's prediction; also the share of
/// active gold pairs already present in the previous gold state.
pub fn momentum_analysis(records: &[PredictionRecord]) -> MomentumReport {
    let mut by_dialogue: BTreeMap<&str, BTreeMap<usize, &PredictionRecord>> = BTreeMap::new();
    for r in records {
        by_dialogue
            .entry(r.dialogue_id.as_str())
            .or_default()
            .insert(r.turn, r);
    }
    let (mut wt, mut wc, mut gt, mut gc) = (0, 0, 0, 0);
    for turns in by_dialogue.values() {
        for (&t, r) in turns {
            let Some(prev) = turns.get(&(t.wrapping_sub(1))).filter(|_| t >= 2) else {
                continue;
            };
            for (slot, pv) in r.pred.iter() {
                if pv != NONE_VALUE && pv != value(&r.gold, slot) {
                    wt += 1;
                    if value(&prev.pred, slot) == pv {
                        wc += 1;
                    }
                }
            }
            for (slot, gv) in r.gold.iter() {
                if gv != NONE_VALUE {
                    gt += 1;
                    if value(&prev.gold, slot) == gv {
                        gc += 1;
                    }
                }
            }
        }
    }
    MomentumReport {
        wrong_pairs_total: wt,
        wrong_pairs_carried: wc,
        momentum_proportion: momentum_proportion(wc, wt),
        gold_pairs_total: gt,
        gold_pairs_carried: gc,
        gold_carryover_ratio: momentum_proportion(gc, gt),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub joint: f64,
    pub slot: f64,
    pub per_turn: BTreeMap<usize, f64>,
    pub momentum: MomentumReport,
    pub turns: usize,
    pub slot_pairs: usize,
}

pub fn metrics_report(records: &[PredictionRecord]) -> Result<MetricsReport> {
    Ok(MetricsReport {
        joint: joint_goal_accuracy(records)?,
        slot: slot_goal_accuracy(records)?,
        per_turn: turn_level_accuracy(records),
        momentum: momentum_analysis(records),
        turns: records.len(),
        slot_pairs: records.iter().map(|r| slots_of(r).len()).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub ratio: f64,
    pub joint_accuracy: f64,
    pub mean_l2_distance: f64,
}

fn mean_pool(h: &Mat) -> Vec<f64> {
    h.mean_axis(ndarray::Axis(0))
        .expect("non-empty context")
        .to_vec()
}

/// Oracle-previous-state evaluation with the previous state noised at each
/// ratio. Noise for turn `(d, t)` comes from the same stream at every ratio,
/// so noised slot sets grow monotonically with the ratio.
pub fn noise_probe(
    model: &ModelParams,
    corpus: &[Dialogue],
    ontology: &Ontology,
    vocab: &Vocabulary,
    ratios: &[f64],
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    let labels = model.label_table(vocab, ontology)?;
    let max_len = model.config.encoder.max_len;
    let mut rows = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let noise = NoiseConfig::new(ratio)?;
        let per: Vec<Result<Vec<(bool, f64)>>> = corpus
            .par_iter()
            .enumerate()
            .map(|(d, dialogue)| {
                let mut out = Vec::with_capacity(dialogue.turns.len());
                let mut prev = DialogueState::empty(ontology);
                for (t, turn) in dialogue.turns.iter().enumerate() {
                    let history = &dialogue.turns[..t];
                    let base = context_prev_state(model, &prev, ontology);
                    let mut rng = stream_rng(seed, Stream::Probe, &[d as u64, t as u64]);
                    let (noised, _) = noise_state(&base, ontology, &noise, &mut rng);
                    let x = build_context_input(history, &base, turn, vocab, max_len)?;
                    let xp = build_context_input(history, &noised, turn, vocab, max_len)?;
                    let pred = predict_state(model, &labels, &xp, ontology)?;
                    let dist = if x.token_ids == xp.token_ids {
                        0.0
                    } else {
                        let a = mean_pool(&encode_matrix(&model.store, &model.context, &x.token_ids)?);
                        let b = mean_pool(&encode_matrix(&model.store, &model.context, &xp.token_ids)?);
                        a.iter().zip(&b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
                    };
                    let rec = PredictionRecord {
                        dialogue_id: dialogue.id.clone(),
                        turn: t + 1,
                        pred,
                        gold: turn.gold_state.clone(),
                    };
                    out.push((turn_correct(&rec), dist));
                    prev = turn.gold_state.clone();
                }
                Ok(out)
            })
            .collect();
        let (mut correct, mut n, mut dist) = (0usize, 0usize, 0.0);
        for r in per {
            for (c, d) in r? {
                correct += c as usize;
                dist += d;
                n += 1;
            }
        }
        if n == 0 {
            return Err(DstError::Empty("probe corpus"));
        }
        rows.push(ProbeRow {
            ratio,
            joint_accuracy: correct as f64 / n as f64,
            mean_l2_distance: dist / n as f64,
        });
    }
    Ok(rows)
}

pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut s = String::from("ratio,joint_accuracy,mean_l2_distance\n");
    for r in rows {
        s.push_str(&format!("{},{},{}\n", r.ratio, r.joint_accuracy, r.mean_l2_distance));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub slot: String,
}

/// `w·A`: `A` is the mean of the self-attention matrices, `w` the mean of
/// the per-head slot-attention rows.
pub fn attention_scores(self_attention: &[Mat], slot_weights: &[Vec<f64>]) -> Result<Vec<f64>> {
    let (Some(first), Some(w0)) = (self_attention.first(), slot_weights.first()) else {
        return Err(DstError::Empty("attention matrices"));
    };
    let n = w0.len();
    if first.dim() != (n, n) {
        return Err(DstError::Shape(format!(
            "self-attention {:?} vs {n} slot weights",
            first.dim()
        )));
    }
    let mut a = Mat::zeros((n, n));
    for m in self_attention {
        a += m;
    }
    a /= self_attention.len() as f64;
    let mut w = vec![0.0; n];
    for hw in slot_weights {
        for (acc, v) in w.iter_mut().zip(hw) {
            *acc += v / slot_weights.len() as f64;
        }
    }
    Ok((0..n)
        .map(|k| (0..n).map(|i| w[i] * a[[i, k]]).sum())
        .collect())
}

pub fn attention_export(
    model: &ModelParams,
    labels: &LabelTable,
    context: &ContextInput,
    vocab: &Vocabulary,
    ontology: &Ontology,
    slot: &str,
) -> Result<AttentionExport> {
    let j = ontology
        .slot_index(slot)
        .ok_or_else(|| DstError::Ontology(format!("unknown slot `{slot}`")))?;
    let mut tape = Tape::new(&model.store);
    let lv = LabelVars::constants(&mut tape, labels);
    let fwd = forward_context::<ChaCha8Rng>(&mut tape, model, &lv, &context.token_ids, None)?;
    let self_attn: Vec<Mat> = fwd
        .encoder
        .attention
        .iter()
        .flatten()
        .map(|&v| tape.value(v).clone())
        .collect();
    let slot_w: Vec<Vec<f64>> = fwd.slot_weights[j]
        .iter()
        .map(|&v| tape.value(v).iter().copied().collect())
        .collect();
    Ok(AttentionExport {
        tokens: context
            .token_ids
            .iter()
            .map(|&id| vocab.token(id).to_string())
            .collect(),
        scores: attention_scores(&self_attn, &slot_w)?,
        slot: slot.to_string(),
    })
}
