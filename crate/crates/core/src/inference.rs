//! Multi-turn rollout feeding each turn's prediction into the next context.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::corpus::Dialogue;
use crate::error::{DstError, Result};
use crate::model::{predict_state, LabelTable, ModelParams};
use crate::ontology::{DialogueState, Ontology};
use crate::text::{build_context_input, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    /// 1-based.
    pub turn: usize,
    pub pred: DialogueState,
    pub gold: DialogueState,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RolloutOptions {
    /// Feed the gold previous state instead of the previous prediction.
    pub oracle_prev_state: bool,
}

/// The previous state as it enters the context: all-none when the model
/// does not read previous states.
pub fn context_prev_state(
    model: &ModelParams,
    prev: &DialogueState,
    ontology: &Ontology,
) -> DialogueState {
    if model.config.use_previous_state {
        prev.clone()
    } else {
        DialogueState::empty(ontology)
    }
}

pub fn rollout_dialogue(
    model: &ModelParams,
    labels: &LabelTable,
    dialogue: &Dialogue,
    ontology: &Ontology,
    vocab: &Vocabulary,
    options: RolloutOptions,
) -> Result<Vec<PredictionRecord>> {
    let max_len = model.config.encoder.max_len;
    let mut prev = DialogueState::empty(ontology);
    let mut records = Vec::with_capacity(dialogue.turns.len());
    for (t, turn) in dialogue.turns.iter().enumerate() {
        let ctx_state = context_prev_state(model, &prev, ontology);
        let ctx = build_context_input(&dialogue.turns[..t], &ctx_state, turn, vocab, max_len)
            .map_err(|e| DstError::Corpus {
                dialogue: dialogue.id.clone(),
                turn: t + 1,
                message: e.to_string(),
            })?;
        let pred = predict_state(model, labels, &ctx, ontology)?;
        prev = if options.oracle_prev_state {
            turn.gold_state.clone()
        } else {
            pred.clone()
        };
        records.push(PredictionRecord {
            dialogue_id: dialogue.id.clone(),
            turn: t + 1,
            pred,
            gold: turn.gold_state.clone(),
        });
    }
    Ok(records)
}

#[derive(Debug, Default)]
pub struct CorpusRollout {
    pub records: Vec<PredictionRecord>,
    /// Dialogues that failed, with the error; other dialogues are unaffected.
    pub failures: Vec<(String, DstError)>,
}

/// Rolls out every dialogue independently; records come back in corpus
/// order regardless of scheduling.
pub fn rollout_corpus(
    model: &ModelParams,
    corpus: &[Dialogue],
    ontology: &Ontology,
    vocab: &Vocabulary,
    options: RolloutOptions,
) -> Result<CorpusRollout> {
    let labels = model.label_table(vocab, ontology)?;
    let per: Vec<Result<Vec<PredictionRecord>>> = corpus
        .par_iter()
        .map(|d| rollout_dialogue(model, &labels, d, ontology, vocab, options))
        .collect();
    let mut out = CorpusRollout::default();
    for (d, r) in corpus.iter().zip(per) {
        match r {
            Ok(recs) => out.records.extend(recs),
            Err(e) => out.failures.push((d.id.clone(), e)),
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    dialogue_id: String,
    turn: usize,
    pred: BTreeMap<String, String>,
    gold: BTreeMap<String, String>,
}

pub fn write_predictions<W: Write>(records: &[PredictionRecord], mut out: W) -> std::io::Result<()> {
    for r in records {
        let line = RecordLine {
            dialogue_id: r.dialogue_id.clone(),
            turn: r.turn,
            pred: r.pred.to_sparse(),
            gold: r.gold.to_sparse(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_predictions(records: &[PredictionRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| DstError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_predictions(records, &mut w).map_err(|e| DstError::io(path, e))?;
    w.flush().map_err(|e| DstError::io(path, e))
}

/// Reads JSONL predictions; sparse states are completed with none.
pub fn read_predictions<R: BufRead>(input: R, ontology: &Ontology) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line.map_err(|e| DstError::Parse {
            what: "predictions".into(),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let r: RecordLine = serde_json::from_str(&line).map_err(|e| DstError::Parse {
            what: format!("predictions line {}", i + 1),
            message: e.to_string(),
        })?;
        out.push(PredictionRecord {
            dialogue_id: r.dialogue_id,
            turn: r.turn,
            pred: DialogueState::from_sparse(&r.pred, ontology),
            gold: DialogueState::from_sparse(&r.gold, ontology),
        });
    }
    Ok(out)
}

pub fn load_predictions(path: impl AsRef<Path>, ontology: &Ontology) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| DstError::io(path, e))?;
    read_predictions(std::io::BufReader::new(file), ontology)
}
