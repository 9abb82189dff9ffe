//! Mini-batch objective with gradients.
//!
//! Each context gets its own tape so forwards and backwards can run in
//! parallel; the contrastive term lives on a small tape over the `[CLS]`
//! rows and feeds its gradients back as seeds. Parameter gradients are
//! merged in a fixed order, so results do not depend on thread scheduling.

use ndarray::Axis;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::encoder::encode_sequence;
use crate::error::{DstError, Result};
use crate::model::{
    contrastive_on_tape, dropout_rng, forward_context, nll_on_tape, LabelTable, LabelVars,
    ModelParams, ObjectiveWeights,
};
use crate::ontology::Ontology;
use crate::params::{Mat, ParamGrads, ParamStore};
use crate::rng::{derive_seed, Stream};
use crate::text::{label_ids, Vocabulary};

/// One training turn: original and noised context ids with gold value
/// indices in ontology order.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub original: Vec<usize>,
    pub noised: Vec<usize>,
    pub gold: Vec<usize>,
    /// Dropout stream for this example; `None` disables dropout.
    pub dropout_seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchLosses {
    pub original: f64,
    pub noised: f64,
    pub contrastive: f64,
    pub total: f64,
}

pub struct BatchOutcome {
    pub losses: BatchLosses,
    pub grads: Option<ParamGrads>,
}

struct ContextRun<'s> {
    tape: Tape<'s>,
    labels: LabelVars,
    cls: Var,
    nll: Var,
}

struct LabelRun<'s> {
    tape: Tape<'s>,
    slots: Vec<Var>,
    values: Vec<Var>,
}

/// Label encodings taken on a tape through the (trainable) context encoder.
fn shared_labels<'s>(
    model: &'s ModelParams,
    vocab: &Vocabulary,
    ontology: &Ontology,
) -> Result<(LabelRun<'s>, LabelTable)> {
    let mut tape = Tape::new(&model.store);
    let encode = |tape: &mut Tape<'s>, text: &str| -> Result<Var> {
        let out = encode_sequence::<ChaCha8Rng>(tape, &model.label, &label_ids(text, vocab), None)?;
        Ok(tape.row(out.hidden, 0))
    };
    let mut slots = Vec::new();
    let mut values = Vec::new();
    for (j, slot) in ontology.slots().iter().enumerate() {
        slots.push(encode(&mut tape, slot)?);
        let rows = ontology
            .values(j)
            .iter()
            .map(|v| encode(&mut tape, v))
            .collect::<Result<Vec<_>>>()?;
        values.push(tape.stack_rows(&rows));
    }
    let table = LabelTable {
        slots: slots.iter().map(|&v| tape.value(v).clone()).collect(),
        values: values.iter().map(|&v| tape.value(v).clone()).collect(),
    };
    Ok((LabelRun { tape, slots, values }, table))
}

/// Weighted objective `w_ori·L_ori + w_nos·L_nos + w_c·L_c` over a batch,
/// where `L_ori` and `L_nos` are batch means of the per-turn tracking loss
/// and `L_c` is the contrastive loss over the `2N` `[CLS]` rows.
pub fn batch_objective(
    model: &ModelParams,
    vocab: &Vocabulary,
    ontology: &Ontology,
    examples: &[Example],
    weights: ObjectiveWeights,
    with_grads: bool,
) -> Result<BatchOutcome> {
    if examples.is_empty() {
        return Err(DstError::Empty("batch"));
    }
    let n = examples.len();
    let shared = model.label.trainable;
    let (label_run, table) = if shared {
        let (run, table) = shared_labels(model, vocab, ontology)?;
        (Some(run), table)
    } else {
        (None, model.label_table(vocab, ontology)?)
    };

    let need_noised = weights.noised != 0.0 || weights.contrastive != 0.0;
    let mut jobs: Vec<(usize, bool)> = (0..n).map(|i| (i, false)).collect();
    if need_noised {
        jobs.extend((0..n).map(|i| (i, true)));
    }

    let runs: Vec<ContextRun> = jobs
        .par_iter()
        .map(|&(i, noised)| -> Result<ContextRun> {
            let ex = &examples[i];
            let mut tape = Tape::new(&model.store);
            let labels = if shared {
                LabelVars::inputs(&mut tape, &table)
            } else {
                LabelVars::constants(&mut tape, &table)
            };
            let ids = if noised { &ex.noised } else { &ex.original };
            let mut rng = ex
                .dropout_seed
                .map(|s| dropout_rng(derive_seed(s, Stream::Dropout, &[noised as u64])));
            let fwd = forward_context(&mut tape, model, &labels, ids, rng.as_mut())?;
            let nll = nll_on_tape(&mut tape, &fwd.log_probs, &ex.gold);
            Ok(ContextRun {
                cls: fwd.cls,
                tape,
                labels,
                nll,
            })
        })
        .collect::<Result<_>>()?;

    let mean_nll = |noised: bool| -> f64 {
        runs.iter()
            .zip(&jobs)
            .filter(|(_, j)| j.1 == noised)
            .map(|(r, _)| r.tape.scalar(r.nll))
            .sum::<f64>()
            / n as f64
    };
    let l_ori = mean_nll(false);
    let l_nos = if need_noised { mean_nll(true) } else { 0.0 };

    // Contrastive term over [CLS] rows: originals first, then noised.
    let empty = ParamStore::new();
    let mut ctape = Tape::new(&empty);
    let mut cls_inputs = Vec::new();
    let mut l_c = 0.0;
    let mut c_loss = None;
    if weights.contrastive != 0.0 {
        cls_inputs = runs
            .iter()
            .map(|r| ctape.input(r.tape.value(r.cls).clone()))
            .collect();
        let z = ctape.stack_rows(&cls_inputs);
        let l = contrastive_on_tape(&mut ctape, z, model.config.temperature)?;
        l_c = ctape.scalar(l);
        c_loss = Some(l);
    }

    let losses = BatchLosses {
        original: l_ori,
        noised: l_nos,
        contrastive: l_c,
        total: weights.original * l_ori + weights.noised * l_nos + weights.contrastive * l_c,
    };
    if !with_grads || !losses.total.is_finite() {
        return Ok(BatchOutcome { losses, grads: None });
    }

    let cls_grads: Vec<Option<Mat>> = match c_loss {
        Some(l) => {
            let g = ctape.backward(&[(l, Mat::from_elem((1, 1), weights.contrastive))]);
            cls_inputs.iter().map(|&v| g.input(v).cloned()).collect()
        }
        None => vec![None; runs.len()],
    };

    let per_run: Vec<(ParamGrads, Option<(Vec<Mat>, Vec<Mat>)>)> = runs
        .par_iter()
        .zip(jobs.par_iter())
        .zip(cls_grads.par_iter())
        .map(|((run, &(_, noised)), cg)| {
            let w = if noised { weights.noised } else { weights.original } / n as f64;
            let mut seeds = vec![(run.nll, Mat::from_elem((1, 1), w))];
            if let Some(g) = cg {
                seeds.push((run.cls, g.clone()));
            }
            let g = run.tape.backward(&seeds);
            let label_grads = shared.then(|| {
                let grab = |vars: &[Var], mats: &[Mat]| -> Vec<Mat> {
                    vars.iter()
                        .zip(mats)
                        .map(|(&v, m)| {
                            g.input(v)
                                .cloned()
                                .unwrap_or_else(|| Mat::zeros(m.raw_dim()))
                        })
                        .collect()
                };
                (
                    grab(&run.labels.slots, &table.slots),
                    grab(&run.labels.values, &table.values),
                )
            });
            (g.params, label_grads)
        })
        .collect();

    let mut grads = ParamGrads::zeros(model.store.len());
    let mut slot_acc: Vec<Mat> = table.slots.iter().map(|m| Mat::zeros(m.raw_dim())).collect();
    let mut value_acc: Vec<Mat> = table.values.iter().map(|m| Mat::zeros(m.raw_dim())).collect();
    for (pg, lg) in &per_run {
        grads.merge(pg);
        if let Some((s, v)) = lg {
            for (a, g) in slot_acc.iter_mut().zip(s) {
                *a += g;
            }
            for (a, g) in value_acc.iter_mut().zip(v) {
                *a += g;
            }
        }
    }
    if let Some(run) = label_run {
        let seeds: Vec<(Var, Mat)> = run
            .slots
            .iter()
            .copied()
            .zip(slot_acc)
            .chain(run.values.iter().copied().zip(value_acc))
            .collect();
        grads.merge(&run.tape.backward(&seeds).params);
    }
    Ok(BatchOutcome {
        losses,
        grads: Some(grads),
    })
}

/// Mean-pooled final hidden states of a context, as a flat vector.
pub fn mean_pooled(model: &ModelParams, ids: &[usize]) -> Result<Vec<f64>> {
    let h = crate::encoder::encode_matrix(&model.store, &model.context, ids)?;
    Ok(h.mean_axis(Axis(0))
        .expect("non-empty context")
        .iter()
        .copied()
        .collect())
}
