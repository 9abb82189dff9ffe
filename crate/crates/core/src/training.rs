//! Teacher-forced training with paired noised contexts.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Dialogue;
use crate::encoder::EncoderConfig;
use crate::error::{DstError, Result};
use crate::evaluation::joint_goal_accuracy;
use crate::inference::{rollout_corpus, RolloutOptions};
use crate::model::{gold_indices, LossTerms, ModelConfig, ModelParams};
use crate::noise::{noise_state, NoiseConfig};
use crate::objective::{batch_objective, Example};
use crate::ontology::{DialogueState, Ontology};
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::text::{build_context_input, build_vocab, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    BaselineNoState,
    MonetSt,
    MonetCm,
    Monet,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Baseline,
        Mode::BaselineNoState,
        Mode::MonetSt,
        Mode::MonetCm,
        Mode::Monet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::BaselineNoState => "baseline_no_state",
            Mode::MonetSt => "monet_st",
            Mode::MonetCm => "monet_cm",
            Mode::Monet => "monet",
        }
    }

    pub fn terms(self) -> LossTerms {
        LossTerms {
            noised_tracking: matches!(self, Mode::MonetSt | Mode::Monet),
            context_matching: matches!(self, Mode::MonetCm | Mode::Monet),
        }
    }

    /// Whether noised contexts are built at all.
    pub fn uses_noise(self) -> bool {
        let t = self.terms();
        t.noised_tracking || t.context_matching
    }

    pub fn uses_previous_state(self) -> bool {
        self != Mode::BaselineNoState
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s.replace('-', "_"))
            .ok_or_else(|| {
                DstError::Config(format!(
                    "unknown mode `{s}` (expected one of baseline, baseline_no_state, monet_st, monet_cm, monet)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub weight_decay: f64,
    pub noise_threshold: f64,
    pub allow_none_noise: bool,
    pub temperature: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub share_label_encoder: bool,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Monet,
            batch_size: 8,
            epochs: 20,
            lr_encoder: 4e-5,
            lr_heads: 1e-4,
            weight_decay: 0.01,
            noise_threshold: 0.3,
            allow_none_noise: false,
            temperature: crate::model::DEFAULT_TEMPERATURE,
            seed: 0,
            encoder: EncoderConfig::default(),
            share_label_encoder: false,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| DstError::parse("train config", e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(DstError::Config("batch_size and epochs must be positive".into()));
        }
        for (name, v) in [
            ("lr_encoder", self.lr_encoder),
            ("lr_heads", self.lr_heads),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DstError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(DstError::Config("weight_decay must be non-negative".into()));
        }
        self.noise().validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            temperature: self.temperature,
            share_label_encoder: self.share_label_encoder,
            use_previous_state: self.mode.uses_previous_state(),
        }
    }

    pub fn optimizer_config(&self) -> AdamWConfig {
        AdamWConfig {
            lr_encoder: self.lr_encoder,
            lr_heads: self.lr_heads,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Noise settings; the threshold is forced to 0 in modes without noise.
    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            p: if self.mode.uses_noise() {
                self.noise_threshold
            } else {
                0.0
            },
            allow_none: self.allow_none_noise,
        }
    }
}

/// One teacher-forced turn: index into the corpus plus gold previous and
/// current states.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub dialogue: usize,
    /// 0-based turn index; history is `turns[..turn]`.
    pub turn: usize,
    pub prev_state: DialogueState,
    pub gold_state: DialogueState,
}

pub fn make_training_instances(corpus: &[Dialogue], ontology: &Ontology) -> Vec<TrainingInstance> {
    let mut out = Vec::new();
    for (d, dialogue) in corpus.iter().enumerate() {
        let mut prev = DialogueState::empty(ontology);
        for (t, turn) in dialogue.turns.iter().enumerate() {
            out.push(TrainingInstance {
                dialogue: d,
                turn: t,
                prev_state: prev.clone(),
                gold_state: turn.gold_state.clone(),
            });
            prev = turn.gold_state.clone();
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub loss_original: f64,
    pub loss_noised: f64,
    pub loss_contrastive: f64,
    pub val_joint: Option<f64>,
}

pub struct TrainOutcome {
    /// State after the last epoch.
    pub last: Checkpoint,
    /// Best validation joint accuracy; equals `last` without validation data.
    pub best: Checkpoint,
}

fn build_example(
    config: &TrainConfig,
    corpus: &[Dialogue],
    ontology: &Ontology,
    vocab: &Vocabulary,
    inst: &TrainingInstance,
    epoch: usize,
) -> Result<Example> {
    let dialogue = &corpus[inst.dialogue];
    let history = &dialogue.turns[..inst.turn];
    let current = &dialogue.turns[inst.turn];
    let max_len = config.encoder.max_len;
    let prev = if config.mode.uses_previous_state() {
        inst.prev_state.clone()
    } else {
        DialogueState::empty(ontology)
    };
    let idx = [epoch as u64, inst.dialogue as u64, inst.turn as u64];
    let wrap = |e: DstError| DstError::Corpus {
        dialogue: dialogue.id.clone(),
        turn: inst.turn + 1,
        message: e.to_string(),
    };
    let original = build_context_input(history, &prev, current, vocab, max_len).map_err(wrap)?;
    let noised = if config.mode.uses_noise() {
        let mut rng = stream_rng(config.seed, Stream::Noise, &idx);
        let (ns, replaced) = noise_state(&prev, ontology, &config.noise(), &mut rng);
        if replaced.is_empty() {
            original.token_ids.clone()
        } else {
            build_context_input(history, &ns, current, vocab, max_len)
                .map_err(wrap)?
                .token_ids
        }
    } else {
        original.token_ids.clone()
    };
    Ok(Example {
        original: original.token_ids,
        noised,
        gold: gold_indices(&inst.gold_state, ontology)?,
        dropout_seed: Some(derive_seed(config.seed, Stream::Dropout, &idx)),
    })
}

/// Fresh model and optimizer for `config`, with a vocabulary built from the
/// training corpus.
pub fn init_checkpoint(
    config: &TrainConfig,
    train_corpus: &[Dialogue],
    ontology: &Ontology,
) -> Result<Checkpoint> {
    config.validate()?;
    let vocab = build_vocab(train_corpus, ontology);
    let model = ModelParams::init(config.model_config(), vocab.len(), config.seed)?;
    let optimizer = AdamW::new(config.optimizer_config(), &model.store);
    Ok(Checkpoint {
        config: config.clone(),
        ontology: ontology.clone(),
        vocab,
        model,
        optimizer,
        epoch: 0,
        best_val_joint: None,
        history: Vec::new(),
    })
}

pub fn train(
    config: &TrainConfig,
    train_corpus: &[Dialogue],
    val_corpus: &[Dialogue],
    ontology: &Ontology,
) -> Result<TrainOutcome> {
    let start = init_checkpoint(config, train_corpus, ontology)?;
    resume(start, train_corpus, val_corpus)
}

/// Runs one epoch and returns its mean losses.
pub fn run_epoch(ckpt: &mut Checkpoint, train_corpus: &[Dialogue]) -> Result<EpochStats> {
    let config = ckpt.config.clone();
    let epoch = ckpt.epoch + 1;
    let mut instances = make_training_instances(train_corpus, &ckpt.ontology);
    if instances.is_empty() {
        return Err(DstError::Empty("training corpus"));
    }
    instances.shuffle(&mut stream_rng(config.seed, Stream::Shuffle, &[epoch as u64]));
    let weights = config.mode.terms().weights();
    let mut sums = [0.0; 4];
    let mut steps = 0usize;
    for batch in instances.chunks(config.batch_size) {
        let examples = batch
            .iter()
            .map(|inst| {
                build_example(&config, train_corpus, &ckpt.ontology, &ckpt.vocab, inst, epoch)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = batch_objective(&ckpt.model, &ckpt.vocab, &ckpt.ontology, &examples, weights, true)?;
        let l = out.losses;
        let grads = match out.grads {
            Some(g) if l.total.is_finite() => g,
            _ => {
                return Err(DstError::Divergence {
                    epoch,
                    step: steps + 1,
                    value: l.total,
                })
            }
        };
        ckpt.optimizer.update(&mut ckpt.model.store, &grads);
        for (s, v) in sums.iter_mut().zip([l.total, l.original, l.noised, l.contrastive]) {
            *s += v;
        }
        steps += 1;
    }
    ckpt.epoch = epoch;
    let n = steps as f64;
    Ok(EpochStats {
        epoch,
        loss: sums[0] / n,
        loss_original: sums[1] / n,
        loss_noised: sums[2] / n,
        loss_contrastive: sums[3] / n,
        val_joint: None,
    })
}

/// Continues training from `ckpt` until `ckpt.config.epochs`, validating after
/// each epoch and keeping the best-validation snapshot. Writes `last/` and
/// `best/` under the configured checkpoint directory, if any.
pub fn resume(
    mut ckpt: Checkpoint,
    train_corpus: &[Dialogue],
    val_corpus: &[Dialogue],
) -> Result<TrainOutcome> {
    let mut best = ckpt.clone();
    let dir = ckpt.config.checkpoint_dir.clone();
    while ckpt.epoch < ckpt.config.epochs {
        let mut stats = run_epoch(&mut ckpt, train_corpus)?;
        if !val_corpus.is_empty() {
            let rollout = rollout_corpus(
                &ckpt.model,
                val_corpus,
                &ckpt.ontology,
                &ckpt.vocab,
                RolloutOptions::default(),
            )?;
            if let Some((id, e)) = rollout.failures.into_iter().next() {
                return Err(DstError::Corpus {
                    dialogue: id,
                    turn: 0,
                    message: format!("validation rollout failed: {e}"),
                });
            }
            stats.val_joint = Some(joint_goal_accuracy(&rollout.records)?);
        }
        ckpt.history.push(stats);
        let improved = match (stats.val_joint, ckpt.best_val_joint) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            if stats.val_joint.is_some() {
                ckpt.best_val_joint = stats.val_joint;
            }
            best = ckpt.clone();
        }
        if let Some(dir) = &dir {
            ckpt.save(dir.join("last"))?;
            if improved {
                best.save(dir.join("best"))?;
            }
        }
    }
    Ok(TrainOutcome { last: ckpt, best })
}
