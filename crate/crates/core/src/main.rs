use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use noised_dst::checkpoint::Checkpoint;
use noised_dst::corpus::{
    corpus_to_json_string, generate_synthetic_corpus, load_corpus, split_corpus, Dialogue,
    SyntheticConfig,
};
use noised_dst::evaluation::{
    attention_export, metrics_report, momentum_analysis, noise_probe, probe_csv,
};
use noised_dst::inference::{
    context_prev_state, load_predictions, rollout_corpus, save_predictions, PredictionRecord,
    RolloutOptions,
};
use noised_dst::ontology::{load_ontology, DialogueState};
use noised_dst::text::build_context_input;
use noised_dst::training::{train, Mode, TrainConfig};

#[derive(Parser)]
#[command(name = "noised-dst", version, about = "Dialogue state tracking with noised previous states")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with an event log and train/val/test splits.
    GenerateCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        n_dialogues: usize,
        #[arg(long, default_value_t = 5)]
        n_slots: usize,
        #[arg(long, default_value_t = 6)]
        values_per_slot: usize,
        #[arg(long, default_value_t = 3)]
        min_turns: usize,
        #[arg(long, default_value_t = 6)]
        max_turns: usize,
        #[arg(long, default_value_t = 0.6)]
        p_new_slot: f64,
        #[arg(long, default_value_t = 0.4)]
        p_change: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Train/val/test fractions.
        #[arg(long, value_delimiter = ',', default_values_t = [0.75, 0.125, 0.125])]
        split: Vec<f64>,
    },
    /// Train a tracker and write checkpoints.
    Train {
        #[command(flatten)]
        data: TrainData,
        #[command(flatten)]
        overrides: TrainOverrides,
        /// Checkpoint directory (overrides the config's).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute metrics from predictions or from a checkpoint rollout.
    Evaluate {
        #[command(flatten)]
        source: PredSource,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write rollout predictions as JSONL.
        #[arg(long)]
        pred_out: Option<PathBuf>,
    },
    /// Oracle-state evaluation with noised previous states.
    ProbeNoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.25, 0.5, 0.75, 1.0])]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Count wrong predicted pairs repeated from the previous turn.
    AnalyzeMomentum {
        #[command(flatten)]
        source: PredSource,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-token attention scores for one slot at one turn.
    VisualizeAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        dialogue: String,
        /// 1-based turn index.
        #[arg(long)]
        turn: usize,
        #[arg(long)]
        slot: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train at each noise threshold and report validation joint accuracy.
    SweepNoiseThreshold {
        #[command(flatten)]
        data: TrainData,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])]
        thresholds: Vec<f64>,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct TrainData {
    /// JSON training config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    ontology: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
}

#[derive(clap::Args)]
struct TrainOverrides {
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    noise_threshold: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    allow_none_noise: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(clap::Args)]
struct PredSource {
    /// JSONL predictions; requires --ontology.
    #[arg(long, conflicts_with_all = ["checkpoint", "corpus"])]
    pred: Option<PathBuf>,
    #[arg(long, requires = "pred")]
    ontology: Option<PathBuf>,
    #[arg(long, requires = "corpus")]
    checkpoint: Option<PathBuf>,
    #[arg(long, requires = "checkpoint")]
    corpus: Option<PathBuf>,
    /// Roll out with gold previous states.
    #[arg(long)]
    oracle_prev_state: bool,
}

fn write_or_print(out: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(data: &TrainData, o: &TrainOverrides) -> anyhow::Result<TrainConfig> {
    let mut c = match &data.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    if let Some(m) = o.mode {
        c.mode = m;
    }
    if let Some(p) = o.noise_threshold {
        c.noise_threshold = p;
    }
    if let Some(t) = o.temperature {
        c.temperature = t;
    }
    if o.allow_none_noise {
        c.allow_none_noise = true;
    }
    if let Some(e) = o.epochs {
        c.epochs = e;
    }
    if let Some(s) = o.seed {
        c.seed = s;
    }
    c.validate()?;
    Ok(c)
}

fn load_data(
    data: &TrainData,
) -> anyhow::Result<(noised_dst::ontology::Ontology, Vec<Dialogue>, Vec<Dialogue>)> {
    let ontology = load_ontology(&data.ontology)?;
    let train = load_corpus(&data.train, &ontology)?;
    let val = match &data.val {
        Some(p) => load_corpus(p, &ontology)?,
        None => Vec::new(),
    };
    Ok((ontology, train, val))
}

fn records(source: &PredSource) -> anyhow::Result<(Vec<PredictionRecord>, bool)> {
    if let Some(pred) = &source.pred {
        let Some(ont) = &source.ontology else {
            bail!("--pred requires --ontology");
        };
        let ontology = load_ontology(ont)?;
        return Ok((load_predictions(pred, &ontology)?, false));
    }
    let (Some(ck), Some(corpus)) = (&source.checkpoint, &source.corpus) else {
        bail!("give either --pred with --ontology, or --checkpoint with --corpus");
    };
    let ckpt = Checkpoint::load(ck)?;
    let dialogues = load_corpus(corpus, &ckpt.ontology)?;
    let rollout = rollout_corpus(
        &ckpt.model,
        &dialogues,
        &ckpt.ontology,
        &ckpt.vocab,
        RolloutOptions {
            oracle_prev_state: source.oracle_prev_state,
        },
    )?;
    for (id, e) in &rollout.failures {
        eprintln!("dialogue {id} skipped: {e}");
    }
    Ok((rollout.records, true))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateCorpus {
            out,
            n_dialogues,
            n_slots,
            values_per_slot,
            min_turns,
            max_turns,
            p_new_slot,
            p_change,
            seed,
            split,
        } => {
            let [a, b, c] = split[..] else {
                bail!("--split needs three fractions");
            };
            let config = SyntheticConfig {
                n_dialogues,
                n_slots,
                values_per_slot,
                min_turns,
                max_turns,
                p_new_slot,
                p_change,
                seed,
            };
            let corpus = generate_synthetic_corpus(&config)?;
            let (train, val, test) = split_corpus(&corpus.dialogues, (a, b, c), seed)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let files = [
                ("ontology.json", corpus.ontology.to_json_string()),
                ("corpus.json", corpus_to_json_string(&corpus.dialogues)),
                ("train.json", corpus_to_json_string(&train)),
                ("val.json", corpus_to_json_string(&val)),
                ("test.json", corpus_to_json_string(&test)),
                ("events.json", serde_json::to_string_pretty(&corpus.events)?),
            ];
            for (name, text) in files {
                let p = out.join(name);
                fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            }
            eprintln!(
                "wrote {} dialogues ({} / {} / {}) to {}",
                corpus.dialogues.len(),
                train.len(),
                val.len(),
                test.len(),
                out.display()
            );
        }
        Command::Train {
            data,
            overrides,
            out,
        } => {
            let mut config = load_config(&data, &overrides)?;
            if out.is_some() {
                config.checkpoint_dir = out;
            }
            let Some(dir) = config.checkpoint_dir.clone() else {
                bail!("no checkpoint directory: pass --out or set checkpoint_dir");
            };
            let (ontology, train_set, val) = load_data(&data)?;
            let outcome = train(&config, &train_set, &val, &ontology)?;
            let history = serde_json::to_string_pretty(&outcome.last.history)?;
            fs::write(dir.join("history.json"), &history)?;
            for h in &outcome.last.history {
                eprintln!(
                    "epoch {:>3}  loss {:.5}  val_joint {}",
                    h.epoch,
                    h.loss,
                    h.val_joint.map_or("-".into(), |v| format!("{v:.4}"))
                );
            }
        }
        Command::Evaluate {
            source,
            out,
            pred_out,
        } => {
            let (recs, from_rollout) = records(&source)?;
            if let Some(p) = pred_out {
                if !from_rollout {
                    bail!("--pred-out needs --checkpoint and --corpus");
                }
                save_predictions(&recs, p)?;
            }
            let report = metrics_report(&recs)?;
            write_or_print(out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        }
        Command::ProbeNoise {
            checkpoint,
            corpus,
            ratios,
            seed,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dialogues = load_corpus(&corpus, &ckpt.ontology)?;
            let rows = noise_probe(&ckpt.model, &dialogues, &ckpt.ontology, &ckpt.vocab, &ratios, seed)?;
            write_or_print(out.as_deref(), &probe_csv(&rows))?;
        }
        Command::AnalyzeMomentum { source, out } => {
            let (recs, _) = records(&source)?;
            let report = momentum_analysis(&recs);
            write_or_print(out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        }
        Command::VisualizeAttention {
            checkpoint,
            corpus,
            dialogue,
            turn,
            slot,
            out,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dialogues = load_corpus(&corpus, &ckpt.ontology)?;
            let Some(d) = dialogues.iter().find(|d| d.id == dialogue) else {
                bail!("dialogue `{dialogue}` not in corpus");
            };
            if turn == 0 || turn > d.turns.len() {
                bail!("turn {turn} out of range 1..={}", d.turns.len());
            }
            let prev = if turn == 1 {
                DialogueState::empty(&ckpt.ontology)
            } else {
                d.turns[turn - 2].gold_state.clone()
            };
            let prev = context_prev_state(&ckpt.model, &prev, &ckpt.ontology);
            let ctx = build_context_input(
                &d.turns[..turn - 1],
                &prev,
                &d.turns[turn - 1],
                &ckpt.vocab,
                ckpt.model.config.encoder.max_len,
            )?;
            let labels = ckpt.model.label_table(&ckpt.vocab, &ckpt.ontology)?;
            let export = attention_export(&ckpt.model, &labels, &ctx, &ckpt.vocab, &ckpt.ontology, &slot)?;
            write_or_print(out.as_deref(), &(serde_json::to_string_pretty(&export)? + "\n"))?;
        }
        Command::SweepNoiseThreshold {
            data,
            overrides,
            thresholds,
            out,
        } => {
            let base = load_config(&data, &overrides)?;
            let (ontology, train_set, val) = load_data(&data)?;
            if val.is_empty() {
                bail!("sweep needs --val");
            }
            let mut csv = String::from("threshold,val_joint_accuracy\n");
            for p in thresholds {
                let config = TrainConfig {
                    noise_threshold: p,
                    checkpoint_dir: None,
                    ..base.clone()
                };
                config.validate()?;
                let outcome = train(&config, &train_set, &val, &ontology)?;
                let acc = outcome.best.best_val_joint.unwrap_or(f64::NAN);
                eprintln!("p = {p}: val joint {acc:.4}");
                csv.push_str(&format!("{p},{acc}\n"));
            }
            write_or_print(out.as_deref(), &csv)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
