//! Pre-norm transformer encoder used for both the context and the labels.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{DstError, Result};
use crate::params::{Mat, ParamGroup, ParamId, ParamStore};
use crate::text::{label_ids, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 128,
            d_ff: 256,
            max_len: 256,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.n_layers, self.n_heads, self.d_model, self.d_ff, self.max_len]
            .contains(&0)
        {
            return Err(DstError::Config("encoder sizes must be >= 1".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(DstError::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(DstError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Query/key/value/output projections of one multi-head attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttentionParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        d: usize,
        std: f64,
        rng: &mut R,
    ) -> Self {
        let mut w = |n: &str, rng: &mut R| {
            store.add_normal(format!("{prefix}.{n}"), group, (d, d), std, rng)
        };
        let wq = w("wq", rng);
        let wk = w("wk", rng);
        let wv = w("wv", rng);
        let wo = w("wo", rng);
        let mut b = |n: &str| store.add_const(format!("{prefix}.{n}"), group, (1, d), 0.0);
        Self {
            wq,
            bq: b("bq"),
            wk,
            bk: b("bk"),
            wv,
            bv: b("bv"),
            wo,
            bo: b("bo"),
        }
    }

    fn ids(&self) -> [ParamId; 8] {
        [
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo,
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub attn: AttentionParams,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Handles into a [`ParamStore`] for one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub trainable: bool,
}

pub const TOKEN_EMB_STD: f64 = 1.0;
pub const POS_EMB_STD: f64 = 0.1;

/// Standard deviation for a weight matrix with `fan_in` inputs.
pub fn weight_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl EncoderParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        config: &EncoderConfig,
        vocab_size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_emb =
            store.add_normal(format!("{prefix}.token_emb"), group, (vocab_size, d), TOKEN_EMB_STD, rng);
        let pos_emb =
            store.add_normal(format!("{prefix}.pos_emb"), group, (config.max_len, d), POS_EMB_STD, rng);
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                let ln1_gain = store.add_const(format!("{p}.ln1_gain"), group, (1, d), 1.0);
                let ln1_bias = store.add_const(format!("{p}.ln1_bias"), group, (1, d), 0.0);
                let attn = AttentionParams::init(store, &format!("{p}.attn"), group, d, weight_std(d), rng);
                let ln2_gain = store.add_const(format!("{p}.ln2_gain"), group, (1, d), 1.0);
                let ln2_bias = store.add_const(format!("{p}.ln2_bias"), group, (1, d), 0.0);
                let w1 = store.add_normal(format!("{p}.w1"), group, (d, config.d_ff), weight_std(d), rng);
                let b1 = store.add_const(format!("{p}.b1"), group, (1, config.d_ff), 0.0);
                let w2 = store.add_normal(format!("{p}.w2"), group, (config.d_ff, d), weight_std(config.d_ff), rng);
                let b2 = store.add_const(format!("{p}.b2"), group, (1, d), 0.0);
                LayerParams {
                    ln1_gain,
                    ln1_bias,
                    attn,
                    ln2_gain,
                    ln2_bias,
                    w1,
                    b1,
                    w2,
                    b2,
                }
            })
            .collect();
        let final_gain = store.add_const(format!("{prefix}.final_gain"), group, (1, d), 1.0);
        let final_bias = store.add_const(format!("{prefix}.final_bias"), group, (1, d), 0.0);
        Ok(Self {
            config: config.clone(),
            vocab_size,
            token_emb,
            pos_emb,
            layers,
            final_gain,
            final_bias,
            trainable: group != ParamGroup::Frozen,
        })
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut out = vec![self.token_emb, self.pos_emb];
        for l in &self.layers {
            out.extend([l.ln1_gain, l.ln1_bias]);
            out.extend(l.attn.ids());
            out.extend([l.ln2_gain, l.ln2_bias, l.w1, l.b1, l.w2, l.b2]);
        }
        out.extend([self.final_gain, self.final_bias]);
        out
    }

    /// Deep copy into fresh store entries under `group`.
    pub fn duplicate(&self, store: &mut ParamStore, prefix: &str, group: ParamGroup) -> Self {
        let mut map = HashMap::new();
        for id in self.ids() {
            let e = store.entry(id).clone();
            let suffix = e.name.split_once('.').map(|(_, s)| s).unwrap_or(&e.name);
            let new = store.add(format!("{prefix}.{suffix}"), group, e.value);
            map.insert(id, new);
        }
        let m = |id: &ParamId| map[id];
        let attn = |a: &AttentionParams| AttentionParams {
            wq: m(&a.wq),
            bq: m(&a.bq),
            wk: m(&a.wk),
            bk: m(&a.bk),
            wv: m(&a.wv),
            bv: m(&a.bv),
            wo: m(&a.wo),
            bo: m(&a.bo),
        };
        Self {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            token_emb: m(&self.token_emb),
            pos_emb: m(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: m(&l.ln1_gain),
                    ln1_bias: m(&l.ln1_bias),
                    attn: attn(&l.attn),
                    ln2_gain: m(&l.ln2_gain),
                    ln2_bias: m(&l.ln2_bias),
                    w1: m(&l.w1),
                    b1: m(&l.b1),
                    w2: m(&l.w2),
                    b2: m(&l.b2),
                })
                .collect(),
            final_gain: m(&self.final_gain),
            final_bias: m(&self.final_bias),
            trainable: group != ParamGroup::Frozen,
        }
    }
}

/// Multi-head attention of `query` rows over `kv` rows. Returns the projected
/// output and the per-head attention weights (`|q| × |kv|` each).
pub fn multi_head_attention(
    tape: &mut Tape,
    p: &AttentionParams,
    n_heads: usize,
    query: Var,
    kv: Var,
) -> (Var, Vec<Var>) {
    let d = tape.value(query).ncols();
    let dk = d / n_heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let (wq, bq, wk, bk, wv, bv, wo, bo) = (
        tape.param(p.wq),
        tape.param(p.bq),
        tape.param(p.wk),
        tape.param(p.bk),
        tape.param(p.wv),
        tape.param(p.bv),
        tape.param(p.wo),
        tape.param(p.bo),
    );
    let q = tape.matmul(query, wq);
    let q = tape.add_row(q, bq);
    let k = tape.matmul(kv, wk);
    let k = tape.add_row(k, bk);
    let v = tape.matmul(kv, wv);
    let v = tape.add_row(v, bv);
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dk, dk),
                tape.slice_cols(k, h * dk, dk),
                tape.slice_cols(v, h * dk, dk),
            )
        };
        let scores = tape.matmul_nt(qh, kh);
        let scores = tape.scale(scores, scale);
        let w = tape.softmax_rows(scores);
        heads.push(tape.matmul(w, vh));
        weights.push(w);
    }
    let cat = if n_heads == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)
    };
    let out = tape.matmul(cat, wo);
    (tape.add_row(out, bo), weights)
}

pub struct EncoderOutput {
    /// `|X| × d` token representations.
    pub hidden: Var,
    /// Self-attention weights indexed `[layer][head]`.
    pub attention: Vec<Vec<Var>>,
}

fn dropout<R: Rng>(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut R>) -> Var {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 - rate;
            let shape = tape.value(x).raw_dim();
            let mask = Mat::from_shape_simple_fn((shape[0], shape[1]), || {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            tape.mul_const(x, mask)
        }
        _ => x,
    }
}

/// Runs the encoder over `ids`. Dropout is applied only when `rng` is given.
pub fn encode_sequence<R: Rng>(
    tape: &mut Tape,
    params: &EncoderParams,
    ids: &[usize],
    mut rng: Option<&mut R>,
) -> Result<EncoderOutput> {
    let cfg = &params.config;
    if ids.is_empty() || ids.len() > cfg.max_len {
        return Err(DstError::Shape(format!(
            "sequence length {} outside 1..={}",
            ids.len(),
            cfg.max_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= params.vocab_size) {
        return Err(DstError::Shape(format!("token id {bad} outside vocabulary")));
    }
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = tape.param(params.token_emb);
    let pos = tape.param(params.pos_emb);
    let te = tape.gather(tok, ids);
    let pe = tape.gather(pos, &positions);
    let mut x = tape.add(te, pe);
    x = dropout(tape, x, cfg.dropout, rng.as_deref_mut());

    let mut attention = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let g1 = tape.param(layer.ln1_gain);
        let b1 = tape.param(layer.ln1_bias);
        let h = tape.layer_norm(x, g1, b1);
        let (a, w) = multi_head_attention(tape, &layer.attn, cfg.n_heads, h, h);
        let a = dropout(tape, a, cfg.dropout, rng.as_deref_mut());
        x = tape.add(x, a);
        attention.push(w);

        let g2 = tape.param(layer.ln2_gain);
        let b2 = tape.param(layer.ln2_bias);
        let h = tape.layer_norm(x, g2, b2);
        let w1 = tape.param(layer.w1);
        let fb1 = tape.param(layer.b1);
        let w2 = tape.param(layer.w2);
        let fb2 = tape.param(layer.b2);
        let f = tape.matmul(h, w1);
        let f = tape.add_row(f, fb1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, fb2);
        let f = dropout(tape, f, cfg.dropout, rng.as_deref_mut());
        x = tape.add(x, f);
    }
    let gf = tape.param(params.final_gain);
    let bf = tape.param(params.final_bias);
    let hidden = tape.layer_norm(x, gf, bf);
    Ok(EncoderOutput { hidden, attention })
}

/// Evaluation-mode encoding without gradient bookkeeping for the caller.
pub fn encode_matrix(store: &ParamStore, params: &EncoderParams, ids: &[usize]) -> Result<Mat> {
    let mut tape = Tape::new(store);
    let out = encode_sequence::<rand_chacha::ChaCha8Rng>(&mut tape, params, ids, None)?;
    Ok(tape.value(out.hidden).clone())
}

/// Memoizes label encodings by text. Only valid for frozen parameters.
#[derive(Debug, Default)]
pub struct LabelCache {
    map: Mutex<HashMap<String, Mat>>,
    hits: AtomicUsize,
}

impl LabelCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn len(&self) -> usize {
        self.map.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Clone for LabelCache {
    fn clone(&self) -> Self {
        Self {
            map: Mutex::new(self.map.lock().expect("cache lock").clone()),
            hits: AtomicUsize::new(self.hits()),
        }
    }
}

/// `[CLS]` row of encoding `[CLS] text [SEP]` with frozen parameters, as a
/// `1 × d` matrix.
pub fn encode_label(
    store: &ParamStore,
    params: &EncoderParams,
    vocab: &Vocabulary,
    text: &str,
    cache: &LabelCache,
) -> Result<Mat> {
    if params.trainable {
        return Err(DstError::Config(
            "label encodings are cached only for frozen parameters".into(),
        ));
    }
    if let Some(hit) = cache.map.lock().expect("cache lock").get(text) {
        cache.hits.fetch_add(1, Ordering::Relaxed);
        return Ok(hit.clone());
    }
    let h = encode_matrix(store, params, &label_ids(text, vocab))?;
    let cls = h.row(0).to_owned().insert_axis(ndarray::Axis(0));
    cache
        .map
        .lock()
        .expect("cache lock")
        .insert(text.to_string(), cls.clone());
    Ok(cls)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::Ontology;
    use crate::text::build_vocab;
    use ndarray::Axis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(d: usize, heads: usize, layers: usize, vocab: usize) -> (ParamStore, EncoderParams) {
        let cfg = EncoderConfig {
            n_layers: layers,
            n_heads: heads,
            d_model: d,
            d_ff: 2 * d,
            max_len: 16,
            dropout: 0.0,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = EncoderParams::init(&mut store, "enc", ParamGroup::Encoder, &cfg, vocab, &mut rng)
            .unwrap();
        // Larger weights than the default init so every path matters.
        for e in store.entries_mut() {
            if !e.name.contains("gain") {
                e.value.mapv_inplace(|v| v * 25.0 + 0.01);
            }
        }
        (store, p)
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            d_model: 10,
            n_heads: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            n_layers: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shape_and_determinism() {
        let (store, p) = tiny(8, 2, 2, 10);
        let a = encode_matrix(&store, &p, &[2, 5, 7, 3]).unwrap();
        let b = encode_matrix(&store, &p, &[2, 5, 7, 3]).unwrap();
        assert_eq!(a.dim(), (4, 8));
        assert_eq!(a, b);
    }

    #[test]
    fn length_and_id_errors() {
        let (store, p) = tiny(8, 2, 1, 10);
        assert!(encode_matrix(&store, &p, &[1; 17]).is_err());
        assert!(encode_matrix(&store, &p, &[]).is_err());
        assert!(encode_matrix(&store, &p, &[11]).is_err());
    }

    #[test]
    fn swapping_tokens_changes_output() {
        let (store, p) = tiny(8, 2, 1, 10);
        let a = encode_matrix(&store, &p, &[2, 5, 7]).unwrap();
        let b = encode_matrix(&store, &p, &[2, 7, 5]).unwrap();
        assert!(a.iter().zip(b.iter()).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    fn ln(x: &Mat, g: &Mat, b: &Mat) -> Mat {
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let m = row.mean().unwrap();
            let v = row.mapv(|e| (e - m) * (e - m)).mean().unwrap();
            row.mapv_inplace(|e| (e - m) / (v + 1e-5).sqrt());
        }
        out * g + b
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x.powi(3))).tanh())
    }

    /// Hand-rolled single-layer forward pass with plain ndarray arithmetic.
    #[test]
    fn matches_manual_forward_pass() {
        let (store, p) = tiny(4, 1, 1, 6);
        let ids = [3usize, 1];
        let g = |id: ParamId| store.get(id).clone();
        let l = &p.layers[0];
        let emb = g(p.token_emb);
        let pos = g(p.pos_emb);
        let mut x = Mat::zeros((2, 4));
        for (r, &id) in ids.iter().enumerate() {
            let row = &emb.row(id) + &pos.row(r);
            x.row_mut(r).assign(&row);
        }
        let h = ln(&x, &g(l.ln1_gain), &g(l.ln1_bias));
        let q = h.dot(&g(l.attn.wq)) + g(l.attn.bq);
        let k = h.dot(&g(l.attn.wk)) + g(l.attn.bk);
        let v = h.dot(&g(l.attn.wv)) + g(l.attn.bv);
        let mut s = q.dot(&k.t()) / 2.0;
        for mut row in s.rows_mut() {
            let m = row.fold(f64::MIN, |a, &b| a.max(b));
            row.mapv_inplace(|e| (e - m).exp());
            let z = row.sum();
            row.mapv_inplace(|e| e / z);
        }
        let a = s.dot(&v).dot(&g(l.attn.wo)) + g(l.attn.bo);
        let x = x + a;
        let h = ln(&x, &g(l.ln2_gain), &g(l.ln2_bias));
        let f = (h.dot(&g(l.w1)) + g(l.b1)).mapv(gelu).dot(&g(l.w2)) + g(l.b2);
        let x = x + f;
        let expected = ln(&x, &g(p.final_gain), &g(p.final_bias));

        let got = encode_matrix(&store, &p, &ids).unwrap();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (store, p) = tiny(8, 2, 2, 10);
        let mut tape = Tape::new(&store);
        let out = encode_sequence::<ChaCha8Rng>(&mut tape, &p, &[2, 4, 6, 3], None).unwrap();
        for layer in &out.attention {
            for &w in layer {
                for row in tape.value(w).rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-12);
                    assert!(row.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn dropout_only_with_rng() {
        let (store, mut p) = tiny(8, 2, 1, 10);
        p.config.dropout = 0.5;
        let eval = encode_matrix(&store, &p, &[2, 4, 6]).unwrap();
        let mut tape = Tape::new(&store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = encode_sequence(&mut tape, &p, &[2, 4, 6], Some(&mut rng)).unwrap();
        assert_ne!(tape.value(out.hidden), &eval);
        assert_eq!(encode_matrix(&store, &p, &[2, 4, 6]).unwrap(), eval);
    }

    #[test]
    fn label_cache_and_shapes() {
        let o = Ontology::new(vec![("train-day", vec!["sunday", "monday"])]).unwrap();
        let vocab = build_vocab(&[], &o);
        let cfg = EncoderConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_len: 32,
            dropout: 0.1,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ctx = EncoderParams::init(&mut store, "ctx", ParamGroup::Encoder, &cfg, vocab.len(), &mut rng)
            .unwrap();
        let frozen = ctx.duplicate(&mut store, "label", ParamGroup::Frozen);
        assert!(!frozen.trainable);
        for (a, b) in ctx.ids().into_iter().zip(frozen.ids()) {
            assert_eq!(store.get(a), store.get(b));
            assert_ne!(a, b);
        }
        let cache = LabelCache::new();
        assert!(encode_label(&store, &ctx, &vocab, "sunday", &cache).is_err());
        let a = encode_label(&store, &frozen, &vocab, "sunday", &cache).unwrap();
        assert_eq!(cache.hits(), 0);
        let b = encode_label(&store, &frozen, &vocab, "sunday", &cache).unwrap();
        assert_eq!(cache.hits(), 1);
        assert_eq!(a, b);
        assert_eq!(a.dim(), (1, 16));
        let slot = encode_label(&store, &frozen, &vocab, "train-day", &cache).unwrap();
        assert_eq!(slot.len_of(Axis(1)), 16);
        let m = encode_label(&store, &frozen, &vocab, "monday", &cache).unwrap();
        let dist: f64 = (&a - &m).mapv(|v| v * v).sum().sqrt();
        assert!(dist > 1e-6, "distinct values collapsed: {dist}");
    }
}
