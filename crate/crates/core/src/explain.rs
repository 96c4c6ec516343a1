//! Explanation heads: the fused cause classifier, the non-fusion baselines
//! and the attention-LSTM sentence generator.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{Fusion, FusionConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::kernels;
use crate::tensor::{Element, Tensor};

/// Per-frame cause label. Index 0 is the background class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cause {
    None,
    RedLight,
    StopSign,
    CrossingPedestrian,
    Congestion,
    ParkedVehicle,
    CrossingVehicle,
}

impl Cause {
    pub const ALL: [Cause; 7] = [
        Cause::None,
        Cause::RedLight,
        Cause::StopSign,
        Cause::CrossingPedestrian,
        Cause::Congestion,
        Cause::ParkedVehicle,
        Cause::CrossingVehicle,
    ];

    /// Causes whose expert behaviour is the same full stop.
    pub const STOPS: [Cause; 4] = [
        Cause::RedLight,
        Cause::StopSign,
        Cause::CrossingPedestrian,
        Cause::Congestion,
    ];

    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Cause> {
        Cause::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::domain("cause", format!("unknown cause index {i}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Cause::None => "none",
            Cause::RedLight => "red_light",
            Cause::StopSign => "stop_sign",
            Cause::CrossingPedestrian => "crossing_pedestrian",
            Cause::Congestion => "congestion",
            Cause::ParkedVehicle => "parked_vehicle",
            Cause::CrossingVehicle => "crossing_vehicle",
        }
    }

    pub fn is_stop(self) -> bool {
        Cause::STOPS.contains(&self)
    }
}

impl fmt::Display for Cause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Cause {
    type Err = Error;

    fn from_str(s: &str) -> Result<Cause> {
        Cause::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::domain("cause", format!("unknown cause `{s}`")))
    }
}

/// Softmax of the fused logits. Returns `(logits, probabilities)`.
pub fn classify_cause<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    fusion: &Fusion,
    decision: Var,
    perceptual: Var,
) -> Result<(Var, Var)> {
    let logits = fusion.forward(tape, store, decision, perceptual)?;
    let p = tape.softmax(logits, 1.0)?;
    Ok((logits, p))
}

pub const LOG_FLOOR: f64 = 1e-12;

/// `-(1/T) sum_t log p_t[c]`. Probabilities below [`LOG_FLOOR`] are clamped;
/// the flag reports whether that happened.
pub fn explain_loss<T: Element>(tape: &mut Tape<T>, probs: &[Var], cause: usize) -> Result<(Var, bool)> {
    if probs.is_empty() {
        return Err(Error::domain("explain_loss", "empty probability sequence"));
    }
    let mut terms = Vec::with_capacity(probs.len());
    let mut clamped = false;
    for &p in probs {
        if cause >= tape.value(p).numel() {
            return Err(Error::domain(
                "explain_loss",
                format!("cause {cause} outside {} classes", tape.value(p).numel()),
            ));
        }
        let pc = tape.index(p, cause)?;
        let (lg, c) = tape.clamped_log(pc, LOG_FLOOR)?;
        clamped |= c;
        terms.push(lg);
    }
    let all = tape.concat(&terms)?;
    let mean = tape.mean(all)?;
    Ok((tape.scale(mean, -1.0)?, clamped))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineVariant {
    /// Linear head on the clip representation.
    LastLayer,
    /// Linear head on the clip representation and the goal embedding.
    LastLayerPlusBlinker,
    /// Two-layer perceptron on pooled layer-3 features.
    Layer3Mlp,
    /// Two-layer perceptron on the decision vector alone.
    DecisionMlp,
}

impl BaselineVariant {
    pub fn name(self) -> &'static str {
        match self {
            BaselineVariant::LastLayer => "last_layer",
            BaselineVariant::LastLayerPlusBlinker => "last_layer_plus_blinker",
            BaselineVariant::Layer3Mlp => "layer3_mlp",
            BaselineVariant::DecisionMlp => "decision_mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub variant: BaselineVariant,
    pub input: usize,
    pub classes: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaselineHead {
    config: BaselineConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl BaselineHead {
    pub fn new<T: Element>(config: BaselineConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        if config.input == 0 || config.classes == 0 || config.hidden == 0 {
            return Err(Error::config("baseline", "sizes must be at least 1"));
        }
        let (i, h, c) = (config.input, config.hidden, config.classes);
        let mut layer = |name: &str, rows: usize, cols: usize, rng: &mut _| {
            (
                store.add_xavier(format!("baseline.{name}.weight"), &[rows, cols], cols, rows, rng),
                store.add_zeros(format!("baseline.{name}.bias"), &[rows]),
            )
        };
        let layers = match config.variant {
            BaselineVariant::LastLayer | BaselineVariant::LastLayerPlusBlinker => vec![layer("out", c, i, rng)],
            BaselineVariant::Layer3Mlp | BaselineVariant::DecisionMlp => {
                vec![layer("hidden", h, i, rng), layer("out", c, h, rng)]
            }
        };
        Ok(BaselineHead { config, layers })
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.config
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    /// Logits from the variant's input features.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: Var) -> Result<Var> {
        if tape.shape(features) != [self.config.input] {
            return Err(Error::shape("baseline_multihead", &[self.config.input], tape.shape(features)));
        }
        let mut x = features;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (tape.param(store, w), tape.param(store, b));
            x = tape.linear(x, w, Some(b))?;
            if k + 1 < self.layers.len() {
                x = tape.relu(x)?;
            }
        }
        Ok(x)
    }
}

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];
pub const MAX_WORDS: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    /// Reserved ids followed by the sorted distinct words of `sentences`.
    pub fn build<S: AsRef<str>>(sentences: &[S]) -> Self {
        let mut words: Vec<String> = sentences
            .iter()
            .flat_map(|s| s.as_ref().split_whitespace().map(str::to_owned).collect::<Vec<_>>())
            .collect();
        words.sort();
        words.dedup();
        Self::from_tokens(RESERVED.iter().map(|s| s.to_string()).chain(words).collect())
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= RESERVED.len()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK], String::as_str)
    }

    /// Word ids followed by `EOS`. Sentences over [`MAX_WORDS`] words are
    /// rejected.
    pub fn encode(&self, sentence: &str) -> Result<Vec<usize>> {
        let mut ids: Vec<usize> = sentence.split_whitespace().map(|w| self.id(w)).collect();
        if ids.len() > MAX_WORDS {
            return Err(Error::domain(
                "vocabulary",
                format!("sentence has {} words, limit is {MAX_WORDS}", ids.len()),
            ));
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// Words up to the first `EOS`, skipping `PAD` and `BOS`.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_owned())
            .collect()
    }

    /// One token per line, reserved tokens first.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Format("vocabulary header must list <pad> <bos> <eos> <unk>".into()));
        }
        Ok(Self::from_tokens(tokens))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum DecodeConfig {
    Greedy { max_len: usize },
    Temperature { temperature: f64, seed: u64, max_len: usize },
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig::Greedy { max_len: MAX_WORDS }
    }

    /// A temperature of exactly 0 selects greedy decoding.
    pub fn with_temperature(temperature: f64, seed: u64) -> Result<Self> {
        if temperature == 0.0 {
            return Ok(Self::greedy());
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::domain(
                "generate_explanation",
                format!("invalid temperature {temperature}"),
            ));
        }
        Ok(DecodeConfig::Temperature {
            temperature,
            seed,
            max_len: MAX_WORDS,
        })
    }

    pub fn max_len(&self) -> usize {
        match *self {
            DecodeConfig::Greedy { max_len } | DecodeConfig::Temperature { max_len, .. } => max_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageConfig {
    /// Fusion of per-frame decision and perceptual features; its output
    /// size is the width of the attended vectors.
    pub fusion: FusionConfig,
    pub hidden: usize,
    pub embed: usize,
    pub attention: usize,
    pub vocab_size: usize,
}

impl LanguageConfig {
    pub fn validate(&self) -> Result<()> {
        self.fusion.validate()?;
        for (f, v) in [
            ("language.hidden", self.hidden),
            ("language.embed", self.embed),
            ("language.attention", self.attention),
        ] {
            if v == 0 {
                return Err(Error::config(f, "must be at least 1"));
            }
        }
        if self.vocab_size <= RESERVED.len() {
            return Err(Error::config("language.vocab_size", "vocabulary has no words"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LstmParams {
    weight: ParamId,
    bias: ParamId,
}

/// Attention-LSTM sentence generator over fused per-frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageHead {
    config: LanguageConfig,
    fusion: Fusion,
    att_key: ParamId,
    att_query: ParamId,
    att_score: ParamId,
    lstm: LstmParams,
    embedding: ParamId,
    out_w: ParamId,
    out_b: ParamId,
}

/// A generated sentence with the attention weights of every step.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub tokens: Vec<usize>,
    pub attention: Vec<Vec<f64>>,
}

struct Memory {
    fused: Vec<Var>,
    keys: Vec<Var>,
}

impl LanguageHead {
    pub fn new<T: Element>(config: LanguageConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let fusion = Fusion::new(config.fusion.clone(), store, "language.fusion", rng)?;
        let (f, h, e, a, v) = (
            config.fusion.dim_out,
            config.hidden,
            config.embed,
            config.attention,
            config.vocab_size,
        );
        let lstm_in = f + e + h;
        let bias = {
            // forget gate starts open
            let mut b = Tensor::zeros(&[4 * h]);
            b.data_mut()[h..2 * h].iter_mut().for_each(|x| *x = T::one());
            b
        };
        Ok(LanguageHead {
            att_key: store.add_xavier("language.attention.key", &[a, f], f, a, rng),
            att_query: store.add_xavier("language.attention.query", &[a, h], h, a, rng),
            att_score: store.add_xavier("language.attention.score", &[1, a], a, 1, rng),
            lstm: LstmParams {
                weight: store.add_xavier("language.lstm.weight", &[4 * h, lstm_in], lstm_in, 4 * h, rng),
                bias: store.add("language.lstm.bias", bias),
            },
            embedding: store.add_xavier("language.embedding", &[v, e], v, e, rng),
            out_w: store.add_xavier("language.out.weight", &[v, h], h, v, rng),
            out_b: store.add_zeros("language.out.bias", &[v]),
            fusion,
            config,
        })
    }

    pub fn config(&self) -> &LanguageConfig {
        &self.config
    }

    pub fn output_bias(&self) -> ParamId {
        self.out_b
    }

    fn memory<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        frames: &[(Var, Var)],
    ) -> Result<Memory> {
        if frames.is_empty() {
            return Err(Error::domain("generate_explanation", "empty feature sequence"));
        }
        let wk = tape.param(store, self.att_key);
        let mut fused = Vec::with_capacity(frames.len());
        let mut keys = Vec::with_capacity(frames.len());
        for &(d, p) in frames {
            let f = self.fusion.forward(tape, store, d, p)?;
            keys.push(tape.linear(f, wk, None)?);
            fused.push(f);
        }
        Ok(Memory { fused, keys })
    }

    /// Additive attention: `e_i = w . tanh(K f_i + Q h)`, softmax over frames,
    /// context `sum_i a_i f_i`. Returns `(context, weights)`.
    fn attend<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, mem: &Memory, h: Var) -> Result<(Var, Var)> {
        let wq = tape.param(store, self.att_query);
        let ws = tape.param(store, self.att_score);
        let q = tape.linear(h, wq, None)?;
        let mut scores = Vec::with_capacity(mem.keys.len());
        for &k in &mem.keys {
            let s = tape.add(k, q)?;
            let s = tape.tanh(s)?;
            scores.push(tape.linear(s, ws, None)?);
        }
        let scores = tape.concat(&scores)?;
        let alpha = tape.softmax(scores, 1.0)?;
        let mut ctx: Option<Var> = None;
        for (i, &f) in mem.fused.iter().enumerate() {
            let a = tape.index(alpha, i)?;
            let term = tape.mul_scalar(f, a)?;
            ctx = Some(match ctx {
                Some(c) => tape.add(c, term)?,
                None => term,
            });
        }
        Ok((ctx.expect("non-empty memory"), alpha))
    }

    /// One attention + LSTM step; returns `(logits, h, c, attention)`.
    fn step<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        mem: &Memory,
        prev: usize,
        h: Var,
        c: Var,
    ) -> Result<(Var, Var, Var, Var)> {
        let hs = self.config.hidden;
        let (ctx, alpha) = self.attend(tape, store, mem, h)?;
        let table = tape.param(store, self.embedding);
        let emb = tape.gather(table, prev)?;
        let x = tape.concat(&[ctx, emb, h])?;
        let w = tape.param(store, self.lstm.weight);
        let b = tape.param(store, self.lstm.bias);
        let gates = tape.linear(x, w, Some(b))?;
        let gate = |tape: &mut Tape<T>, k: usize| tape.slice(gates, k * hs, hs);
        let i = gate(tape, 0)?;
        let i = tape.sigmoid(i)?;
        let f = gate(tape, 1)?;
        let f = tape.sigmoid(f)?;
        let g = gate(tape, 2)?;
        let g = tape.tanh(g)?;
        let o = gate(tape, 3)?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        let c2 = tape.add(fc, ig)?;
        let tc = tape.tanh(c2)?;
        let h2 = tape.mul(o, tc)?;
        let ow = tape.param(store, self.out_w);
        let ob = tape.param(store, self.out_b);
        let logits = tape.linear(h2, ow, Some(ob))?;
        Ok((logits, h2, c2, alpha))
    }

    fn initial_state<T: Element>(&self, tape: &mut Tape<T>) -> Result<(Var, Var)> {
        let h = tape.input(Tensor::zeros(&[self.config.hidden]))?;
        let c = tape.input(Tensor::zeros(&[self.config.hidden]))?;
        Ok((h, c))
    }

    /// Teacher-forced mean token cross-entropy of `target` (ids ending in
    /// `EOS`) given `(decision, perceptual)` features per frame.
    pub fn sequence_loss<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        frames: &[(Var, Var)],
        target: &[usize],
    ) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::domain("sequence_loss", "empty target"));
        }
        let mem = self.memory(tape, store, frames)?;
        let (mut h, mut c) = self.initial_state(tape)?;
        let mut prev = BOS;
        let mut terms = Vec::with_capacity(target.len());
        for &tok in target {
            if tok >= self.config.vocab_size {
                return Err(Error::domain("sequence_loss", format!("token {tok} outside vocabulary")));
            }
            let (logits, h2, c2, _) = self.step(tape, store, &mem, prev, h, c)?;
            let lp = tape.log_softmax(logits)?;
            terms.push(tape.index(lp, tok)?);
            (h, c, prev) = (h2, c2, tok);
        }
        let all = tape.concat(&terms)?;
        let mean = tape.mean(all)?;
        tape.scale(mean, -1.0)
    }

    /// Decodes one sentence, stopping at `EOS` or after `max_len` words.
    pub fn generate<T: Element>(
        &self,
        store: &ParamStore<T>,
        frames: &[(Tensor<T>, Tensor<T>)],
        cfg: &DecodeConfig,
    ) -> Result<Generated> {
        let mut tape = Tape::new();
        let vars = frames
            .iter()
            .map(|(d, p)| Ok((tape.input(d.clone())?, tape.input(p.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        let mem = self.memory(&mut tape, store, &vars)?;
        let (mut h, mut c) = self.initial_state(&mut tape)?;
        let mut rng = match *cfg {
            DecodeConfig::Temperature { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
            DecodeConfig::Greedy { .. } => None,
        };
        let mut out = Generated {
            tokens: Vec::new(),
            attention: Vec::new(),
        };
        let mut prev = BOS;
        for _ in 0..cfg.max_len() {
            let (logits, h2, c2, alpha) = self.step(&mut tape, store, &mem, prev, h, c)?;
            out.attention.push(tape.value(alpha).to_f64_vec());
            let tok = match (*cfg, rng.as_mut()) {
                (DecodeConfig::Temperature { temperature, .. }, Some(rng)) => {
                    let p = kernels::softmax(tape.value(logits), temperature)?;
                    sample(&p.to_f64_vec(), rng)
                }
                _ => kernels::argmax(tape.value(logits).data()),
            };
            if tok == EOS {
                break;
            }
            out.tokens.push(tok);
            (h, c, prev) = (h2, c2, tok);
        }
        Ok(out)
    }
}

/// Inverse-CDF draw from a probability vector.
fn sample(p: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::FusionKind;

    fn small_lang(vocab: usize, rng: &mut ChaCha8Rng, store: &mut ParamStore<f64>) -> LanguageHead {
        let cfg = LanguageConfig {
            fusion: FusionConfig {
                kind: FusionKind::Block,
                dim_m: 3,
                dim_v: 2,
                dim_out: 4,
                proj_dim: 4,
                block_count: 2,
                rank: 1,
                hidden: 1,
            },
            hidden: 5,
            embed: 3,
            attention: 4,
            vocab_size: vocab,
        };
        LanguageHead::new(cfg, store, rng).unwrap()
    }

    fn frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<(Tensor<f64>, Tensor<f64>)> {
        (0..n)
            .map(|_| {
                (
                    Tensor::vector((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()),
                    Tensor::vector((0..2).map(|_| rng.random_range(-1.0..1.0)).collect()),
                )
            })
            .collect()
    }

    #[test]
    fn zero_fusion_gives_uniform_causes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cfg = FusionConfig::block(26, 8, 7).with_kind(FusionKind::Bilinear);
        let fusion = Fusion::new(cfg, &mut store, "fusion", &mut rng).unwrap();
        let core = fusion.param_ids()[0];
        store.set_value(core, Tensor::zeros(&[26, 8, 7])).unwrap();
        let mut tape = Tape::new();
        let m = tape.input(Tensor::full(&[26], 0.3)).unwrap();
        let v = tape.input(Tensor::full(&[8], -1.0)).unwrap();
        let (_, p) = classify_cause(&mut tape, &store, &fusion, m, v).unwrap();
        for &x in tape.value(p).data() {
            assert!((x - 1.0 / 7.0).abs() < 1e-12);
        }
    }

    #[test]
    fn six_causes_besides_background() {
        let names: Vec<_> = Cause::ALL[1..].iter().map(|c| c.name()).collect();
        assert_eq!(names.len(), 6);
        for n in ["congestion", "stop_sign", "red_light", "crossing_vehicle", "parked_vehicle", "crossing_pedestrian"] {
            assert!(names.contains(&n), "{n}");
        }
        assert_eq!("congestion".parse::<Cause>().unwrap(), Cause::Congestion);
    }

    #[test]
    fn closed_form_softmax_probabilities() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(Tensor::vector(vec![0.0, 3f64.ln(), 0.0, 0.0, 0.0, 0.0])).unwrap();
        let p = tape.softmax(x, 1.0).unwrap();
        let p = tape.value(p).data().to_vec();
        assert!((p[1] - 0.375).abs() < 1e-12);
        for (i, &v) in p.iter().enumerate() {
            if i != 1 {
                assert!((v - 0.125).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn explain_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let certain = tape.input(Tensor::vector(vec![0.0, 1.0, 0.0])).unwrap();
        let (l, clamped) = explain_loss(&mut tape, &[certain, certain], 1).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        assert!(!clamped);

        let uniform = tape.input(Tensor::full(&[6], 1.0 / 6.0)).unwrap();
        let (l, _) = explain_loss(&mut tape, &[uniform], 3).unwrap();
        assert!((tape.value(l).item() - 6f64.ln()).abs() < 1e-12);
        assert!((6f64.ln() - 1.7918).abs() < 1e-4);

        let a = [0.2, 0.5, 0.3];
        let b = [0.6, 0.1, 0.3];
        let (va, vb) = (
            tape.input(Tensor::vector(a.to_vec())).unwrap(),
            tape.input(Tensor::vector(b.to_vec())).unwrap(),
        );
        let (l, _) = explain_loss(&mut tape, &[va, vb], 0).unwrap();
        let oracle = -(a[0].ln() + b[0].ln()) / 2.0;
        assert!((tape.value(l).item() - oracle).abs() < 1e-12);

        let zero = tape.input(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let (l, clamped) = explain_loss(&mut tape, &[zero], 1).unwrap();
        assert!(clamped);
        assert!((tape.value(l).item() - 1e12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn baselines_zero_weights_are_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for variant in [
            BaselineVariant::LastLayer,
            BaselineVariant::LastLayerPlusBlinker,
            BaselineVariant::Layer3Mlp,
            BaselineVariant::DecisionMlp,
        ] {
            let mut store = ParamStore::<f64>::new();
            let cfg = BaselineConfig {
                variant,
                input: 5,
                classes: 7,
                hidden: 128,
            };
            let head = BaselineHead::new(cfg, &mut store, &mut rng).unwrap();
            for id in head.param_ids() {
                let s = store.value(id).shape().to_vec();
                store.set_value(id, Tensor::zeros(&s)).unwrap();
            }
            let mut tape = Tape::new();
            let x = tape.input(Tensor::full(&[5], 2.0)).unwrap();
            let logits = head.forward(&mut tape, &store, x).unwrap();
            let p = tape.softmax(logits, 1.0).unwrap();
            assert!(tape.value(p).data().iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-12));
            let wrong = tape.input(Tensor::full(&[6], 2.0)).unwrap();
            assert!(head.forward(&mut tape, &store, wrong).is_err());
        }
    }

    #[test]
    fn layer3_mlp_has_two_layers_of_width_128() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let cfg = BaselineConfig {
            variant: BaselineVariant::Layer3Mlp,
            input: 24,
            classes: 7,
            hidden: 128,
        };
        BaselineHead::new(cfg, &mut store, &mut rng).unwrap();
        assert_eq!(store.len(), 4);
        assert_eq!(store.count("baseline."), 24 * 128 + 128 + 128 * 7 + 7);
    }

    #[test]
    fn vocabulary_round_trips() {
        let v = Vocabulary::build(&["the light is red", "the sign"]);
        assert_eq!(v.len(), 4 + 5);
        let ids = v.encode("the light is blue").unwrap();
        assert_eq!(*ids.last().unwrap(), EOS);
        assert_eq!(ids[3], UNK);
        assert_eq!(v.decode(&ids), vec!["the", "light", "is", "<unk>"]);
        let text = v.to_text();
        assert!(text.starts_with("<pad>\n<bos>\n<eos>\n<unk>\n"));
        assert_eq!(Vocabulary::from_text(&text).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
        let long = vec!["the"; 21].join(" ");
        assert!(v.encode(&long).is_err());
    }

    #[test]
    fn eos_biased_head_gives_empty_sentence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let head = small_lang(5, &mut rng, &mut store);
        let mut bias = Tensor::zeros(&[5]);
        bias.data_mut()[EOS] = 100.0;
        store.set_value(head.output_bias(), bias).unwrap();
        let out = head.generate(&store, &frames(&mut rng, 3), &DecodeConfig::greedy()).unwrap();
        assert!(out.tokens.is_empty());
    }

    #[test]
    fn near_zero_temperature_equals_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let head = small_lang(9, &mut rng, &mut store);
        let bias = Tensor::vector(vec![0.0, 0.0, -3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        store.set_value(head.output_bias(), bias).unwrap();
        let fr = frames(&mut rng, 4);
        let greedy = head.generate(&store, &fr, &DecodeConfig::greedy()).unwrap();
        let cold = head
            .generate(&store, &fr, &DecodeConfig::with_temperature(1e-9, 99).unwrap())
            .unwrap();
        assert_eq!(greedy.tokens, cold.tokens);
        assert!(DecodeConfig::with_temperature(-1.0, 0).is_err());
        assert_eq!(DecodeConfig::with_temperature(0.0, 5).unwrap(), DecodeConfig::greedy());
    }

    #[test]
    fn attention_is_normalised_and_sampling_is_seeded() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let head = small_lang(9, &mut rng, &mut store);
        let bias = Tensor::vector(vec![0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        store.set_value(head.output_bias(), bias).unwrap();
        let fr = frames(&mut rng, 5);
        let cfg = DecodeConfig::with_temperature(1.0, 7).unwrap();
        let a = head.generate(&store, &fr, &cfg).unwrap();
        let b = head.generate(&store, &fr, &cfg).unwrap();
        assert_eq!(a, b);
        for step in &a.attention {
            assert_eq!(step.len(), 5);
            assert!((step.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        assert!(a.tokens.len() <= MAX_WORDS);
        assert!(head.generate(&store, &[], &cfg).is_err());
    }

    #[test]
    fn teacher_forced_loss_decreases_monotonically() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let head = small_lang(8, &mut rng, &mut store);
        let fr = frames(&mut rng, 3);
        let target = [4, 6, 5, 7, EOS];
        let mut prev = f64::INFINITY;
        for _ in 0..50 {
            let mut tape = Tape::new();
            let vars: Vec<(Var, Var)> = fr
                .iter()
                .map(|(d, p)| (tape.input(d.clone()).unwrap(), tape.input(p.clone()).unwrap()))
                .collect();
            let loss = head.sequence_loss(&mut tape, &store, &vars, &target).unwrap();
            let l = tape.value(loss).item();
            assert!(l < prev, "{l} >= {prev}");
            prev = l;
            store.zero_grad();
            tape.backward(loss).unwrap().accumulate_into(&mut store);
            let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
            for id in ids {
                let p = store.get_mut(id);
                let g = p.grad.data().to_vec();
                p.value.data_mut().iter_mut().zip(g).for_each(|(v, g)| *v -= 1e-2 * g);
            }
        }
    }
}
