//! Joint optimization of the driving and explanation objectives,
//! checkpoints, evaluation and multi-seed experiments.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Tape, Var};
use crate::decoder::drive_loss;
use crate::error::{Error, Result};
use crate::explain::{explain_loss, Cause, DecodeConfig, LanguageConfig, LanguageHead, Vocabulary};
use crate::fusion::{FusionConfig, FusionKind};
use crate::metrics::{bleu4_corpus, cider_d, mean_ap, per_class_ap, ClassAp, MetricReport};
use crate::model::{BeefModel, ExplainerKind, ForwardOptions, ModelConfig};
use crate::params::ParamStore;
use crate::synthworld::{Dataset, SampleRef};
use crate::tensor::{read_container, write_container, Container, Element, Entry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(store: &ParamStore<f32>) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient was not finite; nothing was changed.
    Skipped { parameter: String },
}

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient.
pub fn adam_step(store: &mut ParamStore<f32>, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<StepOutcome> {
    if state.m.len() != store.len() {
        return Err(Error::shape("adam_step", &[store.len()], &[state.m.len()]));
    }
    for ((_, p), m) in store.iter().zip(&state.m) {
        if p.grad.numel() != m.len() {
            return Err(Error::shape("adam_step", &[m.len()], p.grad.shape()));
        }
        if !p.grad.all_finite() {
            return Ok(StepOutcome::Skipped {
                parameter: p.name.clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let p = store.get_mut(id);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
            let g = g as f64;
            let mi = cfg.beta1 * m[i] as f64 + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v[i] as f64 + (1.0 - cfg.beta2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(StepOutcome::Applied)
}

/// `drive + lambda * explain`; with `lambda == 0` the drive loss itself.
pub fn joint_loss<T: Element>(tape: &mut Tape<T>, drive: Var, explain: Var, lambda: f64) -> Result<Var> {
    if lambda == 0.0 {
        return Ok(drive);
    }
    let e = tape.scale(explain, lambda)?;
    tape.add(drive, e)
}

/// Scalar form of [`joint_loss`].
pub fn joint_loss_value(drive: f64, explain: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        drive
    } else {
        drive + lambda * explain
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Schedule {
    SinglePhase,
    /// Driver-only iterations first, then joint training.
    PretrainThenJoint { pretrain_iterations: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LanguageTrainConfig {
    /// Backbone layer whose pooled features are fused with the decision.
    pub layer: usize,
    pub hidden: usize,
    pub embed: usize,
    pub attention: usize,
    /// Width of the fused per-frame vectors.
    pub fused: usize,
    pub proj_dim: usize,
    pub block_count: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for LanguageTrainConfig {
    fn default() -> Self {
        LanguageTrainConfig {
            layer: 2,
            hidden: 32,
            embed: 32,
            attention: 32,
            fused: 32,
            proj_dim: 40,
            block_count: 5,
            iterations: 2000,
            batch_size: 4,
            learning_rate: 3e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lambda_explain: f64,
    /// Keep explanation gradients out of the drive head by reading a
    /// detached copy of the decision vector.
    pub detach_decision: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Evaluate every this many iterations; 0 disables periodic evaluation.
    pub eval_every: usize,
    pub eval_split: String,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Rescale the gradient to this global norm when it is exceeded.
    pub grad_clip: Option<f64>,
    pub schedule: Schedule,
    pub adam: AdamConfig,
    /// Train a sentence generator on frozen driver features afterwards.
    pub language: Option<LanguageTrainConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            lambda_explain: 1.0,
            detach_decision: false,
            learning_rate: 3e-4,
            batch_size: 8,
            iterations: 3000,
            seed: 0,
            eval_every: 0,
            eval_split: "val".into(),
            checkpoint_every: 0,
            checkpoint_path: None,
            grad_clip: None,
            schedule: Schedule::SinglePhase,
            adam: AdamConfig::default(),
            language: None,
        }
    }
}

pub const PRESETS: [&str; 4] = ["desk", "tiny", "hdd-paper", "bddx-paper"];

impl TrainConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let d = TrainConfig::default();
        Ok(match name {
            "desk" => d,
            "tiny" => TrainConfig {
                model: ModelConfig::tiny(),
                learning_rate: 3e-3,
                iterations: 600,
                ..d
            },
            "hdd-paper" => TrainConfig {
                learning_rate: 1e-4,
                batch_size: 12,
                iterations: 70_000,
                ..d
            },
            "bddx-paper" => TrainConfig {
                learning_rate: 3e-4,
                batch_size: 32,
                ..d
            },
            other => {
                return Err(Error::config(
                    "preset",
                    format!("unknown preset `{other}`, expected one of {PRESETS:?}"),
                ))
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lambda_explain >= 0.0 && self.lambda_explain.is_finite()) {
            return Err(Error::config("lambda_explain", "must be non-negative"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::config("grad_clip", "must be positive"));
            }
        }
        if let Schedule::PretrainThenJoint { pretrain_iterations } = self.schedule {
            if pretrain_iterations > self.iterations {
                return Err(Error::config("schedule.pretrain_iterations", "exceeds iterations"));
            }
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::config("adam", "betas must lie in [0, 1) and eps must be positive"));
        }
        if let Some(l) = &self.language {
            self.model.backbone.check_layer(l.layer)?;
            if l.batch_size == 0 || !(l.learning_rate > 0.0) {
                return Err(Error::config("language", "batch_size and learning_rate must be positive"));
            }
        }
        Ok(())
    }

    /// Explanation weight in effect at `iteration` (0-based).
    pub fn lambda_at(&self, iteration: usize) -> f64 {
        match self.schedule {
            Schedule::PretrainThenJoint { pretrain_iterations } if iteration < pretrain_iterations => 0.0,
            _ => self.lambda_explain,
        }
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
        c.validate()?;
        Ok(c)
    }
}

/// Mean loss values of one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub loss: f64,
    pub drive_loss: f64,
    pub explain_loss: f64,
    pub lambda: f64,
    pub grad_norm: f64,
}

/// Sentence generator trained on top of a frozen driver.
#[derive(Debug, Clone, PartialEq)]
pub struct LanguageModel {
    pub config: LanguageTrainConfig,
    pub head: LanguageHead,
    pub store: ParamStore<f32>,
    pub vocabulary: Vocabulary,
    pub norm: FeatureNorm,
}

impl LanguageModel {
    /// Standardized features of every clip of an episode.
    pub fn features(
        &self,
        model: &BeefModel,
        store: &ParamStore<f32>,
        data: &Dataset,
        episode: usize,
    ) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
        let mut f = episode_features(model, store, data, episode, self.config.layer)?;
        self.norm.apply(&mut f);
        Ok(f)
    }
}

/// Per-dimension standardization of frozen `(decision, perceptual)` features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNorm {
    pub mean: [Tensor<f32>; 2],
    pub std: [Tensor<f32>; 2],
}

const NORM_KEYS: [&str; 4] = [
    "language.norm.decision.mean",
    "language.norm.perceptual.mean",
    "language.norm.decision.std",
    "language.norm.perceptual.std",
];

impl FeatureNorm {
    pub const STD_FLOOR: f64 = 1e-6;

    pub fn fit(pairs: &[SentencePair]) -> Result<Self> {
        let first = pairs
            .iter()
            .flat_map(|p| p.frames.first())
            .next()
            .ok_or_else(|| Error::domain("feature_norm", "no frames"))?;
        let mut mean = [Vec::new(), Vec::new()];
        let mut std = [Vec::new(), Vec::new()];
        for side in 0..2 {
            let dim = if side == 0 { first.0.numel() } else { first.1.numel() };
            let (mut sum, mut sq, mut n) = (vec![0.0f64; dim], vec![0.0f64; dim], 0.0);
            for (m, v) in pairs.iter().flat_map(|p| &p.frames) {
                let t = if side == 0 { m } else { v };
                if t.numel() != dim {
                    return Err(Error::shape("feature_norm", &[dim], t.shape()));
                }
                for (k, &x) in t.data().iter().enumerate() {
                    sum[k] += f64::from(x);
                    sq[k] += f64::from(x).powi(2);
                }
                n += 1.0;
            }
            for k in 0..dim {
                let mu = sum[k] / n;
                mean[side].push(mu as f32);
                std[side].push((sq[k] / n - mu * mu).max(0.0).sqrt().max(Self::STD_FLOOR) as f32);
            }
        }
        let [m0, m1] = mean;
        let [s0, s1] = std;
        Ok(FeatureNorm {
            mean: [Tensor::vector(m0), Tensor::vector(m1)],
            std: [Tensor::vector(s0), Tensor::vector(s1)],
        })
    }

    pub fn apply(&self, frames: &mut [(Tensor<f32>, Tensor<f32>)]) {
        for (m, v) in frames {
            for (side, t) in [m, v].into_iter().enumerate() {
                let (mu, sd) = (self.mean[side].data(), self.std[side].data());
                for (k, x) in t.data_mut().iter_mut().enumerate() {
                    *x = (*x - mu[k]) / sd[k];
                }
            }
        }
    }

    fn export(&self, c: &mut Container) {
        for (k, t) in NORM_KEYS.iter().zip(self.mean.iter().chain(&self.std)) {
            c.insert(*k, Entry::from(t));
        }
    }

    fn import(c: &Container) -> Result<Self> {
        let get = |k: &str| {
            c.require(k)?
                .to_tensor()
                .ok_or_else(|| Error::Format(format!("{k}: expected a float tensor")))
        };
        Ok(FeatureNorm {
            mean: [get(NORM_KEYS[0])?, get(NORM_KEYS[1])?],
            std: [get(NORM_KEYS[2])?, get(NORM_KEYS[3])?],
        })
    }
}

/// Model, parameters, optimizer and sampling state of a training run.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: BeefModel,
    store: ParamStore<f32>,
    adam: AdamState,
    rng: ChaCha8Rng,
    iteration: usize,
    language: Option<LanguageModel>,
}

fn param_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sample_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = BeefModel::new(config.model.clone(), &mut store, &mut param_rng(config.seed))?;
        Ok(Trainer {
            adam: AdamState::new(&store),
            rng: sample_rng(config.seed),
            iteration: 0,
            language: None,
            config,
            model,
            store,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &BeefModel {
        &self.model
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.store
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn language(&self) -> Option<&LanguageModel> {
        self.language.as_ref()
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.config.past != self.config.model.decoder.past || data.config.future != self.config.model.decoder.future {
            return Err(Error::config(
                "model.decoder",
                format!(
                    "horizon {}+{} does not match the dataset's {}+{}",
                    self.config.model.decoder.past, self.config.model.decoder.future, data.config.past, data.config.future
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass of one sample; returns `(drive loss, explain loss)`.
    fn sample_losses(
        &self,
        tape: &mut Tape<f32>,
        data: &Dataset,
        s: SampleRef,
        options: ForwardOptions,
    ) -> Result<(Var, Var)> {
        let e = &data.episodes[s.episode];
        let clip = tape.input(data.clip(s))?;
        let out = self.model.forward(tape, &self.store, clip, e.goals[s.frame], options)?;
        let target = self.model.drive_target(&e.trajectories[s.frame], data.config.dt())?;
        let target = tape.input(Tensor::from_f64(&[target.len()], &target)?)?;
        let dl = drive_loss(tape, out.drive, target)?;
        let (el, _) = explain_loss(tape, &[out.probs], e.labels[s.frame].index())?;
        Ok((dl, el))
    }

    /// One optimization step on a freshly sampled batch.
    pub fn step(&mut self, data: &Dataset, samples: &[SampleRef], log: &mut TrainLog) -> Result<StepRecord> {
        if samples.is_empty() {
            return Err(Error::config("data", "training split has no samples"));
        }
        let lambda = self.config.lambda_at(self.iteration);
        let batch: Vec<SampleRef> = (0..self.config.batch_size)
            .map(|_| samples[self.rng.random_range(0..samples.len())])
            .collect();
        self.store.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        let (mut total, mut dsum, mut esum) = (0.0, 0.0, 0.0);
        for &s in &batch {
            let mut tape = Tape::new();
            let (dl, el) = self.sample_losses(
                &mut tape,
                data,
                s,
                ForwardOptions {
                    detach_decision: self.config.detach_decision,
                },
            )?;
            let loss = joint_loss(&mut tape, dl, el, lambda)?;
            let (lv, dv, ev) = (
                tape.value(loss).item().as_f64(),
                tape.value(dl).item().as_f64(),
                tape.value(el).item().as_f64(),
            );
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    iteration: self.iteration,
                    reason: format!("non-finite loss {lv}"),
                });
            }
            let g = tape.backward(loss)?;
            g.accumulate_scaled_into(&mut self.store, scale);
            total += lv * scale;
            dsum += dv * scale;
            esum += ev * scale;
        }
        let norm = self
            .store
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter().map(|&g| (g as f64) * (g as f64)))
            .sum::<f64>()
            .sqrt();
        if let Some(max) = self.config.grad_clip {
            if norm > max {
                let f = (max / norm) as f32;
                let ids: Vec<_> = self.store.iter().map(|(id, _)| id).collect();
                for id in ids {
                    self.store.get_mut(id).grad.data_mut().iter_mut().for_each(|g| *g *= f);
                }
                log.event(json!({"iteration": self.iteration, "event": "grad_clip", "norm": norm, "max": max}));
            }
        }
        match adam_step(&mut self.store, &mut self.adam, self.config.learning_rate, &self.config.adam)? {
            StepOutcome::Applied => {}
            StepOutcome::Skipped { parameter } => {
                log::warn!("iteration {}: non-finite gradient in `{parameter}`, step skipped", self.iteration);
                log.event(json!({"iteration": self.iteration, "event": "nonfinite_gradient", "parameter": parameter}));
            }
        }
        let rec = StepRecord {
            iteration: self.iteration,
            loss: total,
            drive_loss: dsum,
            explain_loss: esum,
            lambda,
            grad_norm: norm,
        };
        self.iteration += 1;
        Ok(rec)
    }

    /// Trains until the iteration budget is spent, writing the log and
    /// checkpoints under `out` when given.
    pub fn fit(&mut self, data: &Dataset, out: Option<&Path>) -> Result<TrainLog> {
        self.check_dataset(data)?;
        let samples = data.samples("train")?;
        let mut log = TrainLog::default();
        if let Some(dir) = out {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let ckpt_path = self.checkpoint_target(out);
        log.event(json!({
            "event": "start",
            "schedule": self.config.schedule,
            "train_samples": samples.len(),
            "parameters": self.store.count(""),
        }));
        while self.iteration < self.config.iterations {
            let rec = self.step(data, &samples, &mut log)?;
            log.record(&rec);
            let done = self.iteration;
            if self.config.eval_every > 0 && done % self.config.eval_every == 0 {
                let ids = data.split.get(&self.config.eval_split)?;
                if !ids.is_empty() {
                    let r = evaluate(&self.model, &self.store, data, &self.config.eval_split)?;
                    log.event(json!({
                        "iteration": done,
                        "eval": {"split": self.config.eval_split, "map": r.map, "accuracy": r.accuracy, "driver_mse": r.driver_mse}
                    }));
                }
            }
            if let Some(p) = &ckpt_path {
                if self.config.checkpoint_every > 0 && done % self.config.checkpoint_every == 0 {
                    self.save(p)?;
                }
            }
            if let Some(dir) = out {
                log.flush(&dir.join("log.jsonl"))?;
            }
        }
        if let Some(lc) = self.config.language.clone() {
            let lm = train_language(&self.model, &self.store, data, &lc, self.config.seed, &mut log)?;
            self.language = Some(lm);
        }
        if let Some(p) = &ckpt_path {
            self.save(p)?;
        }
        if let Some(dir) = out {
            log.flush(&dir.join("log.jsonl"))?;
        }
        Ok(log)
    }

    fn checkpoint_target(&self, out: Option<&Path>) -> Option<PathBuf> {
        self.config
            .checkpoint_path
            .clone()
            .or_else(|| out.map(|d| d.join("checkpoint.beef")))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.insert("meta.format", Entry::text(CHECKPOINT_FORMAT));
        c.insert("meta.config", Entry::text(&serde_json::to_string(&self.config).expect("config serializes")));
        c.insert("meta.iteration", Entry::i64s(vec![self.iteration as i64]));
        c.insert("meta.adam_step", Entry::i64s(vec![self.adam.step as i64]));
        let seed = self.rng.get_seed();
        let word = self.rng.get_word_pos();
        let mut rng_state: Vec<i64> = seed.chunks_exact(8).map(|b| i64::from_le_bytes(b.try_into().unwrap())).collect();
        rng_state.push(self.rng.get_stream() as i64);
        rng_state.push(word as u64 as i64);
        rng_state.push((word >> 64) as u64 as i64);
        c.insert("meta.rng", Entry::i64s(rng_state));
        for (k, (_, p)) in self.store.iter().enumerate() {
            c.insert(p.name.clone(), Entry::from(&p.value));
            let shape = p.value.shape();
            c.insert(format!("adam.m.{}", p.name), Entry::F32(Tensor::new(shape, self.adam.m[k].clone())?));
            c.insert(format!("adam.v.{}", p.name), Entry::F32(Tensor::new(shape, self.adam.v[k].clone())?));
        }
        if let Some(lm) = &self.language {
            c.insert("meta.language", Entry::text(&serde_json::to_string(&lm.config).expect("config serializes")));
            c.insert("meta.vocabulary", Entry::text(&lm.vocabulary.to_text()));
            lm.store.export(&mut c);
            lm.norm.export(&mut c);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let text = |name: &str| -> Result<String> {
            c.require(name)?
                .as_text()
                .ok_or_else(|| Error::Format(format!("`{name}` is not text")))
        };
        let ints = |name: &str| -> Result<Vec<i64>> {
            match c.require(name)? {
                Entry::I64 { data, .. } => Ok(data.clone()),
                _ => Err(Error::Format(format!("`{name}` is not an integer entry"))),
            }
        };
        if text("meta.format")? != CHECKPOINT_FORMAT {
            return Err(Error::Format("not a training checkpoint".into()));
        }
        let config: TrainConfig =
            serde_json::from_str(&text("meta.config")?).map_err(|e| Error::Format(format!("meta.config: {e}")))?;
        let mut t = Trainer::new(config)?;
        t.store.import(c)?;
        for (k, (_, p)) in t.store.iter().enumerate() {
            for (prefix, dst) in [("adam.m", &mut t.adam.m[k]), ("adam.v", &mut t.adam.v[k])] {
                let name = format!("{prefix}.{}", p.name);
                let v: Tensor<f32> = c
                    .require(&name)?
                    .to_tensor()
                    .ok_or_else(|| Error::Format(format!("`{name}` is not a float entry")))?;
                if v.shape() != p.value.shape() {
                    return Err(Error::shape("checkpoint", p.value.shape(), v.shape()));
                }
                *dst = v.into_data();
            }
        }
        let one = |name: &str| -> Result<i64> {
            ints(name)?.first().copied().ok_or_else(|| Error::Format(format!("`{name}` is empty")))
        };
        t.iteration = one("meta.iteration")? as usize;
        t.adam.step = one("meta.adam_step")? as u64;
        let r = ints("meta.rng")?;
        if r.len() != 7 {
            return Err(Error::Format("meta.rng must hold 7 words".into()));
        }
        let mut seed = [0u8; 32];
        for (k, w) in r[..4].iter().enumerate() {
            seed[k * 8..k * 8 + 8].copy_from_slice(&w.to_le_bytes());
        }
        t.rng = ChaCha8Rng::from_seed(seed);
        t.rng.set_stream(r[4] as u64);
        t.rng.set_word_pos((r[5] as u64 as u128) | ((r[6] as u64 as u128) << 64));
        if c.get("meta.language").is_some() {
            let lc: LanguageTrainConfig = serde_json::from_str(&text("meta.language")?)
                .map_err(|e| Error::Format(format!("meta.language: {e}")))?;
            let vocabulary = Vocabulary::from_text(&text("meta.vocabulary")?)?;
            let (head, mut store) = build_language(&t.model, &lc, vocabulary.len(), 0)?;
            store.import(c)?;
            t.language = Some(LanguageModel {
                config: lc,
                head,
                store,
                vocabulary,
                norm: FeatureNorm::import(c)?,
            });
        }
        Ok(t)
    }

    /// Writes the checkpoint atomically: an interrupted save leaves the
    /// previous file intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        write_container(&tmp, &self.to_container()?)?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Trainer::from_container(&read_container(path)?)
    }
}

const CHECKPOINT_FORMAT: &str = "beef-checkpoint-v1";

/// JSON-lines training log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub lines: Vec<String>,
    flushed: usize,
}

impl TrainLog {
    pub fn record(&mut self, rec: &StepRecord) {
        self.lines.push(serde_json::to_string(rec).expect("record serializes"));
    }

    pub fn event(&mut self, value: serde_json::Value) {
        self.lines.push(value.to_string());
    }

    pub fn text(&self) -> String {
        let mut s = self.lines.join("\n");
        s.push('\n');
        s
    }

    /// Appends the lines not yet written to `path`.
    pub fn flush(&mut self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if self.flushed == 0 {
            f.set_len(0).map_err(|e| Error::io(path, e))?;
        }
        for l in &self.lines[self.flushed..] {
            writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
        }
        self.flushed = self.lines.len();
        Ok(())
    }
}

/// Builds the model and trains it from scratch.
pub fn train(config: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<(Trainer, TrainLog)> {
    let mut t = Trainer::new(config.clone())?;
    let log = t.fit(data, out)?;
    Ok((t, log))
}

/// Per-frame predictions of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probs: Vec<f64>,
    /// Drive output in world units.
    pub drive: Vec<f64>,
}

pub fn predict(model: &BeefModel, store: &ParamStore<f32>, data: &Dataset, s: SampleRef) -> Result<Prediction> {
    let e = data.episode(s.episode)?;
    let mut tape = Tape::new();
    let clip = tape.input(data.clip(s))?;
    let out = model.forward(&mut tape, store, clip, e.goals[s.frame], ForwardOptions::default())?;
    Ok(Prediction {
        probs: tape.value(out.probs).to_f64_vec(),
        drive: model.drive_to_world(tape.value(out.drive)),
    })
}

/// Cause AP over every frame of `split`, accuracy and driving error in
/// world units.
pub fn evaluate(model: &BeefModel, store: &ParamStore<f32>, data: &Dataset, split: &str) -> Result<MetricReport> {
    let samples = data.samples(split)?;
    if samples.is_empty() {
        return Err(Error::config("split", format!("split `{split}` has no samples")));
    }
    let preds = samples
        .par_iter()
        .map(|&s| predict(model, store, data, s))
        .collect::<Result<Vec<_>>>()?;
    let dt = data.config.dt();
    let scale = model.config().target_scale;
    let (mut se, mut ae, mut n, mut correct) = (0.0, 0.0, 0usize, 0usize);
    let mut labels = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&preds) {
        let e = &data.episodes[s.episode];
        let target = model.drive_target(&e.trajectories[s.frame], dt)?;
        for (a, b) in p.drive.iter().zip(&target) {
            let d = a - b / scale;
            se += d * d;
            ae += d.abs();
            n += 1;
        }
        let label = e.labels[s.frame].index();
        if crate::tensor::kernels::argmax(&p.probs) == label {
            correct += 1;
        }
        labels.push(label);
    }
    let scores: Vec<Vec<f64>> = preds.into_iter().map(|p| p.probs).collect();
    let classes: Vec<usize> = (1..Cause::COUNT).collect();
    let aps = per_class_ap(&scores, &labels, &classes)?;
    let mut r = MetricReport::new();
    r.per_class_ap = classes
        .iter()
        .zip(&aps)
        .map(|(&c, &ap)| ClassAp {
            class: Cause::ALL[c].name().into(),
            ap,
        })
        .collect();
    r.map = mean_ap(&aps).ok();
    r.accuracy = Some(correct as f64 / samples.len() as f64);
    r.driver_mse = Some(se / n as f64);
    r.driver_mae = Some(ae / n as f64);
    r.frames = samples.len();
    r.validate()?;
    Ok(r)
}

/// Evaluation including generated sentences when the trainer has a
/// language head.
pub fn evaluate_trainer(t: &Trainer, data: &Dataset, split: &str) -> Result<(MetricReport, Vec<SentenceEval>)> {
    let mut r = evaluate(&t.model, &t.store, data, split)?;
    let mut sentences = Vec::new();
    if let Some(lm) = &t.language {
        let ids: Vec<usize> = data
            .split
            .get(split)?
            .iter()
            .copied()
            .filter(|&i| data.episodes[i].sentence.is_some())
            .collect();
        if !ids.is_empty() {
            sentences = ids
                .par_iter()
                .map(|&i| {
                    let feats = lm.features(&t.model, &t.store, data, i)?;
                    let g = lm.head.generate(&lm.store, &feats, &DecodeConfig::greedy())?;
                    Ok(SentenceEval {
                        clip_id: format!("ep{i:05}"),
                        reference: data.episodes[i].sentence.clone().unwrap_or_default(),
                        hypothesis: lm.vocabulary.decode(&g.tokens).join(" "),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let (hyps, refs) = sentence_corpus(&sentences);
            r.bleu4 = Some(bleu4_corpus(&hyps, &refs)?);
            r.cider_d = Some(cider_d(&hyps, &refs)?);
        }
    }
    r.validate()?;
    Ok((r, sentences))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEval {
    pub clip_id: String,
    pub reference: String,
    pub hypothesis: String,
}

type Corpus = (Vec<Vec<String>>, Vec<Vec<Vec<String>>>);

fn sentence_corpus(s: &[SentenceEval]) -> Corpus {
    let words = |t: &str| t.split_whitespace().map(str::to_owned).collect::<Vec<_>>();
    (
        s.iter().map(|e| words(&e.hypothesis)).collect(),
        s.iter().map(|e| vec![words(&e.reference)]).collect(),
    )
}

/// `(decision, pooled layer features)` for every clip of an episode.
pub fn episode_features<T: Element>(
    model: &BeefModel,
    store: &ParamStore<f32>,
    data: &Dataset,
    episode: usize,
    layer: usize,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    let e = data.episode(episode)?;
    (data.config.clip_len - 1..data.config.episode_len)
        .map(|f| {
            let (m, v) = model.frame_features(store, &data.clip(SampleRef { episode, frame: f }), e.goals[f], layer)?;
            Ok((m.cast(), v.cast()))
        })
        .collect()
}

pub fn build_language(
    model: &BeefModel,
    lc: &LanguageTrainConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<(LanguageHead, ParamStore<f32>)> {
    let mc = model.config();
    let cfg = LanguageConfig {
        fusion: FusionConfig {
            kind: FusionKind::Block,
            dim_m: mc.decision_dim(),
            dim_v: mc.backbone.layer_dim(lc.layer)?,
            dim_out: lc.fused,
            proj_dim: lc.proj_dim,
            block_count: lc.block_count,
            rank: 1,
            hidden: 1,
        },
        hidden: lc.hidden,
        embed: lc.embed,
        attention: lc.attention,
        vocab_size,
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let head = LanguageHead::new(cfg, &mut store, &mut rng)?;
    Ok((head, store))
}

/// A training pair for the sentence generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePair {
    pub frames: Vec<(Tensor<f32>, Tensor<f32>)>,
    pub target: Vec<usize>,
}

/// Fits a language head with Adam on fixed per-frame features.
pub fn fit_language(
    head: &LanguageHead,
    store: &mut ParamStore<f32>,
    pairs: &[SentencePair],
    lc: &LanguageTrainConfig,
    seed: u64,
    log: &mut TrainLog,
) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::config("language", "no labeled sentences in the training split"));
    }
    let mut adam = AdamState::new(store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let scale = 1.0 / lc.batch_size as f64;
    for it in 0..lc.iterations {
        store.zero_grad();
        let mut total = 0.0;
        for _ in 0..lc.batch_size {
            let p = &pairs[rng.random_range(0..pairs.len())];
            let mut tape = Tape::new();
            let vars = p
                .frames
                .iter()
                .map(|(d, v)| Ok((tape.input(d.clone())?, tape.input(v.clone())?)))
                .collect::<Result<Vec<_>>>()?;
            let loss = head.sequence_loss(&mut tape, store, &vars, &p.target)?;
            let lv = tape.value(loss).item().as_f64();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    iteration: it,
                    reason: format!("non-finite sentence loss {lv}"),
                });
            }
            tape.backward(loss)?.accumulate_scaled_into(store, scale);
            total += lv * scale;
        }
        if let StepOutcome::Skipped { parameter } = adam_step(store, &mut adam, lc.learning_rate, &AdamConfig::default())? {
            log.event(json!({"iteration": it, "event": "nonfinite_gradient", "parameter": parameter}));
        }
        log.event(json!({"phase": "language", "iteration": it, "loss": total}));
    }
    Ok(())
}

/// Trains a sentence generator on features of the frozen driver.
pub fn train_language(
    model: &BeefModel,
    store: &ParamStore<f32>,
    data: &Dataset,
    lc: &LanguageTrainConfig,
    seed: u64,
    log: &mut TrainLog,
) -> Result<LanguageModel> {
    let vocabulary = data.vocabulary.clone();
    let (head, mut lstore) = build_language(model, lc, vocabulary.len(), seed)?;
    let pairs = data
        .split
        .train
        .par_iter()
        .filter_map(|&i| data.episodes[i].sentence.as_ref().map(|s| (i, s)))
        .map(|(i, s)| {
            Ok(SentencePair {
                frames: episode_features(model, store, data, i, lc.layer)?,
                target: vocabulary.encode(s)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let norm = FeatureNorm::fit(&pairs)?;
    let mut pairs = pairs;
    for p in &mut pairs {
        norm.apply(&mut p.frames);
    }
    fit_language(&head, &mut lstore, &pairs, lc, seed, log)?;
    Ok(LanguageModel {
        config: lc.clone(),
        head,
        store: lstore,
        vocabulary,
        norm,
    })
}

/// Output of the `explain` workflow for one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub episode: usize,
    pub frames: Vec<FrameExplanation>,
    pub predicted_cause: String,
    pub true_cause: String,
    pub sentence: Option<String>,
    pub decode: Option<DecodeConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameExplanation {
    pub frame: usize,
    pub cause_distribution: BTreeMap<String, f64>,
    /// Decoded positions in world units.
    pub trajectory: Vec<[f64; 2]>,
}

pub fn explain_episode(t: &Trainer, data: &Dataset, episode: usize, decode: &DecodeConfig) -> Result<Explanation> {
    let e = data.episode(episode)?;
    let mut frames = Vec::new();
    let mut mean = vec![0.0; Cause::COUNT];
    for f in data.config.clip_len - 1..data.config.episode_len {
        let p = predict(&t.model, &t.store, data, SampleRef { episode, frame: f })?;
        for (m, q) in mean.iter_mut().zip(&p.probs) {
            *m += q;
        }
        frames.push(FrameExplanation {
            frame: f,
            cause_distribution: Cause::ALL.iter().map(|c| (c.name().to_owned(), p.probs[c.index()])).collect(),
            trajectory: p.drive.chunks(2).map(|c| [c[0], c.get(1).copied().unwrap_or(0.0)]).collect(),
        });
    }
    let sentence = match &t.language {
        Some(lm) => {
            let feats = lm.features(&t.model, &t.store, data, episode)?;
            let g = lm.head.generate(&lm.store, &feats, decode)?;
            Some(lm.vocabulary.decode(&g.tokens).join(" "))
        }
        None => None,
    };
    Ok(Explanation {
        episode,
        frames,
        predicted_cause: Cause::ALL[crate::tensor::kernels::argmax(&mean)].name().into(),
        true_cause: e.cause.name().into(),
        decode: t.language.as_ref().map(|_| *decode),
        sentence,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    LayerSweep,
    FusionComparison,
    BaselineGrid,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::LayerSweep => "layer_sweep",
            ExperimentKind::FusionComparison => "fusion_comparison",
            ExperimentKind::BaselineGrid => "baseline_grid",
        }
    }

    pub fn cells(self) -> Vec<Cell> {
        let cell = |label: &str, explainer, layer, lambda| Cell {
            label: label.into(),
            explainer,
            layer,
            lambda,
        };
        match self {
            ExperimentKind::LayerSweep => (1..=5)
                .map(|l| cell(&format!("layer{l}"), ExplainerKind::Block, l, None))
                .collect(),
            ExperimentKind::FusionComparison => [
                ExplainerKind::CatMlp,
                ExplainerKind::Mlb,
                ExplainerKind::Mfb,
                ExplainerKind::Mutan,
                ExplainerKind::Bilinear,
                ExplainerKind::Block,
                ExplainerKind::Layer3Mlp,
            ]
            .into_iter()
            .map(|k| cell(k.name(), k, 3, None))
            .collect(),
            ExperimentKind::BaselineGrid => vec![
                cell("driver_only", ExplainerKind::Block, 3, Some(0.0)),
                cell("last_layer", ExplainerKind::LastLayer, 3, None),
                cell("last_layer_plus_blinker", ExplainerKind::LastLayerPlusBlinker, 3, None),
                cell("layer3_mlp", ExplainerKind::Layer3Mlp, 3, None),
                cell("decision_only", ExplainerKind::DecisionMlp, 3, None),
                cell("block", ExplainerKind::Block, 3, None),
            ],
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layer" | "layer_sweep" => Ok(ExperimentKind::LayerSweep),
            "fusion" | "fusion_comparison" => Ok(ExperimentKind::FusionComparison),
            "baseline" | "baseline_grid" => Ok(ExperimentKind::BaselineGrid),
            other => Err(Error::config("kind", format!("unknown experiment `{other}`"))),
        }
    }
}

/// One configuration of an experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub label: String,
    pub explainer: ExplainerKind,
    pub layer: usize,
    /// Overrides the base explanation weight.
    pub lambda: Option<f64>,
}

impl Cell {
    pub fn config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut c = base.clone();
        c.model = c.model.with_explainer(self.explainer, self.layer);
        if let Some(l) = self.lambda {
            c.lambda_explain = l;
        }
        c.seed = seed;
        c.checkpoint_path = None;
        c.language = None;
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub map: f64,
    pub accuracy: f64,
    pub driver_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub label: String,
    pub explainer: ExplainerKind,
    pub layer: usize,
    pub lambda: f64,
    pub map_mean: f64,
    pub map_std: f64,
    pub accuracy_mean: f64,
    pub driver_mse_mean: f64,
    pub driver_mse_std: f64,
    pub runs: Vec<RunResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub split: String,
    pub seeds: Vec<u64>,
    pub schedule: Schedule,
    pub rows: Vec<ExperimentRow>,
}

/// Mean and sample standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl ExperimentReport {
    pub fn row(&self, label: &str) -> Option<&ExperimentRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,explainer,layer,lambda,map_mean,map_std,accuracy_mean,driver_mse_mean,driver_mse_std\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.label, r.explainer, r.layer, r.lambda, r.map_mean, r.map_std, r.accuracy_mean, r.driver_mse_mean, r.driver_mse_std
            ));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            (format!("{}.csv", self.kind.name()), self.to_csv()),
            (format!("{}.json", self.kind.name()), self.to_json()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Trains and evaluates grid cells, reusing runs shared between grids.
#[derive(Debug)]
pub struct ExperimentRunner<'a> {
    data: &'a Dataset,
    base: TrainConfig,
    seeds: Vec<u64>,
    split: String,
    cache: BTreeMap<String, RunResult>,
}

impl<'a> ExperimentRunner<'a> {
    pub fn new(data: &'a Dataset, base: TrainConfig, seeds: Vec<u64>, split: &str) -> Result<Self> {
        base.validate()?;
        if seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        data.split.get(split)?;
        Ok(ExperimentRunner {
            data,
            base,
            seeds,
            split: split.into(),
            cache: BTreeMap::new(),
        })
    }

    pub fn run_cell(&mut self, cell: &Cell, seed: u64) -> Result<RunResult> {
        let cfg = cell.config(&self.base, seed);
        let key = serde_json::to_string(&cfg).expect("config serializes");
        if let Some(r) = self.cache.get(&key) {
            return Ok(*r);
        }
        let (t, _) = train(&cfg, self.data, None)?;
        let rep = evaluate(&t.model, &t.store, self.data, &self.split)?;
        let r = RunResult {
            seed,
            map: rep.map.unwrap_or(0.0),
            accuracy: rep.accuracy.unwrap_or(0.0),
            driver_mse: rep.driver_mse.unwrap_or(f64::NAN),
        };
        log::info!("{} seed {seed}: mAP {:.4} acc {:.4} mse {:.4}", cell.label, r.map, r.accuracy, r.driver_mse);
        self.cache.insert(key, r);
        Ok(r)
    }

    pub fn run_row(&mut self, cell: &Cell) -> Result<ExperimentRow> {
        let runs = self
            .seeds
            .clone()
            .into_iter()
            .map(|s| self.run_cell(cell, s))
            .collect::<Result<Vec<_>>>()?;
        let (map_mean, map_std) = mean_std(&runs.iter().map(|r| r.map).collect::<Vec<_>>());
        let (driver_mse_mean, driver_mse_std) = mean_std(&runs.iter().map(|r| r.driver_mse).collect::<Vec<_>>());
        Ok(ExperimentRow {
            label: cell.label.clone(),
            explainer: cell.explainer,
            layer: cell.layer,
            lambda: cell.lambda.unwrap_or(self.base.lambda_explain),
            map_mean,
            map_std,
            accuracy_mean: mean_std(&runs.iter().map(|r| r.accuracy).collect::<Vec<_>>()).0,
            driver_mse_mean,
            driver_mse_std,
            runs,
        })
    }

    pub fn run(&mut self, kind: ExperimentKind) -> Result<ExperimentReport> {
        let rows = kind.cells().iter().map(|c| self.run_row(c)).collect::<Result<Vec<_>>>()?;
        Ok(ExperimentReport {
            kind,
            split: self.split.clone(),
            seeds: self.seeds.clone(),
            schedule: self.base.schedule,
            rows,
        })
    }
}

pub fn run_experiment(kind: ExperimentKind, base: &TrainConfig, data: &Dataset, seeds: &[u64]) -> Result<ExperimentReport> {
    ExperimentRunner::new(data, base.clone(), seeds.to_vec(), "test")?.run(kind)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Side of the square average-pooling window.
    pub pool: usize,
    pub hidden: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            pool: 2,
            hidden: 64,
            iterations: 3000,
            batch_size: 16,
            learning_rate: 3e-3,
            seed: 0,
        }
    }
}

/// Average-pooled pixels of the last frame of a sample.
pub fn pooled_pixels(data: &Dataset, s: SampleRef, pool: usize) -> Result<Tensor<f32>> {
    let n = data.config.image_size;
    if pool == 0 || n % pool != 0 {
        return Err(Error::config("probe.pool", format!("must divide the image size {n}")));
    }
    let frames = &data.episode(s.episode)?.frames;
    let m = n / pool;
    let mut out = vec![0.0f32; 3 * m * m];
    let norm = 1.0 / (pool * pool) as f32;
    for c in 0..3 {
        for y in 0..n {
            for x in 0..n {
                out[(c * m + y / pool) * m + x / pool] += frames.at(&[s.frame, c, y, x]) * norm;
            }
        }
    }
    Tensor::new(&[3 * m * m], out)
}

/// Training-split accuracy of a two-layer perceptron on pooled raw pixels,
/// a check that causes are separable from the image alone.
pub fn pixel_probe(data: &Dataset, cfg: &ProbeConfig) -> Result<f64> {
    let samples = data.samples("train")?;
    if samples.is_empty() {
        return Err(Error::config("data", "training split has no samples"));
    }
    let xs = samples
        .par_iter()
        .map(|&s| pooled_pixels(data, s, cfg.pool))
        .collect::<Result<Vec<_>>>()?;
    let ys: Vec<usize> = samples.iter().map(|s| data.episodes[s.episode].labels[s.frame].index()).collect();
    let d = xs[0].numel();
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w1 = store.add_xavier("probe.w1", &[cfg.hidden, d], d, cfg.hidden, &mut rng);
    let b1 = store.add_zeros("probe.b1", &[cfg.hidden]);
    let w2 = store.add_xavier("probe.w2", &[Cause::COUNT, cfg.hidden], cfg.hidden, Cause::COUNT, &mut rng);
    let b2 = store.add_zeros("probe.b2", &[Cause::COUNT]);
    let logits = |tape: &mut Tape<f32>, store: &ParamStore<f32>, x: &Tensor<f32>| -> Result<Var> {
        let x = tape.input(x.clone())?;
        let (w1, b1, w2, b2) = (tape.param(store, w1), tape.param(store, b1), tape.param(store, w2), tape.param(store, b2));
        let h = tape.linear(x, w1, Some(b1))?;
        let h = tape.relu(h)?;
        tape.linear(h, w2, Some(b2))
    };
    let mut adam = AdamState::new(&store);
    let scale = 1.0 / cfg.batch_size as f64;
    for _ in 0..cfg.iterations {
        store.zero_grad();
        for _ in 0..cfg.batch_size {
            let k = rng.random_range(0..xs.len());
            let mut tape = Tape::new();
            let z = logits(&mut tape, &store, &xs[k])?;
            let lp = tape.log_softmax(z)?;
            let l = tape.index(lp, ys[k])?;
            let l = tape.scale(l, -1.0)?;
            tape.backward(l)?.accumulate_scaled_into(&mut store, scale);
        }
        adam_step(&mut store, &mut adam, cfg.learning_rate, &AdamConfig::default())?;
    }
    let mut correct = 0;
    for (x, &y) in xs.iter().zip(&ys) {
        let mut tape = Tape::new();
        let z = logits(&mut tape, &store, x)?;
        if crate::tensor::kernels::argmax(tape.value(z).data()) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / xs.len() as f64)
}
