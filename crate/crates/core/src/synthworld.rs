//! Deterministic top-down driving world in which four different causes
//! produce the same full stop.
//!
//! Each episode draws its geometry (initial speed, braking onset and
//! duration, glyph placement, turn direction) from a stream that does not
//! depend on the cause, so two episodes with the same geometry and different
//! stop causes have identical expert trajectories. The cause is only visible
//! through the spatial arrangement of two colored blobs on a uniform panel:
//! both blobs have the same color for every stop cause, sit two pixels apart
//! and two pixels inside the panel border, so no single 3x3 window sees the
//! arrangement.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{to_channels_last, Goal};
use crate::decoder::Trajectory;
use crate::error::{Error, Result};
use crate::explain::{Cause, Vocabulary};
use crate::tensor::{read_container, write_container, Container, Entry, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub image_size: usize,
    /// Frames per clip (the current frame and its history).
    pub clip_len: usize,
    /// Frames per episode.
    pub episode_len: usize,
    pub frame_rate: f64,
    /// Trajectory positions before and after the current frame.
    pub past: usize,
    pub future: usize,
    /// Sampling weight of each cause, in [`Cause::ALL`] order.
    pub cause_mix: [f64; 7],
    /// Standard deviation of additive pixel noise.
    pub noise_sigma: f64,
    pub episodes: usize,
    pub seed: u64,
    /// Draw sentence wording from a few synonymous templates.
    pub sentence_variation: bool,
    pub split_ratios: [f64; 3],
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            image_size: 32,
            clip_len: 16,
            episode_len: 24,
            frame_rate: 3.0,
            past: 6,
            future: 6,
            cause_mix: [0.25, 0.125, 0.125, 0.125, 0.125, 0.125, 0.125],
            noise_sigma: 0.02,
            episodes: 200,
            seed: 0,
            sentence_variation: true,
            split_ratios: [0.8, 0.1, 0.1],
        }
    }
}

impl WorldConfig {
    /// Small frames and short clips for fast experiments.
    pub fn tiny() -> Self {
        WorldConfig {
            image_size: 16,
            clip_len: 4,
            episode_len: 8,
            ..WorldConfig::default()
        }
    }

    /// Only the four stop causes, equally weighted.
    pub fn stops_only(mut self) -> Self {
        self.cause_mix = [0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        self
    }

    pub fn horizon(&self) -> usize {
        self.past + 1 + self.future
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.frame_rate
    }

    pub fn from_json(text: &str, origin: &std::path::Path) -> Result<Self> {
        let c: WorldConfig = serde_json::from_str(text).map_err(|e| Error::json(origin, e))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 12 {
            return Err(Error::config("world.image_size", "must be at least 12"));
        }
        if self.clip_len < 2 {
            return Err(Error::config("world.clip_len", "must be at least 2"));
        }
        if self.episode_len < self.clip_len {
            return Err(Error::config("world.episode_len", "must be at least clip_len"));
        }
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::config("world.frame_rate", "must be positive"));
        }
        if self.cause_mix.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::config("world.cause_mix", "weights must be non-negative"));
        }
        if self.cause_mix.iter().all(|&w| w == 0.0) {
            return Err(Error::config("world.cause_mix", "weights are all zero"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("world.noise_sigma", "must be non-negative"));
        }
        if self.episodes == 0 {
            return Err(Error::config("world.episodes", "must be at least 1"));
        }
        check_ratios(&self.split_ratios)
    }
}

fn check_ratios(r: &[f64; 3]) -> Result<()> {
    if r.iter().any(|x| !(*x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split_ratios", format!("{r:?} must be non-negative and sum to 1")));
    }
    Ok(())
}

// Independent random streams of one episode.
const STREAM_CAUSE: u64 = 0;
const STREAM_GEOMETRY: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_SENTENCE: u64 = 3;

/// Generator for stream `stream` of episode `index`: the ChaCha stream id
/// separates episodes and streams without any shared state.
pub fn episode_rng(seed: u64, index: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 * 4 + stream);
    rng
}

/// Cause of every episode, in index order.
pub fn sample_causes(config: &WorldConfig) -> Result<Vec<Cause>> {
    config.validate()?;
    let dist = WeightedIndex::new(config.cause_mix).map_err(|e| Error::config("world.cause_mix", e.to_string()))?;
    Ok((0..config.episodes)
        .map(|i| Cause::ALL[dist.sample(&mut episode_rng(config.seed, i, STREAM_CAUSE))])
        .collect())
}

/// Cause-independent layout and motion parameters of an episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub initial_speed: f64,
    /// Frame at which the reaction starts.
    pub onset: usize,
    /// Frames from onset to a full stop (or to the end of a swerve).
    pub reaction_frames: usize,
    /// Top-left corner of the sign panel.
    pub panel_row: usize,
    pub panel_col: usize,
    /// Lateral swerve amplitude, meters.
    pub swerve: f64,
    /// Fraction of the initial speed kept when yielding.
    pub yield_fraction: f64,
    /// Turn signal used when there is no cause.
    pub free_goal: Goal,
    /// Lateral acceleration of a turn, meters per second squared.
    pub turn_rate: f64,
}

impl Geometry {
    pub fn sample(config: &WorldConfig, rng: &mut impl Rng) -> Geometry {
        let n = config.episode_len;
        let s = config.image_size;
        Geometry {
            initial_speed: rng.random_range(6.0..12.0),
            onset: rng.random_range(0..=n / 3),
            reaction_frames: rng.random_range((n / 3).max(1)..=(2 * n / 3).max(1)),
            panel_row: rng.random_range(0..=(s - PANEL) / 2),
            panel_col: rng.random_range(0..=s - PANEL),
            swerve: rng.random_range(1.5..2.5),
            yield_fraction: rng.random_range(0.3..0.5),
            free_goal: Goal::ALL[rng.random_range(0..3)],
            turn_rate: rng.random_range(1.0..2.0),
        }
    }
}

/// Ego speed, longitudinal and lateral position at frames
/// `-past ..= episode_len - 1 + future`.
#[derive(Debug, Clone, PartialEq)]
pub struct Motion {
    pub speed: Vec<f64>,
    pub along: Vec<f64>,
    pub lateral: Vec<f64>,
    pub offset: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Behavior {
    Cruise(Goal),
    Stop,
    Yield,
    Swerve,
}

impl Behavior {
    pub fn of(cause: Cause, geometry: &Geometry) -> Behavior {
        match cause {
            Cause::None => Behavior::Cruise(geometry.free_goal),
            Cause::ParkedVehicle => Behavior::Swerve,
            Cause::CrossingVehicle => Behavior::Yield,
            _ => Behavior::Stop,
        }
    }
}

/// Expert motion: constant speed until the onset, then a constant
/// deceleration (`v' = max(v - a dt, floor)`), a lateral swerve, or a turn.
/// Positions integrate speed with the trapezoid rule.
pub fn expert_motion(config: &WorldConfig, geometry: &Geometry, behavior: Behavior) -> Motion {
    let dt = config.dt();
    let offset = config.past;
    let total = config.past + config.episode_len + config.future;
    let v0 = geometry.initial_speed;
    let decel = v0 / (geometry.reaction_frames as f64 * dt);
    let floor = match behavior {
        Behavior::Stop => 0.0,
        Behavior::Yield => geometry.yield_fraction * v0,
        _ => v0,
    };
    let mut speed = vec![v0; total];
    for i in 1..total {
        let frame = i as isize - offset as isize;
        speed[i] = if frame > geometry.onset as isize {
            (speed[i - 1] - decel * dt).max(floor)
        } else {
            v0
        };
    }
    let mut along = vec![0.0; total];
    for i in 1..total {
        along[i] = along[i - 1] + 0.5 * (speed[i - 1] + speed[i]) * dt;
    }
    let lateral = (0..total)
        .map(|i| {
            let since = (i as f64 - offset as f64 - geometry.onset as f64).max(0.0) * dt;
            match behavior {
                Behavior::Cruise(Goal::Left) => -0.5 * geometry.turn_rate * since * since,
                Behavior::Cruise(Goal::Right) => 0.5 * geometry.turn_rate * since * since,
                Behavior::Swerve => {
                    let u = since / (geometry.reaction_frames as f64 * dt);
                    if u < 1.0 {
                        geometry.swerve * (std::f64::consts::PI * u).sin().powi(2)
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            }
        })
        .collect();
    Motion {
        speed,
        along,
        lateral,
        offset,
    }
}

impl Motion {
    /// K positions around frame `frame`, relative to the ego position there.
    pub fn trajectory(&self, frame: usize, past: usize, future: usize) -> Trajectory {
        let c = frame + self.offset;
        Trajectory {
            points: (c - past..=c + future)
                .map(|i| [self.lateral[i] - self.lateral[c], self.along[i] - self.along[c]])
                .collect(),
        }
    }
}

const ROAD: [f32; 3] = [0.35, 0.35, 0.35];
const GRASS: [f32; 3] = [0.2, 0.45, 0.2];
const DASH: [f32; 3] = [0.9, 0.9, 0.9];
const EGO: [f32; 3] = [0.1, 0.8, 0.9];
const STOP_GLYPH: [f32; 3] = [1.0, 0.85, 0.1];
const PARKED_GLYPH: [f32; 3] = [0.2, 0.4, 1.0];
const CROSSING_GLYPH: [f32; 3] = [1.0, 0.2, 0.9];
const PANEL_COLOR: [f32; 3] = [0.05, 0.05, 0.12];
const VIEW_METERS: f64 = 32.0;
/// Side of the sign panel; blobs sit `PANEL_MARGIN` pixels inside it.
const PANEL: usize = 10;
const PANEL_MARGIN: usize = 2;
const DASH_PERIOD: f64 = 10.0;

/// Offsets of the two 2x2 blobs of a cause glyph.
fn glyph(cause: Cause) -> Option<([(usize, usize); 2], [f32; 3])> {
    let g = match cause {
        Cause::None => return None,
        Cause::RedLight => ([(0, 0), (4, 0)], STOP_GLYPH),
        Cause::StopSign => ([(0, 0), (0, 4)], STOP_GLYPH),
        Cause::CrossingPedestrian => ([(0, 0), (4, 4)], STOP_GLYPH),
        Cause::Congestion => ([(0, 4), (4, 0)], STOP_GLYPH),
        Cause::ParkedVehicle => ([(0, 0), (4, 0)], PARKED_GLYPH),
        Cause::CrossingVehicle => ([(0, 0), (0, 4)], CROSSING_GLYPH),
    };
    Some(g)
}

/// Renders frame `frame` as a `3 x S x S` image, without noise.
pub fn render_frame(config: &WorldConfig, geometry: &Geometry, cause: Cause, motion: &Motion, frame: usize) -> Vec<f32> {
    let s = config.image_size;
    let mut img = vec![0.0f32; 3 * s * s];
    let put = |img: &mut Vec<f32>, r: usize, c: usize, color: [f32; 3]| {
        if r < s && c < s {
            for (ch, v) in color.iter().enumerate() {
                img[(ch * s + r) * s + c] = *v;
            }
        }
    };
    let m_per_px = VIEW_METERS / s as f64;
    let i = frame + motion.offset;
    let shift = (motion.lateral[i] / m_per_px).round() as isize;
    let center = s as isize / 2 - shift;
    let half_road = s as isize / 4;
    for r in 0..s {
        let ahead = motion.along[i] + (s - 1 - r) as f64 * m_per_px;
        let dash = ahead.rem_euclid(DASH_PERIOD) < DASH_PERIOD / 2.0;
        for c in 0..s {
            let dc = c as isize - center;
            let color = if dc.abs() > half_road {
                GRASS
            } else if dash && (dc == 0 || dc == -1) {
                DASH
            } else {
                ROAD
            };
            put(&mut img, r, c, color);
        }
    }
    for r in 0..PANEL {
        for c in 0..PANEL {
            put(&mut img, geometry.panel_row + r, geometry.panel_col + c, PANEL_COLOR);
        }
    }
    let (r0, c0) = (geometry.panel_row + PANEL_MARGIN, geometry.panel_col + PANEL_MARGIN);
    let blobs: Vec<((usize, usize), [f32; 3])> = match glyph(cause) {
        Some((offsets, color)) => offsets.iter().map(|&(r, c)| ((r0 + r, c0 + c), color)).collect(),
        // a lone blob of the stop color
        None => vec![((r0 + 2, c0 + 2), STOP_GLYPH)],
    };
    for ((r, c), color) in blobs {
        for dr in 0..2 {
            for dc in 0..2 {
                put(&mut img, r + dr, c + dc, color);
            }
        }
    }
    for dr in 0..2 {
        for dc in 0..2 {
            put(&mut img, s - 3 + dr, s / 2 - 1 + dc, EGO);
        }
    }
    img
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: usize,
    pub cause: Cause,
    pub geometry: Geometry,
    /// `N x 3 x S x S`, values in [0, 1].
    pub frames: Tensor<f32>,
    pub labels: Vec<Cause>,
    pub goals: Vec<Goal>,
    pub trajectories: Vec<Trajectory>,
    pub speeds: Vec<f64>,
    /// Justification sentence; absent when there is no cause.
    pub sentence: Option<String>,
}

pub fn generate_episode(config: &WorldConfig, id: usize, cause: Cause) -> Result<Episode> {
    let geometry = Geometry::sample(config, &mut episode_rng(config.seed, id, STREAM_GEOMETRY));
    let behavior = Behavior::of(cause, &geometry);
    let motion = expert_motion(config, &geometry, behavior);
    let s = config.image_size;
    let n = config.episode_len;
    let mut data = Vec::with_capacity(n * 3 * s * s);
    let mut noise_rng = episode_rng(config.seed, id, STREAM_NOISE);
    let noise = Normal::new(0.0, config.noise_sigma.max(0.0)).map_err(|e| Error::config("world.noise_sigma", e.to_string()))?;
    for f in 0..n {
        for v in render_frame(config, &geometry, cause, &motion, f) {
            let x = if config.noise_sigma > 0.0 {
                v + noise.sample(&mut noise_rng) as f32
            } else {
                v
            };
            data.push(x.clamp(0.0, 1.0));
        }
    }
    let goal = match behavior {
        Behavior::Cruise(g) => g,
        _ => Goal::Straight,
    };
    let sentence = if cause == Cause::None {
        None
    } else {
        let mut rng = episode_rng(config.seed, id, STREAM_SENTENCE);
        Some(sentence_for(cause, config.sentence_variation.then_some(&mut rng))?)
    };
    Ok(Episode {
        id,
        cause,
        frames: Tensor::new(&[n, 3, s, s], data)?,
        labels: vec![cause; n],
        goals: vec![goal; n],
        trajectories: (0..n).map(|f| motion.trajectory(f, config.past, config.future)).collect(),
        speeds: motion.speed[motion.offset..motion.offset + n].to_vec(),
        sentence,
        geometry,
    })
}

/// Justification for a cause. Without an RNG the first template is used.
pub fn sentence_for(cause: Cause, rng: Option<&mut ChaCha8Rng>) -> Result<String> {
    let templates: &[&str] = match cause {
        Cause::None => return Err(Error::domain("sentence_for", "segment has no cause label")),
        Cause::RedLight => &[
            "because the light is red",
            "since the light is red",
            "because the traffic light is red",
        ],
        Cause::StopSign => &[
            "because there is a stop sign",
            "since there is a stop sign",
            "because of the stop sign",
        ],
        Cause::CrossingPedestrian => &[
            "because a pedestrian is crossing",
            "since a pedestrian is crossing",
            "because someone is crossing the road",
        ],
        Cause::Congestion => &[
            "because traffic is congested",
            "since the traffic is heavy",
            "because of heavy traffic",
        ],
        Cause::ParkedVehicle => &[
            "to avoid a parked car",
            "to pass a parked vehicle",
            "because a car is parked ahead",
        ],
        Cause::CrossingVehicle => &[
            "because a car is crossing",
            "since a vehicle is crossing",
            "to yield to a crossing car",
        ],
    };
    let i = rng.map_or(0, |r| r.random_range(0..templates.len()));
    Ok(templates[i].to_owned())
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn get(&self, name: &str) -> Result<&[usize]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

/// Seeded shuffle of `0..n` cut into train/val/test by `ratios`.
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<Split> {
    check_ratios(&ratios)?;
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    rand::seq::SliceRandom::shuffle(&mut ids[..], &mut rng);
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut out = Split {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    };
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// One training or evaluation example: a clip ending at `frame`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleRef {
    pub episode: usize,
    pub frame: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: WorldConfig,
    pub episodes: Vec<Episode>,
    pub split: Split,
    pub vocabulary: Vocabulary,
    channels_last: Vec<Tensor<f32>>,
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.episodes == other.episodes
            && self.split == other.split
            && self.vocabulary == other.vocabulary
    }
}

pub fn generate(config: &WorldConfig) -> Result<Dataset> {
    let causes = sample_causes(config)?;
    let episodes = causes
        .par_iter()
        .enumerate()
        .map(|(i, &c)| generate_episode(config, i, c))
        .collect::<Result<Vec<_>>>()?;
    let split = split(config.episodes, config.split_ratios, config.seed)?;
    Dataset::assemble(config.clone(), episodes, split)
}

const FORMAT: &str = "beef-synthworld-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: WorldConfig,
    split: Split,
    vocabulary: String,
    sentences: String,
    episodes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub clip_id: String,
    pub episode: usize,
    pub cause: Cause,
    pub sentence: String,
}

impl Dataset {
    fn assemble(config: WorldConfig, episodes: Vec<Episode>, split: Split) -> Result<Self> {
        let sentences: Vec<&str> = episodes.iter().filter_map(|e| e.sentence.as_deref()).collect();
        let vocabulary = Vocabulary::build(&sentences);
        let channels_last = episodes
            .iter()
            .map(|e| to_channels_last(&e.frames))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config,
            episodes,
            split,
            vocabulary,
            channels_last,
        })
    }

    pub fn samples(&self, split: &str) -> Result<Vec<SampleRef>> {
        let ids = self.split.get(split)?;
        Ok(ids
            .iter()
            .flat_map(|&e| (self.config.clip_len - 1..self.config.episode_len).map(move |f| SampleRef { episode: e, frame: f }))
            .collect())
    }

    /// Channels-last `clip_len x S x S x 3` clip ending at `sample.frame`.
    pub fn clip(&self, sample: SampleRef) -> Tensor<f32> {
        let s = self.config.image_size;
        let per_frame = s * s * 3;
        let start = sample.frame + 1 - self.config.clip_len;
        let data = &self.channels_last[sample.episode].data()[start * per_frame..(sample.frame + 1) * per_frame];
        Tensor::new(&[self.config.clip_len, s, s, 3], data.to_vec()).expect("clip shape")
    }

    pub fn episode(&self, id: usize) -> Result<&Episode> {
        self.episodes
            .get(id)
            .ok_or_else(|| Error::config("episode", format!("no episode {id}")))
    }

    pub fn sentence_records(&self) -> Vec<SentenceRecord> {
        self.episodes
            .iter()
            .filter_map(|e| {
                e.sentence.as_ref().map(|s| SentenceRecord {
                    clip_id: format!("ep{:05}", e.id),
                    episode: e.id,
                    cause: e.cause,
                    sentence: s.clone(),
                })
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let ep_dir = dir.join("episodes");
        std::fs::create_dir_all(&ep_dir).map_err(|e| Error::io(&ep_dir, e))?;
        let mut names = Vec::with_capacity(self.episodes.len());
        for e in &self.episodes {
            let name = format!("episodes/ep{:05}.beef", e.id);
            write_container(&dir.join(&name), &episode_container(e, &self.config)?)?;
            names.push(name);
        }
        self.vocabulary.write(&dir.join("vocab.txt"))?;
        let mut lines = String::new();
        for r in self.sentence_records() {
            lines.push_str(&serde_json::to_string(&r).expect("record serializes"));
            lines.push('\n');
        }
        let sp = dir.join("sentences.jsonl");
        std::fs::write(&sp, lines).map_err(|e| Error::io(&sp, e))?;
        let manifest = Manifest {
            format: FORMAT.into(),
            config: self.config.clone(),
            split: self.split.clone(),
            vocabulary: "vocab.txt".into(),
            sentences: "sentences.jsonl".into(),
            episodes: names,
        };
        let mp = dir.join("manifest.json");
        std::fs::write(&mp, serde_json::to_string_pretty(&manifest).expect("manifest serializes"))
            .map_err(|e| Error::io(&mp, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join("manifest.json");
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(&mp, e))?;
        if manifest.format != FORMAT {
            return Err(Error::Format(format!("{}: unknown dataset format `{}`", mp.display(), manifest.format)));
        }
        manifest.config.validate()?;
        let mut episodes = Vec::with_capacity(manifest.episodes.len());
        for (i, name) in manifest.episodes.iter().enumerate() {
            let path: PathBuf = dir.join(name);
            let c = read_container(&path)?;
            episodes.push(episode_from_container(&c, i, &manifest.config).map_err(|e| match e {
                Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
                other => other,
            })?);
        }
        let sp = dir.join(&manifest.sentences);
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let r: SentenceRecord = serde_json::from_str(line).map_err(|e| Error::json(&sp, e))?;
            let ep = episodes
                .get_mut(r.episode)
                .ok_or_else(|| Error::Format(format!("{}: unknown episode {}", sp.display(), r.episode)))?;
            ep.sentence = Some(r.sentence);
        }
        let ds = Dataset::assemble(manifest.config, episodes, manifest.split)?;
        let vocab = Vocabulary::read(&dir.join(&manifest.vocabulary))?;
        if vocab != ds.vocabulary {
            return Err(Error::Format("vocabulary file does not match the sentences".into()));
        }
        Ok(ds)
    }
}

fn episode_container(e: &Episode, config: &WorldConfig) -> Result<Container> {
    let n = e.labels.len();
    let k = config.horizon();
    let mut c = Container::new();
    c.insert("frames", Entry::from(&e.frames));
    c.insert(
        "labels",
        Entry::I64 {
            shape: vec![n],
            data: e.labels.iter().map(|l| l.index() as i64).collect(),
        },
    );
    c.insert(
        "goals",
        Entry::I64 {
            shape: vec![n],
            data: e.goals.iter().map(|g| g.index() as i64).collect(),
        },
    );
    let traj: Vec<f64> = e.trajectories.iter().flat_map(|t| t.flatten()).collect();
    c.insert("trajectories", Entry::from(&Tensor::new(&[n, k, 2], traj)?));
    c.insert("speeds", Entry::from(&Tensor::vector(e.speeds.clone())));
    c.insert(
        "meta.geometry",
        Entry::text(&serde_json::to_string(&e.geometry).expect("geometry serializes")),
    );
    c.insert("meta.cause", Entry::i64s(vec![e.cause.index() as i64]));
    Ok(c)
}

fn episode_from_container(c: &Container, id: usize, config: &WorldConfig) -> Result<Episode> {
    let frames: Tensor<f32> = c
        .require("frames")?
        .to_tensor()
        .ok_or_else(|| Error::Format("frames must be float".into()))?;
    let ints = |name: &str| -> Result<Vec<i64>> {
        match c.require(name)? {
            Entry::I64 { data, .. } => Ok(data.clone()),
            _ => Err(Error::Format(format!("`{name}` must be i64"))),
        }
    };
    let labels = ints("labels")?
        .into_iter()
        .map(|l| Cause::from_index(l as usize))
        .collect::<Result<Vec<_>>>()?;
    let goals = ints("goals")?
        .into_iter()
        .map(|g| Goal::from_index(g as usize))
        .collect::<Result<Vec<_>>>()?;
    let traj: Tensor<f64> = c
        .require("trajectories")?
        .to_tensor()
        .ok_or_else(|| Error::Format("trajectories must be float".into()))?;
    let per = config.horizon() * 2;
    let trajectories = traj
        .data()
        .chunks_exact(per)
        .map(Trajectory::unflatten)
        .collect::<Result<Vec<_>>>()?;
    let speeds: Tensor<f64> = c
        .require("speeds")?
        .to_tensor()
        .ok_or_else(|| Error::Format("speeds must be float".into()))?;
    let geometry_text = c
        .require("meta.geometry")?
        .as_text()
        .ok_or_else(|| Error::Format("meta.geometry must be text".into()))?;
    let geometry: Geometry =
        serde_json::from_str(&geometry_text).map_err(|e| Error::Format(format!("meta.geometry: {e}")))?;
    let cause = Cause::from_index(ints("meta.cause")?.first().copied().unwrap_or(-1) as usize)?;
    let n = labels.len();
    if goals.len() != n || trajectories.len() != n || speeds.numel() != n || frames.shape().first() != Some(&n) {
        return Err(Error::Format("per-frame arrays disagree in length".into()));
    }
    Ok(Episode {
        id,
        cause,
        geometry,
        frames,
        labels,
        goals,
        trajectories,
        speeds: speeds.into_data(),
        sentence: None,
    })
}

/// Number of episodes of each cause.
pub fn cause_counts(causes: &[Cause]) -> BTreeMap<Cause, usize> {
    let mut m = BTreeMap::new();
    for &c in causes {
        *m.entry(c).or_insert(0) += 1;
    }
    m
}
