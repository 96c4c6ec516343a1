//! The full driving model: backbone, drive head and explanation head.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{space_time_avg_pool, Backbone, BackboneConfig, Goal};
use crate::decoder::{ControlHead, DecoderConfig, Trajectory, TrajectoryDecoder};
use crate::error::{Error, Result};
use crate::explain::{BaselineConfig, BaselineHead, BaselineVariant, Cause};
use crate::fusion::{Fusion, FusionConfig, FusionKind};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// What the explanation head reads and how it combines it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplainerKind {
    Bilinear,
    Block,
    Mutan,
    Mlb,
    Mfb,
    CatMlp,
    LastLayer,
    LastLayerPlusBlinker,
    Layer3Mlp,
    DecisionMlp,
}

impl ExplainerKind {
    pub const ALL: [ExplainerKind; 10] = [
        ExplainerKind::Bilinear,
        ExplainerKind::Block,
        ExplainerKind::Mutan,
        ExplainerKind::Mlb,
        ExplainerKind::Mfb,
        ExplainerKind::CatMlp,
        ExplainerKind::LastLayer,
        ExplainerKind::LastLayerPlusBlinker,
        ExplainerKind::Layer3Mlp,
        ExplainerKind::DecisionMlp,
    ];

    pub fn fusion(self) -> Option<FusionKind> {
        Some(match self {
            ExplainerKind::Bilinear => FusionKind::Bilinear,
            ExplainerKind::Block => FusionKind::Block,
            ExplainerKind::Mutan => FusionKind::Mutan,
            ExplainerKind::Mlb => FusionKind::Mlb,
            ExplainerKind::Mfb => FusionKind::Mfb,
            ExplainerKind::CatMlp => FusionKind::CatMlp,
            _ => return None,
        })
    }

    pub fn baseline(self) -> Option<BaselineVariant> {
        Some(match self {
            ExplainerKind::LastLayer => BaselineVariant::LastLayer,
            ExplainerKind::LastLayerPlusBlinker => BaselineVariant::LastLayerPlusBlinker,
            ExplainerKind::Layer3Mlp => BaselineVariant::Layer3Mlp,
            ExplainerKind::DecisionMlp => BaselineVariant::DecisionMlp,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match (self.fusion(), self.baseline()) {
            (Some(f), _) => f.name(),
            (_, Some(b)) => b.name(),
            _ => unreachable!(),
        }
    }

    /// Whether the head reads a tapped intermediate layer.
    pub fn uses_tap(self) -> bool {
        self.fusion().is_some() || self == ExplainerKind::Layer3Mlp
    }
}

impl fmt::Display for ExplainerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExplainerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExplainerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("explainer.kind", format!("unknown explainer `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    pub kind: ExplainerKind,
    /// Tapped backbone layer (1-based).
    pub layer: usize,
    pub proj_dim: usize,
    pub block_count: usize,
    pub rank: usize,
    pub hidden: usize,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            kind: ExplainerKind::Block,
            layer: 3,
            proj_dim: 260,
            block_count: 5,
            rank: 5,
            hidden: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriveHeadKind {
    /// Future trajectory (end-to-mid).
    Trajectory,
    /// Acceleration and course change (end-to-end).
    Control,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub drive_head: DriveHeadKind,
    pub explainer: ExplainerConfig,
    /// Multiplier from world units to network units for drive targets.
    pub target_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            drive_head: DriveHeadKind::Trajectory,
            explainer: ExplainerConfig::default(),
            target_scale: 0.1,
        }
    }
}

impl ModelConfig {
    /// Narrow network for 16x16, 4-frame clips.
    pub fn tiny() -> Self {
        let mut backbone = BackboneConfig::from_lists(&[6, 8, 12, 16, 16], &[2, 1, 2, 2, 1], &[1, 1, 2, 2, 1]);
        backbone.goal_dim = 8;
        ModelConfig {
            backbone,
            decoder: DecoderConfig {
                hidden: 24,
                ..DecoderConfig::default()
            },
            drive_head: DriveHeadKind::Trajectory,
            explainer: ExplainerConfig {
                proj_dim: 40,
                block_count: 5,
                rank: 4,
                hidden: 32,
                ..ExplainerConfig::default()
            },
            target_scale: 0.1,
        }
    }

    pub fn with_explainer(mut self, kind: ExplainerKind, layer: usize) -> Self {
        self.explainer.kind = kind;
        self.explainer.layer = layer;
        self
    }

    /// Width of the decision vector.
    pub fn decision_dim(&self) -> usize {
        match self.drive_head {
            DriveHeadKind::Trajectory => self.decoder.decision_dim(),
            DriveHeadKind::Control => 2,
        }
    }

    pub fn fusion_config(&self) -> Result<Option<FusionConfig>> {
        let e = &self.explainer;
        let Some(kind) = e.kind.fusion() else { return Ok(None) };
        Ok(Some(FusionConfig {
            kind,
            dim_m: self.decision_dim(),
            dim_v: self.backbone.layer_dim(e.layer)?,
            dim_out: Cause::COUNT,
            proj_dim: e.proj_dim,
            block_count: e.block_count,
            rank: e.rank,
            hidden: e.hidden,
        }))
    }

    fn baseline_config(&self) -> Result<Option<BaselineConfig>> {
        let e = &self.explainer;
        let Some(variant) = e.kind.baseline() else { return Ok(None) };
        let input = match variant {
            BaselineVariant::LastLayer => self.backbone.repr_dim(),
            BaselineVariant::LastLayerPlusBlinker => self.backbone.repr_dim() + self.backbone.goal_dim,
            BaselineVariant::Layer3Mlp => self.backbone.layer_dim(e.layer)?,
            BaselineVariant::DecisionMlp => self.decision_dim(),
        };
        Ok(Some(BaselineConfig {
            variant,
            input,
            classes: Cause::COUNT,
            hidden: e.hidden,
        }))
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        self.backbone.check_layer(self.explainer.layer)?;
        if !(self.target_scale > 0.0 && self.target_scale.is_finite()) {
            return Err(Error::config("model.target_scale", "must be positive"));
        }
        if let Some(f) = self.fusion_config()? {
            f.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DriveHead {
    Trajectory(TrajectoryDecoder),
    Control(ControlHead),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Explainer {
    Fusion(Fusion),
    Baseline(BaselineHead),
}

/// Everything the model computes for one clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Forward {
    /// Drive output in network units: flattened trajectory or control.
    pub drive: Var,
    pub decision: Var,
    /// Pooled features of the tapped layer, when the head reads one.
    pub perceptual: Option<Var>,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ForwardOptions {
    /// Stop explanation gradients from reaching the drive head through the
    /// decision vector.
    pub detach_decision: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeefModel {
    config: ModelConfig,
    backbone: Backbone,
    drive: DriveHead,
    explainer: Explainer,
}

impl BeefModel {
    pub fn new<T: Element>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone.clone(), store, rng)?;
        let input = config.backbone.repr_dim() + config.backbone.goal_dim;
        let drive = match config.drive_head {
            DriveHeadKind::Trajectory => {
                DriveHead::Trajectory(TrajectoryDecoder::new(config.decoder.clone(), input, store, rng)?)
            }
            DriveHeadKind::Control => DriveHead::Control(ControlHead::new(input, store, rng)),
        };
        let explainer = match (config.fusion_config()?, config.baseline_config()?) {
            (Some(f), _) => Explainer::Fusion(Fusion::new(f, store, "fusion", rng)?),
            (_, Some(b)) => Explainer::Baseline(BaselineHead::new(b, store, rng)?),
            _ => unreachable!(),
        };
        Ok(BeefModel {
            config,
            backbone,
            drive,
            explainer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn drive_head(&self) -> &DriveHead {
        &self.drive
    }

    pub fn explainer(&self) -> &Explainer {
        &self.explainer
    }

    /// Parameters of the explanation head.
    pub fn explainer_params<T: Element>(&self, store: &ParamStore<T>) -> Vec<ParamId> {
        store
            .iter()
            .filter(|(_, p)| p.name.starts_with("fusion.") || p.name.starts_with("baseline."))
            .map(|(id, _)| id)
            .collect()
    }

    fn taps(&self) -> Vec<usize> {
        if self.config.explainer.kind.uses_tap() {
            vec![self.config.explainer.layer]
        } else {
            Vec::new()
        }
    }

    /// Runs backbone, drive head and explanation head on a channels-last clip.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        clip: Var,
        goal: Goal,
        options: ForwardOptions,
    ) -> Result<Forward> {
        let enc = self.backbone.encode(tape, store, clip, &self.taps())?;
        let g = self.backbone.embed_goal(tape, store, goal)?;
        let (drive, decision) = match &self.drive {
            DriveHead::Trajectory(d) => {
                let out = d.decode(tape, store, enc.repr, g)?;
                (out.trajectory, out.decision)
            }
            DriveHead::Control(c) => {
                let out = c.decode(tape, store, enc.repr, g)?;
                (out, out)
            }
        };
        let perceptual = match enc.tap(self.config.explainer.layer) {
            Some(a) => Some(space_time_avg_pool(tape, a)?),
            None => None,
        };
        let logits = match &self.explainer {
            Explainer::Fusion(f) => {
                let m = if options.detach_decision { tape.detach(decision)? } else { decision };
                let v = perceptual.expect("fusion reads a tap");
                f.forward(tape, store, m, v)?
            }
            Explainer::Baseline(b) => {
                let features = match b.config().variant {
                    BaselineVariant::LastLayer => enc.repr,
                    BaselineVariant::LastLayerPlusBlinker => tape.concat(&[enc.repr, g])?,
                    BaselineVariant::Layer3Mlp => perceptual.expect("layer head reads a tap"),
                    BaselineVariant::DecisionMlp => tape.detach(decision)?,
                };
                b.forward(tape, store, features)?
            }
        };
        let probs = tape.softmax(logits, 1.0)?;
        Ok(Forward {
            drive,
            decision,
            perceptual,
            logits,
            probs,
        })
    }

    /// Decision vector and pooled layer-`layer` features of one clip.
    pub fn frame_features<T: Element>(
        &self,
        store: &ParamStore<T>,
        clip: &Tensor<T>,
        goal: Goal,
        layer: usize,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let x = tape.input(clip.clone())?;
        let enc = self.backbone.encode(&mut tape, store, x, &[layer])?;
        let g = self.backbone.embed_goal(&mut tape, store, goal)?;
        let decision = match &self.drive {
            DriveHead::Trajectory(d) => d.decode(&mut tape, store, enc.repr, g)?.decision,
            DriveHead::Control(c) => c.decode(&mut tape, store, enc.repr, g)?,
        };
        let tap = enc.tap(layer).expect("requested tap");
        let v = space_time_avg_pool(&mut tape, tap)?;
        Ok((tape.value(decision).clone(), tape.value(v).clone()))
    }

    /// Drive target in network units for the sample whose expert
    /// trajectory is `trajectory`.
    pub fn drive_target(&self, trajectory: &Trajectory, dt: f64) -> Result<Vec<f64>> {
        let s = self.config.target_scale;
        let raw = match self.config.drive_head {
            DriveHeadKind::Trajectory => trajectory.flatten(),
            DriveHeadKind::Control => {
                let c = control_from_trajectory(trajectory, self.config.decoder.past, dt)?;
                vec![c.0, c.1]
            }
        };
        Ok(raw.into_iter().map(|x| x * s).collect())
    }

    /// Drive output in world units.
    pub fn drive_to_world<T: Element>(&self, drive: &Tensor<T>) -> Vec<f64> {
        let s = self.config.target_scale;
        drive.to_f64_vec().into_iter().map(|x| x / s).collect()
    }
}

/// Acceleration and heading change at the current position of a trajectory
/// whose current point sits at index `past`.
pub fn control_from_trajectory(t: &Trajectory, past: usize, dt: f64) -> Result<(f64, f64)> {
    if past == 0 || past + 1 >= t.points.len() {
        return Err(Error::domain("control_from_trajectory", "need one point on each side of the current one"));
    }
    let (a, b, c) = (t.points[past - 1], t.points[past], t.points[past + 1]);
    let back = [b[0] - a[0], b[1] - a[1]];
    let fwd = [c[0] - b[0], c[1] - b[1]];
    let speed = |d: [f64; 2]| d[0].hypot(d[1]) / dt;
    let heading = |d: [f64; 2]| if d == [0.0, 0.0] { 0.0 } else { d[0].atan2(d[1]) };
    Ok(((speed(fwd) - speed(back)) / dt, heading(fwd) - heading(back)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn clip() -> Tensor<f64> {
        let data = (0..4 * 16 * 16 * 3).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        Tensor::new(&[4, 16, 16, 3], data).unwrap()
    }

    #[test]
    fn every_explainer_builds_and_runs() {
        for kind in ExplainerKind::ALL {
            for head in [DriveHeadKind::Trajectory, DriveHeadKind::Control] {
                let mut cfg = ModelConfig::tiny().with_explainer(kind, 3);
                cfg.drive_head = head;
                let mut store = ParamStore::<f64>::new();
                let model = BeefModel::new(cfg, &mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
                let mut tape = Tape::new();
                let x = tape.input(clip()).unwrap();
                let out = model.forward(&mut tape, &store, x, Goal::Left, ForwardOptions::default()).unwrap();
                assert_eq!(tape.shape(out.probs), &[Cause::COUNT]);
                let sum: f64 = tape.value(out.probs).data().iter().sum();
                assert!((sum - 1.0).abs() < 1e-12, "{kind}");
                let want = if head == DriveHeadKind::Trajectory { 26 } else { 2 };
                assert_eq!(tape.shape(out.drive), &[want]);
            }
        }
    }

    #[test]
    fn explainer_names_round_trip() {
        for k in ExplainerKind::ALL {
            assert_eq!(k.name().parse::<ExplainerKind>().unwrap(), k);
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert!("lstm".parse::<ExplainerKind>().is_err());
    }

    #[test]
    fn bad_tap_layer_is_rejected() {
        let cfg = ModelConfig::tiny().with_explainer(ExplainerKind::Block, 6);
        assert!(BeefModel::new(cfg, &mut ParamStore::<f32>::new(), &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn control_of_constant_speed_straight_line() {
        let t = Trajectory {
            points: (0..5).map(|k| [0.0, 3.0 * (k as f64 - 2.0)]).collect(),
        };
        let (acc, turn) = control_from_trajectory(&t, 2, 0.5).unwrap();
        assert!(acc.abs() < 1e-12 && turn.abs() < 1e-12);
        let t = Trajectory {
            points: vec![[0.0, -4.0], [0.0, 0.0], [0.0, 2.0]],
        };
        // speeds 8 then 4 over dt 0.5
        assert!((control_from_trajectory(&t, 1, 0.5).unwrap().0 + 8.0).abs() < 1e-12);
    }

    #[test]
    fn detached_decision_blocks_explanation_gradient_to_drive_head() {
        let mut store = ParamStore::<f64>::new();
        let model = BeefModel::new(ModelConfig::tiny(), &mut store, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let grads_for = |detach: bool| {
            let mut tape = Tape::new();
            let x = tape.input(clip()).unwrap();
            let out = model
                .forward(&mut tape, &store, x, Goal::Straight, ForwardOptions { detach_decision: detach })
                .unwrap();
            let (loss, _) = crate::explain::explain_loss(&mut tape, &[out.probs], 2).unwrap();
            let g = tape.backward(loss).unwrap();
            let mut s = store.clone();
            s.zero_grad();
            g.accumulate_into(&mut s);
            s
        };
        let norm = |s: &ParamStore<f64>, prefix: &str| -> f64 {
            s.iter()
                .filter(|(_, p)| p.name.starts_with(prefix))
                .flat_map(|(_, p)| p.grad.data().to_vec())
                .map(|g| g * g)
                .sum()
        };
        let attached = grads_for(false);
        let detached = grads_for(true);
        assert!(norm(&attached, "decoder.") > 0.0);
        assert_eq!(norm(&detached, "decoder."), 0.0);
        for l in 4..=5 {
            assert_eq!(norm(&detached, &format!("backbone.stage{l}.")), 0.0);
        }
        for l in 1..=3 {
            assert!(norm(&detached, &format!("backbone.stage{l}.")) > 0.0);
        }
    }
}
