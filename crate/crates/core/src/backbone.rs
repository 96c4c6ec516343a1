//! Spatio-temporal encoder: a stack of factorised (2+1)D stages over a
//! channels-last clip, plus the turn-signal embedding.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::kernels::ConvGeometry;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Goal {
    Left,
    Straight,
    Right,
}

impl Goal {
    pub const ALL: [Goal; 3] = [Goal::Left, Goal::Straight, Goal::Right];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Goal> {
        Goal::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::domain("embed_goal", format!("unknown goal index {i}")))
    }
}

impl FromStr for Goal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Goal> {
        match s {
            "left" => Ok(Goal::Left),
            "straight" => Ok(Goal::Straight),
            "right" => Ok(Goal::Right),
            other => Err(Error::domain("embed_goal", format!("unknown goal token `{other}`"))),
        }
    }
}

impl fmt::Display for Goal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Goal::Left => "left",
            Goal::Straight => "straight",
            Goal::Right => "right",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub spatial_stride: usize,
    pub temporal_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub spatial_kernel: usize,
    pub temporal_kernel: usize,
    pub goal_dim: usize,
    pub residual: bool,
}

impl Default for BackboneConfig {
    /// Five stages, channels (8, 16, 24, 32, 32), for 16-frame 32x32 clips.
    fn default() -> Self {
        BackboneConfig::from_lists(&[8, 16, 24, 32, 32], &[1, 2, 2, 2, 1], &[1, 1, 2, 2, 1])
    }
}

impl BackboneConfig {
    pub fn from_lists(channels: &[usize], spatial: &[usize], temporal: &[usize]) -> Self {
        BackboneConfig {
            in_channels: 3,
            stages: channels
                .iter()
                .zip(spatial)
                .zip(temporal)
                .map(|((&c, &s), &t)| StageConfig {
                    channels: c,
                    spatial_stride: s,
                    temporal_stride: t,
                })
                .collect(),
            spatial_kernel: 3,
            temporal_kernel: 3,
            goal_dim: 16,
            residual: true,
        }
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    /// Width of the clip representation (channels of the last stage).
    pub fn repr_dim(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels)
    }

    /// Channel width at layer `layer` (1-based).
    pub fn layer_dim(&self, layer: usize) -> Result<usize> {
        self.check_layer(layer)?;
        Ok(self.stages[layer - 1].channels)
    }

    pub fn check_layer(&self, layer: usize) -> Result<()> {
        if layer == 0 || layer > self.stages.len() {
            return Err(Error::config(
                "tap",
                format!("layer {layer} outside 1..={}", self.stages.len()),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() < 2 {
            return Err(Error::config("backbone.stages", "need at least 2 stages"));
        }
        if self.in_channels == 0 || self.goal_dim == 0 {
            return Err(Error::config("backbone", "in_channels and goal_dim must be at least 1"));
        }
        for (field, k) in [("spatial_kernel", self.spatial_kernel), ("temporal_kernel", self.temporal_kernel)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::config(format!("backbone.{field}"), "must be odd"));
            }
        }
        let mut prev = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if s.channels == 0 || s.spatial_stride == 0 || s.temporal_stride == 0 {
                return Err(Error::config(format!("backbone.stages[{i}]"), "sizes must be at least 1"));
            }
            if s.channels < prev {
                return Err(Error::config(
                    format!("backbone.stages[{i}].channels"),
                    "channel widths must be non-decreasing",
                ));
            }
            prev = s.channels;
        }
        Ok(())
    }

    pub fn spatial_geometry(&self, stage: &StageConfig) -> ConvGeometry {
        let k = self.spatial_kernel;
        ConvGeometry {
            kernel: [1, k, k],
            stride: [1, stage.spatial_stride, stage.spatial_stride],
            padding: [0, k / 2, k / 2],
        }
    }

    pub fn temporal_geometry(&self, stage: &StageConfig) -> ConvGeometry {
        let k = self.temporal_kernel;
        ConvGeometry {
            kernel: [k, 1, 1],
            stride: [stage.temporal_stride, 1, 1],
            padding: [k / 2, 0, 0],
        }
    }

    /// `t x h x w x c` shape after every stage for a `t x h x w` input.
    pub fn output_shapes(&self, input: [usize; 3]) -> Result<Vec<[usize; 4]>> {
        let mut dims = input;
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            dims = self.spatial_geometry(s).output_dims(dims)?;
            dims = self.temporal_geometry(s).output_dims(dims)?;
            out.push([dims[0], dims[1], dims[2], s.channels]);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    pub spatial_weight: ParamId,
    pub spatial_bias: ParamId,
    pub temporal_weight: ParamId,
    pub temporal_bias: ParamId,
}

/// A clip encoded by the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    /// `(layer, activation)` for each requested tap, in ascending layer order.
    pub taps: Vec<(usize, Var)>,
    /// Space-time pooled final stage.
    pub repr: Var,
}

impl Encoded {
    pub fn tap(&self, layer: usize) -> Option<Var> {
        self.taps.iter().find(|(l, _)| *l == layer).map(|&(_, v)| v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<StageParams>,
    goal_table: ParamId,
}

impl Backbone {
    pub fn new<T: Element>(config: BackboneConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (ks, kt) = (config.spatial_kernel, config.temporal_kernel);
        let mut c_in = config.in_channels;
        let mut stages = Vec::with_capacity(config.stages.len());
        for (i, s) in config.stages.iter().enumerate() {
            let p = format!("backbone.stage{}", i + 1);
            let c = s.channels;
            stages.push(StageParams {
                spatial_weight: store.add_xavier(
                    format!("{p}.conv_s.weight"),
                    &[1, ks, ks, c_in, c],
                    ks * ks * c_in,
                    ks * ks * c,
                    rng,
                ),
                spatial_bias: store.add_zeros(format!("{p}.conv_s.bias"), &[c]),
                temporal_weight: store.add_xavier(format!("{p}.conv_t.weight"), &[kt, 1, 1, c, c], kt * c, kt * c, rng),
                temporal_bias: store.add_zeros(format!("{p}.conv_t.bias"), &[c]),
            });
            c_in = c;
        }
        let goal_table = store.add_xavier("backbone.goal_embedding", &[3, config.goal_dim], 3, config.goal_dim, rng);
        Ok(Backbone {
            config,
            stages,
            goal_table,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn stage_params(&self, layer: usize) -> &StageParams {
        &self.stages[layer - 1]
    }

    pub fn goal_table(&self) -> ParamId {
        self.goal_table
    }

    /// Runs stage `layer` (1-based) on `x`.
    pub fn stage<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, layer: usize, x: Var) -> Result<Var> {
        self.config.check_layer(layer)?;
        let cfg = &self.config.stages[layer - 1];
        conv2plus1d_block(
            tape,
            store,
            x,
            &self.stages[layer - 1],
            self.config.spatial_geometry(cfg),
            self.config.temporal_geometry(cfg),
            self.config.residual,
        )
    }

    /// Encodes a `t x h x w x c` clip, returning the requested taps and the
    /// pooled clip representation.
    pub fn encode<T: Element>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        clip: Var,
        taps: &[usize],
    ) -> Result<Encoded> {
        for &l in taps {
            self.config.check_layer(l)?;
        }
        let shape = tape.shape(clip);
        if shape.len() != 4 || shape[3] != self.config.in_channels {
            return Err(Error::shape("encode", &[0, 0, 0, self.config.in_channels], shape));
        }
        if shape[0] == 0 || shape[..3].iter().any(|&d| d == 0) {
            return Err(Error::domain("encode", "empty clip"));
        }
        let mut x = clip;
        let mut tapped = Vec::new();
        for layer in 1..=self.config.stages.len() {
            x = self.stage(tape, store, layer, x)?;
            if taps.contains(&layer) {
                tapped.push((layer, x));
            }
        }
        let repr = space_time_avg_pool(tape, x)?;
        Ok(Encoded { taps: tapped, repr })
    }

    pub fn embed_goal<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, goal: Goal) -> Result<Var> {
        let table = tape.param(store, self.goal_table);
        tape.gather(table, goal.index())
    }
}

/// Spatial conv, ReLU, temporal conv, ReLU, plus the input when the
/// shapes agree and `residual` is set.
pub fn conv2plus1d_block<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    params: &StageParams,
    spatial: ConvGeometry,
    temporal: ConvGeometry,
    residual: bool,
) -> Result<Var> {
    let ws = tape.param(store, params.spatial_weight);
    let bs = tape.param(store, params.spatial_bias);
    let wt = tape.param(store, params.temporal_weight);
    let bt = tape.param(store, params.temporal_bias);
    let h = tape.conv3d(x, ws, bs, spatial)?;
    let h = tape.relu(h)?;
    let h = tape.conv3d(h, wt, bt, temporal)?;
    let h = tape.relu(h)?;
    if residual && tape.shape(h) == tape.shape(x) {
        tape.add(h, x)
    } else {
        Ok(h)
    }
}

/// Mean over time and space of a `t x h x w x c` activation.
pub fn space_time_avg_pool<T: Element>(tape: &mut Tape<T>, a: Var) -> Result<Var> {
    if tape.shape(a).len() != 4 {
        return Err(Error::shape("space_time_avg_pool", &[0, 0, 0, 0], tape.shape(a)));
    }
    tape.mean_over_leading(a)
}

/// `frames x channels x height x width` to channels-last `t x h x w x c`.
pub fn to_channels_last<T: Element>(clip: &Tensor<T>) -> Result<Tensor<T>> {
    let s = clip.shape();
    if s.len() != 4 {
        return Err(Error::shape("to_channels_last", &[0, 0, 0, 0], s));
    }
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = clip.data();
    let mut out = vec![T::zero(); src.len()];
    for ti in 0..t {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[((ti * h + y) * w + x) * c + ci] = src[((ti * c + ci) * h + y) * w + x];
                }
            }
        }
    }
    Tensor::new(&[t, h, w, c], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> BackboneConfig {
        let mut c = BackboneConfig::from_lists(&[2, 3, 3], &[1, 2, 1], &[1, 1, 2]);
        c.goal_dim = 4;
        c
    }

    #[test]
    fn identity_stage_is_relu() {
        let mut store = ParamStore::<f64>::new();
        let params = StageParams {
            spatial_weight: store.add("ws", Tensor::eye(2).reshape(&[1, 1, 1, 2, 2]).unwrap()),
            spatial_bias: store.add_zeros("bs", &[2]),
            temporal_weight: store.add("wt", Tensor::eye(2).reshape(&[1, 1, 1, 2, 2]).unwrap()),
            temporal_bias: store.add_zeros("bt", &[2]),
        };
        let unit = ConvGeometry {
            kernel: [1, 1, 1],
            stride: [1, 1, 1],
            padding: [0, 0, 0],
        };
        let data: Vec<f64> = (0..24).map(|i| (i as f64 - 11.5) * 0.3).collect();
        let x = Tensor::new(&[2, 3, 2, 2], data.clone()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x).unwrap();
        let y = conv2plus1d_block(&mut tape, &store, xv, &params, unit, unit, false).unwrap();
        let expect: Vec<f64> = data.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(tape.value(y).data(), &expect[..]);
    }

    #[test]
    fn stride_two_halves_full_frame() {
        let mut c = BackboneConfig::from_lists(&[8, 8], &[2, 1], &[1, 1]);
        c.residual = false;
        let shapes = c.output_shapes([21, 90, 160]).unwrap();
        assert_eq!(shapes[0], [21, 45, 80, 8]);
    }

    #[test]
    fn temporal_difference_kernel() {
        // y[t] = x[t-1] - x[t+1] with zero padding at both ends.
        let x = Tensor::<f64>::from_f64(&[5, 1, 1, 1], &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let w = Tensor::from_f64(&[3, 1, 1, 1, 1], &[1.0, 0.0, -1.0]).unwrap();
        let g = ConvGeometry {
            kernel: [3, 1, 1],
            stride: [1, 1, 1],
            padding: [1, 0, 0],
        };
        let y = kernels::conv3d(&x, &w, &Tensor::zeros(&[1]), &g).unwrap();
        let xs = x.data();
        let oracle: Vec<f64> = (0..5)
            .map(|t| {
                let at = |i: isize| if (0..5).contains(&i) { xs[i as usize] } else { 0.0 };
                at(t as isize - 1) - at(t as isize + 1)
            })
            .collect();
        assert_eq!(oracle, vec![-2.0, -2.0, -2.0, -2.0, 4.0]);
        assert_eq!(y.data(), &oracle[..]);
    }

    #[test]
    fn zero_clip_with_zero_biases_has_zero_representation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(tiny_config(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let clip = tape.input(Tensor::zeros(&[4, 6, 6, 3])).unwrap();
        let enc = bb.encode(&mut tape, &store, clip, &[]).unwrap();
        assert!(tape.value(enc.repr).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_tap_is_returned() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let bb = Backbone::new(tiny_config(), &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let clip = tape.input(Tensor::full(&[4, 6, 6, 3], 0.5)).unwrap();
        let enc = bb.encode(&mut tape, &store, clip, &[3]).unwrap();
        assert_eq!(enc.taps.len(), 1);
        assert_eq!(enc.taps[0].0, 3);
        let expected = bb.config().output_shapes([4, 6, 6]).unwrap()[2];
        assert_eq!(tape.shape(enc.taps[0].1), &expected);
        assert!(bb.encode(&mut tape, &store, clip, &[4]).is_err());
    }

    #[test]
    fn encode_is_bitwise_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let mut store = ParamStore::<f32>::new();
            let bb = Backbone::new(tiny_config(), &mut store, &mut rng).unwrap();
            let data: Vec<f32> = (0..4 * 6 * 6 * 3).map(|_| rng.random()).collect();
            let mut tape = Tape::new();
            let clip = tape.input(Tensor::new(&[4, 6, 6, 3], data).unwrap()).unwrap();
            let enc = bb.encode(&mut tape, &store, clip, &[]).unwrap();
            tape.value(enc.repr).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pooling_constants_and_two_frames() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Tensor::full(&[2, 3, 3, 4], 7.0)).unwrap();
        let p = space_time_avg_pool(&mut tape, a).unwrap();
        assert_eq!(tape.value(p).data(), &[7.0; 4]);
        let b = tape.input(Tensor::from_f64(&[2, 1, 1, 1], &[2.0, 4.0]).unwrap()).unwrap();
        let p = space_time_avg_pool(&mut tape, b).unwrap();
        assert_eq!(tape.value(p).data(), &[3.0]);
    }

    #[test]
    fn pooling_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<f64> = (0..48).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(&[3, 2, 2, 4], data).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        let p = space_time_avg_pool(&mut tape, xv).unwrap();
        for c in 0..4 {
            let mut acc = 0.0;
            for t in 0..3 {
                for h in 0..2 {
                    for w in 0..2 {
                        acc += x.at(&[t, h, w, c]);
                    }
                }
            }
            assert!((tape.value(p).data()[c] - acc / 12.0).abs() < 1e-12);
        }
    }

    #[test]
    fn goal_embedding_touches_one_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let bb = Backbone::new(tiny_config(), &mut store, &mut rng).unwrap();
        store.set_value(bb.goal_table(), {
            let mut t = Tensor::zeros(&[3, 4]);
            for i in 0..3 {
                let o = t.offset(&[i, i]);
                t.data_mut()[o] = 1.0;
            }
            t
        })
        .unwrap();
        let mut tape = Tape::new();
        let g = bb.embed_goal(&mut tape, &store, Goal::Straight).unwrap();
        assert_eq!(tape.value(g).data(), &[0.0, 1.0, 0.0, 0.0]);
        let mut tape = Tape::new();
        let g = bb.embed_goal(&mut tape, &store, Goal::Left).unwrap();
        let loss = tape.sum(g).unwrap();
        let mut grads = store.clone();
        tape.backward(loss).unwrap().accumulate_into(&mut grads);
        let gt = &grads.get(bb.goal_table()).grad;
        assert_eq!(&gt.data()[..4], &[1.0; 4]);
        assert!(gt.data()[4..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn goal_tokens_parse() {
        assert_eq!("right".parse::<Goal>().unwrap(), Goal::Right);
        assert!("up".parse::<Goal>().is_err());
        assert_eq!(BackboneConfig::default().goal_dim, 16);
    }

    #[test]
    fn layouts_round_trip() {
        let clip = Tensor::<f32>::new(&[2, 3, 2, 2], (0..24).map(|i| i as f32).collect()).unwrap();
        let cl = to_channels_last(&clip).unwrap();
        assert_eq!(cl.shape(), &[2, 2, 2, 3]);
        assert_eq!(cl.at(&[1, 0, 1, 2]), clip.at(&[1, 2, 0, 1]));
    }

    #[test]
    fn config_rejects_single_stage() {
        let c = BackboneConfig::from_lists(&[4], &[1], &[1]);
        assert!(c.validate().is_err());
    }
}
