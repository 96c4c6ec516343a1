//! Goal-conditioned GRU trajectory decoding and the single-projection
//! control head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub hidden: usize,
    /// Positions before the current frame.
    pub past: usize,
    /// Positions after the current frame.
    pub future: usize,
    /// Whether the decision vector carries the past and current positions
    /// as well as the future ones.
    pub decision_includes_past: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: 32,
            past: 6,
            future: 6,
            decision_includes_past: true,
        }
    }
}

impl DecoderConfig {
    /// Number of decoded positions K.
    pub fn horizon(&self) -> usize {
        self.past + 1 + self.future
    }

    /// Length of the decision vector.
    pub fn decision_dim(&self) -> usize {
        if self.decision_includes_past {
            2 * self.horizon()
        } else {
            2 * self.future
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("decoder.hidden", "must be at least 1"));
        }
        if self.decision_dim() == 0 {
            return Err(Error::config("decoder.future", "decision vector would be empty"));
        }
        Ok(())
    }
}

/// Ego positions `(x, y)` in a bird's-eye frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<[f64; 2]>,
}

impl Trajectory {
    /// `[x1, y1, x2, y2, ...]`.
    pub fn flatten(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn unflatten(flat: &[f64]) -> Result<Trajectory> {
        if flat.len() % 2 != 0 {
            return Err(Error::shape("unflatten", &[flat.len() + 1], &[flat.len()]));
        }
        Ok(Trajectory {
            points: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub acceleration: f64,
    pub course_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_r: ParamId,
    pub b_r: ParamId,
    pub w_z: ParamId,
    pub b_z: ParamId,
    pub w_h: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = input + hidden;
        let mut w = |n: &str, rng: &mut _| store.add_xavier(format!("{prefix}.{n}"), &[hidden, fan_in], fan_in, hidden, rng);
        let (w_r, w_z, w_h) = (w("w_r", rng), w("w_z", rng), w("w_h", rng));
        GruParams {
            w_r,
            b_r: store.add_zeros(format!("{prefix}.b_r"), &[hidden]),
            w_z,
            b_z: store.add_zeros(format!("{prefix}.b_z"), &[hidden]),
            w_h,
            b_h: store.add_zeros(format!("{prefix}.b_h"), &[hidden]),
        }
    }
}

/// One GRU update:
/// `r = s(W_r[x;h]+b_r)`, `z = s(W_z[x;h]+b_z)`,
/// `h~ = tanh(W_h[x; r*h]+b_h)`, `h' = (1-z)*h + z*h~`.
pub fn gru_cell<T: Element>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    params: &GruParams,
    x: Var,
    h: Var,
) -> Result<Var> {
    let p = |tape: &mut Tape<T>, id| tape.param(store, id);
    let (w_r, b_r, w_z, b_z, w_h, b_h) = (
        p(tape, params.w_r),
        p(tape, params.b_r),
        p(tape, params.w_z),
        p(tape, params.b_z),
        p(tape, params.w_h),
        p(tape, params.b_h),
    );
    let xh = tape.concat(&[x, h])?;
    let r = tape.linear(xh, w_r, Some(b_r))?;
    let r = tape.sigmoid(r)?;
    let z = tape.linear(xh, w_z, Some(b_z))?;
    let z = tape.sigmoid(z)?;
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat(&[x, rh])?;
    let cand = tape.linear(xrh, w_h, Some(b_h))?;
    let cand = tape.tanh(cand)?;
    // h + z * (h~ - h)
    let diff = tape.sub(cand, h)?;
    let step = tape.mul(z, diff)?;
    tape.add(h, step)
}

/// Output of [`TrajectoryDecoder::decode`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    /// All K positions flattened, length `2K`.
    pub trajectory: Var,
    /// The decision vector fed to the explanation module.
    pub decision: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDecoder {
    config: DecoderConfig,
    gru: GruParams,
    head_w: ParamId,
    head_b: ParamId,
}

impl TrajectoryDecoder {
    pub fn new<T: Element>(
        config: DecoderConfig,
        input: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let gru = GruParams::new(store, "decoder.gru", input, h, rng);
        let head_w = store.add_xavier("decoder.head.weight", &[2, h], h, 2, rng);
        let head_b = store.add_zeros("decoder.head.bias", &[2]);
        Ok(TrajectoryDecoder {
            config,
            gru,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn gru(&self) -> &GruParams {
        &self.gru
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    /// Feeds `[repr ; goal]` at every one of the K steps from a zero state and
    /// reads one position per step through a linear head.
    pub fn decode<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, repr: Var, goal: Var) -> Result<Decoded> {
        let x = tape.concat(&[repr, goal])?;
        let mut h = tape.input(Tensor::zeros(&[self.config.hidden]))?;
        let w = tape.param(store, self.head_w);
        let b = tape.param(store, self.head_b);
        let mut points = Vec::with_capacity(self.config.horizon());
        for _ in 0..self.config.horizon() {
            h = gru_cell(tape, store, &self.gru, x, h)?;
            points.push(tape.linear(h, w, Some(b))?);
        }
        let trajectory = tape.concat(&points)?;
        let decision = if self.config.decision_includes_past {
            trajectory
        } else {
            let start = 2 * (self.config.past + 1);
            tape.slice(trajectory, start, 2 * self.config.future)?
        };
        Ok(Decoded { trajectory, decision })
    }
}

/// One linear map from `[repr ; goal]` to (acceleration, course change).
#[derive(Debug, Clone, PartialEq)]
pub struct ControlHead {
    weight: ParamId,
    bias: ParamId,
}

impl ControlHead {
    pub fn new<T: Element>(input: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Self {
        ControlHead {
            weight: store.add_xavier("decoder.control.weight", &[2, input], input, 2, rng),
            bias: store.add_zeros("decoder.control.bias", &[2]),
        }
    }

    pub fn params(&self) -> (ParamId, ParamId) {
        (self.weight, self.bias)
    }

    pub fn decode<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, repr: Var, goal: Var) -> Result<Var> {
        let x = tape.concat(&[repr, goal])?;
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.linear(x, w, Some(b))
    }
}

/// Mean squared error over all coordinates.
pub fn drive_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::shape("drive_loss", tape.shape(target), tape.shape(pred)));
    }
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Scalar GRU step computed by hand.
    fn scalar_gru(x: f64, h: f64, w: [[f64; 2]; 3], b: [f64; 3]) -> f64 {
        let r = sigmoid(w[0][0] * x + w[0][1] * h + b[0]);
        let z = sigmoid(w[1][0] * x + w[1][1] * h + b[1]);
        let c = (w[2][0] * x + w[2][1] * r * h + b[2]).tanh();
        (1.0 - z) * h + z * c
    }

    fn scalar_params(store: &mut ParamStore<f64>, w: [[f64; 2]; 3], b: [f64; 3]) -> GruParams {
        let m = |r: [f64; 2]| Tensor::from_f64(&[1, 2], &r).unwrap();
        let s = |v: f64| Tensor::vector(vec![v]);
        GruParams {
            w_r: store.add("w_r", m(w[0])),
            b_r: store.add("b_r", s(b[0])),
            w_z: store.add("w_z", m(w[1])),
            b_z: store.add("b_z", s(b[1])),
            w_h: store.add("w_h", m(w[2])),
            b_h: store.add("b_h", s(b[2])),
        }
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let mut store = ParamStore::<f64>::new();
        let p = scalar_params(&mut store, [[0.0; 2]; 3], [0.0; 3]);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![3.0])).unwrap();
        let h = tape.input(Tensor::vector(vec![0.0])).unwrap();
        let h2 = gru_cell(&mut tape, &store, &p, x, h).unwrap();
        assert_eq!(tape.value(h2).data(), &[0.0]);
    }

    #[test]
    fn scalar_gru_matches_hand_arithmetic() {
        let w = [[0.5, -0.3], [0.8, 0.2], [-1.1, 0.7]];
        let b = [0.1, -0.2, 0.05];
        let mut store = ParamStore::<f64>::new();
        let p = scalar_params(&mut store, w, b);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.9])).unwrap();
        let h = tape.input(Tensor::vector(vec![-0.4])).unwrap();
        let h2 = gru_cell(&mut tape, &store, &p, x, h).unwrap();
        assert!((tape.value(h2).item() - scalar_gru(0.9, -0.4, w, b)).abs() < 1e-14);
    }

    #[test]
    fn state_stays_in_unit_box_from_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let p = GruParams::new(&mut store, "g", 3, 5, &mut rng);
        for id in store.iter().map(|(id, _)| id).collect::<Vec<_>>() {
            let v = store.value(id).clone();
            let big: Vec<f64> = v.data().iter().map(|x| 2.0 * x + 0.5).collect();
            store.set_value(id, Tensor::new(v.shape(), big).unwrap()).unwrap();
        }
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![3.0, -2.0, 1.5])).unwrap();
        let mut h = tape.input(Tensor::zeros(&[5])).unwrap();
        for _ in 0..4 {
            h = gru_cell(&mut tape, &store, &p, x, h).unwrap();
            assert!(tape.value(h).data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn zero_decoder_emits_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let cfg = DecoderConfig::default();
        assert_eq!(cfg.horizon(), 13);
        let dec = TrajectoryDecoder::new(cfg, 5, &mut store, &mut rng).unwrap();
        for id in store.iter().map(|(id, _)| id).collect::<Vec<_>>() {
            let s = store.value(id).shape().to_vec();
            store.set_value(id, Tensor::zeros(&s)).unwrap();
        }
        let mut tape = Tape::new();
        let r = tape.input(Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let g = tape.input(Tensor::vector(vec![1.0, 0.0])).unwrap();
        let out = dec.decode(&mut tape, &store, r, g).unwrap();
        assert_eq!(tape.value(out.trajectory).shape(), &[26]);
        assert!(tape.value(out.trajectory).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_step_decode_matches_composed_cells() {
        let w = [[0.5, -0.3], [0.8, 0.2], [-1.1, 0.7]];
        let b = [0.1, -0.2, 0.05];
        // Hidden size 1, input size 1: x = [r] with an empty goal is not
        // allowed, so split the input over r and g and sum their weights.
        let mut store = ParamStore::<f64>::new();
        let m = |r: [f64; 2]| Tensor::from_f64(&[1, 3], &[r[0], 0.0, r[1]]).unwrap();
        let s = |v: f64| Tensor::vector(vec![v]);
        let gru = GruParams {
            w_r: store.add("decoder.gru.w_r", m(w[0])),
            b_r: store.add("decoder.gru.b_r", s(b[0])),
            w_z: store.add("decoder.gru.w_z", m(w[1])),
            b_z: store.add("decoder.gru.b_z", s(b[1])),
            w_h: store.add("decoder.gru.w_h", m(w[2])),
            b_h: store.add("decoder.gru.b_h", s(b[2])),
        };
        let head_w = store.add("decoder.head.weight", Tensor::from_f64(&[2, 1], &[2.0, -1.0]).unwrap());
        let head_b = store.add("decoder.head.bias", Tensor::vector(vec![0.5, 0.25]));
        let dec = TrajectoryDecoder {
            config: DecoderConfig {
                hidden: 1,
                past: 0,
                future: 1,
                decision_includes_past: true,
            },
            gru,
            head_w,
            head_b,
        };
        let mut tape = Tape::new();
        let r = tape.input(Tensor::vector(vec![0.9])).unwrap();
        let g = tape.input(Tensor::vector(vec![5.0])).unwrap();
        let out = dec.decode(&mut tape, &store, r, g).unwrap();
        let h1 = scalar_gru(0.9, 0.0, w, b);
        let h2 = scalar_gru(0.9, h1, w, b);
        let oracle = [2.0 * h1 + 0.5, -h1 + 0.25, 2.0 * h2 + 0.5, -h2 + 0.25];
        for (a, e) in tape.value(out.trajectory).data().iter().zip(oracle) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn decision_can_drop_the_past() {
        let cfg = DecoderConfig {
            decision_includes_past: false,
            ..DecoderConfig::default()
        };
        assert_eq!(cfg.decision_dim(), 12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let dec = TrajectoryDecoder::new(cfg, 4, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let r = tape.input(Tensor::vector(vec![0.1, 0.2])).unwrap();
        let g = tape.input(Tensor::vector(vec![0.3, 0.4])).unwrap();
        let out = dec.decode(&mut tape, &store, r, g).unwrap();
        let full = tape.value(out.trajectory).data().to_vec();
        assert_eq!(tape.value(out.decision).data(), &full[14..]);
    }

    #[test]
    fn control_head_zero_and_echo() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let head = ControlHead::new(4, &mut store, &mut rng);
        let (w, _) = head.params();
        store.set_value(w, Tensor::zeros(&[2, 4])).unwrap();
        let mut tape = Tape::new();
        let r = tape.input(Tensor::vector(vec![0.3, -0.7, 1.0])).unwrap();
        let g = tape.input(Tensor::vector(vec![2.0])).unwrap();
        let out = head.decode(&mut tape, &store, r, g).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.0]);
        store
            .set_value(w, Tensor::from_f64(&[2, 4], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let r = tape.input(Tensor::vector(vec![0.3, -0.7, 1.0])).unwrap();
        let g = tape.input(Tensor::vector(vec![2.0])).unwrap();
        let out = head.decode(&mut tape, &store, r, g).unwrap();
        assert_eq!(tape.value(out).data(), &[0.3, -0.7]);
    }

    #[test]
    fn drive_loss_cases() {
        let mut tape = Tape::<f64>::new();
        let a = tape.input(Tensor::zeros(&[26])).unwrap();
        let b = tape.input(Tensor::full(&[26], 1.0)).unwrap();
        let l = drive_loss(&mut tape, a, b).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let l = drive_loss(&mut tape, b, b).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
        let c = tape.input(Tensor::zeros(&[24])).unwrap();
        assert!(drive_loss(&mut tape, a, c).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..10).map(|_| rng.random_range(-2.0..2.0)).collect();
        let oracle = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / 10.0;
        let (xv, yv) = (tape.input(Tensor::vector(x)).unwrap(), tape.input(Tensor::vector(y)).unwrap());
        let l = drive_loss(&mut tape, xv, yv).unwrap();
        assert!((tape.value(l).item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn flatten_round_trips() {
        let t = Trajectory {
            points: vec![[1.0, 2.0], [3.5, -4.0]],
        };
        assert_eq!(t.flatten(), vec![1.0, 2.0, 3.5, -4.0]);
        assert_eq!(Trajectory::unflatten(&t.flatten()).unwrap(), t);
        assert!(Trajectory::unflatten(&[1.0]).is_err());
    }
}
