//! Finite-difference checks of every differentiable operation, from tape
//! primitives to the assembled model, in 64-bit mode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::backbone::{conv2plus1d_block, space_time_avg_pool, Backbone, BackboneConfig, Goal};
use crate::decoder::{drive_loss, gru_cell, ControlHead, DecoderConfig, GruParams, TrajectoryDecoder};
use crate::error::Result;
use crate::explain::{classify_cause, explain_loss, BaselineConfig, BaselineHead, BaselineVariant, LanguageConfig, LanguageHead};
use crate::fusion::{Fusion, FusionConfig, FusionKind};
use crate::gradcheck::{check_params, GradCheckOptions, GradCheckReport};
use crate::model::{BeefModel, DriveHeadKind, ExplainerKind, ForwardOptions, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::kernels::ConvGeometry;
use crate::tensor::Tensor;

pub const TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub op: String,
    pub report: GradCheckReport,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < TOLERANCE
    }
}

fn uniform(shape: &[usize], scale: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape")
}

/// `sum(x * w)` with fixed random weights, so every output coordinate
/// contributes a distinct amount.
fn project(tape: &mut Tape<f64>, x: Var, salt: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ salt);
    let w = uniform(tape.shape(x), 1.0, &mut rng);
    let w = tape.input(w)?;
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

struct Case {
    store: ParamStore<f64>,
    rng: ChaCha8Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Case {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Registers a differentiable input as a parameter so it is checked too.
    fn input(&mut self, name: &str, shape: &[usize], scale: f64) -> ParamId {
        let t = uniform(shape, scale, &mut self.rng);
        self.store.add(format!("input.{name}"), t)
    }
}

/// Moves every non-input parameter off its initial value. Zero biases
/// otherwise leave ReLU inputs exactly on the kink in padded regions.
fn jittered(store: &ParamStore<f64>) -> ParamStore<f64> {
    let mut out = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(0x717e);
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| !p.name.starts_with("input.")).map(|(id, _)| id).collect();
    for id in ids {
        for x in out.get_mut(id).value.data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
    out
}

fn run<F>(rows: &mut Vec<SuiteRow>, op: &str, case: &Case, opts: GradCheckOptions, f: F) -> Result<()>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let report = check_params(f, &jittered(&case.store), opts)?;
    log::debug!("{op}: {:.3e} at {}", report.max_rel_error, report.worst);
    rows.push(SuiteRow { op: op.into(), report });
    Ok(())
}

fn primitives(rows: &mut Vec<SuiteRow>, opts: GradCheckOptions) -> Result<()> {
    let mut c = Case::new(1);
    let a = c.input("a", &[5], 1.0);
    let b = c.input("b", &[5], 1.0);
    let w = c.input("w", &[3, 5], 1.0);
    let bias = c.input("bias", &[3], 1.0);
    let s = c.input("s", &[1], 1.0);
    let pos = c.store.add("input.pos", Tensor::vector(vec![0.3, 0.8, 1.7, 0.05, 2.2]));
    type Body = fn(&mut Tape<f64>, [Var; 6]) -> Result<Var>;
    let ops: [(&str, Body); 18] = [
        ("linear", |t, v| t.linear(v[0], v[2], Some(v[3]))),
        ("add", |t, v| t.add(v[0], v[1])),
        ("sub", |t, v| t.sub(v[0], v[1])),
        ("mul", |t, v| t.mul(v[0], v[1])),
        ("scale", |t, v| t.scale(v[0], -2.5)),
        ("mul_scalar", |t, v| t.mul_scalar(v[0], v[4])),
        ("relu", |t, v| t.relu(v[0])),
        ("sigmoid", |t, v| t.sigmoid(v[0])),
        ("tanh", |t, v| t.tanh(v[0])),
        ("softmax", |t, v| t.softmax(v[0], 1.0)),
        ("softmax_tempered", |t, v| t.softmax(v[0], 0.5)),
        ("log_softmax", |t, v| t.log_softmax(v[0])),
        ("clamped_log", |t, v| Ok(t.clamped_log(v[5], 1e-12)?.0)),
        ("mean", |t, v| t.mean(v[0])),
        ("index", |t, v| t.index(v[0], 3)),
        ("concat", |t, v| t.concat(&[v[0], v[4], v[1]])),
        ("slice", |t, v| t.slice(v[1], 1, 3)),
        ("sum_pool", |t, v| {
            let x = t.concat(&[v[0], v[5]])?;
            t.sum_pool(x, 2)
        }),
    ];
    for (name, body) in ops {
        run(rows, name, &c, opts, |t, st| {
            let vars = [a, b, w, bias, s, pos].map(|id| t.param(st, id));
            let y = body(t, vars)?;
            project(t, y, 7)
        })?;
    }

    let mut c = Case::new(2);
    let m = c.input("m", &[2, 3], 1.0);
    let core = c.input("core", &[3, 2, 4], 1.0);
    let v = c.input("v", &[2], 1.0);
    run(rows, "reshape", &c, opts, |t, st| {
        let x = t.param(st, m);
        let y = t.reshape(x, &[3, 2])?;
        project(t, y, 1)
    })?;
    run(rows, "mode_n_product", &c, opts, |t, st| {
        let (k, x) = (t.param(st, core), t.param(st, v));
        let y = t.mode_n_product(k, x, 2)?;
        project(t, y, 2)
    })?;
    run(rows, "gather", &c, opts, |t, st| {
        let x = t.param(st, m);
        let y = t.gather(x, 1)?;
        project(t, y, 3)
    })?;

    let mut c = Case::new(3);
    let x = c.input("x", &[3, 4, 5, 2], 1.0);
    let w = c.input("w", &[2, 3, 3, 2, 3], 0.5);
    let b = c.input("b", &[3], 0.5);
    let geom = ConvGeometry {
        kernel: [2, 3, 3],
        stride: [1, 2, 2],
        padding: [1, 1, 1],
    };
    run(rows, "conv3d", &c, opts, |t, st| {
        let (x, w, b) = (t.param(st, x), t.param(st, w), t.param(st, b));
        let y = t.conv3d(x, w, b, geom)?;
        project(t, y, 4)
    })?;
    run(rows, "mean_over_leading", &c, opts, |t, st| {
        let x = t.param(st, x);
        let y = t.mean_over_leading(x)?;
        project(t, y, 5)
    })?;
    Ok(())
}

fn tiny_backbone() -> BackboneConfig {
    let mut c = BackboneConfig::from_lists(&[3, 4, 4], &[1, 2, 1], &[1, 1, 2]);
    c.goal_dim = 3;
    c
}

fn backbone_ops(rows: &mut Vec<SuiteRow>, opts: GradCheckOptions) -> Result<()> {
    let mut c = Case::new(4);
    let cfg = tiny_backbone();
    let bb = Backbone::new(cfg.clone(), &mut c.store, &mut c.rng.clone())?;
    let clip = c.input("clip", &[3, 5, 5, 3], 1.0);
    let act = c.input("activation", &[3, 4, 4, 4], 1.0);
    run(rows, "conv2plus1d_block", &c, opts, |t, st| {
        let x = t.param(st, clip);
        let s = &cfg.stages[0];
        let y = conv2plus1d_block(t, st, x, bb.stage_params(1), cfg.spatial_geometry(s), cfg.temporal_geometry(s), true)?;
        project(t, y, 1)
    })?;
    run(rows, "conv2plus1d_block_residual", &c, opts, |t, st| {
        let x = t.param(st, act);
        let s = &cfg.stages[2];
        let y = conv2plus1d_block(t, st, x, bb.stage_params(3), cfg.spatial_geometry(s), cfg.temporal_geometry(s), true)?;
        project(t, y, 2)
    })?;
    run(rows, "encode", &c, opts, |t, st| {
        let x = t.param(st, clip);
        let enc = bb.encode(t, st, x, &[1, 2])?;
        let mut terms = vec![project(t, enc.repr, 3)?];
        for (l, v) in enc.taps {
            terms.push(project(t, v, 10 + l as u64)?);
        }
        let all = t.concat(&terms)?;
        t.sum(all)
    })?;
    run(rows, "space_time_avg_pool", &c, opts, |t, st| {
        let x = t.param(st, act);
        let y = space_time_avg_pool(t, x)?;
        project(t, y, 4)
    })?;
    run(rows, "goal_embedding", &c, opts, |t, st| {
        let mut terms = Vec::new();
        for g in Goal::ALL {
            let e = bb.embed_goal(t, st, g)?;
            terms.push(project(t, e, g.index() as u64)?);
        }
        let all = t.concat(&terms)?;
        t.sum(all)
    })?;
    Ok(())
}

fn decoder_ops(rows: &mut Vec<SuiteRow>, opts: GradCheckOptions) -> Result<()> {
    let mut c = Case::new(5);
    let mut rng = c.rng.clone();
    let gru = GruParams::new(&mut c.store, "gru", 3, 4, &mut rng);
    let x = c.input("x", &[3], 1.0);
    let h = c.input("h", &[4], 0.9);
    run(rows, "gru_cell", &c, opts, |t, st| {
        let (x, h) = (t.param(st, x), t.param(st, h));
        let h1 = gru_cell(t, st, &gru, x, h)?;
        let h2 = gru_cell(t, st, &gru, x, h1)?;
        project(t, h2, 1)
    })?;

    let mut c = Case::new(6);
    let mut rng = c.rng.clone();
    let dec_cfg = DecoderConfig {
        hidden: 4,
        past: 1,
        future: 2,
        decision_includes_past: true,
    };
    let dec = TrajectoryDecoder::new(dec_cfg, 5, &mut c.store, &mut rng)?;
    let ctl = ControlHead::new(5, &mut c.store, &mut rng);
    let repr = c.input("repr", &[3], 1.0);
    let goal = c.input("goal", &[2], 1.0);
    let target = c.input("target", &[8], 1.0);
    run(rows, "trajectory_decoder", &c, opts, |t, st| {
        let (r, g) = (t.param(st, repr), t.param(st, goal));
        let out = dec.decode(t, st, r, g)?;
        project(t, out.trajectory, 2)
    })?;
    run(rows, "control_head", &c, opts, |t, st| {
        let (r, g) = (t.param(st, repr), t.param(st, goal));
        let out = ctl.decode(t, st, r, g)?;
        project(t, out, 3)
    })?;
    run(rows, "drive_loss", &c, opts, |t, st| {
        let (r, g, y) = (t.param(st, repr), t.param(st, goal), t.param(st, target));
        let out = dec.decode(t, st, r, g)?;
        drive_loss(t, out.trajectory, y)
    })?;
    Ok(())
}

fn fusion_ops(rows: &mut Vec<SuiteRow>, opts: GradCheckOptions) -> Result<()> {
    for kind in FusionKind::ALL {
        let mut c = Case::new(7 + kind as u64);
        let cfg = FusionConfig {
            kind,
            dim_m: 4,
            dim_v: 3,
            dim_out: 3,
            proj_dim: 4,
            block_count: 2,
            rank: 2,
            hidden: 5,
        };
        let mut rng = c.rng.clone();
        let f = Fusion::new(cfg, &mut c.store, "fusion", &mut rng)?;
        let m = c.input("m", &[4], 1.0);
        let v = c.input("v", &[3], 1.0);
        run(rows, &format!("fusion_{}", kind.name()), &c, opts, |t, st| {
            let (m, v) = (t.param(st, m), t.param(st, v));
            let y = f.forward(t, st, m, v)?;
            project(t, y, 1)
        })?;
    }
    Ok(())
}

fn head_ops(rows: &mut Vec<SuiteRow>, opts: GradCheckOptions) -> Result<()> {
    let mut c = Case::new(20);
    let mut rng = c.rng.clone();
    let cfg = FusionConfig {
        kind: FusionKind::Block,
        dim_m: 4,
        dim_v: 3,
        dim_out: 7,
        proj_dim: 4,
        block_count: 2,
        rank: 1,
        hidden: 1,
    };
    let f = Fusion::new(cfg.clone(), &mut c.store, "fusion", &mut rng)?;
    let ms = [c.input("m0", &[4], 1.0), c.input("m1", &[4], 1.0)];
    let vs = [c.input("v0", &[3], 1.0), c.input("v1", &[3], 1.0)];
    run(rows, "cause_head", &c, opts, |t, st| {
        let (m, v) = (t.param(st, ms[0]), t.param(st, vs[0]));
        let (_, p) = classify_cause(t, st, &f, m, v)?;
        project(t, p, 1)
    })?;
    run(rows, "explain_loss", &c, opts, |t, st| {
        let mut probs = Vec::new();
        for k in 0..2 {
            let (m, v) = (t.param(st, ms[k]), t.param(st, vs[k]));
            probs.push(classify_cause(t, st, &f, m, v)?.1);
        }
        Ok(explain_loss(t, &probs, 4)?.0)
    })?;

    for variant in [
        BaselineVariant::LastLayer,
        BaselineVariant::LastLayerPlusBlinker,
        BaselineVariant::Layer3Mlp,
        BaselineVariant::DecisionMlp,
    ] {
        let mut c = Case::new(30 + variant as u64);
        let mut rng = c.rng.clone();
        let head = BaselineHead::new(
            BaselineConfig {
                variant,
                input: 5,
                classes: 7,
                hidden: 4,
            },
            &mut c.store,
            &mut rng,
        )?;
        let x = c.input("features", &[5], 1.0);
        run(rows, &format!("baseline_{}", variant.name()), &c, opts, |t, st| {
            let x = t.param(st, x);
            let y = head.forward(t, st, x)?;
            let p = t.softmax(y, 1.0)?;
            project(t, p, 2)
        })?;
    }

    let mut c = Case::new(40);
    let mut rng = c.rng.clone();
    let lang = LanguageHead::new(
        LanguageConfig {
            fusion: FusionConfig {
                dim_out: 3,
                ..cfg
            },
            hidden: 3,
            embed: 2,
            attention: 2,
            vocab_size: 7,
        },
        &mut c.store,
        &mut rng,
    )?;
    let ms = [c.input("m0", &[4], 1.0), c.input("m1", &[4], 1.0)];
    let vs = [c.input("v0", &[3], 1.0), c.input("v1", &[3], 1.0)];
    run(rows, "language_head", &c, opts, |t, st| {
        let frames: Vec<(Var, Var)> = (0..2).map(|k| (t.param(st, ms[k]), t.param(st, vs[k]))).collect();
        lang.sequence_loss(t, st, &frames, &[5, 4, 2])
    })?;
    Ok(())
}

fn model_ops(rows: &mut Vec<SuiteRow>, opts: GradCheckOptions) -> Result<()> {
    for (label, kind, head) in [
        ("model_block_trajectory", ExplainerKind::Block, DriveHeadKind::Trajectory),
        ("model_layer3_mlp_control", ExplainerKind::Layer3Mlp, DriveHeadKind::Control),
    ] {
        let mut c = Case::new(50);
        let cfg = ModelConfig {
            backbone: tiny_backbone(),
            decoder: DecoderConfig {
                hidden: 3,
                past: 1,
                future: 1,
                decision_includes_past: true,
            },
            drive_head: head,
            explainer: crate::model::ExplainerConfig {
                kind,
                layer: 2,
                proj_dim: 4,
                block_count: 2,
                rank: 2,
                hidden: 3,
            },
            target_scale: 0.1,
        };
        let mut rng = c.rng.clone();
        let model = BeefModel::new(cfg, &mut c.store, &mut rng)?;
        let clip = c.input("clip", &[3, 5, 5, 3], 1.0);
        let n = model.config().decision_dim().max(2);
        let target = c.input("target", &[if head == DriveHeadKind::Control { 2 } else { n }], 1.0);
        run(rows, label, &c, opts, |t, st| {
            let x = t.param(st, clip);
            let out = model.forward(t, st, x, Goal::Right, ForwardOptions::default())?;
            let y = t.param(st, target);
            let d = drive_loss(t, out.drive, y)?;
            let (e, _) = explain_loss(t, &[out.probs], 3)?;
            crate::trainer::joint_loss(t, d, e, 0.7)
        })?;
    }
    Ok(())
}

/// Runs every check. `max_coords` bounds the probed coordinates per tensor.
pub fn run_suite(max_coords: usize) -> Result<Vec<SuiteRow>> {
    let opts = GradCheckOptions { eps: 1e-5, max_coords };
    let mut rows = Vec::new();
    primitives(&mut rows, opts)?;
    backbone_ops(&mut rows, opts)?;
    decoder_ops(&mut rows, opts)?;
    fusion_ops(&mut rows, opts)?;
    head_ops(&mut rows, opts)?;
    model_ops(&mut rows, opts)?;
    Ok(rows)
}

/// Fixed-width table of the suite results.
pub fn format_table(rows: &[SuiteRow]) -> String {
    let mut s = format!("{:<32} {:>12} {:>8}  {:<6} {}\n", "op", "max_rel_err", "coords", "status", "worst");
    for r in rows {
        s.push_str(&format!(
            "{:<32} {:>12.3e} {:>8}  {:<6} {}\n",
            r.op,
            r.report.max_rel_error,
            r.report.checked,
            if r.passed() { "ok" } else { "FAIL" },
            r.report.worst
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn project_is_linear_in_its_input() {
        let mut t = Tape::<f64>::new();
        let x = t.input(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let y = project(&mut t, x, 3).unwrap();
        let g = t.backward(y).unwrap().wrt(x);
        let w = uniform(&[2], 1.0, &mut ChaCha8Rng::seed_from_u64(0x5eed ^ 3));
        assert_eq!(g, w);
    }

    #[test]
    fn every_operation_passes() {
        let rows = run_suite(24).unwrap();
        let table = format_table(&rows);
        assert!(rows.iter().all(SuiteRow::passed), "\n{table}");
    }
}
