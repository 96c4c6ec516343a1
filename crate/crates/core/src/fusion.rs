//! Bilinear fusion operators mapping a decision vector `m` and a perceptual
//! vector `v` to output logits.
//!
//! The unstructured form contracts a dense `dim_m x dim_v x dim_out` core:
//! `out[k] = m^T T_k v`. The structured variants (block-term, Tucker, MLB,
//! MFB) project both inputs, contract a small structured core, and map the
//! result to the output. Each of them is still a bilinear map, and
//! [`Fusion::expanded_core`] materialises the equivalent dense core.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Bilinear,
    Block,
    Mutan,
    Mlb,
    Mfb,
    CatMlp,
}

impl FusionKind {
    pub const ALL: [FusionKind; 6] = [
        FusionKind::Bilinear,
        FusionKind::Block,
        FusionKind::Mutan,
        FusionKind::Mlb,
        FusionKind::Mfb,
        FusionKind::CatMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Bilinear => "bilinear",
            FusionKind::Block => "block",
            FusionKind::Mutan => "mutan",
            FusionKind::Mlb => "mlb",
            FusionKind::Mfb => "mfb",
            FusionKind::CatMlp => "cat_mlp",
        }
    }

    pub fn is_bilinear(self) -> bool {
        self != FusionKind::CatMlp
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub kind: FusionKind,
    /// Decision input size (`2K` for a trajectory).
    pub dim_m: usize,
    /// Perceptual input size (`d_L`).
    pub dim_v: usize,
    pub dim_out: usize,
    /// Projected size of `m` and `v` for the structured variants.
    pub proj_dim: usize,
    pub block_count: usize,
    /// Factor rank for MFB; also accepted (and ignored) by MLB and MUTAN.
    pub rank: usize,
    /// Hidden width of the concatenation perceptron.
    pub hidden: usize,
}

impl FusionConfig {
    /// Desk-scale block-term setting: 260-dim projections in 5 blocks of 52.
    pub fn block(dim_m: usize, dim_v: usize, dim_out: usize) -> Self {
        FusionConfig {
            kind: FusionKind::Block,
            dim_m,
            dim_v,
            dim_out,
            proj_dim: 260,
            block_count: 5,
            rank: 5,
            hidden: 128,
        }
    }

    pub fn with_kind(mut self, kind: FusionKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("dim_m", self.dim_m),
            ("dim_v", self.dim_v),
            ("dim_out", self.dim_out),
            ("proj_dim", self.proj_dim),
            ("block_count", self.block_count),
        ] {
            if v == 0 {
                return Err(Error::config(format!("fusion.{field}"), "must be at least 1"));
            }
        }
        match self.kind {
            FusionKind::Block if self.proj_dim % self.block_count != 0 => Err(Error::config(
                "fusion.proj_dim",
                format!(
                    "{} is not divisible by block_count {}",
                    self.proj_dim, self.block_count
                ),
            )),
            FusionKind::Mfb | FusionKind::Mlb | FusionKind::Mutan if self.rank == 0 => {
                Err(Error::config("fusion.rank", "must be at least 1"))
            }
            FusionKind::CatMlp if self.hidden == 0 => {
                Err(Error::config("fusion.hidden", "must be at least 1"))
            }
            _ => Ok(()),
        }
    }

    /// Number of trainable scalars of this fusion.
    pub fn param_count(&self) -> usize {
        let (m, v, o, p) = (self.dim_m, self.dim_v, self.dim_out, self.proj_dim);
        match self.kind {
            FusionKind::Bilinear => m * v * o,
            FusionKind::Block => {
                let s = p / self.block_count;
                p * m + p * v + self.block_count * s * s * s + o * p
            }
            FusionKind::Mutan => p * m + p * v + p * p * p + o * p,
            FusionKind::Mlb => p * m + p * v + o * p,
            FusionKind::Mfb => p * self.rank * (m + v) + o * p,
            FusionKind::CatMlp => self.hidden * (m + v) + self.hidden + o * self.hidden + o,
        }
    }
}

/// Parameters of the block-term fusion: projections around a block-diagonal
/// core stored as its `B` diagonal blocks, each `s x s x s` with `s = P / B`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFusionParams {
    pub w_m: ParamId,
    pub w_v: ParamId,
    pub blocks: Vec<ParamId>,
    pub w_c: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
enum Weights {
    Bilinear { core: ParamId },
    Block(BlockFusionParams),
    Mutan { w_m: ParamId, w_v: ParamId, core: ParamId, w_c: ParamId },
    LowRank { w_m: ParamId, w_v: ParamId, w_c: ParamId },
    CatMlp { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    config: FusionConfig,
    weights: Weights,
}

impl Fusion {
    /// Registers Xavier-initialised weights under `prefix` (e.g. `"fusion"`).
    pub fn new<T: Element>(
        config: FusionConfig,
        store: &mut ParamStore<T>,
        prefix: &str,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (m, v, o, p) = (config.dim_m, config.dim_v, config.dim_out, config.proj_dim);
        let name = |s: &str| format!("{prefix}.{s}");
        let weights = match config.kind {
            FusionKind::Bilinear => Weights::Bilinear {
                core: store.add_xavier(name("core"), &[m, v, o], m * v, o, rng),
            },
            FusionKind::Block => {
                let s = p / config.block_count;
                let w_m = store.add_xavier(name("w_m"), &[p, m], m, p, rng);
                let w_v = store.add_xavier(name("w_v"), &[p, v], v, p, rng);
                let blocks = (0..config.block_count)
                    .map(|b| store.add_xavier(name(&format!("block{b}")), &[s, s, s], s * s, s, rng))
                    .collect();
                let w_c = store.add_xavier(name("w_c"), &[o, p], p, o, rng);
                Weights::Block(BlockFusionParams { w_m, w_v, blocks, w_c })
            }
            FusionKind::Mutan => Weights::Mutan {
                w_m: store.add_xavier(name("w_m"), &[p, m], m, p, rng),
                w_v: store.add_xavier(name("w_v"), &[p, v], v, p, rng),
                core: store.add_xavier(name("core"), &[p, p, p], p * p, p, rng),
                w_c: store.add_xavier(name("w_c"), &[o, p], p, o, rng),
            },
            FusionKind::Mlb | FusionKind::Mfb => {
                let q = if config.kind == FusionKind::Mfb { p * config.rank } else { p };
                Weights::LowRank {
                    w_m: store.add_xavier(name("w_m"), &[q, m], m, q, rng),
                    w_v: store.add_xavier(name("w_v"), &[q, v], v, q, rng),
                    w_c: store.add_xavier(name("w_c"), &[o, p], p, o, rng),
                }
            }
            FusionKind::CatMlp => {
                let h = config.hidden;
                Weights::CatMlp {
                    w1: store.add_xavier(name("w1"), &[h, m + v], m + v, h, rng),
                    b1: store.add_zeros(name("b1"), &[h]),
                    w2: store.add_xavier(name("w2"), &[o, h], h, o, rng),
                    b2: store.add_zeros(name("b2"), &[o]),
                }
            }
        };
        Ok(Fusion { config, weights })
    }

    /// Rebinds a fusion to parameters already present in `store`.
    pub fn bind<T: Element>(config: FusionConfig, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        config.validate()?;
        let id = |s: &str| {
            let n = format!("{prefix}.{s}");
            store.find(&n).ok_or(Error::UnknownParameter(n))
        };
        let weights = match config.kind {
            FusionKind::Bilinear => Weights::Bilinear { core: id("core")? },
            FusionKind::Block => Weights::Block(BlockFusionParams {
                w_m: id("w_m")?,
                w_v: id("w_v")?,
                blocks: (0..config.block_count)
                    .map(|b| id(&format!("block{b}")))
                    .collect::<Result<_>>()?,
                w_c: id("w_c")?,
            }),
            FusionKind::Mutan => Weights::Mutan {
                w_m: id("w_m")?,
                w_v: id("w_v")?,
                core: id("core")?,
                w_c: id("w_c")?,
            },
            FusionKind::Mlb | FusionKind::Mfb => Weights::LowRank {
                w_m: id("w_m")?,
                w_v: id("w_v")?,
                w_c: id("w_c")?,
            },
            FusionKind::CatMlp => Weights::CatMlp {
                w1: id("w1")?,
                b1: id("b1")?,
                w2: id("w2")?,
                b2: id("b2")?,
            },
        };
        Ok(Fusion { config, weights })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn kind(&self) -> FusionKind {
        self.config.kind
    }

    pub fn block_params(&self) -> Option<&BlockFusionParams> {
        match &self.weights {
            Weights::Block(p) => Some(p),
            _ => None,
        }
    }

    /// Every parameter owned by this fusion.
    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.weights {
            Weights::Bilinear { core } => vec![*core],
            Weights::Block(p) => {
                let mut ids = vec![p.w_m, p.w_v];
                ids.extend(&p.blocks);
                ids.push(p.w_c);
                ids
            }
            Weights::Mutan { w_m, w_v, core, w_c } => vec![*w_m, *w_v, *core, *w_c],
            Weights::LowRank { w_m, w_v, w_c } => vec![*w_m, *w_v, *w_c],
            Weights::CatMlp { w1, b1, w2, b2 } => vec![*w1, *b1, *w2, *b2],
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, m: Var, v: Var) -> Result<Var> {
        self.check_inputs(tape.shape(m), tape.shape(v))?;
        match &self.weights {
            Weights::Bilinear { core } => {
                let core = tape.param(store, *core);
                fuse_bilinear(tape, m, v, core)
            }
            Weights::Block(p) => {
                let w_m = tape.param(store, p.w_m);
                let w_v = tape.param(store, p.w_v);
                let blocks: Vec<Var> = p.blocks.iter().map(|&b| tape.param(store, b)).collect();
                let w_c = tape.param(store, p.w_c);
                fuse_block(tape, m, v, w_m, w_v, &blocks, w_c)
            }
            Weights::Mutan { w_m, w_v, core, w_c } => {
                let (w_m, w_v) = (tape.param(store, *w_m), tape.param(store, *w_v));
                let (core, w_c) = (tape.param(store, *core), tape.param(store, *w_c));
                fuse_block(tape, m, v, w_m, w_v, &[core], w_c)
            }
            Weights::LowRank { w_m, w_v, w_c } => {
                let (w_m, w_v, w_c) = (
                    tape.param(store, *w_m),
                    tape.param(store, *w_v),
                    tape.param(store, *w_c),
                );
                let rank = if self.config.kind == FusionKind::Mfb { self.config.rank } else { 1 };
                fuse_low_rank(tape, m, v, w_m, w_v, w_c, rank)
            }
            Weights::CatMlp { w1, b1, w2, b2 } => {
                let (w1, b1) = (tape.param(store, *w1), tape.param(store, *b1));
                let (w2, b2) = (tape.param(store, *w2), tape.param(store, *b2));
                fuse_cat_mlp(tape, m, v, w1, b1, w2, b2)
            }
        }
    }

    /// Tape-free evaluation.
    pub fn evaluate<T: Element>(&self, store: &ParamStore<T>, m: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let (mv, vv) = (tape.input(m.clone())?, tape.input(v.clone())?);
        let out = self.forward(&mut tape, store, mv, vv)?;
        Ok(tape.value(out).clone())
    }

    fn check_inputs(&self, m: &[usize], v: &[usize]) -> Result<()> {
        if m != [self.config.dim_m] {
            return Err(Error::shape("fusion", &[self.config.dim_m], m));
        }
        if v != [self.config.dim_v] {
            return Err(Error::shape("fusion", &[self.config.dim_v], v));
        }
        Ok(())
    }

    /// Dense `dim_m x dim_v x dim_out` core of the equivalent unstructured
    /// bilinear map. Not defined for the concatenation perceptron.
    pub fn expanded_core<T: Element>(&self, store: &ParamStore<T>) -> Result<Tensor<T>> {
        let val = |id: ParamId| store.value(id);
        match &self.weights {
            Weights::Bilinear { core } => Ok(val(*core).clone()),
            Weights::Block(p) => {
                let blocks: Vec<Tensor<T>> = p.blocks.iter().map(|&b| val(b).clone()).collect();
                let core = expand_block_diagonal(&blocks)?;
                tucker_expand(&core, val(p.w_m), val(p.w_v), val(p.w_c))
            }
            Weights::Mutan { w_m, w_v, core, w_c } => tucker_expand(val(*core), val(*w_m), val(*w_v), val(*w_c)),
            Weights::LowRank { w_m, w_v, w_c } => {
                let rank = if self.config.kind == FusionKind::Mfb { self.config.rank } else { 1 };
                let q = self.config.proj_dim * rank;
                let mut core = Tensor::zeros(&[q, q, self.config.proj_dim]);
                for a in 0..q {
                    let off = core.offset(&[a, a, a / rank]);
                    core.data_mut()[off] = T::one();
                }
                tucker_expand(&core, val(*w_m), val(*w_v), val(*w_c))
            }
            Weights::CatMlp { .. } => Err(Error::domain(
                "expanded_core",
                "concatenation perceptron is not a bilinear map",
            )),
        }
    }
}

/// `out[k] = sum_ij m[i] v[j] core[i, j, k]`, i.e. `core x_1 m x_2 v`.
pub fn fuse_bilinear<T: Element>(tape: &mut Tape<T>, m: Var, v: Var, core: Var) -> Result<Var> {
    if tape.value(core).rank() != 3 {
        return Err(Error::shape("fuse_bilinear", &[0, 0, 0], tape.shape(core)));
    }
    let partial = tape.mode_n_product(core, m, 1)?;
    tape.mode_n_product(partial, v, 1)
}

/// Projects both inputs, contracts each chunk pair with its own diagonal
/// block, concatenates the chunk outputs and maps them to the output size.
/// With a single block this is the Tucker (MUTAN) form.
pub fn fuse_block<T: Element>(
    tape: &mut Tape<T>,
    m: Var,
    v: Var,
    w_m: Var,
    w_v: Var,
    blocks: &[Var],
    w_c: Var,
) -> Result<Var> {
    let m_proj = tape.linear(m, w_m, None)?;
    let v_proj = tape.linear(v, w_v, None)?;
    let (pm, pv) = (tape.value(m_proj).numel(), tape.value(v_proj).numel());
    if blocks.is_empty() || pm % blocks.len() != 0 || pv % blocks.len() != 0 {
        return Err(Error::domain(
            "fuse_block",
            format!("projection sizes {pm}/{pv} do not split into {} blocks", blocks.len()),
        ));
    }
    let (sm, sv) = (pm / blocks.len(), pv / blocks.len());
    let mut chunks = Vec::with_capacity(blocks.len());
    for (b, &block) in blocks.iter().enumerate() {
        let expected = [sm, sv];
        if tape.shape(block).len() != 3 || tape.shape(block)[..2] != expected {
            return Err(Error::shape("fuse_block", &expected, tape.shape(block)));
        }
        let mb = tape.slice(m_proj, b * sm, sm)?;
        let vb = tape.slice(v_proj, b * sv, sv)?;
        chunks.push(fuse_bilinear(tape, mb, vb, block)?);
    }
    let fused = if chunks.len() == 1 { chunks[0] } else { tape.concat(&chunks)? };
    tape.linear(fused, w_c, None)
}

/// MLB (`rank = 1`) and MFB: elementwise product of the projections,
/// sum-pooled over windows of `rank`, then the output map.
pub fn fuse_low_rank<T: Element>(
    tape: &mut Tape<T>,
    m: Var,
    v: Var,
    w_m: Var,
    w_v: Var,
    w_c: Var,
    rank: usize,
) -> Result<Var> {
    if rank == 0 {
        return Err(Error::domain("fuse_low_rank", "rank must be at least 1"));
    }
    let m_proj = tape.linear(m, w_m, None)?;
    let v_proj = tape.linear(v, w_v, None)?;
    let joint = tape.mul(m_proj, v_proj)?;
    let pooled = if rank == 1 { joint } else { tape.sum_pool(joint, rank)? };
    tape.linear(pooled, w_c, None)
}

/// `W2 relu(W1 [m; v] + b1) + b2`.
pub fn fuse_cat_mlp<T: Element>(
    tape: &mut Tape<T>,
    m: Var,
    v: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let x = tape.concat(&[m, v])?;
    let h = tape.linear(x, w1, Some(b1))?;
    let h = tape.relu(h)?;
    tape.linear(h, w2, Some(b2))
}

/// Dense block-diagonal core from its diagonal blocks.
pub fn expand_block_diagonal<T: Element>(blocks: &[Tensor<T>]) -> Result<Tensor<T>> {
    if blocks.is_empty() {
        return Err(Error::domain("expand_block_diagonal", "no blocks"));
    }
    let dims: [usize; 3] = blocks.iter().fold([0; 3], |mut acc, b| {
        for (a, d) in acc.iter_mut().zip(b.shape()) {
            *a += d;
        }
        acc
    });
    let mut core = Tensor::zeros(&dims);
    let mut base = [0usize; 3];
    for b in blocks {
        if b.rank() != 3 {
            return Err(Error::shape("expand_block_diagonal", &[0, 0, 0], b.shape()));
        }
        let s = b.shape();
        for i in 0..s[0] {
            for j in 0..s[1] {
                for k in 0..s[2] {
                    let off = core.offset(&[base[0] + i, base[1] + j, base[2] + k]);
                    core.data_mut()[off] = b.at(&[i, j, k]);
                }
            }
        }
        for a in 0..3 {
            base[a] += s[a];
        }
    }
    Ok(core)
}

/// True when every nonzero entry `(i, j, k)` of a cubic core lies in the same
/// one of `block_count` equal diagonal blocks along all three modes.
pub fn is_block_diagonal<T: Element>(core: &Tensor<T>, block_count: usize) -> bool {
    let s = core.shape();
    if s.len() != 3 || block_count == 0 || s.iter().any(|d| d % block_count != 0) {
        return false;
    }
    let size = [s[0] / block_count, s[1] / block_count, s[2] / block_count];
    for i in 0..s[0] {
        for j in 0..s[1] {
            for k in 0..s[2] {
                let same = i / size[0] == j / size[1] && j / size[1] == k / size[2];
                if !same && core.at(&[i, j, k]) != T::zero() {
                    return false;
                }
            }
        }
    }
    true
}

/// `T[i, j, k] = sum_abc D[a, b, c] W_m[a, i] W_v[b, j] W_c[k, c]`.
pub fn tucker_expand<T: Element>(
    core: &Tensor<T>,
    w_m: &Tensor<T>,
    w_v: &Tensor<T>,
    w_c: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = core.shape();
    if d.len() != 3
        || w_m.rank() != 2
        || w_v.rank() != 2
        || w_c.rank() != 2
        || w_m.shape()[0] != d[0]
        || w_v.shape()[0] != d[1]
        || w_c.shape()[1] != d[2]
    {
        return Err(Error::shape("tucker_expand", d, w_m.shape()));
    }
    let (p1, p2, p3) = (d[0], d[1], d[2]);
    let (dm, dv, dout) = (w_m.shape()[1], w_v.shape()[1], w_c.shape()[0]);
    // Contract mode 3 with W_c: A[a, b, k]
    let mut a_buf = vec![T::zero(); p1 * p2 * dout];
    for ab in 0..p1 * p2 {
        for k in 0..dout {
            let mut acc = T::zero();
            for c in 0..p3 {
                acc += core.data()[ab * p3 + c] * w_c.data()[k * p3 + c];
            }
            a_buf[ab * dout + k] = acc;
        }
    }
    // Mode 2 with W_v: B[a, j, k]
    let mut b_buf = vec![T::zero(); p1 * dv * dout];
    for a in 0..p1 {
        for b in 0..p2 {
            for j in 0..dv {
                let wv = w_v.data()[b * dv + j];
                if wv == T::zero() {
                    continue;
                }
                for k in 0..dout {
                    b_buf[(a * dv + j) * dout + k] += a_buf[(a * p2 + b) * dout + k] * wv;
                }
            }
        }
    }
    // Mode 1 with W_m: T[i, j, k]
    let mut out = vec![T::zero(); dm * dv * dout];
    for a in 0..p1 {
        for i in 0..dm {
            let wm = w_m.data()[a * dm + i];
            if wm == T::zero() {
                continue;
            }
            for jk in 0..dv * dout {
                out[i * dv * dout + jk] += b_buf[a * dv * dout + jk] * wm;
            }
        }
    }
    Tensor::new(&[dm, dv, dout], out)
}
