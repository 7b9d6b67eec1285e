//! Frequency transformation and convolution blocks.
//!
//! Activations are `[N, c, F, T]`. Every frequency transformation (TDF, the
//! LaSAFT and LightSAFT variants) acts on the frequency axis with weights
//! shared across channels and frames, so internally the input is viewed as
//! `[N, c, T, F]` rows of length `F`.
//!
//! The latent-source frequency transformations produce one value tensor per
//! latent source and blend them with attention weights
//! `softmax(q k^T / sqrt(d_k))` computed from a condition query `q` and the
//! learnable latent-source keys `k`:
//!
//! * LaSAFT: phase 1 runs one FC block per latent source (`F -> F/bf`); phase 2
//!   runs, for every latent source, an FC block that reads the hidden features
//!   of *all* latent sources (`|S_L| * F/bf -> F`).
//! * LightSAFT: phase 1 is unchanged; phase 2 is a single FC block
//!   (`F/bf -> F`) shared by all latent sources, each applied only to its own
//!   hidden features.
//!
//! The per-source phase-1 layers read the same input, so they are stored as
//! one `F x (|S_L| * h)` matrix whose column block `i` belongs to latent source
//! `i`. LaSAFT's phase-2 layers likewise form one `(|S_L| * h) x (|S_L| * F)`
//! matrix.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Ctx, Init, Norm, ParamBuilder, ParamId, ParamStore};
use crate::scalar::Real;

/// Linear layer followed by batch norm over its output features and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct FcBlock {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Norm,
    pub fin: usize,
    pub fout: usize,
}

impl FcBlock {
    pub fn new<S: Real>(b: &mut ParamBuilder<S>, prefix: &str, fin: usize, fout: usize) -> Self {
        let weight = b.add(format!("{prefix}.linear.weight"), &[fin, fout], Init::FanIn(fin));
        let bias = b.add(format!("{prefix}.linear.bias"), &[fout], Init::FanIn(fin));
        let norm = b.add_norm(&format!("{prefix}.norm"), fout);
        Self { weight, bias, norm, fin, fout }
    }

    /// `x[..., fin] -> [..., fout]`.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        let y = ctx.graph.linear(x, w, Some(b))?;
        let axis = ctx.graph.shape(y).len() - 1;
        let y = ctx.norm(y, &self.norm, axis)?;
        Ok(ctx.graph.relu(y))
    }

    pub fn num_params(&self) -> usize {
        self.fin * self.fout + 3 * self.fout
    }
}

fn expect_freq<S: Real>(g: &Graph<S>, x: Var, freq: usize, operand: &'static str) -> Result<()> {
    let s = g.shape(x);
    if s.len() != 4 || s[2] != freq {
        return Err(dim_err(operand, format!("expected [N, c, {freq}, T], got {s:?}")));
    }
    Ok(())
}

/// Hidden width of a frequency bottleneck: `max(1, F / bf)`.
pub fn bottleneck_width(freq_dim: usize, bottleneck: usize) -> usize {
    (freq_dim / bottleneck.max(1)).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TdfSpec {
    pub freq_dim: usize,
    pub bottleneck: usize,
}

impl TdfSpec {
    pub fn hidden(&self) -> usize {
        bottleneck_width(self.freq_dim, self.bottleneck)
    }
}

/// Time-distributed fully connected block: `F -> F/bf -> F` along frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct Tdf {
    pub spec: TdfSpec,
    pub fc1: FcBlock,
    pub fc2: FcBlock,
}

impl Tdf {
    pub fn new<S: Real>(b: &mut ParamBuilder<S>, prefix: &str, spec: TdfSpec) -> Result<Self> {
        if spec.freq_dim == 0 || spec.bottleneck == 0 {
            return Err(Error::Config(format!("invalid TDF spec {spec:?}")));
        }
        let h = spec.hidden();
        Ok(Self {
            spec,
            fc1: FcBlock::new(b, &format!("{prefix}.fc1"), spec.freq_dim, h),
            fc2: FcBlock::new(b, &format!("{prefix}.fc2"), h, spec.freq_dim),
        })
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        expect_freq(ctx.graph, x, self.spec.freq_dim, "tdf input")?;
        let t = ctx.graph.swap_last2(x);
        let h = self.fc1.forward(ctx, t)?;
        let y = self.fc2.forward(ctx, h)?;
        Ok(ctx.graph.swap_last2(y))
    }

    pub fn num_params(&self) -> usize {
        self.fc1.num_params() + self.fc2.num_params()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TfcSpec {
    pub in_channels: usize,
    pub growth: usize,
    pub num_layers: usize,
    pub kernel: (usize, usize),
}

/// One convolution layer of a dense block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Norm,
    pub c_in: usize,
}

/// Densely connected time-frequency convolutions: layer `i` reads the
/// concatenation of the block input and every earlier layer's output; the
/// block returns the last layer's output (`growth` channels).
#[derive(Debug, Clone, PartialEq)]
pub struct Tfc {
    pub spec: TfcSpec,
    pub layers: Vec<ConvLayer>,
}

impl Tfc {
    pub fn new<S: Real>(b: &mut ParamBuilder<S>, prefix: &str, spec: TfcSpec) -> Result<Self> {
        let (kf, kt) = spec.kernel;
        if spec.in_channels == 0 || spec.growth == 0 || spec.num_layers == 0 || kf == 0 || kt == 0 {
            return Err(Error::Config(format!("invalid TFC spec {spec:?}")));
        }
        if kf % 2 == 0 || kt % 2 == 0 {
            return Err(Error::Config(format!("TFC kernel {:?} must be odd for same padding", spec.kernel)));
        }
        let layers = (0..spec.num_layers)
            .map(|i| {
                let c_in = spec.in_channels + i * spec.growth;
                let fan_in = c_in * kf * kt;
                ConvLayer {
                    weight: b.add(format!("{prefix}.conv{i}.weight"), &[spec.growth, c_in, kf, kt], Init::FanIn(fan_in)),
                    bias: b.add(format!("{prefix}.conv{i}.bias"), &[spec.growth], Init::FanIn(fan_in)),
                    norm: b.add_norm(&format!("{prefix}.conv{i}.norm"), spec.growth),
                    c_in,
                }
            })
            .collect();
        Ok(Self { spec, layers })
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let s = ctx.graph.shape(x);
        if s.len() != 4 || s[1] != self.spec.in_channels {
            return Err(dim_err(
                "tfc input",
                format!("expected [N, {}, F, T], got {s:?}", self.spec.in_channels),
            ));
        }
        let pad = (self.spec.kernel.0 / 2, self.spec.kernel.1 / 2);
        let mut features = vec![x];
        let mut out = x;
        for layer in &self.layers {
            let input = if features.len() == 1 {
                features[0]
            } else {
                ctx.graph.concat(&features, 1)?
            };
            let (w, b) = (ctx.p(layer.weight), ctx.p(layer.bias));
            let y = ctx.graph.conv2d(input, w, Some(b), (1, 1), pad)?;
            let y = ctx.norm(y, &layer.norm, 1)?;
            out = ctx.graph.relu(y);
            features.push(out);
        }
        Ok(out)
    }

    pub fn num_params(&self) -> usize {
        let (kf, kt) = self.spec.kernel;
        self.layers
            .iter()
            .map(|l| self.spec.growth * l.c_in * kf * kt + 3 * self.spec.growth)
            .sum()
    }
}

/// TFC followed by a residual TDF: `h = tfc(x); h + tdf(h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TfcTdf {
    pub tfc: Tfc,
    pub tdf: Tdf,
}

impl TfcTdf {
    pub fn new<S: Real>(b: &mut ParamBuilder<S>, prefix: &str, tfc: TfcSpec, tdf: TdfSpec) -> Result<Self> {
        Ok(Self {
            tfc: Tfc::new(b, &format!("{prefix}.tfc"), tfc)?,
            tdf: Tdf::new(b, &format!("{prefix}.tdf"), tdf)?,
        })
    }

    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let h = self.tfc.forward(ctx, x)?;
        let t = self.tdf.forward(ctx, h)?;
        ctx.graph.add(h, t)
    }

    pub fn num_params(&self) -> usize {
        self.tfc.num_params() + self.tdf.num_params()
    }
}

/// Learnable key vectors, one per latent source: `[|S_L|, d_k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSourceBank {
    pub keys: ParamId,
    pub num_latent: usize,
    pub key_dim: usize,
}

impl LatentSourceBank {
    pub fn new<S: Real>(b: &mut ParamBuilder<S>, prefix: &str, num_latent: usize, key_dim: usize) -> Result<Self> {
        if num_latent == 0 || key_dim == 0 {
            return Err(Error::Config(format!("latent bank needs |S_L| >= 1 and d_k >= 1, got {num_latent}/{key_dim}")));
        }
        let keys = b.add(format!("{prefix}.keys"), &[num_latent, key_dim], Init::Uniform(1.0));
        Ok(Self { keys, num_latent, key_dim })
    }

    pub fn num_params(&self) -> usize {
        self.num_latent * self.key_dim
    }
}

/// Learnable query table, one `d_k` row per condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub table: ParamId,
    pub num_conditions: usize,
    pub key_dim: usize,
}

impl ConditionEmbedding {
    pub fn new<S: Real>(b: &mut ParamBuilder<S>, prefix: &str, num_conditions: usize, key_dim: usize) -> Result<Self> {
        if num_conditions == 0 || key_dim == 0 {
            return Err(Error::Config(format!("embedding needs at least one condition and d_k >= 1")));
        }
        let table = b.add(format!("{prefix}.table"), &[num_conditions, key_dim], Init::Uniform(1.0));
        Ok(Self { table, num_conditions, key_dim })
    }

    pub fn num_params(&self) -> usize {
        self.num_conditions * self.key_dim
    }
}

/// Query rows `[ids.len(), d_k]` for a batch of condition ids.
pub fn make_query<S: Real>(ctx: &mut Ctx<'_, S>, emb: &ConditionEmbedding, ids: &[usize]) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&i| i >= emb.num_conditions) {
        return Err(Error::Condition {
            id: bad,
            count: emb.num_conditions,
        });
    }
    let table = ctx.p(emb.table);
    ctx.graph.gather_rows(table, ids)
}

/// `softmax(q k^T / sqrt(d_k))`: `q[N, d_k]`, `k[L, d_k]` -> `[N, L]`.
pub fn attention_weights<S: Real>(g: &mut Graph<S>, q: Var, k: Var) -> Result<Var> {
    let d_k = g.shape(k)[1];
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, S::one() / S::from_usize(d_k).sqrt());
    Ok(g.softmax(scaled))
}

/// Attention-weighted sum of latent-source values.
///
/// `q[N, d_k]`, `k[L, d_k]`, `v[N, M, L, D]` -> `[N, M, D]`.
pub fn attention_aggregate<S: Real>(g: &mut Graph<S>, q: Var, k: Var, v: Var) -> Result<Var> {
    let (ks, vs) = (g.shape(k), g.shape(v));
    if vs.len() != 4 || ks.len() != 2 || vs[2] != ks[0] {
        return Err(dim_err(
            "attention values",
            format!("keys {ks:?} do not match latent axis of values {vs:?}"),
        ));
    }
    let w = attention_weights(g, q, k)?;
    g.latent_mix(w, v)
}

/// Single-example attention over tensors: `q[1, d_k]`, `k[L, d_k]`,
/// `v[L, c, F, T]` -> `[c, F, T]`.
pub fn attention_aggregate_tensors<S: Real>(q: &Tensor<S>, k: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
    if v.ndim() < 2 || k.ndim() != 2 || v.shape()[0] != k.shape()[0] {
        return Err(dim_err(
            "attention values",
            format!("keys {:?} do not match latent axis of values {:?}", k.shape(), v.shape()),
        ));
    }
    let l = v.shape()[0];
    let d = v.numel() / l;
    // [L, D] -> [1, D, L, 1]
    let mut vt = vec![S::zero(); v.numel()];
    for li in 0..l {
        for j in 0..d {
            vt[j * l + li] = v.data()[li * d + j];
        }
    }
    let mut g = Graph::new();
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let vv = g.constant(Tensor::new(&[1, d, l, 1], vt)?);
    let out = attention_aggregate(&mut g, qv, kv, vv)?;
    g.value(out).clone().reshape(&v.shape()[1..])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaftVariant {
    Lasaft,
    Lightsaft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaftSpec {
    pub variant: SaftVariant,
    pub freq_dim: usize,
    pub bottleneck: usize,
    pub num_latent: usize,
    pub key_dim: usize,
}

impl SaftSpec {
    pub fn hidden(&self) -> usize {
        bottleneck_width(self.freq_dim, self.bottleneck)
    }
}

/// Latent-source frequency transformation (LaSAFT or LightSAFT).
#[derive(Debug, Clone, PartialEq)]
pub struct SaftFt {
    pub spec: SaftSpec,
    /// `F -> |S_L| * h`, column block `i` is latent source `i`.
    pub phase1: FcBlock,
    /// LaSAFT: `|S_L| * h -> |S_L| * F`; LightSAFT: shared `h -> F`.
    pub phase2: FcBlock,
}

impl SaftFt {
    pub fn new<S: Real>(b: &mut ParamBuilder<S>, prefix: &str, spec: SaftSpec) -> Result<Self> {
        if spec.freq_dim == 0 || spec.bottleneck == 0 || spec.num_latent == 0 || spec.key_dim == 0 {
            return Err(Error::Config(format!("invalid latent-source FT spec {spec:?}")));
        }
        let (f, h, l) = (spec.freq_dim, spec.hidden(), spec.num_latent);
        let phase1 = FcBlock::new(b, &format!("{prefix}.phase1"), f, l * h);
        let phase2 = match spec.variant {
            SaftVariant::Lasaft => FcBlock::new(b, &format!("{prefix}.phase2"), l * h, l * f),
            SaftVariant::Lightsaft => FcBlock::new(b, &format!("{prefix}.phase2"), h, f),
        };
        Ok(Self { spec, phase1, phase2 })
    }

    /// Latent-source values `[N, c*T, |S_L|, F]` for input `x[N, c, F, T]`.
    pub fn latent_values<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        expect_freq(ctx.graph, x, self.spec.freq_dim, "latent FT input")?;
        let s = ctx.graph.shape(x).to_vec();
        let (n, c, f, t) = (s[0], s[1], s[2], s[3]);
        let (l, h) = (self.spec.num_latent, self.spec.hidden());
        let rows = ctx.graph.swap_last2(x);
        let hidden = self.phase1.forward(ctx, rows)?;
        let v = match self.spec.variant {
            SaftVariant::Lasaft => self.phase2.forward(ctx, hidden)?,
            SaftVariant::Lightsaft => {
                let per_source = ctx.graph.reshape(hidden, &[n, c, t, l, h])?;
                self.phase2.forward(ctx, per_source)?
            }
        };
        ctx.graph.reshape(v, &[n, c * t, l, f])
    }

    /// `x[N, c, F, T]` blended by attention weights `w[N, |S_L|]`.
    pub fn forward_weighted<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var, w: Var) -> Result<Var> {
        let s = ctx.graph.shape(x).to_vec();
        let v = self.latent_values(ctx, x)?;
        let mixed = ctx.graph.latent_mix(w, v)?;
        let mixed = ctx.graph.reshape(mixed, &[s[0], s[1], s[3], s[2]])?;
        Ok(ctx.graph.swap_last2(mixed))
    }

    /// Full transformation: query `q[N, d_k]` against `bank` keys.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var, q: Var, bank: &LatentSourceBank) -> Result<Var> {
        if bank.num_latent != self.spec.num_latent {
            return Err(dim_err(
                "latent bank",
                format!("{} keys for {} latent sources", bank.num_latent, self.spec.num_latent),
            ));
        }
        let k = ctx.p(bank.keys);
        let w = attention_weights(ctx.graph, q, k)?;
        self.forward_weighted(ctx, x, w)
    }

    pub fn num_params(&self) -> usize {
        self.phase1.num_params() + self.phase2.num_params()
    }

    /// Relabels latent sources: new source `i` takes the weights of old source
    /// `perm[i]`, together with its key in `bank`.
    pub fn permute_latent<S: Real>(&self, store: &mut ParamStore<S>, bank: &LatentSourceBank, perm: &[usize]) -> Result<()> {
        let (f, h, l) = (self.spec.freq_dim, self.spec.hidden(), self.spec.num_latent);
        if perm.len() != l || {
            let mut seen = vec![false; l];
            !perm.iter().all(|&p| p < l && !core::mem::replace(&mut seen[p], true))
        } {
            return Err(Error::Input(format!("{perm:?} is not a permutation of 0..{l}")));
        }
        permute_column_blocks(store, self.phase1.weight, f, l, h, perm);
        permute_column_blocks(store, self.phase1.bias, 1, l, h, perm);
        permute_column_blocks(store, self.phase1.norm.scale, 1, l, h, perm);
        permute_column_blocks(store, self.phase1.norm.shift, 1, l, h, perm);
        permute_column_blocks_buffer(store, self.phase1.norm.key, l, h, perm);
        permute_column_blocks_buffer(store, self.phase1.norm.key + 1, l, h, perm);
        if self.spec.variant == SaftVariant::Lasaft {
            // rows index input sources, columns index output sources
            let w = store.param(self.phase2.weight).clone();
            let (rows, cols) = (l * h, l * f);
            let mut out = w.clone();
            for (ni, &oi) in perm.iter().enumerate() {
                for r in 0..h {
                    for (nj, &oj) in perm.iter().enumerate() {
                        let src = (oi * h + r) * cols + oj * f;
                        let dst = (ni * h + r) * cols + nj * f;
                        out.data_mut()[dst..dst + f].copy_from_slice(&w.data()[src..src + f]);
                    }
                }
            }
            debug_assert_eq!(out.numel(), rows * cols);
            *store.param_mut(self.phase2.weight) = out;
            permute_column_blocks(store, self.phase2.bias, 1, l, f, perm);
            permute_column_blocks(store, self.phase2.norm.scale, 1, l, f, perm);
            permute_column_blocks(store, self.phase2.norm.shift, 1, l, f, perm);
            permute_column_blocks_buffer(store, self.phase2.norm.key, l, f, perm);
            permute_column_blocks_buffer(store, self.phase2.norm.key + 1, l, f, perm);
        }
        permute_column_blocks(store, bank.keys, 1, l, bank.key_dim, perm);
        Ok(())
    }
}

fn permute_blocks<S: Real>(data: &[S], rows: usize, l: usize, width: usize, perm: &[usize]) -> Vec<S> {
    let cols = l * width;
    let mut out = data.to_vec();
    for r in 0..rows {
        for (ni, &oi) in perm.iter().enumerate() {
            let (src, dst) = (r * cols + oi * width, r * cols + ni * width);
            out[dst..dst + width].copy_from_slice(&data[src..src + width]);
        }
    }
    out
}

fn permute_column_blocks<S: Real>(store: &mut ParamStore<S>, id: ParamId, rows: usize, l: usize, width: usize, perm: &[usize]) {
    let t = store.param_mut(id);
    let out = permute_blocks(t.data(), rows, l, width, perm);
    t.data_mut().copy_from_slice(&out);
}

fn permute_column_blocks_buffer<S: Real>(store: &mut ParamStore<S>, id: usize, l: usize, width: usize, perm: &[usize]) {
    let t = store.buffer_mut(id);
    let out = permute_blocks(t.data(), 1, l, width, perm);
    t.data_mut().copy_from_slice(&out);
}

/// A block that is either condition-independent (TFC-TDF) or a TFC followed by
/// a residual latent-source FT: `h = tfc(x); h + ft(h, q)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    TfcTdf(TfcTdf),
    Saft { tfc: Tfc, ft: SaftFt, bank: LatentSourceBank },
}

impl Block {
    pub fn tfc_tdf<S: Real>(b: &mut ParamBuilder<S>, prefix: &str, tfc: TfcSpec, tdf: TdfSpec) -> Result<Self> {
        Ok(Block::TfcTdf(TfcTdf::new(b, prefix, tfc, tdf)?))
    }

    pub fn saft<S: Real>(b: &mut ParamBuilder<S>, prefix: &str, tfc: TfcSpec, spec: SaftSpec) -> Result<Self> {
        Ok(Block::Saft {
            tfc: Tfc::new(b, &format!("{prefix}.tfc"), tfc)?,
            ft: SaftFt::new(b, &format!("{prefix}.ft"), spec)?,
            bank: LatentSourceBank::new(b, prefix, spec.num_latent, spec.key_dim)?,
        })
    }

    pub fn is_conditioned(&self) -> bool {
        matches!(self, Block::Saft { .. })
    }

    /// `q` is ignored by condition-independent blocks.
    pub fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var, q: Var) -> Result<Var> {
        match self {
            Block::TfcTdf(b) => b.forward(ctx, x),
            Block::Saft { tfc, ft, bank } => {
                let h = tfc.forward(ctx, x)?;
                let y = ft.forward(ctx, h, q, bank)?;
                ctx.graph.add(h, y)
            }
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Block::TfcTdf(b) => b.num_params(),
            Block::Saft { tfc, ft, bank } => tfc.num_params() + ft.num_params() + bank.num_params(),
        }
    }
}

#[cfg(test)]
mod tests;
