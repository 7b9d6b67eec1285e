//! The conditioned U-Net and its parameter audit.

mod separate;

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{make_query, Block, ConditionEmbedding, SaftSpec, SaftVariant, TdfSpec, TfcSpec};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{GradCheckOptions, GradCheckReport, Graph, Tensor, Var, BN_MOMENTUM};
use crate::params::{grad_check_store, Ctx, Init, Mode, Norm, ParamBuilder, ParamId, ParamStore};
use crate::scalar::Real;
use crate::spectro::StftConfig;

pub use separate::{
    assemble_chunks, crossfade_weights, frame_window, plan_chunks, separate_spectrogram, separate_track, Chunk, SeparationConfig,
};

/// Target instrument. Ids are fixed: vocals 0, drums 1, bass 2, other 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Vocals,
    Drums,
    Bass,
    Other,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Vocals, Condition::Drums, Condition::Bass, Condition::Other];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL.get(id).copied().ok_or(Error::Condition { id, count: 4 })
    }

    pub fn name(self) -> &'static str {
        match self {
            Condition::Vocals => "vocals",
            Condition::Drums => "drums",
            Condition::Bass => "bass",
            Condition::Other => "other",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::UnknownSource(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// LaSAFT blocks everywhere.
    Lasaft,
    /// LightSAFT blocks everywhere.
    Lightsaft,
    /// Unconditioned TFC-TDF encoder, LightSAFT bottleneck and decoder.
    LightsaftPlus,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Lasaft, Variant::Lightsaft, Variant::LightsaftPlus];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Lasaft => "lasaft",
            Variant::Lightsaft => "lightsaft",
            Variant::LightsaftPlus => "lightsaft_plus",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

/// Every hyperparameter of a [`ConditionedUNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of stride-2 down/up levels.
    pub num_scales: usize,
    /// Channel width `c` of every block; also the dense-block growth rate.
    pub internal_channels: usize,
    pub num_latent: usize,
    pub key_dim: usize,
    /// Frequency bottleneck factor `bf` of TDF and latent-source FCs.
    pub bottleneck: usize,
    pub tfc_layers: usize,
    pub kernel: [usize; 2],
    pub num_conditions: usize,
    pub audio_channels: usize,
    pub stft: StftConfig,
    pub seed: u64,
}

impl ModelConfig {
    /// Small configuration for CPU training in minutes.
    pub fn desk(variant: Variant) -> Self {
        Self {
            variant,
            num_scales: 3,
            internal_channels: 8,
            num_latent: 8,
            key_dim: 8,
            bottleneck: 8,
            tfc_layers: 3,
            kernel: [3, 3],
            num_conditions: 4,
            audio_channels: 1,
            stft: StftConfig::desk(),
            seed: 0,
        }
    }

    /// Full-scale configuration used for the parameter audit.
    pub fn reference(variant: Variant) -> Self {
        Self {
            variant,
            num_scales: 5,
            internal_channels: 32,
            num_latent: 16,
            key_dim: 24,
            bottleneck: 16,
            tfc_layers: 3,
            kernel: [3, 3],
            num_conditions: 4,
            audio_channels: 2,
            stft: StftConfig::full(),
            seed: 0,
        }
    }

    /// Small full-model configuration for finite-difference checks
    /// (F = 32, two scales).
    pub fn gradcheck(variant: Variant) -> Self {
        Self {
            variant,
            num_scales: 2,
            internal_channels: 4,
            num_latent: 4,
            key_dim: 8,
            bottleneck: 4,
            tfc_layers: 3,
            kernel: [3, 3],
            num_conditions: 4,
            audio_channels: 1,
            stft: StftConfig { n_fft: 64, hop: 32 },
            seed: 0,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn freq_bins(&self) -> usize {
        self.stft.freq_bins()
    }

    /// Spectrogram channels `C = 2 * audio_channels`.
    pub fn spec_channels(&self) -> usize {
        2 * self.audio_channels
    }

    pub fn validate(&self) -> Result<()> {
        self.stft.validate()?;
        let f = self.freq_bins();
        let scale = 1usize
            .checked_shl(self.num_scales as u32)
            .ok_or_else(|| Error::Config(format!("num_scales {} too large", self.num_scales)))?;
        if f % scale != 0 || f / scale == 0 {
            return Err(Error::Config(format!(
                "F = {f} is not divisible by 2^num_scales = {scale}"
            )));
        }
        let positive = [
            ("internal_channels", self.internal_channels),
            ("num_latent", self.num_latent),
            ("key_dim", self.key_dim),
            ("bottleneck", self.bottleneck),
            ("tfc_layers", self.tfc_layers),
            ("num_conditions", self.num_conditions),
        ];
        if let Some((name, _)) = positive.iter().find(|p| p.1 == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(1..=2).contains(&self.audio_channels) {
            return Err(Error::Config(format!("audio_channels {} must be 1 or 2", self.audio_channels)));
        }
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return Err(Error::Config(format!("kernel {:?} must be odd and positive", self.kernel)));
        }
        Ok(())
    }
}

/// Plain convolution, optionally followed by batch norm and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvUnit {
    pub weight: ParamId,
    pub bias: ParamId,
    pub norm: Option<Norm>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub transposed: bool,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn new<S: Real>(
        b: &mut ParamBuilder<S>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        transposed: bool,
        norm: bool,
    ) -> Self {
        let fan_in = c_in * kernel.0 * kernel.1;
        let shape = if transposed {
            [c_in, c_out, kernel.0, kernel.1]
        } else {
            [c_out, c_in, kernel.0, kernel.1]
        };
        let weight = b.add(format!("{prefix}.weight"), &shape, Init::FanIn(fan_in));
        let bias = b.add(format!("{prefix}.bias"), &[c_out], Init::FanIn(fan_in));
        let norm = norm.then(|| b.add_norm(&format!("{prefix}.norm"), c_out));
        Self {
            weight,
            bias,
            norm,
            stride,
            padding,
            transposed,
        }
    }

    fn forward<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.weight), ctx.p(self.bias));
        let y = if self.transposed {
            ctx.graph.conv_transpose2d(x, w, Some(b), self.stride)?
        } else {
            ctx.graph.conv2d(x, w, Some(b), self.stride, self.padding)?
        };
        match &self.norm {
            Some(n) => {
                let y = ctx.norm(y, n, 1)?;
                Ok(ctx.graph.relu(y))
            }
            None => Ok(y),
        }
    }
}

/// Layout of the conditioned U-Net; parameter values live in a [`ParamStore`].
///
/// `stem (1x2 conv, BN, ReLU) -> [encoder block -> 3x3/2 down conv] x S ->
/// bottleneck block -> [2x2/2 transposed conv -> concat skip -> 1x1 conv ->
/// decoder block] x S -> 1x1 head`. Frames are zero-padded to a multiple of
/// `2^S` (plus one frame consumed by the stem) and cropped at the end.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedUNet {
    pub cfg: ModelConfig,
    pub embedding: ConditionEmbedding,
    pub stem: ConvUnit,
    pub encoders: Vec<Block>,
    pub downs: Vec<ConvUnit>,
    pub bottleneck: Block,
    pub ups: Vec<ConvUnit>,
    pub fuses: Vec<ConvUnit>,
    pub decoders: Vec<Block>,
    pub head: ConvUnit,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub output: Var,
    /// Output of every encoder block, finest scale first.
    pub encoder: Vec<Var>,
    /// Output of every decoder block, coarsest scale first.
    pub decoder: Vec<Var>,
}

impl ConditionedUNet {
    fn build<S: Real>(cfg: &ModelConfig, b: &mut ParamBuilder<S>) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.internal_channels;
        let cin = cfg.spec_channels();
        let tfc = TfcSpec {
            in_channels: c,
            growth: c,
            num_layers: cfg.tfc_layers,
            kernel: (cfg.kernel[0], cfg.kernel[1]),
        };
        let saft = |freq_dim: usize, variant: SaftVariant| SaftSpec {
            variant,
            freq_dim,
            bottleneck: cfg.bottleneck,
            num_latent: cfg.num_latent,
            key_dim: cfg.key_dim,
        };
        let conditioned = match cfg.variant {
            Variant::Lasaft => SaftVariant::Lasaft,
            Variant::Lightsaft | Variant::LightsaftPlus => SaftVariant::Lightsaft,
        };
        let embedding = ConditionEmbedding::new(b, "embedding", cfg.num_conditions, cfg.key_dim)?;
        let stem = ConvUnit::new(b, "stem", cin, c, (1, 2), (1, 1), (0, 0), false, true);
        let f0 = cfg.freq_bins();
        let (mut encoders, mut downs) = (Vec::new(), Vec::new());
        for i in 0..cfg.num_scales {
            let f = f0 >> i;
            let prefix = format!("enc.{i}");
            let block = if cfg.variant == Variant::LightsaftPlus {
                Block::tfc_tdf(b, &prefix, tfc, TdfSpec { freq_dim: f, bottleneck: cfg.bottleneck })?
            } else {
                Block::saft(b, &prefix, tfc, saft(f, conditioned))?
            };
            encoders.push(block);
            downs.push(ConvUnit::new(b, &format!("down.{i}"), c, c, (3, 3), (2, 2), (1, 1), false, true));
        }
        let bottleneck = Block::saft(b, "bottleneck", tfc, saft(f0 >> cfg.num_scales, conditioned))?;
        let (mut ups, mut fuses, mut decoders) = (Vec::new(), Vec::new(), Vec::new());
        for i in (0..cfg.num_scales).rev() {
            let f = f0 >> i;
            ups.push(ConvUnit::new(b, &format!("up.{i}"), c, c, (2, 2), (2, 2), (0, 0), true, true));
            fuses.push(ConvUnit::new(b, &format!("fuse.{i}"), 2 * c, c, (1, 1), (1, 1), (0, 0), false, false));
            decoders.push(Block::saft(b, &format!("dec.{i}"), tfc, saft(f, conditioned))?);
        }
        let head = ConvUnit::new(b, "head", c, cin, (1, 1), (1, 1), (0, 0), false, false);
        Ok(Self {
            cfg: *cfg,
            embedding,
            stem,
            encoders,
            downs,
            bottleneck,
            ups,
            fuses,
            decoders,
            head,
        })
    }

    /// Runs the network on `x[N, C, F, T]` with one condition id per example.
    pub fn forward_graph<S: Real>(&self, ctx: &mut Ctx<'_, S>, x: Var, conditions: &[usize]) -> Result<Trace> {
        let s = ctx.graph.shape(x).to_vec();
        let (cin, f) = (self.cfg.spec_channels(), self.cfg.freq_bins());
        if s.len() != 4 || s[1] != cin || s[2] != f {
            return Err(dim_err("model input", format!("expected [N, {cin}, {f}, T], got {s:?}")));
        }
        if conditions.len() != s[0] {
            return Err(dim_err(
                "model conditions",
                format!("{} condition ids for batch of {}", conditions.len(), s[0]),
            ));
        }
        let frames = s[3];
        let unit = 1usize << self.cfg.num_scales;
        let padded = frames.div_ceil(unit) * unit;
        let q = make_query(ctx, &self.embedding, conditions)?;
        let xp = ctx.graph.pad_last(x, 0, padded - frames + 1);
        let mut h = self.stem.forward(ctx, xp)?;
        let mut skips = Vec::with_capacity(self.cfg.num_scales);
        for (block, down) in self.encoders.iter().zip(&self.downs) {
            h = block.forward(ctx, h, q)?;
            skips.push(h);
            h = down.forward(ctx, h)?;
        }
        let encoder = skips.clone();
        h = self.bottleneck.forward(ctx, h, q)?;
        let mut decoder = Vec::with_capacity(self.cfg.num_scales);
        for ((up, fuse), block) in self.ups.iter().zip(&self.fuses).zip(&self.decoders) {
            h = up.forward(ctx, h)?;
            let skip = skips.pop().expect("one skip per scale");
            h = ctx.graph.concat(&[h, skip], 1)?;
            h = fuse.forward(ctx, h)?;
            h = block.forward(ctx, h, q)?;
            decoder.push(h);
        }
        let y = self.head.forward(ctx, h)?;
        let output = ctx.graph.slice_last(y, 0, frames)?;
        Ok(Trace { output, encoder, decoder })
    }

    /// Every block in forward order.
    pub fn blocks(&self) -> impl Iterator<Item = &Block> {
        self.encoders.iter().chain(core::iter::once(&self.bottleneck)).chain(&self.decoders)
    }
}

/// A built network together with its parameter values.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<S = f32> {
    pub net: ConditionedUNet,
    pub store: ParamStore<S>,
}

impl<S: Real> Model<S> {
    /// Builds and initialises a model; deterministic in `cfg.seed`.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(cfg.seed);
        let net = ConditionedUNet::build(cfg, &mut b)?;
        Ok(Self { net, store: b.finish() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.cfg
    }

    pub fn cast<T: Real>(&self) -> Model<T> {
        Model {
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }

    /// Eval-mode estimate of the target spectrogram for one `[C, F, T]` input.
    pub fn forward(&self, x: &Tensor<S>, cond: Condition) -> Result<Tensor<S>> {
        self.forward_id(x, cond.id())
    }

    /// Like [`Model::forward`] with a raw condition id.
    pub fn forward_id(&self, x: &Tensor<S>, cond: usize) -> Result<Tensor<S>> {
        if x.ndim() != 3 {
            return Err(dim_err("model input", format!("expected [C, F, T], got {:?}", x.shape())));
        }
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let batch = x.clone().reshape(&shape)?;
        let out = self.forward_batch(&batch, &[cond])?;
        out.reshape(x.shape())
    }

    /// Eval-mode forward for `x[N, C, F, T]`.
    pub fn forward_batch(&self, x: &Tensor<S>, conditions: &[usize]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, &self.store, Mode::Eval);
        let trace = self.net.forward_graph(&mut ctx, xv, conditions)?;
        Ok(g.value(trace.output).clone())
    }

    /// Eval-mode forward returning values of every traced activation.
    pub fn trace(&self, x: &Tensor<S>, conditions: &[usize]) -> Result<(Tensor<S>, Vec<Tensor<S>>, Vec<Tensor<S>>)> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mut ctx = Ctx::new(&mut g, &self.store, Mode::Eval);
        let t = self.net.forward_graph(&mut ctx, xv, conditions)?;
        let values = |vs: &[Var]| vs.iter().map(|&v| g.value(v).clone()).collect::<Vec<_>>();
        Ok((g.value(t.output).clone(), values(&t.encoder), values(&t.decoder)))
    }

    /// Folds batch statistics observed on a train-mode graph into the
    /// running statistics.
    pub fn update_running_stats(&mut self, graph: &Graph<S>) {
        self.store.fold_observed(graph.observed_stats(), S::lit(BN_MOMENTUM));
    }

    pub fn count_parameters(&self) -> ParamBreakdown {
        ParamBreakdown::from_store(&self.store)
    }

    /// Relabels the latent sources of every latent-source block with `perm`
    /// (see [`SaftFt::permute_latent`]).
    pub fn permute_latent_sources(&mut self, perm: &[usize]) -> Result<()> {
        for block in self.net.blocks() {
            if let Block::Saft { ft, bank, .. } = block {
                ft.permute_latent(&mut self.store, bank, perm)?;
            }
        }
        Ok(())
    }
}

/// Finite-difference check of the full model: train-mode forward on a random
/// `[batch, C, F, frames]` input, MSE against a random target, every
/// parameter tensor and the input sampled at up to `opts.max_elements`
/// elements.
pub fn grad_check_model(cfg: &ModelConfig, seed: u64, batch: usize, frames: usize, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = ModelConfig { seed, ..*cfg };
    let model = Model::<f64>::build(&cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let shape = [batch, cfg.spec_channels(), cfg.freq_bins(), frames];
    let mut draw = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0));
    let x = draw(&shape);
    let target = draw(&shape);
    let conditions: Vec<usize> = (0..batch).map(|i| (seed as usize + i) % cfg.num_conditions).collect();
    grad_check_store(
        &model.store,
        Mode::Train,
        &[(String::from("input"), x)],
        |ctx, xs| {
            let trace = model.net.forward_graph(ctx, xs[0], &conditions)?;
            let t = ctx.graph.constant(target.clone());
            ctx.graph.mse(trace.output, t)
        },
        opts,
    )
}

/// Learnable-parameter counts grouped by module path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub modules: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamBreakdown {
    /// Module path of a parameter name: the leading component, a following
    /// index, and a following block part (`tfc`, `tdf`, `ft`, `keys`).
    pub fn module_path(name: &str) -> String {
        let parts: Vec<&str> = name.split('.').collect();
        let mut n = 1;
        if parts.len() > n + 1 && parts[n].bytes().all(|b| b.is_ascii_digit()) {
            n += 1;
        }
        if parts.len() > n && matches!(parts[n], "tfc" | "tdf" | "ft" | "keys") {
            n += 1;
        }
        parts[..n].join(".")
    }

    pub fn from_store<S: Real>(store: &ParamStore<S>) -> Self {
        let mut order: Vec<String> = Vec::new();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for p in store.params() {
            let path = Self::module_path(&p.name);
            let entry = counts.entry(path.clone()).or_insert_with(|| {
                order.push(path);
                0
            });
            *entry += p.tensor.numel();
        }
        let modules: Vec<(String, usize)> = order.into_iter().map(|p| {
            let c = counts[&p];
            (p, c)
        }).collect();
        let total = modules.iter().map(|m| m.1).sum();
        Self { modules, total }
    }

    pub fn get(&self, path: &str) -> Option<usize> {
        self.modules.iter().find(|m| m.0 == path).map(|m| m.1)
    }
}
