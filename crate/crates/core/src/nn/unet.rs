use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    group_batchnorm, group_bias, group_conv, group_pool_spatial, group_project, group_shift, group_upsample, lifting_conv,
    plain_conv, Align,
};
use crate::autodiff::{BatchStats, ChannelLayout, Padding, Tape, Tensor, Var};
use crate::bank::{BankPlan, GroupSpec};
use crate::basis::{make_enhanced_basis, make_fourier_basis};
use crate::error::{Error, Result};

/// The five ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    /// Plain U-Net with `vanilla_kernel` convolutions.
    Vanilla,
    /// Fourier-parameterized filters, no group axes.
    F,
    /// Rotation group only.
    FR,
    /// Scale group only.
    FS,
    /// Rotation and scale.
    FRS,
}

impl TryFrom<String> for Variant {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Variant::parse(&s)
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_string()
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Vanilla, Variant::F, Variant::FR, Variant::FS, Variant::FRS];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::F => "F",
            Variant::FR => "FR",
            Variant::FS => "FS",
            Variant::FRS => "FRS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" | "unet" | "u-net" => Ok(Variant::Vanilla),
            "f" => Ok(Variant::F),
            "fr" => Ok(Variant::FR),
            "fs" => Ok(Variant::FS),
            "frs" => Ok(Variant::FRS),
            _ => Err(Error::invalid(format!("unknown variant `{s}` (vanilla, F, FR, FS, FRS)"))),
        }
    }

    /// Rotation and scale counts used by this variant.
    pub fn group_dims(&self, n_rot: usize, n_scale: usize) -> (usize, usize) {
        match self {
            Variant::Vanilla | Variant::F => (1, 1),
            Variant::FR => (n_rot, 1),
            Variant::FS => (1, n_scale),
            Variant::FRS => (n_rot, n_scale),
        }
    }

    pub fn is_parameterized(&self) -> bool {
        *self != Variant::Vanilla
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of resolution levels.
    pub depth: usize,
    /// Total feature width at the first level.
    pub base_channels: usize,
    pub input_channels: usize,
    pub p: usize,
    pub h: f64,
    /// Group size for rotation-equivariant variants.
    pub n_rot: usize,
    /// Group size for scale-equivariant variants.
    pub n_scale: usize,
    pub mu: f64,
    pub vanilla_kernel: usize,
    /// Use the Gaussian-windowed basis instead of the plain Fourier basis.
    pub enhanced_basis: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    /// Desk-scale FRS network.
    fn default() -> Self {
        Self {
            variant: Variant::FRS,
            depth: 3,
            base_channels: 32,
            input_channels: 3,
            p: 6,
            h: 0.5,
            n_rot: 8,
            n_scale: 4,
            mu: 1.25,
            vanilla_kernel: 3,
            enhanced_basis: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    /// Depth 5, base width 64.
    pub fn full(variant: Variant) -> Self {
        Self { variant, depth: 5, base_channels: 64, ..Self::default() }
    }

    pub fn group(&self) -> Result<GroupSpec> {
        let (r, s) = self.variant.group_dims(self.n_rot, self.n_scale);
        GroupSpec::new(r, s, self.mu, self.p, self.h)
    }

    /// Feature width at each level.
    pub fn widths(&self) -> Vec<usize> {
        (0..self.depth).map(|l| self.base_channels << l).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.input_channels == 0 {
            return Err(Error::invalid("depth, base_channels and input_channels must be positive"));
        }
        if self.variant == Variant::Vanilla && self.vanilla_kernel == 0 {
            return Err(Error::invalid("vanilla_kernel must be positive"));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("bn_eps must be positive and bn_momentum in [0, 1]"));
        }
        let g = self.group()?;
        if self.base_channels % g.order() != 0 {
            return Err(Error::invalid(format!(
                "base_channels {} not divisible by group order {} ({}x{})",
                self.base_channels,
                g.order(),
                g.n_rot,
                g.n_scale
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Plain tensor: vanilla kernels, biases, norm parameters.
    Dense,
    /// Lifting coefficients `[c_out, c_in, N]`.
    Lifting { c_out: usize, c_in: usize },
    /// Group coefficients `[c_out, c_in, n_rot, n_scale, N]`.
    Group { c_out: usize, c_in: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy)]
enum Conv {
    Plain { w: usize },
    Lifting { w: usize, c_out: usize, c_in: usize },
    Group { w: usize, c_out: usize, c_in: usize },
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
    running: usize,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    conv: Conv,
    align: Align,
    norm: Norm,
}

#[derive(Debug, Clone, Copy)]
struct Level {
    first: Block,
    second: Block,
}

#[derive(Debug, Clone, Copy)]
struct Up {
    conv: Conv,
    bias: usize,
    first: Block,
    second: Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated by the caller.
    Train,
    /// Running statistics.
    Eval,
}

/// U-Net with one of the five layer families.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    group: GroupSpec,
    plan: Option<Rc<BankPlan>>,
    pub params: Vec<Parameter>,
    /// Running mean/variance per norm layer.
    pub running: Vec<BatchStats>,
    running_names: Vec<String>,
    encoder: Vec<Level>,
    decoder: Vec<Up>,
    head_w: usize,
    head_b: usize,
}

fn normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let d = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| d.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy)]
enum Init {
    /// Normal with variance `2 / fan_in`.
    He { fan_in: usize },
    /// Normal with variance `1 / fan_in`.
    Lecun { fan_in: usize },
    /// Basis coefficients with the given canonical kernel energy.
    Coefficients { energy: f64 },
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
struct ParamSpec {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    init: Init,
}

/// Parameter shapes and wiring of a U-Net, without values.
struct Layout {
    specs: Vec<ParamSpec>,
    running: Vec<(String, usize)>,
    encoder: Vec<Level>,
    decoder: Vec<Up>,
    head_w: usize,
    head_b: usize,
}

struct Builder<'a> {
    cfg: &'a ModelConfig,
    group: &'a GroupSpec,
    n_basis: usize,
    specs: Vec<ParamSpec>,
    running: Vec<(String, usize)>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, kind, shape, init });
        self.specs.len() - 1
    }

    fn patterns(&self, channels: usize) -> usize {
        channels / self.group.order()
    }

    /// Convolution between total widths `c_in` and `c_out`; `lifting` marks
    /// the image-facing layer, whose input width is a plain channel count.
    fn conv(&mut self, name: &str, c_in: usize, c_out: usize, lifting: bool, plain_k: usize) -> Conv {
        if !self.cfg.variant.is_parameterized() {
            let shape = vec![c_out, c_in, plain_k, plain_k];
            let init = Init::He { fan_in: c_in * plain_k * plain_k };
            return Conv::Plain { w: self.push(format!("{name}.weight"), ParamKind::Dense, shape, init) };
        }
        let n = self.n_basis;
        let po = self.patterns(c_out);
        let name = format!("{name}.coefficients");
        if lifting {
            let kind = ParamKind::Lifting { c_out: po, c_in };
            let init = Init::Coefficients { energy: 2.0 / c_in as f64 };
            Conv::Lifting { w: self.push(name, kind, vec![po, c_in, n], init), c_out: po, c_in }
        } else {
            let pi = self.patterns(c_in);
            let g = self.group;
            let kind = ParamKind::Group { c_out: po, c_in: pi };
            let init = Init::Coefficients { energy: 2.0 / (pi * g.order()) as f64 };
            let shape = vec![po, pi, g.n_rot, g.n_scale, n];
            Conv::Group { w: self.push(name, kind, shape, init), c_out: po, c_in: pi }
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> Norm {
        let p = self.patterns(channels);
        let gamma = self.push(format!("{name}.gamma"), ParamKind::Dense, vec![p], Init::Ones);
        let beta = self.push(format!("{name}.beta"), ParamKind::Dense, vec![p], Init::Zeros);
        self.running.push((name.to_string(), p));
        Norm { gamma, beta, running: self.running.len() - 1 }
    }

    fn block(&mut self, name: &str, c_in: usize, c_out: usize, lifting: bool, align: Align) -> Block {
        let k = self.cfg.vanilla_kernel;
        let conv = self.conv(&format!("{name}.conv"), c_in, c_out, lifting, k);
        let norm = self.norm(&format!("{name}.norm"), c_out);
        Block { conv, align, norm }
    }
}

fn layout(cfg: &ModelConfig, group: &GroupSpec) -> Layout {
    let mut bld = Builder { cfg, group, n_basis: cfg.p * cfg.p, specs: Vec::new(), running: Vec::new() };
    let widths = cfg.widths();
    let mut encoder = Vec::with_capacity(cfg.depth);
    let mut c_in = cfg.input_channels;
    for (l, &w) in widths.iter().enumerate() {
        // the two convolutions of a block shift in opposite directions
        let first = bld.block(&format!("enc{l}.0"), c_in, w, l == 0, Align::Lead);
        let second = bld.block(&format!("enc{l}.1"), w, w, false, Align::Lag);
        encoder.push(Level { first, second });
        c_in = w;
    }
    let mut decoder = Vec::new();
    for l in (0..cfg.depth.saturating_sub(1)).rev() {
        let w = widths[l];
        // vanilla up-convolutions are 2x2
        let conv = bld.conv(&format!("dec{l}.up"), widths[l + 1], w, false, 2);
        let bias_len = bld.patterns(w);
        let bias = bld.push(format!("dec{l}.up.bias"), ParamKind::Dense, vec![bias_len], Init::Zeros);
        let first = bld.block(&format!("dec{l}.0"), 2 * w, w, false, Align::Lead);
        let second = bld.block(&format!("dec{l}.1"), w, w, false, Align::Lag);
        decoder.push(Up { conv, bias, first, second });
    }
    let p0 = bld.patterns(widths[0]);
    let head_w = bld.push("head.weight".into(), ParamKind::Dense, vec![1, p0, 1, 1], Init::Lecun { fan_in: p0 });
    let head_b = bld.push("head.bias".into(), ParamKind::Dense, vec![1], Init::Zeros);
    Layout { specs: bld.specs, running: bld.running, encoder, decoder, head_w, head_b }
}

/// Learnable-real counts of a configuration, computed without allocating
/// the parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    /// Two-conv block convolutions after the first layer (no lifting
    /// layer, up-convolutions, norms or head).
    pub intermediate: usize,
}

pub fn count_params(cfg: &ModelConfig) -> Result<ParamCount> {
    cfg.validate()?;
    let l = layout(cfg, &cfg.group()?);
    let len = |i: usize| l.specs[i].shape.iter().product::<usize>();
    let total = (0..l.specs.len()).map(len).sum();
    Ok(ParamCount { total, intermediate: intermediate_count(&l.encoder, &l.decoder, len) })
}

fn intermediate_count(encoder: &[Level], decoder: &[Up], len: impl Fn(usize) -> usize) -> usize {
    let conv_len = |c: &Conv| match *c {
        Conv::Plain { w } | Conv::Lifting { w, .. } | Conv::Group { w, .. } => len(w),
    };
    let mut total = 0;
    for (i, lvl) in encoder.iter().enumerate() {
        if i > 0 {
            total += conv_len(&lvl.first.conv);
        }
        total += conv_len(&lvl.second.conv);
    }
    for up in decoder {
        total += conv_len(&up.first.conv) + conv_len(&up.second.conv);
    }
    total
}

/// Builds a freshly initialised U-Net; initialisation is seeded.
pub fn build_unet(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::new(cfg.clone(), seed)
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let group = config.group()?;
        let plan = if config.variant.is_parameterized() {
            let basis = if config.enhanced_basis {
                make_enhanced_basis(config.p, config.h)?
            } else {
                make_fourier_basis(config.p, config.h)?
            };
            Some(Rc::new(BankPlan::new(group.clone(), basis)?))
        } else {
            None
        };
        let lay = layout(&config, &group);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(lay.specs.len());
        for spec in &lay.specs {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::He { fan_in } => normal(&mut rng, n, (2.0 / fan_in as f64).sqrt()),
                Init::Lecun { fan_in } => normal(&mut rng, n, (1.0 / fan_in as f64).sqrt()),
                Init::Coefficients { energy } => {
                    let plan = plan.as_ref().expect("coefficients need a plan");
                    plan.random_coefficients(n / plan.n_basis(), energy, &mut rng)
                }
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            params.push(Parameter {
                name: spec.name.clone(),
                kind: spec.kind,
                value: Tensor::new(spec.shape.clone(), data)?,
            });
        }
        let running = lay.running.iter().map(|(_, p)| BatchStats { mean: vec![0.0; *p], var: vec![1.0; *p] }).collect();
        let running_names = lay.running.into_iter().map(|(n, _)| n).collect();
        Ok(Self {
            config,
            group,
            plan,
            params,
            running,
            running_names,
            encoder: lay.encoder,
            decoder: lay.decoder,
            head_w: lay.head_w,
            head_b: lay.head_b,
        })
    }

    pub fn group(&self) -> &GroupSpec {
        &self.group
    }

    pub fn plan(&self) -> Option<&Rc<BankPlan>> {
        self.plan.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// See [`ParamCount::intermediate`].
    pub fn intermediate_param_count(&self) -> usize {
        intermediate_count(&self.encoder, &self.decoder, |i| self.params[i].value.len())
    }

    pub fn running_names(&self) -> &[String] {
        &self.running_names
    }

    /// Side length multiple required of inputs.
    pub fn size_multiple(&self) -> usize {
        1 << (self.config.depth - 1)
    }

    /// Records the forward pass of `x` (`[B, C, H, W]`) on `tape`.
    ///
    /// Returns the probability map `[B, 1, H, W]`, the parameter leaves in
    /// [`Model::params`] order, and the batch statistics of each norm layer
    /// (empty in eval mode).
    pub fn forward<'t>(&self, tape: &'t Tape, x: &Tensor, mode: Mode) -> Result<Forward<'t>> {
        let params: Vec<Var<'t>> = self.params.iter().map(|p| tape.param(p.value.clone())).collect();
        self.forward_with(tape, params, x, mode)
    }

    /// Forward pass reading the parameters from `params`, one variable per
    /// entry of [`Model::params`] in order.
    pub fn forward_with<'t>(&self, tape: &'t Tape, params: Vec<Var<'t>>, x: &Tensor, mode: Mode) -> Result<Forward<'t>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.config.input_channels {
            return Err(Error::invalid(format!(
                "model expects [B,{},H,W], got {s:?}",
                self.config.input_channels
            )));
        }
        let m = self.size_multiple();
        if s[2] % m != 0 || s[3] % m != 0 {
            return Err(Error::invalid(format!(
                "spatial size {}x{} must be a multiple of {m}",
                s[2], s[3]
            )));
        }
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!("expected {} parameters, got {}", self.params.len(), params.len())));
        }
        for (v, p) in params.iter().zip(&self.params) {
            if v.value().shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "parameter {} has shape {:?}, got {:?}",
                    p.name,
                    p.value.shape(),
                    v.value().shape()
                )));
            }
        }
        let mut ctx = Ctx { model: self, params: &params, mode, stats: Vec::new() };
        let input = tape.constant(x.clone());

        let mut skips = Vec::new();
        let mut h = input;
        for (l, lvl) in self.encoder.iter().enumerate() {
            h = ctx.block(&lvl.first, h)?;
            h = ctx.block(&lvl.second, h)?;
            if l + 1 < self.encoder.len() {
                skips.push(h);
                h = group_pool_spatial(h)?;
            }
        }
        for up in &self.decoder {
            // the even up-convolution runs at the coarse level, where its
            // half-pixel offset becomes one fine pixel that is shifted back
            h = ctx.conv(&up.conv, h, Align::Lead)?;
            h = group_bias(h, params[up.bias])?;
            h = group_shift(group_upsample(h)?)?;
            let skip = skips.pop().expect("one skip per decoder level");
            h = Var::concat(&[h, skip], 2)?;
            h = ctx.block(&up.first, h)?;
            h = ctx.block(&up.second, h)?;
        }
        let proj = group_project(h)?;
        let logits = proj.conv2d(params[self.head_w], 1, Padding::uniform(0))?;
        let [b, _, hh, ww] = [s[0], 1, s[2], s[3]];
        let logits = logits.channel_bias(params[self.head_b], ChannelLayout { outer: b, channels: 1, inner: hh * ww })?;
        let output = logits.sigmoid();
        let stats = ctx.stats;
        Ok(Forward { output, params, stats })
    }

    /// Forward in eval mode, returning the probability map.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let f = self.forward(&tape, x, Mode::Eval)?;
        let out = (*f.output.value()).clone();
        Ok(out)
    }

    /// Folds the batch statistics of a training forward into the running
    /// averages.
    pub fn update_running(&mut self, stats: &[BatchStats]) {
        let m = self.config.bn_momentum;
        for (r, s) in self.running.iter_mut().zip(stats) {
            for (a, b) in r.mean.iter_mut().zip(&s.mean) {
                *a = (1.0 - m) * *a + m * b;
            }
            for (a, b) in r.var.iter_mut().zip(&s.var) {
                *a = (1.0 - m) * *a + m * b;
            }
        }
    }
}

pub struct Forward<'t> {
    pub output: Var<'t>,
    pub params: Vec<Var<'t>>,
    pub stats: Vec<BatchStats>,
}

struct Ctx<'m, 't, 'p> {
    model: &'m Model,
    params: &'p [Var<'t>],
    mode: Mode,
    stats: Vec<BatchStats>,
}

impl<'t> Ctx<'_, 't, '_> {
    fn conv(&self, c: &Conv, x: Var<'t>, align: Align) -> Result<Var<'t>> {
        match *c {
            Conv::Plain { w } => {
                let x = if x.shape().len() == 4 {
                    let s = x.shape();
                    x.reshape(&[s[0], 1, s[1], 1, s[2], s[3]])?
                } else {
                    x
                };
                plain_conv(x, self.params[w], align)
            }
            Conv::Lifting { w, c_out, c_in } => {
                let plan = self.model.plan.as_ref().expect("parameterized model has a plan");
                lifting_conv(x, self.params[w], plan, c_out, c_in, align)
            }
            Conv::Group { w, c_out, c_in } => {
                let plan = self.model.plan.as_ref().expect("parameterized model has a plan");
                group_conv(x, self.params[w], plan, c_out, c_in, align)
            }
        }
    }

    fn block(&mut self, b: &Block, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv(&b.conv, x, b.align)?;
        let running = match self.mode {
            Mode::Train => None,
            Mode::Eval => Some(&self.model.running[b.norm.running]),
        };
        let eps = self.model.config.bn_eps;
        let (y, stats) = group_batchnorm(y, self.params[b.norm.gamma], self.params[b.norm.beta], running, eps)?;
        if self.mode == Mode::Train {
            self.stats.push(stats);
        }
        Ok(y.relu())
    }
}
