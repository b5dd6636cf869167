//! Equivariant layers and U-Net builders.
//!
//! Group feature maps are stored as `[batch, scale, pattern, rot, H, W]` so
//! that a run of consecutive scales is a contiguous channel block for
//! `conv2d`. [`GroupFeatureMap`] offers accessors in
//! `(batch, pattern, rot, scale, y, x)` order.

mod checkpoint;
mod unet;

use std::rc::Rc;

pub use checkpoint::{load_manifest, load_model, save_model, LayerEntry, Manifest};
pub use unet::{build_unet, count_params, Forward, ParamCount, Mode, Model, ModelConfig, ParamKind, Parameter, Variant};

use crate::autodiff::{BatchStats, ChannelLayout, Padding, Tensor, Var};
use crate::bank::{group_expansion, lifting_expansion, BankPlan};
use crate::error::{Error, Result};

/// Dense group feature map `[B, S, P, R, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupFeatureMap {
    pub tensor: Tensor,
}

impl GroupFeatureMap {
    pub fn new(tensor: Tensor) -> Result<Self> {
        if tensor.ndim() != 6 {
            return Err(Error::shape(format!(
                "group feature map must be 6-d, got {:?}",
                tensor.shape()
            )));
        }
        Ok(Self { tensor })
    }

    pub fn zeros(batch: usize, patterns: usize, n_rot: usize, n_scale: usize, h: usize, w: usize) -> Self {
        Self { tensor: Tensor::zeros(&[batch, n_scale, patterns, n_rot, h, w]) }
    }

    /// Plain `[B, C, H, W]` image as a map with singleton group axes.
    pub fn from_plain(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::shape(format!("expected [B,C,H,W], got {s:?}")));
        }
        Self::new(t.clone().reshape(&[s[0], 1, s[1], 1, s[2], s[3]])?)
    }

    pub fn batch(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn n_scale(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn patterns(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn n_rot(&self) -> usize {
        self.tensor.shape()[3]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[4]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[5]
    }

    fn index(&self, b: usize, p: usize, r: usize, s: usize) -> usize {
        let sh = self.tensor.shape();
        (((b * sh[1] + s) * sh[2] + p) * sh[3] + r) * sh[4] * sh[5]
    }

    pub fn at(&self, b: usize, p: usize, r: usize, s: usize, y: usize, x: usize) -> f64 {
        self.tensor.data()[self.index(b, p, r, s) + y * self.width() + x]
    }

    /// One spatial slice, row-major `H x W`.
    pub fn slice(&self, b: usize, p: usize, r: usize, s: usize) -> &[f64] {
        let start = self.index(b, p, r, s);
        &self.tensor.data()[start..start + self.height() * self.width()]
    }

    pub fn slice_mut(&mut self, b: usize, p: usize, r: usize, s: usize) -> &mut [f64] {
        let start = self.index(b, p, r, s);
        let n = self.height() * self.width();
        &mut self.tensor.data_mut()[start..start + n]
    }
}

/// Which side receives the extra padding row and column of an even kernel.
///
/// With [`Align::Lead`] output pixel `i` sits over input position
/// `i + 1/2`; with [`Align::Lag`] over `i - 1/2`. Odd kernels are centred
/// either way. Alternating the two keeps a stack of even convolutions
/// centred.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Align {
    #[default]
    Lead,
    Lag,
}

impl Align {
    pub fn padding(self, k: usize) -> Padding {
        match self {
            Align::Lead => Padding::same(k, k),
            Align::Lag => Padding::same_flipped(k, k),
        }
    }

    /// Offset of the output grid relative to the input grid.
    pub fn shift(self, k: usize) -> f64 {
        match (k % 2, self) {
            (1, _) => 0.0,
            (_, Align::Lead) => 0.5,
            (_, Align::Lag) => -0.5,
        }
    }
}

fn dims6(x: &Var<'_>, what: &str) -> Result<[usize; 6]> {
    let s = x.shape();
    s.as_slice()
        .try_into()
        .map_err(|_| Error::shape(format!("{what} expects [B,S,P,R,H,W], got {s:?}")))
}

/// Plain convolution applied to each `(scale, rot)` slice of a map with
/// singleton group axes, i.e. an ordinary CNN layer in group layout.
pub fn plain_conv<'t>(x: Var<'t>, kernel: Var<'t>, align: Align) -> Result<Var<'t>> {
    let [b, s, p, r, h, w] = dims6(&x, "plain_conv")?;
    if s != 1 || r != 1 {
        return Err(Error::invalid("plain_conv needs singleton group axes"));
    }
    let ks = kernel.shape();
    let y = x
        .reshape(&[b, p, h, w])?
        .conv2d(kernel, 1, align.padding(ks[2]))?;
    y.reshape(&[b, 1, ks[0], 1, h, w])
}

/// Lifting convolution of `[B, C, H, W]` to `[B, S, P_out, R, H, W]`.
pub fn lifting_conv<'t>(
    image: Var<'t>,
    coefficients: Var<'t>,
    plan: &Rc<BankPlan>,
    c_out: usize,
    c_in: usize,
    align: Align,
) -> Result<Var<'t>> {
    let s = image.shape();
    if s.len() != 4 || s[1] != c_in {
        return Err(Error::invalid(format!(
            "lifting conv expects [B,{c_in},H,W], got {s:?}"
        )));
    }
    let g = plan.group();
    let mut per_scale = Vec::with_capacity(g.n_scale);
    for b in 0..g.n_scale {
        let k = coefficients.linear(lifting_expansion(plan, c_out, c_in, b))?;
        let kb = g.kernel_sizes[b];
        let y = image.conv2d(k, 1, align.padding(kb))?;
        per_scale.push(y.reshape(&[s[0], 1, c_out, g.n_rot, s[2], s[3]])?);
    }
    Var::concat(&per_scale, 1)
}

/// Group convolution `[B, S, P_in, R, H, W] -> [B, S, P_out, R, H, W]`.
pub fn group_conv<'t>(
    f: Var<'t>,
    coefficients: Var<'t>,
    plan: &Rc<BankPlan>,
    c_out: usize,
    c_in: usize,
    align: Align,
) -> Result<Var<'t>> {
    let [bn, sn, pn, rn, h, w] = dims6(&f, "group_conv")?;
    let g = plan.group();
    if sn != g.n_scale || rn != g.n_rot || pn != c_in {
        return Err(Error::invalid(format!(
            "group conv for {c_in} patterns on a {}x{} group got input {:?}",
            g.n_rot,
            g.n_scale,
            f.shape()
        )));
    }
    let mut per_scale = Vec::with_capacity(sn);
    for b in 0..sn {
        let k = coefficients.linear(group_expansion(plan, c_out, c_in, b))?;
        let kb = g.kernel_sizes[b];
        let x = f.narrow(1, b, sn - b)?.reshape(&[bn, (sn - b) * pn * rn, h, w])?;
        let y = x.conv2d(k, 1, align.padding(kb))?;
        per_scale.push(y.reshape(&[bn, 1, c_out, rn, h, w])?);
    }
    Var::concat(&per_scale, 1)
}

/// Per-pattern layout for statistics pooled over batch, scale, rot and space.
pub fn pattern_layout(shape: &[usize]) -> Result<ChannelLayout> {
    let [b, s, p, r, h, w]: [usize; 6] = shape
        .try_into()
        .map_err(|_| Error::shape(format!("expected [B,S,P,R,H,W], got {shape:?}")))?;
    Ok(ChannelLayout { outer: b * s, channels: p, inner: r * h * w })
}

/// Adds one bias per pattern, shared across the group.
pub fn group_bias<'t>(f: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let layout = pattern_layout(&f.shape())?;
    f.channel_bias(bias, layout)
}

/// Batch norm with one affine pair per pattern.
pub fn group_batchnorm<'t>(
    f: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running: Option<&BatchStats>,
    eps: f64,
) -> Result<(Var<'t>, BatchStats)> {
    let layout = pattern_layout(&f.shape())?;
    f.batch_norm(gamma, beta, layout, running, eps)
}

pub fn group_pool_spatial<'t>(f: Var<'t>) -> Result<Var<'t>> {
    dims6(&f, "group_pool_spatial")?;
    f.maxpool2x2()
}

pub fn group_upsample<'t>(f: Var<'t>) -> Result<Var<'t>> {
    dims6(&f, "group_upsample")?;
    f.upsample2x()
}

/// Moves content one pixel towards larger row and column indices,
/// repeating the first row and column.
pub fn group_shift<'t>(f: Var<'t>) -> Result<Var<'t>> {
    let [_, _, _, _, h, w] = dims6(&f, "group_shift")?;
    let f = Var::concat(&[f.narrow(4, 0, 1)?, f.narrow(4, 0, h - 1)?], 4)?;
    Var::concat(&[f.narrow(5, 0, 1)?, f.narrow(5, 0, w - 1)?], 5)
}

/// Maximum over rotation and scale, `[B, P, H, W]`.
pub fn group_project<'t>(f: Var<'t>) -> Result<Var<'t>> {
    f.group_max()
}
