//! Input and feature transforms and the equivariance error measurement.
//!
//! A warp by `(theta, s)` maps an image `r` to `r(U^{-1}(x - c) + c)` where
//! `U = mu^s R(theta)` uses the same `(row, col)` convention as the filter
//! basis and `c` is the rotation centre. Even kernels place output pixel
//! `y` at input position `y + 1/2`, so every such layer moves the centre
//! of its output by half a pixel; layers report this as
//! [`EquivariantLayer::anchor_shift`].

use std::f64::consts::PI;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Padding, Tape, Tensor};
use crate::bank::{GroupBank, LiftingBank};
use crate::basis::{inverse_transform_matrix, TransformSpec};
use crate::error::{Error, Result};
use crate::nn::{group_conv, group_project, lifting_conv, Align, GroupFeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Interpolation {
    /// Lossless array quarter-turns.
    Exact90,
    Bilinear,
}

impl Interpolation {
    pub fn name(&self) -> &'static str {
        match self {
            Interpolation::Exact90 => "exact90",
            Interpolation::Bilinear => "bilinear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Boundary {
    Zero,
    /// Mirror about the edge pixel centres' outer half (`-1 -> 0`).
    Reflect,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub theta_hat: f64,
    pub s_hat: i32,
    pub mu: f64,
    pub interpolation: Interpolation,
    pub boundary: Boundary,
}

impl WarpSpec {
    pub fn rotation(theta_hat: f64, interpolation: Interpolation) -> Self {
        Self { theta_hat, s_hat: 0, mu: 1.0, interpolation, boundary: Boundary::Zero }
    }

    pub fn scale(s_hat: i32, mu: f64) -> Self {
        Self { theta_hat: 0.0, s_hat, mu, interpolation: Interpolation::Bilinear, boundary: Boundary::Reflect }
    }

    /// Number of quarter turns for an exact warp.
    fn quarter_turns(&self) -> Result<usize> {
        let q = self.theta_hat / (PI / 2.0);
        let r = q.round();
        if (q - r).abs() > 1e-9 || self.s_hat != 0 {
            return Err(Error::invalid(format!(
                "exact90 needs a multiple of pi/2 and no scaling, got theta={} s={}",
                self.theta_hat, self.s_hat
            )));
        }
        Ok((r as i64).rem_euclid(4) as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) || !self.theta_hat.is_finite() {
            return Err(Error::invalid("warp needs finite theta and positive mu"));
        }
        if self.interpolation == Interpolation::Exact90 {
            self.quarter_turns()?;
        }
        Ok(())
    }
}

pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

pub(crate) fn sample(plane: &[f64], h: usize, w: usize, y: isize, x: isize, boundary: Boundary) -> f64 {
    let inside = y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w;
    match (inside, boundary) {
        (true, _) => plane[y as usize * w + x as usize],
        (false, Boundary::Zero) => 0.0,
        (false, Boundary::Reflect) => plane[reflect(y, h) * w + reflect(x, w)],
    }
}

/// Warps one `h x w` plane about `centre` (row, col).
fn warp_plane(plane: &[f64], h: usize, w: usize, spec: &WarpSpec, centre: [f64; 2], out: &mut [f64]) -> Result<()> {
    match spec.interpolation {
        Interpolation::Exact90 => {
            let turns = spec.quarter_turns()?;
            // twice the centre is an integer whenever the centre sits on the
            // pixel or half-pixel lattice
            let (ty, tx) = (2.0 * centre[0], 2.0 * centre[1]);
            if (ty - ty.round()).abs() > 1e-9 || (tx - tx.round()).abs() > 1e-9 {
                return Err(Error::invalid("exact90 needs a centre on the half-pixel lattice"));
            }
            let (cy2, cx2) = (ty.round() as isize, tx.round() as isize);
            for i in 0..h as isize {
                for j in 0..w as isize {
                    // source = c + R^{-k}(x - c), computed in doubled units
                    let (dy, dx) = (2 * i - cy2, 2 * j - cx2);
                    let (sy, sx) = match turns {
                        0 => (dy, dx),
                        1 => (-dx, dy),
                        2 => (-dy, -dx),
                        _ => (dx, -dy),
                    };
                    let (ry, rx) = (sy + cy2, sx + cx2);
                    debug_assert!(ry % 2 == 0 && rx % 2 == 0);
                    out[i as usize * w + j as usize] = sample(plane, h, w, ry / 2, rx / 2, spec.boundary);
                }
            }
        }
        Interpolation::Bilinear => {
            let inv = inverse_transform_matrix(&TransformSpec::new(spec.theta_hat, spec.s_hat as f64, spec.mu));
            for i in 0..h {
                for j in 0..w {
                    let d = [i as f64 - centre[0], j as f64 - centre[1]];
                    let y = inv[0][0] * d[0] + inv[0][1] * d[1] + centre[0];
                    let x = inv[1][0] * d[0] + inv[1][1] * d[1] + centre[1];
                    let (y0, x0) = (y.floor(), x.floor());
                    let (fy, fx) = (y - y0, x - x0);
                    let (y0, x0) = (y0 as isize, x0 as isize);
                    let v00 = sample(plane, h, w, y0, x0, spec.boundary);
                    let v01 = sample(plane, h, w, y0, x0 + 1, spec.boundary);
                    let v10 = sample(plane, h, w, y0 + 1, x0, spec.boundary);
                    let v11 = sample(plane, h, w, y0 + 1, x0 + 1, spec.boundary);
                    out[i * w + j] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11);
                }
            }
        }
    }
    Ok(())
}

/// Image centre `((H-1)/2, (W-1)/2)` moved back by `offset` pixels.
pub fn centre(h: usize, w: usize, offset: f64) -> [f64; 2] {
    [(h as f64 - 1.0) / 2.0 - offset, (w as f64 - 1.0) / 2.0 - offset]
}

/// Warps every plane of a tensor whose last two axes are spatial, about
/// the centre moved by `offset` (see [`centre`]).
pub fn warp_image_about(img: &Tensor, w: &WarpSpec, offset: f64) -> Result<Tensor> {
    w.validate()?;
    let s = img.shape();
    if s.len() < 2 {
        return Err(Error::shape(format!("warp needs spatial axes, got {s:?}")));
    }
    let (h, wd) = (s[s.len() - 2], s[s.len() - 1]);
    if w.interpolation == Interpolation::Exact90 && h != wd && w.quarter_turns()? % 2 == 1 {
        return Err(Error::invalid(format!("quarter turn of a non-square {h}x{wd} image")));
    }
    let c = centre(h, wd, offset);
    let mut out = Tensor::zeros(s);
    let plane = h * wd;
    for (src, dst) in img.data().chunks(plane).zip(out.data_mut().chunks_mut(plane)) {
        warp_plane(src, h, wd, w, c, dst)?;
    }
    Ok(out)
}

/// [`warp_image_about`] with the geometric image centre.
pub fn warp_image(img: &Tensor, w: &WarpSpec) -> Result<Tensor> {
    warp_image_about(img, w, 0.0)
}

/// Group action on a feature map: cyclic rotation shift, truncated scale
/// shift, then the spatial warp of every slice.
pub fn transform_feature_about(f: &GroupFeatureMap, w: &WarpSpec, offset: f64) -> Result<GroupFeatureMap> {
    let n_rot = f.n_rot();
    let step = 2.0 * PI / n_rot as f64;
    let q = w.theta_hat / step;
    if (q - q.round()).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "rotation {} is not a multiple of the group step {step}",
            w.theta_hat
        )));
    }
    let shift = (q.round() as i64).rem_euclid(n_rot as i64) as usize;
    let warped = warp_image_about(&f.tensor, w, offset)?;
    let warped = GroupFeatureMap::new(warped)?;
    let mut out = GroupFeatureMap::new(Tensor::zeros(f.tensor.shape()))?;
    for b in 0..f.batch() {
        for p in 0..f.patterns() {
            for r in 0..n_rot {
                for s in 0..f.n_scale() {
                    let src_s = s as i64 - w.s_hat as i64;
                    if src_s < 0 || src_s >= f.n_scale() as i64 {
                        continue;
                    }
                    let src_r = (r + n_rot - shift) % n_rot;
                    let src = warped.slice(b, p, src_r, src_s as usize).to_vec();
                    out.slice_mut(b, p, r, s).copy_from_slice(&src);
                }
            }
        }
    }
    Ok(out)
}

pub fn transform_feature(f: &GroupFeatureMap, w: &WarpSpec) -> Result<GroupFeatureMap> {
    transform_feature_about(f, w, 0.0)
}

/// What a layer consumes or produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    /// `[B, C, H, W]`; transforms act spatially only.
    Plain,
    /// `[B, S, P, R, H, W]`.
    Group,
}

/// A deterministic map whose equivariance can be measured.
pub trait EquivariantLayer {
    fn name(&self) -> String;
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    fn input_kind(&self) -> FeatureKind;
    fn output_kind(&self) -> FeatureKind;
    /// Half-pixel shifts accumulated from even kernels.
    fn anchor_shift(&self) -> f64;
}

pub struct LiftingLayer {
    pub bank: LiftingBank,
    pub align: Align,
}

impl LiftingLayer {
    pub fn new(bank: LiftingBank) -> Self {
        Self { bank, align: Align::Lead }
    }
}

impl EquivariantLayer for LiftingLayer {
    fn name(&self) -> String {
        "lifting".into()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let b = &self.bank;
        let coefficients = tape.constant(b.coefficients.clone());
        let y = lifting_conv(tape.constant(x.clone()), coefficients, b.plan(), b.c_out, b.c_in, self.align)?;
        let out = (*y.value()).clone();
        Ok(out)
    }

    fn input_kind(&self) -> FeatureKind {
        FeatureKind::Plain
    }

    fn output_kind(&self) -> FeatureKind {
        FeatureKind::Group
    }

    fn anchor_shift(&self) -> f64 {
        // every scale shares the same parity
        self.align.shift(self.bank.group().kernel_sizes[0])
    }
}

pub struct GroupLayer {
    pub bank: GroupBank,
    pub align: Align,
}

impl GroupLayer {
    pub fn new(bank: GroupBank) -> Self {
        Self { bank, align: Align::Lead }
    }
}

impl EquivariantLayer for GroupLayer {
    fn name(&self) -> String {
        "group".into()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let b = &self.bank;
        let coefficients = tape.constant(b.coefficients.clone());
        let y = group_conv(tape.constant(x.clone()), coefficients, b.plan(), b.c_out, b.c_in, self.align)?;
        let out = (*y.value()).clone();
        Ok(out)
    }

    fn input_kind(&self) -> FeatureKind {
        FeatureKind::Group
    }

    fn output_kind(&self) -> FeatureKind {
        FeatureKind::Group
    }

    fn anchor_shift(&self) -> f64 {
        self.align.shift(self.bank.group().kernel_sizes[0])
    }
}

/// Ordinary convolution with independent kernels `[C_out, C_in, k, k]`.
pub struct PlainConvLayer(pub Tensor);

impl PlainConvLayer {
    /// Unit-variance-preserving random kernels.
    pub fn random<R: Rng>(c_out: usize, c_in: usize, k: usize, rng: &mut R) -> Self {
        let std = (1.0 / (c_in * k * k) as f64).sqrt();
        let t = Tensor::from_fn(&[c_out, c_in, k, k], |_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        });
        Self(t)
    }
}

impl EquivariantLayer for PlainConvLayer {
    fn name(&self) -> String {
        "unshared".into()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let k = self.0.shape()[2];
        let y = tape.constant(x.clone()).conv2d(tape.constant(self.0.clone()), 1, Padding::same(k, k))?;
        let out = (*y.value()).clone();
        Ok(out)
    }

    fn input_kind(&self) -> FeatureKind {
        FeatureKind::Plain
    }

    fn output_kind(&self) -> FeatureKind {
        FeatureKind::Plain
    }

    fn anchor_shift(&self) -> f64 {
        Align::Lead.shift(self.0.shape()[2])
    }
}

/// Pointwise rectifier on either feature kind.
pub struct ReluLayer(pub FeatureKind);

impl EquivariantLayer for ReluLayer {
    fn name(&self) -> String {
        "relu".into()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.map(|v| v.max(0.0)))
    }

    fn input_kind(&self) -> FeatureKind {
        self.0
    }

    fn output_kind(&self) -> FeatureKind {
        self.0
    }

    fn anchor_shift(&self) -> f64 {
        0.0
    }
}

/// Maximum over the group axes.
pub struct ProjectLayer;

impl EquivariantLayer for ProjectLayer {
    fn name(&self) -> String {
        "project".into()
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let out = (*group_project(tape.constant(x.clone()))?.value()).clone();
        Ok(out)
    }

    fn input_kind(&self) -> FeatureKind {
        FeatureKind::Group
    }

    fn output_kind(&self) -> FeatureKind {
        FeatureKind::Plain
    }

    fn anchor_shift(&self) -> f64 {
        0.0
    }
}

/// Layers applied in sequence.
pub struct Stack(pub Vec<Rc<dyn EquivariantLayer>>);

impl EquivariantLayer for Stack {
    fn name(&self) -> String {
        self.0.iter().map(|l| l.name()).collect::<Vec<_>>().join("+")
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for l in &self.0 {
            y = l.apply(&y)?;
        }
        Ok(y)
    }

    fn input_kind(&self) -> FeatureKind {
        self.0.first().map_or(FeatureKind::Plain, |l| l.input_kind())
    }

    fn output_kind(&self) -> FeatureKind {
        self.0.last().map_or(FeatureKind::Plain, |l| l.output_kind())
    }

    fn anchor_shift(&self) -> f64 {
        self.0.iter().map(|l| l.anchor_shift()).sum()
    }
}

/// Applies the group action appropriate for `kind`.
pub fn act(x: &Tensor, kind: FeatureKind, w: &WarpSpec, offset: f64) -> Result<Tensor> {
    match kind {
        FeatureKind::Plain => warp_image_about(x, w, offset),
        FeatureKind::Group => Ok(transform_feature_about(&GroupFeatureMap::new(x.clone())?, w, offset)?.tensor),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivarianceReport {
    pub error: f64,
    /// The reference norm was zero and `error` is an absolute norm.
    pub absolute: bool,
}

/// Relative L2 distance between `layer(warp(x))` and `warp(layer(x))` over
/// the interior left after removing `crop` pixels per border. For scale
/// shifts only scale slices present on both sides are compared.
pub fn equivariance_error(layer: &dyn EquivariantLayer, input: &Tensor, w: &WarpSpec, crop: usize) -> Result<EquivarianceReport> {
    let y = layer.apply(input)?;
    let moved_in = act(input, layer.input_kind(), w, 0.0)?;
    let lhs = layer.apply(&moved_in)?;
    let rhs = act(&y, layer.output_kind(), w, layer.anchor_shift())?;
    let s = rhs.shape();
    let nd = s.len();
    let (h, wd) = (s[nd - 2], s[nd - 1]);
    if 2 * crop >= h || 2 * crop >= wd {
        return Err(Error::invalid(format!("crop {crop} leaves no interior of {h}x{wd}")));
    }
    let scale_ok = |plane: usize| -> bool {
        if layer.output_kind() != FeatureKind::Group || w.s_hat == 0 {
            return true;
        }
        let (n_scale, inner) = (s[1], s[2] * s[3]);
        let sc = (plane / inner) % n_scale;
        let src = sc as i64 - w.s_hat as i64;
        src >= 0 && src < n_scale as i64
    };
    let (mut num, mut den) = (0.0, 0.0);
    for (plane, (a, b)) in lhs.data().chunks(h * wd).zip(rhs.data().chunks(h * wd)).enumerate() {
        if !scale_ok(plane) {
            continue;
        }
        for i in crop..h - crop {
            for j in crop..wd - crop {
                let (u, v) = (a[i * wd + j], b[i * wd + j]);
                num += (u - v) * (u - v);
                den += v * v;
            }
        }
    }
    if den == 0.0 {
        log::warn!("equivariance reference is zero; reporting the absolute norm");
        return Ok(EquivarianceReport { error: num.sqrt(), absolute: true });
    }
    Ok(EquivarianceReport { error: (num / den).sqrt(), absolute: false })
}

/// Gaussian-blurred white noise normalised to zero mean and unit variance
/// per plane, blurred over the last two axes with reflect boundaries.
pub fn smooth_random_field<R: Rng>(shape: &[usize], sigma: f64, rng: &mut R) -> Tensor {
    let mut t = Tensor::from_fn(shape, |_| StandardNormal.sample(rng));
    let nd = shape.len();
    let (h, w) = (shape[nd - 2], shape[nd - 1]);
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|v| v / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for plane in t.data_mut().chunks_mut(h * w) {
        for i in 0..h {
            for j in 0..w {
                tmp[i * w + j] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * plane[i * w + reflect(j as isize + k as isize - radius, w)])
                    .sum();
            }
        }
        for i in 0..h {
            for j in 0..w {
                plane[i * w + j] = taps
                    .iter()
                    .enumerate()
                    .map(|(k, c)| c * tmp[reflect(i as isize + k as isize - radius, h) * w + j])
                    .sum();
            }
        }
        let n = (h * w) as f64;
        let mean = plane.iter().sum::<f64>() / n;
        let std = (plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt().max(1e-12);
        plane.iter_mut().for_each(|v| *v = (*v - mean) / std);
    }
    t
}

/// Settings of a layer-level equivariance sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyConfig {
    pub n_rot: usize,
    pub n_scale: usize,
    pub mu: f64,
    pub p: usize,
    pub h: f64,
    /// Spatial side of the random inputs.
    pub size: usize,
    /// Patterns on each side of the measured layers.
    pub patterns: usize,
    /// Channels of the plain input to the lifting layer.
    pub c_in: usize,
    /// Blur of the random inputs in pixels.
    pub sigma: f64,
    /// Border removed before comparing; 0 selects the largest kernel size.
    pub crop: usize,
    pub seed: u64,
    pub seeds: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            n_rot: 8,
            n_scale: 4,
            mu: 1.25,
            p: 6,
            h: 0.5,
            size: 64,
            patterns: 1,
            c_in: 3,
            sigma: 3.0,
            crop: 0,
            seed: 0,
            seeds: 20,
        }
    }
}

/// One warp of the sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyCase {
    pub theta_hat: f64,
    pub s_hat: i32,
    pub interpolation: Interpolation,
}

impl VerifyCase {
    pub fn warp(&self, mu: f64) -> WarpSpec {
        let boundary = if self.s_hat == 0 { Boundary::Zero } else { Boundary::Reflect };
        WarpSpec { theta_hat: self.theta_hat, s_hat: self.s_hat, mu, interpolation: self.interpolation, boundary }
    }

    /// Quarter turns measured exactly, then the eighth turn and one scale
    /// step measured with bilinear warps; warps outside the group are left
    /// out.
    pub fn standard(n_rot: usize, n_scale: usize) -> Vec<VerifyCase> {
        let mut v = Vec::new();
        if n_rot % 4 == 0 {
            v.extend((1..4).map(|k| VerifyCase {
                theta_hat: k as f64 * PI / 2.0,
                s_hat: 0,
                interpolation: Interpolation::Exact90,
            }));
        }
        if n_rot % 8 == 0 {
            v.push(VerifyCase { theta_hat: PI / 4.0, s_hat: 0, interpolation: Interpolation::Bilinear });
        }
        if n_scale > 1 {
            v.push(VerifyCase { theta_hat: 0.0, s_hat: 1, interpolation: Interpolation::Bilinear });
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyRow {
    pub layer: String,
    pub theta_hat: f64,
    pub s_hat: i32,
    pub interpolation: String,
    pub seed: u64,
    pub error: f64,
}

pub const VERIFY_CSV_HEADER: &str = "layer,theta_hat,s_hat,interpolation,seed,error";

impl VerifyRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:.6},{},{},{},{:.6e}",
            self.layer, self.theta_hat, self.s_hat, self.interpolation, self.seed, self.error
        )
    }
}

/// Measures the lifting layer, the group layer and an unshared convolution
/// of matched output width on every case for `cfg.seeds` seeds.
///
/// Group-layer inputs have their top `s_hat` scale slices zeroed: those
/// slices are pushed out of the truncated scale range by the warp, and a
/// layer that reads them cannot be equivariant on the remaining ones.
pub fn verify_layers(cfg: &VerifyConfig, cases: &[VerifyCase]) -> Result<Vec<VerifyRow>> {
    use crate::bank::{BankPlan, GroupSpec};
    use crate::basis::make_enhanced_basis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    if cfg.seeds == 0 || cfg.patterns == 0 || cfg.c_in == 0 || !(cfg.sigma > 0.0) {
        return Err(Error::invalid("verify needs positive seeds, patterns, c_in and sigma"));
    }
    let group = GroupSpec::new(cfg.n_rot, cfg.n_scale, cfg.mu, cfg.p, cfg.h)?;
    let plan = Rc::new(BankPlan::new(group.clone(), make_enhanced_basis(cfg.p, cfg.h)?)?);
    let crop = if cfg.crop == 0 { group.max_kernel_size() } else { cfg.crop };
    let width = cfg.patterns * cfg.n_rot * cfg.n_scale;
    let mut rows = Vec::new();
    for i in 0..cfg.seeds as u64 {
        let seed = cfg.seed + i;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lifting = LiftingLayer::new(LiftingBank::random(plan.clone(), cfg.patterns, cfg.c_in, &mut rng)?);
        let grouped = GroupLayer::new(GroupBank::random(plan.clone(), cfg.patterns, cfg.patterns, &mut rng)?);
        let control = PlainConvLayer::random(width, cfg.c_in, cfg.p, &mut rng);
        let image = smooth_random_field(&[1, cfg.c_in, cfg.size, cfg.size], cfg.sigma, &mut rng);
        let feature = smooth_random_field(
            &[1, cfg.n_scale, cfg.patterns, cfg.n_rot, cfg.size, cfg.size],
            cfg.sigma,
            &mut rng,
        );
        for case in cases {
            let w = case.warp(cfg.mu);
            w.validate()?;
            let mut f = feature.clone();
            let top = (case.s_hat.max(0) as usize).min(cfg.n_scale);
            let slab = f.len() / cfg.n_scale;
            f.data_mut()[(cfg.n_scale - top) * slab..].iter_mut().for_each(|v| *v = 0.0);
            let measured: [(&dyn EquivariantLayer, &Tensor); 3] =
                [(&lifting, &image), (&grouped, &f), (&control, &image)];
            for (layer, input) in measured {
                let r = equivariance_error(layer, input, &w, crop)?;
                rows.push(VerifyRow {
                    layer: layer.name(),
                    theta_hat: case.theta_hat,
                    s_hat: case.s_hat,
                    interpolation: case.interpolation.name().into(),
                    seed,
                    error: r.error,
                });
            }
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::{BankPlan, GroupSpec};
    use crate::basis::make_enhanced_basis;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let h = rows.len();
        let w = rows[0].len();
        Tensor::new(vec![h, w], rows.concat()).unwrap()
    }

    #[test]
    fn quarter_turn_of_two_by_two() {
        let x = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let w = WarpSpec::rotation(PI / 2.0, Interpolation::Exact90);
        assert_eq!(warp_image(&x, &w).unwrap().data(), &[3.0, 1.0, 4.0, 2.0]);
    }

    #[test]
    fn half_turn_is_an_involution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::from_fn(&[2, 5, 5], |_| rng.gen());
        let w = WarpSpec::rotation(PI, Interpolation::Exact90);
        let twice = warp_image(&warp_image(&x, &w).unwrap(), &w).unwrap();
        assert_eq!(twice, x);
    }

    #[test]
    fn exact_warp_rejects_other_angles() {
        let x = Tensor::zeros(&[4, 4]);
        assert!(warp_image(&x, &WarpSpec::rotation(PI / 4.0, Interpolation::Exact90)).is_err());
    }

    #[test]
    fn bilinear_agrees_with_exact_on_quarter_turns() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::from_fn(&[6, 6], |_| rng.gen());
        for k in 0..4 {
            let th = k as f64 * PI / 2.0;
            let a = warp_image(&x, &WarpSpec::rotation(th, Interpolation::Exact90)).unwrap();
            let b = warp_image(&x, &WarpSpec::rotation(th, Interpolation::Bilinear)).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn scaling_a_constant_keeps_it_constant() {
        let x = Tensor::full(&[16, 16], 0.7);
        let y = warp_image(&x, &WarpSpec::scale(1, 1.25)).unwrap();
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn feature_transform_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = GroupFeatureMap::new(Tensor::from_fn(&[1, 3, 1, 8, 4, 4], |_| rng.gen())).unwrap();
        let id = transform_feature(&f, &WarpSpec::rotation(0.0, Interpolation::Exact90)).unwrap();
        assert_eq!(id, f);
        let full = transform_feature(&f, &WarpSpec::rotation(2.0 * PI, Interpolation::Exact90)).unwrap();
        assert_eq!(full, f);
        let w = WarpSpec { theta_hat: 0.0, s_hat: 1, mu: 1.0, interpolation: Interpolation::Bilinear, boundary: Boundary::Zero };
        let up = transform_feature(&f, &w).unwrap();
        for r in 0..8 {
            assert!(up.slice(0, 0, r, 0).iter().all(|&v| v == 0.0));
            assert_eq!(up.slice(0, 0, r, 1), f.slice(0, 0, r, 0));
            assert_eq!(up.slice(0, 0, r, 2), f.slice(0, 0, r, 1));
        }
        let bad = WarpSpec::rotation(PI / 8.0, Interpolation::Bilinear);
        assert!(transform_feature(&f, &bad).is_err());
    }

    #[test]
    fn relu_commutes_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = smooth_random_field(&[1, 2, 20, 20], 2.0, &mut rng);
        let w = WarpSpec::rotation(PI / 2.0, Interpolation::Exact90);
        let r = equivariance_error(&ReluLayer(FeatureKind::Plain), &x, &w, 2).unwrap();
        assert!(r.error <= 1e-12);
    }

    #[test]
    fn lifting_quarter_turn_equivariance() {
        let plan = Rc::new(BankPlan::new(GroupSpec::full(), make_enhanced_basis(6, 0.5).unwrap()).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = LiftingBank::random(plan, 1, 2, &mut rng).unwrap();
        let x = smooth_random_field(&[1, 2, 32, 32], 3.0, &mut rng);
        let w = WarpSpec::rotation(PI / 2.0, Interpolation::Exact90);
        let r = equivariance_error(&LiftingLayer::new(bank), &x, &w, 12).unwrap();
        assert!(r.error < 1e-10, "{}", r.error);
    }
}
