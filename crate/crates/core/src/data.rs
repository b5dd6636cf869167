//! Datasets of curvilinear structures: a synthetic generator, a PNG loader
//! for fundus-style directories, augmentation and the patch protocol.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::basis::{inverse_transform_matrix, mat_mul, Mat2, TransformSpec};
use crate::equivariance::{reflect, sample, Boundary};
use crate::error::{Error, Result};

/// An RGB image with its binary vessel label and field-of-view mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[1, H, W]` in `{0, 1}`.
    pub label: Tensor,
    /// `[1, H, W]` in `{0, 1}`.
    pub fov: Tensor,
}

fn is_binary(t: &Tensor) -> bool {
    t.data().iter().all(|&v| v == 0.0 || v == 1.0)
}

impl Sample {
    pub fn new(image: Tensor, label: Tensor, fov: Tensor) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape(format!("image must be [3, H, W], got {s:?}")));
        }
        let plane = [1, s[1], s[2]];
        for (name, t) in [("label", &label), ("fov", &fov)] {
            if t.shape() != plane {
                return Err(Error::shape(format!("{name} has shape {:?}, expected {plane:?}", t.shape())));
            }
            if !is_binary(t) {
                return Err(Error::invalid(format!("{name} must be binary")));
            }
        }
        Ok(Self { image, label, fov })
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    /// Fraction of all pixels that are labelled foreground.
    pub fn label_fraction(&self) -> f64 {
        self.label.sum() / self.label.len() as f64
    }

    /// Fraction of FOV pixels that are labelled foreground.
    pub fn fov_label_fraction(&self) -> f64 {
        let inside = self.fov.sum();
        if inside == 0.0 {
            return 0.0;
        }
        let hits: f64 = self.label.data().iter().zip(self.fov.data()).map(|(l, f)| l * f).sum();
        hits / inside
    }
}

/// Disc inscribed in an `h x w` frame.
pub fn disc_fov(h: usize, w: usize) -> Tensor {
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let r = h.min(w) as f64 / 2.0;
    Tensor::from_fn(&[1, h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        if (y - cy).powi(2) + (x - cx).powi(2) <= r * r {
            1.0
        } else {
            0.0
        }
    })
}

// ---------------------------------------------------------------------------
// synthetic curves

/// Parameters of the synthetic curve generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub size: usize,
    /// Inclusive range of curves per image.
    pub curves: (usize, usize),
    /// Stroke width range in pixels.
    pub width: (f64, f64),
    /// Chord length as a fraction of the image size.
    pub length: (f64, f64),
    /// Chord direction range in radians, measured from the column axis.
    /// `None` draws directions uniformly.
    pub orientation: Option<(f64, f64)>,
    /// Maximum control-point offset as a fraction of the chord length.
    pub bend: f64,
    /// Inclusive range of unlabelled dark spots per image.
    pub spots: (usize, usize),
    /// Spot radius range in pixels.
    pub spot_radius: (f64, f64),
}

impl SynthSpec {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            curves: (3, 10),
            width: (1.0, 6.0),
            length: (0.25, 0.65),
            orientation: None,
            bend: 0.3,
            spots: (0, 4),
            spot_radius: (1.5, 3.5),
        }
    }

    /// Thin, nearly horizontal curves: the canonical training split.
    pub fn canonical(size: usize) -> Self {
        Self { width: (1.0, 3.0), orientation: Some((-PI / 12.0, PI / 12.0)), spots: (3, 8), ..Self::new(size) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 32 {
            return Err(Error::invalid(format!("synthetic size must be at least 32, got {}", self.size)));
        }
        let (c0, c1) = self.curves;
        let ok = c0 <= c1
            && self.width.0 > 0.0
            && self.width.0 <= self.width.1
            && self.length.0 > 0.0
            && self.length.0 <= self.length.1
            && self.orientation.map_or(true, |(a, b)| a <= b)
            && self.bend >= 0.0
            && self.spots.0 <= self.spots.1
            && self.spot_radius.0 > 0.0
            && self.spot_radius.0 <= self.spot_radius.1;
        if !ok {
            return Err(Error::invalid(format!("invalid synthetic spec {self:?}")));
        }
        Ok(())
    }
}

/// Per-sample generator: one ChaCha stream per index.
fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1]];
    let len2 = d[0] * d[0] + d[1] * d[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * d[0] + (p[1] - a[1]) * d[1]) / len2).clamp(0.0, 1.0)
    };
    let q = [a[0] + t * d[0] - p[0], a[1] + t * d[1] - p[1]];
    (q[0] * q[0] + q[1] * q[1]).sqrt()
}

fn bezier(p0: [f64; 2], p1: [f64; 2], p2: [f64; 2], t: f64) -> [f64; 2] {
    let u = 1.0 - t;
    [
        u * u * p0[0] + 2.0 * u * t * p1[0] + t * t * p2[0],
        u * u * p0[1] + 2.0 * u * t * p1[1] + t * t * p2[1],
    ]
}

/// Draws one synthetic sample.
fn synth_one<R: Rng>(spec: &SynthSpec, rng: &mut R) -> Sample {
    let n = spec.size;
    let np = n * n;
    let sz = n as f64;

    // background: fundus-like base colour, a few low-frequency waves and grain
    let base = [uniform(rng, (0.55, 0.85)), uniform(rng, (0.25, 0.45)), uniform(rng, (0.1, 0.25))];
    let mut texture = vec![0.0; np];
    for _ in 0..6 {
        let f = uniform(rng, (0.5, 4.0)) * 2.0 * PI / sz;
        let dir = uniform(rng, (0.0, 2.0 * PI));
        let (ky, kx) = (f * dir.sin(), f * dir.cos());
        let phase = uniform(rng, (0.0, 2.0 * PI));
        let amp = uniform(rng, (0.01, 0.04));
        for (i, t) in texture.iter_mut().enumerate() {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            *t += amp * (ky * y + kx * x + phase).sin();
        }
    }

    let mut label = vec![0.0; np];
    let mut coverage = vec![0.0f64; np];
    let count = rng.gen_range(spec.curves.0..=spec.curves.1);
    for _ in 0..count {
        let width = uniform(rng, spec.width);
        let len = uniform(rng, spec.length) * sz;
        let dir = match spec.orientation {
            Some(range) => uniform(rng, range),
            None => uniform(rng, (0.0, PI)),
        };
        let c = [uniform(rng, (0.0, sz - 1.0)), uniform(rng, (0.0, sz - 1.0))];
        let d = [dir.sin(), dir.cos()];
        let normal = [d[1], -d[0]];
        let bend = uniform(rng, (-spec.bend, spec.bend)) * len;
        let p0 = [c[0] - 0.5 * len * d[0], c[1] - 0.5 * len * d[1]];
        let p2 = [c[0] + 0.5 * len * d[0], c[1] + 0.5 * len * d[1]];
        let p1 = [c[0] + bend * normal[0], c[1] + bend * normal[1]];
        let steps = 32;
        let pts: Vec<[f64; 2]> = (0..=steps).map(|k| bezier(p0, p1, p2, k as f64 / steps as f64)).collect();

        let reach = 0.5 * width + 1.0;
        let (mut y0, mut y1, mut x0, mut x1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for p in &pts {
            y0 = y0.min(p[0]);
            y1 = y1.max(p[0]);
            x0 = x0.min(p[1]);
            x1 = x1.max(p[1]);
        }
        let clip = |v: f64| v.clamp(0.0, sz - 1.0) as usize;
        let (ya, yb) = (clip((y0 - reach).floor()), clip((y1 + reach).ceil()));
        let (xa, xb) = (clip((x0 - reach).floor()), clip((x1 + reach).ceil()));
        let contrast = uniform(rng, (0.25, 0.55));
        for y in ya..=yb {
            for x in xa..=xb {
                let p = [y as f64, x as f64];
                let dist = pts.windows(2).map(|s| point_segment_distance(p, s[0], s[1])).fold(f64::MAX, f64::min);
                let i = y * n + x;
                if dist <= 0.5 * width {
                    label[i] = 1.0;
                }
                // one pixel of linear falloff gives an anti-aliased stroke
                let cov = (0.5 * width + 0.5 - dist).clamp(0.0, 1.0) * contrast;
                coverage[i] = coverage[i].max(cov);
            }
        }
    }

    // spots darken the image like vessels but carry no label
    for _ in 0..rng.gen_range(spec.spots.0..=spec.spots.1) {
        let r = uniform(rng, spec.spot_radius);
        let c = [uniform(rng, (0.0, sz - 1.0)), uniform(rng, (0.0, sz - 1.0))];
        let contrast = uniform(rng, (0.25, 0.55));
        for (i, cov) in coverage.iter_mut().enumerate() {
            let (y, x) = ((i / n) as f64, (i % n) as f64);
            let dist = ((y - c[0]).powi(2) + (x - c[1]).powi(2)).sqrt();
            *cov = cov.max((r + 0.5 - dist).clamp(0.0, 1.0) * contrast);
        }
    }

    let fov = disc_fov(n, n);
    let mut image = Tensor::zeros(&[3, n, n]);
    let data = image.data_mut();
    let vessel = [0.55, 0.75, 0.85];
    for i in 0..np {
        if fov.data()[i] == 0.0 {
            continue;
        }
        let grain: f64 = StandardNormal.sample(rng);
        for ch in 0..3 {
            let v = base[ch] + texture[i] + 0.01 * grain - coverage[i] * vessel[ch] * base[ch];
            data[ch * np + i] = v.clamp(0.0, 1.0);
        }
    }
    for (l, f) in label.iter_mut().zip(fov.data()) {
        *l *= f;
    }
    Sample { image, label: Tensor::new(vec![1, n, n], label).expect("label shape"), fov }
}

/// `count` random curve images of side `size`, deterministic in `seed`.
pub fn gen_synthetic(seed: u64, count: usize, size: usize) -> Result<Vec<Sample>> {
    gen_synthetic_with(seed, count, &SynthSpec::new(size))
}

pub fn gen_synthetic_with(seed: u64, count: usize, spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..count).map(|i| synth_one(spec, &mut sample_rng(seed, i))).collect())
}

/// Samples drawn from `spec` and then rotated by an angle drawn from
/// `rotation` (radians) and magnified by a factor drawn from `scale`. The
/// FOV is reset to the inscribed disc.
pub fn gen_transformed(
    seed: u64,
    count: usize,
    spec: &SynthSpec,
    rotation: (f64, f64),
    scale: (f64, f64),
) -> Result<Vec<Sample>> {
    spec.validate()?;
    if rotation.0 > rotation.1 || scale.0 <= 0.0 || scale.0 > scale.1 {
        return Err(Error::invalid("invalid rotation or scale range"));
    }
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(seed, i);
            let s = synth_one(spec, &mut rng);
            let t = Affine {
                rotation: uniform(&mut rng, rotation),
                scale: uniform(&mut rng, scale),
                ..Affine::identity()
            };
            let mut out = apply_affine(&s, &t, Boundary::Reflect)?;
            out.fov = disc_fov(out.height(), out.width());
            mask_outside(&mut out);
            Ok(out)
        })
        .collect()
}

fn mask_outside(s: &mut Sample) {
    let np = s.fov.len();
    let fov = s.fov.data().to_vec();
    for plane in s.image.data_mut().chunks_mut(np) {
        for (v, f) in plane.iter_mut().zip(&fov) {
            *v *= f;
        }
    }
    for (v, f) in s.label.data_mut().iter_mut().zip(&fov) {
        *v *= f;
    }
}

// ---------------------------------------------------------------------------
// augmentation

/// Ranges of the random augmentation. Angles are in degrees; brightness is
/// additive, contrast and saturation are multiplicative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub rotation: (f64, f64),
    pub scale: (f64, f64),
    pub shear: (f64, f64),
    pub hflip: bool,
    pub vflip: bool,
    pub brightness: (f64, f64),
    pub saturation: (f64, f64),
    pub contrast: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            rotation: (0.0, 360.0),
            scale: (0.8, 1.4),
            shear: (-10.0, 10.0),
            hflip: true,
            vflip: true,
            brightness: (-0.1, 0.1),
            saturation: (0.8, 1.2),
            contrast: (0.8, 1.2),
            seed: 0,
        }
    }
}

impl AugmentSpec {
    /// A spec whose every draw is the identity.
    pub fn identity() -> Self {
        Self {
            rotation: (0.0, 0.0),
            scale: (1.0, 1.0),
            shear: (0.0, 0.0),
            hflip: false,
            vflip: false,
            brightness: (0.0, 0.0),
            saturation: (1.0, 1.0),
            contrast: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [self.rotation, self.scale, self.shear, self.brightness, self.saturation, self.contrast];
        if ranges.iter().any(|(lo, hi)| !(lo <= hi)) {
            return Err(Error::invalid("augmentation ranges must satisfy lo <= hi"));
        }
        if self.scale.0 <= 0.0 || self.saturation.0 < 0.0 || self.contrast.0 < 0.0 {
            return Err(Error::invalid("scale must be positive, saturation and contrast non-negative"));
        }
        Ok(())
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> Affine {
        Affine {
            rotation: uniform(rng, self.rotation).to_radians(),
            scale: uniform(rng, self.scale),
            shear: uniform(rng, self.shear).to_radians(),
            hflip: self.hflip && rng.gen_bool(0.5),
            vflip: self.vflip && rng.gen_bool(0.5),
            brightness: uniform(rng, self.brightness),
            saturation: uniform(rng, self.saturation),
            contrast: uniform(rng, self.contrast),
        }
    }
}

/// One drawn augmentation. The geometric part maps `x` to
/// `c + U(rotation, scale) S(shear) F (x - c)` where `F` holds the flips.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine {
    pub rotation: f64,
    pub scale: f64,
    pub shear: f64,
    pub hflip: bool,
    pub vflip: bool,
    pub brightness: f64,
    pub saturation: f64,
    pub contrast: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            shear: 0.0,
            hflip: false,
            vflip: false,
            brightness: 0.0,
            saturation: 1.0,
            contrast: 1.0,
        }
    }

    fn inverse_matrix(&self) -> Mat2 {
        let flip = [[if self.vflip { -1.0 } else { 1.0 }, 0.0], [0.0, if self.hflip { -1.0 } else { 1.0 }]];
        let shear_inv = [[1.0, -self.shear.tan()], [0.0, 1.0]];
        let rot_inv = inverse_transform_matrix(&TransformSpec::new(self.rotation, 1.0, self.scale));
        mat_mul(&flip, &mat_mul(&shear_inv, &rot_inv))
    }

    fn is_geometric_identity(&self) -> bool {
        self.rotation == 0.0 && self.scale == 1.0 && self.shear == 0.0 && !self.hflip && !self.vflip
    }
}

enum Sampling {
    Bilinear,
    Nearest,
}

fn resample(t: &Tensor, inv: &Mat2, boundary: Boundary, mode: Sampling) -> Tensor {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Tensor::zeros(s);
    for (src, dst) in t.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        for i in 0..h {
            for j in 0..w {
                let d = [i as f64 - cy, j as f64 - cx];
                let y = inv[0][0] * d[0] + inv[0][1] * d[1] + cy;
                let x = inv[1][0] * d[0] + inv[1][1] * d[1] + cx;
                dst[i * w + j] = match mode {
                    Sampling::Nearest => sample(src, h, w, y.round() as isize, x.round() as isize, boundary),
                    Sampling::Bilinear => {
                        let (y0, x0) = (y.floor(), x.floor());
                        let (fy, fx) = (y - y0, x - x0);
                        let (y0, x0) = (y0 as isize, x0 as isize);
                        let v00 = sample(src, h, w, y0, x0, boundary);
                        let v01 = sample(src, h, w, y0, x0 + 1, boundary);
                        let v10 = sample(src, h, w, y0 + 1, x0, boundary);
                        let v11 = sample(src, h, w, y0 + 1, x0 + 1, boundary);
                        (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) + fy * ((1.0 - fx) * v10 + fx * v11)
                    }
                };
            }
        }
    }
    out
}

fn photometric(image: &mut Tensor, t: &Affine) {
    let np = image.shape()[1] * image.shape()[2];
    let data = image.data_mut();
    if t.brightness != 0.0 {
        data.iter_mut().for_each(|v| *v += t.brightness);
    }
    if t.contrast != 1.0 {
        let mean = data.iter().sum::<f64>() / data.len() as f64;
        data.iter_mut().for_each(|v| *v = mean + (*v - mean) * t.contrast);
    }
    if t.saturation != 1.0 {
        for i in 0..np {
            let grey = (data[i] + data[np + i] + data[2 * np + i]) / 3.0;
            for ch in 0..3 {
                let v = &mut data[ch * np + i];
                *v = grey + (*v - grey) * t.saturation;
            }
        }
    }
    data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Applies a drawn augmentation: bilinear sampling for the image, nearest
/// for the label and FOV, photometric jitter on the image only.
pub fn apply_affine(s: &Sample, t: &Affine, boundary: Boundary) -> Result<Sample> {
    let mut out = if t.is_geometric_identity() {
        s.clone()
    } else {
        let inv = t.inverse_matrix();
        Sample {
            image: resample(&s.image, &inv, boundary, Sampling::Bilinear),
            label: resample(&s.label, &inv, boundary, Sampling::Nearest),
            fov: resample(&s.fov, &inv, boundary, Sampling::Nearest),
        }
    };
    photometric(&mut out.image, t);
    Ok(out)
}

/// Draws one augmentation from `spec` and applies it with zero padding.
pub fn augment<R: Rng>(s: &Sample, spec: &AugmentSpec, rng: &mut R) -> Result<Sample> {
    spec.validate()?;
    apply_affine(s, &spec.draw(rng), Boundary::Zero)
}

// ---------------------------------------------------------------------------
// patches

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub size: usize,
    pub stride: usize,
    pub batch: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { size: 256, stride: 128, batch: 2 }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.stride == 0 || self.stride > self.size || self.batch == 0 {
            return Err(Error::invalid(format!(
                "patch spec needs 0 < stride <= size and batch > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Patch origins along one axis of length `n`: every `stride` pixels, with
/// the last patch aligned to the far border.
pub fn patch_origins(n: usize, size: usize, stride: usize) -> Vec<usize> {
    if n <= size {
        return vec![0];
    }
    let count = (n - size).div_ceil(stride) + 1;
    let mut v: Vec<usize> = (0..count - 1).map(|i| i * stride).collect();
    v.push(n - size);
    v
}

/// A `[C, size, size]` window cut at `(y, x)` of the padded frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub y: usize,
    pub x: usize,
    pub data: Tensor,
}

/// Reflect-pads a `[C, H, W]` tensor on the bottom and right to at least
/// `min_h x min_w`.
pub fn pad_reflect(t: &Tensor, min_h: usize, min_w: usize) -> Tensor {
    let s = t.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (h.max(min_h), w.max(min_w));
    if (ph, pw) == (h, w) {
        return t.clone();
    }
    let src = t.data();
    Tensor::from_fn(&[c, ph, pw], |i| {
        let (ch, y, x) = (i / (ph * pw), (i / pw) % ph, i % pw);
        src[ch * h * w + reflect(y as isize, h) * w + reflect(x as isize, w)]
    })
}

fn crop(t: &Tensor, y: usize, x: usize, ph: usize, pw: usize) -> Tensor {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let src = t.data();
    Tensor::from_fn(&[s[0], ph, pw], |i| {
        let (ch, yy, xx) = (i / (ph * pw), (i / pw) % ph, i % pw);
        src[ch * h * w + (y + yy) * w + x + xx]
    })
}

/// Overlapping grid of patches covering a `[C, H, W]` tensor. Frames
/// smaller than the patch are reflect-padded first.
pub fn extract_patches(t: &Tensor, p: &PatchSpec) -> Result<Vec<Patch>> {
    p.validate()?;
    if t.ndim() != 3 {
        return Err(Error::shape(format!("patches need [C, H, W], got {:?}", t.shape())));
    }
    let padded = pad_reflect(t, p.size, p.size);
    let (h, w) = (padded.shape()[1], padded.shape()[2]);
    let mut out = Vec::new();
    for &y in &patch_origins(h, p.size, p.stride) {
        for &x in &patch_origins(w, p.size, p.stride) {
            out.push(Patch { y, x, data: crop(&padded, y, x, p.size, p.size) });
        }
    }
    Ok(out)
}

/// Averages overlapping patches back into a `[C, height, width]` frame.
pub fn stitch_patches(patches: &[Patch], height: usize, width: usize) -> Result<Tensor> {
    let first = patches.first().ok_or_else(|| Error::invalid("no patches to stitch"))?;
    let s = first.data.shape().to_vec();
    let (c, ph, pw) = (s[0], s[1], s[2]);
    let (h, w) = (height.max(ph), width.max(pw));
    let mut sum = vec![0.0; c * h * w];
    let mut count = vec![0u32; h * w];
    for p in patches {
        if p.data.shape() != s.as_slice() || p.y + ph > h || p.x + pw > w {
            return Err(Error::shape(format!("patch at ({}, {}) does not fit the frame", p.y, p.x)));
        }
        let d = p.data.data();
        for yy in 0..ph {
            for xx in 0..pw {
                count[(p.y + yy) * w + p.x + xx] += 1;
                for ch in 0..c {
                    sum[ch * h * w + (p.y + yy) * w + p.x + xx] += d[ch * ph * pw + yy * pw + xx];
                }
            }
        }
    }
    if count.iter().any(|&n| n == 0) {
        return Err(Error::invalid("patches do not cover the frame"));
    }
    let full = Tensor::from_fn(&[c, h, w], |i| sum[i] / count[i % (h * w)] as f64);
    Ok(crop(&full, 0, 0, height, width))
}

/// A random `size x size` crop of a sample, reflect-padding small frames.
pub fn random_patch<R: Rng>(s: &Sample, size: usize, rng: &mut R) -> Sample {
    let pad = |t: &Tensor| pad_reflect(t, size, size);
    let (image, label, fov) = (pad(&s.image), pad(&s.label), pad(&s.fov));
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let y = rng.gen_range(0..=h - size);
    let x = rng.gen_range(0..=w - size);
    Sample {
        image: crop(&image, y, x, size, size),
        label: crop(&label, y, x, size, size),
        fov: crop(&fov, y, x, size, size),
    }
}

// ---------------------------------------------------------------------------
// files

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

fn open(path: &Path, stem: &str) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::Load { stem: stem.to_string(), reason: format!("missing {}", path.display()) });
    }
    image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn binary_plane(img: &image::DynamicImage, stem: &str, what: &str) -> Tensor {
    let g = img.to_luma8();
    let (w, h) = g.dimensions();
    let raw = g.into_raw();
    let grey = raw.iter().filter(|&&v| v > 12 && v < 243).count();
    if grey * 100 > raw.len() {
        log::warn!("{what} of `{stem}` has {grey} non-binary pixels");
    }
    let data = raw.iter().map(|&v| if v as f64 / 255.0 >= 0.5 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![1, h as usize, w as usize], data).expect("plane shape")
}

fn rgb_tensor(img: &image::DynamicImage) -> Tensor {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = rgb.into_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + ch] as f64 / 255.0
    })
}

/// Largest connected region (4-neighbour) with luminance above 0.1; an
/// approximate FOV for datasets that ship without masks.
pub fn estimate_fov(image: &Tensor) -> Tensor {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let np = h * w;
    let d = image.data();
    let bright: Vec<bool> =
        (0..np).map(|i| 0.299 * d[i] + 0.587 * d[np + i] + 0.114 * d[2 * np + i] > 0.1).collect();
    let mut comp = vec![usize::MAX; np];
    let (mut best, mut best_size) = (usize::MAX, 0);
    let mut queue = VecDeque::new();
    for start in 0..np {
        if !bright[start] || comp[start] != usize::MAX {
            continue;
        }
        comp[start] = start;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if bright[j] && comp[j] == usize::MAX {
                    comp[j] = start;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        if size > best_size {
            best_size = size;
            best = start;
        }
    }
    Tensor::from_fn(&[1, h, w], |i| if comp[i] == best && best != usize::MAX { 1.0 } else { 0.0 })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Estimate missing FOV masks with [`estimate_fov`] instead of failing.
    pub estimate_missing_fov: bool,
}

/// Loads `images/`, `labels/` and `fov/` PNG triples matched by stem, in
/// lexicographic stem order.
pub fn load_fundus_dir(path: &Path) -> Result<Vec<Sample>> {
    load_fundus_dir_with(path, LoadOptions::default())
}

pub fn load_fundus_dir_with(path: &Path, opts: LoadOptions) -> Result<Vec<Sample>> {
    if !path.is_dir() {
        return Err(Error::invalid(format!("{} is not a directory", path.display())));
    }
    let images = path.join("images");
    if !images.is_dir() {
        log::warn!("{} has no images/ directory; dataset is empty", path.display());
        return Ok(Vec::new());
    }
    let stems = png_stems(&images)?;
    if stems.is_empty() {
        log::warn!("{} contains no images", images.display());
    }
    let mut out = Vec::with_capacity(stems.len());
    for stem in stems {
        let file = |dir: &str| -> PathBuf { path.join(dir).join(format!("{stem}.png")) };
        let image = rgb_tensor(&open(&file("images"), &stem)?);
        let label = binary_plane(&open(&file("labels"), &stem)?, &stem, "label");
        let fov_path = file("fov");
        let fov = if !fov_path.exists() && opts.estimate_missing_fov {
            log::warn!("estimating FOV for `{stem}`");
            estimate_fov(&image)
        } else {
            binary_plane(&open(&fov_path, &stem)?, &stem, "fov")
        };
        let sample = Sample::new(image, label, fov).map_err(|e| Error::Load { stem: stem.clone(), reason: e.to_string() })?;
        out.push(sample);
    }
    Ok(out)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1, H, W]` or `[H, W]` map in `[0, 1]` as a greyscale PNG.
pub fn save_grey_png(t: &Tensor, path: &Path) -> Result<()> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([to_u8(t.data()[y as usize * w + x as usize])]));
    img.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Writes a sample as `images/`, `labels/`, `fov/` PNGs under `dir`, the
/// layout read by [`load_fundus_dir`].
pub fn save_sample_png(s: &Sample, dir: &Path, stem: &str) -> Result<()> {
    let (h, w) = (s.height(), s.width());
    let np = h * w;
    for sub in ["images", "labels", "fov"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let d = s.image.data();
    let rgb = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[np + i]), to_u8(d[2 * np + i])])
    });
    let path = dir.join("images").join(format!("{stem}.png"));
    rgb.save(&path).map_err(|source| Error::Image { path, source })?;
    save_grey_png(&s.label, &dir.join("labels").join(format!("{stem}.png")))?;
    save_grey_png(&s.fov, &dir.join("fov").join(format!("{stem}.png")))
}
