//! Fourier basis on an origin-centred filter mesh.
//!
//! A latent filter is a continuous function `psi(x) = sum_n w_n phi_n(x)`.
//! Sampling it on the `p x p` mesh gives an ordinary discrete kernel;
//! sampling it at `U^{-1} x` (rotation and scale, see [`transform_matrix`])
//! gives the transformed copies used by the equivariant layers.
//!
//! Conventions: mesh index `i` runs along rows (first spatial axis) and `j`
//! along columns. A point is `[row, col]` in abstract units with spacing `h`.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 2x2 matrix, row-major.
pub type Mat2 = [[f64; 2]; 2];

/// Width of the raised-cosine roll-off of the anti-aliasing mask, as a
/// fraction of the Nyquist frequency.
pub const MASK_ROLLOFF: f64 = 0.25;

/// Envelope width of the enhanced basis, relative to the half period `T/2`.
pub const ENVELOPE_REL_SIGMA: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct MeshGrid {
    pub p: usize,
    pub h: f64,
    /// Row-major `p x p` list of `[row, col]` coordinates.
    pub points: Vec<[f64; 2]>,
}

impl MeshGrid {
    pub fn point(&self, i: usize, j: usize) -> [f64; 2] {
        self.points[i * self.p + j]
    }
}

/// `x_ij = [(i - (p+1)/2) h, (j - (p+1)/2) h]` for `i, j = 1..=p`.
pub fn make_mesh(p: usize, h: f64) -> Result<MeshGrid> {
    if p == 0 {
        return Err(Error::invalid("mesh size p must be positive"));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("mesh spacing h must be positive, got {h}")));
    }
    let c = (p as f64 + 1.0) / 2.0;
    let mut points = Vec::with_capacity(p * p);
    for i in 1..=p {
        for j in 1..=p {
            points.push([(i as f64 - c) * h, (j as f64 - c) * h]);
        }
    }
    Ok(MeshGrid { p, h, points })
}

/// A rotation angle and a scale exponent; the scale factor is `mu^s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub theta: f64,
    pub s: f64,
    pub mu: f64,
}

impl TransformSpec {
    pub fn new(theta: f64, s: f64, mu: f64) -> Self {
        Self { theta, s, mu }
    }

    pub fn identity() -> Self {
        Self { theta: 0.0, s: 0.0, mu: 1.0 }
    }

    pub fn scale_factor(&self) -> f64 {
        self.mu.powf(self.s)
    }

    pub fn is_identity(&self) -> bool {
        self.theta.rem_euclid(2.0 * PI) == 0.0 && (self.s == 0.0 || self.mu == 1.0)
    }
}

/// `mu^s * [[cos t, sin t], [-sin t, cos t]]`.
pub fn transform_matrix(t: &TransformSpec) -> Mat2 {
    let f = t.scale_factor();
    let (sin, cos) = t.theta.sin_cos();
    [[f * cos, f * sin], [-f * sin, f * cos]]
}

pub fn inverse_transform_matrix(t: &TransformSpec) -> Mat2 {
    let f = 1.0 / t.scale_factor();
    let (sin, cos) = t.theta.sin_cos();
    // inverse of a scaled rotation is the transpose divided by the scale
    [[f * cos, -f * sin], [f * sin, f * cos]]
}

pub fn det2(m: &Mat2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

pub fn mat_vec(m: &Mat2, v: [f64; 2]) -> [f64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Harmonic {
    Cos,
    Sin,
}

/// One real plane wave `cos` or `sin` of `2 pi (k y_0 + l y_1) / T`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FourierTerm {
    pub k: i32,
    pub l: i32,
    pub harmonic: Harmonic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Off,
    Smooth,
}

/// Spatial envelope multiplied into every basis function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Envelope {
    None,
    /// `exp(-|y|^2 / (2 sigma^2))` in the filter's own frame, `sigma` in
    /// abstract units.
    Gaussian { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub p: usize,
    pub h: f64,
    pub terms: Vec<FourierTerm>,
    /// Nyquist frequency of the mesh, `pi p / T = pi / h`.
    pub cutoff_radius: f64,
    pub mask_mode: MaskMode,
    pub envelope: Envelope,
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn period(&self) -> f64 {
        self.p as f64 * self.h
    }

    pub fn angular_frequency(&self, term: &FourierTerm) -> [f64; 2] {
        let w = 2.0 * PI / self.period();
        [w * term.k as f64, w * term.l as f64]
    }

    /// Value of basis function `n` at `y` (no mask).
    pub fn value(&self, n: usize, y: [f64; 2]) -> f64 {
        let term = &self.terms[n];
        let om = self.angular_frequency(term);
        let phase = om[0] * y[0] + om[1] * y[1];
        let wave = match term.harmonic {
            Harmonic::Cos => phase.cos(),
            Harmonic::Sin => phase.sin(),
        };
        wave * self.envelope_at(y)
    }

    fn envelope_at(&self, y: [f64; 2]) -> f64 {
        match self.envelope {
            Envelope::None => 1.0,
            Envelope::Gaussian { sigma } => {
                (-(y[0] * y[0] + y[1] * y[1]) / (2.0 * sigma * sigma)).exp()
            }
        }
    }

    /// Anti-aliasing weight of term `n` when sampled through `U^{-1}`.
    ///
    /// The plane wave `phi(U^{-1} x)` has grid frequency `U^{-T} omega`; the
    /// weight is 1 while every axis component stays within the mesh Nyquist
    /// limit and rolls off with a raised cosine above it. Identity and
    /// quarter-turn transforms therefore leave every term untouched.
    pub fn mask_weight(&self, n: usize, t: &TransformSpec) -> f64 {
        if self.mask_mode == MaskMode::Off {
            return 1.0;
        }
        let inv = inverse_transform_matrix(t);
        let om = self.angular_frequency(&self.terms[n]);
        // U^{-T} omega
        let eff = [
            inv[0][0] * om[0] + inv[1][0] * om[1],
            inv[0][1] * om[0] + inv[1][1] * om[1],
        ];
        let r = eff[0].abs().max(eff[1].abs()) / self.cutoff_radius;
        raised_cosine(r)
    }
}

fn raised_cosine(r: f64) -> f64 {
    // slack absorbs rounding in the rotated frequency
    if r <= 1.0 + 1e-9 {
        1.0
    } else if r >= 1.0 + MASK_ROLLOFF {
        0.0
    } else {
        0.5 * (1.0 + (PI * (r - 1.0) / MASK_ROLLOFF).cos())
    }
}

/// Real Fourier basis of period `T = p h` with exactly `p^2` terms.
///
/// Frequencies cover a non-redundant half plane: `k = 0..=p/2`, with
/// `l = 0..=p/2` on the `k = 0` and `k = p/2` columns and
/// `l = -p/2+1..=p/2` in between. Interior frequencies contribute a cosine
/// and a sine. Self-conjugate frequencies contribute the single harmonic
/// that does not vanish on the half-integer mesh: cosine at `(0,0)` and
/// `(p/2,p/2)`, sine at `(p/2,0)` and `(0,p/2)`.
pub fn make_fourier_basis(p: usize, h: f64) -> Result<BasisSet> {
    build_basis(p, h, Envelope::None)
}

/// [`make_fourier_basis`] with a Gaussian envelope of width
/// [`ENVELOPE_REL_SIGMA`]` * T / 2`. Still exact on the canonical mesh (the
/// envelope is nonzero there) while decaying inside the filter footprint, so
/// rotated and rescaled copies are not truncated by the kernel window.
pub fn make_enhanced_basis(p: usize, h: f64) -> Result<BasisSet> {
    let sigma = ENVELOPE_REL_SIGMA * p as f64 * h / 2.0;
    build_basis(p, h, Envelope::Gaussian { sigma })
}

fn build_basis(p: usize, h: f64, envelope: Envelope) -> Result<BasisSet> {
    if p == 0 || !(h > 0.0) {
        return Err(Error::invalid(format!("basis needs p >= 1 and h > 0, got p={p}, h={h}")));
    }
    if p % 2 == 1 {
        return Err(Error::Unsupported(format!(
            "odd filter size p={p}; only even p is supported"
        )));
    }
    let half = (p / 2) as i32;
    let mut terms = Vec::with_capacity(p * p);
    for k in 0..=half {
        let edge = k == 0 || k == half;
        let ls: Vec<i32> = if edge { (0..=half).collect() } else { (-half + 1..=half).collect() };
        for l in ls {
            let self_conjugate = edge && (l == 0 || l == half);
            if self_conjugate {
                let harmonic = if (k == half) == (l == half) { Harmonic::Cos } else { Harmonic::Sin };
                terms.push(FourierTerm { k, l, harmonic });
            } else {
                terms.push(FourierTerm { k, l, harmonic: Harmonic::Cos });
                terms.push(FourierTerm { k, l, harmonic: Harmonic::Sin });
            }
        }
    }
    debug_assert_eq!(terms.len(), p * p);
    if let Envelope::Gaussian { sigma } = envelope {
        if !(sigma > 0.0) {
            return Err(Error::invalid("envelope sigma must be positive"));
        }
    }
    Ok(BasisSet {
        p,
        h,
        terms,
        cutoff_radius: PI / h,
        mask_mode: MaskMode::Smooth,
        envelope,
    })
}

/// `N x |pts|` matrix of basis values at `pts`.
pub fn eval_basis(b: &BasisSet, pts: &[[f64; 2]], masked: bool) -> DMatrix<f64> {
    eval_basis_warped(b, pts, &TransformSpec::identity(), masked)
}

/// `N x |pts|` matrix with entry `(n, q) = m_n phi_n(U^{-1} pts_q)`, where
/// `m_n` is the anti-aliasing weight when `masked` and 1 otherwise.
pub fn eval_basis_warped(
    b: &BasisSet,
    pts: &[[f64; 2]],
    t: &TransformSpec,
    masked: bool,
) -> DMatrix<f64> {
    let inv = inverse_transform_matrix(t);
    let pulled: Vec<[f64; 2]> = pts.iter().map(|&x| mat_vec(&inv, x)).collect();
    let mut m = DMatrix::zeros(b.len(), pts.len());
    for n in 0..b.len() {
        let weight = if masked { b.mask_weight(n, t) } else { 1.0 };
        if weight == 0.0 {
            continue;
        }
        for (q, &y) in pulled.iter().enumerate() {
            m[(n, q)] = weight * b.value(n, y);
        }
    }
    m
}

/// Learnable coefficients of one latent filter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFilter<'b> {
    pub coefficients: Vec<f64>,
    pub basis: &'b BasisSet,
}

impl<'b> ParamFilter<'b> {
    pub fn new(basis: &'b BasisSet, coefficients: Vec<f64>) -> Result<Self> {
        if coefficients.len() != basis.len() {
            return Err(Error::invalid(format!(
                "expected {} coefficients, got {}",
                basis.len(),
                coefficients.len()
            )));
        }
        Ok(Self { coefficients, basis })
    }

    pub fn zeros(basis: &'b BasisSet) -> Self {
        Self { coefficients: vec![0.0; basis.len()], basis }
    }

    /// `psi(y)` without masking.
    pub fn eval(&self, y: [f64; 2]) -> f64 {
        self.coefficients
            .iter()
            .enumerate()
            .map(|(n, w)| w * self.basis.value(n, y))
            .sum()
    }
}

/// Square discrete kernel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub data: Vec<f64>,
}

impl Kernel {
    pub fn zeros(size: usize) -> Self {
        Self { size, data: vec![0.0; size * size] }
    }

    pub fn from_vec(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::shape(format!(
                "kernel of side {size} needs {} values, got {}",
                size * size,
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.size + j]
    }

    /// Array quarter-turn matching a `theta = pi/2` transform on the mesh:
    /// `out[i][j] = in[n-1-j][i]`.
    pub fn quarter_turn(&self) -> Kernel {
        let n = self.size;
        let mut out = Kernel::zeros(n);
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = self.data[(n - 1 - j) * n + i];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Kernel) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Samples `psi(U^{-1} x)` on an `out_size` mesh with the basis spacing.
///
/// Masking is applied whenever `t` is not the identity; for identity and
/// quarter-turns the mask weights are all 1.
pub fn discretize(f: &ParamFilter<'_>, t: &TransformSpec, out_size: usize) -> Result<Kernel> {
    if out_size == 0 {
        return Err(Error::invalid("kernel size must be at least 1"));
    }
    let mesh = make_mesh(out_size, f.basis.h)?;
    let phi = eval_basis_warped(f.basis, &mesh.points, t, !t.is_identity());
    let mut data = vec![0.0; out_size * out_size];
    for (n, &w) in f.coefficients.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        for (q, d) in data.iter_mut().enumerate() {
            *d += w * phi[(n, q)];
        }
    }
    Ok(Kernel { size: out_size, data })
}

/// Solves for coefficients whose canonical discretization equals `target`.
pub fn fit_coefficients<'b>(target: &Kernel, b: &'b BasisSet) -> Result<ParamFilter<'b>> {
    if target.size != b.p {
        return Err(Error::invalid(format!(
            "target kernel side {} does not match basis p={}",
            target.size, b.p
        )));
    }
    let mesh = make_mesh(b.p, b.h)?;
    // kernel = A^T w
    let a_t = eval_basis(b, &mesh.points, false).transpose();
    let lu = a_t.lu();
    let rhs = nalgebra::DVector::from_column_slice(&target.data);
    let w = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Numerical("canonical basis matrix is singular".into()))?;
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite coefficients from basis solve".into()));
    }
    ParamFilter::new(b, w.iter().copied().collect())
}

/// Max-abs difference between `target` and the canonical discretization
/// of its fitted coefficients.
pub fn round_trip_error(target: &Kernel, b: &BasisSet) -> Result<f64> {
    let f = fit_coefficients(target, b)?;
    Ok(discretize(&f, &TransformSpec::identity(), b.p)?.max_abs_diff(target))
}

/// Formats like C's `%.12e` (`-1.250000000000e+00`).
pub fn format_c_exp(x: f64) -> String {
    let s = format!("{x:.12e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

/// Plain-text kernel dump: one row per line, `%.12e` values separated by
/// single spaces.
pub fn write_kernel_text<W: Write>(k: &Kernel, mut w: W) -> std::io::Result<()> {
    let mut line = String::new();
    for i in 0..k.size {
        line.clear();
        for j in 0..k.size {
            if j > 0 {
                line.push(' ');
            }
            let _ = write!(line, "{}", format_c_exp(k.at(i, j)));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_kernel_text<R: Read>(r: R) -> Result<Kernel> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| Error::invalid(format!("bad value `{t}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::shape("kernel text is not square"));
    }
    Kernel::from_vec(n, rows.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_kernel(rng: &mut ChaCha8Rng, n: usize) -> Kernel {
        Kernel::from_vec(n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn mesh_corner_and_degenerate_cases() {
        let m = make_mesh(6, 0.5).unwrap();
        assert_eq!(m.point(0, 0), [-1.25, -1.25]);
        assert_eq!(m.point(5, 0), [1.25, -1.25]);
        assert_eq!(make_mesh(1, 1.0).unwrap().points, vec![[0.0, 0.0]]);
        let m3 = make_mesh(3, 1.0).unwrap();
        let coords: Vec<f64> = (0..3).map(|i| m3.point(i, 0)[0]).collect();
        assert_eq!(coords, vec![-1.0, 0.0, 1.0]);
        let sum = m.points.iter().fold([0.0, 0.0], |acc, p| [acc[0] + p[0], acc[1] + p[1]]);
        assert_eq!(sum, [0.0, 0.0]);
    }

    #[test]
    fn mesh_rejects_bad_arguments() {
        assert!(matches!(make_mesh(0, 1.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_mesh(3, 0.0), Err(Error::InvalidArgument(_))));
        assert!(matches!(make_mesh(3, -1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn transform_matrix_examples() {
        let id = transform_matrix(&TransformSpec::new(0.0, 0.0, 1.25));
        assert_eq!(id, [[1.0, 0.0], [0.0, 1.0]]);
        let q = transform_matrix(&TransformSpec::new(PI / 2.0, 0.0, 1.25));
        assert!((q[0][0]).abs() < 1e-15 && (q[0][1] - 1.0).abs() < 1e-15);
        assert!((q[1][0] + 1.0).abs() < 1e-15 && q[1][1].abs() < 1e-15);
        let s = transform_matrix(&TransformSpec::new(0.0, 1.0, 1.25));
        assert_eq!(s, [[1.25, 0.0], [0.0, 1.25]]);
    }

    #[test]
    fn determinant_is_mu_to_the_2s() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = TransformSpec::new(rng.gen_range(-7.0..7.0), rng.gen_range(-3.0..3.0), 1.25);
            let d = det2(&transform_matrix(&t));
            assert!((d - 1.25f64.powf(2.0 * t.s)).abs() < 1e-12);
        }
    }

    #[test]
    fn rotation_composition_at_coordinate_level() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let (t1, t2) = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
            let x = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
            let a = mat_vec(&inverse_transform_matrix(&TransformSpec::new(t1 + t2, 0.0, 1.25)), x);
            let composed = mat_mul(
                &inverse_transform_matrix(&TransformSpec::new(t2, 0.0, 1.25)),
                &inverse_transform_matrix(&TransformSpec::new(t1, 0.0, 1.25)),
            );
            let b = mat_vec(&composed, x);
            assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn basis_sizes_and_rank() {
        let b = make_fourier_basis(6, 0.5).unwrap();
        assert_eq!(b.len(), 36);
        assert_eq!(b.terms[0], FourierTerm { k: 0, l: 0, harmonic: Harmonic::Cos });
        let b2 = make_fourier_basis(2, 1.0).unwrap();
        assert_eq!(b2.len(), 4);
        let mesh = make_mesh(2, 1.0).unwrap();
        assert_eq!(eval_basis(&b2, &mesh.points, false).rank(1e-10), 4);
        let mesh6 = make_mesh(6, 0.5).unwrap();
        assert_eq!(eval_basis(&b, &mesh6.points, false).rank(1e-10), 36);
        let e = make_enhanced_basis(6, 0.5).unwrap();
        assert_eq!(eval_basis(&e, &mesh6.points, false).rank(1e-10), 36);
    }

    #[test]
    fn odd_p_is_rejected() {
        assert!(matches!(make_fourier_basis(5, 0.5), Err(Error::Unsupported(_))));
    }

    #[test]
    fn constant_and_sine_values() {
        let b = make_fourier_basis(6, 0.5).unwrap();
        let pts = [[0.3, -1.7], [0.0, 0.0], [12.0, 4.5]];
        let m = eval_basis(&b, &pts, false);
        for q in 0..pts.len() {
            assert_eq!(m[(0, q)], 1.0);
        }
        for (n, term) in b.terms.iter().enumerate() {
            if term.harmonic == Harmonic::Sin {
                assert_eq!(m[(n, 1)], 0.0);
            }
        }
    }

    #[test]
    fn unmasked_eval_matches_masked_at_identity() {
        let b = make_fourier_basis(6, 0.5).unwrap();
        let mesh = make_mesh(6, 0.5).unwrap();
        assert_eq!(eval_basis(&b, &mesh.points, true), eval_basis(&b, &mesh.points, false));
    }

    #[test]
    fn round_trip_random_kernels() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for basis in [make_fourier_basis(6, 0.5).unwrap(), make_enhanced_basis(6, 0.5).unwrap()] {
            for _ in 0..20 {
                let k = random_kernel(&mut rng, 6);
                let f = fit_coefficients(&k, &basis).unwrap();
                let back = discretize(&f, &TransformSpec::identity(), 6).unwrap();
                assert!(back.max_abs_diff(&k) <= 1e-10);
            }
        }
    }

    #[test]
    fn zero_and_constant_targets() {
        let b = make_fourier_basis(6, 0.5).unwrap();
        let z = fit_coefficients(&Kernel::zeros(6), &b).unwrap();
        assert!(z.coefficients.iter().all(|&w| w == 0.0));
        let c = fit_coefficients(&Kernel::from_vec(6, vec![2.5; 36]).unwrap(), &b).unwrap();
        assert!((c.coefficients[0] - 2.5).abs() < 1e-12);
        assert!(c.coefficients[1..].iter().all(|w| w.abs() <= 1e-12));
        let zk = discretize(&ParamFilter::zeros(&b), &TransformSpec::new(0.3, 1.0, 1.25), 8).unwrap();
        assert!(zk.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fit_rejects_wrong_size() {
        let b = make_fourier_basis(6, 0.5).unwrap();
        assert!(fit_coefficients(&Kernel::zeros(4), &b).is_err());
    }

    #[test]
    fn quarter_turns_are_exact_array_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for basis in [make_fourier_basis(6, 0.5).unwrap(), make_enhanced_basis(6, 0.5).unwrap()] {
            let coeffs = (0..36).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = ParamFilter::new(&basis, coeffs).unwrap();
            let base = discretize(&f, &TransformSpec::identity(), 6).unwrap();
            let mut expect = base.clone();
            for q in 1..4 {
                expect = expect.quarter_turn();
                let t = TransformSpec::new(q as f64 * PI / 2.0, 0.0, 1.25);
                let got = discretize(&f, &t, 6).unwrap();
                assert!(got.max_abs_diff(&expect) <= 1e-6, "quarter turn {q}");
            }
        }
    }

    #[test]
    fn mask_only_acts_off_lattice() {
        let b = make_fourier_basis(6, 0.5).unwrap();
        let diag = TransformSpec::new(PI / 4.0, 0.0, 1.25);
        let weights: Vec<f64> = (0..b.len()).map(|n| b.mask_weight(n, &diag)).collect();
        assert!(weights.iter().any(|&w| w < 1.0));
        assert_eq!(weights[0], 1.0);
        // enlarging lowers every grid frequency
        let up = TransformSpec::new(0.0, 1.0, 1.25);
        assert!((0..b.len()).all(|n| b.mask_weight(n, &up) == 1.0));
    }

    #[test]
    fn c_style_exponent_format() {
        assert_eq!(format_c_exp(-1.25), "-1.250000000000e+00");
        assert_eq!(format_c_exp(0.0), "0.000000000000e+00");
        assert_eq!(format_c_exp(1.5e-7), "1.500000000000e-07");
        assert_eq!(format_c_exp(6.02e123), "6.020000000000e+123");
    }

    #[test]
    fn kernel_text_round_trip() {
        let k = Kernel::from_vec(2, vec![1.0, -2.5, 3.25e-9, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_kernel_text(&k, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), "1.000000000000e+00 -2.500000000000e+00");
        assert_eq!(read_kernel_text(&buf[..]).unwrap(), k);
    }
}
