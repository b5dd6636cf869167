//! Weight-shared filter banks over a discrete rotation-scale group.
//!
//! A bank stores one coefficient vector per latent pattern and expands it
//! into every rotated and rescaled copy needed by a convolution. Expansion
//! is linear in the coefficients, so each output scale is exposed as a
//! [`LinearMap`] that the tape can differentiate through.
//!
//! Expanded kernels are laid out for a plain `conv2d` over feature maps
//! stored as `[batch, scale, pattern, rot, H, W]`:
//!
//! * lifting, output scale `b`: `[(out, rot), in, k_b, k_b]`
//! * group, output scale `b`: `[(out, rot), (scale_off, in, in_rot), k_b, k_b]`
//!   where the input is the scale slice `b..n_scale`, so `scale_off = b' - b`
//!   and offsets past the last scale are simply absent (truncation).

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::conv::gemm;
use crate::autodiff::{LinearMap, Tensor};
use crate::basis::{eval_basis, eval_basis_warped, make_mesh, BasisSet, Kernel, TransformSpec};
use crate::error::{Error, Result};

/// Discrete rotation-scale group and the per-scale kernel sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub n_rot: usize,
    pub n_scale: usize,
    pub mu: f64,
    pub base_p: usize,
    pub h: f64,
    pub kernel_sizes: Vec<usize>,
}

/// `2 * ceil(p * mu^s / 2)`, the smallest even size holding the scaled mesh.
pub fn kernel_size_for(p: usize, mu: f64, s: usize) -> usize {
    let half = p as f64 * mu.powi(s as i32) / 2.0;
    // tolerate rounding when p * mu^s is an exact even integer
    2 * (half - 1e-9).ceil().max(1.0) as usize
}

impl GroupSpec {
    pub fn new(n_rot: usize, n_scale: usize, mu: f64, base_p: usize, h: f64) -> Result<Self> {
        if n_rot == 0 || n_scale == 0 {
            return Err(Error::invalid("group needs at least one rotation and one scale"));
        }
        if !(mu >= 1.0) || !mu.is_finite() {
            return Err(Error::invalid(format!("scale step mu must be >= 1, got {mu}")));
        }
        if base_p == 0 || !(h > 0.0) {
            return Err(Error::invalid(format!("invalid filter mesh p={base_p}, h={h}")));
        }
        let kernel_sizes = (0..n_scale).map(|s| kernel_size_for(base_p, mu, s)).collect();
        Ok(Self { n_rot, n_scale, mu, base_p, h, kernel_sizes })
    }

    /// Eight quarter-pi rotations, four scales with step 1.25, `p = 6`, `h = 0.5`.
    pub fn full() -> Self {
        Self::new(8, 4, 1.25, 6, 0.5).expect("valid constants")
    }

    pub fn order(&self) -> usize {
        self.n_rot * self.n_scale
    }

    pub fn angle(&self, a: usize) -> f64 {
        a as f64 * 2.0 * PI / self.n_rot as f64
    }

    pub fn transform(&self, a: usize, b: usize) -> TransformSpec {
        TransformSpec::new(self.angle(a), b as f64, self.mu)
    }

    /// `mu^{-2b}`.
    pub fn scale_weight(&self, b: usize) -> f64 {
        self.mu.powi(-2 * b as i32)
    }

    pub fn max_kernel_size(&self) -> usize {
        self.kernel_sizes.iter().copied().max().unwrap_or(0)
    }
}

/// Precomputed sampling matrices `Phi_{a,b}` (`N x k_b^2`, scale weight
/// included) shared by every bank on the same group and basis.
#[derive(Debug)]
pub struct BankPlan {
    group: GroupSpec,
    basis: BasisSet,
    phi: Vec<Vec<f64>>,
    canonical_inverse: Vec<f64>,
    /// Squared Frobenius norm of the canonical sampling matrix.
    canonical_energy: f64,
}

impl BankPlan {
    pub fn new(group: GroupSpec, basis: BasisSet) -> Result<Self> {
        if basis.p != group.base_p || basis.h != group.h {
            return Err(Error::invalid(format!(
                "basis (p={}, h={}) does not match group (p={}, h={})",
                basis.p, basis.h, group.base_p, group.h
            )));
        }
        let mut phi = Vec::with_capacity(group.order());
        for a in 0..group.n_rot {
            for b in 0..group.n_scale {
                let t = group.transform(a, b);
                let mesh = make_mesh(group.kernel_sizes[b], group.h)?;
                let m = eval_basis_warped(&basis, &mesh.points, &t, !t.is_identity());
                let w = group.scale_weight(b);
                // nalgebra is column-major; store row-major N x k^2
                let mut rows = vec![0.0; m.nrows() * m.ncols()];
                for n in 0..m.nrows() {
                    for q in 0..m.ncols() {
                        rows[n * m.ncols() + q] = w * m[(n, q)];
                    }
                }
                phi.push(rows);
            }
        }
        let mesh = make_mesh(basis.p, basis.h)?;
        let a_t = eval_basis(&basis, &mesh.points, false).transpose();
        let canonical_energy = a_t.iter().map(|v| v * v).sum();
        let inv = a_t
            .try_inverse()
            .ok_or_else(|| Error::Numerical("canonical basis matrix is singular".into()))?;
        let n = basis.len();
        let mut canonical_inverse = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                canonical_inverse[i * n + j] = inv[(i, j)];
            }
        }
        Ok(Self { group, basis, phi, canonical_inverse, canonical_energy })
    }

    pub fn group(&self) -> &GroupSpec {
        &self.group
    }

    pub fn basis(&self) -> &BasisSet {
        &self.basis
    }

    pub fn n_basis(&self) -> usize {
        self.basis.len()
    }

    /// Row-major `N x k_b^2` sampling matrix for rotation `a`, scale `b`.
    pub fn phi(&self, a: usize, b: usize) -> &[f64] {
        &self.phi[a * self.group.n_scale + b]
    }

    /// Coefficients whose canonical discretization is `kernel` (row-major
    /// `p x p`).
    pub fn fit(&self, kernel: &[f64]) -> Vec<f64> {
        let n = self.n_basis();
        assert_eq!(kernel.len(), n);
        (0..n)
            .map(|i| (0..n).map(|j| self.canonical_inverse[i * n + j] * kernel[j]).sum())
            .collect()
    }

    /// Coefficient standard deviation for which i.i.d. coefficients give a
    /// canonical kernel of expected energy `energy` (sum of squared pixels).
    pub fn coefficient_std(&self, energy: f64) -> f64 {
        (energy / self.canonical_energy).sqrt()
    }

    /// `count` coefficient vectors drawn i.i.d. so that each canonical
    /// kernel has expected energy `energy`.
    pub fn random_coefficients<R: Rng>(&self, count: usize, energy: f64, rng: &mut R) -> Vec<f64> {
        let normal = Normal::new(0.0, self.coefficient_std(energy)).expect("finite std");
        (0..count * self.n_basis()).map(|_| normal.sample(rng)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    Lifting,
    Group,
}

/// Learnable reals of one layer with weight sharing.
pub fn count_shared_params(
    c_in_patterns: usize,
    c_out_patterns: usize,
    g: &GroupSpec,
    kind: LayerKind,
) -> usize {
    let n = g.base_p * g.base_p;
    match kind {
        LayerKind::Lifting => c_out_patterns * c_in_patterns * n,
        LayerKind::Group => c_out_patterns * c_in_patterns * g.order() * n,
    }
}

/// Learnable reals of the same layer with one independent filter per
/// output group element.
pub fn count_unshared_params(
    c_in_patterns: usize,
    c_out_patterns: usize,
    g: &GroupSpec,
    kind: LayerKind,
) -> usize {
    count_shared_params(c_in_patterns, c_out_patterns, g, kind) * g.order()
}

/// Bank for the first layer: image channels to group feature patterns.
#[derive(Debug, Clone)]
pub struct LiftingBank {
    plan: Rc<BankPlan>,
    pub c_out: usize,
    pub c_in: usize,
    /// `[c_out, c_in, N]`.
    pub coefficients: Tensor,
}

/// Bank between group feature maps, indexed by relative rotation and
/// relative scale offset.
#[derive(Debug, Clone)]
pub struct GroupBank {
    plan: Rc<BankPlan>,
    pub c_out: usize,
    pub c_in: usize,
    /// `[c_out, c_in, n_rot, n_scale, N]`.
    pub coefficients: Tensor,
}

fn check_coefficients(t: &Tensor, expected: &[usize]) -> Result<()> {
    if t.shape() != expected {
        return Err(Error::invalid(format!(
            "coefficient tensor {:?}, expected {expected:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl LiftingBank {
    pub fn new(plan: Rc<BankPlan>, c_out: usize, c_in: usize, coefficients: Tensor) -> Result<Self> {
        if c_out == 0 || c_in == 0 {
            return Err(Error::invalid("lifting bank needs nonzero widths"));
        }
        check_coefficients(&coefficients, &[c_out, c_in, plan.n_basis()])?;
        Ok(Self { plan, c_out, c_in, coefficients })
    }

    /// Random coefficients with He-style canonical kernel energy `2 / c_in`.
    pub fn random<R: Rng>(plan: Rc<BankPlan>, c_out: usize, c_in: usize, rng: &mut R) -> Result<Self> {
        let n = plan.n_basis();
        let data = plan.random_coefficients(c_out * c_in, 2.0 / c_in as f64, rng);
        Self::new(plan, c_out, c_in, Tensor::new(vec![c_out, c_in, n], data)?)
    }

    pub fn plan(&self) -> &Rc<BankPlan> {
        &self.plan
    }

    pub fn group(&self) -> &GroupSpec {
        self.plan.group()
    }

    pub fn param_count(&self) -> usize {
        self.coefficients.len()
    }

    pub fn expansion(&self, b: usize) -> Rc<dyn LinearMap> {
        lifting_expansion(&self.plan, self.c_out, self.c_in, b)
    }

    /// Conv kernel `[c_out * n_rot, c_in, k_b, k_b]` for output scale `b`.
    pub fn expanded(&self, b: usize) -> Tensor {
        apply_map(self.expansion(b).as_ref(), self.coefficients.data())
    }

    pub fn expanded_kernel(&self, o: usize, a: usize, b: usize, c: usize) -> Kernel {
        let k = self.group().kernel_sizes[b];
        let full = self.expanded(b);
        let start = ((o * self.group().n_rot + a) * self.c_in + c) * k * k;
        Kernel::from_vec(k, full.data()[start..start + k * k].to_vec()).expect("sized")
    }
}

impl GroupBank {
    pub fn new(plan: Rc<BankPlan>, c_out: usize, c_in: usize, coefficients: Tensor) -> Result<Self> {
        if c_out == 0 || c_in == 0 {
            return Err(Error::invalid("group bank needs nonzero widths"));
        }
        let g = plan.group();
        check_coefficients(&coefficients, &[c_out, c_in, g.n_rot, g.n_scale, plan.n_basis()])?;
        Ok(Self { plan, c_out, c_in, coefficients })
    }

    pub fn random<R: Rng>(plan: Rc<BankPlan>, c_out: usize, c_in: usize, rng: &mut R) -> Result<Self> {
        let g = plan.group().clone();
        let n = plan.n_basis();
        let energy = 2.0 / (c_in * g.order()) as f64;
        let data = plan.random_coefficients(c_out * c_in * g.order(), energy, rng);
        let t = Tensor::new(vec![c_out, c_in, g.n_rot, g.n_scale, n], data)?;
        Self::new(plan, c_out, c_in, t)
    }

    pub fn plan(&self) -> &Rc<BankPlan> {
        &self.plan
    }

    pub fn group(&self) -> &GroupSpec {
        self.plan.group()
    }

    pub fn param_count(&self) -> usize {
        self.coefficients.len()
    }

    pub fn expansion(&self, b: usize) -> Rc<dyn LinearMap> {
        group_expansion(&self.plan, self.c_out, self.c_in, b)
    }

    /// Conv kernel `[c_out * n_rot, (n_scale - b) * c_in * n_rot, k_b, k_b]`.
    pub fn expanded(&self, b: usize) -> Tensor {
        apply_map(self.expansion(b).as_ref(), self.coefficients.data())
    }

    /// Kernel linking input `(c, a2, b2)` to output `(o, a, b)`; zero when
    /// `b2 < b` (outside the truncated scale range).
    pub fn expanded_kernel(&self, o: usize, a: usize, b: usize, c: usize, a2: usize, b2: usize) -> Kernel {
        let g = self.group();
        let k = g.kernel_sizes[b];
        if b2 < b {
            return Kernel::zeros(k);
        }
        let full = self.expanded(b);
        let cols = (g.n_scale - b) * self.c_in * g.n_rot;
        let col = ((b2 - b) * self.c_in + c) * g.n_rot + a2;
        let start = ((o * g.n_rot + a) * cols + col) * k * k;
        Kernel::from_vec(k, full.data()[start..start + k * k].to_vec()).expect("sized")
    }
}

/// Coefficients `[c_out, c_in, N]` to the lifting kernel of output scale `b`.
pub fn lifting_expansion(plan: &Rc<BankPlan>, c_out: usize, c_in: usize, b: usize) -> Rc<dyn LinearMap> {
    assert!(b < plan.group().n_scale, "scale index {b} out of range");
    Rc::new(LiftingExpansion { plan: plan.clone(), c_out, c_in, b })
}

/// Coefficients `[c_out, c_in, n_rot, n_scale, N]` to the group kernel of
/// output scale `b`.
pub fn group_expansion(plan: &Rc<BankPlan>, c_out: usize, c_in: usize, b: usize) -> Rc<dyn LinearMap> {
    assert!(b < plan.group().n_scale, "scale index {b} out of range");
    Rc::new(GroupExpansion { plan: plan.clone(), c_out, c_in, b })
}

fn apply_map(map: &dyn LinearMap, input: &[f64]) -> Tensor {
    let shape = map.output_shape();
    let mut out = vec![0.0; shape.iter().product()];
    map.apply(input, &mut out);
    Tensor::new(shape, out).expect("map output shape")
}

struct LiftingExpansion {
    plan: Rc<BankPlan>,
    c_out: usize,
    c_in: usize,
    b: usize,
}

impl LinearMap for LiftingExpansion {
    fn input_len(&self) -> usize {
        self.c_out * self.c_in * self.plan.n_basis()
    }

    fn output_shape(&self) -> Vec<usize> {
        let g = self.plan.group();
        let k = g.kernel_sizes[self.b];
        vec![self.c_out * g.n_rot, self.c_in, k, k]
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        let g = self.plan.group();
        let n = self.plan.n_basis();
        let k2 = g.kernel_sizes[self.b].pow(2);
        let block = self.c_in * k2;
        for o in 0..self.c_out {
            let w = &input[o * self.c_in * n..(o + 1) * self.c_in * n];
            for a in 0..g.n_rot {
                let dst = &mut out[(o * g.n_rot + a) * block..][..block];
                let phi = self.plan.phi(a, self.b);
                gemm(self.c_in, n, k2, w, (n as isize, 1), phi, (k2 as isize, 1), 0.0, dst);
            }
        }
    }

    fn adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let g = self.plan.group();
        let n = self.plan.n_basis();
        let k2 = g.kernel_sizes[self.b].pow(2);
        let block = self.c_in * k2;
        for o in 0..self.c_out {
            let gw = &mut grad_in[o * self.c_in * n..(o + 1) * self.c_in * n];
            for a in 0..g.n_rot {
                let go = &grad_out[(o * g.n_rot + a) * block..][..block];
                let phi = self.plan.phi(a, self.b);
                gemm(self.c_in, k2, n, go, (k2 as isize, 1), phi, (1, k2 as isize), 1.0, gw);
            }
        }
    }
}

struct GroupExpansion {
    plan: Rc<BankPlan>,
    c_out: usize,
    c_in: usize,
    b: usize,
}

impl GroupExpansion {
    /// Offset of coefficient vector `[o, c, r, j]` in the input.
    fn coef_offset(&self, o: usize, c: usize, r: usize, j: usize) -> usize {
        let g = self.plan.group();
        (((o * self.c_in + c) * g.n_rot + r) * g.n_scale + j) * self.plan.n_basis()
    }

    fn rows(&self) -> usize {
        let g = self.plan.group();
        (g.n_scale - self.b) * self.c_in * g.n_rot
    }
}

impl LinearMap for GroupExpansion {
    fn input_len(&self) -> usize {
        let g = self.plan.group();
        self.c_out * self.c_in * g.order() * self.plan.n_basis()
    }

    fn output_shape(&self) -> Vec<usize> {
        let g = self.plan.group();
        let k = g.kernel_sizes[self.b];
        vec![self.c_out * g.n_rot, self.rows(), k, k]
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        let g = self.plan.group();
        let n = self.plan.n_basis();
        let k2 = g.kernel_sizes[self.b].pow(2);
        let rows = self.rows();
        let mut gathered = vec![0.0; rows * n];
        for o in 0..self.c_out {
            for a in 0..g.n_rot {
                let mut row = 0;
                for j in 0..g.n_scale - self.b {
                    for c in 0..self.c_in {
                        for a2 in 0..g.n_rot {
                            let r = (a2 + g.n_rot - a) % g.n_rot;
                            let src = self.coef_offset(o, c, r, j);
                            gathered[row * n..(row + 1) * n].copy_from_slice(&input[src..src + n]);
                            row += 1;
                        }
                    }
                }
                let dst = &mut out[(o * g.n_rot + a) * rows * k2..][..rows * k2];
                let phi = self.plan.phi(a, self.b);
                gemm(rows, n, k2, &gathered, (n as isize, 1), phi, (k2 as isize, 1), 0.0, dst);
            }
        }
    }

    fn adjoint(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        let g = self.plan.group();
        let n = self.plan.n_basis();
        let k2 = g.kernel_sizes[self.b].pow(2);
        let rows = self.rows();
        let mut scattered = vec![0.0; rows * n];
        for o in 0..self.c_out {
            for a in 0..g.n_rot {
                let go = &grad_out[(o * g.n_rot + a) * rows * k2..][..rows * k2];
                let phi = self.plan.phi(a, self.b);
                gemm(rows, k2, n, go, (k2 as isize, 1), phi, (1, k2 as isize), 0.0, &mut scattered);
                let mut row = 0;
                for j in 0..g.n_scale - self.b {
                    for c in 0..self.c_in {
                        for a2 in 0..g.n_rot {
                            let r = (a2 + g.n_rot - a) % g.n_rot;
                            let dst = self.coef_offset(o, c, r, j);
                            for (d, s) in grad_in[dst..dst + n].iter_mut().zip(&scattered[row * n..]) {
                                *d += s;
                            }
                            row += 1;
                        }
                    }
                }
            }
        }
    }
}

const MAGIC: &[u8; 4] = b"FRSB";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordKind {
    Lifting = 0,
    Group = 1,
    /// Plain tensor (vanilla kernels, biases, norm parameters).
    Dense = 2,
}

/// One serialized parameter tensor with the group it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct BankRecord {
    pub kind: RecordKind,
    pub n_rot: u32,
    pub n_scale: u32,
    pub mu: f64,
    pub base_p: u32,
    pub h: f64,
    pub data: Tensor,
}

impl BankRecord {
    pub fn lifting(bank: &LiftingBank) -> Self {
        Self::with_group(RecordKind::Lifting, bank.group(), bank.coefficients.clone())
    }

    pub fn group(bank: &GroupBank) -> Self {
        Self::with_group(RecordKind::Group, bank.group(), bank.coefficients.clone())
    }

    pub fn dense(t: Tensor) -> Self {
        Self { kind: RecordKind::Dense, n_rot: 1, n_scale: 1, mu: 1.0, base_p: 0, h: 0.0, data: t }
    }

    fn with_group(kind: RecordKind, g: &GroupSpec, data: Tensor) -> Self {
        Self {
            kind,
            n_rot: g.n_rot as u32,
            n_scale: g.n_scale as u32,
            mu: g.mu,
            base_p: g.base_p as u32,
            h: g.h,
            data,
        }
    }

    /// Little-endian encoding: magic, version, kind, n_rot, n_scale, mu,
    /// base_p, h, ndim, dims, then the values in row-major order.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(48 + 8 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.kind as u32, self.n_rot, self.n_scale] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.mu.to_le_bytes());
        out.extend_from_slice(&self.base_p.to_le_bytes());
        out.extend_from_slice(&self.h.to_le_bytes());
        out.extend_from_slice(&(self.data.ndim() as u32).to_le_bytes());
        for &d in self.data.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in self.data.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.encode())?;
        Ok(())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let rec = Self::read_from(&mut r)?;
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes after record", r.len())));
        }
        Ok(rec)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = match read_u32(r)? {
            0 => RecordKind::Lifting,
            1 => RecordKind::Group,
            2 => RecordKind::Dense,
            k => return Err(Error::Checkpoint(format!("unknown record kind {k}"))),
        };
        let n_rot = read_u32(r)?;
        let n_scale = read_u32(r)?;
        let mu = read_f64(r)?;
        let base_p = read_u32(r)?;
        let h = read_f64(r)?;
        let ndim = read_u32(r)? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        read_exact(r, &mut raw)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Self { kind, n_rot, n_scale, mu, base_p, h, data: Tensor::new(shape, data)? })
    }

    /// Checks that the record was produced for `g` (dense records match any
    /// group).
    pub fn check_group(&self, g: &GroupSpec) -> Result<()> {
        if self.kind == RecordKind::Dense {
            return Ok(());
        }
        let same = self.n_rot as usize == g.n_rot
            && self.n_scale as usize == g.n_scale
            && self.mu == g.mu
            && self.base_p as usize == g.base_p
            && self.h == g.h;
        if !same {
            return Err(Error::Checkpoint(format!(
                "record group ({}x{}, mu={}, p={}, h={}) differs from model group",
                self.n_rot, self.n_scale, self.mu, self.base_p, self.h
            )));
        }
        Ok(())
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| Error::Checkpoint(format!("truncated record: {e}")))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::{discretize, make_enhanced_basis, make_fourier_basis, ParamFilter};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plan(g: GroupSpec) -> Rc<BankPlan> {
        let basis = make_enhanced_basis(g.base_p, g.h).unwrap();
        Rc::new(BankPlan::new(g, basis).unwrap())
    }

    #[test]
    fn full_kernel_sizes() {
        assert_eq!(GroupSpec::full().kernel_sizes, vec![6, 8, 10, 12]);
        for s in 0..4 {
            let oracle = 2 * (6.0 * 1.25f64.powi(s as i32) / 2.0).ceil() as usize;
            assert_eq!(kernel_size_for(6, 1.25, s), oracle);
        }
        assert_eq!(kernel_size_for(6, 1.0, 3), 6);
    }

    #[test]
    fn scale_weights() {
        let g = GroupSpec::full();
        assert!((g.scale_weight(3) - 0.262144).abs() < 1e-12);
        for b in 0..3 {
            let ratio = g.scale_weight(b) / g.scale_weight(b + 1);
            assert!((ratio - 1.5625).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_counts() {
        let g = GroupSpec::full();
        assert_eq!(count_shared_params(2, 2, &g, LayerKind::Group), 4608);
        assert_eq!(count_shared_params(3, 1, &g, LayerKind::Lifting), 108);
        assert_eq!(count_unshared_params(2, 2, &g, LayerKind::Group), 4608 * 32);
    }

    #[test]
    fn mismatched_basis_is_rejected() {
        let basis = make_fourier_basis(8, 0.5).unwrap();
        assert!(BankPlan::new(GroupSpec::full(), basis).is_err());
    }

    #[test]
    fn trivial_group_lifting_is_plain_discretization() {
        let g = GroupSpec::new(1, 1, 1.25, 6, 0.5).unwrap();
        let p = plan(g);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bank = LiftingBank::random(p.clone(), 2, 3, &mut rng).unwrap();
        for o in 0..2 {
            for c in 0..3 {
                let w = bank.coefficients.narrow(0, o, 1).unwrap().narrow(1, c, 1).unwrap();
                let f = ParamFilter::new(p.basis(), w.into_data()).unwrap();
                let k = discretize(&f, &TransformSpec::identity(), 6).unwrap();
                assert!(bank.expanded_kernel(o, 0, 0, c).max_abs_diff(&k) < 1e-12);
            }
        }
    }

    #[test]
    fn lifting_expansion_matches_definition() {
        let p = plan(GroupSpec::full());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bank = LiftingBank::random(p.clone(), 1, 2, &mut rng).unwrap();
        let g = p.group().clone();
        for (a, b) in [(0, 0), (1, 1), (3, 2), (7, 3)] {
            for c in 0..2 {
                let w = bank.coefficients.narrow(1, c, 1).unwrap();
                let f = ParamFilter::new(p.basis(), w.into_data()).unwrap();
                let mut k = discretize(&f, &g.transform(a, b), g.kernel_sizes[b]).unwrap();
                k.data.iter_mut().for_each(|v| *v *= g.scale_weight(b));
                let got = bank.expanded_kernel(0, a, b, c);
                assert!(got.max_abs_diff(&k) < 1e-12, "a={a} b={b}");
            }
        }
    }

    #[test]
    fn group_expansion_matches_definition_and_truncates() {
        let p = plan(GroupSpec::full());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bank = GroupBank::random(p.clone(), 1, 2, &mut rng).unwrap();
        let g = p.group().clone();
        for (a, b, c, a2, b2) in [(0, 0, 0, 0, 0), (2, 1, 1, 5, 3), (7, 0, 0, 1, 2), (4, 2, 1, 4, 2)] {
            let r = (a2 + 8 - a) % 8;
            let off = bank.coefficients.offset(&[0, c, r, b2 - b, 0]);
            let w = bank.coefficients.data()[off..off + 36].to_vec();
            let f = ParamFilter::new(p.basis(), w).unwrap();
            let mut k = discretize(&f, &g.transform(a, b), g.kernel_sizes[b]).unwrap();
            k.data.iter_mut().for_each(|v| *v *= g.scale_weight(b));
            let got = bank.expanded_kernel(0, a, b, c, a2, b2);
            assert!(got.max_abs_diff(&k) < 1e-12);
        }
        let z = bank.expanded_kernel(0, 0, 3, 0, 0, 0);
        assert!(z.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_rotation_step_is_cyclic_shift_plus_kernel_rotation() {
        // With four rotations each step is an exact quarter turn.
        let g = GroupSpec::new(4, 2, 1.25, 6, 0.5).unwrap();
        let p = plan(g);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bank = GroupBank::random(p, 1, 1, &mut rng).unwrap();
        for a in 0..4 {
            for a2 in 0..4 {
                let here = bank.expanded_kernel(0, a, 0, 0, a2, 1);
                let next = bank.expanded_kernel(0, (a + 1) % 4, 0, 0, (a2 + 1) % 4, 1);
                assert!(next.max_abs_diff(&here.quarter_turn()) < 1e-9);
            }
        }
    }

    #[test]
    fn one_coefficient_touches_every_group_copy() {
        let g = GroupSpec::new(4, 3, 1.25, 6, 0.5).unwrap();
        let p = plan(g.clone());
        let bank = GroupBank::new(p.clone(), 1, 1, Tensor::zeros(&[1, 1, 4, 3, 36])).unwrap();
        for j in 0..3 {
            let mut bumped = bank.clone();
            let off = bumped.coefficients.offset(&[0, 0, 1, j, 0]);
            bumped.coefficients.data_mut()[off] = 1.0;
            let mut touched = 0;
            for a in 0..4 {
                for b in 0..3 {
                    for a2 in 0..4 {
                        for b2 in b..3 {
                            let k = bumped.expanded_kernel(0, a, b, 0, a2, b2);
                            if k.data.iter().any(|&v| v != 0.0) {
                                touched += 1;
                            }
                        }
                    }
                }
            }
            assert_eq!(touched, 4 * (3 - j));
        }
    }

    #[test]
    fn adjoint_is_transpose() {
        let g = GroupSpec::new(4, 2, 1.25, 6, 0.5).unwrap();
        let p = plan(g);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let maps: Vec<Rc<dyn LinearMap>> = vec![
            LiftingBank::random(p.clone(), 2, 3, &mut rng).unwrap().expansion(1),
            GroupBank::random(p.clone(), 2, 2, &mut rng).unwrap().expansion(0),
            GroupBank::random(p, 1, 2, &mut rng).unwrap().expansion(1),
        ];
        for m in maps {
            let x: Vec<f64> = (0..m.input_len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let len: usize = m.output_shape().iter().product();
            let y: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut ax = vec![0.0; len];
            m.apply(&x, &mut ax);
            let mut aty = vec![0.0; x.len()];
            m.adjoint(&y, &mut aty);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn record_round_trip() {
        let p = plan(GroupSpec::full());
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let bank = GroupBank::random(p, 2, 1, &mut rng).unwrap();
        let rec = BankRecord::group(&bank);
        let bytes = rec.encode();
        assert_eq!(&bytes[..4], b"FRSB");
        let back = BankRecord::decode(&bytes).unwrap();
        assert_eq!(back, rec);
        back.check_group(&GroupSpec::full()).unwrap();
        assert!(back.check_group(&GroupSpec::new(4, 4, 1.25, 6, 0.5).unwrap()).is_err());
        assert!(BankRecord::decode(&bytes[..bytes.len() - 1]).is_err());
    }
}
