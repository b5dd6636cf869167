//! Cross-correlation kernels (im2col + GEMM).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Zero padding added before/after each spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Self { top: p, bottom: p, left: p, right: p }
    }

    /// Stride-1 "same" padding: `(k-1)/2` on both sides for odd `k`,
    /// `(k/2 - 1, k/2)` for even `k`.
    pub fn same(kh: usize, kw: usize) -> Self {
        let split = |k: usize| if k % 2 == 1 { ((k - 1) / 2, (k - 1) / 2) } else { (k / 2 - 1, k / 2) };
        let (top, bottom) = split(kh);
        let (left, right) = split(kw);
        Self { top, bottom, left, right }
    }

    /// Like [`Padding::same`] with the extra even-kernel row and column
    /// moved to the leading side: `(k/2, k/2 - 1)`.
    pub fn same_flipped(kh: usize, kw: usize) -> Self {
        let p = Self::same(kh, kw);
        Self { top: p.bottom, bottom: p.top, left: p.right, right: p.left }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: Padding,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], k: &[usize], stride: usize, pad: Padding) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::shape(format!("conv2d expects 4-d input and kernel, got {x:?} and {k:?}")));
        }
        if x[1] != k[1] {
            return Err(Error::shape(format!(
                "conv2d input has {} channels, kernel expects {}",
                x[1], k[1]
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("stride must be positive"));
        }
        let hp = x[2] + pad.top + pad.bottom;
        let wp = x[3] + pad.left + pad.right;
        if hp < k[2] || wp < k[3] {
            return Err(Error::shape(format!("kernel {k:?} larger than padded input {x:?}")));
        }
        Ok(Self {
            batch: x[0],
            c_in: x[1],
            h: x[2],
            w: x[3],
            c_out: k[0],
            kh: k[2],
            kw: k[3],
            stride,
            pad,
            ho: (hp - k[2]) / stride + 1,
            wo: (wp - k[3]) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.ho, self.wo]
    }
}

thread_local! {
    static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
}

/// Runs `f` with a reusable buffer of at least `len` elements. The contents
/// are stale; callers overwrite before reading.
fn with_scratch<T>(len: usize, f: impl FnOnce(&mut [f64]) -> T) -> T {
    SCRATCH.with(|cell| {
        let mut buf = cell.take();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        let out = f(&mut buf[..len]);
        cell.replace(buf);
        out
    })
}

/// Column matrix `[c_in*kh*kw, ho*wo]` for one image `[c_in, h, w]`.
fn im2col(g: &ConvGeometry, img: &[f64], cols: &mut [f64]) {
    let n = g.col_cols();
    for c in 0..g.c_in {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad.top as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // valid ox range: 0 <= ox + kj - left < w
                        let shift = kj as isize - g.pad.left as isize;
                        let lo = (-shift).max(0) as usize;
                        let hi = ((g.w as isize - shift).min(g.wo as isize)).max(lo as isize) as usize;
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if hi > lo {
                            let s0 = (lo as isize + shift) as usize;
                            line[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad.left as isize;
                            *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeometry, cols: &[f64], img: &mut [f64]) {
    let n = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad.top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let line = &src[oy * g.wo..(oy + 1) * g.wo];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad.left as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// `c[m x n] = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
    };
    assert!(a.len() as isize >= span(m, k, rsa, csa));
    assert!(b.len() as isize >= span(k, n, rsb, csb));
    // SAFETY: extents checked above; c is row-major m x n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(g: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
    let rows = g.col_rows();
    let n = g.col_cols();
    let mut out = vec![0.0; g.batch * g.c_out * n];
    with_scratch(rows * n, |cols| {
        for b in 0..g.batch {
            let img = &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
            im2col(g, img, cols);
            let dst = &mut out[b * g.c_out * n..(b + 1) * g.c_out * n];
            gemm(g.c_out, rows, n, k, (rows as isize, 1), cols, (n as isize, 1), 0.0, dst);
        }
    });
    out
}

/// Gradients of a cross-correlation with respect to input and kernel.
pub fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    grad_out: &[f64],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let rows = g.col_rows();
    let n = g.col_cols();
    let mut gx = want_x.then(|| vec![0.0; x.len()]);
    let mut gk = want_k.then(|| vec![0.0; k.len()]);
    with_scratch(rows * n, |cols| {
        for b in 0..g.batch {
            let go = &grad_out[b * g.c_out * n..(b + 1) * g.c_out * n];
            if let Some(gk) = gk.as_mut() {
                let img = &x[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
                im2col(g, img, cols);
                // gk[c_out, rows] += go[c_out, n] * cols^T
                gemm(g.c_out, n, rows, go, (n as isize, 1), cols, (1, n as isize), 1.0, gk);
            }
            if g.stride == 1 {
                continue;
            }
            if let Some(gx) = gx.as_mut() {
                // dcols[rows, n] = k^T * go
                gemm(rows, g.c_out, n, k, (1, rows as isize), go, (n as isize, 1), 0.0, cols);
                let dst = &mut gx[b * g.c_in * g.h * g.w..(b + 1) * g.c_in * g.h * g.w];
                col2im_add(g, cols, dst);
            }
        }
    });
    if g.stride == 1 && want_x {
        gx = Some(input_grad_stride1(g, k, grad_out));
    }
    (gx, gk)
}

/// Input gradient of a stride-1 correlation: the output gradient correlated
/// with the spatially flipped, channel-transposed kernel.
fn input_grad_stride1(g: &ConvGeometry, k: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (kh, kw) = (g.kh, g.kw);
    let mut flipped = vec![0.0; k.len()];
    for o in 0..g.c_out {
        for c in 0..g.c_in {
            for a in 0..kh {
                for b in 0..kw {
                    flipped[((c * g.c_out + o) * kh + a) * kw + b] = k[((o * g.c_in + c) * kh + kh - 1 - a) * kw + kw - 1 - b];
                }
            }
        }
    }
    let pad = Padding {
        top: kh - 1 - g.pad.top,
        bottom: kh - 1 - g.pad.bottom,
        left: kw - 1 - g.pad.left,
        right: kw - 1 - g.pad.right,
    };
    let back = ConvGeometry::new(&[g.batch, g.c_out, g.ho, g.wo], &[g.c_in, g.c_out, kh, kw], 1, pad)
        .expect("transposed geometry of a valid convolution");
    debug_assert_eq!((back.ho, back.wo), (g.h, g.w));
    conv2d_forward(&back, grad_out, &flipped)
}

/// Direct six-loop cross-correlation.
pub fn conv2d_naive(g: &ConvGeometry, x: &[f64], k: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; g.batch * g.c_out * g.ho * g.wo];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = 0.0;
                    for c in 0..g.c_in {
                        for ki in 0..g.kh {
                            for kj in 0..g.kw {
                                let iy = (oy * g.stride + ki) as isize - g.pad.top as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad.left as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                let xv = x[((b * g.c_in + c) * g.h + iy as usize) * g.w + ix as usize];
                                let kv = k[((o * g.c_in + c) * g.kh + ki) * g.kw + kj];
                                acc += xv * kv;
                            }
                        }
                    }
                    out[((b * g.c_out + o) * g.ho + oy) * g.wo + ox] = acc;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_padding_convention() {
        assert_eq!(Padding::same(3, 3), Padding::uniform(1));
        assert_eq!(Padding::same(6, 6), Padding { top: 2, bottom: 3, left: 2, right: 3 });
        assert_eq!(Padding::same(1, 1), Padding::uniform(0));
        assert_eq!(Padding::same(2, 2), Padding { top: 0, bottom: 1, left: 0, right: 1 });
    }

    #[test]
    fn all_ones_center_is_nine() {
        let g = ConvGeometry::new(&[1, 1, 3, 3], &[1, 1, 3, 3], 1, Padding::uniform(1)).unwrap();
        let out = conv2d_forward(&g, &[1.0; 9], &[1.0; 9]);
        assert_eq!(out[4], 9.0);
        assert_eq!(out[0], 4.0);
    }

    #[test]
    fn gemm_matches_naive_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let b = rng.gen_range(1..3);
            let c = rng.gen_range(1..4);
            let o = rng.gen_range(1..4);
            let h = rng.gen_range(4..10);
            let w = rng.gen_range(4..10);
            let kh = rng.gen_range(1..5);
            let kw = rng.gen_range(1..5);
            let stride = rng.gen_range(1..3);
            let pad = Padding {
                top: rng.gen_range(0..3),
                bottom: rng.gen_range(0..3),
                left: rng.gen_range(0..3),
                right: rng.gen_range(0..3),
            };
            let g = ConvGeometry::new(&[b, c, h, w], &[o, c, kh, kw], stride, pad).unwrap();
            let x: Vec<f64> = (0..b * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let k: Vec<f64> = (0..o * c * kh * kw).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let fast = conv2d_forward(&g, &x, &k);
            let slow = conv2d_naive(&g, &x, &k);
            let diff = fast.iter().zip(&slow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-12, "{g:?}: {diff}");
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        assert!(ConvGeometry::new(&[1, 2, 4, 4], &[1, 3, 3, 3], 1, Padding::uniform(1)).is_err());
    }
}
