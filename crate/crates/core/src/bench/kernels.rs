//! Reference kernels, generic over an operation tally.
//!
//! Every floating-point multiply and add goes through a [`Tally`]. With
//! [`NoTally`] the calls compile away and the kernels run at full speed; with
//! [`OpCount`] they tally exactly what was executed. Accumulators start at
//! zero, so a multiply-accumulate is always one multiply and one add, except
//! in [`dot`], which seeds the accumulator with the first product.
//!
//! Tensor layouts: activations are NHWC, convolution weights are
//! `[k2][k1][c_in][c_out]` (so they double as the `(k1*k2*c_in) x c_out`
//! GEMM operand), dense weights are `[d_out][d_in]`.

use crate::layer::{Conv2DDescriptor, DenseDescriptor, GemmSpec, LayerError, OpCount};

pub trait Tally {
    fn mul(&mut self);
    fn add(&mut self);
}

/// Counting disabled.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoTally;

impl Tally for NoTally {
    #[inline(always)]
    fn mul(&mut self) {}
    #[inline(always)]
    fn add(&mut self) {}
}

impl Tally for OpCount {
    #[inline(always)]
    fn mul(&mut self) {
        self.multiplications += 1;
    }
    #[inline(always)]
    fn add(&mut self) {
        self.additions += 1;
    }
}

/// Inner product of two equal-length, non-empty vectors.
pub fn dot<T: Tally>(a: &[f32], b: &[f32], t: &mut T) -> f32 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty(), "inner product of empty vectors");
    let mut acc = a[0] * b[0];
    t.mul();
    for (x, y) in a[1..].iter().zip(&b[1..]) {
        acc += x * y;
        t.mul();
        t.add();
    }
    acc
}

/// Textbook triple-loop `C <- alpha*A*B + beta*C`, row-major.
/// The flags in `spec` decide whether the alpha and beta terms are computed.
pub fn gemm_reference<T: Tally>(
    spec: &GemmSpec,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
    t: &mut T,
) {
    let (m, k, n) = (spec.m as usize, spec.k as usize, spec.n as usize);
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
                t.mul();
                t.add();
            }
            if spec.use_alpha {
                acc *= alpha;
                t.mul();
            }
            if spec.use_beta {
                let scaled = beta * c[i * n + j];
                t.mul();
                acc += scaled;
                t.add();
            }
            c[i * n + j] = acc;
        }
    }
}

/// `C <- A*B` with the `i-p-j` loop order, row-major.
pub fn gemm_ipj<T: Tally>(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    b: &[f32],
    c: &mut [f32],
    t: &mut T,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        c_row.fill(0.0);
        for (&av, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
                t.mul();
                t.add();
            }
        }
    }
}

/// Matrix-vector product plus optional bias.
pub fn dense_forward<T: Tally>(
    d: &DenseDescriptor,
    weights: &[f32],
    bias: &[f32],
    x: &[f32],
    out: &mut [f32],
    t: &mut T,
) {
    let (d_in, d_out) = (d.d_in as usize, d.d_out as usize);
    assert_eq!(weights.len(), d_in * d_out);
    assert_eq!(x.len(), d_in);
    assert_eq!(out.len(), d_out);
    for (o, w_row) in weights.chunks_exact(d_in).enumerate() {
        let mut acc = 0.0f32;
        for (w, v) in w_row.iter().zip(x) {
            acc += w * v;
            t.mul();
            t.add();
        }
        if d.has_bias {
            acc += bias[o];
            t.add();
        }
        out[o] = acc;
    }
}

/// Dense layer lowered to a `1 x d_in` by `d_in x d_out` GEMM, plus bias.
/// `weights_t` is the transposed `[d_in][d_out]` weight matrix.
pub fn dense_forward_gemm<T: Tally>(
    d: &DenseDescriptor,
    weights_t: &[f32],
    bias: &[f32],
    x: &[f32],
    out: &mut [f32],
    t: &mut T,
) {
    let (d_in, d_out) = (d.d_in as usize, d.d_out as usize);
    gemm_ipj(1, d_in, d_out, x, weights_t, out, t);
    if d.has_bias {
        for (o, b) in out.iter_mut().zip(bias) {
            *o += b;
            t.add();
        }
    }
}

/// Geometry of one convolution, resolved once.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k1: usize,
    pub k2: usize,
    pub stride: usize,
    pub w_in: usize,
    pub h_in: usize,
    pub w_out: usize,
    pub h_out: usize,
    pub pad_left: usize,
    pub pad_top: usize,
    pub w_pad: usize,
    pub h_pad: usize,
}

impl ConvGeometry {
    pub fn new(c: &Conv2DDescriptor) -> Result<Self, LayerError> {
        let (w_out, h_out) = crate::layer::output_shape(c)?;
        let ((pl, pr), (pt, pb)) = c.padding_amounts()?;
        Ok(Self {
            batch: c.batch as usize,
            c_in: c.c_in as usize,
            c_out: c.c_out as usize,
            k1: c.k1 as usize,
            k2: c.k2 as usize,
            stride: c.stride as usize,
            w_in: c.w_in as usize,
            h_in: c.h_in as usize,
            w_out: w_out as usize,
            h_out: h_out as usize,
            pad_left: pl as usize,
            pad_top: pt as usize,
            w_pad: (c.w_in + pl + pr) as usize,
            h_pad: (c.h_in + pt + pb) as usize,
        })
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.h_in * self.w_in * self.c_in
    }

    pub fn padded_len(&self) -> usize {
        self.batch * self.h_pad * self.w_pad * self.c_in
    }

    pub fn weight_len(&self) -> usize {
        self.k1 * self.k2 * self.c_in * self.c_out
    }

    pub fn output_len(&self) -> usize {
        self.batch * self.h_out * self.w_out * self.c_out
    }

    /// Rows and columns of one batch element's im2col matrix.
    pub fn columns_shape(&self) -> (usize, usize) {
        (self.w_out * self.h_out, self.k1 * self.k2 * self.c_in)
    }

    /// Zero-padded copy of the input. Copying moves no floating-point data
    /// through arithmetic, so nothing is tallied.
    pub fn pad(&self, input: &[f32]) -> Vec<f32> {
        assert_eq!(input.len(), self.input_len());
        let mut padded = vec![0.0f32; self.padded_len()];
        let row = self.w_in * self.c_in;
        for b in 0..self.batch {
            for y in 0..self.h_in {
                let src = ((b * self.h_in + y) * self.w_in) * self.c_in;
                let dst =
                    ((b * self.h_pad + y + self.pad_top) * self.w_pad + self.pad_left) * self.c_in;
                padded[dst..dst + row].copy_from_slice(&input[src..src + row]);
            }
        }
        padded
    }
}

/// Direct convolution over a pre-padded input. For each output pixel the
/// `c_out` accumulators are zeroed and updated once per `(ky, kx, ci)` tap.
pub fn conv2d_direct<T: Tally>(
    g: &ConvGeometry,
    padded: &[f32],
    weights: &[f32],
    out: &mut [f32],
    t: &mut T,
) {
    assert_eq!(padded.len(), g.padded_len());
    assert_eq!(weights.len(), g.weight_len());
    assert_eq!(out.len(), g.output_len());
    let c_out = g.c_out;
    let mut pixels = out.chunks_exact_mut(c_out);
    for b in 0..g.batch {
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let acc = pixels.next().expect("output sized by geometry");
                acc.fill(0.0);
                for ky in 0..g.k2 {
                    let iy = oy * g.stride + ky;
                    for kx in 0..g.k1 {
                        let ix = ox * g.stride + kx;
                        let base = ((b * g.h_pad + iy) * g.w_pad + ix) * g.c_in;
                        let taps = &padded[base..base + g.c_in];
                        let w_base = (ky * g.k1 + kx) * g.c_in * c_out;
                        let w_tap = &weights[w_base..w_base + g.c_in * c_out];
                        for (&a, w_row) in taps.iter().zip(w_tap.chunks_exact(c_out)) {
                            for (o, &w) in acc.iter_mut().zip(w_row) {
                                *o += a * w;
                                t.mul();
                                t.add();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unrolls one batch element of the padded input into a
/// `(w_out*h_out) x (k1*k2*c_in)` matrix with columns ordered `(ky, kx, ci)`.
pub fn im2col(g: &ConvGeometry, padded: &[f32], batch_index: usize, columns: &mut [f32]) {
    let (rows, cols) = g.columns_shape();
    assert_eq!(columns.len(), rows * cols);
    let mut dst = columns.chunks_exact_mut(g.c_in);
    for oy in 0..g.h_out {
        for ox in 0..g.w_out {
            for ky in 0..g.k2 {
                let iy = oy * g.stride + ky;
                for kx in 0..g.k1 {
                    let ix = ox * g.stride + kx;
                    let base = ((batch_index * g.h_pad + iy) * g.w_pad + ix) * g.c_in;
                    dst.next()
                        .expect("columns sized by geometry")
                        .copy_from_slice(&padded[base..base + g.c_in]);
                }
            }
        }
    }
}

/// im2col followed by one GEMM per batch element.
pub fn conv2d_im2col<T: Tally>(
    g: &ConvGeometry,
    padded: &[f32],
    weights: &[f32],
    columns: &mut [f32],
    out: &mut [f32],
    t: &mut T,
) {
    let (rows, cols) = g.columns_shape();
    let per_batch = rows * g.c_out;
    for (b, out_b) in out.chunks_exact_mut(per_batch).enumerate() {
        im2col(g, padded, b, columns);
        gemm_ipj(rows, cols, g.c_out, columns, weights, out_b, t);
    }
}
