//! Layer descriptors and classical FLOPs counting.
//!
//! Counts follow the classical convention: every floating-point multiply and
//! every floating-point add is one operation, so a multiply-accumulate is two.
//! All counts are computed in `u64` with checked arithmetic.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LayerError {
    #[error("dimension `{0}` must be at least 1")]
    ZeroDimension(&'static str),
    #[error("valid padding needs k1 <= w and k2 <= h (got k1={k1}, k2={k2}, w={w}, h={h})")]
    KernelLargerThanInput { k1: u32, k2: u32, w: u32, h: u32 },
    #[error("operation count overflows 64 bits")]
    Overflow,
    #[error("{0}")]
    Parse(#[from] ParseError),
}

/// Failure to parse a layer descriptor record.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("at column {column}: {message}")]
pub struct ParseError {
    /// 1-based character column of the offending token.
    pub column: usize,
    /// Field name, when the error concerns a specific field.
    pub field: Option<String>,
    pub message: String,
}

impl ParseError {
    fn new(column: usize, field: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            column,
            field: field.map(str::to_owned),
            message: message.into(),
        }
    }
}

/// Tally of elementary floating-point operations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct OpCount {
    pub multiplications: u64,
    pub additions: u64,
}

impl OpCount {
    pub fn new(multiplications: u64, additions: u64) -> Self {
        Self {
            multiplications,
            additions,
        }
    }

    pub fn total(&self) -> u64 {
        self.multiplications + self.additions
    }
}

impl std::ops::Add for OpCount {
    type Output = OpCount;

    fn add(self, rhs: OpCount) -> OpCount {
        OpCount {
            multiplications: self.multiplications + rhs.multiplications,
            additions: self.additions + rhs.additions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Same,
    Valid,
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        })
    }
}

impl FromStr for Padding {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "same" => Ok(Padding::Same),
            "valid" => Ok(Padding::Valid),
            other => Err(format!("unknown padding `{other}` (expected same|valid)")),
        }
    }
}

/// A fully connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DenseDescriptor {
    pub d_in: u32,
    pub d_out: u32,
    pub has_bias: bool,
}

impl DenseDescriptor {
    pub fn new(d_in: u32, d_out: u32) -> Self {
        Self {
            d_in,
            d_out,
            has_bias: true,
        }
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        if self.d_in == 0 {
            return Err(LayerError::ZeroDimension("din"));
        }
        if self.d_out == 0 {
            return Err(LayerError::ZeroDimension("dout"));
        }
        Ok(())
    }
}

/// A 2D convolution. `k1` runs along the width axis and `k2` along the height
/// axis. Bias is not modelled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Conv2DDescriptor {
    pub w_in: u32,
    pub h_in: u32,
    pub c_in: u32,
    pub c_out: u32,
    pub k1: u32,
    pub k2: u32,
    pub stride: u32,
    pub padding: Padding,
    pub batch: u32,
}

impl Conv2DDescriptor {
    /// Square kernel, stride 1, same padding, batch 1.
    pub fn new(w_in: u32, h_in: u32, c_in: u32, c_out: u32, k: u32) -> Self {
        Self {
            w_in,
            h_in,
            c_in,
            c_out,
            k1: k,
            k2: k,
            stride: 1,
            padding: Padding::Same,
            batch: 1,
        }
    }

    pub fn with_kernel(mut self, k1: u32, k2: u32) -> Self {
        self.k1 = k1;
        self.k2 = k2;
        self
    }

    pub fn with_stride(mut self, stride: u32) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_batch(mut self, batch: u32) -> Self {
        self.batch = batch;
        self
    }

    /// Regime selector for rectangular kernels.
    pub fn kernel_k(&self) -> u32 {
        self.k1.max(self.k2)
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        let dims = [
            ("w", self.w_in),
            ("h", self.h_in),
            ("cin", self.c_in),
            ("cout", self.c_out),
            ("k1", self.k1),
            ("k2", self.k2),
            ("stride", self.stride),
            ("batch", self.batch),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(LayerError::ZeroDimension(name));
            }
        }
        if self.padding == Padding::Valid && (self.k1 > self.w_in || self.k2 > self.h_in) {
            return Err(LayerError::KernelLargerThanInput {
                k1: self.k1,
                k2: self.k2,
                w: self.w_in,
                h: self.h_in,
            });
        }
        Ok(())
    }

    /// Zero padding added on (left, right) and (top, bottom) under the
    /// current padding mode.
    pub fn padding_amounts(&self) -> Result<(PadPair, PadPair), LayerError> {
        let (w_out, h_out) = output_shape(self)?;
        Ok(match self.padding {
            Padding::Valid => ((0, 0), (0, 0)),
            Padding::Same => (
                split_padding(w_out, self.stride, self.k1, self.w_in),
                split_padding(h_out, self.stride, self.k2, self.h_in),
            ),
        })
    }
}

/// Zero padding before and after one spatial axis.
pub type PadPair = (u32, u32);

fn split_padding(out: u32, stride: u32, k: u32, input: u32) -> (u32, u32) {
    let needed = (u64::from(out) - 1) * u64::from(stride) + u64::from(k);
    let total = needed.saturating_sub(u64::from(input)) as u32;
    (total / 2, total - total / 2)
}

/// A GEMM `C <- alpha*A*B + beta*C` with `A: m x k`, `B: k x n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GemmSpec {
    pub m: u32,
    pub k: u32,
    pub n: u32,
    /// The `alpha` scaling of `A*B` is performed.
    pub use_alpha: bool,
    /// The `beta*C` term is computed and summed in.
    pub use_beta: bool,
}

impl GemmSpec {
    pub fn new(m: u32, k: u32, n: u32) -> Self {
        Self {
            m,
            k,
            n,
            use_alpha: true,
            use_beta: true,
        }
    }

    pub fn plain(m: u32, k: u32, n: u32) -> Self {
        Self {
            m,
            k,
            n,
            use_alpha: false,
            use_beta: false,
        }
    }

    pub fn validate(&self) -> Result<(), LayerError> {
        for (name, value) in [("m", self.m), ("k", self.k), ("n", self.n)] {
            if value == 0 {
                return Err(LayerError::ZeroDimension(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerDescriptor {
    Dense(DenseDescriptor),
    Conv2D(Conv2DDescriptor),
}

impl LayerDescriptor {
    pub fn validate(&self) -> Result<(), LayerError> {
        match self {
            LayerDescriptor::Dense(d) => d.validate(),
            LayerDescriptor::Conv2D(c) => c.validate(),
        }
    }

    /// The layer viewed as a convolution. Dense layers become unary convolutions.
    pub fn as_conv(&self) -> Conv2DDescriptor {
        match self {
            LayerDescriptor::Dense(d) => dense_as_conv(d),
            LayerDescriptor::Conv2D(c) => *c,
        }
    }

    /// Asymptotic FLOPs: `2 Din Dout` for dense layers, the convolution count otherwise.
    pub fn flops(&self) -> Result<u64, LayerError> {
        match self {
            LayerDescriptor::Dense(d) => dense_flops(d, false),
            LayerDescriptor::Conv2D(c) => conv_flops(c),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerDescriptor::Dense(_) => "dense",
            LayerDescriptor::Conv2D(_) => "conv2d",
        }
    }
}

impl From<DenseDescriptor> for LayerDescriptor {
    fn from(d: DenseDescriptor) -> Self {
        LayerDescriptor::Dense(d)
    }
}

impl From<Conv2DDescriptor> for LayerDescriptor {
    fn from(c: Conv2DDescriptor) -> Self {
        LayerDescriptor::Conv2D(c)
    }
}

fn checked_product(factors: &[u64]) -> Result<u64, LayerError> {
    factors
        .iter()
        .try_fold(1u64, |acc, &f| acc.checked_mul(f))
        .ok_or(LayerError::Overflow)
}

/// `n` multiplications and `n - 1` additions.
pub fn inner_product_flops(n: u64) -> Result<u64, LayerError> {
    if n == 0 {
        return Err(LayerError::ZeroDimension("n"));
    }
    n.checked_mul(2).map(|v| v - 1).ok_or(LayerError::Overflow)
}

/// Operation count of a GEMM.
///
/// The exact count is `2mkn` for the product with zero-initialised
/// accumulators, plus `mn` for the `alpha` scaling, plus `2mn` for computing
/// and adding `beta*C`; with both flags set this is `mn(2k+3)`. The
/// approximate count is `2mkn` regardless of flags.
pub fn gemm_flops(spec: &GemmSpec, exact: bool) -> Result<u64, LayerError> {
    spec.validate()?;
    let (m, k, n) = (u64::from(spec.m), u64::from(spec.k), u64::from(spec.n));
    let product = checked_product(&[2, m, k, n])?;
    if !exact {
        return Ok(product);
    }
    let mn = checked_product(&[m, n])?;
    let extra = u64::from(spec.use_alpha) + 2 * u64::from(spec.use_beta);
    mn.checked_mul(extra)
        .and_then(|e| product.checked_add(e))
        .ok_or(LayerError::Overflow)
}

/// Dense layer count. The asymptotic form is `2 Din Dout`; the exact form adds
/// one addition per output for the bias.
pub fn dense_flops(d: &DenseDescriptor, exact: bool) -> Result<u64, LayerError> {
    d.validate()?;
    let base = checked_product(&[2, u64::from(d.d_in), u64::from(d.d_out)])?;
    if exact && d.has_bias {
        base.checked_add(u64::from(d.d_out))
            .ok_or(LayerError::Overflow)
    } else {
        Ok(base)
    }
}

/// Output spatial dimensions `(w_out, h_out)`.
pub fn output_shape(c: &Conv2DDescriptor) -> Result<(u32, u32), LayerError> {
    c.validate()?;
    Ok(match c.padding {
        Padding::Same => (c.w_in.div_ceil(c.stride), c.h_in.div_ceil(c.stride)),
        Padding::Valid => (
            (c.w_in - c.k1) / c.stride + 1,
            (c.h_in - c.k2) / c.stride + 1,
        ),
    })
}

/// `batch * 2 * k1 * k2 * c_in * w_out * h_out * c_out`. Border zeros
/// introduced by padding are not discounted, and bias is not counted.
pub fn conv_flops(c: &Conv2DDescriptor) -> Result<u64, LayerError> {
    let (w_out, h_out) = output_shape(c)?;
    checked_product(&[
        u64::from(c.batch),
        2,
        u64::from(c.k1),
        u64::from(c.k2),
        u64::from(c.c_in),
        u64::from(w_out),
        u64::from(h_out),
        u64::from(c.c_out),
    ])
}

/// A dense layer as a 1x1 convolution over a 1x1 input.
pub fn dense_as_conv(d: &DenseDescriptor) -> Conv2DDescriptor {
    Conv2DDescriptor::new(1, 1, d.d_in, d.d_out, 1)
}

impl fmt::Display for DenseDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "dense din={} dout={} bias={}",
            self.d_in, self.d_out, self.has_bias
        )
    }
}

impl fmt::Display for Conv2DDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "conv2d w={} h={} cin={} cout={} k1={} k2={} stride={} pad={} batch={}",
            self.w_in,
            self.h_in,
            self.c_in,
            self.c_out,
            self.k1,
            self.k2,
            self.stride,
            self.padding,
            self.batch
        )
    }
}

impl fmt::Display for LayerDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerDescriptor::Dense(d) => d.fmt(f),
            LayerDescriptor::Conv2D(c) => c.fmt(f),
        }
    }
}

/// Whitespace-separated tokens with their 1-based starting column.
fn tokens(line: &str) -> impl Iterator<Item = (usize, &str)> {
    line.split_whitespace().map(move |tok| {
        // `split_whitespace` yields subslices of `line`, so pointer offsets are exact.
        let start = tok.as_ptr() as usize - line.as_ptr() as usize;
        (line[..start].chars().count() + 1, tok)
    })
}

struct Fields<'a> {
    kind: &'static str,
    entries: Vec<(usize, &'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn take(&mut self, name: &str) -> Option<(usize, &'a str)> {
        let pos = self.entries.iter().position(|(_, k, _)| *k == name)?;
        let (col, _, v) = self.entries.remove(pos);
        Some((col, v))
    }

    fn positive(
        &mut self,
        name: &str,
        default: Option<u32>,
        line_col: usize,
    ) -> Result<u32, ParseError> {
        match self.take(name) {
            Some((col, raw)) => {
                let value: u32 = raw.parse().map_err(|_| {
                    ParseError::new(
                        col,
                        Some(name),
                        format!("field `{name}`: `{raw}` is not a decimal integer"),
                    )
                })?;
                if value == 0 {
                    return Err(ParseError::new(
                        col,
                        Some(name),
                        format!("field `{name}` must be at least 1"),
                    ));
                }
                Ok(value)
            }
            None => default.ok_or_else(|| {
                ParseError::new(
                    line_col,
                    Some(name),
                    format!("{} record is missing field `{name}`", self.kind),
                )
            }),
        }
    }

    fn finish(self) -> Result<(), ParseError> {
        match self.entries.first() {
            Some((col, k, _)) => Err(ParseError::new(
                *col,
                Some(k),
                format!("unknown field `{k}` for {} record", self.kind),
            )),
            None => Ok(()),
        }
    }
}

impl FromStr for LayerDescriptor {
    type Err = ParseError;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let mut toks = tokens(line);
        let (kind_col, kind) = toks
            .next()
            .ok_or_else(|| ParseError::new(1, None, "empty layer record"))?;
        let kind: &'static str = match kind {
            "dense" => "dense",
            "conv2d" => "conv2d",
            other => {
                return Err(ParseError::new(
                    kind_col,
                    None,
                    format!("unknown layer kind `{other}` (expected dense|conv2d)"),
                ))
            }
        };
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (col, tok) in toks {
            let (key, value) = tok.split_once('=').ok_or_else(|| {
                ParseError::new(col, None, format!("expected key=value, got `{tok}`"))
            })?;
            if entries.iter().any(|(_, k, _)| *k == key) {
                return Err(ParseError::new(
                    col,
                    Some(key),
                    format!("duplicate field `{key}`"),
                ));
            }
            entries.push((col, key, value));
        }
        let mut fields = Fields { kind, entries };

        let layer = if kind == "dense" {
            let d_in = fields.positive("din", None, kind_col)?;
            let d_out = fields.positive("dout", None, kind_col)?;
            let has_bias = match fields.take("bias") {
                None => true,
                Some((_, "true")) => true,
                Some((_, "false")) => false,
                Some((col, raw)) => {
                    return Err(ParseError::new(
                        col,
                        Some("bias"),
                        format!("field `bias`: `{raw}` is not true|false"),
                    ))
                }
            };
            LayerDescriptor::Dense(DenseDescriptor {
                d_in,
                d_out,
                has_bias,
            })
        } else {
            let w_in = fields.positive("w", None, kind_col)?;
            let h_in = fields.positive("h", None, kind_col)?;
            let c_in = fields.positive("cin", None, kind_col)?;
            let c_out = fields.positive("cout", None, kind_col)?;
            let k1 = fields.positive("k1", None, kind_col)?;
            let k2 = fields.positive("k2", None, kind_col)?;
            let stride = fields.positive("stride", Some(1), kind_col)?;
            let batch = fields.positive("batch", Some(1), kind_col)?;
            let padding = match fields.take("pad") {
                None => Padding::Same,
                Some((col, raw)) => raw.parse().map_err(|msg: String| {
                    ParseError::new(col, Some("pad"), format!("field `pad`: {msg}"))
                })?,
            };
            let conv = Conv2DDescriptor {
                w_in,
                h_in,
                c_in,
                c_out,
                k1,
                k2,
                stride,
                padding,
                batch,
            };
            if let Err(e) = conv.validate() {
                return Err(ParseError::new(kind_col, Some("k1"), e.to_string()));
            }
            LayerDescriptor::Conv2D(conv)
        };
        fields.finish()?;
        Ok(layer)
    }
}
