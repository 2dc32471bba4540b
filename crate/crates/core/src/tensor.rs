//! Dense real tensors and the small operation set the feedback loop needs.
//!
//! Storage is a flat row-major `Vec<f64>` with an explicit shape. Every
//! public operation returns a fresh tensor; nothing is mutated in place
//! once a tensor has been handed out.

use std::fmt;

use crate::error::{Error, Result};

/// Default leaky slope used across the engine.
pub const DEFAULT_SLOPE: f64 = 0.1;

/// Dense n-dimensional real array, rank 1 to 4.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "rank must be between 1 and 4".into(),
        });
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(shape.iter().product())
}

fn ensure_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Tensor {
    /// Builds a tensor, validating the shape against the data length and
    /// rejecting non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(&shape)?;
        if len != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("extent product {len} != data length {}", data.len()),
            });
        }
        ensure_finite(&data, "Tensor::new")?;
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Self::new(shape.to_vec(), vec![value; len])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, 1.0)
    }

    /// Fills a tensor from a closure over the flat row-major index.
    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = check_shape(shape)?;
        Self::new(shape.to_vec(), (0..len).map(f).collect())
    }

    // Internal constructor for results that are finite by construction
    // or checked by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Interprets the tensor as `[channels, height, width]`. Rank-2 tensors
    /// are treated as a single channel.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok((c, h, w)),
            [h, w] => Ok((1, h, w)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected [C, H, W] or [H, W]".into(),
            }),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    /// Channel `c` of a `[C, H, W]` tensor as a rank-2 tensor.
    pub fn channel(&self, c: usize) -> Result<Self> {
        let (cs, h, w) = self.dims3()?;
        if c >= cs {
            return Err(Error::InvalidArgument(format!(
                "channel {c} out of range for {cs} channels"
            )));
        }
        Ok(Self::from_parts(
            vec![h, w],
            self.data[c * h * w..(c + 1) * h * w].to_vec(),
        ))
    }

    pub fn scale(&self, a: f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|v| a * v).collect();
        ensure_finite(&data, "scale")?;
        Ok(Self::from_parts(self.shape.clone(), data))
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        axpy(1.0, other, self)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        axpy(-1.0, other, self)
    }

    /// Sum over the channel axis of a `[C, H, W]` tensor.
    pub fn channel_sum(&self) -> Result<Self> {
        let (c, h, w) = self.dims3()?;
        let mut out = vec![0.0; h * w];
        for ch in 0..c {
            for (o, v) in out.iter_mut().zip(&self.data[ch * h * w..(ch + 1) * h * w]) {
                *o += v;
            }
        }
        Ok(Self::from_parts(vec![h, w], out))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        same_shape("max_abs_diff", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::ShapeMismatch {
            op,
            expected: a.shape.clone(),
            got: b.shape.clone(),
        });
    }
    Ok(())
}

/// Boundary handling for "same" convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PaddingMode {
    /// Out-of-range taps read zero. Used on the detector path.
    #[default]
    Zero,
    /// Out-of-range taps wrap around. The convolution theorem is exact
    /// only in this mode, so the spectral analysis uses it.
    Circular,
}

impl PaddingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PaddingMode::Zero => "zero",
            PaddingMode::Circular => "circular",
        }
    }
}

impl std::str::FromStr for PaddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(PaddingMode::Zero),
            "circular" => Ok(PaddingMode::Circular),
            other => Err(Error::InvalidArgument(format!("unknown padding `{other}`"))),
        }
    }
}

/// Convolution filter bank `[out, in, kH, kW]` with an optional bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvFilter {
    weights: Tensor,
    bias: Option<Tensor>,
}

impl ConvFilter {
    pub fn new(weights: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let &[out, _, kh, kw] = weights.shape() else {
            return Err(Error::InvalidShape {
                shape: weights.shape().to_vec(),
                reason: "filter weights must be [out, in, kH, kW]".into(),
            });
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape {
                shape: weights.shape().to_vec(),
                reason: "kernel extents must be odd".into(),
            });
        }
        if let Some(b) = &bias {
            if b.shape() != [out] {
                return Err(Error::ShapeMismatch {
                    op: "ConvFilter::new",
                    expected: vec![out],
                    got: b.shape().to_vec(),
                });
            }
        }
        Ok(Self { weights, bias })
    }

    pub fn zeros(out: usize, inp: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[out, inp, kh, kw])?, None)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    /// The `(out, in)` 2D kernel slice.
    pub fn slice(&self, out: usize, inp: usize) -> Tensor {
        let (kh, kw) = self.kernel();
        let start = (out * self.in_channels() + inp) * kh * kw;
        Tensor::from_parts(
            vec![kh, kw],
            self.weights.data()[start..start + kh * kw].to_vec(),
        )
    }

    /// Multiplies weights and bias by `a`.
    pub fn scaled(&self, a: f64) -> Result<Self> {
        Self::new(
            self.weights.scale(a)?,
            self.bias.as_ref().map(|b| b.scale(a)).transpose()?,
        )
    }
}

/// Geometry of a "same" convolution, shared by forward and backward passes.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeometry {
    pub(crate) fn new(input: &Tensor, weights: &Tensor) -> Result<Self> {
        let (cin, h, w) = input.dims3()?;
        let &[cout, fin, kh, kw] = weights.shape() else {
            return Err(Error::InvalidShape {
                shape: weights.shape().to_vec(),
                reason: "filter weights must be [out, in, kH, kW]".into(),
            });
        };
        if fin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input channels)",
                expected: vec![fin],
                got: vec![cin],
            });
        }
        if kh > h || kw > w {
            return Err(Error::InvalidShape {
                shape: input.shape().to_vec(),
                reason: format!("kernel {kh}x{kw} larger than input {h}x{w}"),
            });
        }
        Ok(Self {
            cin,
            cout,
            h,
            w,
            kh,
            kw,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.h * self.w
    }
}

/// Unrolls every receptive field into a `[Cin*kH*kW, H*W]` matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeometry, pad: PaddingMode) -> Vec<f64> {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut col = vec![0.0; g.rows() * g.cols()];
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let dst = &mut col[row * h * w..(row + 1) * h * w];
                for i in 0..h {
                    let si = i as isize + a as isize - ph as isize;
                    let si = match pad {
                        PaddingMode::Zero if si < 0 || si >= h as isize => continue,
                        PaddingMode::Zero => si as usize,
                        PaddingMode::Circular => si.rem_euclid(h as isize) as usize,
                    };
                    let src = &plane[si * w..(si + 1) * w];
                    let out = &mut dst[i * w..(i + 1) * w];
                    let shift = b as isize - pw as isize;
                    match pad {
                        PaddingMode::Zero => {
                            let lo = (-shift).max(0) as usize;
                            let hi = (w as isize - shift).min(w as isize) as usize;
                            if lo < hi {
                                let s0 = (lo as isize + shift) as usize;
                                out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                        }
                        PaddingMode::Circular => {
                            for (j, o) in out.iter_mut().enumerate() {
                                *o = src[(j as isize + shift).rem_euclid(w as isize) as usize];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    col
}

/// Scatters a column matrix gradient back onto the input grid.
pub(crate) fn col2im(col: &[f64], g: &ConvGeometry, pad: PaddingMode) -> Vec<f64> {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut out = vec![0.0; g.cin * h * w];
    let mut row = 0;
    for c in 0..g.cin {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for a in 0..g.kh {
            for b in 0..g.kw {
                let src = &col[row * h * w..(row + 1) * h * w];
                for i in 0..h {
                    let si = i as isize + a as isize - ph as isize;
                    let si = match pad {
                        PaddingMode::Zero if si < 0 || si >= h as isize => continue,
                        PaddingMode::Zero => si as usize,
                        PaddingMode::Circular => si.rem_euclid(h as isize) as usize,
                    };
                    let dst = &mut plane[si * w..(si + 1) * w];
                    let grad = &src[i * w..(i + 1) * w];
                    let shift = b as isize - pw as isize;
                    match pad {
                        PaddingMode::Zero => {
                            let lo = (-shift).max(0) as usize;
                            let hi = (w as isize - shift).min(w as isize) as usize;
                            if lo < hi {
                                let s0 = (lo as isize + shift) as usize;
                                for (d, gv) in dst[s0..s0 + (hi - lo)].iter_mut().zip(&grad[lo..hi]) {
                                    *d += gv;
                                }
                            }
                        }
                        PaddingMode::Circular => {
                            for (j, gv) in grad.iter().enumerate() {
                                dst[(j as isize + shift).rem_euclid(w as isize) as usize] += gv;
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

/// `c[m×n] = a[m×k] · b[k×n]` for row-major slices, with optional
/// transposed views of `a` or `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above pin every slice to the extents and strides
    // handed to the kernel, so all reads and writes stay in bounds.
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

/// Forward convolution that also hands back the unrolled input, which the
/// gradient tape keeps for the backward pass.
pub(crate) fn conv2d_with_cols(
    input: &Tensor,
    weights: &Tensor,
    bias: Option<&Tensor>,
    pad: PaddingMode,
) -> Result<(Tensor, Vec<f64>)> {
    let g = ConvGeometry::new(input, weights)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::ShapeMismatch {
                op: "conv2d (bias)",
                expected: vec![g.cout],
                got: b.shape().to_vec(),
            });
        }
    }
    let cols = im2col(input.data(), &g, pad);
    let p = g.cols();
    let mut out = vec![0.0; g.cout * p];
    if let Some(b) = bias {
        for (o, &bv) in b.data().iter().enumerate() {
            out[o * p..(o + 1) * p].fill(bv);
        }
    }
    gemm(
        g.cout,
        g.rows(),
        p,
        weights.data(),
        false,
        &cols,
        false,
        &mut out,
        bias.is_some(),
    );
    ensure_finite(&out, "conv2d")?;
    let shape = if input.rank() == 2 && g.cout == 1 {
        vec![g.h, g.w]
    } else {
        vec![g.cout, g.h, g.w]
    };
    Ok((Tensor::from_parts(shape, out), cols))
}

/// "Same" 2D convolution (cross-correlation, as in CNNs) of a `[Cin, H, W]`
/// input with a `[Cout, Cin, kH, kW]` filter, giving `[Cout, H, W]`.
///
/// Rank-2 inputs are accepted as single-channel; a single-output filter on
/// a rank-2 input yields a rank-2 result.
pub fn conv2d(input: &Tensor, filter: &ConvFilter, pad: PaddingMode) -> Result<Tensor> {
    ensure_finite(input.data(), "conv2d input")?;
    conv2d_with_cols(input, filter.weights(), filter.bias(), pad).map(|(t, _)| t)
}

/// Gradients of a convolution with respect to input, weights and bias.
pub(crate) struct ConvGrads {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    cols: &[f64],
    weights: &Tensor,
    g: &ConvGeometry,
    grad_out: &[f64],
    pad: PaddingMode,
    need_input: bool,
) -> ConvGrads {
    let p = g.cols();
    let q = g.rows();
    let mut gw = vec![0.0; g.cout * q];
    gemm(g.cout, p, q, grad_out, false, cols, true, &mut gw, false);
    let gb = (0..g.cout)
        .map(|o| grad_out[o * p..(o + 1) * p].iter().sum())
        .collect();
    let gi = if need_input {
        let mut gcol = vec![0.0; q * p];
        gemm(q, g.cout, p, weights.data(), true, grad_out, false, &mut gcol, false);
        col2im(&gcol, g, pad)
    } else {
        Vec::new()
    };
    ConvGrads {
        input: gi,
        weights: gw,
        bias: gb,
    }
}

fn check_slope(slope: f64) -> Result<()> {
    if slope > 0.0 && slope < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidSlope(slope))
    }
}

/// Leaky ReLU: `x` for `x > 0`, `slope * x` otherwise, with `slope` in (0, 1).
pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    check_slope(slope)?;
    let data = x
        .data()
        .iter()
        .map(|&v| if v > 0.0 { v } else { slope * v })
        .collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

pub fn frobenius_norm(x: &Tensor) -> f64 {
    x.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Elementwise `a * x + y`.
pub fn axpy(a: f64, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    same_shape("axpy", y, x)?;
    let data: Vec<f64> = x.data().iter().zip(y.data()).map(|(xv, yv)| a * xv + yv).collect();
    ensure_finite(&data, "axpy")?;
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

/// 2×2 average pooling with stride 2 over a `[C, H, W]` tensor with even
/// spatial extents.
pub fn avg_pool2(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "avg_pool2 needs even spatial extents".into(),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            let r0 = (ch * h + 2 * i) * w;
            let r1 = r0 + w;
            for j in 0..ow {
                out[(ch * oh + i) * ow + j] =
                    0.25 * (d[r0 + 2 * j] + d[r0 + 2 * j + 1] + d[r1 + 2 * j] + d[r1 + 2 * j + 1]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, oh, ow], out))
}

pub(crate) fn avg_pool2_backward(grad_out: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gi = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                gi[(ch * h + i) * w + j] = 0.25 * grad_out[(ch * oh + i / 2) * ow + j / 2];
            }
        }
    }
    gi
}
