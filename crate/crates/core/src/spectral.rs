//! 2D discrete Fourier transforms and the energy identities built on them.
//!
//! The reference transform is a direct (separable) summation with an exact
//! twiddle table. A radix-2 FFT is provided for power-of-two extents and is
//! checked against the direct form.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor::{self, conv2d, ConvFilter, PaddingMode, Tensor};

/// Row-major `[H, W]` array of complex values.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    h: usize,
    w: usize,
    data: Vec<Complex64>,
}

impl ComplexTensor {
    pub fn new(h: usize, w: usize, data: Vec<Complex64>) -> Result<Self> {
        if h == 0 || w == 0 || h * w != data.len() {
            return Err(Error::InvalidShape {
                shape: vec![h, w],
                reason: format!("data length {} does not match", data.len()),
            });
        }
        if !data.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            return Err(Error::NonFinite("ComplexTensor::new"));
        }
        Ok(Self { h, w, data })
    }

    pub fn from_real(x: &Tensor) -> Result<Self> {
        let (h, w) = rank2(x)?;
        Ok(Self {
            h,
            w,
            data: x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> Complex64 {
        self.data[i * self.w + j]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(Complex64::norm_sqr).sum()
    }

    /// Frobenius norm over all entries.
    pub fn norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                expected: vec![self.h, self.w],
                got: vec![other.h, other.w],
            });
        }
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "ComplexTensor::sub")?;
        Ok(Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.check_same(other, "ComplexTensor::hadamard")?;
        Ok(Self {
            h: self.h,
            w: self.w,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same(other, "ComplexTensor::max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }

    /// Real parts as a rank-2 tensor.
    pub fn re(&self) -> Result<Tensor> {
        Tensor::new(vec![self.h, self.w], self.data.iter().map(|z| z.re).collect())
    }
}

fn rank2(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [h, w] => Ok((h, w)),
        [1, h, w] => Ok((h, w)),
        _ => Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "expected a rank-2 tensor".into(),
        }),
    }
}

fn twiddles(n: usize, sign: f64) -> Vec<Complex64> {
    (0..n)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / n as f64))
        .collect()
}

// One direct DFT pass along a strided line.
fn dft_line(input: &[Complex64], out: &mut [Complex64], tw: &[Complex64]) {
    let n = input.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = Complex64::new(0.0, 0.0);
        for (m, v) in input.iter().enumerate() {
            acc += v * tw[(k * m) % n];
        }
        *o = acc;
    }
}

fn transform_rows_cols(
    mut data: Vec<Complex64>,
    h: usize,
    w: usize,
    line: impl Fn(&[Complex64], &mut [Complex64], usize),
) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); w];
    for i in 0..h {
        line(&data[i * w..(i + 1) * w], &mut buf, w);
        data[i * w..(i + 1) * w].copy_from_slice(&buf);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    let mut out = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = data[i * w + j];
        }
        line(&col, &mut out, h);
        for i in 0..h {
            data[i * w + j] = out[i];
        }
    }
    data
}

fn direct(x: &ComplexTensor, sign: f64) -> ComplexTensor {
    let (tw_h, tw_w) = (twiddles(x.h, sign), twiddles(x.w, sign));
    let data = transform_rows_cols(x.data.clone(), x.h, x.w, |inp, out, n| {
        let tw = if n == x.w { &tw_w } else { &tw_h };
        dft_line(inp, out, tw)
    });
    ComplexTensor {
        h: x.h,
        w: x.w,
        data,
    }
}

/// Unnormalized 2D DFT: `X[k,l] = Σ x[m,n] e^{-2πi(km/H + ln/W)}`.
pub fn dft2(x: &Tensor) -> Result<ComplexTensor> {
    Ok(direct(&ComplexTensor::from_real(x)?, -1.0))
}

/// Complex-input forward DFT.
pub fn dft2_complex(x: &ComplexTensor) -> ComplexTensor {
    direct(x, -1.0)
}

/// Inverse 2D DFT including the `1/(HW)` normalization.
pub fn idft2(spectrum: &ComplexTensor) -> ComplexTensor {
    let mut out = direct(spectrum, 1.0);
    let scale = 1.0 / (spectrum.h * spectrum.w) as f64;
    for z in &mut out.data {
        *z *= scale;
    }
    out
}

fn fft_line(input: &[Complex64], out: &mut [Complex64], tw: &[Complex64]) {
    let n = input.len();
    let bits = n.trailing_zeros();
    for (i, v) in input.iter().enumerate() {
        let r = if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) };
        out[r] = *v;
    }
    let mut len = 2;
    while len <= n {
        let step = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..len / 2 {
                let t = tw[k * step] * out[start + k + len / 2];
                let u = out[start + k];
                out[start + k] = u + t;
                out[start + k + len / 2] = u - t;
            }
        }
        len <<= 1;
    }
}

/// Radix-2 FFT path; both extents must be powers of two.
pub fn fft2(x: &Tensor) -> Result<ComplexTensor> {
    let (h, w) = rank2(x)?;
    if !h.is_power_of_two() || !w.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "fft2 needs power-of-two extents, got {h}x{w}"
        )));
    }
    let (tw_h, tw_w) = (twiddles(h, -1.0), twiddles(w, -1.0));
    let input = ComplexTensor::from_real(x)?;
    let data = transform_rows_cols(input.data, h, w, |inp, out, n| {
        let tw = if n == w { &tw_w } else { &tw_h };
        fft_line(inp, out, tw)
    });
    Ok(ComplexTensor { h, w, data })
}

/// Per-channel spectra of a `[C, H, W]` (or `[H, W]`) tensor.
pub fn dft2_channels(x: &Tensor) -> Result<Vec<ComplexTensor>> {
    let (c, _, _) = x.dims3()?;
    (0..c).map(|ch| dft2(&x.channel(ch)?)).collect()
}

/// Root-sum-square Frobenius norm of a multi-channel spectrum.
pub fn spectral_norm(x: &Tensor) -> Result<f64> {
    Ok(dft2_channels(x)?
        .iter()
        .map(ComplexTensor::norm_sqr)
        .sum::<f64>()
        .sqrt())
}

/// Both sides of Parseval's identity: `(Σ|x|², (1/N) Σ|X|²)`.
pub fn spectral_energy(x: &Tensor) -> Result<(f64, f64)> {
    let (h, w) = rank2(x)?;
    let spatial = x.data().iter().map(|v| v * v).sum();
    let spectral = dft2(x)?.norm_sqr() / (h * w) as f64;
    Ok((spatial, spectral))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem1Report {
    /// Spectral norm after the leaky activation.
    pub lhs: f64,
    /// Spectral norm before it.
    pub rhs: f64,
    pub holds: bool,
}

/// Checks that the leaky activation does not increase spectral energy.
pub fn theorem1_check(x: &Tensor, slope: f64) -> Result<Theorem1Report> {
    let activated = tensor::leaky_relu(x, slope)?;
    let lhs = dft2(&activated)?.norm();
    let rhs = dft2(x)?.norm();
    Ok(Theorem1Report {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9 * rhs,
    })
}

/// Places a `[kH, kW]` CNN kernel on an `H×W` grid so that circular
/// cross-correlation with the kernel equals circular convolution with the
/// embedded grid. The embedding is a flip plus a wrap-around centring, so
/// its spectrum has the same magnitudes as any plain zero-embedding.
pub fn embed_kernel(kernel: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (kh, kw) = rank2(kernel)?;
    if kh > h || kw > w {
        return Err(Error::InvalidShape {
            shape: vec![kh, kw],
            reason: format!("kernel does not fit in {h}x{w}"),
        });
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let mut out = vec![0.0; h * w];
    for a in 0..kh {
        for b in 0..kw {
            let u = (ph as isize - a as isize).rem_euclid(h as isize) as usize;
            let v = (pw as isize - b as isize).rem_euclid(w as isize) as usize;
            out[u * w + v] += kernel.data()[a * kw + b];
        }
    }
    Tensor::new(vec![h, w], out)
}

fn single_filter(kernel: &Tensor) -> Result<ConvFilter> {
    let (kh, kw) = rank2(kernel)?;
    ConvFilter::new(kernel.reshape(&[1, 1, kh, kw])?, None)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvTheoremReport {
    /// Largest entrywise gap between the two spectra.
    pub max_abs_gap: f64,
    /// Largest entry magnitude of the product spectrum.
    pub scale: f64,
    pub holds: bool,
}

impl ConvTheoremReport {
    pub fn relative_gap(&self) -> f64 {
        self.max_abs_gap / self.scale.max(f64::MIN_POSITIVE)
    }
}

fn conv_theorem(x: &Tensor, kernel: &Tensor, pad: PaddingMode) -> Result<ConvTheoremReport> {
    let (h, w) = rank2(x)?;
    let x2 = x.reshape(&[h, w])?;
    let y = conv2d(&x2, &single_filter(kernel)?, pad)?;
    let lhs = dft2(&y)?;
    let rhs = dft2(&x2)?.hadamard(&dft2(&embed_kernel(kernel, h, w)?)?)?;
    let max_abs_gap = lhs.max_abs_diff(&rhs)?;
    let scale = rhs.data().iter().map(|z| z.norm()).fold(0.0, f64::max);
    Ok(ConvTheoremReport {
        max_abs_gap,
        scale,
        holds: max_abs_gap <= 1e-8 * scale.max(1.0),
    })
}

/// Verifies `DFT(x ⊛ f) = DFT(x) ∘ DFT(embed(f))` for circular convolution.
pub fn circular_conv_theorem_check(x: &Tensor, kernel: &Tensor) -> Result<ConvTheoremReport> {
    conv_theorem(x, kernel, PaddingMode::Circular)
}

/// Same comparison under zero padding, where the identity is only
/// approximate. Used to measure the gap on the detector path.
pub fn zero_padding_conv_gap(x: &Tensor, kernel: &Tensor) -> Result<ConvTheoremReport> {
    conv_theorem(x, kernel, PaddingMode::Zero)
}

/// Index `(out, in)` of the 2D slice with the largest Frobenius norm;
/// ties go to the lowest index.
pub fn max_norm_slice_index(filter: &ConvFilter) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_norm = -1.0;
    for o in 0..filter.out_channels() {
        for i in 0..filter.in_channels() {
            let n = tensor::frobenius_norm(&filter.slice(o, i));
            if n > best_norm {
                best_norm = n;
                best = (o, i);
            }
        }
    }
    best
}

pub fn max_norm_slice(filter: &ConvFilter) -> Tensor {
    let (o, i) = max_norm_slice_index(filter);
    filter.slice(o, i)
}

/// Spectral Frobenius norm of a filter's max-norm slice, embedded on an
/// `H×W` grid.
pub fn filter_spectral_norm(filter: &ConvFilter, h: usize, w: usize) -> Result<f64> {
    Ok(dft2(&embed_kernel(&max_norm_slice(filter), h, w)?)?.norm())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0)).unwrap()
    }

    // O(N²·N²) quadruple sum, the textbook definition.
    fn naive_dft(x: &Tensor) -> Vec<Complex64> {
        let (h, w) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![Complex64::new(0.0, 0.0); h * w];
        for k in 0..h {
            for l in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for m in 0..h {
                    for n in 0..w {
                        let phase = -2.0
                            * PI
                            * ((k * m) as f64 / h as f64 + (l * n) as f64 / w as f64);
                        acc += x.data()[m * w + n] * Complex64::from_polar(1.0, phase);
                    }
                }
                out[k * w + l] = acc;
            }
        }
        out
    }

    fn delta(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w], |i| if i == 0 { 1.0 } else { 0.0 }).unwrap()
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let s = dft2(&delta(4, 4)).unwrap();
        for z in s.data() {
            assert!((z - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn constant_image_is_pure_dc() {
        let c = 0.7;
        let s = dft2(&Tensor::full(&[3, 5], c).unwrap()).unwrap();
        assert!((s.get(0, 0) - Complex64::new(c * 15.0, 0.0)).norm() < 1e-12);
        for (idx, z) in s.data().iter().enumerate().skip(1) {
            assert!(z.norm() < 1e-12, "bin {idx} = {z}");
        }
    }

    #[test]
    fn direct_dft_matches_naive_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[8, 8], &mut rng);
        let fast = dft2(&x).unwrap();
        for (a, b) in fast.data().iter().zip(naive_dft(&x)) {
            assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn fft_agrees_with_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (h, w) in [(1, 1), (2, 8), (16, 16), (32, 4)] {
            let x = random(&[h, w], &mut rng);
            let gap = fft2(&x).unwrap().max_abs_diff(&dft2(&x).unwrap()).unwrap();
            assert!(gap < 1e-9, "{h}x{w}: {gap}");
        }
        assert!(fft2(&Tensor::zeros(&[6, 8]).unwrap()).is_err());
    }

    #[test]
    fn inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for x in [
            delta(4, 4),
            Tensor::full(&[5, 3], 2.5).unwrap(),
            random(&[16, 16], &mut rng),
        ] {
            let back = idft2(&dft2(&x).unwrap());
            for (z, v) in back.data().iter().zip(x.data()) {
                assert!((z.re - v).abs() < 1e-9 && z.im.abs() < 1e-9);
            }
        }
    }

    #[test]
    fn parseval_examples() {
        assert_eq!(spectral_energy(&delta(4, 4)).unwrap(), (1.0, 1.0));
        assert_eq!(spectral_energy(&Tensor::zeros(&[3, 3]).unwrap()).unwrap(), (0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&[12, 12], &mut rng);
        let (a, b) = spectral_energy(&x).unwrap();
        assert!((a - b).abs() <= 1e-9 * a);
    }

    #[test]
    fn leaky_contraction_examples() {
        let pos = Tensor::from_fn(&[4, 4], |i| i as f64 + 0.5).unwrap();
        let r = theorem1_check(&pos, 0.2).unwrap();
        assert_eq!(r.lhs, r.rhs);
        assert!(r.holds);

        let neg = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        let r = theorem1_check(&neg, 0.5).unwrap();
        assert!((r.lhs - 0.5).abs() < 1e-15 && (r.rhs - 1.0).abs() < 1e-15 && r.holds);

        assert!(theorem1_check(&neg, 1.0).is_err());
    }

    #[test]
    fn convolution_theorem_trivial_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random(&[6, 7], &mut rng);
        let d = Tensor::from_fn(&[3, 3], |i| if i == 4 { 1.0 } else { 0.0 }).unwrap();
        let r = circular_conv_theorem_check(&x, &d).unwrap();
        assert!(r.holds);
        let emb = dft2(&embed_kernel(&d, 6, 7).unwrap()).unwrap();
        assert!(emb.data().iter().all(|z| (z - 1.0).norm() < 1e-12));

        let f = random(&[3, 3], &mut rng);
        let r = circular_conv_theorem_check(&delta(6, 7), &f).unwrap();
        assert!(r.holds);
    }

    #[test]
    fn zero_padding_breaks_the_convolution_theorem() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random(&[16, 16], &mut rng);
        let f = random(&[3, 3], &mut rng);
        assert!(circular_conv_theorem_check(&x, &f).unwrap().relative_gap() < 1e-8);
        let gap = zero_padding_conv_gap(&x, &f).unwrap();
        assert!(!gap.holds);
        assert!(gap.relative_gap() > 1e-3);
    }

    #[test]
    fn max_norm_slice_examples() {
        let single = ConvFilter::new(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64).unwrap(), None)
            .unwrap();
        assert_eq!(max_norm_slice(&single), single.slice(0, 0));

        let mut data = vec![0.0; 2];
        data[0] = 1.0;
        data[1] = -2.0;
        let two = ConvFilter::new(Tensor::new(vec![2, 1, 1, 1], data).unwrap(), None).unwrap();
        assert_eq!(max_norm_slice(&two).data(), &[-2.0]);

        let tied = ConvFilter::new(Tensor::ones(&[2, 2, 1, 1]).unwrap(), None).unwrap();
        assert_eq!(max_norm_slice_index(&tied), (0, 0));

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f = ConvFilter::new(random(&[4, 3, 3, 3], &mut rng), None).unwrap();
        let w = f.weights().data();
        let mut best = (0, f64::MIN);
        for s in 0..12 {
            let n: f64 = w[s * 9..(s + 1) * 9].iter().map(|v| v * v).sum();
            if n > best.1 {
                best = (s, n);
            }
        }
        assert_eq!(max_norm_slice(&f).data(), &w[best.0 * 9..(best.0 + 1) * 9]);
    }

    #[test]
    fn embedded_filter_norm_follows_parseval() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let f = ConvFilter::new(random(&[2, 3, 3, 3], &mut rng), None).unwrap();
        let spatial = tensor::frobenius_norm(&max_norm_slice(&f));
        let n = filter_spectral_norm(&f, 10, 12).unwrap();
        assert!((n - spatial * 120f64.sqrt()).abs() < 1e-10 * n);
    }

    proptest! {
        #[test]
        fn dft_is_linear(seed in 0u64..500, a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[6, 9], &mut rng);
            let y = random(&[6, 9], &mut rng);
            let mix = tensor::axpy(a, &x, &y.scale(b).unwrap()).unwrap();
            let lhs = dft2(&mix).unwrap();
            let (fx, fy) = (dft2(&x).unwrap(), dft2(&y).unwrap());
            for ((l, p), q) in lhs.data().iter().zip(fx.data()).zip(fy.data()) {
                prop_assert!((l - (p * a + q * b)).norm() < 1e-9);
            }
        }

        #[test]
        fn parseval_holds(seed in 0u64..500, h in 1usize..40, w in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&[h, w], &mut rng);
            let (a, b) = spectral_energy(&x).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn complex_sum_difference_norm_bound(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = dft2(&random(&[5, 4], &mut rng)).unwrap();
            let y = dft2(&random(&[5, 4], &mut rng)).unwrap();
            let bound = x.norm_sqr() + 2.0 * x.norm() * y.norm() + y.norm_sqr();
            prop_assert!(x.sub(&y).unwrap().norm_sqr() <= bound * (1.0 + 1e-12));
        }
    }
}
