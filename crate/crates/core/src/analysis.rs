//! Numerical checks of the feedback loop's stability argument, plus the
//! feature-energy statistics and heatmaps used to inspect trained models.
//!
//! Spectral norms here are Frobenius norms of unnormalized DFTs, so a
//! filter's norm is `sqrt(H·W)` times the Frobenius norm of its kernel.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::iff::{self, IffConfig};
use crate::spectral::{self, ComplexTensor};
use crate::tensor::{self, ConvFilter, PaddingMode, Tensor};
use crate::toydet::SceneObject;

pub const DEFAULT_BINS: usize = 50;

/// Relative tolerance on the quadratic bound.
pub const BOUND_SLACK: f64 = 1e-6;

/// Splits an observed feature map into an ideal part `n` and noise `δ`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealFeatureModel {
    n: Tensor,
    delta: Tensor,
}

impl IdealFeatureModel {
    pub fn new(n: Tensor, delta: Tensor) -> Result<Self> {
        if n.shape() != delta.shape() {
            return Err(Error::ShapeMismatch {
                op: "IdealFeatureModel",
                expected: n.shape().to_vec(),
                got: delta.shape().to_vec(),
            });
        }
        n.dims3()?;
        Ok(Self { n, delta })
    }

    /// `δ = x0 − n`.
    pub fn from_observation(x0: &Tensor, n: Tensor) -> Result<Self> {
        let delta = x0.sub(&n)?;
        Self::new(n, delta)
    }

    pub fn n(&self) -> &Tensor {
        &self.n
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    pub fn x0(&self) -> Result<Tensor> {
        self.n.add(&self.delta)
    }

    /// Spectrum of the ideal head output `w1 ⊛ n` (circular, no bias).
    pub fn ideal_output_spectrum(&self, w1: &ConvFilter) -> Result<ComplexTensor> {
        let y = tensor::conv2d(&self.n, w1, PaddingMode::Circular)?;
        spectral::dft2(&y)
    }
}

/// `‖Y − Y_N‖²`.
pub fn lyapunov(y: &ComplexTensor, y_n: &ComplexTensor) -> Result<f64> {
    Ok(y.sub(y_n)?.norm_sqr())
}

/// Coefficients of the quadratic `A·u² + B·u + C` bounding the one-step
/// change of the Lyapunov function in terms of `u = ‖X_k‖`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityConstants {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Deviation threshold `‖X_k − N‖ > ε` past which the bound is
    /// negative. Only defined when `a < 0`.
    pub epsilon: Option<f64>,
    pub w1_norm: f64,
    pub w2_norm: f64,
    pub n_norm: f64,
    pub delta_norm: f64,
}

impl StabilityConstants {
    pub fn bound(&self, x_norm: f64) -> f64 {
        self.a * x_norm * x_norm + self.b * x_norm + self.c
    }

    /// Largest magnitude among the three bound terms, for relative slack.
    fn scale(&self, x_norm: f64) -> f64 {
        (self.a * x_norm * x_norm)
            .abs()
            .max((self.b * x_norm).abs())
            .max(self.c.abs())
    }
}

/// Filter norms come from each filter's max-norm 2D slice embedded on the
/// feature grid; `N` and `Δ` norms are root-sum-square over channels.
pub fn stability_constants(
    w1: &ConvFilter,
    w2: &ConvFilter,
    n: &Tensor,
    delta: &Tensor,
) -> Result<StabilityConstants> {
    let (_, h, w) = n.dims3()?;
    let s = spectral::filter_spectral_norm(w1, h, w)?;
    if s == 0.0 {
        return Err(Error::ZeroFilter);
    }
    let t = spectral::filter_spectral_norm(w2, h, w)?;
    let n_norm = spectral::spectral_norm(n)?;
    let delta_norm = spectral::spectral_norm(delta)?;
    let s2 = s * s;
    let a = s2 * (s2 * t * t - 1.0);
    let b = 2.0 * (s2 * n_norm + s2 * s * delta_norm * t);
    let c = s2 * (delta_norm * delta_norm - n_norm * n_norm);
    let epsilon = (a < 0.0).then(|| {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return 0.0;
        }
        // With a < 0 this is the larger root.
        let root = (-b - disc.sqrt()) / (2.0 * a);
        if root < 0.0 {
            0.0
        } else {
            // ‖X‖ ≥ ‖X − N‖ − ‖N‖ turns a bound on ‖X‖ into one on the deviation.
            root + n_norm
        }
    });
    Ok(StabilityConstants {
        a,
        b,
        c,
        epsilon,
        w1_norm: s,
        w2_norm: t,
        n_norm,
        delta_norm,
    })
}

/// `A` for the same head pair on several feature extents, with the
/// contraction rescale applied per extent.
pub fn multiscale_a(w1: &ConvFilter, w2: &ConvFilter, extents: &[usize]) -> Result<Vec<f64>> {
    extents
        .iter()
        .map(|&e| {
            let w2e = iff::contraction_rescale(w1, w2, e, e)?;
            let z = Tensor::zeros(&[1, e, e])?;
            Ok(stability_constants(w1, &w2e, &z, &z)?.a)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    /// `‖X_k‖`.
    pub x_norm: f64,
    /// `‖X_k − N‖`.
    pub deviation: f64,
    pub v: f64,
    pub v_next: f64,
    pub v_prime: f64,
    pub bound: f64,
    pub slack: f64,
    /// Relative slack violation of the quadratic bound.
    pub violated: bool,
    /// Deviation exceeded ε, so `V` must not increase.
    pub triggered: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub constants: StabilityConstants,
    /// `A < 0`. When false nothing is asserted and no violations are
    /// counted.
    pub hypothesis_met: bool,
    /// `V(Y_k)` for `k = 0..=steps`.
    pub v_trajectory: Vec<f64>,
    pub steps: Vec<StepRecord>,
    pub violations: usize,
    pub theorem2_triggers: usize,
    /// Triggered steps on which `V` still increased.
    pub theorem2_violations: usize,
}

impl StabilityReport {
    pub fn bound_slack(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.slack).collect()
    }

    /// One row per step, then a `#` summary line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("k,V,V',bound,slack\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{},{},{}", r.k, r.v, r.v_prime, r.bound, r.slack);
        }
        let c = &self.constants;
        let eps = c.epsilon.map_or("none".to_string(), |e| e.to_string());
        let _ = writeln!(
            s,
            "# A={},B={},C={},epsilon={},violations={},hypothesis_met={},theorem2_triggers={},theorem2_violations={}",
            c.a, c.b, c.c, eps, self.violations, self.hypothesis_met, self.theorem2_triggers, self.theorem2_violations
        );
        s
    }
}

fn single_channel(f: &ConvFilter, name: &str) -> Result<()> {
    if f.out_channels() != 1 || f.in_channels() != 1 || f.bias().is_some() {
        return Err(Error::InvalidArgument(format!(
            "{name} must be a bias-free single-channel filter; reduce with max_norm_slice_system first"
        )));
    }
    Ok(())
}

/// Runs the loop for `steps` iterations from `x0` and compares each
/// one-step change `V(Y_{k+1}) − V(Y_k)` with the quadratic bound.
///
/// Requires circular padding, where convolution is exactly a spectral
/// product, and bias-free 1→1 filters. With `cfg.enforce_contraction` the
/// feedback filter is rescaled first and the constants use the rescaled
/// filter.
pub fn bound_check(
    x0: &Tensor,
    w1: &ConvFilter,
    w2: &ConvFilter,
    cfg: &IffConfig,
    ideal: &IdealFeatureModel,
    steps: usize,
) -> Result<StabilityReport> {
    cfg.validate()?;
    if cfg.pad != PaddingMode::Circular {
        return Err(Error::InvalidArgument(
            "bound_check needs circular padding".into(),
        ));
    }
    single_channel(w1, "w1")?;
    single_channel(w2, "w2")?;
    let recon = ideal.x0()?;
    if recon.shape() != x0.shape() || recon.max_abs_diff(x0)? > 1e-12 {
        return Err(Error::InvalidArgument("n + δ does not reproduce x0".into()));
    }
    let (_, h, w) = x0.dims3()?;
    let w2 = if cfg.enforce_contraction {
        iff::contraction_rescale(w1, w2, h, w)?
    } else {
        w2.clone()
    };
    let constants = stability_constants(w1, &w2, ideal.n(), ideal.delta())?;
    let hypothesis_met = constants.a < 0.0;

    let run_cfg = IffConfig {
        iterations: steps,
        enforce_contraction: false,
        ..*cfg
    };
    let traj = iff::iff_forward(x0, w1, &w2, &run_cfg)?;
    let y_n = ideal.ideal_output_spectrum(w1)?;
    let v_trajectory: Vec<f64> = traj
        .states()
        .iter()
        .map(|s| lyapunov(&spectral::dft2(&s.y)?, &y_n))
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(steps);
    for (k, state) in traj.states()[..steps].iter().enumerate() {
        let x_norm = spectral::spectral_norm(&state.x)?;
        let deviation = spectral::spectral_norm(&state.x.sub(ideal.n())?)?;
        let (v, v_next) = (v_trajectory[k], v_trajectory[k + 1]);
        let v_prime = v_next - v;
        let bound = constants.bound(x_norm);
        let slack = bound - v_prime;
        let scale = constants.scale(x_norm).max(v).max(v_next);
        let triggered = hypothesis_met && constants.epsilon.is_some_and(|e| deviation > e);
        records.push(StepRecord {
            k,
            x_norm,
            deviation,
            v,
            v_next,
            v_prime,
            bound,
            slack,
            violated: hypothesis_met && slack < -BOUND_SLACK * scale,
            triggered,
        });
    }
    let violations = records.iter().filter(|r| r.violated).count();
    let theorem2_triggers = records.iter().filter(|r| r.triggered).count();
    let theorem2_violations = records
        .iter()
        .filter(|r| r.triggered && r.v_prime > 1e-12 * r.v.max(r.v_next))
        .count();
    Ok(StabilityReport {
        constants,
        hypothesis_met,
        v_trajectory,
        steps: records,
        violations,
        theorem2_triggers,
        theorem2_violations,
    })
}

/// Single-channel stand-in for a multi-channel head: the max-norm slices
/// of both filters and the matching input channel of the features.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSystem {
    pub w1: ConvFilter,
    pub w2: ConvFilter,
    pub x0: Tensor,
    pub n: Tensor,
    /// `(out, in)` slice indices of `w1` and `w2`.
    pub w1_slice: (usize, usize),
    pub w2_slice: (usize, usize),
}

pub fn max_norm_slice_system(
    w1: &ConvFilter,
    w2: &ConvFilter,
    x0: &Tensor,
    n: &Tensor,
) -> Result<SliceSystem> {
    let as_filter = |f: &ConvFilter, (o, i): (usize, usize)| {
        let (kh, kw) = f.kernel();
        ConvFilter::new(f.slice(o, i).reshape(&[1, 1, kh, kw])?, None)
    };
    let s1 = spectral::max_norm_slice_index(w1);
    let s2 = spectral::max_norm_slice_index(w2);
    let (_, h, w) = x0.dims3()?;
    Ok(SliceSystem {
        w1: as_filter(w1, s1)?,
        w2: as_filter(w2, s2)?,
        x0: x0.channel(s1.1)?.reshape(&[1, h, w])?,
        n: n.channel(s1.1)?.reshape(&[1, h, w])?,
        w1_slice: s1,
        w2_slice: s2,
    })
}

/// Channel sum followed by min-max scaling to `[0, 1]`. A constant map
/// becomes all zeros.
pub fn normalized_energy(feature: &Tensor) -> Result<Tensor> {
    let sum = feature.channel_sum()?;
    let (lo, hi) = sum
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let range = hi - lo;
    let data = sum
        .data()
        .iter()
        .map(|&v| if range > 0.0 { (v - lo) / range } else { 0.0 })
        .collect();
    Tensor::new(sum.shape().to_vec(), data)
}

/// Marks grid cells of an `h×w` map whose centre lies inside any box given
/// in `image_size` pixel coordinates.
pub fn box_mask(objects: &[SceneObject], h: usize, w: usize, image_size: usize) -> Vec<bool> {
    let (sy, sx) = (image_size as f64 / h as f64, image_size as f64 / w as f64);
    let mut mask = vec![false; h * w];
    for r in 0..h {
        for c in 0..w {
            let (px, py) = ((c as f64 + 0.5) * sx, (r as f64 + 0.5) * sy);
            mask[r * w + c] = objects.iter().any(|o| o.bbox.contains(px, py));
        }
    }
    mask
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyHistogram {
    pub bins: usize,
    /// Probability mass per bin; `None` when no pixel fell in the class.
    pub background: Option<Vec<f64>>,
    pub foreground: Option<Vec<f64>>,
    pub background_mean: Option<f64>,
    pub foreground_mean: Option<f64>,
}

impl EnergyHistogram {
    pub fn bin_centers(&self) -> Vec<f64> {
        (0..self.bins)
            .map(|i| (i as f64 + 0.5) / self.bins as f64)
            .collect()
    }

    /// `bin_center,bg_mass,fg_mass`; an empty class leaves its column blank.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_center,bg_mass,fg_mass\n");
        let cell = |d: &Option<Vec<f64>>, i: usize| d.as_ref().map(|v| v[i].to_string()).unwrap_or_default();
        for (i, c) in self.bin_centers().iter().enumerate() {
            let _ = writeln!(s, "{c},{},{}", cell(&self.background, i), cell(&self.foreground, i));
        }
        s
    }
}

/// Histograms of normalized energy split into background and foreground
/// pixels, pooled over all feature maps.
pub fn energy_histogram(features: &[Tensor], fg_masks: &[Vec<bool>], bins: usize) -> Result<EnergyHistogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    if features.len() != fg_masks.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature maps but {} masks",
            features.len(),
            fg_masks.len()
        )));
    }
    let mut counts = [vec![0usize; bins], vec![0usize; bins]];
    let mut sums = [0.0f64; 2];
    for (f, mask) in features.iter().zip(fg_masks) {
        let e = normalized_energy(f)?;
        if e.len() != mask.len() {
            return Err(Error::ShapeMismatch {
                op: "energy_histogram",
                expected: e.shape().to_vec(),
                got: vec![mask.len()],
            });
        }
        for (&v, &fg) in e.data().iter().zip(mask) {
            let bin = ((v * bins as f64) as usize).min(bins - 1);
            counts[fg as usize][bin] += 1;
            sums[fg as usize] += v;
        }
    }
    let finish = |c: &[usize], sum: f64| {
        let total: usize = c.iter().sum();
        if total == 0 {
            (None, None)
        } else {
            (
                Some(c.iter().map(|&k| k as f64 / total as f64).collect()),
                Some(sum / total as f64),
            )
        }
    };
    let (background, background_mean) = finish(&counts[0], sums[0]);
    let (foreground, foreground_mean) = finish(&counts[1], sums[1]);
    Ok(EnergyHistogram {
        bins,
        background,
        foreground,
        background_mean,
        foreground_mean,
    })
}

/// 8-bit grayscale raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM (`P5`, maxval 255).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::Format("not an 8-bit binary PGM".into());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad());
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad())?);
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad());
        if fields[0] != "P5" || num(fields[3])? != 255 {
            return Err(bad());
        }
        let (width, height) = (num(fields[1])?, num(fields[2])?);
        let pixels = bytes.get(pos + 1..).ok_or_else(bad)?.to_vec();
        if pixels.len() != width * height {
            return Err(bad());
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }
}

/// Channel sum, min-max normalization, nearest-neighbour upsampling to
/// `out_h × out_w`, then quantization to 8 bits.
pub fn heatmap_export(feature: &Tensor, out_h: usize, out_w: usize) -> Result<GrayImage> {
    if feature.rank() != 3 {
        return Err(Error::InvalidShape {
            shape: feature.shape().to_vec(),
            reason: "heatmaps need a [C, H, W] feature".into(),
        });
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("output size must be positive".into()));
    }
    let e = normalized_energy(feature)?;
    let (h, w) = (e.shape()[0], e.shape()[1]);
    let mut pixels = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let sr = r * h / out_h;
        for c in 0..out_w {
            let sc = c * w / out_w;
            pixels.push((e.data()[sr * w + sc] * 255.0).round() as u8);
        }
    }
    Ok(GrayImage {
        width: out_w,
        height: out_h,
        pixels,
    })
}
