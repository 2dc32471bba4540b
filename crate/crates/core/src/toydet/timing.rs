use std::time::Instant;

use crate::error::{Error, Result};
use crate::iff::IffConfig;
use crate::tensor::Tensor;

use super::detect::{detect, DecodeParams};
use super::model::DetectorModel;

pub const MIN_TIMING_IMAGES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingReport {
    /// Mean seconds per image under the reference configuration.
    pub baseline: f64,
    /// Mean seconds per image under the compared configuration.
    pub candidate: f64,
}

impl TimingReport {
    pub fn ratio(&self) -> f64 {
        self.candidate / self.baseline
    }
}

fn mean_latency(model: &DetectorModel, images: &[Tensor], cfg: &IffConfig) -> Result<f64> {
    let params = DecodeParams::default();
    let start = Instant::now();
    for img in images {
        std::hint::black_box(detect(model, img, cfg, &params)?);
    }
    Ok(start.elapsed().as_secs_f64() / images.len() as f64)
}

/// End-to-end per-image detection latency of `candidate` against
/// `baseline`. Runs `rounds` interleaved passes over all images and keeps
/// the fastest mean of each, which filters out scheduler noise.
pub fn timing_probe(
    model: &DetectorModel,
    images: &[Tensor],
    baseline: &IffConfig,
    candidate: &IffConfig,
    rounds: usize,
) -> Result<TimingReport> {
    if images.len() < MIN_TIMING_IMAGES {
        return Err(Error::InvalidArgument(format!(
            "timing needs at least {MIN_TIMING_IMAGES} images, got {}",
            images.len()
        )));
    }
    // Warm caches and allocator before measuring.
    mean_latency(model, &images[..10], candidate)?;
    let mut best = (f64::INFINITY, f64::INFINITY);
    for r in 0..rounds.max(1) {
        // Alternate which configuration goes first.
        let (a, b) = if r % 2 == 0 {
            let a = mean_latency(model, images, baseline)?;
            (a, mean_latency(model, images, candidate)?)
        } else {
            let b = mean_latency(model, images, candidate)?;
            (mean_latency(model, images, baseline)?, b)
        };
        best = (best.0.min(a), best.1.min(b));
    }
    Ok(TimingReport {
        baseline: best.0,
        candidate: best.1,
    })
}
