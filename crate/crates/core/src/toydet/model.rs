use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::iff::{self, IffConfig, IffTrajectory};
use crate::tensor::{self, ConvFilter, PaddingMode, Tensor};
use crate::traingraph::{GradTape, ModelParams, NodeId};

pub const IMAGE_SIZE: usize = 48;
pub const GRID: usize = 12;
pub const CELL: f64 = (IMAGE_SIZE / GRID) as f64;
/// Side of the single box prior, in pixels.
pub const PRIOR: f64 = 16.0;
pub const NUM_CLASSES: usize = 2;
/// Objectness, four box offsets, class logits.
pub const HEAD_CHANNELS: usize = 1 + 4 + NUM_CLASSES;
pub const FEATURE_CHANNELS: usize = 16;
/// Upper bound on the feedback filter's share of all parameters.
pub const MAX_FEEDBACK_FRACTION: f64 = 0.02;

pub const W1: &str = "head.w1.weight";
pub const W1_BIAS: &str = "head.w1.bias";
pub const W2: &str = "feedback.w2.weight";

/// Backbone layers as `(weight name, bias name, out, in, kernel)`. Each
/// layer is conv + leaky; the first two are followed by 2×2 pooling.
const BACKBONE: [(&str, &str, usize, usize, usize); 3] = [
    ("backbone.conv1.weight", "backbone.conv1.bias", 8, 1, 3),
    ("backbone.conv2.weight", "backbone.conv2.bias", 16, 8, 3),
    ("backbone.conv3.weight", "backbone.conv3.bias", FEATURE_CHANNELS, 16, 5),
];

/// Filter geometry of the head and feedback path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelArch {
    pub head_kernel: usize,
    pub feedback_kernel: usize,
}

impl Default for ModelArch {
    fn default() -> Self {
        Self {
            head_kernel: 3,
            feedback_kernel: 1,
        }
    }
}

/// Tiny single-scale detector: three-layer backbone to a 12×12 grid, a
/// one-convolution head `w1` and the feedback filter `w2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    params: ModelParams,
    arch: ModelArch,
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

impl DetectorModel {
    /// He-initialized backbone and head, zero feedback filter, zero biases.
    pub fn new(seed: u64, arch: ModelArch) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ModelParams::new();
        for (w, b, out, inp, k) in BACKBONE {
            params.insert(w, he_normal(&[out, inp, k, k], inp * k * k, &mut rng)?)?;
            params.insert(b, Tensor::zeros(&[out])?)?;
        }
        let hk = arch.head_kernel;
        params.insert(
            W1,
            he_normal(&[HEAD_CHANNELS, FEATURE_CHANNELS, hk, hk], FEATURE_CHANNELS * hk * hk, &mut rng)?,
        )?;
        params.insert(W1_BIAS, Tensor::zeros(&[HEAD_CHANNELS])?)?;
        let fk = arch.feedback_kernel;
        params.insert(W2, Tensor::zeros(&[FEATURE_CHANNELS, HEAD_CHANNELS, fk, fk])?)?;
        Self::from_params(params)
    }

    /// Validates names and shapes and enforces the feedback parameter budget.
    pub fn from_params(params: ModelParams) -> Result<Self> {
        let mut expected: Vec<(&str, Vec<usize>)> = Vec::new();
        for (w, b, out, inp, k) in BACKBONE {
            expected.push((w, vec![out, inp, k, k]));
            expected.push((b, vec![out]));
        }
        let w1 = params.require(W1)?.shape().to_vec();
        let w2 = params.require(W2)?.shape().to_vec();
        if w1.len() != 4 || w2.len() != 4 {
            return Err(Error::Format("head filters must be rank 4".into()));
        }
        let arch = ModelArch {
            head_kernel: w1[2],
            feedback_kernel: w2[2],
        };
        let (hk, fk) = (arch.head_kernel, arch.feedback_kernel);
        expected.push((W1, vec![HEAD_CHANNELS, FEATURE_CHANNELS, hk, hk]));
        expected.push((W1_BIAS, vec![HEAD_CHANNELS]));
        expected.push((W2, vec![FEATURE_CHANNELS, HEAD_CHANNELS, fk, fk]));
        if params.len() != expected.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let t = params.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "DetectorModel::from_params",
                    expected: shape.clone(),
                    got: t.shape().to_vec(),
                });
            }
        }
        let model = Self { params, arch };
        let frac = model.feedback_fraction();
        if frac >= MAX_FEEDBACK_FRACTION {
            return Err(Error::InvalidArgument(format!(
                "feedback filter is {:.2}% of parameters (limit {:.0}%)",
                100.0 * frac,
                100.0 * MAX_FEEDBACK_FRACTION
            )));
        }
        Ok(model)
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn into_params(self) -> ModelParams {
        self.params
    }

    pub fn arch(&self) -> ModelArch {
        self.arch
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Share of all scalar parameters held by `w2`.
    pub fn feedback_fraction(&self) -> f64 {
        let w2 = self.params.get(W2).map_or(0, Tensor::len);
        w2 as f64 / self.param_count() as f64
    }

    /// Copy with the feedback filter zeroed.
    pub fn without_feedback(&self) -> Self {
        let mut params = self.params.clone();
        let shape = params.get(W2).expect("validated").shape().to_vec();
        params
            .set(W2, Tensor::from_parts(shape.clone(), vec![0.0; shape.iter().product()]))
            .expect("same shape");
        Self {
            params,
            arch: self.arch,
        }
    }

    pub fn head_filters(&self) -> Result<(ConvFilter, ConvFilter)> {
        let w1 = ConvFilter::new(
            self.params.require(W1)?.clone(),
            Some(self.params.require(W1_BIAS)?.clone()),
        )?;
        let w2 = ConvFilter::new(self.params.require(W2)?.clone(), None)?;
        Ok((w1, w2))
    }

    /// Backbone features `x0` of shape `[16, 12, 12]`.
    pub fn backbone(&self, image: &Tensor, slope: f64) -> Result<Tensor> {
        if image.shape() != [1, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::ShapeMismatch {
                op: "DetectorModel::backbone",
                expected: vec![1, IMAGE_SIZE, IMAGE_SIZE],
                got: image.shape().to_vec(),
            });
        }
        let mut x = image.clone();
        for (i, (w, b, ..)) in BACKBONE.iter().enumerate() {
            let f = ConvFilter::new(
                self.params.require(w)?.clone(),
                Some(self.params.require(b)?.clone()),
            )?;
            x = tensor::leaky_relu(&tensor::conv2d(&x, &f, PaddingMode::Zero)?, slope)?;
            if i < 2 {
                x = tensor::avg_pool2(&x)?;
            }
        }
        Ok(x)
    }

    /// Backbone followed by the feedback loop.
    pub fn forward(&self, image: &Tensor, cfg: &IffConfig) -> Result<IffTrajectory> {
        let x0 = self.backbone(image, cfg.slope)?;
        let (w1, w2) = self.head_filters()?;
        iff::iff_forward(&x0, &w1, &w2, cfg)
    }

    /// Records the same computation as [`Self::forward`] on a tape, using
    /// `params` (same layout as this model) as the leaves. Returns the
    /// `(x_k, y_k)` node pairs.
    pub fn forward_tape(
        params: &ModelParams,
        tape: &mut GradTape,
        image: &Tensor,
        cfg: &IffConfig,
    ) -> Result<Vec<(NodeId, NodeId)>> {
        cfg.validate()?;
        if cfg.enforce_contraction {
            return Err(Error::InvalidArgument(
                "training runs the unconstrained loop".into(),
            ));
        }
        let mut x = tape.constant(image.clone());
        for (i, (w, b, ..)) in BACKBONE.iter().enumerate() {
            let wn = tape.param(params, w)?;
            let bn = tape.param(params, b)?;
            let c = tape.conv2d(x, wn, Some(bn), PaddingMode::Zero)?;
            x = tape.leaky_relu(c, cfg.slope)?;
            if i < 2 {
                x = tape.avg_pool2(x)?;
            }
        }
        let x0 = x;
        let w1 = tape.param(params, W1)?;
        let b1 = tape.param(params, W1_BIAS)?;
        let w2 = tape.param(params, W2)?;
        let mut states = Vec::with_capacity(cfg.iterations + 1);
        let mut xk = x0;
        for _ in 0..cfg.iterations {
            let y = tape.conv2d(xk, w1, Some(b1), cfg.pad)?;
            let a = tape.leaky_relu(y, cfg.slope)?;
            let fb = tape.conv2d(a, w2, None, cfg.pad)?;
            let next = tape.axpy(1.0, fb, x0)?;
            states.push((xk, y));
            xk = next;
        }
        let y = tape.conv2d(xk, w1, Some(b1), cfg.pad)?;
        states.push((xk, y));
        Ok(states)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feedback_filter_is_a_small_share() {
        let m = DetectorModel::new(1, ModelArch::default()).unwrap();
        assert!(m.feedback_fraction() < MAX_FEEDBACK_FRACTION);
        assert_eq!(m.param_count(), 80 + 1168 + 6416 + 1015 + 112);
    }

    #[test]
    fn oversized_feedback_filter_is_rejected() {
        let arch = ModelArch {
            head_kernel: 3,
            feedback_kernel: 3,
        };
        assert!(DetectorModel::new(1, arch).is_err());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let m = DetectorModel::new(3, ModelArch::default()).unwrap();
        let m = {
            let mut p = m.params().clone();
            let w2 = Tensor::from_fn(&[16, 7, 1, 1], |i| ((i % 5) as f64 - 2.0) * 0.05).unwrap();
            p.set(W2, w2).unwrap();
            DetectorModel::from_params(p).unwrap()
        };
        let img = Tensor::from_fn(&[1, 48, 48], |i| ((i * 37) % 101) as f64 / 101.0).unwrap();
        let cfg = IffConfig::with_iterations(2);
        let plain = m.forward(&img, &cfg).unwrap();
        let mut tape = GradTape::new();
        let nodes = DetectorModel::forward_tape(m.params(), &mut tape, &img, &cfg).unwrap();
        assert_eq!(nodes.len(), 3);
        for ((x, y), s) in nodes.iter().zip(plain.states()) {
            assert_eq!(tape.value(*x), &s.x);
            assert_eq!(tape.value(*y), &s.y);
        }
        assert_eq!(plain.output().shape(), &[HEAD_CHANNELS, GRID, GRID]);
    }

    #[test]
    fn wrong_image_shape() {
        let m = DetectorModel::new(3, ModelArch::default()).unwrap();
        assert!(m.backbone(&Tensor::zeros(&[1, 32, 32]).unwrap(), 0.1).is_err());
    }
}
