//! The closed feedback loop around a detection head.
//!
//! Starting from backbone features `x0`, each iteration evaluates the head
//! `y_k = w1 ⊗ x_k` and feeds its activated output back through `w2`:
//! `x_{k+1} = x0 + w2 ⊗ h(y_k)`. The feedback is always added to the
//! original `x0`, never to the previous state.

use crate::error::{Error, Result};
use crate::spectral;
use crate::tensor::{self, ConvFilter, PaddingMode, Tensor, DEFAULT_SLOPE};

/// Target for `‖W1‖²‖W2‖²` when the contraction is enforced.
pub const CONTRACTION_TARGET: f64 = 0.81;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IffConfig {
    /// Number of feedback iterations. Zero is the open-loop detector.
    pub iterations: usize,
    /// Leaky slope shared by every activation.
    pub slope: f64,
    pub pad: PaddingMode,
    /// Rescale `w2` so that `‖W1‖²‖W2‖² < 1` before running.
    pub enforce_contraction: bool,
}

impl Default for IffConfig {
    fn default() -> Self {
        Self {
            iterations: 1,
            slope: DEFAULT_SLOPE,
            pad: PaddingMode::Zero,
            enforce_contraction: false,
        }
    }
}

impl IffConfig {
    pub fn with_iterations(iterations: usize) -> Self {
        Self {
            iterations,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.slope > 0.0 && self.slope < 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidSlope(self.slope))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IffState {
    pub x: Tensor,
    pub y: Tensor,
}

/// The states `(x_k, y_k)` for `k = 0..=iterations`.
#[derive(Debug, Clone, PartialEq)]
pub struct IffTrajectory {
    states: Vec<IffState>,
}

impl IffTrajectory {
    pub fn states(&self) -> &[IffState] {
        &self.states
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// The head output used for the final prediction.
    pub fn output(&self) -> &Tensor {
        &self.states.last().expect("trajectory is never empty").y
    }

    /// The refined feature map fed to the last head evaluation.
    pub fn refined_features(&self) -> &Tensor {
        &self.states.last().expect("trajectory is never empty").x
    }

    pub fn into_states(self) -> Vec<IffState> {
        self.states
    }
}

fn check_composition(w1: &ConvFilter, w2: &ConvFilter) -> Result<()> {
    if w2.in_channels() != w1.out_channels() || w2.out_channels() != w1.in_channels() {
        return Err(Error::ShapeMismatch {
            op: "iff_forward (w2 must map head outputs back to features)",
            expected: vec![w1.in_channels(), w1.out_channels()],
            got: vec![w2.out_channels(), w2.in_channels()],
        });
    }
    Ok(())
}

/// Runs the feedback loop and records every state.
pub fn iff_forward(
    x0: &Tensor,
    w1: &ConvFilter,
    w2: &ConvFilter,
    cfg: &IffConfig,
) -> Result<IffTrajectory> {
    cfg.validate()?;
    check_composition(w1, w2)?;
    let rescaled;
    let w2 = if cfg.enforce_contraction {
        let (_, h, w) = x0.dims3()?;
        rescaled = contraction_rescale(w1, w2, h, w)?;
        &rescaled
    } else {
        w2
    };

    let mut states = Vec::with_capacity(cfg.iterations + 1);
    let mut x = x0.clone();
    for _ in 0..cfg.iterations {
        let y = tensor::conv2d(&x, w1, cfg.pad)?;
        let feedback = tensor::conv2d(&tensor::leaky_relu(&y, cfg.slope)?, w2, cfg.pad)?;
        let next = tensor::axpy(1.0, &feedback, x0)?;
        states.push(IffState { x, y });
        x = next;
    }
    let y = tensor::conv2d(&x, w1, cfg.pad)?;
    states.push(IffState { x, y });
    Ok(IffTrajectory { states })
}

/// One `(w1, w2)` pair per prediction scale, each looped independently.
pub fn iff_forward_multiscale(
    features: &[Tensor],
    heads: &[(ConvFilter, ConvFilter)],
    cfg: &IffConfig,
) -> Result<Vec<IffTrajectory>> {
    if features.len() != heads.len() {
        return Err(Error::InvalidArgument(format!(
            "{} feature maps but {} head pairs",
            features.len(),
            heads.len()
        )));
    }
    features
        .iter()
        .zip(heads)
        .map(|(x, (w1, w2))| iff_forward(x, w1, w2, cfg))
        .collect()
}

/// Spectral norms `(‖W1‖, ‖W2‖)` of the max-norm slices embedded on an
/// `H×W` grid.
pub fn head_spectral_norms(
    w1: &ConvFilter,
    w2: &ConvFilter,
    h: usize,
    w: usize,
) -> Result<(f64, f64)> {
    Ok((
        spectral::filter_spectral_norm(w1, h, w)?,
        spectral::filter_spectral_norm(w2, h, w)?,
    ))
}

/// Scales `w2` so that `‖W1‖²‖W2‖²` equals [`CONTRACTION_TARGET`] when it
/// was at least one; otherwise returns `w2` unchanged.
pub fn contraction_rescale(
    w1: &ConvFilter,
    w2: &ConvFilter,
    h: usize,
    w: usize,
) -> Result<ConvFilter> {
    let (n1, n2) = head_spectral_norms(w1, w2, h, w)?;
    if n1 == 0.0 {
        return Err(Error::ZeroFilter);
    }
    let product = n1 * n1 * n2 * n2;
    if product < 1.0 {
        return Ok(w2.clone());
    }
    w2.scaled((CONTRACTION_TARGET / product).sqrt())
}
