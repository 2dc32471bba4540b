use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::iff::IffConfig;
use crate::tensor::Tensor;
use crate::toydet::{self, DecodeParams, DetectionLoss, DetectorModel, GridTargets, SyntheticScene};

use super::optim::Sgd;
use super::params::ModelParams;
use super::tape::{GradTape, NodeId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Half-cosine decay from `base` at the first epoch to `floor` at the last.
    Cosine { base: f64, floor: f64 },
}

impl LrSchedule {
    /// Rate for a zero-based epoch out of `total`.
    pub fn at(&self, epoch: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Cosine { base, floor } => {
                if total <= 1 {
                    return base;
                }
                let t = epoch as f64 / (total - 1) as f64;
                floor + 0.5 * (base - floor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant(lr) => lr >= 0.0 && lr.is_finite(),
            LrSchedule::Cosine { base, floor } => {
                floor >= 0.0 && base >= floor && base.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid learning-rate schedule {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub momentum: f64,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffling.
    pub seed: u64,
    /// Rescales the batch gradient when its global norm exceeds this.
    pub clip_norm: Option<f64>,
    /// Stop once the loss moves less than 1e-4 (relative) over 5 epochs.
    pub early_stop: bool,
    /// Number of leading training scenes used for the per-epoch mAP
    /// estimate; zero disables it.
    pub map_probe: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            schedule: LrSchedule::Constant(1e-3),
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            clip_norm: Some(10.0),
            early_stop: true,
            map_probe: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-image loss. Epoch 0 is the untrained model over the full
    /// set; later epochs average the minibatch losses seen while training.
    pub loss: f64,
    pub map_estimate: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    pub curve: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn final_loss(&self) -> f64 {
        self.curve.last().map_or(f64::NAN, |r| r.loss)
    }

    /// `epoch,loss,map_estimate` with an empty field where no estimate was
    /// taken.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("epoch,loss,map_estimate\n");
        for r in &self.curve {
            let m = r.map_estimate.map(|m| m.to_string()).unwrap_or_default();
            s.push_str(&format!("{},{},{}\n", r.epoch, r.loss, m));
        }
        s
    }
}

const EARLY_STOP_WINDOW: usize = 5;
const EARLY_STOP_TOL: f64 = 1e-4;

/// Records the unrolled detector and its loss on the final head output.
pub fn record_objective(
    params: &ModelParams,
    image: &Tensor,
    targets: GridTargets,
    cfg: &IffConfig,
) -> Result<(GradTape, NodeId)> {
    let mut tape = GradTape::new();
    let states = DetectorModel::forward_tape(params, &mut tape, image, cfg)?;
    let (_, y_last) = *states.last().expect("at least one state");
    let loss = tape.loss(y_last, Arc::new(DetectionLoss::new(targets)))?;
    Ok((tape, loss))
}

fn sample_grad(
    params: &ModelParams,
    image: &Tensor,
    targets: &GridTargets,
    cfg: &IffConfig,
) -> Result<(f64, ModelParams)> {
    let (tape, loss) = record_objective(params, image, targets.clone(), cfg)?;
    let grads = tape.backward(loss, params)?;
    Ok((tape.value(loss).data()[0], grads))
}

fn global_norm(p: &ModelParams) -> f64 {
    p.iter()
        .flat_map(|(_, t)| t.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

fn check_finite(epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged { epoch, loss })
    }
}

/// Mean per-image loss of a model over scenes, without gradients.
pub fn mean_loss(model: &DetectorModel, data: &[SyntheticScene], cfg: &IffConfig) -> Result<f64> {
    let losses: Vec<f64> = data
        .par_iter()
        .map(|s| {
            let y = model.forward(&s.image, cfg)?;
            let loss = DetectionLoss::new(GridTargets::from_objects(&s.objects));
            Ok(crate::traingraph::ScalarLoss::evaluate(&loss, y.output())?.0)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// mAP over scenes at the evaluation score threshold.
pub fn estimate_map(model: &DetectorModel, data: &[SyntheticScene], cfg: &IffConfig) -> Result<f64> {
    let params = DecodeParams::for_evaluation();
    let dets: Vec<_> = data
        .par_iter()
        .map(|s| toydet::detect(model, &s.image, cfg, &params))
        .collect::<Result<_>>()?;
    let gts: Vec<_> = data.iter().map(|s| s.objects.clone()).collect();
    toydet::eval_map(&dets, &gts, 0.5)
}

/// Minibatch SGD through the unrolled loop. Every step runs the
/// `cfg.iterations` feedback passes, scores the last head output and
/// backpropagates through all of them. Per-sample gradients are computed in
/// parallel and summed in batch order, so results do not depend on the
/// thread count.
pub fn train(
    model: &DetectorModel,
    data: &[SyntheticScene],
    cfg: &IffConfig,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if tc.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    tc.schedule.validate()?;
    cfg.validate()?;
    let mut opt = Sgd::new(tc.momentum)?;
    let targets: Vec<GridTargets> = data.iter().map(|s| GridTargets::from_objects(&s.objects)).collect();
    let probe = &data[..tc.map_probe.min(data.len())];
    let map_of = |m: &DetectorModel| -> Result<Option<f64>> {
        if probe.is_empty() {
            Ok(None)
        } else {
            estimate_map(m, probe, cfg).map(Some)
        }
    };

    let mut current = model.clone();
    let initial = mean_loss(&current, data, cfg)?;
    check_finite(0, initial)?;
    let mut curve = vec![EpochRecord {
        epoch: 0,
        loss: initial,
        map_estimate: map_of(&current)?,
    }];

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut params = current.params().clone();
    let mut stopped_early = false;
    for epoch in 1..=tc.epochs {
        let lr = tc.schedule.at(epoch - 1, tc.epochs);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(tc.batch_size) {
            let per_sample: Vec<(f64, ModelParams)> = batch
                .par_iter()
                .map(|&i| sample_grad(&params, &data[i].image, &targets[i], cfg))
                .collect::<Result<_>>()?;
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for (l, g) in &per_sample {
                batch_loss += l;
                grads.add_scaled(1.0, g)?;
            }
            check_finite(epoch, batch_loss)?;
            total += batch_loss;
            grads.scale(1.0 / batch.len() as f64);
            if let Some(max) = tc.clip_norm {
                let n = global_norm(&grads);
                if n > max {
                    grads.scale(max / n);
                }
            }
            opt.step(&mut params, &grads, lr)?;
        }
        let loss = total / data.len() as f64;
        check_finite(epoch, loss)?;
        current = DetectorModel::from_params(params.clone())?;
        curve.push(EpochRecord {
            epoch,
            loss,
            map_estimate: map_of(&current)?,
        });
        if tc.early_stop && curve.len() > EARLY_STOP_WINDOW {
            let then = curve[curve.len() - 1 - EARLY_STOP_WINDOW].loss;
            if ((then - loss) / then).abs() < EARLY_STOP_TOL {
                stopped_early = true;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: current,
        curve,
        stopped_early,
    })
}
