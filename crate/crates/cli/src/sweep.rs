//! Train-and-evaluate sweep over feedback depths.

use std::fmt::Write as _;

use iff_core::iff::IffConfig;
use iff_core::toydet::{DetectorModel, ModelArch, SyntheticScene};
use iff_core::traingraph::{estimate_map, train, TrainConfig};
use iff_core::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub mi_list: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Template; its `seed` is replaced per run.
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub mi: usize,
    pub seed: u64,
    pub map: f64,
    pub final_loss: f64,
    pub epochs_run: usize,
    /// The same trained weights evaluated with `w2` zeroed at depth `mi`.
    pub map_w2_zeroed: f64,
    /// The same trained weights evaluated open-loop.
    pub map_open_loop: f64,
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub row: SweepRow,
    pub model: DetectorModel,
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Trains one model per `(seed, M_I)` pair from the same seed-determined
/// initialization and scores it on `test` at its training depth.
pub fn run_sweep(
    train_set: &[SyntheticScene],
    test_set: &[SyntheticScene],
    cfg: &SweepConfig,
    mut log: impl FnMut(&str),
) -> Result<Vec<SweepRun>> {
    if cfg.mi_list.is_empty() || cfg.seeds.is_empty() {
        return Err(Error::InvalidArgument("sweep needs at least one depth and one seed".into()));
    }
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let init = DetectorModel::new(seed, ModelArch::default())?;
        for &mi in &cfg.mi_list {
            let iff = IffConfig::with_iterations(mi);
            let tc = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let out = train(&init, train_set, &iff, &tc)?;
            let model = out.model.clone();
            let map = estimate_map(&model, test_set, &iff)?;
            let map_w2_zeroed = estimate_map(&model.without_feedback(), test_set, &iff)?;
            let map_open_loop = estimate_map(&model, test_set, &IffConfig::with_iterations(0))?;
            let row = SweepRow {
                mi,
                seed,
                map,
                final_loss: out.final_loss(),
                epochs_run: out.curve.len() - 1,
                map_w2_zeroed,
                map_open_loop,
            };
            log(&format!(
                "seed {seed} M_I={mi}: mAP {map:.4} (loss {:.4}, {} epochs)",
                row.final_loss, row.epochs_run
            ));
            runs.push(SweepRun { row, model });
        }
    }
    Ok(runs)
}

pub fn rows_csv(runs: &[SweepRun]) -> String {
    let mut s = String::from("mi,seed,map,final_loss,epochs,map_w2_zeroed,map_open_loop\n");
    for r in runs.iter().map(|r| &r.row) {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.mi, r.seed, r.map, r.final_loss, r.epochs_run, r.map_w2_zeroed, r.map_open_loop
        );
    }
    s
}

/// Per-depth median and mean mAP over seeds, in `mi_list` order.
pub fn summary(runs: &[SweepRun], mi_list: &[usize]) -> Vec<(usize, f64, f64)> {
    mi_list
        .iter()
        .map(|&mi| {
            let mut maps: Vec<f64> = runs.iter().filter(|r| r.row.mi == mi).map(|r| r.row.map).collect();
            let mean = maps.iter().sum::<f64>() / maps.len() as f64;
            (mi, median(&mut maps), mean)
        })
        .collect()
}

pub fn summary_csv(runs: &[SweepRun], mi_list: &[usize]) -> String {
    let mut s = String::from("mi,median_map,mean_map\n");
    for (mi, med, mean) in summary(runs, mi_list) {
        let _ = writeln!(s, "{mi},{med},{mean}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_even() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }
}
