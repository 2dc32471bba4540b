//! Subcommand implementations. Each returns its primary outputs as files
//! and a short human-readable report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use iff_core::analysis::{self, IdealFeatureModel, DEFAULT_BINS};
use iff_core::iff::IffConfig;
use iff_core::tensor::{PaddingMode, Tensor};
use iff_core::toydet::{
    self, timing_probe, DecodeParams, DetectorModel, Manifest, ModelArch, SceneSpec,
    SyntheticScene, IMAGE_SIZE, MIN_TIMING_IMAGES,
};
use iff_core::traingraph::{estimate_map, train, TrainConfig};
use iff_core::Result;

use crate::checkpoint::Checkpoint;
use crate::suites::{Suite, SuiteReport};
use crate::sweep::{self, SweepConfig};

pub fn load_scenes(path: &Path) -> Result<Vec<SyntheticScene>> {
    Manifest::parse(&fs::read_to_string(path)?)?.scenes()
}

pub fn gen(count: usize, seed: u64, noise: f64, out: &Path) -> Result<String> {
    let spec = SceneSpec::with_noise(noise);
    spec.validate()?;
    let (manifest, _) = Manifest::generate(count, seed, &spec)?;
    fs::write(out, manifest.to_text())?;
    Ok(format!("wrote {count} scenes to {}", out.display()))
}

pub struct TrainArgs<'a> {
    pub data: &'a Path,
    pub mi: usize,
    pub seed: u64,
    pub out: &'a Path,
    pub loss_csv: Option<&'a Path>,
    pub train: TrainConfig,
}

pub fn default_loss_csv(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

pub fn train_cmd(args: &TrainArgs) -> Result<String> {
    let scenes = load_scenes(args.data)?;
    let model = DetectorModel::new(args.seed, ModelArch::default())?;
    let cfg = IffConfig::with_iterations(args.mi);
    let tc = TrainConfig {
        seed: args.seed,
        ..args.train.clone()
    };
    let out = train(&model, &scenes, &cfg, &tc)?;
    let ckpt = Checkpoint {
        config: cfg,
        seed: args.seed,
        epochs: (out.curve.len() - 1) as u32,
        final_loss: out.final_loss(),
        params: out.model.params().clone(),
    };
    ckpt.save(args.out)?;
    let csv_path = args.loss_csv.map_or_else(|| default_loss_csv(args.out), Path::to_path_buf);
    fs::write(&csv_path, out.curve_csv())?;
    Ok(format!(
        "M_I={} epochs={} initial_loss={:.6} final_loss={:.6}{}\ncheckpoint {}\nloss curve {}",
        args.mi,
        ckpt.epochs,
        out.curve[0].loss,
        ckpt.final_loss,
        if out.stopped_early { " (early stop)" } else { "" },
        args.out.display(),
        csv_path.display()
    ))
}

pub fn sweep_cmd(
    train_path: &Path,
    test_path: &Path,
    cfg: &SweepConfig,
    out: &Path,
) -> Result<String> {
    let train_set = load_scenes(train_path)?;
    let test_set = load_scenes(test_path)?;
    let runs = sweep::run_sweep(&train_set, &test_set, cfg, |m| eprintln!("{m}"))?;
    fs::write(out, sweep::rows_csv(&runs))?;
    let summary = sweep::summary_csv(&runs, &cfg.mi_list);
    let mut summary_path = out.as_os_str().to_owned();
    summary_path.push(".summary.csv");
    fs::write(PathBuf::from(&summary_path), &summary)?;
    Ok(summary)
}

pub fn infer(
    ckpt_path: &Path,
    data: &Path,
    mi: Option<usize>,
    params: &DecodeParams,
    out: Option<&Path>,
) -> Result<String> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let model = ckpt.model()?;
    let cfg = IffConfig {
        iterations: mi.unwrap_or(ckpt.config.iterations),
        ..ckpt.config
    };
    let scenes = load_scenes(data)?;
    let mut csv = String::from("image,class,score,x,y,w,h\n");
    for (i, s) in scenes.iter().enumerate() {
        for d in toydet::detect(&model, &s.image, &cfg, params)? {
            let b = d.bbox;
            let _ = writeln!(csv, "{i},{},{},{},{},{},{}", d.class.name(), d.score, b.x, b.y, b.w, b.h);
        }
    }
    let map = estimate_map(&model, &scenes, &cfg)?;
    let n = csv.lines().count() - 1;
    match out {
        Some(p) => fs::write(p, &csv)?,
        None => print!("{csv}"),
    }
    Ok(format!("M_I={} images={} detections={n} mAP@0.5={map:.4}", cfg.iterations, scenes.len()))
}

pub fn verify(suite: Suite, trials: usize, seed: u64, out: Option<&Path>) -> Result<SuiteReport> {
    let report = suite.run(trials, seed)?;
    if let Some(p) = out {
        fs::write(p, &report.csv)?;
    }
    Ok(report)
}

pub struct AnalyzeArgs<'a> {
    pub ckpt: &'a Path,
    pub data: &'a Path,
    pub out_dir: &'a Path,
    pub scenes: usize,
    pub heatmaps: usize,
    pub heatmap_size: usize,
    pub bins: usize,
    pub steps: usize,
    pub timing_rounds: usize,
}

impl<'a> AnalyzeArgs<'a> {
    pub fn new(ckpt: &'a Path, data: &'a Path, out_dir: &'a Path) -> Self {
        Self {
            ckpt,
            data,
            out_dir,
            scenes: 60,
            heatmaps: 4,
            heatmap_size: 96,
            bins: DEFAULT_BINS,
            steps: 8,
            timing_rounds: 3,
        }
    }
}

/// Normalized background and foreground energy of `x0` and of the refined
/// features over a set of scenes.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyComparison {
    pub without: analysis::EnergyHistogram,
    pub with: analysis::EnergyHistogram,
}

pub fn energy_comparison(
    model: &DetectorModel,
    scenes: &[SyntheticScene],
    cfg: &IffConfig,
    bins: usize,
) -> Result<EnergyComparison> {
    let mut without = Vec::new();
    let mut with = Vec::new();
    let mut masks = Vec::new();
    for s in scenes {
        let traj = model.forward(&s.image, cfg)?;
        let x0 = traj.states()[0].x.clone();
        let (_, h, w) = x0.dims3()?;
        masks.push(analysis::box_mask(&s.objects, h, w, IMAGE_SIZE));
        without.push(x0);
        with.push(traj.refined_features().clone());
    }
    Ok(EnergyComparison {
        without: analysis::energy_histogram(&without, &masks, bins)?,
        with: analysis::energy_histogram(&with, &masks, bins)?,
    })
}

/// Stability report of the max-norm slice system on one scene, with the
/// noiseless rendering's backbone output as the ideal features.
pub fn scene_stability(
    model: &DetectorModel,
    scene: &SyntheticScene,
    slope: f64,
    steps: usize,
) -> Result<(analysis::SliceSystem, analysis::StabilityReport)> {
    let x0 = model.backbone(&scene.image, slope)?;
    let n = model.backbone(&scene.noiseless().image, slope)?;
    let (w1, w2) = model.head_filters()?;
    let sys = analysis::max_norm_slice_system(&w1, &w2, &x0, &n)?;
    let ideal = IdealFeatureModel::from_observation(&sys.x0, sys.n.clone())?;
    let cfg = IffConfig {
        iterations: steps,
        slope,
        pad: PaddingMode::Circular,
        enforce_contraction: true,
    };
    let rep = analysis::bound_check(&sys.x0, &sys.w1, &sys.w2, &cfg, &ideal, steps)?;
    Ok((sys, rep))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("none".into(), |v| v.to_string())
}

pub fn analyze(args: &AnalyzeArgs) -> Result<String> {
    let ckpt = Checkpoint::load(args.ckpt)?;
    let model = ckpt.model()?;
    let cfg = ckpt.config;
    let all = load_scenes(args.data)?;
    let scenes = &all[..args.scenes.min(all.len())];
    fs::create_dir_all(args.out_dir)?;
    let dir = args.out_dir;

    for (i, s) in scenes.iter().take(args.heatmaps).enumerate() {
        let traj = model.forward(&s.image, &cfg)?;
        let size = args.heatmap_size;
        let without = analysis::heatmap_export(&traj.states()[0].x, size, size)?;
        let with = analysis::heatmap_export(traj.refined_features(), size, size)?;
        fs::write(dir.join(format!("heatmap_{i:03}_without.pgm")), without.to_pgm())?;
        fs::write(dir.join(format!("heatmap_{i:03}_with.pgm")), with.to_pgm())?;
    }

    let energy = energy_comparison(&model, scenes, &cfg, args.bins)?;
    fs::write(dir.join("energy_without.csv"), energy.without.to_csv())?;
    fs::write(dir.join("energy_with.csv"), energy.with.to_csv())?;

    let (sys, stability) = scene_stability(&model, &scenes[0], cfg.slope, args.steps)?;
    fs::write(dir.join("stability.csv"), stability.to_csv())?;

    let mut summary = String::new();
    let _ = writeln!(summary, "checkpoint_mi={}", cfg.iterations);
    let _ = writeln!(summary, "scenes={}", scenes.len());
    let _ = writeln!(summary, "param_count={}", model.param_count());
    let _ = writeln!(summary, "feedback_fraction={}", model.feedback_fraction());
    let _ = writeln!(summary, "bg_mean_without={}", fmt_opt(energy.without.background_mean));
    let _ = writeln!(summary, "bg_mean_with={}", fmt_opt(energy.with.background_mean));
    let _ = writeln!(summary, "fg_mean_without={}", fmt_opt(energy.without.foreground_mean));
    let _ = writeln!(summary, "fg_mean_with={}", fmt_opt(energy.with.foreground_mean));
    let _ = writeln!(summary, "stability_w1_slice={:?}", sys.w1_slice);
    let _ = writeln!(summary, "stability_w2_slice={:?}", sys.w2_slice);
    let c = stability.constants;
    let _ = writeln!(summary, "A={}", c.a);
    let _ = writeln!(summary, "epsilon={}", fmt_opt(c.epsilon));
    let _ = writeln!(summary, "bound_violations={}", stability.violations);
    fs::write(dir.join("summary.txt"), &summary)?;

    // Timing lives in its own file so the rest stays byte-reproducible.
    let mut images: Vec<Tensor> = all.iter().map(|s| s.image.clone()).collect();
    let base = images.clone();
    while images.len() < MIN_TIMING_IMAGES {
        images.extend(base.iter().cloned());
    }
    let t = timing_probe(
        &model,
        &images,
        &IffConfig::with_iterations(0),
        &IffConfig::with_iterations(1),
        args.timing_rounds,
    )?;
    let timing = format!(
        "latency_mi0_s={}\nlatency_mi1_s={}\nratio={}\n",
        t.baseline,
        t.candidate,
        t.ratio()
    );
    fs::write(dir.join("timing.txt"), &timing)?;
    Ok(format!("{summary}{timing}"))
}
