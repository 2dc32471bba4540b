//! Randomized invariant sweeps behind `iffdet verify`.

use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iff_core::analysis::{self, IdealFeatureModel};
use iff_core::iff::IffConfig;
use iff_core::spectral;
use iff_core::tensor::{ConvFilter, PaddingMode, Tensor};
use iff_core::toydet::{gen_scene, DetectorModel, GridTargets, ModelArch, SceneSpec, W2};
use iff_core::traingraph::{finite_diff_grad, record_objective, ModelParams};
use iff_core::Result;

pub const PARSEVAL_TOL: f64 = 1e-9;
pub const THEOREM1_TOL: f64 = 1e-9;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-4;
/// Denominator floor for the gradient comparison, far above the roundoff
/// of a central difference on an O(100) loss.
const GRAD_FLOOR: f64 = 1e-5;
pub const THEOREM2_STEPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Suite {
    Parseval,
    Theorem1,
    Theorem2,
    Convtheorem,
    Gradcheck,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Parseval => "parseval",
            Suite::Theorem1 => "theorem1",
            Suite::Theorem2 => "theorem2",
            Suite::Convtheorem => "convtheorem",
            Suite::Gradcheck => "gradcheck",
        }
    }

    pub fn default_trials(self) -> usize {
        match self {
            Suite::Parseval | Suite::Theorem1 | Suite::Convtheorem => 1000,
            Suite::Theorem2 => 100,
            Suite::Gradcheck => 32,
        }
    }

    pub fn run(self, trials: usize, seed: u64) -> Result<SuiteReport> {
        match self {
            Suite::Parseval => parseval(trials, seed),
            Suite::Theorem1 => theorem1(trials, seed),
            Suite::Theorem2 => theorem2(trials, seed),
            Suite::Convtheorem => convtheorem(trials, seed),
            Suite::Gradcheck => gradcheck(trials, seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: usize,
    pub violations: usize,
    /// Checks skipped by the suite's own rule (kink crossings in gradcheck).
    pub excluded: usize,
    /// Worst value of the suite's headline metric.
    pub worst: f64,
    pub worst_label: &'static str,
    /// Extra `key=value` facts for the summary.
    pub notes: Vec<String>,
    pub csv: String,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "{}: {} checks, {} violations, {} excluded, {} = {:e}",
            self.suite, self.checks, self.violations, self.excluded, self.worst_label, self.worst
        );
        for n in &self.notes {
            s.push_str(", ");
            s.push_str(n);
        }
        s
    }
}

fn uniform(shape: &[usize], a: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-a..a)).expect("valid shape")
}

pub fn parseval(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("trial,h,w,spatial,spectral,rel_gap\n");
    let (mut violations, mut worst) = (0, 0.0f64);
    for t in 0..trials {
        let (h, w) = (rng.random_range(4..=64), rng.random_range(4..=64));
        let x = uniform(&[h, w], 1.0, &mut rng);
        let (sp, sc) = spectral::spectral_energy(&x)?;
        let gap = (sp - sc).abs() / sp;
        worst = worst.max(gap);
        violations += (gap >= PARSEVAL_TOL) as usize;
        let _ = writeln!(csv, "{t},{h},{w},{sp},{sc},{gap}");
    }
    Ok(SuiteReport {
        suite: "parseval",
        checks: trials,
        violations,
        excluded: 0,
        worst,
        worst_label: "max_rel_gap",
        notes: vec![],
        csv,
    })
}

pub const THEOREM1_SLOPES: [f64; 4] = [0.01, 0.1, 0.5, 0.9];

pub fn theorem1(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("trial,slope,input,lhs,rhs,rel_excess\n");
    let (mut violations, mut worst) = (0, f64::NEG_INFINITY);
    let mut checks = 0;
    for t in 0..trials {
        let (h, w) = (rng.random_range(4..=32), rng.random_range(4..=32));
        let x = uniform(&[h, w], 1.0, &mut rng);
        let abs = Tensor::new(vec![h, w], x.data().iter().map(|v| v.abs()).collect())?;
        for slope in THEOREM1_SLOPES {
            let r = spectral::theorem1_check(&x, slope)?;
            let excess = (r.lhs - r.rhs) / r.rhs;
            worst = worst.max(excess);
            violations += (excess > THEOREM1_TOL) as usize;
            let _ = writeln!(csv, "{t},{slope},signed,{},{},{excess}", r.lhs, r.rhs);
            // Nonnegative inputs pass through unchanged, so equality holds.
            let e = spectral::theorem1_check(&abs, slope)?;
            let gap = (e.lhs - e.rhs).abs() / e.rhs;
            violations += (gap > THEOREM1_TOL) as usize;
            let _ = writeln!(csv, "{t},{slope},nonnegative,{},{},{gap}", e.lhs, e.rhs);
            checks += 2;
        }
    }
    Ok(SuiteReport {
        suite: "theorem1",
        checks,
        violations,
        excluded: 0,
        worst,
        worst_label: "max_rel_excess",
        notes: vec![],
        csv,
    })
}

/// One random contraction-enforced single-channel configuration under
/// circular padding.
pub fn theorem2_instance(rng: &mut ChaCha8Rng) -> Result<analysis::StabilityReport> {
    let (h, w) = (rng.random_range(3..=16), rng.random_range(3..=16));
    let k1 = if rng.random_bool(0.5) { 3 } else { 1 };
    let k2 = if rng.random_bool(0.5) { 3 } else { 1 };
    let slope = THEOREM1_SLOPES[rng.random_range(0..4)];
    let noise = rng.random_range(0.05..3.0);
    let n = uniform(&[1, h, w], 1.0, rng);
    let delta = uniform(&[1, h, w], noise, rng);
    let w1 = ConvFilter::new(uniform(&[1, 1, k1, k1], 1.0, rng), None)?;
    let w2 = ConvFilter::new(uniform(&[1, 1, k2, k2], 2.0, rng), None)?;
    let ideal = IdealFeatureModel::new(n, delta)?;
    let cfg = IffConfig {
        iterations: THEOREM2_STEPS,
        slope,
        pad: PaddingMode::Circular,
        enforce_contraction: true,
    };
    analysis::bound_check(&ideal.x0()?, &w1, &w2, &cfg, &ideal, THEOREM2_STEPS)
}

pub fn theorem2(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("trial,A,B,C,epsilon,min_rel_slack,max_deviation,triggers,decrease_failures\n");
    let (mut violations, mut worst) = (0, f64::INFINITY);
    let (mut a_nonneg, mut triggers, mut t2_fail, mut bound_fail) = (0, 0, 0, 0);
    for t in 0..trials {
        let rep = theorem2_instance(&mut rng)?;
        let c = rep.constants;
        let min_rel = rep
            .steps
            .iter()
            .map(|s| s.slack / s.bound.abs().max(s.v_prime.abs()).max(f64::MIN_POSITIVE))
            .fold(f64::INFINITY, f64::min);
        let max_dev = rep.steps.iter().map(|s| s.deviation).fold(0.0, f64::max);
        worst = worst.min(min_rel);
        a_nonneg += (!rep.hypothesis_met) as usize;
        bound_fail += rep.violations;
        triggers += rep.theorem2_triggers;
        t2_fail += rep.theorem2_violations;
        violations += (!rep.hypothesis_met) as usize + rep.violations + rep.theorem2_violations;
        let eps = c.epsilon.map_or("none".into(), |e| e.to_string());
        let _ = writeln!(
            csv,
            "{t},{},{},{},{eps},{min_rel},{max_dev},{},{}",
            c.a, c.b, c.c, rep.theorem2_triggers, rep.theorem2_violations
        );
    }
    Ok(SuiteReport {
        suite: "theorem2",
        checks: trials,
        violations,
        excluded: 0,
        worst,
        worst_label: "min_rel_slack",
        notes: vec![
            format!("A>=0 configs={a_nonneg}"),
            format!("bound violations={bound_fail}"),
            format!("epsilon triggers={triggers}"),
            format!("decrease failures={t2_fail}"),
        ],
        csv,
    })
}

pub fn convtheorem(trials: usize, seed: u64) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("trial,h,w,k,circular_rel_gap,zero_pad_rel_gap\n");
    let (mut violations, mut worst, mut zero_worst) = (0, 0.0f64, 0.0f64);
    for t in 0..trials {
        let (h, w) = (rng.random_range(3..=16), rng.random_range(3..=16));
        let sizes: Vec<usize> = [1, 3, 5].into_iter().filter(|&k| k <= h.min(w)).collect();
        let k = sizes[rng.random_range(0..sizes.len())];
        let x = uniform(&[h, w], 1.0, &mut rng);
        let kernel = uniform(&[k, k], 1.0, &mut rng);
        let c = spectral::circular_conv_theorem_check(&x, &kernel)?;
        let z = spectral::zero_padding_conv_gap(&x, &kernel)?;
        violations += (!c.holds) as usize;
        worst = worst.max(c.relative_gap());
        zero_worst = zero_worst.max(z.relative_gap());
        let _ = writeln!(csv, "{t},{h},{w},{k},{},{}", c.relative_gap(), z.relative_gap());
    }
    Ok(SuiteReport {
        suite: "convtheorem",
        checks: trials,
        violations,
        excluded: 0,
        worst,
        worst_label: "max_circular_rel_gap",
        notes: vec![format!("max zero-padding rel gap={zero_worst:e}")],
        csv,
    })
}

/// Unrolled detector with nonzero feedback filter and biases, for gradient
/// checks.
pub fn gradcheck_setup(seed: u64) -> Result<(ModelParams, Tensor, GridTargets, IffConfig)> {
    let model = DetectorModel::new(seed, ModelArch::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params = model.into_params();
    let shape = params.require(W2)?.shape().to_vec();
    params.set(W2, uniform(&shape, 0.2, &mut rng))?;
    // Zero biases on a clamped image put whole regions exactly on the
    // leaky kink; small random biases move them off it.
    let biases: Vec<String> = params.names().filter(|n| n.ends_with(".bias")).map(String::from).collect();
    for name in biases {
        let shape = params.require(&name)?.shape().to_vec();
        params.set(&name, uniform(&shape, 0.1, &mut rng))?;
    }
    let scene = gen_scene(rng.random(), &SceneSpec::default())?;
    Ok((
        params,
        scene.image,
        GridTargets::from_objects(&scene.objects),
        IffConfig::with_iterations(2),
    ))
}

pub fn gradcheck(probes: usize, seed: u64) -> Result<SuiteReport> {
    let (params, image, targets, cfg) = gradcheck_setup(seed)?;
    let loss = |p: &ModelParams| -> Result<f64> {
        let (tape, node) = record_objective(p, &image, targets.clone(), &cfg)?;
        Ok(tape.value(node).data()[0])
    };
    let kinks = |p: &ModelParams| -> Result<Vec<bool>> {
        Ok(record_objective(p, &image, targets.clone(), &cfg)?.0.kink_pattern())
    };
    let (tape, node) = record_objective(&params, &image, targets.clone(), &cfg)?;
    let grads = tape.backward(node, &params)?;
    let base_kinks = tape.kink_pattern();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("param,index,analytic,finite_diff,rel_err,status\n");
    let (mut checks, mut violations, mut excluded, mut worst) = (0, 0, 0, 0.0f64);
    for (name, t) in params.iter() {
        let picks = index::sample(&mut rng, t.len(), probes.min(t.len()));
        for i in picks.iter() {
            let ad = grads.require(name)?.data()[i];
            let fd = finite_diff_grad(loss, &params, name, i, GRAD_STEP)?;
            let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(GRAD_FLOOR);
            let status = if rel <= GRAD_TOL {
                worst = worst.max(rel);
                "ok"
            } else {
                let crosses = kinks(&params.perturbed(name, i, GRAD_STEP)?)? != base_kinks
                    || kinks(&params.perturbed(name, i, -GRAD_STEP)?)? != base_kinks;
                if crosses {
                    excluded += 1;
                    "kink"
                } else {
                    worst = worst.max(rel);
                    violations += 1;
                    "FAIL"
                }
            };
            checks += 1;
            let _ = writeln!(csv, "{name},{i},{ad},{fd},{rel},{status}");
        }
    }
    Ok(SuiteReport {
        suite: "gradcheck",
        checks,
        violations,
        excluded,
        worst,
        worst_label: "max_rel_err",
        notes: vec![],
        csv,
    })
}
