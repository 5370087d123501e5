//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::f64::consts::SQRT_2;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use lipkern::estimator::{
    assemble_gram, empirical_lipschitz_check, fit, fit_with_gram, regularized_objective, representer_residual,
    rkhs_norm_at, rkhs_norm_via_sqrt, tune_gamma, Dataset, FittedModel, GramMatrix, TuneOptions,
};
use lipkern::hodgkin::{
    closed_form_vs_rk4, inner_product_gap, reproduce_paper, search_nonmonotone, HHParams, NonMonotoneWitness,
    ReproduceOptions,
};
use lipkern::kernels::{audit_nonexpansive, audit_psd, DenseMatrix, KernelSpec};
use lipkern::monotone::{simulate_traced, MonotoneModel, PicardConfig};
use lipkern::numerics::{norm2, psd_floor, SymMatrix};
use lipkern::sampling::{rng_from_seed, SeededRng, UniformBox};
use nalgebra::DMatrix;
use rand::Rng;

const SEED: u64 = 0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rand_vec(rng: &mut SeededRng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

fn rand_vecs(rng: &mut SeededRng, count: usize, len: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..count).map(|_| rand_vec(rng, len, lo, hi)).collect()
}

/// Symmetric PSD matrix with spectral norm at most one.
fn contraction_psd(rng: &mut SeededRng, m: usize) -> DenseMatrix {
    let b = DMatrix::from_iterator(m, m, rand_vec(rng, m * m, -1.0, 1.0));
    let r = &b * b.transpose();
    let scale = r.norm().max(1e-12);
    DenseMatrix(r / scale)
}

fn contraction(rng: &mut SeededRng, m: usize) -> DenseMatrix {
    let b = DMatrix::from_iterator(m, m, rand_vec(rng, m * m, -1.0, 1.0));
    let scale = b.norm().max(1e-12);
    DenseMatrix(b / scale)
}

/// Certified scalar kernels plus operator-valued ones built for output dimension `m`.
fn certified_kernels(rng: &mut SeededRng, m: usize) -> Vec<KernelSpec> {
    vec![
        KernelSpec::Bilinear,
        KernelSpec::gaussian(SQRT_2),
        KernelSpec::gaussian(2.0),
        KernelSpec::gaussian(5.0),
        KernelSpec::ScaledLaplacian,
        KernelSpec::inverse_power(2.0, 1.0),
        KernelSpec::convex_sum([(0.6, KernelSpec::gaussian(3.0)), (0.4, KernelSpec::ScaledLaplacian)]),
        KernelSpec::scalar_times(KernelSpec::gaussian(2.0), contraction_psd(rng, m)),
        KernelSpec::conjugated(KernelSpec::ScaledLaplacian, contraction(rng, m)),
    ]
}

fn ac1_kernel_audits() -> Outcome {
    let sampler = UniformBox::new(4, -3.0, 3.0);
    let trials = 10_000;
    let should_pass = [
        KernelSpec::gaussian(SQRT_2),
        KernelSpec::gaussian(2.0),
        KernelSpec::gaussian(5.0),
        KernelSpec::Bilinear,
        KernelSpec::ScaledLaplacian,
        KernelSpec::inverse_power(2.0, 1.0),
    ];
    let should_fail = [
        KernelSpec::gaussian(0.5),
        KernelSpec::gaussian(1.0),
        KernelSpec::gaussian(1.3),
        KernelSpec::polynomial(0.0, 2),
        KernelSpec::inverse_power(0.1, 1.0),
    ];
    let mut bad = Vec::new();
    for k in &should_pass {
        let a = audit_nonexpansive(k, &sampler, trials, SEED).unwrap();
        if !a.pass {
            bad.push(format!("{k} flagged (max ratio {:.6})", a.max_ratio));
        }
    }
    for k in &should_fail {
        let a = audit_nonexpansive(k, &sampler, trials, SEED).unwrap();
        if a.pass || a.violations.is_empty() {
            bad.push(format!("{k} not flagged"));
        }
    }
    if bad.is_empty() {
        outcome(
            true,
            format!("{} kernels pass, {} produce certificates", should_pass.len(), should_fail.len()),
        )
    } else {
        outcome(false, bad.join("; "))
    }
}

fn ac2_psd() -> Outcome {
    let mut rng = rng_from_seed(SEED);
    let mut worst = f64::INFINITY;
    let mut checked = 0;
    for _ in 0..50 {
        let n = rng.random_range(1..=10);
        let d = rng.random_range(1..=21);
        let m = rng.random_range(1..=4);
        let inputs = rand_vecs(&mut rng, n, d, -3.0, 3.0);
        for k in certified_kernels(&mut rng, m) {
            let a = audit_psd(&k, &inputs, m).unwrap();
            checked += 1;
            if !a.pass {
                return outcome(false, format!("{k}: min eig {} vs max {}", a.min_eig, a.max_eig));
            }
            worst = worst.min(a.min_eig / a.max_eig.max(1e-300));
        }
    }
    outcome(
        true,
        format!("{checked} Gram matrices, worst min/max eigenvalue ratio {worst:.2e} (floor {:.0e})", psd_floor(1.0)),
    )
}

fn ac3_representer() -> Outcome {
    let mut rng = rng_from_seed(SEED);
    let mut worst_res: f64 = 0.0;
    for inst in 0..100 {
        let n = rng.random_range(1..=5);
        let m = rng.random_range(1..=3);
        let d = rng.random_range(1..=3);
        let kernels = certified_kernels(&mut rng, m);
        let k = kernels[inst % kernels.len()].clone();
        let gamma = 10f64.powf(rng.random_range(-3.0..1.0));
        let data = Dataset::new(rand_vecs(&mut rng, n, d, -2.0, 2.0), rand_vecs(&mut rng, n, m, -2.0, 2.0)).unwrap();
        let (model, gram) = fit_with_gram(&k, &data, gamma).unwrap();
        let ybar = data.ybar();
        let c = model.stacked_coefficients();
        let res = representer_residual(&gram, gamma, &c, &ybar).unwrap() / norm2(&ybar);
        worst_res = worst_res.max(res);
        if res > 1e-8 {
            return outcome(false, format!("instance {inst}: relative residual {res:.3e}"));
        }
        let best = regularized_objective(&gram, &ybar, &c, gamma).unwrap();
        for _ in 0..10_000 {
            let p: Vec<f64> = c.iter().map(|x| x + 1e-3 * rng.random_range(-1.0..1.0)).collect();
            let val = regularized_objective(&gram, &ybar, &p, gamma).unwrap();
            if val < best - 1e-12 * best.abs().max(1.0) {
                return outcome(false, format!("instance {inst}: perturbation improves {best} to {val}"));
            }
        }
    }
    outcome(true, format!("100 problems, worst relative residual {worst_res:.2e}, 1e4 perturbations each"))
}

fn ac4_norm_identity() -> Outcome {
    let mut rng = rng_from_seed(SEED);
    let mut worst: f64 = 0.0;
    for inst in 0..100 {
        let n = rng.random_range(1..=8);
        let r = rng.random_range(1..=8);
        let b = DMatrix::from_iterator(n, r, rand_vec(&mut rng, n * r, -1.0, 1.0));
        let gram = GramMatrix::from_matrix(SymMatrix::symmetrized(&b * b.transpose()));
        let ybar = rand_vec(&mut rng, n, -1.0, 1.0);
        let gamma = 10f64.powf(rng.random_range(-4.0..1.0));
        let a = rkhs_norm_at(&gram, &ybar, gamma).unwrap();
        let s = rkhs_norm_via_sqrt(&gram, &ybar, gamma).unwrap();
        let rel = (a - s).abs() / s.max(1e-300);
        worst = worst.max(rel);
        if rel > 1e-7 {
            return outcome(false, format!("instance {inst}: {a} vs {s}"));
        }
        let grid: Vec<f64> = (0..30).map(|k| 10f64.powf(-6.0 + 9.0 * k as f64 / 29.0)).collect();
        let phis: Vec<f64> = grid.iter().map(|&g| rkhs_norm_at(&gram, &ybar, g).unwrap()).collect();
        if let Some(w) = phis.windows(2).find(|w| w[1] > w[0] + 1e-10) {
            return outcome(false, format!("instance {inst}: phi increases {} -> {}", w[0], w[1]));
        }
    }
    outcome(true, format!("100 instances, worst relative gap {worst:.2e}, phi nonincreasing on 30-point grid"))
}

fn ac5_lipschitz() -> Outcome {
    let mut rng = rng_from_seed(SEED);
    let mut worst: f64 = 0.0;
    for inst in 0..20 {
        let m = rng.random_range(1..=3);
        let d = rng.random_range(1..=4);
        let n = rng.random_range(3..=12);
        let kernels = certified_kernels(&mut rng, m);
        let k = kernels[inst % kernels.len()].clone();
        let data = Dataset::new(rand_vecs(&mut rng, n, d, -2.0, 2.0), rand_vecs(&mut rng, n, m, -2.0, 2.0)).unwrap();
        let model = if inst % 2 == 0 {
            fit(&k, &data, 10f64.powf(rng.random_range(-3.0..0.0))).unwrap()
        } else {
            let gram = assemble_gram(&k, &data.inputs, m).unwrap();
            let t = tune_gamma(&gram, &data.ybar(), 1.0, TuneOptions::default()).unwrap();
            fit(&k, &data, t.gamma).unwrap()
        };
        let check = empirical_lipschitz_check(&model, &UniformBox::new(d, -3.0, 3.0), 10_000, SEED + inst as u64)
            .unwrap();
        worst = worst.max(check.max_ratio / check.certified.max(1e-300));
        if !check.pass {
            return outcome(
                false,
                format!("model {inst} ({k}): ratio {} exceeds certificate {}", check.max_ratio, check.certified),
            );
        }
    }
    outcome(true, format!("20 models x 1e4 pairs, worst observed/certified {worst:.4}"))
}

/// `S(v) = s·v` in dimension one.
fn linear_contraction(s: f64) -> MonotoneModel {
    let s_model =
        FittedModel::from_coefficients(KernelSpec::Bilinear, vec![vec![1.0]], vec![vec![s]], 1.0).unwrap();
    MonotoneModel::new(s_model, s, PicardConfig::default()).unwrap()
}

fn ac6_picard() -> Outcome {
    let mut details = Vec::new();
    for ell in [0.1, 0.5, 0.9] {
        let model = linear_contraction(ell);
        for u in [1.0, -3.5, 12.0] {
            // R = (1 − s)/(1 + s) as a scalar
            let exact = u * (1.0 - ell) / (1.0 + ell);
            let (sim, trace) = simulate_traced(&model, &[u], None).unwrap();
            if (sim.y_star[0] - exact).abs() > 1e-8 {
                return outcome(false, format!("ell {ell}, u {u}: {} vs {exact}", sim.y_star[0]));
            }
            let errs: Vec<f64> = trace.iter().map(|y| (y[0] - exact).abs()).collect();
            let mut worst: f64 = 0.0;
            // resolving a factor to 1e-6 relative needs errors well above ε·|u|
            for w in errs.windows(2).filter(|w| w[1] > 1e-8 * u.abs()) {
                let rate = w[1] / w[0];
                worst = worst.max(rate);
                if rate > ell * (1.0 + 1e-6) {
                    return outcome(false, format!("ell {ell}, u {u}: step factor {rate}"));
                }
            }
            if u == 1.0 {
                details.push(format!("ell {ell}: {} iters, factor {worst:.6}", sim.iters));
            }
        }
    }
    outcome(true, details.join("; "))
}

fn ac7_hodgkin() -> Outcome {
    let params = HHParams::default();
    let oracle = closed_form_vs_rk4(&params).unwrap();
    let report = reproduce_paper(&params, &ReproduceOptions::default()).unwrap();
    let failed: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{}: {}", c.name, c.detail))
        .collect();
    let pass = report.pass && oracle <= 1e-6 && (0.94..=1.0).contains(&report.rkhs_norm) && report.monotonicity.pass;
    let detail = format!(
        "norm {:.4} (gamma {:e}), data vs RK4 {:.1e}, monotone on {} pairs, largest-|v| RMSE {:.1} vs smallest-|v| {:.1}{}",
        report.rkhs_norm,
        report.gamma,
        oracle,
        report.monotonicity.trials,
        report.per_voltage.last().map_or(0.0, |f| f.rmse),
        report.per_voltage.first().map_or(0.0, |f| f.rmse),
        if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join("; ")) }
    );
    outcome(pass, detail)
}

fn ac8_nonmonotone_fixture() -> Outcome {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/hh_nonmonotone.json");
    let w: NonMonotoneWitness = match std::fs::read_to_string(&path).map(|t| serde_json::from_str(&t)) {
        Ok(Ok(w)) => w,
        _ => return outcome(false, format!("cannot read {}", path.display())),
    };
    let params = HHParams::default();
    let inner = inner_product_gap(&w.u1, &w.u2, &params).unwrap();
    let again = search_nonmonotone(&params, w.seed, w.trial + 1).unwrap();
    let reproducible = again.as_ref() == Some(&w);
    outcome(
        inner < 0.0 && reproducible,
        format!("<u1-u2, y1-y2> = {inner:.4} (seed {}, trial {}), reproduced from seed: {reproducible}", w.seed, w.trial),
    )
}

fn ac9_serialization() -> Outcome {
    let mut rng = rng_from_seed(SEED);
    let m = 3;
    let kernels = certified_kernels(&mut rng, m);
    let mut models = Vec::new();
    for k in kernels.iter().chain([&KernelSpec::polynomial(1.0, 3)]) {
        let data = Dataset::new(rand_vecs(&mut rng, 8, 4, -2.0, 2.0), rand_vecs(&mut rng, 8, m, -5.0, 5.0)).unwrap();
        models.push(fit(k, &data, 10f64.powf(rng.random_range(-4.0..0.0))).unwrap());
    }
    for model in &models {
        let json = model.to_json().unwrap();
        let back = FittedModel::from_json(&json).unwrap();
        let same_bits = back
            .coefficients
            .iter()
            .flatten()
            .zip(model.coefficients.iter().flatten())
            .chain(back.train_inputs.iter().flatten().zip(model.train_inputs.iter().flatten()))
            .all(|(a, b)| a.to_bits() == b.to_bits())
            && back.gamma.to_bits() == model.gamma.to_bits()
            && back.rkhs_norm.to_bits() == model.rkhs_norm.to_bits();
        if !same_bits || &back != model || back.to_json().unwrap() != json {
            return outcome(false, format!("{} does not round-trip", model.kernel));
        }
        for _ in 0..100 {
            let u = rand_vec(&mut rng, 4, -3.0, 3.0);
            let (a, b) = (model.predict(&u).unwrap(), back.predict(&u).unwrap());
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return outcome(false, format!("{}: prediction differs after reload", model.kernel));
            }
        }
    }
    outcome(true, format!("{} models, bit-exact JSON and predictions on 100 inputs each", models.len()))
}

/// id, name, check, time limit
type Criterion = (&'static str, &'static str, fn() -> Outcome, Option<Duration>);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("AC1", "kernel audit suite", ac1_kernel_audits, Some(Duration::from_secs(10))),
        ("AC2", "Gram matrices are PSD", ac2_psd, None),
        ("AC3", "representer solution", ac3_representer, None),
        ("AC4", "norm identity and phi monotonicity", ac4_norm_identity, None),
        ("AC5", "Lipschitz certification", ac5_lipschitz, Some(Duration::from_secs(30))),
        ("AC6", "Picard contraction fixtures", ac6_picard, None),
        ("AC7", "Hodgkin-Huxley reproduction", ac7_hodgkin, Some(Duration::from_secs(60))),
        ("AC8", "non-monotonicity fixture", ac8_nonmonotone_fixture, None),
        ("AC9", "model serialization", ac9_serialization, None),
    ];
    let mut failures = 0;
    for (id, name, run, limit) in criteria {
        let start = Instant::now();
        let mut result = run();
        let elapsed = start.elapsed();
        if let Some(limit) = limit {
            if elapsed > limit {
                result.pass = false;
                result.detail = format!("{}; exceeded {:?}", result.detail, limit);
            }
        }
        if !result.pass {
            failures += 1;
        }
        println!(
            "{id} {} {name}: {} [{:.2}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            elapsed.as_secs_f64()
        );
    }
    println!("{} of 9 criteria passed", 9 - failures);
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
