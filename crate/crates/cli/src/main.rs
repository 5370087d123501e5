//! `lipkern`: fit Lipschitz-certified kernel models and monotone operators
//! from data, audit kernels, and rerun the potassium-channel benchmark.
//!
//! Exit codes: 0 success, 1 a check failed (or a run could not complete),
//! 2 usage error. `LIPKERN_THREADS` caps the worker pool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod data;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lipkern::estimator::{assemble_gram, fit, tune_gamma, TuneOptions};
use lipkern::hodgkin::{
    generate_dataset, reproduce_paper, HHParams, ReproduceOptions, DEFAULT_UNIT_SCALE, DEFAULT_VOLTAGES, PAPER_GAMMA,
};
use lipkern::kernels::{audit_nonexpansive, audit_psd, KernelMetricSample, KernelSpec, OperatorKernel};
use lipkern::monotone::{fit_monotone, fit_monotone_with_gamma, simulate, MonotoneModel, PicardConfig, DEFAULT_ELL};
use lipkern::sampling::{rng_from_seed, InputSampler, UniformBox};
use lipkern::Error;
use serde::Serialize;

/// Violations listed in a `check-kernel` report; the rest are only counted.
const REPORTED_VIOLATIONS: usize = 10;

#[derive(Parser, Debug)]
#[command(name = "lipkern", version, about = "Lipschitz-certified kernel regression and monotone operator identification")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Generate potassium-channel step-response data.
    GenHh(GenHhArgs),
    /// Fit a kernel model by regularized least squares.
    Fit(FitArgs),
    /// Audit a kernel for nonexpansiveness and positive semidefiniteness.
    CheckKernel(CheckKernelArgs),
    /// Identify a monotone operator through its scattering transform.
    FitMonotone(FitMonotoneArgs),
    /// Evaluate an identified monotone operator by Picard iteration.
    Simulate(SimulateArgs),
    /// Rerun the potassium-channel identification and write report + figure data.
    Reproduce(ReproduceArgs),
}

#[derive(Args, Debug, Serialize)]
struct Common {
    /// JSON file of flag values; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random draw (ChaCha8).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_kernel(s: &str) -> Result<KernelSpec, String> {
    s.parse::<KernelSpec>().map_err(|e| e.to_string())
}

#[derive(Args, Debug, Serialize)]
struct GenHhArgs {
    /// Step voltages in mV, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = DEFAULT_VOLTAGES.to_vec())]
    voltages: Vec<f64>,
    /// Output path; `.json` and `.csv` files are written next to each other.
    #[arg(long)]
    out: PathBuf,
    /// Factor applied to inputs and outputs (1 keeps mV and µA/cm²).
    #[arg(long, default_value_t = 1.0)]
    unit_scale: f64,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
#[group(id = "reg", required = true, multiple = false, args = ["gamma", "ell"])]
struct FitArgs {
    /// Dataset (JSON, or long-form CSV from gen-hh).
    #[arg(long)]
    data: PathBuf,
    /// Kernel, e.g. `gaussian:sigma=2` or a JSON spec.
    #[arg(long, value_parser = parse_kernel)]
    kernel: KernelSpec,
    /// Regularization parameter.
    #[arg(long)]
    gamma: Option<f64>,
    /// Lipschitz budget; picks the smallest γ whose certificate meets it.
    #[arg(long)]
    ell: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct CheckKernelArgs {
    #[arg(long, value_parser = parse_kernel)]
    kernel: KernelSpec,
    /// Input dimension.
    #[arg(long, default_value_t = 3)]
    dim: usize,
    /// Random pairs on top of the fixed near-coincident probes.
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Inputs are drawn from the box [-radius, radius]^dim.
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    /// Points in the sampled Gram matrix.
    #[arg(long, default_value_t = 10)]
    psd_points: usize,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct FitMonotoneArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_parser = parse_kernel, default_value = "scaled_laplacian")]
    kernel: KernelSpec,
    /// Lipschitz budget of S, in (0, 1).
    #[arg(long, conflicts_with = "gamma")]
    ell: Option<f64>,
    /// Fixed γ instead of tuning; the resulting ‖S‖ must be below one.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = PicardConfig::default().tol)]
    tol: f64,
    #[arg(long, default_value_t = PicardConfig::default().max_iter)]
    max_iter: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    /// Model written by fit-monotone.
    #[arg(long)]
    model: PathBuf,
    /// Input vector, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    input: Vec<f64>,
    /// Starting point, comma separated (zero by default).
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    y0: Option<Vec<f64>>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Serialize)]
struct ReproduceArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, value_parser = parse_kernel, default_value = "scaled_laplacian")]
    kernel: KernelSpec,
    #[arg(long, default_value_t = PAPER_GAMMA)]
    gamma: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = DEFAULT_VOLTAGES.to_vec())]
    voltages: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_UNIT_SCALE)]
    unit_scale: f64,
    /// Pairs in the monotonicity check.
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[command(flatten)]
    common: Common,
}

enum Failure {
    Usage(String),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) => 1,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Check(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParameter(_) | Error::NotCertified(_) | Error::DimensionMismatch { .. } | Error::Empty(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Check(e.to_string()),
        }
    }
}

impl From<String> for Failure {
    fn from(m: String) -> Self {
        Failure::Check(m)
    }
}

type Outcome = Result<(), Failure>;

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Check(e.to_string()))?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::Check(e.to_string())),
        _ => Ok(()),
    }
}

fn certification_hint(spec: &KernelSpec) -> &'static str {
    match spec {
        KernelSpec::Gaussian { .. } => "gaussian kernels are certified only for sigma >= sqrt(2)",
        KernelSpec::InversePower { .. } => "inverse_power kernels are certified only when 2d <= c^(d+1)",
        KernelSpec::PolynomialScalar { .. } => "polynomial kernels are never certified",
        _ => "composite kernels need certified parts, weights summing to at most 1 and ||R|| <= 1",
    }
}

fn refuse_uncertified(spec: &KernelSpec, flag: &str) -> Outcome {
    if spec.claims_nonexpansive() {
        return Ok(());
    }
    Err(Failure::Usage(format!(
        "refusing {flag}: kernel {spec} is not certified nonexpansive, so its RKHS norm is no Lipschitz bound ({})",
        certification_hint(spec)
    )))
}

fn paired_path(out: &Path, ext: &str) -> PathBuf {
    out.with_extension(ext)
}

fn gen_hh(args: &GenHhArgs) -> Outcome {
    if args.voltages.is_empty() {
        return Err(Failure::Usage("--voltages needs at least one value".into()));
    }
    if !(args.unit_scale > 0.0) {
        return Err(Failure::Usage("--unit-scale must be positive".into()));
    }
    let params = HHParams {
        voltages: args.voltages.clone(),
        unit_scale: args.unit_scale,
        ..HHParams::default()
    };
    let mut data = generate_dataset(&params)?;
    if args.unit_scale != 1.0 {
        for v in data.inputs.iter_mut().chain(data.outputs.iter_mut()).flatten() {
            *v *= args.unit_scale;
        }
    }
    let json = paired_path(&args.out, "json");
    let csv = paired_path(&args.out, "csv");
    data::write_json(&json, &data)?;
    data::write_hh_csv(&csv, &data, &params)?;
    println!("n={} d={} m={}", data.len(), data.input_dim(), data.output_dim());
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

#[derive(Serialize)]
struct FitSummary {
    gamma: f64,
    rkhs_norm: f64,
    lipschitz_certified: Option<f64>,
    tuned_to_ell: Option<f64>,
}

fn fit_cmd(args: &FitArgs) -> Outcome {
    let data = data::read_dataset(&args.data).map_err(Failure::Usage)?;
    let gamma = match (args.gamma, args.ell) {
        (Some(g), None) => g,
        (None, Some(ell)) => {
            refuse_uncertified(&args.kernel, "--ell")?;
            let gram = assemble_gram(&args.kernel, &data.inputs, data.output_dim())?;
            tune_gamma(&gram, &data.ybar(), ell, TuneOptions::default())?.gamma
        }
        _ => return Err(Failure::Usage("give exactly one of --gamma and --ell".into())),
    };
    let model = fit(&args.kernel, &data, gamma)?;
    if let Some(out) = &args.out {
        model.save(out)?;
    }
    print_json(&FitSummary {
        gamma: model.gamma,
        rkhs_norm: model.rkhs_norm,
        lipschitz_certified: model.lipschitz_certified,
        tuned_to_ell: args.ell,
    })
}

#[derive(Serialize)]
struct NonexpansiveSummary {
    pairs_checked: usize,
    max_ratio: f64,
    violation_count: usize,
    violations: Vec<KernelMetricSample>,
    pass: bool,
}

#[derive(Serialize)]
struct PsdSummary {
    points: usize,
    min_eig: f64,
    max_eig: f64,
    pass: bool,
}

#[derive(Serialize)]
struct KernelReport {
    kernel: KernelSpec,
    claims_nonexpansive: bool,
    dim: usize,
    output_dim: usize,
    radius: f64,
    seed: u64,
    trials: usize,
    nonexpansive: NonexpansiveSummary,
    psd: PsdSummary,
    pass: bool,
}

fn check_kernel(args: &CheckKernelArgs) -> Outcome {
    if args.dim == 0 || !(args.radius > 0.0) {
        return Err(Failure::Usage("--dim and --radius must be positive".into()));
    }
    args.kernel.validate()?;
    let sampler = UniformBox::new(args.dim, -args.radius, args.radius);
    let seed = args.common.seed;
    let audit = audit_nonexpansive(&args.kernel, &sampler, args.trials, seed)?;
    let m = args.kernel.output_dim().unwrap_or(1);
    let mut rng = rng_from_seed(seed);
    rng.set_stream(2);
    let points: Vec<Vec<f64>> = (0..args.psd_points.max(1)).map(|_| sampler.sample(&mut rng)).collect();
    let psd = audit_psd(&args.kernel, &points, m)?;
    let pass = audit.pass && psd.pass;
    let report = KernelReport {
        kernel: args.kernel.clone(),
        claims_nonexpansive: args.kernel.claims_nonexpansive(),
        dim: args.dim,
        output_dim: m,
        radius: args.radius,
        seed,
        trials: args.trials,
        nonexpansive: NonexpansiveSummary {
            pairs_checked: audit.pairs_checked,
            max_ratio: audit.max_ratio,
            violation_count: audit.violations.len(),
            violations: audit.violations.into_iter().take(REPORTED_VIOLATIONS).collect(),
            pass: audit.pass,
        },
        psd: PsdSummary {
            points: points.len(),
            min_eig: psd.min_eig,
            max_eig: psd.max_eig,
            pass: psd.pass,
        },
        pass,
    };
    print_json(&report)?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Check(format!("kernel {} failed the audit", args.kernel)))
    }
}

#[derive(Serialize)]
struct MonotoneSummary {
    gamma: f64,
    ell: f64,
    rkhs_norm: f64,
}

fn fit_monotone_cmd(args: &FitMonotoneArgs) -> Outcome {
    let data = data::read_dataset(&args.data).map_err(Failure::Usage)?;
    refuse_uncertified(&args.kernel, "fit-monotone")?;
    let picard = PicardConfig {
        tol: args.tol,
        max_iter: args.max_iter,
    };
    let model = match (args.gamma, args.ell) {
        (Some(g), _) => fit_monotone_with_gamma(&args.kernel, &data, g, picard)?,
        (None, ell) => {
            let ell = ell.unwrap_or(DEFAULT_ELL);
            if !(ell > 0.0 && ell < 1.0) {
                return Err(Failure::Usage(format!("--ell must lie in (0, 1), got {ell}")));
            }
            let mut model = fit_monotone(&args.kernel, &data, ell)?;
            model.picard = picard;
            MonotoneModel::new(model.s_model, model.ell, model.picard)?
        }
    };
    if let Some(out) = &args.out {
        model.save(out)?;
    }
    print_json(&MonotoneSummary {
        gamma: model.s_model.gamma,
        ell: model.ell,
        rkhs_norm: model.s_model.rkhs_norm,
    })
}

fn simulate_cmd(args: &SimulateArgs) -> Outcome {
    let mut model = MonotoneModel::load(&args.model).map_err(|e| Failure::Usage(format!("{}: {e}", args.model.display())))?;
    if let Some(n) = args.max_iter {
        model.picard.max_iter = n;
    }
    if let Some(t) = args.tol {
        model.picard.tol = t;
    }
    let model = MonotoneModel::new(model.s_model, model.ell, model.picard)?;
    match simulate(&model, &args.input, args.y0.as_deref()) {
        Ok(sim) => print_json(&sim),
        Err(e @ Error::NoConvergence { .. }) => Err(Failure::Check(format!("simulation did not converge: {e}"))),
        Err(e) => Err(e.into()),
    }
}

fn reproduce_cmd(args: &ReproduceArgs) -> Outcome {
    let params = HHParams {
        voltages: args.voltages.clone(),
        unit_scale: args.unit_scale,
        ..HHParams::default()
    };
    let opts = ReproduceOptions {
        kernel: args.kernel.clone(),
        gamma: args.gamma,
        seed: args.common.seed,
        monotonicity_trials: args.trials,
        picard: PicardConfig::default(),
    };
    let report = reproduce_paper(&params, &opts)?;
    std::fs::create_dir_all(&args.out_dir)
        .map_err(|e| Failure::Check(format!("cannot create {}: {e}", args.out_dir.display())))?;
    let report_path = args.out_dir.join("report.json");
    let figure_path = args.out_dir.join("figure1.csv");
    data::write_json(&report_path, &report)?;
    data::write_figure_csv(&figure_path, &report)?;
    println!(
        "rkhs_norm = {:.6} (gamma = {:e}, unscaled data: {:.6e})",
        report.rkhs_norm, report.gamma, report.rkhs_norm_unscaled
    );
    for c in &report.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    println!("wrote {} and {}", report_path.display(), figure_path.display());
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Check("reproduction bounds not met".into()))
    }
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("LIPKERN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("LIPKERN_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Check(e.to_string()))
}

fn run(cli: &Cli) -> Outcome {
    configure_threads()?;
    let resolved = serde_json::to_string(&cli.command).map_err(|e| Failure::Check(e.to_string()))?;
    eprintln!("lipkern: resolved config {resolved}");
    match &cli.command {
        Command::GenHh(a) => gen_hh(a),
        Command::Fit(a) => fit_cmd(a),
        Command::CheckKernel(a) => check_kernel(a),
        Command::FitMonotone(a) => fit_monotone_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Reproduce(a) => reproduce_cmd(a),
    }
}

fn main() -> ExitCode {
    let args = match config::expand_args(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(m) => {
            eprintln!("error: {m}");
            return ExitCode::from(2);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
