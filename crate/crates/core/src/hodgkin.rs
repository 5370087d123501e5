//! Potassium channel of the Hodgkin–Huxley model as an input/output benchmark.
//!
//! The gating state obeys `ẋ = α(u)(1 − x) − β(u)x`, `x(0) = 0`, and the
//! output current is `y = g x⁴ (u − ū)`. Signals are sampled on the grid
//! `t_j = 0.5 j`, `j = 0..20`, so inputs and outputs are vectors in `ℝ²¹`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::estimator::{fit, Dataset};
use crate::kernels::KernelSpec;
use crate::monotone::{fit_monotone_with_gamma, monotonicity_check, simulate, MonotonicityCheck, PicardConfig};
use crate::numerics::dot;
use crate::sampling::{rng_from_seed, SeededRng, UniformBox};
use rand::Rng;

pub const DEFAULT_VOLTAGES: [f64; 12] = [
    -6.0, -10.0, -19.0, -26.0, -32.0, -38.0, -51.0, -63.0, -76.0, -88.0, -100.0, -109.0,
];

pub const PAPER_GAMMA: f64 = 4.441e-4;

/// Common factor applied to voltages and currents before identification.
/// With the default voltages it puts the scattered data on the scale where
/// `γ = 4.441e-4` yields an `S` of norm just below one.
pub const DEFAULT_UNIT_SCALE: f64 = 7.5e-6;

pub const DEFAULT_RK4_DT: f64 = 0.01;

/// Frozen bounds checked by [`reproduce_paper`].
pub const NORM_BAND: (f64, f64) = (0.94, 1.00);
pub const DATA_ORACLE_TOL: f64 = 1e-6;
/// Largest per-voltage RMSE, as a fraction of the largest output magnitude
/// over the whole dataset (0.176 measured on the default set).
pub const RMSE_FRACTION_BOUND: f64 = 0.20;

const ALPHA_SERIES_RADIUS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HHParams {
    /// Maximal conductance.
    pub g: f64,
    /// Reversal potential.
    pub u_bar: f64,
    /// Grid spacing.
    pub dt: f64,
    /// Number of grid points, starting at `t = 0`.
    pub samples: usize,
    pub voltages: Vec<f64>,
    pub unit_scale: f64,
}

impl Default for HHParams {
    fn default() -> Self {
        HHParams {
            g: 36.0,
            u_bar: 12.0,
            dt: 0.5,
            samples: 21,
            voltages: DEFAULT_VOLTAGES.to_vec(),
            unit_scale: DEFAULT_UNIT_SCALE,
        }
    }
}

impl HHParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.g > 0.0) {
            return Err(Error::InvalidParameter(format!("g must be positive, got {}", self.g)));
        }
        if !(self.dt > 0.0) || self.samples == 0 {
            return Err(Error::InvalidParameter("time grid must be strictly increasing and non-empty".into()));
        }
        if !(self.unit_scale > 0.0) {
            return Err(Error::InvalidParameter(format!("unit_scale must be positive, got {}", self.unit_scale)));
        }
        if let Some(v) = self.voltages.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("voltage {v} is not finite")));
        }
        Ok(())
    }

    pub fn time_grid(&self) -> Vec<f64> {
        (0..self.samples).map(|j| self.dt * j as f64).collect()
    }

    fn current(&self, x: f64, u: f64) -> f64 {
        self.g * x.powi(4) * (u - self.u_bar)
    }
}

pub fn alpha(u: f64) -> f64 {
    let w = u + 10.0;
    if w.abs() < ALPHA_SERIES_RADIUS {
        0.1 * (1.0 - w / 20.0 + w * w / 1200.0)
    } else {
        0.01 * w / (w / 10.0).exp_m1()
    }
}

pub fn beta(u: f64) -> f64 {
    0.125 * (u / 80.0).exp()
}

/// Sampled gating state and current.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub t: Vec<f64>,
    pub u: Vec<f64>,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResponse {
    pub voltage: f64,
    pub t: Vec<f64>,
    pub x_traj: Vec<f64>,
    pub y_traj: Vec<f64>,
}

/// Exact response to a constant voltage: `x(t) = x∞(1 − e^{−(α+β)t})`.
pub fn step_response_closed_form(v: f64, params: &HHParams) -> StepResponse {
    let (a, b) = (alpha(v), beta(v));
    let x_inf = a / (a + b);
    let t = params.time_grid();
    let x_traj: Vec<f64> = t.iter().map(|&t| -x_inf * (-(a + b) * t).exp_m1()).collect();
    let y_traj = x_traj.iter().map(|&x| params.current(x, v)).collect();
    StepResponse {
        voltage: v,
        t,
        x_traj,
        y_traj,
    }
}

/// Input voltage as a function of time.
pub enum InputSignal<'a> {
    Constant(f64),
    /// One level per grid point; level `j` holds on `[t_j, t_{j+1})` and the
    /// last level holds afterwards.
    PiecewiseConstant(Vec<f64>),
    Function(&'a (dyn Fn(f64) -> f64 + Sync)),
}

impl InputSignal<'_> {
    /// Value at time `t` inside grid interval `j`.
    fn at(&self, j: usize, t: f64) -> f64 {
        match self {
            InputSignal::Constant(c) => *c,
            InputSignal::PiecewiseConstant(levels) => levels[j.min(levels.len() - 1)],
            InputSignal::Function(f) => f(t),
        }
    }
}

fn gating_rate(x: f64, u: f64) -> f64 {
    alpha(u) * (1.0 - x) - beta(u) * x
}

/// Fixed-step classical Runge–Kutta integration of the gating equation from
/// `x(t_0) = 0`, sampled on `t_grid`. `dt` must divide every grid spacing.
pub fn integrate_rk4(input: &InputSignal, t_grid: &[f64], dt: f64, params: &HHParams) -> Result<Trajectory> {
    if t_grid.is_empty() {
        return Err(Error::Empty("time grid"));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if let InputSignal::PiecewiseConstant(levels) = input {
        check_dim(t_grid.len(), levels.len())?;
    }
    let mut x = 0.0;
    let mut xs = Vec::with_capacity(t_grid.len());
    let mut us = Vec::with_capacity(t_grid.len());
    for (j, &tj) in t_grid.iter().enumerate() {
        if j > 0 {
            let (t0, h) = (t_grid[j - 1], tj - t_grid[j - 1]);
            let steps = (h / dt).round();
            if !(h > 0.0) || (steps * dt - h).abs() > 1e-9 * h {
                return Err(Error::InvalidParameter(format!(
                    "dt = {dt} does not divide the grid spacing {h}"
                )));
            }
            let k_int = j - 1;
            for s in 0..steps as usize {
                let t = t0 + s as f64 * dt;
                let (u0, um, u1) = (
                    input.at(k_int, t),
                    input.at(k_int, t + dt / 2.0),
                    input.at(k_int, t + dt),
                );
                let k1 = gating_rate(x, u0);
                let k2 = gating_rate(x + dt / 2.0 * k1, um);
                let k3 = gating_rate(x + dt / 2.0 * k2, um);
                let k4 = gating_rate(x + dt * k3, u1);
                x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
        }
        xs.push(x);
        us.push(input.at(j, tj));
    }
    let y = xs.iter().zip(&us).map(|(&x, &u)| params.current(x, u)).collect();
    Ok(Trajectory {
        t: t_grid.to_vec(),
        u: us,
        x: xs,
        y,
    })
}

/// The raw state-space operator on grid-sampled inputs.
pub fn hh_operator(u: &[f64], params: &HHParams) -> Result<Vec<f64>> {
    let traj = integrate_rk4(
        &InputSignal::PiecewiseConstant(u.to_vec()),
        &params.time_grid(),
        DEFAULT_RK4_DT,
        params,
    )?;
    Ok(traj.y)
}

/// Step experiments in raw units: input `v·1`, output the sampled current.
pub fn generate_dataset(params: &HHParams) -> Result<Dataset> {
    params.validate()?;
    if params.voltages.is_empty() {
        return Err(Error::Empty("voltage list"));
    }
    let responses: Vec<StepResponse> = params
        .voltages
        .par_iter()
        .map(|&v| step_response_closed_form(v, params))
        .collect();
    let inputs = params.voltages.iter().map(|&v| vec![v; params.samples]).collect();
    let outputs = responses.into_iter().map(|r| r.y_traj).collect();
    Dataset::new(inputs, outputs)
}

/// Largest gap in `x` between the closed form and RK4 over the configured voltages.
pub fn closed_form_vs_rk4(params: &HHParams) -> Result<f64> {
    let grid = params.time_grid();
    let errs: Vec<f64> = params
        .voltages
        .par_iter()
        .map(|&v| {
            let exact = step_response_closed_form(v, params);
            let traj = integrate_rk4(&InputSignal::Constant(v), &grid, DEFAULT_RK4_DT, params)?;
            Ok(exact
                .x_traj
                .iter()
                .zip(&traj.x)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max))
        })
        .collect::<Result<_>>()?;
    Ok(errs.into_iter().fold(0.0, f64::max))
}

fn scale(vs: &[Vec<f64>], s: f64) -> Vec<Vec<f64>> {
    vs.iter().map(|v| v.iter().map(|x| x * s).collect()).collect()
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (ss / a.len() as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproduceOptions {
    pub kernel: KernelSpec,
    pub gamma: f64,
    pub seed: u64,
    pub monotonicity_trials: usize,
    pub picard: PicardConfig,
}

impl Default for ReproduceOptions {
    fn default() -> Self {
        ReproduceOptions {
            kernel: KernelSpec::ScaledLaplacian,
            gamma: PAPER_GAMMA,
            seed: 0,
            monotonicity_trials: 1000,
            picard: PicardConfig::default(),
        }
    }
}

/// Model fit at one voltage, in raw units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageFit {
    pub voltage: f64,
    pub t: Vec<f64>,
    pub y_data: Vec<f64>,
    pub y_model: Vec<f64>,
    pub rmse: f64,
    /// `max y − min y` of the data trajectory.
    pub output_range: f64,
    pub picard_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproductionReport {
    pub params: HHParams,
    pub kernel: KernelSpec,
    pub gamma: f64,
    pub seed: u64,
    /// Norm of the fitted `S` on the scaled data.
    pub rkhs_norm: f64,
    /// Same fit on the unscaled data, for reference.
    pub rkhs_norm_unscaled: f64,
    /// Largest `|x|` gap between closed form and RK4.
    pub data_oracle_error: f64,
    /// RMSE over all voltages and samples, raw units.
    pub fit_rmse: f64,
    pub max_abs_output: f64,
    pub per_voltage: Vec<VoltageFit>,
    pub monotonicity: MonotonicityCheck,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// Generates the step data, fits `S` on the scattered (scaled) data with the
/// given `γ`, simulates `R` at every training input, and checks the frozen
/// bounds.
pub fn reproduce_paper(params: &HHParams, opts: &ReproduceOptions) -> Result<ReproductionReport> {
    let raw = generate_dataset(params)?;
    let s = params.unit_scale;
    let scaled = Dataset::new(scale(&raw.inputs, s), scale(&raw.outputs, s))?;
    let model = fit_monotone_with_gamma(&opts.kernel, &scaled, opts.gamma, opts.picard)?;
    let rkhs_norm = model.s_model.rkhs_norm;

    let s_raw = crate::monotone::scatter(&raw)?.to_dataset()?;
    let rkhs_norm_unscaled = fit(&opts.kernel, &s_raw, opts.gamma)?.rkhs_norm;

    let data_oracle_error = closed_form_vs_rk4(params)?;

    let grid = params.time_grid();
    let per_voltage: Vec<VoltageFit> = params
        .voltages
        .par_iter()
        .zip(raw.outputs.par_iter())
        .zip(scaled.inputs.par_iter())
        .map(|((&v, y_data), u)| {
            let sim = simulate(&model, u, None)?;
            let y_model: Vec<f64> = sim.y_star.iter().map(|y| y / s).collect();
            let hi = y_data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lo = y_data.iter().cloned().fold(f64::INFINITY, f64::min);
            Ok(VoltageFit {
                voltage: v,
                t: grid.clone(),
                rmse: rmse(y_data, &y_model),
                y_data: y_data.clone(),
                y_model,
                output_range: hi - lo,
                picard_iters: sim.iters,
            })
        })
        .collect::<Result<_>>()?;

    let total: f64 = per_voltage.iter().map(|f| f.rmse.powi(2)).sum();
    let fit_rmse = (total / per_voltage.len() as f64).sqrt();
    let max_abs_output = raw.outputs.iter().flatten().fold(0.0f64, |a, y| a.max(y.abs()));

    let lo = params.voltages.iter().cloned().fold(f64::INFINITY, f64::min) * s;
    let hi = params.voltages.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * s;
    let sampler = UniformBox::new(params.samples, lo, hi);
    let monotonicity = monotonicity_check(&model, &sampler, opts.monotonicity_trials, opts.seed)?;

    let checks = evaluate_checks(rkhs_norm, data_oracle_error, &monotonicity, &per_voltage, max_abs_output);
    let pass = checks.iter().all(|c| c.pass);
    Ok(ReproductionReport {
        params: params.clone(),
        kernel: opts.kernel.clone(),
        gamma: opts.gamma,
        seed: opts.seed,
        rkhs_norm,
        rkhs_norm_unscaled,
        data_oracle_error,
        fit_rmse,
        max_abs_output,
        per_voltage,
        monotonicity,
        checks,
        pass,
    })
}

fn evaluate_checks(
    rkhs_norm: f64,
    oracle_err: f64,
    mono: &MonotonicityCheck,
    fits: &[VoltageFit],
    max_abs_output: f64,
) -> Vec<Check> {
    let mut checks = vec![
        Check {
            name: "data_matches_rk4".into(),
            pass: oracle_err <= DATA_ORACLE_TOL,
            detail: format!("max |x_closed - x_rk4| = {oracle_err:.3e} (bound {DATA_ORACLE_TOL:e})"),
        },
        Check {
            name: "rkhs_norm_band".into(),
            pass: (NORM_BAND.0..=NORM_BAND.1).contains(&rkhs_norm),
            detail: format!("||S|| = {rkhs_norm:.6} (band [{}, {}])", NORM_BAND.0, NORM_BAND.1),
        },
        Check {
            name: "monotone".into(),
            pass: mono.pass,
            detail: format!(
                "{} pairs, min inner product {:.3e}, {} violations",
                mono.trials, mono.min_inner, mono.violations
            ),
        },
    ];

    let worst = fits.iter().map(|f| f.rmse).fold(0.0, f64::max);
    let frac = worst / max_abs_output.max(f64::MIN_POSITIVE);
    checks.push(Check {
        name: "rmse_bound".into(),
        pass: frac <= RMSE_FRACTION_BOUND,
        detail: format!("max per-voltage RMSE = {worst:.4} = {frac:.4} of max |y| (bound {RMSE_FRACTION_BOUND})"),
    });

    // misfit grows with |v|: compare the outer thirds of the voltage set
    let mut by_mag: Vec<&VoltageFit> = fits.iter().collect();
    by_mag.sort_by(|a, b| a.voltage.abs().total_cmp(&b.voltage.abs()));
    let k = (by_mag.len() / 3).max(1);
    let mean = |fs: &[&VoltageFit]| fs.iter().map(|f| f.rmse).sum::<f64>() / fs.len() as f64;
    let small = mean(&by_mag[..k]);
    let large = mean(&by_mag[by_mag.len() - k..]);
    checks.push(Check {
        name: "misfit_grows_with_voltage".into(),
        pass: by_mag.len() >= 2 && large > small,
        detail: format!("mean RMSE over {k} largest |v| = {large:.4}, over {k} smallest = {small:.4}"),
    });
    checks
}

/// A pair of inputs on which the raw operator violates monotonicity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonMonotoneWitness {
    pub seed: u64,
    pub trial: usize,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    /// `⟨u₁ − u₂, y₁ − y₂⟩`.
    pub inner: f64,
}

/// Piecewise-constant input with one to three levels in `[-109, 0]`.
fn random_steps(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    let pieces = rng.random_range(1..=3usize);
    let mut cuts: Vec<usize> = (0..pieces - 1).map(|_| rng.random_range(1..n)).collect();
    cuts.sort_unstable();
    let levels: Vec<f64> = (0..pieces).map(|_| rng.random_range(-109.0..0.0)).collect();
    (0..n)
        .map(|j| levels[cuts.iter().filter(|&&c| c <= j).count()])
        .collect()
}

pub fn inner_product_gap(u1: &[f64], u2: &[f64], params: &HHParams) -> Result<f64> {
    let y1 = hh_operator(u1, params)?;
    let y2 = hh_operator(u2, params)?;
    let du: Vec<f64> = u1.iter().zip(u2).map(|(a, b)| a - b).collect();
    let dy: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| a - b).collect();
    Ok(dot(&du, &dy))
}

/// Seeded random search for a pair with `⟨u₁ − u₂, y₁ − y₂⟩ < 0`.
pub fn search_nonmonotone(params: &HHParams, seed: u64, max_trials: usize) -> Result<Option<NonMonotoneWitness>> {
    let mut rng = rng_from_seed(seed);
    for trial in 0..max_trials {
        let u1 = random_steps(&mut rng, params.samples);
        let u2 = random_steps(&mut rng, params.samples);
        let inner = inner_product_gap(&u1, &u2, params)?;
        if inner < 0.0 {
            return Ok(Some(NonMonotoneWitness {
                seed,
                trial,
                u1,
                u2,
                inner,
            }));
        }
    }
    Ok(None)
}
