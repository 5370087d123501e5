//! Monotone operator identification through the scattering (Cayley) transform.
//!
//! Data `(u, y)` of a monotone `R` map to `v = u + y`, `z = u − y`, which are
//! input/output pairs of the nonexpansive `S = (I − R)(I + R)^{-1}`. We fit
//! `S` with a certified Lipschitz budget `ell < 1` and evaluate
//! `R = (I − S)(I + S)^{-1}` by Picard iteration `y ← u − S(u + y)`.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::estimator::{assemble_gram, fit_on_gram, tune_gamma, Dataset, FittedModel, TuneOptions};
use crate::kernels::KernelSpec;
use crate::numerics::{dist2, dot, norm2};
use crate::sampling::{rng_from_seed, sample_pairs, InputSampler};

/// Relative slack in the sampled monotonicity inequality.
pub const MONOTONE_TOL: f64 = 1e-8;

pub const DEFAULT_ELL: f64 = 0.99;

/// Multiple of `ε·Σ|K c|` treated as a converged Picard step.
const ROUNDING_STEPS: f64 = 64.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig {
            tol: 1e-10,
            max_iter: 100_000,
        }
    }
}

/// Transformed data `v_i = u_i + y_i`, `z_i = u_i − y_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatteredData {
    pub v: Vec<Vec<f64>>,
    pub z: Vec<Vec<f64>>,
}

impl ScatteredData {
    /// The `(v_i, z_i)` pairs as a regression dataset for `S`.
    pub fn to_dataset(&self) -> Result<Dataset> {
        Dataset::new(self.v.clone(), self.z.clone())
    }

    /// Inverts [`scatter`]: `u = (v + z)/2`, `y = (v − z)/2`.
    pub fn unscatter(&self) -> Result<Dataset> {
        let u = self
            .v
            .iter()
            .zip(&self.z)
            .map(|(v, z)| v.iter().zip(z).map(|(a, b)| (a + b) / 2.0).collect())
            .collect();
        let y = self
            .v
            .iter()
            .zip(&self.z)
            .map(|(v, z)| v.iter().zip(z).map(|(a, b)| (a - b) / 2.0).collect())
            .collect();
        Dataset::new(u, y)
    }
}

pub fn scatter(data: &Dataset) -> Result<ScatteredData> {
    data.validate()?;
    check_dim(data.input_dim(), data.output_dim())?;
    let v = data
        .inputs
        .iter()
        .zip(&data.outputs)
        .map(|(u, y)| u.iter().zip(y).map(|(a, b)| a + b).collect())
        .collect();
    let z = data
        .inputs
        .iter()
        .zip(&data.outputs)
        .map(|(u, y)| u.iter().zip(y).map(|(a, b)| a - b).collect())
        .collect();
    Ok(ScatteredData { v, z })
}

/// `(I − R)(I + R)^{-1}` for a linear map `R`. The transform is an
/// involution, so applying it to `S` recovers `R`.
pub fn cayley(r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !r.is_square() {
        return Err(Error::DimensionMismatch {
            expected: r.nrows(),
            got: r.ncols(),
        });
    }
    let n = r.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let inv = (&eye + r)
        .try_inverse()
        .ok_or(Error::Singular(f64::NAN))?;
    Ok((eye - r) * inv)
}

/// A fitted contraction `S` together with the Picard settings that define `R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneModel {
    pub s_model: FittedModel,
    /// Certified Lipschitz constant of `S`, in `[0, 1)`.
    pub ell: f64,
    pub picard: PicardConfig,
}

impl MonotoneModel {
    pub fn new(s_model: FittedModel, ell: f64, picard: PicardConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&ell) {
            return Err(Error::InvalidParameter(format!("ell must lie in [0, 1), got {ell}")));
        }
        check_dim(s_model.dims.d, s_model.dims.m)?;
        match s_model.lipschitz_certified {
            Some(l) if l <= ell * (1.0 + 1e-12) => {}
            Some(l) => {
                return Err(Error::InvalidParameter(format!(
                    "certified constant {l} of S exceeds ell = {ell}"
                )))
            }
            None => {
                return Err(Error::NotCertified(format!(
                    "{} carries no Lipschitz certificate",
                    s_model.kernel
                )))
            }
        }
        if !(picard.tol >= 0.0) || picard.max_iter == 0 {
            return Err(Error::InvalidParameter("picard needs tol >= 0 and max_iter >= 1".into()));
        }
        Ok(MonotoneModel { s_model, ell, picard })
    }

    pub fn dim(&self) -> usize {
        self.s_model.dims.m
    }

    /// `R(u)` starting from `y⁰ = 0`.
    pub fn apply(&self, u: &[f64]) -> Result<Vec<f64>> {
        simulate(self, u, None).map(|s| s.y_star)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: MonotoneModel = serde_json::from_str(s)?;
        let s_json = serde_json::to_string(&raw.s_model)?;
        let s_model = FittedModel::from_json(&s_json)?;
        MonotoneModel::new(s_model, raw.ell, raw.picard)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn check_certified(spec: &KernelSpec) -> Result<()> {
    if spec.claims_nonexpansive() {
        Ok(())
    } else {
        Err(Error::NotCertified(format!("{spec} is not a certified nonexpansive kernel")))
    }
}

/// Scatters the data, tunes `γ` to the budget `ell`, and fits `S`.
pub fn fit_monotone(spec: &KernelSpec, data: &Dataset, ell: f64) -> Result<MonotoneModel> {
    check_certified(spec)?;
    if !(ell > 0.0 && ell < 1.0) {
        return Err(Error::InvalidParameter(format!("ell must lie in (0, 1), got {ell}")));
    }
    let s_data = scatter(data)?.to_dataset()?;
    let gram = assemble_gram(spec, &s_data.inputs, s_data.output_dim())?;
    let tuned = tune_gamma(&gram, &s_data.ybar(), ell, TuneOptions::default())?;
    let s_model = fit_on_gram(spec, &s_data, &gram, tuned.gamma)?;
    MonotoneModel::new(s_model, ell, PicardConfig::default())
}

/// Fits `S` with a fixed `γ`; `ell` is the resulting RKHS norm, which must be
/// below one.
pub fn fit_monotone_with_gamma(
    spec: &KernelSpec,
    data: &Dataset,
    gamma: f64,
    picard: PicardConfig,
) -> Result<MonotoneModel> {
    check_certified(spec)?;
    let s_data = scatter(data)?.to_dataset()?;
    let gram = assemble_gram(spec, &s_data.inputs, s_data.output_dim())?;
    let s_model = fit_on_gram(spec, &s_data, &gram, gamma)?;
    if s_model.rkhs_norm >= 1.0 {
        return Err(Error::InvalidParameter(format!(
            "gamma = {gamma} gives ||S|| = {} >= 1, S is not a contraction",
            s_model.rkhs_norm
        )));
    }
    let ell = s_model.rkhs_norm;
    MonotoneModel::new(s_model, ell, picard)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub y_star: Vec<f64>,
    pub iters: usize,
    /// Norm of the last Picard step.
    pub residual: f64,
}

/// Step size below which the iterate is within `tol` of the fixed point.
fn stop_threshold(model: &MonotoneModel) -> f64 {
    model.picard.tol * (1.0 - model.ell) / model.ell.max(1e-12)
}

fn picard(
    model: &MonotoneModel,
    u_star: &[f64],
    y0: Option<&[f64]>,
    mut record: Option<&mut Vec<Vec<f64>>>,
) -> Result<Simulation> {
    let m = model.dim();
    check_dim(m, u_star.len())?;
    let mut y = match y0 {
        Some(y0) => {
            check_dim(m, y0.len())?;
            y0.to_vec()
        }
        None => vec![0.0; m],
    };
    if let Some(trace) = record.as_deref_mut() {
        trace.push(y.clone());
    }
    let threshold = stop_threshold(model);
    let mut arg = vec![0.0; m];
    let mut residual = f64::INFINITY;
    for k in 1..=model.picard.max_iter {
        for ((a, u), yk) in arg.iter_mut().zip(u_star).zip(&y) {
            *a = u + yk;
        }
        let (s, magnitude) = model.s_model.predict_with_magnitude(&arg)?;
        let next: Vec<f64> = u_star.iter().zip(&s).map(|(u, sv)| u - sv).collect();
        residual = dist2(&next, &y);
        y = next;
        if let Some(trace) = record.as_deref_mut() {
            trace.push(y.clone());
        }
        // rounding in one evaluation is ~eps * scale; a contraction at rate
        // ell can cycle with steps up to that over (1 - ell)
        let scale = magnitude + norm2(u_star) + norm2(&y);
        let floor = ROUNDING_STEPS * f64::EPSILON * scale / (1.0 - model.ell);
        if residual <= threshold.max(floor) {
            return Ok(Simulation {
                y_star: y,
                iters: k,
                residual,
            });
        }
    }
    Err(Error::NoConvergence {
        iters: model.picard.max_iter,
        residual,
    })
}

/// `R(u*)` by Picard iteration from `y0` (zero by default).
pub fn simulate(model: &MonotoneModel, u_star: &[f64], y0: Option<&[f64]>) -> Result<Simulation> {
    picard(model, u_star, y0, None)
}

/// Like [`simulate`], also returning every iterate `y⁰, y¹, …`.
pub fn simulate_traced(
    model: &MonotoneModel,
    u_star: &[f64],
    y0: Option<&[f64]>,
) -> Result<(Simulation, Vec<Vec<f64>>)> {
    let mut trace = Vec::new();
    let sim = picard(model, u_star, y0, Some(&mut trace))?;
    Ok((sim, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityCheck {
    pub seed: u64,
    pub trials: usize,
    /// Smallest `⟨x − y, R(x) − R(y)⟩` seen.
    pub min_inner: f64,
    /// Pairs that broke the toleranced inequality.
    pub violations: usize,
    pub pass: bool,
}

/// Samples input pairs and checks `⟨x − y, R(x) − R(y)⟩ ≥ 0` up to a
/// tolerance relative to the simulated outputs.
pub fn monotonicity_check(
    model: &MonotoneModel,
    sampler: &dyn InputSampler,
    trials: usize,
    seed: u64,
) -> Result<MonotonicityCheck> {
    check_dim(model.dim(), sampler.dim())?;
    let pairs = sample_pairs(sampler, trials, &mut rng_from_seed(seed));
    let results: Vec<(f64, bool)> = pairs
        .par_iter()
        .map(|(x, y)| {
            let rx = model.apply(x)?;
            let ry = model.apply(y)?;
            let dx: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).collect();
            let dr: Vec<f64> = rx.iter().zip(&ry).map(|(a, b)| a - b).collect();
            let inner = dot(&dx, &dr);
            let slack = MONOTONE_TOL * norm2(&dx) * (norm2(&rx) + norm2(&ry) + 1.0);
            Ok((inner, inner >= -slack))
        })
        .collect::<Result<_>>()?;
    let min_inner = results.iter().map(|r| r.0).fold(f64::INFINITY, f64::min);
    let violations = results.iter().filter(|r| !r.1).count();
    Ok(MonotonicityCheck {
        seed,
        trials,
        min_inner,
        violations,
        pass: violations == 0,
    })
}
