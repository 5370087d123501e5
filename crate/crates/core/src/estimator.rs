//! Regularized least squares in a vector-valued RKHS.
//!
//! For data `(u_i, y_i)` and `γ > 0` the minimizer of
//! `Σ ‖y_i − H(u_i)‖² + γ‖H‖²` is `Ĥ(·) = Σ_j K(·, u_j) c_j`, where the
//! stacked coefficients solve `(G + γI) c̄ = ȳ`. Its RKHS norm is
//! `‖G^{1/2}(G + γI)^{-1} ȳ‖ = √(c̄ᵀ G c̄)`, which is also a Lipschitz constant
//! of `Ĥ` whenever the kernel is nonexpansive.
//!
//! Stacked vectors are laid out point-major: entry `i·m + a` is coordinate
//! `a` of point `i`.

use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernels::{KernelSpec, OperatorKernel};
use crate::numerics::{dist2, dot, norm2, solve_spd, sqrt_psd, SymMatrix};
use crate::sampling::{rng_from_seed, sample_pairs, InputSampler};

/// Relative slack on the certified Lipschitz constant in the empirical check.
pub const LIPSCHITZ_TOL: f64 = 1e-6;

/// `n` input/output pairs with shared input dimension `d` and output dimension `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<Vec<f64>>) -> Result<Self> {
        let data = Dataset { inputs, outputs };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Empty("dataset has no samples"));
        }
        check_dim(self.inputs.len(), self.outputs.len())?;
        let d = self.inputs[0].len();
        let m = self.outputs[0].len();
        if d == 0 || m == 0 {
            return Err(Error::Empty("inputs and outputs need at least one coordinate"));
        }
        for (u, y) in self.inputs.iter().zip(&self.outputs) {
            check_dim(d, u.len())?;
            check_dim(m, y.len())?;
        }
        if self.inputs.iter().chain(&self.outputs).flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn output_dim(&self) -> usize {
        self.outputs.first().map_or(0, Vec::len)
    }

    /// Outputs stacked into one vector of length `n·m`.
    pub fn ybar(&self) -> Vec<f64> {
        self.outputs.iter().flatten().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GramStructure {
    Dense,
    /// The full matrix equals `base ⊗ I_m`; solves run per output coordinate.
    ScalarTimesIdentity { base: SymMatrix },
}

/// The `nm × nm` Gram matrix with block `(i, j)` equal to `K(u_i, u_j)`.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    n: usize,
    m: usize,
    matrix: SymMatrix,
    structure: GramStructure,
}

impl GramMatrix {
    /// Wraps an explicit PSD matrix as a dense Gram matrix with `m = 1`.
    pub fn from_matrix(matrix: SymMatrix) -> Self {
        GramMatrix {
            n: matrix.dim(),
            m: 1,
            matrix,
            structure: GramStructure::Dense,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dim(&self) -> usize {
        self.n * self.m
    }

    pub fn matrix(&self) -> &SymMatrix {
        &self.matrix
    }

    pub fn structure(&self) -> &GramStructure {
        &self.structure
    }

    /// Drops the Kronecker structure so every operation uses the full matrix.
    pub fn to_dense(&self) -> GramMatrix {
        GramMatrix {
            structure: GramStructure::Dense,
            ..self.clone()
        }
    }

    /// `(G + γI)^{-1} ȳ`.
    pub fn solve_shifted(&self, gamma: f64, ybar: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), ybar.len())?;
        match &self.structure {
            GramStructure::Dense => solve_spd(&self.matrix, gamma, ybar),
            GramStructure::ScalarTimesIdentity { base } => {
                let (n, m) = (self.n, self.m);
                let mut out = vec![0.0; n * m];
                for a in 0..m {
                    let rhs: Vec<f64> = (0..n).map(|i| ybar[i * m + a]).collect();
                    let x = solve_spd(base, gamma, &rhs)?;
                    for (i, xi) in x.into_iter().enumerate() {
                        out[i * m + a] = xi;
                    }
                }
                Ok(out)
            }
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.matrix.mul_vec(x)
    }

    /// `xᵀ G x`.
    pub fn quadratic_form(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        match &self.structure {
            GramStructure::Dense => self.matrix.quadratic_form(x),
            GramStructure::ScalarTimesIdentity { base } => {
                let (n, m) = (self.n, self.m);
                let mut acc = 0.0;
                for a in 0..m {
                    let xa: Vec<f64> = (0..n).map(|i| x[i * m + a]).collect();
                    acc += base.quadratic_form(&xa)?;
                }
                Ok(acc)
            }
        }
    }
}

/// Fills the Gram matrix block by block. Scalar·identity kernels get the
/// Kronecker fast path.
pub fn assemble_gram<K: OperatorKernel + ?Sized>(
    kernel: &K,
    inputs: &[Vec<f64>],
    m: usize,
) -> Result<GramMatrix> {
    if inputs.is_empty() {
        return Err(Error::Empty("no inputs for Gram assembly"));
    }
    if m == 0 {
        return Err(Error::Empty("output dimension must be positive"));
    }
    if let Some(k) = kernel.output_dim() {
        check_dim(k, m)?;
    }
    let d = inputs[0].len();
    for u in inputs {
        check_dim(d, u.len())?;
    }
    let n = inputs.len();

    if kernel.is_scalar_identity() {
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| (i..n).map(|j| kernel.eval_scalar(&inputs[i], &inputs[j])).collect())
            .collect::<Result<_>>()?;
        let mut base = DMatrix::zeros(n, n);
        for (i, row) in rows.iter().enumerate() {
            for (off, v) in row.iter().enumerate() {
                base[(i, i + off)] = *v;
                base[(i + off, i)] = *v;
            }
        }
        let base = SymMatrix::symmetrized(base);
        return Ok(GramMatrix {
            n,
            m,
            matrix: base.kron_identity(m),
            structure: GramStructure::ScalarTimesIdentity { base },
        });
    }

    let rows: Vec<Vec<DMatrix<f64>>> = (0..n)
        .into_par_iter()
        .map(|i| (i..n).map(|j| kernel.eval(&inputs[i], &inputs[j], m)).collect())
        .collect::<Result<_>>()?;
    let mut full = DMatrix::zeros(n * m, n * m);
    for (i, row) in rows.iter().enumerate() {
        for (off, block) in row.iter().enumerate() {
            let j = i + off;
            for a in 0..m {
                for b in 0..m {
                    full[(i * m + a, j * m + b)] = block[(a, b)];
                    full[(j * m + b, i * m + a)] = block[(a, b)];
                }
            }
        }
    }
    Ok(GramMatrix {
        n,
        m,
        matrix: SymMatrix::symmetrized(full),
        structure: GramStructure::Dense,
    })
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")))
    }
}

/// `‖(G + γI)c̄ − ȳ‖`.
pub fn representer_residual(gram: &GramMatrix, gamma: f64, coef: &[f64], ybar: &[f64]) -> Result<f64> {
    let gc = gram.mul_vec(coef)?;
    check_dim(gc.len(), ybar.len())?;
    Ok(gc
        .iter()
        .zip(coef)
        .zip(ybar)
        .map(|((g, c), y)| {
            let r = g + gamma * c - y;
            r * r
        })
        .sum::<f64>()
        .sqrt())
}

/// The regularized least-squares objective of `Ĥ = Σ K(·,u_j)c_j`:
/// `‖ȳ − G c̄‖² + γ c̄ᵀ G c̄`.
pub fn regularized_objective(gram: &GramMatrix, ybar: &[f64], coef: &[f64], gamma: f64) -> Result<f64> {
    let gc = gram.mul_vec(coef)?;
    check_dim(gc.len(), ybar.len())?;
    let misfit: f64 = ybar.iter().zip(&gc).map(|(y, g)| (y - g) * (y - g)).sum();
    Ok(misfit + gamma * dot(coef, &gc))
}

/// `‖G^{1/2}(G + γI)^{-1} ȳ‖`, computed as `√(c̄ᵀ G c̄)` without forming `G^{1/2}`.
pub fn rkhs_norm_at(gram: &GramMatrix, ybar: &[f64], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(NormProfile::new(gram, ybar)?.phi(gamma))
}

/// `φ(γ) = ‖G^{1/2}(G + γI)^{-1} ȳ‖` in the eigenbasis of `G`:
/// `φ(γ)² = Σ λᵢ ŷᵢ² / (λᵢ + γ)²`.
///
/// Evaluating `c̄ᵀGc̄` directly loses everything to cancellation once `c̄`
/// has large components in the (numerical) null space of `G`; the spectral
/// form is nonincreasing in `γ` by construction. Eigenvalues below
/// `n·ε·λ_max` count as zero.
#[derive(Debug, Clone)]
pub struct NormProfile {
    /// `(λᵢ, ŷᵢ²)` for the retained eigenvalues.
    terms: Vec<(f64, f64)>,
}

impl NormProfile {
    pub fn new(gram: &GramMatrix, ybar: &[f64]) -> Result<Self> {
        check_dim(gram.dim(), ybar.len())?;
        let (base, m) = match gram.structure() {
            GramStructure::Dense => (gram.matrix(), 1),
            GramStructure::ScalarTimesIdentity { base } => (base, gram.m()),
        };
        let eig = base.eig();
        let k = base.dim();
        let cutoff = k as f64 * f64::EPSILON * eig.max().max(0.0);
        let mut terms = Vec::new();
        for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda <= cutoff {
                continue;
            }
            let q = eig.eigenvectors.column(i);
            for a in 0..m {
                let proj: f64 = (0..k).map(|r| q[r] * ybar[r * m + a]).sum();
                terms.push((lambda, proj * proj));
            }
        }
        Ok(NormProfile { terms })
    }

    pub fn phi(&self, gamma: f64) -> f64 {
        self.terms
            .iter()
            .map(|&(l, y2)| l * y2 / ((l + gamma) * (l + gamma)))
            .sum::<f64>()
            .sqrt()
    }
}

/// Same quantity through the explicit PSD square root; a cross-check only.
pub fn rkhs_norm_via_sqrt(gram: &GramMatrix, ybar: &[f64], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    let coef = gram.solve_shifted(gamma, ybar)?;
    let root = sqrt_psd(gram.matrix())?;
    Ok(norm2(&root.mul_vec(&coef)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub d: usize,
    pub m: usize,
}

/// A fitted kernel expansion `Ĥ(·) = Σ_j K(·, u_j) c_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub kernel: KernelSpec,
    pub train_inputs: Vec<Vec<f64>>,
    pub coefficients: Vec<Vec<f64>>,
    pub gamma: f64,
    pub rkhs_norm: f64,
    /// Equal to `rkhs_norm` when the kernel is certified nonexpansive.
    pub lipschitz_certified: Option<f64>,
    pub dims: Dims,
}

impl FittedModel {
    /// Builds a model from explicit coefficients, computing its RKHS norm.
    pub fn from_coefficients(
        kernel: KernelSpec,
        train_inputs: Vec<Vec<f64>>,
        coefficients: Vec<Vec<f64>>,
        gamma: f64,
    ) -> Result<Self> {
        kernel.validate()?;
        let data = Dataset::new(train_inputs, coefficients)?;
        let dims = Dims {
            d: data.input_dim(),
            m: data.output_dim(),
        };
        let gram = assemble_gram(&kernel, &data.inputs, dims.m)?;
        let rkhs_norm = gram.quadratic_form(&data.ybar())?.max(0.0).sqrt();
        let lipschitz_certified = kernel.claims_nonexpansive().then_some(rkhs_norm);
        Ok(FittedModel {
            kernel,
            train_inputs: data.inputs,
            coefficients: data.outputs,
            gamma,
            rkhs_norm,
            lipschitz_certified,
            dims,
        })
    }

    pub fn stacked_coefficients(&self) -> Vec<f64> {
        self.coefficients.iter().flatten().copied().collect()
    }

    /// `Σ_j K(u, u_j) c_j`.
    pub fn predict(&self, u: &[f64]) -> Result<Vec<f64>> {
        self.predict_with_magnitude(u).map(|(out, _)| out)
    }

    /// Prediction together with `Σ |K(u, u_j)_{ab} c_{jb}|`, the scale of the
    /// rounding error in the sum. Large coefficients that cancel (ill-
    /// conditioned Gram matrices) show up here.
    pub fn predict_with_magnitude(&self, u: &[f64]) -> Result<(Vec<f64>, f64)> {
        check_dim(self.dims.d, u.len())?;
        let m = self.dims.m;
        let mut out = vec![0.0; m];
        let mut magnitude = 0.0;
        if self.kernel.is_scalar() {
            for (uj, cj) in self.train_inputs.iter().zip(&self.coefficients) {
                let k = self.kernel.eval_scalar(u, uj)?;
                for (o, c) in out.iter_mut().zip(cj) {
                    *o += k * c;
                    magnitude += (k * c).abs();
                }
            }
        } else {
            for (uj, cj) in self.train_inputs.iter().zip(&self.coefficients) {
                let k = self.kernel.eval_operator(u, uj, m)?;
                for a in 0..m {
                    for b in 0..m {
                        let t = k[(a, b)] * cj[b];
                        out[a] += t;
                        magnitude += t.abs();
                    }
                }
            }
        }
        Ok((out, magnitude))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let model: FittedModel = serde_json::from_str(s)?;
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        check_dim(self.train_inputs.len(), self.coefficients.len())?;
        for (u, c) in self.train_inputs.iter().zip(&self.coefficients) {
            check_dim(self.dims.d, u.len())?;
            check_dim(self.dims.m, c.len())?;
        }
        Ok(())
    }
}

/// Solves the representer system and returns the model together with its Gram matrix.
pub fn fit_with_gram(spec: &KernelSpec, data: &Dataset, gamma: f64) -> Result<(FittedModel, GramMatrix)> {
    check_gamma(gamma)?;
    spec.validate()?;
    data.validate()?;
    let m = data.output_dim();
    let gram = assemble_gram(spec, &data.inputs, m)?;
    let model = fit_on_gram(spec, data, &gram, gamma)?;
    Ok((model, gram))
}

/// Fits with a precomputed Gram matrix of `data.inputs`.
pub fn fit_on_gram(spec: &KernelSpec, data: &Dataset, gram: &GramMatrix, gamma: f64) -> Result<FittedModel> {
    check_gamma(gamma)?;
    let ybar = data.ybar();
    let coef = gram.solve_shifted(gamma, &ybar)?;
    let rkhs_norm = NormProfile::new(gram, &ybar)?.phi(gamma);
    let m = data.output_dim();
    Ok(FittedModel {
        kernel: spec.clone(),
        train_inputs: data.inputs.clone(),
        coefficients: coef.chunks(m).map(<[f64]>::to_vec).collect(),
        gamma,
        rkhs_norm,
        lipschitz_certified: spec.claims_nonexpansive().then_some(rkhs_norm),
        dims: Dims {
            d: data.input_dim(),
            m,
        },
    })
}

/// Fits `Ĥ` by regularized least squares with parameter `gamma`.
///
/// Duplicate inputs, even with conflicting outputs, are fine: `γ > 0` keeps
/// the system nonsingular.
pub fn fit(spec: &KernelSpec, data: &Dataset, gamma: f64) -> Result<FittedModel> {
    fit_with_gram(spec, data, gamma).map(|(model, _)| model)
}

pub fn predict(model: &FittedModel, u: &[f64]) -> Result<Vec<f64>> {
    model.predict(u)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneOptions {
    /// Relative width of the final bracket.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions {
            tol: 1e-6,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub gamma: f64,
    pub achieved_norm: f64,
    pub iterations: usize,
}

/// Smallest regularization floor considered by [`tune_gamma`].
pub fn gamma_floor(gram: &GramMatrix) -> f64 {
    1e-12 * gram.matrix().trace() / gram.dim() as f64 + 1e-300
}

/// Finds (to relative tolerance) the smallest `γ` with `rkhs_norm_at ≤ ell`.
///
/// `φ(γ)² = Σ λᵢ ŷᵢ² / (λᵢ + γ)²` in the eigenbasis of `G`, so `φ` is
/// nonincreasing and bisection on `log γ` is valid.
pub fn tune_gamma(gram: &GramMatrix, ybar: &[f64], ell: f64, opts: TuneOptions) -> Result<TuneResult> {
    if !(ell.is_finite() && ell > 0.0) {
        return Err(Error::InvalidParameter(format!("ell must be positive, got {ell}")));
    }
    let profile = NormProfile::new(gram, ybar)?;
    let phi = |g: f64| -> Result<f64> { Ok(profile.phi(g)) };

    let floor = gamma_floor(gram);
    let at_floor = phi(floor)?;
    if at_floor <= ell {
        return Ok(TuneResult {
            gamma: floor,
            achieved_norm: at_floor,
            iterations: 0,
        });
    }

    let mut iterations = 0;
    let mut lo = floor;
    let mut hi = floor;
    let mut phi_hi = at_floor;
    while phi_hi > ell {
        iterations += 1;
        if iterations > opts.max_iter {
            return Err(Error::NoConvergence {
                iters: iterations - 1,
                residual: phi_hi - ell,
            });
        }
        lo = hi;
        hi *= 10.0;
        phi_hi = phi(hi)?;
    }

    while hi / lo - 1.0 > opts.tol {
        iterations += 1;
        if iterations > opts.max_iter {
            return Err(Error::NoConvergence {
                iters: iterations - 1,
                residual: hi / lo - 1.0,
            });
        }
        let mid = (lo * hi).sqrt();
        let phi_mid = phi(mid)?;
        if phi_mid <= ell {
            hi = mid;
            phi_hi = phi_mid;
        } else {
            lo = mid;
        }
    }
    Ok(TuneResult {
        gamma: hi,
        achieved_norm: phi_hi,
        iterations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzCheck {
    pub seed: u64,
    pub trials: usize,
    pub certified: f64,
    pub max_ratio: f64,
    pub pass: bool,
}

/// Samples pairs and compares `‖Ĥ(x) − Ĥ(y)‖ / ‖x − y‖` with the certificate.
pub fn empirical_lipschitz_check(
    model: &FittedModel,
    sampler: &dyn InputSampler,
    trials: usize,
    seed: u64,
) -> Result<LipschitzCheck> {
    let certified = model.lipschitz_certified.ok_or_else(|| {
        Error::NotCertified(format!("{} carries no Lipschitz certificate", model.kernel))
    })?;
    check_dim(model.dims.d, sampler.dim())?;
    let pairs = sample_pairs(sampler, trials, &mut rng_from_seed(seed));
    let ratios: Vec<f64> = pairs
        .par_iter()
        .map(|(x, y)| {
            let sep = dist2(x, y);
            if sep == 0.0 {
                return Ok(0.0);
            }
            let hx = model.predict(x)?;
            let hy = model.predict(y)?;
            Ok(dist2(&hx, &hy) / sep)
        })
        .collect::<Result<_>>()?;
    let max_ratio = ratios.into_iter().fold(0.0, f64::max);
    Ok(LipschitzCheck {
        seed,
        trials,
        certified,
        max_ratio,
        pass: max_ratio <= certified * (1.0 + LIPSCHITZ_TOL),
    })
}
