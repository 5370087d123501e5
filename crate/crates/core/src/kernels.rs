//! Kernel catalogue: scalar kernels, operator-valued compositions, and
//! numerical audits for positive semidefiniteness and nonexpansiveness.
//!
//! A kernel `K(u, v)` maps a pair of inputs to an `m × m` matrix acting on
//! the output space. It is *nonexpansive* when
//!
//! ```text
//! ‖K(u,u) − K(u,v) − K(v,u) + K(v,v)‖^{1/2} ≤ ‖u − v‖   for all u, v,
//! ```
//!
//! in which case every operator in its RKHS is Lipschitz with constant equal
//! to its RKHS norm. [`KernelSpec::claims_nonexpansive`] is the certificate;
//! [`audit_nonexpansive`] only tries to falsify it.
//!
//! # JSON form
//!
//! ```json
//! {"variant": "bilinear"}
//! {"variant": "gaussian", "params": {"sigma": 2.0}}
//! {"variant": "scaled_laplacian"}
//! {"variant": "inverse_power", "params": {"c": 2.0, "d": 1.0}}
//! {"variant": "polynomial_scalar", "params": {"c": 0.0, "d": 2}}
//! {"variant": "scalar_times_operator", "params": {"base": {...}, "r": [[0.5, 0.0], [0.0, 0.5]]}}
//! {"variant": "convex_sum", "params": {"terms": [{"weight": 0.5, "kernel": {...}}]}}
//! {"variant": "conjugated", "params": {"base": {...}, "r": [[1.0, 0.0], [0.0, 0.0]]}}
//! ```

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{check_dim, Error, Result};
use crate::estimator::assemble_gram;
use crate::numerics::{dist2, dot, psd_floor, spectral_norm, SymMatrix};
use crate::sampling::{rng_from_seed, sample_pairs, InputSampler};

/// Multiplicative slack on the nonexpansive bound, absorbing roundoff at the
/// bilinear equality case.
pub const METRIC_TOL: f64 = 1e-9;

/// Separations used for the deterministic near-coincident audit pairs.
pub const PROBE_SEPARATIONS: [f64; 4] = [1e-3, 1e-1, 1.0, 10.0];

const NORM_SLACK: f64 = 1e-12;

/// Square real matrix that serializes as a list of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix(pub DMatrix<f64>);

impl DenseMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        for r in rows {
            check_dim(ncols, r.len())?;
        }
        Ok(DenseMatrix(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j])))
    }

    pub fn scaled_identity(m: usize, a: f64) -> Self {
        DenseMatrix(DMatrix::identity(m, m) * a)
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.0.row_iter().map(|r| r.iter().copied().collect()).collect()
    }
}

impl Serialize for DenseMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for DenseMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        DenseMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedKernel {
    pub weight: f64,
    pub kernel: KernelSpec,
}

/// Declarative description of a scalar or operator-valued kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", content = "params", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `⟨u, v⟩`
    Bilinear,
    /// `exp(−‖u−v‖² / σ²)`
    Gaussian { sigma: f64 },
    /// `(1 + ‖u−v‖) e^{−‖u−v‖}`
    ScaledLaplacian,
    /// `(c + ‖u−v‖²)^{−d}`
    InversePower { c: f64, d: f64 },
    /// `(c + ⟨u, v⟩)^d`; never nonexpansive, kept as a counterexample.
    PolynomialScalar { c: f64, d: u32 },
    /// `k(u, v)·R` with `R` symmetric.
    ScalarTimesOperator { base: Box<KernelSpec>, r: DenseMatrix },
    /// `Σ αᵢ Kᵢ(u, v)`
    ConvexSum { terms: Vec<WeightedKernel> },
    /// `R·L(u, v)·Rᵀ` for scalar `L`.
    Conjugated { base: Box<KernelSpec>, r: DenseMatrix },
}

/// Anything that can fill Gram blocks. [`KernelSpec`] is the catalogue
/// implementation; the trait exists so audits also run on ad hoc kernels.
pub trait OperatorKernel: Sync {
    /// `K(u, v)` as an `m × m` matrix.
    fn eval(&self, u: &[f64], v: &[f64], m: usize) -> Result<DMatrix<f64>>;

    /// Output dimension fixed by the kernel itself, if any.
    fn output_dim(&self) -> Option<usize> {
        None
    }

    /// True when `K(u, v) = k(u, v)·I` for a scalar kernel `k`.
    fn is_scalar_identity(&self) -> bool {
        false
    }

    /// `k(u, v)` for scalar·identity kernels.
    fn eval_scalar(&self, _u: &[f64], _v: &[f64]) -> Result<f64> {
        Err(Error::InvalidParameter("kernel is not scalar-valued".into()))
    }

    /// `K(u,u) − K(u,v) − K(v,u) + K(v,v)`, by default from four evaluations.
    fn increment(&self, u: &[f64], v: &[f64], m: usize) -> Result<DMatrix<f64>> {
        let uu = self.eval(u, u, m)?;
        let uv = self.eval(u, v, m)?;
        let vu = self.eval(v, u, m)?;
        let vv = self.eval(v, v, m)?;
        Ok(uu - uv - vu + vv)
    }
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Self {
        KernelSpec::Gaussian { sigma }
    }

    pub fn inverse_power(c: f64, d: f64) -> Self {
        KernelSpec::InversePower { c, d }
    }

    pub fn polynomial(c: f64, d: u32) -> Self {
        KernelSpec::PolynomialScalar { c, d }
    }

    pub fn scalar_times(base: KernelSpec, r: DenseMatrix) -> Self {
        KernelSpec::ScalarTimesOperator {
            base: Box::new(base),
            r,
        }
    }

    pub fn conjugated(base: KernelSpec, r: DenseMatrix) -> Self {
        KernelSpec::Conjugated {
            base: Box::new(base),
            r,
        }
    }

    pub fn convex_sum(terms: impl IntoIterator<Item = (f64, KernelSpec)>) -> Self {
        KernelSpec::ConvexSum {
            terms: terms
                .into_iter()
                .map(|(weight, kernel)| WeightedKernel { weight, kernel })
                .collect(),
        }
    }

    /// Scalar-valued kernels, including convex sums of scalar kernels.
    pub fn is_scalar(&self) -> bool {
        match self {
            KernelSpec::Bilinear
            | KernelSpec::Gaussian { .. }
            | KernelSpec::ScaledLaplacian
            | KernelSpec::InversePower { .. }
            | KernelSpec::PolynomialScalar { .. } => true,
            KernelSpec::ConvexSum { terms } => terms.iter().all(|t| t.kernel.is_scalar()),
            KernelSpec::ScalarTimesOperator { .. } | KernelSpec::Conjugated { .. } => false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        match self {
            KernelSpec::Bilinear | KernelSpec::ScaledLaplacian => Ok(()),
            KernelSpec::Gaussian { sigma } => {
                if sigma.is_finite() && *sigma > 0.0 {
                    Ok(())
                } else {
                    bad(format!("gaussian sigma must be positive, got {sigma}"))
                }
            }
            KernelSpec::InversePower { c, d } => {
                if !(c.is_finite() && *c > 0.0) {
                    bad(format!("inverse_power c must be positive, got {c}"))
                } else if !(d.is_finite() && *d > 0.0) {
                    bad(format!("inverse_power d must be positive, got {d}"))
                } else {
                    Ok(())
                }
            }
            KernelSpec::PolynomialScalar { c, d } => {
                if !(c.is_finite() && *c >= 0.0) {
                    bad(format!("polynomial c must be nonnegative, got {c}"))
                } else if *d == 0 {
                    bad("polynomial degree must be a positive integer".into())
                } else {
                    Ok(())
                }
            }
            KernelSpec::ScalarTimesOperator { base, r } => {
                if !base.is_scalar() {
                    return bad("scalar_times_operator base must be scalar-valued".into());
                }
                base.validate()?;
                if !r.0.is_square() || r.0.nrows() == 0 {
                    return bad("scalar_times_operator R must be square and nonempty".into());
                }
                SymMatrix::new(r.0.clone()).map(|_| ())
            }
            KernelSpec::Conjugated { base, r } => {
                if !base.is_scalar() {
                    return bad("conjugated base must be scalar-valued".into());
                }
                base.validate()?;
                if !r.0.is_square() || r.0.nrows() == 0 {
                    return bad("conjugated R must be square and nonempty".into());
                }
                Ok(())
            }
            KernelSpec::ConvexSum { terms } => {
                if terms.is_empty() {
                    return bad("convex_sum needs at least one term".into());
                }
                let mut dim = None;
                for t in terms {
                    if !(t.weight.is_finite() && t.weight >= 0.0) {
                        return bad(format!("convex_sum weight must be nonnegative, got {}", t.weight));
                    }
                    t.kernel.validate()?;
                    if let Some(k) = t.kernel.fixed_output_dim() {
                        if dim.is_some_and(|d| d != k) {
                            return bad("convex_sum terms disagree on output dimension".into());
                        }
                        dim = Some(k);
                    }
                }
                Ok(())
            }
        }
    }

    fn fixed_output_dim(&self) -> Option<usize> {
        match self {
            KernelSpec::ScalarTimesOperator { r, .. } | KernelSpec::Conjugated { r, .. } => {
                Some(r.0.nrows())
            }
            KernelSpec::ConvexSum { terms } => terms.iter().find_map(|t| t.kernel.fixed_output_dim()),
            _ => None,
        }
    }

    /// Whether the catalogue guarantees this kernel is nonexpansive.
    pub fn claims_nonexpansive(&self) -> bool {
        if self.validate().is_err() {
            return false;
        }
        match self {
            KernelSpec::Bilinear | KernelSpec::ScaledLaplacian => true,
            KernelSpec::Gaussian { sigma } => *sigma >= std::f64::consts::SQRT_2,
            KernelSpec::InversePower { c, d } => 2.0 * d <= c.powf(d + 1.0),
            KernelSpec::PolynomialScalar { .. } => false,
            KernelSpec::ScalarTimesOperator { base, r } => {
                let r = SymMatrix::symmetrized(r.0.clone());
                let eig = r.eig();
                base.claims_nonexpansive()
                    && eig.min() >= psd_floor(eig.max())
                    && spectral_norm(&r) <= 1.0 + NORM_SLACK
            }
            KernelSpec::ConvexSum { terms } => {
                let total: f64 = terms.iter().map(|t| t.weight).sum();
                total <= 1.0 + NORM_SLACK && terms.iter().all(|t| t.kernel.claims_nonexpansive())
            }
            KernelSpec::Conjugated { base, r } => {
                base.claims_nonexpansive() && operator_norm(&r.0) <= 1.0 + NORM_SLACK
            }
        }
    }

    /// `k(u, v)` for scalar kernels.
    pub fn eval_scalar(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        check_dim(u.len(), v.len())?;
        Ok(match self {
            KernelSpec::Bilinear => dot(u, v),
            KernelSpec::Gaussian { sigma } => {
                let r = dist2(u, v);
                (-(r * r) / (sigma * sigma)).exp()
            }
            KernelSpec::ScaledLaplacian => {
                let r = dist2(u, v);
                (1.0 + r) * (-r).exp()
            }
            KernelSpec::InversePower { c, d } => {
                let r = dist2(u, v);
                (c + r * r).powf(-d)
            }
            KernelSpec::PolynomialScalar { c, d } => (c + dot(u, v)).powi(*d as i32),
            KernelSpec::ConvexSum { terms } if self.is_scalar() => {
                let mut acc = 0.0;
                for t in terms {
                    acc += t.weight * t.kernel.eval_scalar(u, v)?;
                }
                acc
            }
            _ => return Err(Error::InvalidParameter("kernel is not scalar-valued".into())),
        })
    }

    /// `k(u,u) − 2k(u,v) + k(v,v)` for scalar kernels, in cancellation-free form.
    pub fn scalar_increment(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        check_dim(u.len(), v.len())?;
        Ok(match self {
            KernelSpec::Bilinear => {
                let r = dist2(u, v);
                r * r
            }
            KernelSpec::Gaussian { sigma } => {
                let r = dist2(u, v);
                -2.0 * (-(r * r) / (sigma * sigma)).exp_m1()
            }
            KernelSpec::ScaledLaplacian => 2.0 * laplacian_gap(dist2(u, v)),
            KernelSpec::InversePower { c, d } => {
                let r = dist2(u, v);
                -2.0 * c.powf(-d) * (-d * (r * r / c).ln_1p()).exp_m1()
            }
            KernelSpec::PolynomialScalar { c, d } => {
                let p = |x: f64| (c + x).powi(*d as i32);
                p(dot(u, u)) - 2.0 * p(dot(u, v)) + p(dot(v, v))
            }
            KernelSpec::ConvexSum { terms } if self.is_scalar() => {
                let mut acc = 0.0;
                for t in terms {
                    acc += t.weight * t.kernel.scalar_increment(u, v)?;
                }
                acc
            }
            _ => return Err(Error::InvalidParameter("kernel is not scalar-valued".into())),
        })
    }

    fn check_output_dim(&self, m: usize) -> Result<()> {
        match self.fixed_output_dim() {
            Some(k) => check_dim(k, m),
            None => Ok(()),
        }
    }

    /// `K(u, v)` as an `m × m` matrix.
    pub fn eval_operator(&self, u: &[f64], v: &[f64], m: usize) -> Result<DMatrix<f64>> {
        check_dim(u.len(), v.len())?;
        self.check_output_dim(m)?;
        if self.is_scalar() {
            return Ok(DMatrix::identity(m, m) * self.eval_scalar(u, v)?);
        }
        match self {
            KernelSpec::ScalarTimesOperator { base, r } => Ok(&r.0 * base.eval_scalar(u, v)?),
            KernelSpec::Conjugated { base, r } => {
                Ok(&r.0 * r.0.transpose() * base.eval_scalar(u, v)?)
            }
            KernelSpec::ConvexSum { terms } => {
                let mut acc = DMatrix::zeros(m, m);
                for t in terms {
                    acc += t.kernel.eval_operator(u, v, m)? * t.weight;
                }
                Ok(acc)
            }
            _ => unreachable!("scalar variants handled above"),
        }
    }

    fn operator_increment(&self, u: &[f64], v: &[f64], m: usize) -> Result<DMatrix<f64>> {
        check_dim(u.len(), v.len())?;
        self.check_output_dim(m)?;
        if self.is_scalar() {
            return Ok(DMatrix::identity(m, m) * self.scalar_increment(u, v)?);
        }
        match self {
            KernelSpec::ScalarTimesOperator { base, r } => Ok(&r.0 * base.scalar_increment(u, v)?),
            KernelSpec::Conjugated { base, r } => {
                Ok(&r.0 * r.0.transpose() * base.scalar_increment(u, v)?)
            }
            KernelSpec::ConvexSum { terms } => {
                let mut acc = DMatrix::zeros(m, m);
                for t in terms {
                    acc += t.kernel.operator_increment(u, v, m)? * t.weight;
                }
                Ok(acc)
            }
            _ => unreachable!("scalar variants handled above"),
        }
    }
}

/// `1 − (1 + r)e^{−r}`, with a series near zero.
fn laplacian_gap(r: f64) -> f64 {
    if r < 1e-3 {
        let r2 = r * r;
        r2 * (0.5 + r * (-1.0 / 3.0 + r * (0.125 + r * (-1.0 / 30.0 + r * (1.0 / 144.0 - r / 840.0)))))
    } else {
        -(-r).exp_m1() - r * (-r).exp()
    }
}

/// Largest singular value.
fn operator_norm(r: &DMatrix<f64>) -> f64 {
    spectral_norm(&SymMatrix::symmetrized(r * r.transpose())).sqrt()
}

impl OperatorKernel for KernelSpec {
    fn eval(&self, u: &[f64], v: &[f64], m: usize) -> Result<DMatrix<f64>> {
        self.eval_operator(u, v, m)
    }

    fn output_dim(&self) -> Option<usize> {
        self.fixed_output_dim()
    }

    fn is_scalar_identity(&self) -> bool {
        self.is_scalar()
    }

    fn eval_scalar(&self, u: &[f64], v: &[f64]) -> Result<f64> {
        KernelSpec::eval_scalar(self, u, v)
    }

    fn increment(&self, u: &[f64], v: &[f64], m: usize) -> Result<DMatrix<f64>> {
        self.operator_increment(u, v, m)
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KernelSpec::Bilinear => write!(f, "bilinear"),
            KernelSpec::Gaussian { sigma } => write!(f, "gaussian:sigma={sigma}"),
            KernelSpec::ScaledLaplacian => write!(f, "scaled_laplacian"),
            KernelSpec::InversePower { c, d } => write!(f, "inverse_power:c={c},d={d}"),
            KernelSpec::PolynomialScalar { c, d } => write!(f, "poly:c={c},d={d}"),
            other => {
                let json = serde_json::to_string(other).map_err(|_| fmt::Error)?;
                f.write_str(&json)
            }
        }
    }
}

/// Parses either a JSON kernel object or the flat flag grammar
/// `name[:key=val,key=val]`, e.g. `gaussian:sigma=2` or `poly:c=0,d=2`.
impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with('{') {
            let spec: KernelSpec = serde_json::from_str(s)?;
            spec.validate()?;
            return Ok(spec);
        }
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut params = Vec::new();
        for tok in rest.split(',').filter(|t| !t.trim().is_empty()) {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::InvalidParameter(format!("expected key=value, got '{tok}'")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::InvalidParameter(format!("'{v}' is not a number")))?;
            params.push((k.trim().to_string(), v));
        }
        let get = |key: &str| {
            params
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| *v)
                .ok_or_else(|| Error::InvalidParameter(format!("kernel '{name}' needs '{key}'")))
        };
        let allow = |keys: &[&str]| -> Result<()> {
            match params.iter().find(|(k, _)| !keys.contains(&k.as_str())) {
                Some((k, _)) => Err(Error::InvalidParameter(format!(
                    "unknown parameter '{k}' for kernel '{name}'"
                ))),
                None => Ok(()),
            }
        };
        let spec = match name.trim() {
            "bilinear" | "linear" => {
                allow(&[])?;
                KernelSpec::Bilinear
            }
            "gaussian" | "rbf" => {
                allow(&["sigma"])?;
                KernelSpec::Gaussian { sigma: get("sigma")? }
            }
            "scaled_laplacian" | "laplacian" => {
                allow(&[])?;
                KernelSpec::ScaledLaplacian
            }
            "inverse_power" => {
                allow(&["c", "d"])?;
                KernelSpec::InversePower {
                    c: get("c")?,
                    d: get("d")?,
                }
            }
            "poly" | "polynomial" => {
                allow(&["c", "d"])?;
                let d = get("d")?;
                if d.fract() != 0.0 || d < 1.0 || d > u32::MAX as f64 {
                    return Err(Error::InvalidParameter(format!(
                        "polynomial degree must be a positive integer, got {d}"
                    )));
                }
                KernelSpec::PolynomialScalar {
                    c: get("c")?,
                    d: d as u32,
                }
            }
            other => return Err(Error::InvalidParameter(format!("unknown kernel '{other}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// One evaluation of the nonexpansiveness inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMetricSample {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    /// `‖K(u,u) − K(u,v) − K(v,u) + K(v,v)‖^{1/2}`
    pub metric: f64,
    /// `‖u − v‖`
    pub bound: f64,
    pub violated: bool,
}

impl KernelMetricSample {
    pub fn excess(&self) -> f64 {
        self.metric - self.bound
    }
}

pub fn kernel_metric<K: OperatorKernel + ?Sized>(
    kernel: &K,
    u: &[f64],
    v: &[f64],
    m: usize,
) -> Result<KernelMetricSample> {
    check_dim(u.len(), v.len())?;
    let norm = if kernel.is_scalar_identity() {
        let d = kernel.increment(u, v, 1)?;
        d[(0, 0)].abs()
    } else {
        spectral_norm(&SymMatrix::symmetrized(kernel.increment(u, v, m)?))
    };
    let metric = norm.sqrt();
    let bound = dist2(u, v);
    Ok(KernelMetricSample {
        u: u.to_vec(),
        v: v.to_vec(),
        metric,
        bound,
        violated: metric > bound * (1.0 + METRIC_TOL),
    })
}

/// Outcome of a sampling-based nonexpansiveness audit. A pass is necessary
/// but not sufficient evidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NonexpansiveAudit {
    pub seed: u64,
    pub trials: usize,
    pub pairs_checked: usize,
    /// Largest `metric / bound` over pairs with positive separation.
    pub max_ratio: f64,
    /// Sorted by decreasing `metric − bound`.
    pub violations: Vec<KernelMetricSample>,
    pub pass: bool,
}

/// Fixed near-coincident pairs: base points (origin plus three seeded draws)
/// shifted along three unit directions by each of [`PROBE_SEPARATIONS`].
pub fn probe_pairs(sampler: &dyn InputSampler, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let dim = sampler.dim();
    if dim == 0 {
        return Vec::new();
    }
    let mut rng = rng_from_seed(seed);
    rng.set_stream(1);
    let mut bases = vec![vec![0.0; dim]];
    for _ in 0..3 {
        bases.push(sampler.sample(&mut rng));
    }
    let inv = 1.0 / (dim as f64).sqrt();
    let mut e1 = vec![0.0; dim];
    e1[0] = 1.0;
    let ones = vec![inv; dim];
    let alt: Vec<f64> = (0..dim).map(|i| if i % 2 == 0 { inv } else { -inv }).collect();
    let mut out = Vec::new();
    for b in &bases {
        for dir in [&e1, &ones, &alt] {
            for r in PROBE_SEPARATIONS {
                let v = b.iter().zip(dir.iter()).map(|(x, d)| x + r * d).collect();
                out.push((b.clone(), v));
            }
        }
    }
    out
}

pub fn audit_nonexpansive<K: OperatorKernel + ?Sized>(
    kernel: &K,
    sampler: &dyn InputSampler,
    trials: usize,
    seed: u64,
) -> Result<NonexpansiveAudit> {
    if trials == 0 {
        return Err(Error::InvalidParameter("trials must be at least 1".into()));
    }
    let m = kernel.output_dim().unwrap_or(1);
    let mut rng = rng_from_seed(seed);
    let mut pairs = sample_pairs(sampler, trials, &mut rng);
    pairs.extend(probe_pairs(sampler, seed));

    let samples: Vec<KernelMetricSample> = pairs
        .par_iter()
        .map(|(u, v)| kernel_metric(kernel, u, v, m))
        .collect::<Result<_>>()?;

    let max_ratio = samples
        .iter()
        .filter(|s| s.bound > 0.0)
        .map(|s| s.metric / s.bound)
        .fold(0.0, f64::max);
    let mut violations: Vec<KernelMetricSample> =
        samples.iter().filter(|s| s.violated).cloned().collect();
    violations.sort_by(|a, b| b.excess().total_cmp(&a.excess()));
    Ok(NonexpansiveAudit {
        seed,
        trials,
        pairs_checked: samples.len(),
        max_ratio,
        pass: violations.is_empty(),
        violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsdAudit {
    pub min_eig: f64,
    pub max_eig: f64,
    pub pass: bool,
}

/// Checks the Gram matrix on `inputs` for negative eigenvalues beyond roundoff.
pub fn audit_psd<K: OperatorKernel + ?Sized>(kernel: &K, inputs: &[Vec<f64>], m: usize) -> Result<PsdAudit> {
    let gram = assemble_gram(kernel, inputs, m)?;
    let eig = gram.matrix().eig();
    let (min_eig, max_eig) = (eig.min(), eig.max());
    Ok(PsdAudit {
        min_eig,
        max_eig,
        pass: min_eig >= psd_floor(max_eig),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::UniformBox;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::SQRT_2;

    /// `k(u, v) = −‖u − v‖`: symmetric but not PSD.
    struct NegDistance;

    impl OperatorKernel for NegDistance {
        fn eval(&self, u: &[f64], v: &[f64], m: usize) -> Result<DMatrix<f64>> {
            Ok(DMatrix::identity(m, m) * -dist2(u, v))
        }
        fn is_scalar_identity(&self) -> bool {
            true
        }
        fn eval_scalar(&self, u: &[f64], v: &[f64]) -> Result<f64> {
            Ok(-dist2(u, v))
        }
    }

    #[test]
    fn scalar_closed_forms() {
        let u = [0.3, -1.2];
        assert_eq!(KernelSpec::ScaledLaplacian.eval_scalar(&u, &u).unwrap(), 1.0);
        let v = [u[0] + 1.0, u[1] + 1.0];
        assert_abs_diff_eq!(
            KernelSpec::gaussian(SQRT_2).eval_scalar(&u, &v).unwrap(),
            (-1.0f64).exp(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!((-1.0f64).exp(), 0.367879, epsilon = 1e-6);
        assert_eq!(KernelSpec::Bilinear.eval_scalar(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        assert!(matches!(
            KernelSpec::Bilinear.eval_scalar(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn operator_examples() {
        let k = KernelSpec::ScaledLaplacian.eval_operator(&[1.0], &[1.0], 2).unwrap();
        assert_eq!(k, DMatrix::identity(2, 2));

        let st = KernelSpec::scalar_times(KernelSpec::Bilinear, DenseMatrix::scaled_identity(2, 0.5));
        let k = st.eval_operator(&[1.0, 0.0], &[1.0, 0.0], 2).unwrap();
        assert_eq!(k, DMatrix::identity(2, 2) * 0.5);
        assert!(st.eval_operator(&[1.0, 0.0], &[1.0, 0.0], 3).is_err());

        let cs = KernelSpec::convex_sum([(0.5, KernelSpec::gaussian(2.0)), (0.5, KernelSpec::Bilinear)]);
        let k = cs.eval_operator(&[0.0, 0.0], &[0.0, 0.0], 3).unwrap();
        assert!((k - DMatrix::identity(3, 3) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn conjugated_uses_r_rt() {
        let r = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let k = KernelSpec::conjugated(KernelSpec::Bilinear, r);
        let got = k.eval_operator(&[2.0], &[1.5], 2).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 1.0]) * 3.0;
        assert!((got - expected).amax() < 1e-14);
    }

    #[test]
    fn metric_examples() {
        let specs = [
            KernelSpec::Bilinear,
            KernelSpec::gaussian(1.0),
            KernelSpec::polynomial(0.0, 2),
        ];
        for s in &specs {
            let smp = kernel_metric(s, &[0.4, 2.0], &[0.4, 2.0], 1).unwrap();
            assert_eq!(smp.metric, 0.0);
            assert!(!smp.violated);
        }
        let b = kernel_metric(&KernelSpec::Bilinear, &[1.0, 0.0], &[0.0, 0.0], 1).unwrap();
        assert_eq!((b.metric, b.bound, b.violated), (1.0, 1.0, false));

        let p = kernel_metric(&KernelSpec::polynomial(0.0, 2), &[10.0, 0.0], &[9.0, 0.0], 1).unwrap();
        assert_abs_diff_eq!(p.metric, 19.0, epsilon = 1e-12);
        assert_eq!(p.bound, 1.0);
        assert!(p.violated);
    }

    #[test]
    fn structural_increment_matches_four_evaluations() {
        struct Generic<'a>(&'a KernelSpec);
        impl OperatorKernel for Generic<'_> {
            fn eval(&self, u: &[f64], v: &[f64], m: usize) -> Result<DMatrix<f64>> {
                self.0.eval_operator(u, v, m)
            }
        }
        let r = DenseMatrix::from_rows(&[vec![0.6, 0.2], vec![0.2, 0.3]]).unwrap();
        let specs = [
            KernelSpec::Bilinear,
            KernelSpec::gaussian(1.7),
            KernelSpec::ScaledLaplacian,
            KernelSpec::inverse_power(2.0, 1.0),
            KernelSpec::polynomial(1.0, 3),
            KernelSpec::scalar_times(KernelSpec::ScaledLaplacian, r.clone()),
            KernelSpec::conjugated(KernelSpec::gaussian(3.0), r),
        ];
        let u = [0.5, -0.25, 1.0];
        let v = [-0.3, 0.7, 0.2];
        for s in &specs {
            let fast = s.increment(&u, &v, 2).unwrap();
            let slow = Generic(s).increment(&u, &v, 2).unwrap();
            assert!((&fast - &slow).amax() < 1e-12 * slow.amax().max(1.0), "{s}");
        }
    }

    #[test]
    fn laplacian_series_matches_closed_form_at_switch() {
        let r: f64 = 1e-3;
        let closed = -(-r).exp_m1() - r * (-r).exp();
        let series = laplacian_gap(r * (1.0 - 1e-12));
        assert!((closed - series).abs() / closed < 1e-9);
    }

    #[test]
    fn claims_flags() {
        assert!(KernelSpec::Bilinear.claims_nonexpansive());
        assert!(KernelSpec::gaussian(SQRT_2).claims_nonexpansive());
        assert!(!KernelSpec::gaussian(1.41).claims_nonexpansive());
        assert!(KernelSpec::ScaledLaplacian.claims_nonexpansive());
        assert!(KernelSpec::inverse_power(2.0, 1.0).claims_nonexpansive());
        assert!(!KernelSpec::inverse_power(0.1, 1.0).claims_nonexpansive());
        assert!(!KernelSpec::polynomial(0.0, 2).claims_nonexpansive());

        let half = DenseMatrix::scaled_identity(2, 0.5);
        assert!(KernelSpec::scalar_times(KernelSpec::Bilinear, half.clone()).claims_nonexpansive());
        let big = DenseMatrix::scaled_identity(2, 1.5);
        assert!(!KernelSpec::scalar_times(KernelSpec::Bilinear, big.clone()).claims_nonexpansive());
        let indefinite = DenseMatrix::from_rows(&[vec![0.0, 0.5], vec![0.5, 0.0]]).unwrap();
        assert!(!KernelSpec::scalar_times(KernelSpec::Bilinear, indefinite.clone()).claims_nonexpansive());
        // conjugation only needs the norm bound
        assert!(KernelSpec::conjugated(KernelSpec::Bilinear, indefinite).claims_nonexpansive());
        assert!(!KernelSpec::conjugated(KernelSpec::Bilinear, big).claims_nonexpansive());

        let sum = KernelSpec::convex_sum([(0.5, KernelSpec::Bilinear), (0.5, KernelSpec::ScaledLaplacian)]);
        assert!(sum.claims_nonexpansive());
        let heavy = KernelSpec::convex_sum([(0.8, KernelSpec::Bilinear), (0.8, KernelSpec::ScaledLaplacian)]);
        assert!(!heavy.claims_nonexpansive());
        let tainted = KernelSpec::convex_sum([(0.5, KernelSpec::Bilinear), (0.5, KernelSpec::gaussian(1.0))]);
        assert!(!tainted.claims_nonexpansive());
    }

    #[test]
    fn validation() {
        assert!(KernelSpec::gaussian(0.0).validate().is_err());
        assert!(KernelSpec::inverse_power(0.0, 1.0).validate().is_err());
        assert!(KernelSpec::inverse_power(1.0, 0.0).validate().is_err());
        assert!(KernelSpec::polynomial(-1.0, 2).validate().is_err());
        assert!(KernelSpec::polynomial(0.0, 0).validate().is_err());
        let nonsym = DenseMatrix::from_rows(&[vec![0.5, 0.1], vec![0.0, 0.5]]).unwrap();
        assert!(KernelSpec::scalar_times(KernelSpec::Bilinear, nonsym).validate().is_err());
        let nested = KernelSpec::scalar_times(
            KernelSpec::scalar_times(KernelSpec::Bilinear, DenseMatrix::scaled_identity(1, 1.0)),
            DenseMatrix::scaled_identity(1, 1.0),
        );
        assert!(nested.validate().is_err());
        assert!(KernelSpec::convex_sum([(-0.1, KernelSpec::Bilinear)]).validate().is_err());
        assert!(KernelSpec::ConvexSum { terms: vec![] }.validate().is_err());
    }

    #[test]
    fn parse_flag_grammar() {
        assert_eq!("bilinear".parse::<KernelSpec>().unwrap(), KernelSpec::Bilinear);
        assert_eq!("gaussian:sigma=2".parse::<KernelSpec>().unwrap(), KernelSpec::gaussian(2.0));
        assert_eq!("laplacian".parse::<KernelSpec>().unwrap(), KernelSpec::ScaledLaplacian);
        assert_eq!(
            "inverse_power:c=2,d=1".parse::<KernelSpec>().unwrap(),
            KernelSpec::inverse_power(2.0, 1.0)
        );
        assert_eq!("poly:c=0,d=2".parse::<KernelSpec>().unwrap(), KernelSpec::polynomial(0.0, 2));
        assert!("poly:c=0,d=2.5".parse::<KernelSpec>().is_err());
        assert!("gaussian".parse::<KernelSpec>().is_err());
        assert!("gaussian:sigma=abc".parse::<KernelSpec>().is_err());
        assert!("gaussian:width=2".parse::<KernelSpec>().is_err());
        assert!("matern".parse::<KernelSpec>().is_err());
        let json = r#"{"variant":"convex_sum","params":{"terms":[{"weight":0.5,"kernel":{"variant":"bilinear"}}]}}"#;
        let k: KernelSpec = json.parse().unwrap();
        assert_eq!(k, KernelSpec::convex_sum([(0.5, KernelSpec::Bilinear)]));
    }

    #[test]
    fn json_field_names() {
        let k = KernelSpec::scalar_times(KernelSpec::gaussian(2.0), DenseMatrix::scaled_identity(2, 0.5));
        let s = serde_json::to_string(&k).unwrap();
        assert_eq!(
            s,
            r#"{"variant":"scalar_times_operator","params":{"base":{"variant":"gaussian","params":{"sigma":2.0}},"r":[[0.5,0.0],[0.0,0.5]]}}"#
        );
        assert_eq!(serde_json::to_string(&KernelSpec::Bilinear).unwrap(), r#"{"variant":"bilinear"}"#);
        let back: KernelSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, k);
    }

    #[test]
    fn audits_small() {
        let sampler = UniformBox::new(3, -5.0, 5.0);
        let ok = audit_nonexpansive(&KernelSpec::gaussian(2.0), &sampler, 500, 3).unwrap();
        assert!(ok.pass);
        let bad = audit_nonexpansive(&KernelSpec::gaussian(1.0), &sampler, 500, 3).unwrap();
        assert!(!bad.pass);
        let first = &bad.violations[0];
        assert!(first.violated && first.metric > first.bound);
        assert!(bad
            .violations
            .windows(2)
            .all(|w| w[0].excess() >= w[1].excess()));
        assert!(audit_nonexpansive(&KernelSpec::Bilinear, &sampler, 0, 0).is_err());
    }

    #[test]
    fn psd_audit_rejects_negative_distance() {
        let inputs = vec![vec![0.0, 0.0], vec![3.0, 4.0]];
        let audit = audit_psd(&NegDistance, &inputs, 1).unwrap();
        // Gram [[0,-5],[-5,0]] has eigenvalues ±5
        assert_abs_diff_eq!(audit.min_eig, -5.0, epsilon = 1e-12);
        assert!(!audit.pass);
        let ok = audit_psd(&KernelSpec::gaussian(2.0), &inputs, 2).unwrap();
        assert!(ok.pass);
    }
}
