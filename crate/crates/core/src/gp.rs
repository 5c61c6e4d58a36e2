//! Exact Gaussian-process regression with Matérn kernels: posterior
//! prediction and hyperparameter fitting by evidence maximization.
//!
//! Targets are standardized to zero mean and unit variance before fitting
//! (episode performance spans orders of magnitude between stable and
//! divergent trajectories); the constants are stored and inverted at
//! prediction time. The prior mean is zero in standardized units.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pqn::{self, PqnOptions};

/// Fitted observation-noise variances never drop below this.
pub const NOISE_FLOOR: f64 = 1e-8;

const JITTER_LADDER: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaternNu {
    ThreeHalves,
    FiveHalves,
}

/// Matérn kernel with per-dimension (ARD) lengthscales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub nu: MaternNu,
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
}

impl KernelSpec {
    /// Unit lengthscales and unit signal variance in `dim` dimensions.
    pub fn unit(nu: MaternNu, dim: usize) -> Self {
        Self { nu, lengthscales: vec![1.0; dim], signal_variance: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.iter().any(|l| !(*l > 0.0)) || !(self.signal_variance > 0.0) {
            return Err(Error::Precondition(
                "kernel lengthscales and signal variance must be strictly positive".into(),
            ));
        }
        Ok(())
    }
}

fn scaled_distance(spec: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    let mut r2 = 0.0;
    for ((x, y), l) in a.iter().zip(b).zip(&spec.lengthscales) {
        let d = (x - y) / l;
        r2 += d * d;
    }
    r2.sqrt()
}

/// Matérn covariance between two points.
///
/// ν = 5/2: `σ_f² (1 + √5 r + 5r²/3) exp(−√5 r)`;
/// ν = 3/2: `σ_f² (1 + √3 r) exp(−√3 r)`, with `r` the ARD-scaled distance.
pub fn kernel_eval(spec: &KernelSpec, a: &[f64], b: &[f64]) -> f64 {
    let r = scaled_distance(spec, a, b);
    spec.signal_variance * matern_profile(spec.nu, r)
}

fn matern_profile(nu: MaternNu, r: f64) -> f64 {
    match nu {
        MaternNu::FiveHalves => {
            let s = 5.0_f64.sqrt() * r;
            (1.0 + s + 5.0 * r * r / 3.0) * (-s).exp()
        }
        MaternNu::ThreeHalves => {
            let s = 3.0_f64.sqrt() * r;
            (1.0 + s) * (-s).exp()
        }
    }
}

/// Training data: query points and raw (unstandardized) observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<f64>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Precondition("dataset needs at least one observation".into()));
        }
        if self.inputs.len() != self.targets.len() {
            return Err(Error::Dimension {
                context: "dataset",
                expected: self.inputs.len(),
                actual: self.targets.len(),
            });
        }
        let dim = self.inputs[0].len();
        if self.inputs.iter().any(|x| x.len() != dim) {
            return Err(Error::Precondition("dataset rows have inconsistent dimension".into()));
        }
        if self.targets.iter().any(|y| !y.is_finite()) {
            return Err(Error::Precondition("dataset targets must be finite".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }
}

fn standardization(targets: &[f64]) -> (f64, f64) {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    let scale = var.sqrt();
    if scale > 1e-12 {
        (mean, scale)
    } else {
        (mean, 1.0)
    }
}

fn kernel_matrix(inputs: &[Vec<f64>], spec: &KernelSpec, noise: f64) -> DMatrix<f64> {
    let n = inputs.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = spec.signal_variance + noise;
        for j in 0..i {
            let v = kernel_eval(spec, &inputs[i], &inputs[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn cholesky_with_jitter(k: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, f64)> {
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok((c, 0.0));
    }
    for jitter in JITTER_LADDER {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok((c, jitter));
        }
    }
    Err(Error::Factorization { max_jitter: *JITTER_LADDER.last().unwrap() })
}

/// A fitted GP: training data, kernel, and cached factorization.
/// Immutable once constructed; queries are read-only.
#[derive(Debug, Clone)]
pub struct GpModel {
    inputs: Vec<Vec<f64>>,
    kernel: KernelSpec,
    /// Observation-noise variance in standardized target units.
    noise_variance: f64,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    y_std: DVector<f64>,
    y_mean: f64,
    y_scale: f64,
}

impl GpModel {
    pub fn fit(data: &Dataset, kernel: KernelSpec, noise_variance: f64) -> Result<Self> {
        data.validate()?;
        kernel.validate()?;
        if kernel.lengthscales.len() != data.dim() {
            return Err(Error::Dimension {
                context: "gp fit",
                expected: data.dim(),
                actual: kernel.lengthscales.len(),
            });
        }
        let noise = noise_variance.max(0.0);
        let (y_mean, y_scale) = standardization(&data.targets);
        let y_std =
            DVector::from_iterator(data.targets.len(), data.targets.iter().map(|y| (y - y_mean) / y_scale));
        let k = kernel_matrix(&data.inputs, &kernel, noise);
        let (chol, _jitter) = cholesky_with_jitter(&k)?;
        let alpha = chol.solve(&y_std);
        Ok(Self {
            inputs: data.inputs.clone(),
            kernel,
            noise_variance: noise,
            chol,
            alpha,
            y_std,
            y_mean,
            y_scale,
        })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    /// Map a raw observation into standardized target units.
    pub fn standardize_target(&self, y: f64) -> f64 {
        (y - self.y_mean) / self.y_scale
    }

    /// Posterior mean and variance of the latent function in standardized
    /// units. The variance is clamped at zero.
    pub fn posterior_standardized(&self, x: &[f64]) -> (f64, f64) {
        let n = self.inputs.len();
        let kvec = DVector::from_iterator(
            n,
            self.inputs.iter().map(|xi| kernel_eval(&self.kernel, x, xi)),
        );
        let mean = kvec.dot(&self.alpha);
        let v = self.chol.solve(&kvec);
        let var = self.kernel.signal_variance - kvec.dot(&v);
        (mean, var.max(0.0))
    }

    /// Posterior mean and variance in observation units.
    pub fn posterior(&self, x: &[f64]) -> (f64, f64) {
        let (m, v) = self.posterior_standardized(x);
        (self.y_mean + self.y_scale * m, self.y_scale * self.y_scale * v)
    }

    /// Log marginal likelihood of the (standardized) training targets under
    /// the current kernel and noise.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let n = self.y_std.len() as f64;
        let log_det_half: f64 = (0..self.y_std.len())
            .map(|i| self.chol.l_dirty()[(i, i)].ln())
            .sum();
        -0.5 * self.y_std.dot(&self.alpha)
            - log_det_half
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Log marginal likelihood and its gradient with respect to the
/// log-hyperparameters `[log ℓ_1.., log σ_f², log σ_n²]`, on standardized
/// targets. `None` when the covariance fails to factorize.
fn lml_and_grad(
    inputs: &[Vec<f64>],
    y: &DVector<f64>,
    eta: &[f64],
    nu: MaternNu,
) -> Option<(f64, Vec<f64>)> {
    let n = inputs.len();
    let dim = inputs[0].len();
    debug_assert_eq!(eta.len(), dim + 2);
    let lengthscales: Vec<f64> = eta[..dim].iter().map(|e| e.exp()).collect();
    let sf2 = eta[dim].exp();
    let sn2 = eta[dim + 1].exp();
    if !lengthscales.iter().all(|l| l.is_finite()) || !sf2.is_finite() || !sn2.is_finite() {
        return None;
    }
    let spec = KernelSpec { nu, lengthscales, signal_variance: sf2 };

    let mut kf = DMatrix::zeros(n, n);
    let mut rmat = DMatrix::zeros(n, n);
    for i in 0..n {
        kf[(i, i)] = sf2;
        for j in 0..i {
            let r = scaled_distance(&spec, &inputs[i], &inputs[j]);
            let v = sf2 * matern_profile(nu, r);
            kf[(i, j)] = v;
            kf[(j, i)] = v;
            rmat[(i, j)] = r;
            rmat[(j, i)] = r;
        }
    }
    let mut kgamma = kf.clone();
    for i in 0..n {
        kgamma[(i, i)] += sn2;
    }
    let chol = Cholesky::new(kgamma)?;
    let alpha = chol.solve(y);
    let log_det_half: f64 = (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum();
    let lml = -0.5 * y.dot(&alpha)
        - log_det_half
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if !lml.is_finite() {
        return None;
    }

    // W = α αᵀ − K⁻¹; ∂LML/∂η_j = ½ tr(W ∂K/∂η_j)
    let kinv = chol.inverse();
    let mut grad = vec![0.0; dim + 2];

    // signal variance: ∂K/∂log σ_f² = K_f
    let mut g_sf2 = 0.0;
    let mut g_sn2 = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            g_sf2 += w * kf[(i, j)];
            if i == j {
                g_sn2 += w;
            }
        }
    }
    grad[dim] = 0.5 * g_sf2;
    grad[dim + 1] = 0.5 * sn2 * g_sn2;

    // lengthscales: ∂K_ij/∂log ℓ_k = σ_f² c(r_ij) d_ij,k²/ℓ_k² with
    // c(r) = (5/3)(1 + √5 r) e^{−√5 r} for ν = 5/2 and 3 e^{−√3 r} for ν = 3/2
    for i in 0..n {
        for j in 0..i {
            let r = rmat[(i, j)];
            let c = match nu {
                MaternNu::FiveHalves => {
                    let s = 5.0_f64.sqrt() * r;
                    (5.0 / 3.0) * (1.0 + s) * (-s).exp()
                }
                MaternNu::ThreeHalves => 3.0 * (-(3.0_f64.sqrt()) * r).exp(),
            };
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            // symmetric pair (i, j) and (j, i)
            let common = sf2 * c * w;
            for k in 0..dim {
                let d = inputs[i][k] - inputs[j][k];
                let l = spec.lengthscales[k];
                grad[k] += common * d * d / (l * l);
            }
        }
    }
    // halves cancel against the symmetric double count for off-diagonal terms;
    // diagonal terms contribute nothing (d = 0)

    Some((lml, grad))
}

/// Diagnostics of one hyperparameter fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitReport {
    /// Log marginal likelihood at the returned hyperparameters.
    pub best_lml: f64,
    /// Log marginal likelihood at each start point (template first).
    pub start_lmls: Vec<f64>,
    /// Starts whose local search failed outright.
    pub failed_starts: usize,
}

/// Maximize the log marginal likelihood over log-hyperparameters by
/// multi-start local search: the supplied template plus `restarts` log-uniform
/// draws (lengthscales in `[0.1, 10]`, signal variance in `[1e-2, 1e2]`,
/// noise variance in `[1e-6, 1e-1]`), each refined by projected quasi-Newton
/// with the analytic gradient.
///
/// Returns the best kernel and noise found; if every start fails the template
/// is returned unchanged with a warning.
pub fn fit_hyperparameters<R: Rng>(
    data: &Dataset,
    template: &KernelSpec,
    noise_init: f64,
    restarts: usize,
    rng: &mut R,
) -> (KernelSpec, f64, FitReport) {
    let dim = data.dim();
    debug_assert!(data.inputs.len() >= 2);
    let (y_mean, y_scale) = standardization(&data.targets);
    let y_std = DVector::from_iterator(
        data.targets.len(),
        data.targets.iter().map(|y| (y - y_mean) / y_scale),
    );

    let mut starts: Vec<Vec<f64>> = Vec::with_capacity(restarts + 1);
    let mut eta0: Vec<f64> = template.lengthscales.iter().map(|l| l.ln()).collect();
    eta0.push(template.signal_variance.ln());
    eta0.push(noise_init.max(NOISE_FLOOR).ln());
    starts.push(eta0);
    for _ in 0..restarts {
        let mut eta: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(0.1_f64.ln()..10.0_f64.ln()))
            .collect();
        eta.push(rng.random_range(1e-2_f64.ln()..1e2_f64.ln()));
        eta.push(rng.random_range(1e-6_f64.ln()..1e-1_f64.ln()));
        starts.push(eta);
    }

    // the search box equals the draw ranges (noise floored lower): without
    // bounds the evidence drifts into the degenerate ridge of huge
    // lengthscales and signal variances, whose near-zero posterior variance
    // starves the acquisition of any exploration signal
    let mut lo = vec![0.1_f64.ln(); dim];
    lo.push(1e-2_f64.ln());
    lo.push(NOISE_FLOOR.ln());
    let mut hi = vec![10.0_f64.ln(); dim];
    hi.push(1e2_f64.ln());
    hi.push(1e-1_f64.ln());

    let opts = PqnOptions { tol: 1e-5, max_iter: 50, ..PqnOptions::default() };
    let nu = template.nu;

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut start_lmls = Vec::with_capacity(starts.len());
    let mut failed_starts = 0;
    for start in &starts {
        start_lmls.push(
            lml_and_grad(&data.inputs, &y_std, start, nu)
                .map_or(f64::NEG_INFINITY, |(l, _)| l),
        );
        let result = pqn::minimize(
            |eta| lml_and_grad(&data.inputs, &y_std, eta, nu).map(|(l, _)| -l),
            |eta| {
                lml_and_grad(&data.inputs, &y_std, eta, nu)
                    .map(|(_, g)| g.iter().map(|v| -v).collect())
            },
            start,
            &lo,
            &hi,
            &opts,
        );
        if !result.f.is_finite() {
            failed_starts += 1;
            continue;
        }
        let lml = -result.f;
        if best.as_ref().is_none_or(|(b, _)| lml > *b) {
            best = Some((lml, result.x));
        }
    }

    match best {
        Some((best_lml, eta)) => {
            let kernel = KernelSpec {
                nu,
                lengthscales: eta[..dim].iter().map(|e| e.exp()).collect(),
                signal_variance: eta[dim].exp(),
            };
            let noise = eta[dim + 1].exp().max(NOISE_FLOOR);
            (kernel, noise, FitReport { best_lml, start_lmls, failed_starts })
        }
        None => {
            log::warn!("all hyperparameter restarts failed; keeping previous values");
            (
                template.clone(),
                noise_init.max(NOISE_FLOOR),
                FitReport { best_lml: f64::NEG_INFINITY, start_lmls, failed_starts },
            )
        }
    }
}
