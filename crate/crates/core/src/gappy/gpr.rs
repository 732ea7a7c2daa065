use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{nelder_mead, NelderMead};
use crate::synth::halton;

/// Weights of the RBF plus dot-product kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    /// RBF amplitude.
    pub theta0: f64,
    /// RBF inverse length scale.
    pub theta1: f64,
    /// Dot-product weight.
    pub theta2: f64,
}

impl KernelParams {
    pub fn new(theta0: f64, theta1: f64, theta2: f64) -> Result<Self> {
        for (name, v) in [("theta0", theta0), ("theta1", theta1), ("theta2", theta2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(Self {
            theta0,
            theta1,
            theta2,
        })
    }

    #[cfg(test)]
    fn as_array(&self) -> [f64; 3] {
        [self.theta0, self.theta1, self.theta2]
    }
}

/// `θ0·exp(−θ1‖x−x′‖²) + θ2·xᵀx′`.
pub fn kernel(x: &[f64], x2: &[f64], p: &KernelParams) -> f64 {
    let (d2, dot) = pair_terms(x, x2);
    p.theta0 * (-p.theta1 * d2).exp() + p.theta2 * dot
}

fn pair_terms(x: &[f64], x2: &[f64]) -> (f64, f64) {
    let mut d2 = 0.0;
    let mut dot = 0.0;
    for (a, b) in x.iter().zip(x2) {
        d2 += (a - b) * (a - b);
        dot += a * b;
    }
    (d2, dot)
}

/// Hyperparameter search settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GprSettings {
    /// Noise variance σ² added to the kernel diagonal.
    pub noise: f64,
    /// Number of Nelder–Mead starts in log10 parameter space.
    pub starts: usize,
    /// Search box in log10 units, shared by every parameter.
    pub log10_bounds: (f64, f64),
    /// Fix θ2 = 0 and search only the RBF parameters.
    pub rbf_only: bool,
    pub max_evals: usize,
}

impl Default for GprSettings {
    fn default() -> Self {
        Self {
            noise: 1e-6,
            starts: 8,
            log10_bounds: (-6.0, 3.0),
            rbf_only: false,
            max_evals: 300,
        }
    }
}

const FIRST_JITTER: f64 = 1e-10;
const MAX_JITTER: f64 = 1e-4;
const LOG_2PI: f64 = 1.837_877_066_409_345_3;

/// Squared distances and inner products between all training inputs.
struct PairCache {
    d2: DMatrix<f64>,
    dot: DMatrix<f64>,
}

impl PairCache {
    fn new(inputs: &DMatrix<f64>) -> Self {
        let m = inputs.nrows();
        let dot = inputs * inputs.transpose();
        let d2 = DMatrix::from_fn(m, m, |i, j| {
            (dot[(i, i)] + dot[(j, j)] - 2.0 * dot[(i, j)]).max(0.0)
        });
        Self { d2, dot }
    }

    fn kernel_matrix(&self, p: &KernelParams) -> DMatrix<f64> {
        let m = self.d2.nrows();
        DMatrix::from_fn(m, m, |i, j| {
            p.theta0 * (-p.theta1 * self.d2[(i, j)]).exp() + p.theta2 * self.dot[(i, j)]
        })
    }
}

/// Cholesky of `K + (σ² + jitter)·I`, raising jitter tenfold from 1e-10 up
/// to 1e-4 when the plain factorisation fails.
fn factorize(k: &DMatrix<f64>, noise: f64) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = 0.0;
    loop {
        let mut a = k.clone();
        for i in 0..a.nrows() {
            a[(i, i)] += noise + jitter;
        }
        if a.iter().all(|v| v.is_finite()) {
            if let Some(c) = Cholesky::new(a) {
                return Ok((c, jitter));
            }
        }
        jitter = if jitter == 0.0 {
            FIRST_JITTER
        } else {
            jitter * 10.0
        };
        if jitter > MAX_JITTER * (1.0 + 1e-9) {
            return Err(Error::IllConditioned);
        }
    }
}

fn lml_from_factor(chol: &Cholesky<f64, Dyn>, y: &DVector<f64>) -> (f64, DVector<f64>) {
    let alpha = chol.solve(y);
    let log_det: f64 = chol
        .l_dirty()
        .diagonal()
        .iter()
        .map(|d| d.ln())
        .sum::<f64>()
        * 2.0;
    let m = y.len() as f64;
    (
        -0.5 * y.dot(&alpha) - 0.5 * log_det - 0.5 * m * LOG_2PI,
        alpha,
    )
}

fn check_problem(inputs: &DMatrix<f64>, y: &DVector<f64>, noise: f64) -> Result<()> {
    if inputs.nrows() == 0 {
        return Err(Error::EmptyMeasurements);
    }
    if inputs.nrows() != y.len() {
        return Err(Error::LengthMismatch {
            expected: inputs.nrows(),
            actual: y.len(),
        });
    }
    if !(noise.is_finite() && noise > 0.0) {
        return Err(Error::InvalidInput(format!(
            "noise variance must be positive, got {noise}"
        )));
    }
    if inputs.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite regression data".into()));
    }
    Ok(())
}

/// Log marginal likelihood of `y` under a zero-mean GP with the given kernel.
pub fn log_marginal_likelihood(
    inputs: &DMatrix<f64>,
    y: &DVector<f64>,
    p: &KernelParams,
    noise: f64,
) -> Result<f64> {
    check_problem(inputs, y, noise)?;
    let cache = PairCache::new(inputs);
    let (chol, _) = factorize(&cache.kernel_matrix(p), noise)?;
    Ok(lml_from_factor(&chol, y).0)
}

/// Analytic gradient of the log marginal likelihood with respect to
/// `(θ0, θ1, θ2)`.
pub fn log_marginal_likelihood_gradient(
    inputs: &DMatrix<f64>,
    y: &DVector<f64>,
    p: &KernelParams,
    noise: f64,
) -> Result<[f64; 3]> {
    check_problem(inputs, y, noise)?;
    let cache = PairCache::new(inputs);
    let (chol, _) = factorize(&cache.kernel_matrix(p), noise)?;
    let alpha = chol.solve(y);
    let k_inv = chol.inverse();
    let m = y.len();
    let rbf = cache.d2.map(|d| (-p.theta1 * d).exp());
    let derivs = [
        rbf.clone(),
        DMatrix::from_fn(m, m, |i, j| -p.theta0 * cache.d2[(i, j)] * rbf[(i, j)]),
        cache.dot.clone(),
    ];
    let mut grad = [0.0; 3];
    for (g, dk) in grad.iter_mut().zip(&derivs) {
        let quad = alpha.dot(&(dk * &alpha));
        let trace = k_inv.component_mul(dk).sum();
        *g = 0.5 * (quad - trace);
    }
    Ok(grad)
}

/// Fitted Gaussian process with a cached factorisation.
#[derive(Debug, Clone)]
pub struct GprModel {
    params: KernelParams,
    noise: f64,
    jitter: f64,
    inputs: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    log_likelihood: f64,
    start_log_likelihoods: Vec<f64>,
}

impl GprModel {
    /// Factorises the model for fixed hyperparameters.
    pub fn with_params(
        inputs: DMatrix<f64>,
        y: DVector<f64>,
        params: KernelParams,
        noise: f64,
    ) -> Result<Self> {
        check_problem(&inputs, &y, noise)?;
        let cache = PairCache::new(&inputs);
        Self::assemble(inputs, &y, &cache, params, noise, Vec::new())
    }

    fn assemble(
        inputs: DMatrix<f64>,
        y: &DVector<f64>,
        cache: &PairCache,
        params: KernelParams,
        noise: f64,
        start_log_likelihoods: Vec<f64>,
    ) -> Result<Self> {
        let (chol, jitter) = factorize(&cache.kernel_matrix(&params), noise)?;
        if jitter > 0.0 {
            log::warn!("kernel matrix needed jitter {jitter:e} to factorise");
        }
        let (log_likelihood, alpha) = lml_from_factor(&chol, y);
        Ok(Self {
            params,
            noise,
            jitter,
            inputs,
            chol,
            alpha,
            log_likelihood,
            start_log_likelihoods,
        })
    }

    /// Fits hyperparameters by maximising the log marginal likelihood with
    /// multi-start Nelder–Mead in log10 space. Starts are Halton points of
    /// the search box.
    pub fn fit(inputs: DMatrix<f64>, y: DVector<f64>, settings: &GprSettings) -> Result<Self> {
        check_problem(&inputs, &y, settings.noise)?;
        if settings.starts == 0 {
            return Err(Error::InvalidInput(
                "at least one optimiser start is required".into(),
            ));
        }
        let (lo, hi) = settings.log10_bounds;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::InvalidInput(format!(
                "invalid log10 bounds ({lo}, {hi})"
            )));
        }
        let cache = PairCache::new(&inputs);
        let dim = if settings.rbf_only { 2 } else { 3 };
        let to_params = |z: &[f64]| KernelParams {
            theta0: 10f64.powf(z[0]),
            theta1: 10f64.powf(z[1]),
            theta2: if settings.rbf_only {
                0.0
            } else {
                10f64.powf(z[2])
            },
        };
        let objective = |z: &[f64]| -> f64 {
            match factorize(&cache.kernel_matrix(&to_params(z)), settings.noise) {
                Ok((chol, _)) => -lml_from_factor(&chol, &y).0,
                Err(_) => f64::INFINITY,
            }
        };
        let nm = NelderMead {
            max_evals: settings.max_evals,
            f_tol: 1e-9,
            initial_step: 0.1,
        };
        let lower = vec![lo; dim];
        let upper = vec![hi; dim];
        let bases = [2u64, 3, 5];
        let mut best: Option<(Vec<f64>, f64)> = None;
        let mut start_values = Vec::with_capacity(settings.starts);
        for s in 0..settings.starts {
            let z0: Vec<f64> = (0..dim)
                .map(|d| lo + (hi - lo) * halton(s as u64 + 1, bases[d]))
                .collect();
            start_values.push(-objective(&z0));
            let found = nelder_mead(&nm, objective, &z0, &lower, &upper);
            if best.as_ref().is_none_or(|b| found.value < b.1) {
                best = Some((found.x, found.value));
            }
        }
        let (z, value) = best.expect("at least one start");
        if !value.is_finite() {
            return Err(Error::IllConditioned);
        }
        Self::assemble(
            inputs,
            &y,
            &cache,
            to_params(&z),
            settings.noise,
            start_values,
        )
    }

    pub fn params(&self) -> KernelParams {
        self.params
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    /// Diagonal jitter that was needed on top of the noise variance.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// Log marginal likelihood at each optimiser start point (empty for
    /// fixed-parameter models).
    pub fn start_log_likelihoods(&self) -> &[f64] {
        &self.start_log_likelihoods
    }

    pub fn num_training_points(&self) -> usize {
        self.inputs.nrows()
    }

    /// Posterior mean and unclamped variance of the latent function at each
    /// row of `points`.
    pub fn predict(&self, points: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        if points.ncols() != self.inputs.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "prediction inputs have {} columns, model expects {}",
                points.ncols(),
                self.inputs.ncols()
            )));
        }
        let p = &self.params;
        let dot = points * self.inputs.transpose();
        let train_sq: Vec<f64> = self.inputs.row_iter().map(|r| r.norm_squared()).collect();
        let mut k_star = dot.clone();
        let mut self_k = Vec::with_capacity(points.nrows());
        for (i, row) in points.row_iter().enumerate() {
            let sq = row.norm_squared();
            for (j, &tj) in train_sq.iter().enumerate() {
                let d2 = (sq + tj - 2.0 * dot[(i, j)]).max(0.0);
                k_star[(i, j)] = p.theta0 * (-p.theta1 * d2).exp() + p.theta2 * dot[(i, j)];
            }
            self_k.push(p.theta0 + p.theta2 * sq);
        }
        let mean: Vec<f64> = (&k_star * &self.alpha).iter().copied().collect();
        let mut v = k_star.transpose();
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let variance = self_k
            .iter()
            .zip(v.column_iter())
            .map(|(k, col)| k - col.norm_squared())
            .collect();
        Ok((mean, variance))
    }
}
