//! DC-GP: GP prior on utilities, nested-logit chain likelihood, joint MAP by
//! Adam and a Laplace approximation around the mode.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::adam::Adam;
use crate::chain::{chain_log_likelihood, PreferenceChain};
use crate::choice::{lambda_to_rho, rho_to_lambda, NestConfig};
use crate::error::{Error, Result};
use crate::kernel::{cross, gram, KernelParams};
use crate::linalg::{chol_logdet, jittered_cholesky, median_pairwise_distance, psd_projection, psd_sqrt, symmetrize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Optimizer settings shared by both surrogates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub learning_rate: f64,
    pub max_iterations: usize,
    /// Iteration cap when warm-started from a previous fit.
    pub warm_max_iterations: usize,
    /// Stop when the projected gradient norm falls below this.
    pub tolerance: f64,
    /// Box for every nest scale.
    pub lambda_bounds: (f64, f64),
    /// Initial nest scale when nothing better is known.
    pub lambda_init: f64,
    /// Box for the (top-layer) signal variance.
    pub signal_variance_bounds: (f64, f64),
    /// Lengthscale box as multiples of the median pairwise input distance.
    /// The MAP lengthscale tends to sit on the upper end, so the upper bound
    /// acts as a prior on how wiggly the utility is. The initial lengthscale
    /// of one median is clamped into the box.
    pub lengthscale_bounds: (f64, f64),
    /// `None` learns the nest scales; `Some` pins them.
    pub fixed_lambdas: Option<Vec<f64>>,
    /// Newton refinement of `u` at the final hyperparameters.
    pub polish: bool,
    pub polish_tolerance: f64,
    /// Step for the finite-difference Hessian of the chain term.
    pub hessian_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            max_iterations: 2000,
            warm_max_iterations: 2000,
            tolerance: 1e-5,
            lambda_bounds: (0.5, 0.999),
            lambda_init: 0.7,
            signal_variance_bounds: (1.0, 25.0),
            lengthscale_bounds: (0.05, 1.0),
            fixed_lambdas: None,
            polish: true,
            polish_tolerance: 1e-6,
            hessian_step: 1e-5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.tolerance >= 0.0
            && self.lambda_bounds.0 > 0.0
            && self.lambda_bounds.0 < self.lambda_bounds.1
            && self.lambda_bounds.1 < 1.0
            && self.signal_variance_bounds.0 > 0.0
            && self.signal_variance_bounds.0 <= self.signal_variance_bounds.1
            && self.lengthscale_bounds.0 > 0.0
            && self.lengthscale_bounds.0 <= self.lengthscale_bounds.1
            && self.hessian_step > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid fit configuration: {self:?}")));
        }
        if let Some(l) = &self.fixed_lambdas {
            if l.iter().any(|&v| !(v > 0.0 && v <= 1.0)) {
                return Err(Error::Config("fixed nest scales must lie in (0, 1]".into()));
            }
        }
        Ok(())
    }

    pub(crate) fn rho_bounds(&self) -> (f64, f64) {
        (lambda_to_rho(self.lambda_bounds.0), lambda_to_rho(self.lambda_bounds.1))
    }

    pub(crate) fn initial_lambdas(&self, nest_count: usize) -> Vec<f64> {
        match &self.fixed_lambdas {
            Some(l) => l.clone(),
            None => vec![self.lambda_init; nest_count],
        }
    }
}

/// Parameters carried from one fit to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpWarmStart {
    pub u: Vec<f64>,
    pub log_signal_variance: f64,
    pub log_lengthscale: f64,
    pub lambdas: Vec<f64>,
}

/// A fitted DC-GP surrogate.
#[derive(Debug, Clone)]
pub struct GpFit {
    pub x: DMatrix<f64>,
    pub kernel: KernelParams,
    pub lambdas: Vec<f64>,
    pub u_star: DVector<f64>,
    /// Hessian of the log posterior with respect to `u` at the mode.
    pub hessian: DMatrix<f64>,
    /// Laplace covariance `(K⁻¹ + W)⁻¹`.
    pub covariance: DMatrix<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// `‖∇_u log L‖ / √n` at the returned mode.
    pub scaled_gradient_norm: f64,
    /// Negative eigenvalues dropped when projecting `W` onto the PSD cone.
    pub clipped_eigenvalues: usize,
    alpha: DVector<f64>,
    chol_k: Cholesky<f64, Dyn>,
    w_sqrt: DMatrix<f64>,
    chol_b: Option<Cholesky<f64, Dyn>>,
}

/// Predictive moments at one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    /// The Laplace correction was unavailable and the prior-conditional
    /// variance was used instead.
    pub fallback: bool,
}

pub(crate) struct Objective {
    pub value: f64,
    pub grad_u: DVector<f64>,
    pub grad_lambda: Vec<f64>,
}

/// Chain log-likelihood with `u` as a nalgebra vector.
pub(crate) fn chain_term(chain: &PreferenceChain, u: &DVector<f64>, nests: &NestConfig) -> Result<Objective> {
    let ll = chain_log_likelihood(chain, u.as_slice(), nests)?;
    Ok(Objective { value: ll.value, grad_u: DVector::from_vec(ll.grad_u), grad_lambda: ll.grad_lambda })
}

/// Hessian of the chain log-likelihood in `u` by central differences of its
/// analytic gradient.
pub fn chain_hessian_fd(chain: &PreferenceChain, u: &DVector<f64>, nests: &NestConfig, h: f64) -> Result<DMatrix<f64>> {
    let n = u.len();
    let mut hess = DMatrix::zeros(n, n);
    let mut work = u.clone();
    for j in 0..n {
        work[j] = u[j] + h;
        let up = chain_log_likelihood(chain, work.as_slice(), nests)?.grad_u;
        work[j] = u[j] - h;
        let dn = chain_log_likelihood(chain, work.as_slice(), nests)?.grad_u;
        work[j] = u[j];
        for i in 0..n {
            hess[(i, j)] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
    Ok(symmetrize(&hess))
}

struct Theta {
    log_sf2: f64,
    log_l: f64,
    rho: Vec<f64>,
}

struct Bounds {
    log_sf2: (f64, f64),
    log_l: (f64, f64),
    rho: (f64, f64),
}

fn evaluate(
    x: &DMatrix<f64>,
    chain: &PreferenceChain,
    nests: &NestConfig,
    u: &DVector<f64>,
    theta: &Theta,
    with_hyper_grad: bool,
) -> Result<(f64, DVector<f64>, f64, f64, Vec<f64>)> {
    let params = KernelParams::from_logs(theta.log_sf2, theta.log_l);
    let (k0, s) = gram(x, &params);
    let (ch, _) = jittered_cholesky(&k0)?;
    let alpha = ch.solve(u);
    let n = u.len();
    let prior = -0.5 * u.dot(&alpha) - 0.5 * chol_logdet(&ch) - 0.5 * n as f64 * LN_2PI;
    let lambdas: Vec<f64> = theta.rho.iter().map(|&r| rho_to_lambda(r)).collect();
    let local = nests.with_lambdas(lambdas.clone())?;
    let lik = chain_term(chain, u, &local)?;
    let grad_u = &lik.grad_u - &alpha;
    let (mut g_sf2, mut g_l) = (0.0, 0.0);
    if with_hyper_grad {
        let kinv = ch.inverse();
        let aat = &alpha * alpha.transpose();
        // ∂/∂θ log N = ½ tr((ααᵀ − K⁻¹) ∂K)
        let diff = aat - kinv;
        for i in 0..n {
            for j in 0..n {
                let dk = k0[(i, j)];
                g_sf2 += diff[(i, j)] * dk;
                g_l += diff[(i, j)] * dk * s[(i, j)];
            }
        }
        g_sf2 *= 0.5;
        g_l *= 0.5;
    }
    let g_rho: Vec<f64> = lik
        .grad_lambda
        .iter()
        .zip(&lambdas)
        .map(|(g, l)| g * l * (1.0 - l))
        .collect();
    Ok((lik.value + prior, grad_u, g_sf2, g_l, g_rho))
}

fn clamp(v: f64, (lo, hi): (f64, f64)) -> f64 {
    v.clamp(lo, hi)
}

/// Zeroes gradient components that push against an active bound.
fn projected(g: f64, v: f64, (lo, hi): (f64, f64)) -> f64 {
    if (v <= lo && g < 0.0) || (v >= hi && g > 0.0) {
        0.0
    } else {
        g
    }
}

/// Joint MAP fit of utilities, kernel parameters and nest scales.
///
/// `x` holds one labeled instance per row; `chain` and `nests` are indexed by
/// row.
pub fn fit_map(
    x: &DMatrix<f64>,
    chain: &PreferenceChain,
    nests: &NestConfig,
    config: &FitConfig,
    warm: Option<&GpWarmStart>,
) -> Result<GpFit> {
    config.validate()?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidState(format!("need at least two labeled instances, got {n}")));
    }
    if nests.len() != n {
        return Err(Error::InvalidParameter(format!("{n} inputs but {} nest assignments", nests.len())));
    }
    let m = nests.nest_count();
    let med = median_pairwise_distance(x);
    let bounds = Bounds {
        log_sf2: (config.signal_variance_bounds.0.ln(), config.signal_variance_bounds.1.ln()),
        log_l: ((config.lengthscale_bounds.0 * med).ln(), (config.lengthscale_bounds.1 * med).ln()),
        rho: config.rho_bounds(),
    };
    let learn_lambdas = config.fixed_lambdas.is_none();

    let (mut u, mut theta, max_iter) = match warm {
        Some(w) if w.u.len() == n && w.lambdas.len() == m => (
            DVector::from_column_slice(&w.u),
            Theta { log_sf2: w.log_signal_variance, log_l: w.log_lengthscale, rho: w.lambdas.iter().map(|&l| lambda_to_rho(l)).collect() },
            config.warm_max_iterations,
        ),
        _ => (
            DVector::zeros(n),
            Theta {
                log_sf2: config.signal_variance_bounds.0.max(1.0).min(config.signal_variance_bounds.1).ln(),
                log_l: med.ln(),
                rho: config.initial_lambdas(m).iter().map(|&l| lambda_to_rho(l)).collect(),
            },
            config.max_iterations,
        ),
    };
    theta.log_sf2 = clamp(theta.log_sf2, bounds.log_sf2);
    theta.log_l = clamp(theta.log_l, bounds.log_l);
    if learn_lambdas {
        for r in &mut theta.rho {
            *r = clamp(*r, bounds.rho);
        }
    } else if theta.rho.len() != m {
        return Err(Error::Config(format!("{} fixed nest scales for {m} nests", theta.rho.len())));
    }
    let occupied: Vec<bool> = (0..m).map(|k| nests.membership().contains(&k)).collect();

    let dim = n + 2 + m;
    let pack = |u: &DVector<f64>, t: &Theta| -> Vec<f64> {
        let mut p: Vec<f64> = u.iter().copied().collect();
        p.push(t.log_sf2);
        p.push(t.log_l);
        p.extend(&t.rho);
        p
    };
    let mut params = pack(&u, &theta);
    let mut adam = Adam::new(dim, config.learning_rate);

    let (initial_objective, ..) = evaluate(x, chain, nests, &u, &theta, false)?;
    let mut best = (initial_objective, params.clone());
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iter {
        let (value, gu, g_sf2, g_l, g_rho) = evaluate(x, chain, nests, &u, &theta, true)?;
        if value > best.0 {
            best = (value, params.clone());
        }
        let mut grad: Vec<f64> = gu.iter().copied().collect();
        grad.push(projected(g_sf2, theta.log_sf2, bounds.log_sf2));
        grad.push(projected(g_l, theta.log_l, bounds.log_l));
        for k in 0..m {
            let g = if learn_lambdas && occupied[k] { projected(g_rho[k], theta.rho[k], bounds.rho) } else { 0.0 };
            grad.push(g);
        }
        iterations = it + 1;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm < config.tolerance {
            converged = true;
            break;
        }
        adam.step(&mut params, &grad);
        params[n] = clamp(params[n], bounds.log_sf2);
        params[n + 1] = clamp(params[n + 1], bounds.log_l);
        if learn_lambdas {
            for k in 0..m {
                params[n + 2 + k] = clamp(params[n + 2 + k], bounds.rho);
            }
        }
        u.copy_from_slice(&params[..n]);
        theta.log_sf2 = params[n];
        theta.log_l = params[n + 1];
        theta.rho.copy_from_slice(&params[n + 2..]);
    }
    let (final_value, ..) = evaluate(x, chain, nests, &u, &theta, false)?;
    if final_value < best.0 {
        params = best.1;
        u.copy_from_slice(&params[..n]);
        theta.log_sf2 = params[n];
        theta.log_l = params[n + 1];
        theta.rho.copy_from_slice(&params[n + 2..]);
    }

    let kernel = KernelParams::from_logs(theta.log_sf2, theta.log_l);
    let lambdas: Vec<f64> = theta.rho.iter().map(|&r| rho_to_lambda(r)).collect();
    let local = nests.with_lambdas(lambdas.clone())?;
    let (k0, _) = gram(x, &kernel);
    let (chol_k, _) = jittered_cholesky(&k0)?;
    let kinv = chol_k.inverse();

    if config.polish {
        u = newton_polish(chain, &local, &kinv, &DVector::zeros(n), u, config)?;
    }
    let (objective, grad_u, ..) = evaluate(x, chain, nests, &u, &theta, false)?;
    let scaled_gradient_norm = grad_u.norm() / (n as f64).sqrt();

    let hess_chain = chain_hessian_fd(chain, &u, &local, config.hessian_step)?;
    let hessian = &hess_chain - &kinv;
    let (w, clipped_eigenvalues) = psd_projection(&(-&hess_chain));
    let covariance = laplace_covariance(&kinv, &w)?;
    let w_sqrt = psd_sqrt(&w);
    let b = DMatrix::identity(n, n) + &w_sqrt * &k0 * &w_sqrt;
    let chol_b = symmetrize(&b).cholesky();
    let alpha = chol_k.solve(&u);

    Ok(GpFit {
        x: x.clone(),
        kernel,
        lambdas,
        u_star: u,
        hessian,
        covariance,
        objective,
        initial_objective,
        iterations,
        converged,
        scaled_gradient_norm,
        clipped_eigenvalues,
        alpha,
        chol_k,
        w_sqrt,
        chol_b,
    })
}

/// `(K⁻¹ + W)⁻¹`, symmetrized.
pub(crate) fn laplace_covariance(prior_precision: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let precision = symmetrize(&(prior_precision + w));
    let (ch, _) = jittered_cholesky(&precision)?;
    Ok(symmetrize(&ch.inverse()))
}

/// Damped Newton ascent on `u` for `chain(u) − ½ (u−μ)ᵀ P (u−μ)` with the
/// hyperparameters held fixed.
///
/// The curvature used is `P + W` with `W` the PSD projection of the negative
/// chain Hessian, so every direction is an ascent direction; a halving line
/// search guarantees monotone progress.
pub(crate) fn newton_polish(
    chain: &PreferenceChain,
    nests: &NestConfig,
    precision: &DMatrix<f64>,
    mean: &DVector<f64>,
    mut u: DVector<f64>,
    config: &FitConfig,
) -> Result<DVector<f64>> {
    let n = u.len();
    let objective = |u: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let lik = chain_term(chain, u, nests)?;
        let pr = precision * (u - mean);
        Ok((lik.value - 0.5 * (u - mean).dot(&pr), lik.grad_u - pr))
    };
    let (mut value, mut grad) = objective(&u)?;
    for _ in 0..100 {
        if grad.norm() / (n as f64).sqrt() < config.polish_tolerance {
            break;
        }
        let hess = chain_hessian_fd(chain, &u, nests, config.hessian_step)?;
        let (w, _) = psd_projection(&(-hess));
        let curvature = symmetrize(&(precision + w));
        let (ch, _) = jittered_cholesky(&curvature)?;
        let dir = ch.solve(&grad);
        let mut step = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand = &u + &dir * step;
            let (v, g) = objective(&cand)?;
            if v >= value {
                u = cand;
                value = v;
                grad = g;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(u)
}

impl GpFit {
    /// Index of the largest MAP utility.
    pub fn x_star_index(&self) -> usize {
        argmax(self.u_star.as_slice())
    }

    pub fn warm_start(&self) -> GpWarmStart {
        GpWarmStart {
            u: self.u_star.iter().copied().collect(),
            log_signal_variance: self.kernel.log_variance(),
            log_lengthscale: self.kernel.log_lengthscale(),
            lambdas: self.lambdas.clone(),
        }
    }

    pub fn predict(&self, x: &[f64]) -> Prediction {
        let k = cross(&self.x, x, &self.kernel);
        let mean = k.dot(&self.alpha);
        let prior = self.kernel.signal_variance;
        let (variance, fallback) = match &self.chol_b {
            Some(chol_b) => {
                let v = chol_b.l().solve_lower_triangular(&(&self.w_sqrt * &k)).expect("triangular solve");
                (prior - v.norm_squared(), false)
            }
            None => {
                let v = self.chol_k.l().solve_lower_triangular(&k).expect("triangular solve");
                (prior - v.norm_squared(), true)
            }
        };
        Prediction { mean, variance: variance.max(1e-12), fallback }
    }

    /// Predictive mean over the training inputs.
    pub fn train_means(&self) -> Vec<f64> {
        (0..self.x.nrows())
            .map(|i| self.predict(self.x.row(i).transpose().as_slice()).mean)
            .collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
