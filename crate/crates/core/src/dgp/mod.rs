//! DC-DGP: a two-layer deep GP prior on utilities with inducing points,
//! trained through an approximate-EP energy jointly with the nested-logit
//! chain likelihood.
//!
//! The hidden layer maps inputs to `d` coordinates; the top layer maps those
//! (plus `σ_h²` noise) to the utility. Each layer's inducing outputs carry a
//! Gaussian `q(s) = N(m, LLᵀ)`, and a single shared data factor defines the
//! cavity used inside every `log Z_i`.

mod block;
mod energy;
mod psi;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use energy::{ep_energy, Energy, EpState, GaussianBlock, Moments, Propagated};

use crate::adam::Adam;
use crate::chain::PreferenceChain;
use crate::choice::{lambda_to_rho, rho_to_lambda, NestConfig};
use crate::error::{Error, Result};
use crate::gp::{argmax, chain_hessian_fd, chain_term, fit_map, laplace_covariance, newton_polish, FitConfig, GpFit, Prediction};
use crate::kernel::KernelParams;
use crate::linalg::{jittered_cholesky, median_pairwise_distance, psd_projection};
use energy::{cross_gram, Layers};

/// Architecture and hidden-layer settings of the deep surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpConfig {
    pub hidden_dim: usize,
    /// Upper bound on the number of inducing points per layer.
    pub inducing_count: usize,
    /// Initial `σ_h²`.
    pub hidden_noise: f64,
    pub hidden_noise_bounds: (f64, f64),
    pub hidden_signal_variance_bounds: (f64, f64),
    /// Top-layer lengthscale box as multiples of the median distance between
    /// the top inducing inputs. It is separate from the input-space box of
    /// [`FitConfig`]: the hidden representation has unit spread by
    /// construction, and the top mapping has to be able to stay smooth over
    /// it even when the input-space lengthscales are capped short.
    pub top_lengthscale_bounds: (f64, f64),
    /// Seeds the inducing subset and the initial projection.
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 1,
            inducing_count: 50,
            hidden_noise: 0.01,
            hidden_noise_bounds: (0.01, 1.0),
            hidden_signal_variance_bounds: (0.01, 4.0),
            top_lengthscale_bounds: (0.05, 2.0),
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn with_hidden_dim(hidden_dim: usize) -> Self {
        Self { hidden_dim, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let (nl, nh) = self.hidden_noise_bounds;
        let (sl, sh) = self.hidden_signal_variance_bounds;
        let (ll, lh) = self.top_lengthscale_bounds;
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden dimension must be at least 1".into()));
        }
        if self.inducing_count < 2 {
            return Err(Error::Config("need at least two inducing points".into()));
        }
        if !(self.hidden_noise > 0.0 && nl > 0.0 && nl <= nh && sl > 0.0 && sl <= sh && ll > 0.0 && ll <= lh) {
            return Err(Error::Config(format!("invalid hidden-layer settings: {self:?}")));
        }
        Ok(())
    }
}

/// Ridge, relative to the signal variance, used when regressing the initial
/// top-layer inducing outputs on the starting utilities.
const INIT_RIDGE: f64 = 1e-2;

/// Initial state: inducing inputs drawn from the rows of `x`, a hidden mean
/// function from a random linear projection, every block at its prior.
pub fn init_inducing<R: Rng + ?Sized>(x: &DMatrix<f64>, config: &DgpConfig, rng: &mut R) -> Result<EpState> {
    config.validate()?;
    let (n, p) = x.shape();
    if n < 2 {
        return Err(Error::InvalidState(format!("need at least two labeled instances, got {n}")));
    }
    let m = n.min(config.inducing_count);
    let mut rows: Vec<usize> = if m == n { (0..n).collect() } else { sample(rng, n, m).into_vec() };
    rows.sort_unstable();
    let z1 = DMatrix::from_fn(m, p, |i, q| x[(rows[i], q)]);
    let d = config.hidden_dim;
    let mut proj = DMatrix::from_fn(p, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    // scale and shift so the projected inducing inputs have zero mean, unit spread
    let raw = &z1 * &proj;
    let mut offset = vec![0.0; d];
    for j in 0..d {
        let col = raw.column(j);
        let mean = col.sum() / m as f64;
        let sd = (col.map(|v| (v - mean).powi(2)).sum() / m as f64).sqrt();
        let scale = if sd > 1e-12 { 1.0 / sd } else { 1.0 };
        proj.column_mut(j).scale_mut(scale);
        offset[j] = -mean * scale;
    }

    let med1 = median_pairwise_distance(x);
    let hidden_kernel = KernelParams::new(1.0, if med1 > 0.0 { med1 } else { 1.0 })?;
    let mut st = EpState {
        hidden_kernel,
        top_kernel: hidden_kernel,
        hidden_noise: config.hidden_noise,
        z1: Vec::new(),
        z2: Vec::new(),
        input_dim: p,
        hidden_dim: d,
        projection: proj.transpose().as_slice().to_vec(),
        offset,
        hidden: vec![GaussianBlock::prior(m); d],
        top: GaussianBlock::prior(m),
    };
    let z2 = st.hidden_mean_function(&z1);
    let med2 = median_pairwise_distance(&z2);
    st.top_kernel = KernelParams::new(1.0, if med2 > 0.0 { med2 } else { 1.0 })?;
    st.set_z1(&z1);
    st.set_z2(&z2);
    Ok(st)
}

/// Grows the inducing set by one point, keeping every existing marginal: in
/// whitened coordinates the new inducing output's innovation is independent
/// of the old ones and starts at its `N(0, 1)` prior.
fn append_inducing(st: &mut EpState, x_new: &[f64], hidden_mean: &[f64]) {
    let m = st.inducing_count();
    st.z1.extend_from_slice(x_new);
    st.z2.extend_from_slice(hidden_mean);
    for blk in st.hidden.iter_mut().chain(std::iter::once(&mut st.top)) {
        let mut mean = blk.mean_vec().insert_row(m, 0.0);
        mean[m] = 0.0;
        let mut l = DMatrix::identity(m + 1, m + 1);
        l.view_mut((0, 0), (m, m)).copy_from(&blk.chol_mat());
        *blk = GaussianBlock::from_parts(&mean, &l);
    }
}

/// Points the top layer at a shallow fit: its signal variance, and inducing
/// outputs regressed on the shallow predictive means at `z1`.
fn seed_top_layer(st: &mut EpState, gp: &GpFit) -> Result<()> {
    let z1 = st.z1_mat();
    let z2 = st.z2_mat();
    let m = z1.nrows();
    let sf2 = gp.kernel.signal_variance;
    st.top_kernel = KernelParams::new(sf2, st.top_kernel.lengthscale)?;
    let target = DVector::from_fn(m, |i, _| gp.predict(z1.row(i).transpose().as_slice()).mean);
    let k2 = cross_gram(&z2, &z2, &st.top_kernel);
    let (l2, _) = jittered_cholesky(&k2)?;
    let (ridge, _) = jittered_cholesky(&(&k2 + DMatrix::identity(m, m) * (INIT_RIDGE * sf2)))?;
    let mean = l2.l().transpose() * ridge.solve(&target);
    st.top = GaussianBlock::from_parts(&mean, &DMatrix::identity(m, m));
    Ok(())
}

/// Parameters carried from one fit to the next.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpWarmStart {
    pub u: Vec<f64>,
    pub state: EpState,
    pub lambdas: Vec<f64>,
}

/// A fitted DC-DGP surrogate.
#[derive(Debug, Clone)]
pub struct DgpFit {
    pub x: DMatrix<f64>,
    pub state: EpState,
    pub lambdas: Vec<f64>,
    pub u_star: DVector<f64>,
    /// Hessian of `chain + J` with respect to `u` at the mode.
    pub hessian: DMatrix<f64>,
    /// Laplace covariance of `u`.
    pub covariance: DMatrix<f64>,
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub scaled_gradient_norm: f64,
    pub clipped_eigenvalues: usize,
    posterior: Layers,
}

struct Boxes {
    /// Indexed like the first five entries of the flat state.
    hyper: [(f64, f64); 5],
    rho: (f64, f64),
}

fn log_box((lo, hi): (f64, f64)) -> (f64, f64) {
    (lo.ln(), hi.ln())
}

fn boxes(x: &DMatrix<f64>, st: &EpState, fit: &FitConfig, cfg: &DgpConfig) -> Boxes {
    let scale = |med: f64, (lo, hi): (f64, f64)| {
        let med = if med > 0.0 { med } else { 1.0 };
        log_box((lo * med, hi * med))
    };
    Boxes {
        hyper: [
            log_box(cfg.hidden_signal_variance_bounds),
            scale(median_pairwise_distance(x), fit.lengthscale_bounds),
            log_box(fit.signal_variance_bounds),
            scale(median_pairwise_distance(&st.z2_mat()), cfg.top_lengthscale_bounds),
            log_box(cfg.hidden_noise_bounds),
        ],
        rho: fit.rho_bounds(),
    }
}

struct Eval {
    value: f64,
    /// Gradient over `[state, ρ]` at the profiled utilities.
    grad: Vec<f64>,
    u: DVector<f64>,
}

/// Profiled objective `max_u chain(u) + J(u, Θ)` and its gradient in `Θ`.
///
/// With `Θ` fixed, `J` depends on `u` only through independent Gaussian
/// terms `log N(u_i; m_i, V_i)`, so the inner maximization is a small
/// Newton solve warm-started at `u_prev`. At the maximizer the `u`-gradient
/// vanishes and the total derivative in `Θ` is the partial one.
fn evaluate(
    params: &[f64],
    u_prev: &DVector<f64>,
    x: &DMatrix<f64>,
    chain: &PreferenceChain,
    nests: &NestConfig,
    st: &mut EpState,
    fit: &FitConfig,
    with_grad: bool,
) -> Result<Eval> {
    let fl = st.flat_len();
    st.set_flat(&params[..fl]);
    let lambdas: Vec<f64> = params[fl..].iter().map(|&r| rho_to_lambda(r)).collect();
    let local = nests.with_lambdas(lambdas.clone())?;
    let (mean, precision) = data_term(&ep_energy(u_prev, x, st, false)?.moments);
    let u = newton_polish(chain, &local, &precision, &mean, u_prev.clone(), fit)?;
    let lik = chain_term(chain, &u, &local)?;
    let en = ep_energy(&u, x, st, with_grad)?;
    let value = lik.value + en.value;
    if !value.is_finite() {
        return Err(Error::NumericalMoment(format!("objective is {value}")));
    }
    let mut grad = Vec::new();
    if with_grad {
        grad.reserve(params.len());
        grad.extend(&en.grad_state);
        grad.extend(lik.grad_lambda.iter().zip(&lambdas).map(|(g, l)| g * l * (1.0 - l)));
    }
    Ok(Eval { value, grad, u })
}

/// Means and diagonal precision of the `log Z_i` terms.
fn data_term(moments: &[(f64, f64)]) -> (DVector<f64>, DMatrix<f64>) {
    let n = moments.len();
    let mean = DVector::from_iterator(n, moments.iter().map(|m| m.0));
    let precision = DMatrix::from_diagonal(&DVector::from_iterator(n, moments.iter().map(|m| 1.0 / m.1)));
    (mean, precision)
}

/// Joint MAP of utilities, both layers and nest scales.
///
/// With a warm start whose `u` is shorter than `x`, the extra rows are
/// treated as newly labeled instances appended at the end: their utilities
/// start at the predictive mean and, while below the cap, they join the
/// inducing set.
pub fn fit_map_dgp(
    x: &DMatrix<f64>,
    chain: &PreferenceChain,
    nests: &NestConfig,
    fit: &FitConfig,
    cfg: &DgpConfig,
    warm: Option<&DgpWarmStart>,
) -> Result<DgpFit> {
    fit.validate()?;
    cfg.validate()?;
    let n = x.nrows();
    if n < 2 {
        return Err(Error::InvalidState(format!("need at least two labeled instances, got {n}")));
    }
    if nests.len() != n {
        return Err(Error::InvalidParameter(format!("{n} inputs but {} nest assignments", nests.len())));
    }
    let nest_count = nests.nest_count();
    let usable = warm.filter(|w| {
        w.u.len() <= n
            && w.u.len() >= 2
            && w.lambdas.len() == nest_count
            && w.state.input_dim == x.ncols()
            && w.state.hidden_dim == cfg.hidden_dim
    });
    let (mut st, u0, lambdas0, max_iter) = match usable {
        Some(w) => {
            let mut st = w.state.clone();
            let mut u = w.u.clone();
            let old_n = w.u.len();
            for r in old_n..n {
                let row: Vec<f64> = x.row(r).iter().copied().collect();
                let prop = st.layers(Moments::Posterior, r)?.propagate(&row);
                u.push(prop.mean);
                if st.inducing_count() < cfg.inducing_count.min(n) {
                    append_inducing(&mut st, &row, &prop.hidden_mean);
                }
            }
            (st, u, w.lambdas.clone(), fit.warm_max_iterations)
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut st = init_inducing(x, cfg, &mut rng)?;
            let gp = fit_map(x, chain, nests, &FitConfig { polish: false, ..fit.clone() }, None)?;
            seed_top_layer(&mut st, &gp)?;
            (st, gp.u_star.iter().copied().collect(), gp.lambdas.clone(), fit.max_iterations)
        }
    };
    if lambdas0.len() != nest_count {
        return Err(Error::Config(format!("{} fixed nest scales for {nest_count} nests", lambdas0.len())));
    }
    let learn_lambdas = fit.fixed_lambdas.is_none();
    let bx = boxes(x, &st, fit, cfg);
    let occupied: Vec<bool> = (0..nest_count).map(|k| nests.membership().contains(&k)).collect();

    let fl = st.flat_len();
    let mut params = st.to_flat();
    params.extend(lambdas0.iter().map(|&l| lambda_to_rho(l)));
    let clamp_params = |p: &mut [f64]| {
        for (k, b) in bx.hyper.iter().enumerate() {
            p[k] = p[k].clamp(b.0, b.1);
        }
        if learn_lambdas {
            for r in &mut p[fl..] {
                *r = r.clamp(bx.rho.0, bx.rho.1);
            }
        }
    };
    clamp_params(&mut params);
    let inner = FitConfig { polish: true, ..fit.clone() };

    let first = evaluate(&params, &DVector::from_vec(u0), x, chain, nests, &mut st, &inner, true)?;
    let initial_objective = first.value;
    let mut best = (first.value, params.clone(), first.u.clone());
    let mut current = Some(first);
    let mut adam = Adam::new(params.len(), fit.learning_rate);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iter {
        let ev = match current.take() {
            Some(ev) => ev,
            None => match evaluate(&params, &best.2, x, chain, nests, &mut st, &inner, true) {
                Ok(ev) => ev,
                Err(_) => break,
            },
        };
        if ev.value > best.0 {
            best = (ev.value, params.clone(), ev.u.clone());
        }
        let mut grad = ev.grad;
        for (k, b) in bx.hyper.iter().enumerate() {
            let v = params[k];
            if (v <= b.0 && grad[k] < 0.0) || (v >= b.1 && grad[k] > 0.0) {
                grad[k] = 0.0;
            }
        }
        for k in 0..nest_count {
            let i = fl + k;
            let v = params[i];
            if !learn_lambdas || !occupied[k] || (v <= bx.rho.0 && grad[i] < 0.0) || (v >= bx.rho.1 && grad[i] > 0.0) {
                grad[i] = 0.0;
            }
        }
        iterations = it + 1;
        if grad.iter().map(|g| g * g).sum::<f64>().sqrt() < fit.tolerance {
            converged = true;
            break;
        }
        adam.step(&mut params, &grad);
        clamp_params(&mut params);
        current = evaluate(&params, &ev.u, x, chain, nests, &mut st, &inner, true).ok();
        if current.is_none() {
            break;
        }
    }
    if let Some(ev) = current {
        if ev.value > best.0 {
            best = (ev.value, params.clone(), ev.u);
        }
    }
    let (_, params, mut u) = best;
    st.set_flat(&params[..fl]);
    let lambdas: Vec<f64> = params[fl..].iter().map(|&r| rho_to_lambda(r)).collect();
    let local = nests.with_lambdas(lambdas.clone())?;
    let (mean, precision) = data_term(&ep_energy(&u, x, &st, false)?.moments);
    u = newton_polish(chain, &local, &precision, &mean, u, &inner)?;
    let lik = chain_term(chain, &u, &local)?;
    let en = ep_energy(&u, x, &st, false)?;
    let objective = lik.value + en.value;
    let scaled_gradient_norm = (&lik.grad_u + &en.grad_u).norm() / (n as f64).sqrt();
    let hess_chain = chain_hessian_fd(chain, &u, &local, fit.hessian_step)?;
    let hessian = &hess_chain - &precision;
    let (w, clipped_eigenvalues) = psd_projection(&(-&hess_chain));
    let covariance = laplace_covariance(&precision, &w)?;
    let posterior = st.layers(Moments::Posterior, n)?;

    Ok(DgpFit {
        x: x.clone(),
        state: st,
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
        posterior,
    })
}

impl DgpFit {
    pub fn x_star_index(&self) -> usize {
        argmax(self.u_star.as_slice())
    }

    pub fn warm_start(&self) -> DgpWarmStart {
        DgpWarmStart { u: self.u_star.iter().copied().collect(), state: self.state.clone(), lambdas: self.lambdas.clone() }
    }

    /// Moments propagated through both layers under the posterior over the
    /// inducing outputs.
    pub fn propagate(&self, x: &[f64]) -> Propagated {
        self.posterior.propagate(x)
    }

    /// Predictive moments of `u(x)`: the posterior-propagated top-layer mean
    /// and variance, the latter floored at `1e−12`.
    pub fn predict(&self, x: &[f64]) -> Prediction {
        let p = self.posterior.propagate(x);
        Prediction { mean: p.mean, variance: p.variance.max(1e-12), fallback: false }
    }

    pub fn train_means(&self) -> Vec<f64> {
        (0..self.x.nrows())
            .map(|i| self.predict(self.x.row(i).transpose().as_slice()).mean)
            .collect()
    }
}
