//! One Gaussian block `q(s) = N(m, LLᵀ)` over inducing outputs, its cavity
//! under a single shared data factor, and the log-normalizer terms of the
//! energy.
//!
//! Coordinates are whitened, so the prior is `N(0, I)`. Natural parameters
//! of the cavity are `θ∖1 = aθ + bθ_prior` with `a = 1 − 1/N` and `b = 1/N`;
//! with `Λ = S⁻¹` that is `Λ_c = aΛ + bI`, `η_c = aΛm`. The normalizer used
//! is `φ = ½ ηᵀΣη + ½ log|Σ|`, which vanishes at the prior; the `2π` terms
//! cancel in the energy.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, jittered_cholesky, symmetrize};

/// Forward quantities of one block.
pub(crate) struct Block {
    pub phi_post: f64,
    pub phi_cav: f64,
    /// Cavity mean `m_c`.
    pub beta: DVector<f64>,
    /// `I − S_c`.
    pub c: DMatrix<f64>,
    lambda: DMatrix<f64>,
    /// Cavity precision as factorized, including any jitter.
    lambda_c: DMatrix<f64>,
    s_c: DMatrix<f64>,
    eta_c: DVector<f64>,
    m_c: DVector<f64>,
    a: f64,
}

fn inverse_lower(l: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = l.nrows();
    l.solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or_else(|| Error::IllConditioned("singular variational Cholesky factor".into()))
}

pub(crate) fn forward(mean: &DVector<f64>, l: &DMatrix<f64>, n_data: usize) -> Result<Block> {
    let n = n_data.max(1) as f64;
    let (a, b) = (1.0 - 1.0 / n, 1.0 / n);
    let l_inv = inverse_lower(l)?;
    let lambda = l_inv.transpose() * &l_inv;
    let log_det_s: f64 = 2.0 * l.diagonal().iter().map(|d| d.abs().ln()).sum::<f64>();
    let lambda_m = &lambda * mean;
    let phi_post = 0.5 * mean.dot(&lambda_m) + 0.5 * log_det_s;

    let m = mean.len();
    let mut lambda_c = symmetrize(&(&lambda * a + DMatrix::identity(m, m) * b));
    let ch_c = match lambda_c.clone().cholesky() {
        Some(ch) => ch,
        None => {
            let (ch, jitter) = jittered_cholesky(&lambda_c)?;
            for i in 0..lambda_c.nrows() {
                lambda_c[(i, i)] += jitter;
            }
            ch
        }
    };
    let s_c = symmetrize(&ch_c.inverse());
    let eta_c = lambda_m * a;
    let m_c = &s_c * &eta_c;
    let phi_cav = 0.5 * eta_c.dot(&m_c) - 0.5 * chol_logdet(&ch_c);

    let c = DMatrix::identity(m, m) - &s_c;
    Ok(Block { phi_post, phi_cav, beta: m_c.clone(), c, lambda, lambda_c, s_c, eta_c, m_c, a })
}

/// Adjoints of one block.
pub(crate) struct BlockGrad {
    pub mean: DVector<f64>,
    /// Lower-triangular gradient with respect to `L`.
    pub chol: DMatrix<f64>,
}

/// Reverse pass for `c_post φ_post + c_cav φ_cav + D(β, C)` given `∂D/∂β`
/// and `∂D/∂C`.
pub(crate) fn backward(
    block: &Block,
    mean: &DVector<f64>,
    l: &DMatrix<f64>,
    g_beta: &DVector<f64>,
    g_c: &DMatrix<f64>,
    c_post: f64,
    c_cav: f64,
) -> BlockGrad {
    let a = block.a;
    // C = I − S_c, β = m_c
    let mut g_sc = -symmetrize(g_c);
    let g_mc = g_beta.clone();
    // φ_cav = ½ η_cᵀ S_c η_c + ½ log|S_c|, with Λ_c = S_c⁻¹
    let mut g_eta = &block.m_c * c_cav;
    g_sc += (&block.eta_c * block.eta_c.transpose() + &block.lambda_c) * (0.5 * c_cav);
    // m_c = S_c η_c
    g_sc += &g_mc * block.eta_c.transpose();
    g_eta += &block.s_c * &g_mc;
    // S_c = Λ_c⁻¹
    let g_lambda_c = -(&block.s_c * &g_sc * &block.s_c);
    // Λ_c = aΛ + bI
    let mut g_lambda = &g_lambda_c * a;
    // η_c = aΛm
    g_lambda += &g_eta * mean.transpose() * a;
    let mut g_m = &block.lambda * &g_eta * a;
    // φ_post = ½ mᵀΛm + ½ log|S|
    g_m += &block.lambda * mean * c_post;
    g_lambda += mean * mean.transpose() * (0.5 * c_post);
    let mut g_s = &block.lambda * (0.5 * c_post);
    // Λ = S⁻¹
    g_s -= &block.lambda * &g_lambda * &block.lambda;
    // S = LLᵀ
    let g_l = ((&g_s + g_s.transpose()) * l).lower_triangle();
    BlockGrad { mean: g_m, chol: g_l }
}

/// Posterior moments used for prediction: `m` and `I − S`.
pub(crate) fn posterior_projection(mean: &DVector<f64>, l: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let m = mean.len();
    (mean.clone(), DMatrix::identity(m, m) - l * l.transpose())
}
