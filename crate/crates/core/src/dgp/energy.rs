//! Approximate-EP energy of the two-layer model and moment propagation.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::block::{self, Block};
use super::psi::{PsiContext, PsiGrad};
use crate::error::{Error, Result};
use crate::kernel::KernelParams;
use crate::linalg::{jittered_cholesky, symmetrize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean and Cholesky factor of one Gaussian block over inducing outputs, in
/// coordinates whitened by the layer's prior Cholesky factor (`s = L_K v`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBlock {
    pub mean: Vec<f64>,
    /// Lower-triangular factor, column-major `M × M`.
    pub chol: Vec<f64>,
}

impl GaussianBlock {
    pub fn from_parts(mean: &DVector<f64>, chol: &DMatrix<f64>) -> Self {
        Self { mean: mean.iter().copied().collect(), chol: chol.lower_triangle().as_slice().to_vec() }
    }

    pub fn mean_vec(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.mean)
    }

    pub fn chol_mat(&self) -> DMatrix<f64> {
        let m = self.mean.len();
        DMatrix::from_column_slice(m, m, &self.chol)
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let l = self.chol_mat();
        &l * l.transpose()
    }
}

/// Everything the energy depends on apart from the utilities.
///
/// The hidden layer has `d` GPs sharing one SE kernel and the inducing
/// inputs `z1`; the top layer maps hidden values through a second SE kernel
/// with inducing inputs `z2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpState {
    pub hidden_kernel: KernelParams,
    pub top_kernel: KernelParams,
    /// `σ_h²`, added to every hidden coordinate.
    pub hidden_noise: f64,
    /// Row-major `M × p`.
    pub z1: Vec<f64>,
    /// Row-major `M × d`.
    pub z2: Vec<f64>,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Fixed linear mean of the hidden layer, row-major `p × d`; the hidden
    /// GPs model residuals around `x·P + offset`.
    pub projection: Vec<f64>,
    pub offset: Vec<f64>,
    pub hidden: Vec<GaussianBlock>,
    pub top: GaussianBlock,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

fn from_row_major(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

/// Squared-exponential cross-covariance between the rows of two matrices.
pub(crate) fn cross_gram(a: &DMatrix<f64>, b: &DMatrix<f64>, k: &KernelParams) -> DMatrix<f64> {
    let l2 = k.lengthscale * k.lengthscale;
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut r2 = 0.0;
        for q in 0..a.ncols() {
            let d = a[(i, q)] - b[(j, q)];
            r2 += d * d;
        }
        k.signal_variance * (-0.5 * r2 / l2).exp()
    })
}

/// Adjoint of `cross_gram(a, b)` given `g = ∂F/∂K`: returns `(∂F/∂a,
/// ∂F/∂b, ∂F/∂log σ², ∂F/∂log l)`.
pub(crate) fn cross_gram_backward(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    kmat: &DMatrix<f64>,
    g: &DMatrix<f64>,
    k: &KernelParams,
) -> (DMatrix<f64>, DMatrix<f64>, f64, f64) {
    let l2 = k.lengthscale * k.lengthscale;
    let p = a.ncols();
    let mut ga = DMatrix::zeros(a.nrows(), p);
    let mut gb = DMatrix::zeros(b.nrows(), p);
    let (mut g_sf2, mut g_l) = (0.0, 0.0);
    for j in 0..b.nrows() {
        for i in 0..a.nrows() {
            let w = g[(i, j)] * kmat[(i, j)];
            if w == 0.0 {
                continue;
            }
            g_sf2 += w;
            let mut r2 = 0.0;
            for q in 0..p {
                let d = a[(i, q)] - b[(j, q)];
                r2 += d * d;
                ga[(i, q)] -= w * d / l2;
                gb[(j, q)] += w * d / l2;
            }
            g_l += w * r2 / l2;
        }
    }
    (ga, gb, g_sf2, g_l)
}

/// Which approximate distribution over inducing outputs moments are
/// propagated under.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moments {
    Cavity,
    Posterior,
}

/// Per-input propagated moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Propagated {
    pub hidden_mean: Vec<f64>,
    /// Hidden variances, including `σ_h²`.
    pub hidden_var: Vec<f64>,
    pub mean: f64,
    /// Top-layer variance before any residual floor.
    pub variance: f64,
}

/// Energy value and gradients.
#[derive(Debug, Clone)]
pub struct Energy {
    pub value: f64,
    pub grad_u: DVector<f64>,
    /// Gradient in the layout of [`EpState::to_flat`].
    pub grad_state: Vec<f64>,
    /// Moments `(m_i, V_i)` of each `log Z_i`.
    pub moments: Vec<(f64, f64)>,
}

impl EpState {
    pub fn inducing_count(&self) -> usize {
        self.top.mean.len()
    }

    pub fn z1_mat(&self) -> DMatrix<f64> {
        from_row_major(self.inducing_count(), self.input_dim, &self.z1)
    }

    pub fn z2_mat(&self) -> DMatrix<f64> {
        from_row_major(self.inducing_count(), self.hidden_dim, &self.z2)
    }

    pub fn set_z1(&mut self, z: &DMatrix<f64>) {
        self.z1 = row_major(z);
    }

    pub fn projection_mat(&self) -> DMatrix<f64> {
        from_row_major(self.input_dim, self.hidden_dim, &self.projection)
    }

    /// `x·P + offset` for every row of `x`.
    pub(crate) fn hidden_mean_function(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = x * self.projection_mat();
        for mut row in out.row_iter_mut() {
            for (v, o) in row.iter_mut().zip(&self.offset) {
                *v += o;
            }
        }
        out
    }

    pub fn set_z2(&mut self, z: &DMatrix<f64>) {
        self.z2 = row_major(z);
    }

    /// Number of entries in the flat parameter vector.
    pub fn flat_len(&self) -> usize {
        let m = self.inducing_count();
        5 + m * self.input_dim + m * self.hidden_dim + (self.hidden_dim + 1) * (m + m * (m + 1) / 2)
    }

    /// Flat layout: `[log σ1², log l1, log σ2², log l2, log σ_h², z1, z2,
    /// blocks…]`; each block is its mean followed by the lower triangle of its
    /// Cholesky factor, column by column, diagonal entries as logs.
    pub fn to_flat(&self) -> Vec<f64> {
        let m = self.inducing_count();
        let mut out = Vec::with_capacity(self.flat_len());
        out.push(self.hidden_kernel.log_variance());
        out.push(self.hidden_kernel.log_lengthscale());
        out.push(self.top_kernel.log_variance());
        out.push(self.top_kernel.log_lengthscale());
        out.push(self.hidden_noise.ln());
        out.extend(&self.z1);
        out.extend(&self.z2);
        for blk in self.hidden.iter().chain(std::iter::once(&self.top)) {
            out.extend(&blk.mean);
            for j in 0..m {
                for i in j..m {
                    let v = blk.chol[j * m + i];
                    out.push(if i == j { v.abs().ln() } else { v });
                }
            }
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let m = self.inducing_count();
        self.hidden_kernel = KernelParams::from_logs(flat[0], flat[1]);
        self.top_kernel = KernelParams::from_logs(flat[2], flat[3]);
        self.hidden_noise = flat[4].exp();
        let mut k = 5;
        let n1 = m * self.input_dim;
        self.z1.copy_from_slice(&flat[k..k + n1]);
        k += n1;
        let n2 = m * self.hidden_dim;
        self.z2.copy_from_slice(&flat[k..k + n2]);
        k += n2;
        for blk in self.hidden.iter_mut().chain(std::iter::once(&mut self.top)) {
            blk.mean.copy_from_slice(&flat[k..k + m]);
            k += m;
            for j in 0..m {
                for i in j..m {
                    blk.chol[j * m + i] = if i == j { flat[k].exp() } else { flat[k] };
                    k += 1;
                }
            }
        }
    }

    /// Index ranges of the flat layout, for bounding and freezing parameters.
    pub(crate) fn flat_offsets(&self) -> FlatOffsets {
        let m = self.inducing_count();
        let z1 = 5;
        let z2 = z1 + m * self.input_dim;
        let blocks = z2 + m * self.hidden_dim;
        FlatOffsets { z1, z2, blocks, block_len: m + m * (m + 1) / 2 }
    }
}

pub(crate) struct FlatOffsets {
    pub z1: usize,
    pub z2: usize,
    pub blocks: usize,
    pub block_len: usize,
}

/// Cholesky factor of a layer's prior Gram matrix and its inverse.
#[derive(Debug, Clone)]
pub(crate) struct Whitening {
    pub l: DMatrix<f64>,
    /// `L⁻¹`.
    pub r: DMatrix<f64>,
}

impl Whitening {
    pub fn new(k: &DMatrix<f64>) -> Result<Self> {
        let (ch, _) = jittered_cholesky(k)?;
        let l = ch.l();
        let n = l.nrows();
        let r = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .ok_or_else(|| Error::IllConditioned("singular prior Cholesky factor".into()))?;
        Ok(Self { l, r })
    }

    /// Maps whitened `(β̃, C̃)` to `(Rᵀβ̃, RᵀC̃R)`.
    fn unwhiten(&self, beta: &DVector<f64>, c: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (self.r.transpose() * beta, symmetrize(&(self.r.transpose() * c * &self.r)))
    }
}

/// Adjoint of `A = LLᵀ` given `∂F/∂L` (lower triangle used): the symmetric
/// gradient with respect to `A`.
pub(crate) fn cholesky_backward(w: &Whitening, g_l: &DMatrix<f64>) -> DMatrix<f64> {
    let mut phi = (w.l.transpose() * g_l.lower_triangle()).lower_triangle();
    for i in 0..phi.nrows() {
        phi[(i, i)] *= 0.5;
    }
    let s = w.r.transpose() * phi * &w.r;
    (&s + s.transpose()) * 0.5
}

impl GaussianBlock {
    /// Whitened block for a distribution `N(mean, cov)` over inducing outputs
    /// with prior Gram matrix `k`.
    pub fn from_moments(mean: &DVector<f64>, cov: &DMatrix<f64>, k: &DMatrix<f64>) -> Result<Self> {
        let w = Whitening::new(k)?;
        let m = &w.r * mean;
        let s = symmetrize(&(&w.r * cov * w.r.transpose()));
        let (ch, _) = jittered_cholesky(&s)?;
        Ok(Self::from_parts(&m, &ch.l()))
    }

    /// The block at the prior: zero whitened mean, identity factor.
    pub fn prior(m: usize) -> Self {
        Self::from_parts(&DVector::zeros(m), &DMatrix::identity(m, m))
    }
}

/// Factorized layer quantities for one choice of moments.
#[derive(Debug, Clone)]
pub(crate) struct Layers {
    z1: DMatrix<f64>,
    projection: DMatrix<f64>,
    offset: Vec<f64>,
    hidden_kernel: KernelParams,
    hidden_noise: f64,
    hidden_beta: Vec<DVector<f64>>,
    hidden_c: Vec<DMatrix<f64>>,
    psi: PsiContext,
    top_variance: f64,
    top_beta: DVector<f64>,
    /// `β βᵀ − C` of the top layer.
    top_d: DMatrix<f64>,
}

impl Layers {
    pub fn propagate(&self, x: &[f64]) -> Propagated {
        let xm = DMatrix::from_row_slice(1, x.len(), x);
        let k1 = cross_gram(&xm, &self.z1, &self.hidden_kernel).transpose();
        let d = self.hidden_beta.len();
        let mut a = vec![0.0; d];
        let mut b = vec![0.0; d];
        for j in 0..d {
            a[j] = k1.dot(&self.hidden_beta[j]) + self.offset[j] + xm.row(0).dot(&self.projection.column(j).transpose());
            let ck = &self.hidden_c[j] * &k1;
            b[j] = (self.hidden_kernel.signal_variance - k1.dot(&ck)).max(0.0) + self.hidden_noise;
        }
        let psi1 = self.psi.psi1(&a, &b);
        let psi2 = self.psi.psi2(&a, &b);
        let mean = psi1.dot(&self.top_beta);
        let variance = self.top_variance + psi2.component_mul(&self.top_d).sum() - mean * mean;
        Propagated { hidden_mean: a, hidden_var: b, mean, variance }
    }
}

impl EpState {
    /// Precomputes the layer factorizations under the cavity (with `n_data`
    /// data factors) or the posterior.
    pub(crate) fn layers(&self, which: Moments, n_data: usize) -> Result<Layers> {
        let z1 = self.z1_mat();
        let z2 = self.z2_mat();
        let w1 = Whitening::new(&cross_gram(&z1, &z1, &self.hidden_kernel))?;
        let mut hidden_beta = Vec::with_capacity(self.hidden_dim);
        let mut hidden_c = Vec::with_capacity(self.hidden_dim);
        for blk in &self.hidden {
            let (b, c) = moments_of(blk, which, n_data)?;
            let (b, c) = w1.unwhiten(&b, &c);
            hidden_beta.push(b);
            hidden_c.push(c);
        }
        let w2 = Whitening::new(&cross_gram(&z2, &z2, &self.top_kernel))?;
        let (b, c) = moments_of(&self.top, which, n_data)?;
        let (top_beta, top_c) = w2.unwhiten(&b, &c);
        let top_d = &top_beta * top_beta.transpose() - top_c;
        Ok(Layers {
            z1,
            projection: self.projection_mat(),
            offset: self.offset.clone(),
            hidden_kernel: self.hidden_kernel,
            hidden_noise: self.hidden_noise,
            hidden_beta,
            hidden_c,
            psi: PsiContext::new(&z2, self.top_kernel.lengthscale, self.top_kernel.signal_variance),
            top_variance: self.top_kernel.signal_variance,
            top_beta,
            top_d,
        })
    }

    /// Moments of `u(x)` after propagating through both layers.
    pub fn propagate_moments(&self, x: &[f64], which: Moments, n_data: usize) -> Result<Propagated> {
        if x.len() != self.input_dim {
            return Err(Error::InvalidParameter(format!("input has {} features, expected {}", x.len(), self.input_dim)));
        }
        Ok(self.layers(which, n_data)?.propagate(x))
    }
}

fn moments_of(blk: &GaussianBlock, which: Moments, n_data: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let mean = blk.mean_vec();
    let l = blk.chol_mat();
    Ok(match which {
        Moments::Posterior => block::posterior_projection(&mean, &l),
        Moments::Cavity => {
            let b = block::forward(&mean, &l, n_data)?;
            (b.beta, b.c)
        }
    })
}

/// Adjoint of `(β, C) = (Rᵀβ̃, RᵀC̃R)`: returns `(∂F/∂β̃, ∂F/∂C̃)` and
/// accumulates `∂F/∂R` into `g_r`.
fn unwhiten_backward(
    w: &Whitening,
    beta_w: &DVector<f64>,
    c_w: &DMatrix<f64>,
    g_beta: &DVector<f64>,
    g_c: &DMatrix<f64>,
    g_r: &mut DMatrix<f64>,
) -> (DVector<f64>, DMatrix<f64>) {
    let g_c = symmetrize(g_c);
    *g_r += beta_w * g_beta.transpose() + c_w * &w.r * &g_c * 2.0;
    (&w.r * g_beta, &w.r * &g_c * w.r.transpose())
}

/// `∂F/∂K` from `∂F/∂R` with `R = chol(K)⁻¹`.
fn whitening_backward(w: &Whitening, g_r: &DMatrix<f64>) -> DMatrix<f64> {
    let g_l = -(w.r.transpose() * g_r.lower_triangle() * w.r.transpose());
    cholesky_backward(w, &g_l)
}

/// `J = (1−N)φ(θ) + Nφ(θ∖1) − φ(θ_prior) + Σ_i log Z_i`, summed over every
/// block, with `log Z_i = log N(u_i; m_i, v_i + σ_h²)` and `(m_i, v_i)` the
/// cavity moments at the `i`-th row of `x`.
///
/// Blocks are stored whitened by their layer's prior Cholesky factor, under
/// which the prior becomes `N(0, I)` and the three `log|K|` contributions
/// cancel exactly.
pub fn ep_energy(u: &DVector<f64>, x: &DMatrix<f64>, st: &EpState, with_grad: bool) -> Result<Energy> {
    let n = u.len();
    if x.nrows() != n || x.ncols() != st.input_dim {
        return Err(Error::InvalidParameter(format!(
            "inputs are {}×{}, expected {}×{}",
            x.nrows(),
            x.ncols(),
            n,
            st.input_dim
        )));
    }
    let m = st.inducing_count();
    let d = st.hidden_dim;
    let c_post = 1.0 - n as f64;
    let c_cav = n as f64;
    let noise = st.hidden_noise;
    let hk = st.hidden_kernel;
    let tk = st.top_kernel;

    // hidden layer
    let z1 = st.z1_mat();
    let k1 = cross_gram(&z1, &z1, &hk);
    let w1 = Whitening::new(&k1)?;
    let mut value = 0.0;
    let mut hidden_blocks: Vec<Block> = Vec::with_capacity(d);
    let mut hidden_beta = Vec::with_capacity(d);
    let mut hidden_c = Vec::with_capacity(d);
    for blk in &st.hidden {
        let b = block::forward(&blk.mean_vec(), &blk.chol_mat(), n)?;
        value += c_post * b.phi_post + c_cav * b.phi_cav;
        let (beta, c) = w1.unwhiten(&b.beta, &b.c);
        hidden_beta.push(beta);
        hidden_c.push(c);
        hidden_blocks.push(b);
    }
    let kx1 = cross_gram(x, &z1, &hk);
    let mut a_mat = st.hidden_mean_function(x);
    let mut b_mat = DMatrix::zeros(n, d);
    let mut kc: Vec<DMatrix<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let mut col = a_mat.column_mut(j);
        col += &kx1 * &hidden_beta[j];
        let kcj = &kx1 * &hidden_c[j];
        for i in 0..n {
            let quad = kx1.row(i).dot(&kcj.row(i));
            b_mat[(i, j)] = hk.signal_variance - quad + noise;
        }
        kc.push(kcj);
    }
    for v in b_mat.iter() {
        if !(*v > 0.0) {
            return Err(Error::NumericalMoment(format!("hidden variance {v} is not positive")));
        }
    }

    // top layer
    let z2 = st.z2_mat();
    let k2 = cross_gram(&z2, &z2, &tk);
    let w2 = Whitening::new(&k2)?;
    let top_mean = st.top.mean_vec();
    let top_l = st.top.chol_mat();
    let top_block = block::forward(&top_mean, &top_l, n)?;
    value += c_post * top_block.phi_post + c_cav * top_block.phi_cav;
    let (beta2, c2) = w2.unwhiten(&top_block.beta, &top_block.c);
    let d2 = &beta2 * beta2.transpose() - &c2;
    let psi = PsiContext::new(&z2, tk.lengthscale, tk.signal_variance);

    let mut moments = Vec::with_capacity(n);
    let mut psi1s = Vec::with_capacity(n);
    let mut psi2s = Vec::with_capacity(n);
    let mut clamped = vec![false; n];
    for i in 0..n {
        let a: Vec<f64> = a_mat.row(i).iter().copied().collect();
        let b: Vec<f64> = b_mat.row(i).iter().copied().collect();
        let p1v = psi.psi1(&a, &b);
        let p2v = psi.psi2(&a, &b);
        let mean = p1v.dot(&beta2);
        let mut v = tk.signal_variance + p2v.component_mul(&d2).sum() - mean * mean;
        if v < 0.0 {
            clamped[i] = true;
            v = 0.0;
        }
        let var = v + noise;
        if !(var > 0.0) || !mean.is_finite() {
            return Err(Error::NumericalMoment(format!("predictive variance {var} at point {i}")));
        }
        let r = u[i] - mean;
        value += -0.5 * (LN_2PI + var.ln()) - 0.5 * r * r / var;
        moments.push((mean, var));
        psi1s.push(p1v);
        psi2s.push(p2v);
    }

    let grad_u = DVector::from_fn(n, |i, _| -(u[i] - moments[i].0) / moments[i].1);
    if !with_grad {
        return Ok(Energy { value, grad_u, grad_state: Vec::new(), moments });
    }

    // reverse pass
    let mut g_flat = vec![0.0; st.flat_len()];
    let off = st.flat_offsets();
    let mut g_noise = 0.0;
    let mut g_top_sf2 = 0.0;
    let mut g_beta2 = DVector::zeros(m);
    let mut g_d2 = DMatrix::zeros(m, m);
    let mut g_a = DMatrix::zeros(n, d);
    let mut g_b = DMatrix::zeros(n, d);
    let mut psi_grad = PsiGrad::zeros(m, d);
    for i in 0..n {
        let (mean, var) = moments[i];
        let r = u[i] - mean;
        let g_var = -0.5 / var + 0.5 * r * r / (var * var);
        let mut g_mean = r / var;
        g_noise += g_var;
        let g_v = if clamped[i] { 0.0 } else { g_var };
        g_top_sf2 += g_v;
        g_mean -= 2.0 * mean * g_v;
        // mean = Ψ1ᵀβ2; v = σ² + ⟨Ψ2, D2⟩ − mean²
        g_beta2 += &psi1s[i] * g_mean;
        g_d2 += &psi2s[i] * g_v;
        let w1v = psi1s[i].component_mul(&(&beta2 * g_mean));
        let w2v = psi2s[i].component_mul(&(&d2 * g_v));
        let a: Vec<f64> = a_mat.row(i).iter().copied().collect();
        let b: Vec<f64> = b_mat.row(i).iter().copied().collect();
        let (ga, gb) = psi.backward(&a, &b, &w1v, &w2v, &mut psi_grad);
        for j in 0..d {
            g_a[(i, j)] = ga[j];
            g_b[(i, j)] = gb[j];
        }
    }
    // D2 = β2β2ᵀ − C2
    let g_d2s = (&g_d2 + g_d2.transpose()) * 0.5;
    g_beta2 += &g_d2s * &beta2 * 2.0;
    let g_c2 = -&g_d2s;
    let mut g_r2 = DMatrix::zeros(m, m);
    let (g_beta2_w, g_c2_w) = unwhiten_backward(&w2, &top_block.beta, &top_block.c, &g_beta2, &g_c2, &mut g_r2);
    let tg = block::backward(&top_block, &top_mean, &top_l, &g_beta2_w, &g_c2_w, c_post, c_cav);
    let g_k2 = whitening_backward(&w2, &g_r2);
    let (gz2a, gz2b, g_sf2_k2, g_l_k2) = cross_gram_backward(&z2, &z2, &k2, &g_k2, &tk);
    let g_z2 = gz2a + gz2b + &psi_grad.z;
    g_flat[2] = g_top_sf2 * tk.signal_variance + psi_grad.log_variance + g_sf2_k2;
    g_flat[3] = psi_grad.log_lengthscale + g_l_k2;

    // hidden layer adjoints
    let mut g_kx1 = DMatrix::zeros(n, m);
    let mut g_r1 = DMatrix::zeros(m, m);
    let mut g_hidden_sf2_direct = 0.0;
    for j in 0..d {
        let gbj = g_b.column(j);
        g_noise += gbj.sum();
        g_hidden_sf2_direct += gbj.sum();
        let g_beta = kx1.transpose() * g_a.column(j);
        // B_ij = σ1² − k_iᵀ C_j k_i + σ_h²
        let mut weighted = kx1.clone();
        for i in 0..n {
            weighted.row_mut(i).scale_mut(gbj[i]);
        }
        let g_c = -(kx1.transpose() * &weighted);
        for i in 0..n {
            let row = hidden_beta[j].transpose() * g_a[(i, j)] - kc[j].row(i) * (2.0 * gbj[i]);
            let mut r = g_kx1.row_mut(i);
            r += row;
        }
        let hb = &hidden_blocks[j];
        let (g_beta_w, g_c_w) = unwhiten_backward(&w1, &hb.beta, &hb.c, &g_beta, &g_c, &mut g_r1);
        let blk = &st.hidden[j];
        let hg = block::backward(hb, &blk.mean_vec(), &blk.chol_mat(), &g_beta_w, &g_c_w, c_post, c_cav);
        write_block_grad(&mut g_flat, off.blocks + j * off.block_len, m, &hg.mean, &hg.chol, &blk.chol_mat());
    }
    write_block_grad(&mut g_flat, off.blocks + d * off.block_len, m, &tg.mean, &tg.chol, &top_l);
    let g_k1 = whitening_backward(&w1, &g_r1);
    let (gz1a, gz1b, g_sf2_k1, g_l_k1) = cross_gram_backward(&z1, &z1, &k1, &g_k1, &hk);
    let (_, gz1x, g_sf2_kx, g_l_kx) = cross_gram_backward(x, &z1, &kx1, &g_kx1, &hk);
    let g_z1 = gz1a + gz1b + gz1x;
    g_flat[0] = g_hidden_sf2_direct * hk.signal_variance + g_sf2_k1 + g_sf2_kx;
    g_flat[1] = g_l_k1 + g_l_kx;
    g_flat[4] = g_noise * noise;
    g_flat[off.z1..off.z2].copy_from_slice(&row_major(&g_z1));
    g_flat[off.z2..off.blocks].copy_from_slice(&row_major(&g_z2));

    Ok(Energy { value, grad_u, grad_state: g_flat, moments })
}

fn write_block_grad(out: &mut [f64], start: usize, m: usize, g_mean: &DVector<f64>, g_l: &DMatrix<f64>, l: &DMatrix<f64>) {
    out[start..start + m].copy_from_slice(g_mean.as_slice());
    let mut k = start + m;
    for j in 0..m {
        for i in j..m {
            out[k] = if i == j { g_l[(i, i)] * l[(i, i)] } else { g_l[(i, j)] };
            k += 1;
        }
    }
}
