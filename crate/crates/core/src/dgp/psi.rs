//! Expectations of the SE kernel under a diagonal Gaussian input
//! `v ~ N(A, diag B)`, against inducing inputs `z`:
//!
//! ```text
//! Ψ1_a  = σ² Π_q (1 + B_q/l²)^{-1/2} exp(−(A_q − z_aq)² / (2(l² + B_q)))
//! Ψ2_ab = σ⁴ Π_q (1 + 2B_q/l²)^{-1/2}
//!         · exp(−(z_aq − z_bq)²/(4l²) − (A_q − z̄_q)²/(l² + 2B_q))
//! ```
//!
//! with `z̄ = (z_a + z_b)/2`.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub(crate) struct PsiContext {
    /// Inducing inputs, row-major `M × d`.
    z: Vec<f64>,
    m: usize,
    d: usize,
    l2: f64,
    sf2: f64,
    /// `exp(−‖z_a − z_b‖²/(4l²))`.
    pair: DMatrix<f64>,
}

/// Accumulated adjoints of the Ψ statistics.
pub(crate) struct PsiGrad {
    pub z: DMatrix<f64>,
    pub log_lengthscale: f64,
    pub log_variance: f64,
}

impl PsiGrad {
    pub fn zeros(m: usize, d: usize) -> Self {
        Self { z: DMatrix::zeros(m, d), log_lengthscale: 0.0, log_variance: 0.0 }
    }
}

impl PsiContext {
    pub fn new(z: &DMatrix<f64>, lengthscale: f64, variance: f64) -> Self {
        let (m, d) = z.shape();
        let rows: Vec<f64> = (0..m).flat_map(|a| (0..d).map(move |q| (a, q))).map(|(a, q)| z[(a, q)]).collect();
        let l2 = lengthscale * lengthscale;
        let pair = DMatrix::from_fn(m, m, |a, b| {
            let s: f64 = (0..d).map(|q| (rows[a * d + q] - rows[b * d + q]).powi(2)).sum();
            (-s / (4.0 * l2)).exp()
        });
        Self { z: rows, m, d, l2, sf2: variance, pair }
    }

    pub fn psi1(&self, a: &[f64], b: &[f64]) -> DVector<f64> {
        let (d, l2) = (self.d, self.l2);
        let mut log_c = self.sf2.ln();
        for q in 0..d {
            log_c -= 0.5 * (1.0 + b[q] / l2).ln();
        }
        DVector::from_fn(self.m, |i, _| {
            let mut e = 0.0;
            for q in 0..d {
                let diff = a[q] - self.z[i * d + q];
                e += diff * diff / (2.0 * (l2 + b[q]));
            }
            (log_c - e).exp()
        })
    }

    pub fn psi2(&self, a: &[f64], b: &[f64]) -> DMatrix<f64> {
        let (m, d, l2) = (self.m, self.d, self.l2);
        let mut log_c = 2.0 * self.sf2.ln();
        let mut den = vec![0.0; d];
        for q in 0..d {
            log_c -= 0.5 * (1.0 + 2.0 * b[q] / l2).ln();
            den[q] = l2 + 2.0 * b[q];
        }
        let c = log_c.exp();
        let mut out = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let mut e = 0.0;
                for q in 0..d {
                    let diff = a[q] - 0.5 * (self.z[i * d + q] + self.z[j * d + q]);
                    e += diff * diff / den[q];
                }
                let v = c * self.pair[(i, j)] * (-e).exp();
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        out
    }

    /// Chains `w1 = ∂F/∂Ψ1 ∘ Ψ1` and `w2 = ∂F/∂Ψ2 ∘ Ψ2` (symmetric) into the
    /// input moments (returned) and the shared parameters (accumulated).
    pub fn backward(
        &self,
        a: &[f64],
        b: &[f64],
        w1: &DVector<f64>,
        w2: &DMatrix<f64>,
        grad: &mut PsiGrad,
    ) -> (Vec<f64>, Vec<f64>) {
        let (m, d, l2) = (self.m, self.d, self.l2);
        let mut g_a = vec![0.0; d];
        let mut g_b = vec![0.0; d];
        let mut g_l2 = 0.0;

        let w1_sum: f64 = w1.sum();
        grad.log_variance += w1_sum;
        for q in 0..d {
            let den = l2 + b[q];
            g_b[q] -= 0.5 * w1_sum / den;
            g_l2 += 0.5 * w1_sum * b[q] / (l2 * den);
        }
        for i in 0..m {
            let w = w1[i];
            if w == 0.0 {
                continue;
            }
            for q in 0..d {
                let den = l2 + b[q];
                let e = a[q] - self.z[i * d + q];
                g_a[q] -= w * e / den;
                grad.z[(i, q)] += w * e / den;
                let sq = w * e * e / (2.0 * den * den);
                g_b[q] += sq;
                g_l2 += sq;
            }
        }

        let w2_sum: f64 = w2.sum();
        grad.log_variance += 2.0 * w2_sum;
        let den: Vec<f64> = (0..d).map(|q| l2 + 2.0 * b[q]).collect();
        for q in 0..d {
            g_b[q] -= w2_sum / den[q];
            g_l2 += w2_sum * b[q] / (l2 * den[q]);
        }
        for i in 0..m {
            for j in i..m {
                let w = if i == j { w2[(i, i)] } else { 2.0 * w2[(i, j)] };
                if w == 0.0 {
                    continue;
                }
                for q in 0..d {
                    let zi = self.z[i * d + q];
                    let zj = self.z[j * d + q];
                    let zd = zi - zj;
                    let e = a[q] - 0.5 * (zi + zj);
                    g_a[q] -= w * 2.0 * e / den[q];
                    let common = e / den[q];
                    grad.z[(i, q)] += w * (common - zd / (2.0 * l2));
                    grad.z[(j, q)] += w * (common + zd / (2.0 * l2));
                    let e2 = e * e / (den[q] * den[q]);
                    g_b[q] += w * 2.0 * e2;
                    g_l2 += w * (zd * zd / (4.0 * l2 * l2) + e2);
                }
            }
        }
        grad.log_lengthscale += 2.0 * l2 * g_l2;
        (g_a, g_b)
    }
}
