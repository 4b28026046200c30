//! Riccati oracle for linear reduced dynamics with quadratic reaction.

use serde::{Deserialize, Serialize};

use crate::error::PdeError;

/// `dξ = Mξ dt + Σ^{1/2} dB`, `r(ξ) = ξᵀRξ`, terminal `exp(−ξᵀR_Tξ)`.
/// Matrices are row-major `k × k`; `sigma` is the covariance `Σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqPreset {
    pub k: usize,
    pub m: Vec<f64>,
    pub sigma: Vec<f64>,
    pub r: Vec<f64>,
    pub r_terminal: Vec<f64>,
    pub horizon: f64,
}

const STEP: f64 = 1e-4;
const BLOW_UP: f64 = 1e12;

fn matmul(a: &[f64], b: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * k];
    for i in 0..k {
        for l in 0..k {
            let ail = a[i * k + l];
            for j in 0..k {
                out[i * k + j] += ail * b[l * k + j];
            }
        }
    }
    out
}

/// `dP/ds = R + MᵀP + PM − 2PΣP`, `dq/ds = Tr(ΣP)` in `s = T − t`.
fn rhs(lq: &LqPreset, p: &[f64]) -> (Vec<f64>, f64) {
    let k = lq.k;
    let mp = matmul(p, &lq.m, k);
    let sp = matmul(&lq.sigma, p, k);
    let psp = matmul(p, &sp, k);
    let mut dp = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            dp[i * k + j] = lq.r[i * k + j] + mp[j * k + i] + mp[i * k + j] - 2.0 * psp[i * k + j];
        }
    }
    let dq = (0..k).map(|i| sp[i * k + i]).sum();
    (dp, dq)
}

/// `(P(t), q(t))` by classical RK4 at step `10⁻⁴` backward from `P(T) = R_T`.
pub fn riccati_solution(lq: &LqPreset, t: f64) -> Result<(Vec<f64>, f64), PdeError> {
    let k = lq.k;
    if [&lq.m, &lq.sigma, &lq.r, &lq.r_terminal].iter().any(|v| v.len() != k * k) {
        return Err(PdeError::InvalidProblem("LQ matrices must be k x k".into()));
    }
    if t > lq.horizon {
        return Err(PdeError::InvalidProblem(format!("t = {t} is past the horizon")));
    }
    let span = lq.horizon - t;
    let n = (span / STEP).ceil() as usize;
    let mut p = lq.r_terminal.clone();
    let mut q = 0.0;
    let axpy = |p: &[f64], d: &[f64], h: f64| -> Vec<f64> {
        p.iter().zip(d).map(|(a, b)| a + h * b).collect()
    };
    for i in 0..n {
        let h = if i + 1 == n { span - STEP * (n - 1) as f64 } else { STEP };
        let (k1, q1) = rhs(lq, &p);
        let (k2, q2) = rhs(lq, &axpy(&p, &k1, 0.5 * h));
        let (k3, q3) = rhs(lq, &axpy(&p, &k2, 0.5 * h));
        let (k4, q4) = rhs(lq, &axpy(&p, &k3, h));
        for j in 0..k * k {
            p[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        q += h / 6.0 * (q1 + 2.0 * q2 + 2.0 * q3 + q4);
        if p.iter().any(|v| !v.is_finite() || v.abs() > BLOW_UP) || !q.is_finite() {
            return Err(PdeError::RiccatiBlowUp {
                t: lq.horizon - STEP * i as f64 - h,
            });
        }
    }
    Ok((p, q))
}

/// `exp(−V(ξ, t))` with `V = ξᵀP(t)ξ + q(t)`.
pub fn riccati_value(lq: &LqPreset, xi: &[f64], t: f64) -> Result<f64, PdeError> {
    let (p, q) = riccati_solution(lq, t)?;
    let k = lq.k;
    let quad: f64 = (0..k)
        .map(|i| (0..k).map(|j| xi[i] * p[i * k + j] * xi[j]).sum::<f64>())
        .sum();
    Ok((-(quad + q)).exp())
}
