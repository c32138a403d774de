//! Closed-form filtering cost and its exact gradient (known noise).
//!
//! For gains `K = (K_0, ..., K_{M-1})` with closed-loop matrices
//! `A_t = A - K_t C A`, the estimation-error covariances follow
//!
//! ```text
//! P_t = A_{t-1} P_{t-1} A_{t-1}ᵀ + (I - K_{t-1}C) Q_{t-1} (I - K_{t-1}C)ᵀ + K_{t-1} R_t K_{t-1}ᵀ
//! ```
//!
//! and the cost is `f(K) = Σ_{t=1..M} tr(P_t Σ)` with the observability
//! weight `Σ = Σ_{n=1..N} (CAⁿ)ᵀ CAⁿ`. The gradient with respect to `K_t` is
//! `2 Σ_t E_t`, where `E_t = K_t H_t - Z_t` and `Σ_t = 𝒢_{t+1}(Σ)`.

use std::fmt;

use crate::linalg::{self, spectral_norm, stacked_frobenius, symmetrize};
use crate::model::{ModelSpec, NoiseSpec};
use crate::{Error, Mat, Result};

/// The constant `b` in the `ρ` bounds.
pub const RHO_SLACK: f64 = 1e-3;

/// The decision variable: one `N×m` gain per stage.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    gains: Vec<Mat>,
}

impl GainSchedule {
    pub fn new(gains: Vec<Mat>) -> Result<Self> {
        let Some(first) = gains.first() else {
            return Err(Error::InvalidParameter {
                name: "K",
                reason: "gain schedule must contain at least one stage".into(),
            });
        };
        let shape = first.shape();
        for (t, k) in gains.iter().enumerate() {
            if k.shape() != shape {
                return Err(Error::dimension(
                    format!("K[{t}]"),
                    format!("{}×{}", shape.0, shape.1),
                    format!("{}×{}", k.nrows(), k.ncols()),
                ));
            }
            if k.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidParameter {
                    name: "K",
                    reason: format!("stage {t} has non-finite entries"),
                });
            }
        }
        Ok(Self { gains })
    }

    pub fn zeros(model: &ModelSpec) -> Self {
        Self {
            gains: vec![Mat::zeros(model.state_dim(), model.obs_dim()); model.horizon()],
        }
    }

    /// Length `M` and `N×m` stages.
    pub fn check(&self, model: &ModelSpec) -> Result<()> {
        if self.gains.len() != model.horizon() {
            return Err(Error::dimension(
                "K",
                format!("{} stages", model.horizon()),
                self.gains.len(),
            ));
        }
        let (n, m) = (model.state_dim(), model.obs_dim());
        match self.gains.iter().position(|k| k.shape() != (n, m)) {
            Some(t) => Err(Error::dimension(
                format!("K[{t}]"),
                format!("{n}×{m}"),
                format!("{}×{}", self.gains[t].nrows(), self.gains[t].ncols()),
            )),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.gains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gains.is_empty()
    }

    pub fn stage(&self, t: usize) -> &Mat {
        &self.gains[t]
    }

    pub fn stages(&self) -> &[Mat] {
        &self.gains
    }

    pub fn stage_mut(&mut self, t: usize) -> &mut Mat {
        &mut self.gains[t]
    }

    /// `A_t = A - K_t C A`.
    pub fn closed_loop(&self, model: &ModelSpec, t: usize) -> Mat {
        model.a() - &self.gains[t] * model.ca()
    }

    /// `K - η·D` stagewise.
    pub fn step(&self, direction: &[Mat], eta: f64) -> GainSchedule {
        debug_assert_eq!(direction.len(), self.gains.len());
        GainSchedule {
            gains: self.gains.iter().zip(direction).map(|(k, d)| k - d * eta).collect(),
        }
    }

    /// Frobenius distance over all stages.
    pub fn distance(&self, other: &GainSchedule) -> f64 {
        self.gains
            .iter()
            .zip(&other.gains)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn frobenius_norm(&self) -> f64 {
        stacked_frobenius(&self.gains)
    }
}

/// `Σ = Σ_{n=1..N} (CAⁿ)ᵀ CAⁿ`.
pub fn sigma_weight(model: &ModelSpec) -> Mat {
    let n = model.state_dim();
    let mut sigma = Mat::zeros(n, n);
    for k in 1..=n {
        let block = model.c_a_pow(k);
        sigma += block.transpose() * block;
    }
    symmetrize(&sigma)
}

/// `Σ` together with the stage weights `Σ_t = 𝒢_{t+1}(Σ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaWeights {
    pub sigma: Mat,
    pub sigma_t: Vec<Mat>,
}

/// Backward sweep `Σ_{M-1} = Σ`, `Σ_t = Σ + A_{t+1}ᵀ Σ_{t+1} A_{t+1}`.
pub fn sigma_weights(model: &ModelSpec, gains: &GainSchedule) -> SigmaWeights {
    let sigma = sigma_weight(model);
    let horizon = model.horizon();
    let mut sigma_t = vec![sigma.clone(); horizon];
    for t in (0..horizon.saturating_sub(1)).rev() {
        let a_next = gains.closed_loop(model, t + 1);
        sigma_t[t] = symmetrize(&(&sigma + a_next.transpose() * &sigma_t[t + 1] * &a_next));
    }
    SigmaWeights { sigma, sigma_t }
}

/// `𝒢_t(X) = X + Σ_{i=0}^{M-t-1} ∏_{j=i}^{M-t-1} A_{M-j-1}ᵀ X A_{M-j-1}`
/// for `0 ≤ t ≤ M`, evaluated as `𝒢_M(X) = X`, `𝒢_t(X) = X + A_tᵀ 𝒢_{t+1}(X) A_t`.
pub fn apply_g(model: &ModelSpec, gains: &GainSchedule, t: usize, x: &Mat) -> Result<Mat> {
    let horizon = model.horizon();
    if t > horizon {
        return Err(Error::StageOutOfRange { stage: t, max: horizon });
    }
    let mut acc = x.clone();
    for s in (t..horizon).rev() {
        let a_s = gains.closed_loop(model, s);
        acc = x + a_s.transpose() * acc * &a_s;
    }
    Ok(acc)
}

/// `𝓕_t(X) = A_{M-t-1}ᵀ X A_{M-t-1}` for `t ∈ 0..M`.
pub fn apply_f(model: &ModelSpec, gains: &GainSchedule, t: usize, x: &Mat) -> Result<Mat> {
    let horizon = model.horizon();
    if t >= horizon {
        return Err(Error::StageOutOfRange {
            stage: t,
            max: horizon - 1,
        });
    }
    let a = gains.closed_loop(model, horizon - t - 1);
    Ok(a.transpose() * x * a)
}

/// `𝒟_{t,s}(X) = ∏_{i=s}^{M-t-1} A_{M-i-1}ᵀ X A_{M-i-1}`, i.e. `Φᵀ X Φ` with
/// `Φ = A_{M-s-1} ⋯ A_t`; the identity map when `s > M-t-1`.
pub fn apply_d(model: &ModelSpec, gains: &GainSchedule, t: usize, s: usize, x: &Mat) -> Result<Mat> {
    let horizon = model.horizon();
    if t >= horizon || s >= horizon {
        return Err(Error::StageOutOfRange {
            stage: t.max(s),
            max: horizon - 1,
        });
    }
    let mut acc = x.clone();
    for i in s..horizon - t {
        let a = gains.closed_loop(model, horizon - i - 1);
        acc = a.transpose() * acc * a;
    }
    Ok(acc)
}

/// `P_0 .. P_M` under gains `K`.
pub fn error_covariances(model: &ModelSpec, noise: &NoiseSpec, gains: &GainSchedule) -> Vec<Mat> {
    let n = model.state_dim();
    let eye = Mat::identity(n, n);
    let mut p = Vec::with_capacity(model.horizon() + 1);
    p.push(noise.p0().clone());
    for t in 1..=model.horizon() {
        let k = gains.stage(t - 1);
        let a_t = gains.closed_loop(model, t - 1);
        let i_kc = &eye - k * model.c();
        let next = &a_t * &p[t - 1] * a_t.transpose()
            + &i_kc * noise.q(t - 1) * i_kc.transpose()
            + k * noise.r(t) * k.transpose();
        p.push(symmetrize(&next));
    }
    p
}

/// `f(K) = Σ_{t=1..M} tr(P_t Σ)`.
pub fn cost(model: &ModelSpec, noise: &NoiseSpec, gains: &GainSchedule) -> f64 {
    let sigma = sigma_weight(model);
    error_covariances(model, noise, gains)[1..]
        .iter()
        .map(|p| (p * &sigma).trace())
        .sum()
}

/// `H_t = CA P_t (CA)ᵀ + R_{t+1} + C Q_t Cᵀ` (also called `Λ_t`).
pub(crate) fn innovation_covariance(model: &ModelSpec, noise: &NoiseSpec, p_t: &Mat, t: usize) -> Mat {
    let ca = model.ca();
    let c = model.c();
    symmetrize(&(ca * p_t * ca.transpose() + noise.r(t + 1) + c * noise.q(t) * c.transpose()))
}

/// `Z_t = A P_t (CA)ᵀ + Q_t Cᵀ`.
pub(crate) fn cross_covariance(model: &ModelSpec, noise: &NoiseSpec, p_t: &Mat, t: usize) -> Mat {
    model.a() * p_t * model.ca().transpose() + noise.q(t) * model.c().transpose()
}

/// Cost, exact gradient and every intermediate of the gradient formula.
#[derive(Debug, Clone, PartialEq)]
pub struct CostGradient {
    pub value: f64,
    /// `∇_t f = 2 Σ_t E_t`.
    pub per_stage: Vec<Mat>,
    /// `E_t = K_t H_t - Z_t`.
    pub e: Vec<Mat>,
    /// `H_t`, identical to `Λ_t`.
    pub h: Vec<Mat>,
    pub z: Vec<Mat>,
    /// `P_0 .. P_M`.
    pub p: Vec<Mat>,
    pub sigma_t: Vec<Mat>,
}

impl CostGradient {
    pub fn lambda(&self, t: usize) -> &Mat {
        &self.h[t]
    }

    /// Frobenius norm of the whole gradient.
    pub fn norm(&self) -> f64 {
        stacked_frobenius(&self.per_stage)
    }
}

pub fn gradient(model: &ModelSpec, noise: &NoiseSpec, gains: &GainSchedule) -> CostGradient {
    let p = error_covariances(model, noise, gains);
    let weights = sigma_weights(model, gains);
    let value = p[1..].iter().map(|pt| (pt * &weights.sigma).trace()).sum();
    let horizon = model.horizon();
    let mut h = Vec::with_capacity(horizon);
    let mut z = Vec::with_capacity(horizon);
    let mut e = Vec::with_capacity(horizon);
    let mut per_stage = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let h_t = innovation_covariance(model, noise, &p[t], t);
        let z_t = cross_covariance(model, noise, &p[t], t);
        let e_t = gains.stage(t) * &h_t - &z_t;
        per_stage.push(&weights.sigma_t[t] * &e_t * 2.0);
        h.push(h_t);
        z.push(z_t);
        e.push(e_t);
    }
    CostGradient {
        value,
        per_stage,
        e,
        h,
        z,
        p,
        sigma_t: weights.sigma_t,
    }
}

/// Residual of the exact second-order expansion
///
/// ```text
/// f(K') - f(K) = tr(Σ_t 2 Σ'_t E_t δK'_tᵀ + Σ'_t δK'_t Λ_t δK'_tᵀ),   δK' = K' - K
/// ```
///
/// with `E_t`, `Λ_t` taken at `K` and `Σ'_t` at `K'`. The expansion is an
/// identity, so the result is zero up to rounding.
pub fn almost_smoothness_gap(model: &ModelSpec, noise: &NoiseSpec, gains: &GainSchedule, other: &GainSchedule) -> f64 {
    let at_k = gradient(model, noise, gains);
    let sigma_other = sigma_weights(model, other).sigma_t;
    let f_other = cost(model, noise, other);
    let expansion: f64 = (0..model.horizon())
        .map(|t| {
            let dk = other.stage(t) - gains.stage(t);
            let s = &sigma_other[t];
            (s * &at_k.e[t] * dk.transpose() * 2.0 + s * &dk * &at_k.h[t] * dk.transpose()).trace()
        })
        .sum();
    expansion - (f_other - at_k.value)
}

/// Bound and step-size constants of the convergence analysis, evaluated at
/// gains `K` (playing the role of the GD starting point `K₀`).
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticConstants {
    pub cost: f64,
    pub f_opt: f64,
    /// `σ_min(Σ)`, `σ_max(Σ)`, `‖Σ‖`.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// `min_t σ_min(A⁻ᵀ Q_t A⁻¹)` over `t ∈ 0..M`.
    pub sigma_min_aqa: f64,
    /// `min_t σ_min(R_{t+1})`.
    pub sigma_min_r: f64,
    /// `max_t σ_max(C Q_t Cᵀ + R_{t+1})`.
    pub sigma_max_cqc_r: f64,
    /// `𝒜(K) = f(K)/σ_min(Σ) + ‖P₀‖`, bounds `‖P_t‖`.
    pub a_of_k: f64,
    /// `ℬ(K) = f(K)/σ_min(A⁻ᵀQA⁻¹) + N σ_max(Σ)`, bounds `‖Σ_t‖`.
    pub b_of_k: f64,
    /// `𝒞(K)`, bounds `Σ_t ‖K_t‖`.
    pub c_of_k: f64,
    pub a_of_opt: f64,
    pub b_of_opt: f64,
    /// Gradient-dominance constant: `f(K) - f* ≤ c₁ Σ_t ‖∇_t f‖_F²`.
    pub c1: f64,
    /// `f(K) - f* ≥ c₂ Σ_t ‖E_t‖_F²`.
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
    /// `min(c₃, c₄)`.
    pub eta: f64,
    /// `η / (8 c₁)`.
    pub alpha: f64,
    /// `max_t max(‖A_t‖ + 1/2, 1 + b)` at `K`.
    pub rho: f64,
    /// `max(‖A‖ + ‖CA‖ 𝒞(K), 1 + b)`.
    pub rho_max: f64,
    /// Gain-distance envelope constant:
    /// `‖K_k - K*‖_F² ≤ c₁₀ (1-α)ᵏ ‖K₀ - K*‖_F²`.
    pub c10: f64,
}

pub fn diagnostics(
    model: &ModelSpec,
    noise: &NoiseSpec,
    gains: &GainSchedule,
    f_opt: f64,
) -> Result<DiagnosticConstants> {
    gains.check(model)?;
    let f = cost(model, noise, gains);
    if f_opt > f + 1e-12 * f.abs().max(1.0) {
        return Err(Error::OptimalCostAboveCost { f_opt, cost: f });
    }
    let gap = (f - f_opt).max(0.0);
    let horizon = model.horizon();
    let m_f = horizon as f64;
    let n_f = model.state_dim() as f64;

    let sigma = sigma_weight(model);
    let sigma_eigs = linalg::sym_eigenvalues(&sigma);
    let sigma_min = sigma_eigs[0];
    let sigma_max = *sigma_eigs.last().expect("non-empty state");
    let a_inv = model.a().clone().try_inverse().ok_or_else(|| Error::InvalidParameter {
        name: "A",
        reason: "A is singular; the bound constants need A⁻¹".into(),
    })?;
    let sigma_min_aqa = (0..horizon)
        .map(|t| linalg::min_eigenvalue(&(a_inv.transpose() * noise.q(t) * &a_inv)))
        .fold(f64::INFINITY, f64::min);
    let sigma_min_r = (0..horizon)
        .map(|t| linalg::min_eigenvalue(noise.r(t + 1)))
        .fold(f64::INFINITY, f64::min);
    let c = model.c();
    let sigma_max_cqc_r = (0..horizon)
        .map(|t| linalg::max_eigenvalue(&(c * noise.q(t) * c.transpose() + noise.r(t + 1))))
        .fold(f64::NEG_INFINITY, f64::max);

    let norm_a = spectral_norm(model.a());
    let norm_ca = spectral_norm(model.ca());
    let norm_p0 = spectral_norm(noise.p0());
    let a_bound = |cost: f64| cost / sigma_min + norm_p0;
    let b_bound = |cost: f64| cost / sigma_min_aqa + n_f * sigma_max;

    let a_of_k = a_bound(f);
    let b_of_k = b_bound(f);
    let a_of_opt = a_bound(f_opt);
    let b_of_opt = b_bound(f_opt);
    let lambda_max = sigma_max_cqc_r + norm_ca * norm_ca * a_of_k;

    let c1 = b_of_opt / (4.0 * sigma_min_r * sigma_min * sigma_min);
    let c2 = sigma_min / (4.0 * lambda_max);
    let gain_gap = (m_f / c2 * gap).sqrt();
    let cq_sum: f64 = (0..horizon).map(|t| spectral_norm(&(c * noise.q(t)))).sum();
    let c_of_k = (gain_gap + a_of_k * norm_ca * norm_a) / sigma_min_r + cq_sum / sigma_min_r;

    let rho = (0..horizon)
        .map(|t| (spectral_norm(&gains.closed_loop(model, t)) + 0.5).max(1.0 + RHO_SLACK))
        .fold(f64::NEG_INFINITY, f64::max);
    let rho_max = (norm_a + norm_ca * c_of_k).max(1.0 + RHO_SLACK);
    let geometric = (rho_max.powi(2 * horizon as i32) - 1.0) / (rho_max * rho_max - 1.0) * (2.0 * rho_max + 1.0);

    let c3_denominator = 2.0 * b_of_k * gain_gap * geometric * sigma_max * norm_ca.max(1.0);
    let c3 = if c3_denominator > 0.0 {
        sigma_min.min(1.0) / c3_denominator
    } else {
        f64::INFINITY
    };
    let c4 = 1.0 / (4.0 * lambda_max * (0.5 + b_of_k));
    let eta = c3.min(c4);
    let alpha = eta / (8.0 * c1);
    let c10 = b_of_k * (sigma_max_cqc_r + norm_ca * norm_ca * a_of_opt) / (sigma_min * sigma_min_r);

    Ok(DiagnosticConstants {
        cost: f,
        f_opt,
        sigma_min,
        sigma_max,
        sigma_min_aqa,
        sigma_min_r,
        sigma_max_cqc_r,
        a_of_k,
        b_of_k,
        c_of_k,
        a_of_opt,
        b_of_opt,
        c1,
        c2,
        c3,
        c4,
        eta,
        alpha,
        rho,
        rho_max,
        c10,
    })
}

impl fmt::Display for DiagnosticConstants {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("f(K)", self.cost),
            ("f(K*)", self.f_opt),
            ("sigma_min(Sigma)", self.sigma_min),
            ("sigma_max(Sigma)", self.sigma_max),
            ("sigma_min(A^-T Q A^-1)", self.sigma_min_aqa),
            ("sigma_min(R)", self.sigma_min_r),
            ("sigma_max(CQC^T+R)", self.sigma_max_cqc_r),
            ("A(K)", self.a_of_k),
            ("B(K)", self.b_of_k),
            ("C(K)", self.c_of_k),
            ("A(K*)", self.a_of_opt),
            ("B(K*)", self.b_of_opt),
            ("c1", self.c1),
            ("c2", self.c2),
            ("c3", self.c3),
            ("c4", self.c4),
            ("eta", self.eta),
            ("alpha", self.alpha),
            ("rho(K)", self.rho),
            ("rho_max", self.rho_max),
            ("c10", self.c10),
        ];
        for (i, (name, value)) in rows.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{name:<24} {value:.6e}")?;
        }
        Ok(())
    }
}
