//! Finite-horizon Kalman gains from the forward Riccati recursion.

use crate::linalg::{self, symmetrize};
use crate::model::{ModelSpec, NoiseSpec};
use crate::objective::{cross_covariance, innovation_covariance, GainSchedule};
use crate::{Error, Mat, Result};

/// Condition number of `H*_t` above which the recursion gives up.
pub const MAX_INNOVATION_CONDITION: f64 = 1e12;
/// Condition number above which a warning is recorded.
pub const WARN_INNOVATION_CONDITION: f64 = 1e8;

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub gains: GainSchedule,
    /// `P*_0 .. P*_M`.
    pub p: Vec<Mat>,
    pub h: Vec<Mat>,
    pub z: Vec<Mat>,
    pub condition_numbers: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn solve_riccati(model: &ModelSpec, noise: &NoiseSpec) -> Result<RiccatiSolution> {
    let horizon = model.horizon();
    let mut p = Vec::with_capacity(horizon + 1);
    let mut h = Vec::with_capacity(horizon);
    let mut z = Vec::with_capacity(horizon);
    let mut gains = Vec::with_capacity(horizon);
    let mut condition_numbers = Vec::with_capacity(horizon);
    let mut warnings = Vec::new();
    p.push(symmetrize(noise.p0()));

    for t in 0..horizon {
        let h_t = innovation_covariance(model, noise, &p[t], t);
        let z_t = cross_covariance(model, noise, &p[t], t);
        let condition = linalg::spd_condition(&h_t);
        if condition.is_nan() || condition > MAX_INNOVATION_CONDITION {
            return Err(Error::SingularInnovation { stage: t, condition });
        }
        if condition > WARN_INNOVATION_CONDITION {
            warnings.push(format!("H*_{t} is ill-conditioned (condition number {condition:.3e})"));
        }
        let chol = nalgebra::Cholesky::new(h_t.clone()).ok_or(Error::SingularInnovation { stage: t, condition })?;
        // K Hᵀ = Z with H symmetric, solved as H Kᵀ = Zᵀ.
        let k_t = chol.solve(&z_t.transpose()).transpose();
        let next = model.a() * &p[t] * model.a().transpose() + noise.q(t) - &k_t * z_t.transpose();
        p.push(symmetrize(&next));
        gains.push(k_t);
        h.push(h_t);
        z.push(z_t);
        condition_numbers.push(condition);
    }

    Ok(RiccatiSolution {
        gains: GainSchedule::new(gains)?,
        p,
        h,
        z,
        condition_numbers,
        warnings,
    })
}
