//! Two independent oracles for the closed-form cost.
//!
//! * Monte-Carlo evaluation of the dual control problem: the backward system
//!   `s_{t+1} = A_{M-t-1}ᵀ s_t + z_t`, `u_t = -K_{M-t-1}ᵀ s_t` driven by
//!   `s₀, z_t ~ N(0, Σ)` has the same expected quadratic cost as the filter.
//! * The stacked-noise representation: every prediction residual
//!   `e_{i+1}ⁿ = y_{i+n+1} - CAⁿ x̂_{i+1}` is a linear map `G_{i,n}` of
//!   `X = (e₀, ω₀ .. ω_{M+N-1}, v₁ .. v_{M+N})`, so the expected squared
//!   residual `f₁(K) = Σ tr(G D_X Gᵀ)` and its gradient are exact.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::linalg;
use crate::model::{ModelSpec, NoiseSpec};
use crate::objective::{sigma_weight, GainSchedule};
use crate::seed::{derive_seed, rng_from_seed};
use crate::{Error, Mat, Result, Vector};

/// Samples per independently seeded chunk.
pub const DUAL_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// One sample path of the dual system.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTrajectory {
    /// `s₀ .. s_M`.
    pub s: Vec<Vector>,
    /// `u₀ .. u_{M-1}`.
    pub u: Vec<Vector>,
    /// `z₀ .. z_{M-1}`, with `z_{M-1} = 0`.
    pub z: Vec<Vector>,
}

impl DualTrajectory {
    fn zeros(model: &ModelSpec) -> Self {
        let (n, m, horizon) = (model.state_dim(), model.obs_dim(), model.horizon());
        Self {
            s: vec![Vector::zeros(n); horizon + 1],
            u: vec![Vector::zeros(m); horizon],
            z: vec![Vector::zeros(n); horizon],
        }
    }

    /// `Σ_t (s_tᵀ Q s_t + u_tᵀ (C Q Cᵀ + R) u_t + 2 u_tᵀ C Q s_t) + s_Mᵀ P₀ s_M`
    /// with `Q = Q_{M-t-1}`, `R = R_{M-t}`.
    pub fn cost(&self, model: &ModelSpec, noise: &NoiseSpec) -> f64 {
        let horizon = model.horizon();
        let c = model.c();
        let mut total = 0.0;
        for t in 0..horizon {
            let q = noise.q(horizon - t - 1);
            let r = noise.r(horizon - t);
            let (s, u) = (&self.s[t], &self.u[t]);
            let cqc_r = c * q * c.transpose() + r;
            total += s.dot(&(q * s)) + u.dot(&(cqc_r * u)) + 2.0 * u.dot(&(c * (q * s)));
        }
        let s_end = &self.s[horizon];
        total + s_end.dot(&(noise.p0() * s_end))
    }
}

fn fill_standard_normal(rng: &mut ChaCha8Rng, buf: &mut Vector) {
    for v in buf.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
}

/// Factor of `Σ` used to draw `s₀` and `z_t`.
fn sigma_factor(model: &ModelSpec) -> Result<Mat> {
    let sigma = sigma_weight(model);
    linalg::cholesky_lower(&sigma, "Sigma").map_err(|_| Error::SigmaNotPositiveDefinite {
        min_eigenvalue: linalg::min_eigenvalue(&sigma),
    })
}

struct DualSampler<'a> {
    model: &'a ModelSpec,
    factor: Mat,
    closed_loop_t: Vec<Mat>,
    gains_t: Vec<Mat>,
}

impl<'a> DualSampler<'a> {
    fn new(model: &'a ModelSpec, gains: &GainSchedule) -> Result<Self> {
        gains.check(model)?;
        let horizon = model.horizon();
        Ok(Self {
            model,
            factor: sigma_factor(model)?,
            closed_loop_t: (0..horizon)
                .map(|t| gains.closed_loop(model, horizon - t - 1).transpose())
                .collect(),
            gains_t: (0..horizon).map(|t| gains.stage(horizon - t - 1).transpose()).collect(),
        })
    }

    /// Draw order: `s₀`, then `z₀ .. z_{M-2}`.
    fn draw(&self, rng: &mut ChaCha8Rng, scratch: &mut Vector, out: &mut DualTrajectory) {
        let horizon = self.model.horizon();
        fill_standard_normal(rng, scratch);
        out.s[0].gemv(1.0, &self.factor, scratch, 0.0);
        for t in 0..horizon {
            if t + 1 < horizon {
                fill_standard_normal(rng, scratch);
                out.z[t].gemv(1.0, &self.factor, scratch, 0.0);
            } else {
                out.z[t].fill(0.0);
            }
            out.u[t].gemv(-1.0, &self.gains_t[t], &out.s[t], 0.0);
            let (head, tail) = out.s.split_at_mut(t + 1);
            tail[0].copy_from(&out.z[t]);
            tail[0].gemv(1.0, &self.closed_loop_t[t], &head[t], 1.0);
        }
    }
}

/// One dual trajectory from `seed`.
pub fn sample_dual_trajectory(model: &ModelSpec, gains: &GainSchedule, seed: u64) -> Result<DualTrajectory> {
    let sampler = DualSampler::new(model, gains)?;
    let mut out = DualTrajectory::zeros(model);
    let mut scratch = Vector::zeros(model.state_dim());
    sampler.draw(&mut rng_from_seed(seed), &mut scratch, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Moments {
    count: f64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.count += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (x - self.mean);
    }

    fn merge(self, other: Moments) -> Moments {
        if other.count == 0.0 {
            return self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        Moments {
            count,
            mean: self.mean + delta * other.count / count,
            m2: self.m2 + other.m2 + delta * delta * self.count * other.count / count,
        }
    }
}

/// Monte-Carlo mean of the dual cost. Samples are drawn in chunks of
/// [`DUAL_CHUNK`] with per-chunk derived seeds and merged in chunk order, so
/// the result does not depend on the thread count.
pub fn dual_cost_mc(
    model: &ModelSpec,
    noise: &NoiseSpec,
    gains: &GainSchedule,
    samples: usize,
    seed: u64,
) -> Result<DualEstimate> {
    if samples < 2 {
        return Err(Error::InvalidParameter {
            name: "samples",
            reason: "need at least 2 samples for a standard error".into(),
        });
    }
    let sampler = DualSampler::new(model, gains)?;
    let chunks = samples.div_ceil(DUAL_CHUNK);
    let partial: Vec<Moments> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = rng_from_seed(derive_seed(seed, chunk as u64));
            let mut out = DualTrajectory::zeros(model);
            let mut scratch = Vector::zeros(model.state_dim());
            let mut moments = Moments {
                count: 0.0,
                mean: 0.0,
                m2: 0.0,
            };
            let count = DUAL_CHUNK.min(samples - chunk * DUAL_CHUNK);
            for _ in 0..count {
                sampler.draw(&mut rng, &mut scratch, &mut out);
                moments.push(out.cost(model, noise));
            }
            moments
        })
        .collect();
    let total = partial.into_iter().fold(
        Moments {
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        },
        Moments::merge,
    );
    let variance = total.m2 / (total.count - 1.0);
    Ok(DualEstimate {
        mean: total.mean,
        std_error: (variance / total.count).sqrt(),
        samples,
    })
}

/// Residual maps `G_{i,n}` (`m × z`), innovation maps `W_t` and the noise
/// covariance `D_X` for one gain schedule.
///
/// Column layout of `X`: `e₀` at 0, `ω_j` at `N + jN`, `v_j` at
/// `N(M+N+1) + (j-1)m`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedRepresentation {
    state_dim: usize,
    obs_dim: usize,
    horizon: usize,
    z_dim: usize,
    /// `residual[i][n-1] = G_{i,n}`.
    residual: Vec<Vec<Mat>>,
    /// `innovation[t] = W_t`, with `r_t = y_{t+1} - CA x̂_t = W_t X`.
    innovation: Vec<Mat>,
    d_x: Mat,
}

impl StackedRepresentation {
    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn initial_offset(&self) -> usize {
        0
    }

    /// Column of `ω_j`, `0 ≤ j < M+N`.
    pub fn process_offset(&self, j: usize) -> usize {
        self.state_dim * (1 + j)
    }

    /// Column of `v_j`, `1 ≤ j ≤ M+N`.
    pub fn measurement_offset(&self, j: usize) -> usize {
        debug_assert!(j >= 1);
        self.state_dim * (self.horizon + self.state_dim + 1) + (j - 1) * self.obs_dim
    }

    pub fn residual_map(&self, i: usize, n: usize) -> &Mat {
        &self.residual[i][n - 1]
    }

    pub fn innovation_map(&self, t: usize) -> &Mat {
        &self.innovation[t]
    }

    pub fn d_x(&self) -> &Mat {
        &self.d_x
    }

    /// Part of `f₁` contributed by the gain-independent blocks
    /// (`ω_j` for `i < j ≤ i+n` and `v_{i+n+1}`).
    pub fn gain_independent_part(&self) -> f64 {
        let mut total = 0.0;
        for i in 0..self.horizon {
            for n in 1..=self.state_dim {
                let g = self.residual_map(i, n);
                let mut cols = Vec::new();
                for j in i + 1..=i + n {
                    cols.push((self.process_offset(j), self.state_dim));
                }
                cols.push((self.measurement_offset(i + n + 1), self.obs_dim));
                for (start, width) in cols {
                    let block = g.columns(start, width);
                    let d = self.d_x.view((start, start), (width, width));
                    total += (block * d * block.transpose()).trace();
                }
            }
        }
        total
    }
}

/// `Φ(s, t) = A_s ⋯ A_t`, identity when `s < t`.
fn transition(model: &ModelSpec, closed: &[Mat], s: isize, t: isize) -> Mat {
    let n = model.state_dim();
    let mut phi = Mat::identity(n, n);
    let mut k = t;
    while k <= s {
        phi = &closed[k as usize] * phi;
        k += 1;
    }
    phi
}

pub fn build_stacked(model: &ModelSpec, noise: &NoiseSpec, gains: &GainSchedule) -> Result<StackedRepresentation> {
    gains.check(model)?;
    let (n, m, horizon) = (model.state_dim(), model.obs_dim(), model.horizon());
    let len = model.trajectory_len();
    let z_dim = n * (len + 1) + m * len;
    let closed: Vec<Mat> = (0..horizon).map(|t| gains.closed_loop(model, t)).collect();
    let eye = Mat::identity(n, n);
    let mut rep = StackedRepresentation {
        state_dim: n,
        obs_dim: m,
        horizon,
        z_dim,
        residual: Vec::with_capacity(horizon),
        innovation: Vec::with_capacity(horizon),
        d_x: Mat::zeros(z_dim, z_dim),
    };

    rep.d_x.view_mut((0, 0), (n, n)).copy_from(noise.p0());
    for j in 0..len {
        let o = rep.process_offset(j);
        rep.d_x.view_mut((o, o), (n, n)).copy_from(noise.q(j));
        let o = rep.measurement_offset(j + 1);
        rep.d_x.view_mut((o, o), (m, m)).copy_from(noise.r(j + 1));
    }

    // Map of the estimation error ε_{i+1} = x_{i+1} - x̂_{i+1}, block by block.
    let error_map = |rep: &StackedRepresentation, i: usize| -> Mat {
        let ii = i as isize;
        let mut map = Mat::zeros(n, z_dim);
        map.columns_mut(0, n).copy_from(&transition(model, &closed, ii, 0));
        for j in 0..=i {
            let phi = transition(model, &closed, ii, j as isize + 1);
            let k = gains.stage(j);
            map.columns_mut(rep.process_offset(j), n)
                .copy_from(&(&phi * (&eye - k * model.c())));
            map.columns_mut(rep.measurement_offset(j + 1), m)
                .copy_from(&(-&phi * k));
        }
        map
    };

    for i in 0..horizon {
        let eps = error_map(&rep, i);
        let mut per_n = Vec::with_capacity(n);
        for k in 1..=n {
            let mut g = model.c_a_pow(k) * &eps;
            for j in i + 1..=i + k {
                let o = rep.process_offset(j);
                g.columns_mut(o, n).copy_from(model.c_a_pow(i + k - j));
            }
            let o = rep.measurement_offset(i + k + 1);
            g.columns_mut(o, m).copy_from(&Mat::identity(m, m));
            per_n.push(g);
        }
        rep.residual.push(per_n);
    }

    for t in 0..horizon {
        let mut w = if t == 0 {
            let mut w = Mat::zeros(m, z_dim);
            w.columns_mut(0, n).copy_from(model.ca());
            w
        } else {
            model.ca() * error_map(&rep, t - 1)
        };
        w.columns_mut(rep.process_offset(t), n).copy_from(model.c());
        w.columns_mut(rep.measurement_offset(t + 1), m)
            .copy_from(&Mat::identity(m, m));
        rep.innovation.push(w);
    }
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedCostGradient {
    /// `f₁(K) = Σ_{i,n} tr(G_{i,n} D_X G_{i,n}ᵀ)`.
    pub f1: f64,
    /// `∇_t f₁ = -2 Σ_{i≥t} Σ_n (CAⁿ Φ(i, t+1))ᵀ G_{i,n} D_X W_tᵀ`.
    pub per_stage: Vec<Mat>,
}

pub fn stacked_cost_and_gradient(
    rep: &StackedRepresentation,
    model: &ModelSpec,
    gains: &GainSchedule,
) -> StackedCostGradient {
    let horizon = model.horizon();
    let closed: Vec<Mat> = (0..horizon).map(|t| gains.closed_loop(model, t)).collect();
    let mut f1 = 0.0;
    let mut gd = vec![Vec::with_capacity(model.state_dim()); horizon];
    for (i, per_n) in rep.residual.iter().enumerate() {
        for g in per_n {
            let prod = g * &rep.d_x;
            f1 += prod.dot(g);
            gd[i].push(prod);
        }
    }
    let per_stage = (0..horizon)
        .map(|t| {
            let mut acc = Mat::zeros(model.state_dim(), model.obs_dim());
            let w_t = &rep.innovation[t];
            for i in t..horizon {
                let phi = transition(model, &closed, i as isize, t as isize + 1);
                for (k, gdx) in gd[i].iter().enumerate() {
                    let left = model.c_a_pow(k + 1) * &phi;
                    acc -= left.transpose() * gdx * w_t.transpose() * 2.0;
                }
            }
            acc
        })
        .collect();
    StackedCostGradient { f1, per_stage }
}

/// `f₁(K) - f(K) = Σ_{t,n} tr(Σ_{k=0}^{n-1} CAᵏ Q_{t+n-k} (CAᵏ)ᵀ + R_{t+n+1})`.
pub fn constant_offset(model: &ModelSpec, noise: &NoiseSpec) -> f64 {
    let mut total = 0.0;
    for t in 0..model.horizon() {
        for n in 1..=model.state_dim() {
            for k in 0..n {
                let cak = model.c_a_pow(k);
                total += (cak * noise.q(t + n - k) * cak.transpose()).trace();
            }
            total += noise.r(t + n + 1).trace();
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{random_gains, random_instance, reference_system, InstanceShape};
    use crate::model::Simulator;
    use crate::objective::{cost, gradient};
    use crate::riccati::solve_riccati;
    use crate::seed::rng_from_seed;

    #[test]
    fn dual_trajectory_follows_the_dual_system() {
        let (model, _) = reference_system();
        let gains = random_gains(&mut rng_from_seed(31), &model, 0.4);
        let tr = sample_dual_trajectory(&model, &gains, 5).unwrap();
        let horizon = model.horizon();
        assert_eq!(tr.z[horizon - 1].amax(), 0.0);
        for t in 0..horizon {
            let k = gains.stage(horizon - t - 1);
            assert!((&tr.u[t] + k.transpose() * &tr.s[t]).amax() < 1e-14);
            let next = model.a().transpose() * &tr.s[t] + model.ca().transpose() * &tr.u[t] + &tr.z[t];
            assert!((&tr.s[t + 1] - next).amax() < 1e-13);
        }
        assert_eq!(tr, sample_dual_trajectory(&model, &gains, 5).unwrap());
    }

    #[test]
    fn dual_mc_is_deterministic_and_close() {
        let (model, noise) = reference_system();
        let gains = GainSchedule::zeros(&model);
        let a = dual_cost_mc(&model, &noise, &gains, 50_000, 3).unwrap();
        let b = dual_cost_mc(&model, &noise, &gains, 50_000, 3).unwrap();
        assert_eq!(a, b);
        let f = cost(&model, &noise, &gains);
        assert!((a.mean - f).abs() < 4.0 * a.std_error, "{a:?} vs {f}");
    }

    #[test]
    fn singular_sigma_is_reported() {
        let model = ModelSpec::new(Mat::identity(2, 2), Mat::from_row_slice(1, 2, &[1.0, 0.0]), 1).unwrap();
        let noise = NoiseSpec::constant(
            &model,
            Mat::identity(2, 2),
            Mat::identity(1, 1),
            Mat::zeros(2, 2),
            Vector::zeros(2),
        )
        .unwrap();
        let gains = GainSchedule::zeros(&model);
        assert!(matches!(
            dual_cost_mc(&model, &noise, &gains, 10, 0),
            Err(Error::SigmaNotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn tiny_layout_matches_hand_expansion() {
        let (a, c) = (0.8, 1.5);
        let model = ModelSpec::new(Mat::from_element(1, 1, a), Mat::from_element(1, 1, c), 1).unwrap();
        let noise = NoiseSpec::constant(
            &model,
            Mat::identity(1, 1),
            Mat::identity(1, 1),
            Mat::identity(1, 1),
            Vector::zeros(1),
        )
        .unwrap();
        let rep = build_stacked(&model, &noise, &GainSchedule::zeros(&model)).unwrap();
        assert_eq!(rep.z_dim(), 5);
        // y₂ - c·a·x̂₁ = c·a·a·e₀ + c·a·ω₀ + c·ω₁ + v₂ with x̂₁ = a·x̂₀.
        let expected = [c * a * a, c * a, c, 0.0, 1.0];
        let g = rep.residual_map(0, 1);
        for (k, e) in expected.iter().enumerate() {
            assert!((g[(0, k)] - e).abs() < 1e-15, "column {k}");
        }
    }

    #[test]
    fn residuals_are_linear_in_the_stacked_noise() {
        let mut rng = rng_from_seed(32);
        for _ in 0..10 {
            let shape = InstanceShape::random(&mut rng, 3, 4);
            let (model, noise) = random_instance(&mut rng, shape);
            let gains = random_gains(&mut rng, &model, 0.5);
            let rep = build_stacked(&model, &noise, &gains).unwrap();
            let sim = Simulator::new(&model, &noise).unwrap();
            let (tr, realization) = sim.simulate_with_noise(7);
            let x = realization.stacked();
            assert_eq!(x.len(), rep.z_dim());
            let mut x_hat = noise.x0_mean().clone();
            for i in 0..model.horizon() {
                let innovation = tr.y(i + 1) - model.ca() * &x_hat;
                assert!((&innovation - rep.innovation_map(i) * &x).amax() < 1e-10);
                x_hat = model.a() * &x_hat + gains.stage(i) * innovation;
                for n in 1..=model.state_dim() {
                    let residual = tr.y(i + n + 1) - model.c_a_pow(n) * &x_hat;
                    assert!((residual - rep.residual_map(i, n) * &x).amax() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn stacked_cost_is_cost_plus_constant() {
        let mut rng = rng_from_seed(33);
        for _ in 0..20 {
            let shape = InstanceShape::random(&mut rng, 4, 5);
            let (model, noise) = random_instance(&mut rng, shape);
            let gains = random_gains(&mut rng, &model, 0.5);
            let rep = build_stacked(&model, &noise, &gains).unwrap();
            let out = stacked_cost_and_gradient(&rep, &model, &gains);
            let f = cost(&model, &noise, &gains);
            let offset = constant_offset(&model, &noise);
            assert!((rep.gain_independent_part() - offset).abs() < 1e-10 * offset);
            assert!(
                (out.f1 - offset - f).abs() < 1e-9 * (1.0 + f),
                "{} vs {f}",
                out.f1 - offset
            );
        }
    }

    #[test]
    fn zero_initial_covariance_drops_the_first_block() {
        let (model, noise) = reference_system();
        let rep = build_stacked(&model, &noise, &GainSchedule::zeros(&model)).unwrap();
        assert_eq!(rep.d_x().view((0, 0), (3, 3)).amax(), 0.0);
    }

    #[test]
    fn stacked_gradient_matches_closed_form() {
        let (model, noise) = reference_system();
        let gains = random_gains(&mut rng_from_seed(34), &model, 0.3);
        let rep = build_stacked(&model, &noise, &gains).unwrap();
        let stacked = stacked_cost_and_gradient(&rep, &model, &gains);
        let exact = gradient(&model, &noise, &gains);
        for (a, b) in stacked.per_stage.iter().zip(&exact.per_stage) {
            assert!((a - b).norm() < 1e-8);
        }

        let opt = solve_riccati(&model, &noise).unwrap();
        let rep = build_stacked(&model, &noise, &opt.gains).unwrap();
        let at_opt = stacked_cost_and_gradient(&rep, &model, &opt.gains);
        assert!(linalg::stacked_frobenius(&at_opt.per_stage) < 1e-8);
    }

    #[test]
    fn scalar_stacked_gradient() {
        let q = 0.4;
        let model = ModelSpec::new(Mat::identity(1, 1), Mat::identity(1, 1), 1).unwrap();
        let noise = NoiseSpec::constant(
            &model,
            Mat::from_element(1, 1, q),
            Mat::from_element(1, 1, 0.9),
            Mat::zeros(1, 1),
            Vector::zeros(1),
        )
        .unwrap();
        let gains = GainSchedule::zeros(&model);
        let rep = build_stacked(&model, &noise, &gains).unwrap();
        let out = stacked_cost_and_gradient(&rep, &model, &gains);
        assert!((out.per_stage[0][(0, 0)] + 2.0 * q).abs() < 1e-15);
    }
}
