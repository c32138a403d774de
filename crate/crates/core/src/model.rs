//! The linear time-invariant system, its noise model, assumption checks and
//! seeded trajectory simulation.
//!
//! ```text
//! x_{t+1} = A x_t + ω_t,   ω_t ~ N(0, Q_t)
//! y_t     = C x_t + v_t,   v_t ~ N(0, R_t)
//! x_0 ~ N(x̄_0, P_0),       x̂_0 = x̄_0
//! ```
//!
//! A horizon of `M` gains needs observations `y_1 .. y_{M+N}`, hence noise
//! schedules `Q_0 .. Q_{M+N-1}` and `R_1 .. R_{M+N}`.

use std::fmt;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::linalg::{self, SYMMETRY_TOLERANCE};
use crate::seed::{derive_seed, rng_from_seed};
use crate::{Error, Mat, Result, Vector};

/// System matrices `A` (N×N), `C` (m×N) and horizon `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    a: Mat,
    c: Mat,
    horizon: usize,
    /// `C Aⁿ` for `n = 0..=N`.
    c_powers: Vec<Mat>,
}

impl ModelSpec {
    pub fn new(a: Mat, c: Mat, horizon: usize) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || a.ncols() != n {
            return Err(Error::dimension("A", "square N×N with N ≥ 1", shape(&a)));
        }
        if c.nrows() == 0 || c.ncols() != n {
            return Err(Error::dimension("C", format!("m×{n} with m ≥ 1"), shape(&c)));
        }
        if horizon == 0 {
            return Err(Error::InvalidParameter {
                name: "M",
                reason: "horizon must be at least 1".into(),
            });
        }
        let mut c_powers = Vec::with_capacity(n + 1);
        c_powers.push(c.clone());
        for k in 1..=n {
            let next = &c_powers[k - 1] * &a;
            c_powers.push(next);
        }
        Ok(Self {
            a,
            c,
            horizon,
            c_powers,
        })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn c(&self) -> &Mat {
        &self.c
    }

    /// `C A`.
    pub fn ca(&self) -> &Mat {
        &self.c_powers[1]
    }

    /// `C Aⁿ` for `0 ≤ n ≤ N`.
    pub fn c_a_pow(&self, n: usize) -> &Mat {
        &self.c_powers[n]
    }

    /// State dimension `N`.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Observation dimension `m`.
    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    /// Number of gains `M`.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Last observation time a trajectory needs, `M + N`.
    pub fn trajectory_len(&self) -> usize {
        self.horizon + self.state_dim()
    }
}

fn shape(m: &Mat) -> String {
    format!("{}×{}", m.nrows(), m.ncols())
}

/// Noise covariance schedules and the initial-state distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    /// `Q_t`, `t = 0 .. M+N-1`.
    q: Vec<Mat>,
    /// `R_t`, stored at `t - 1` for `t = 1 .. M+N`.
    r: Vec<Mat>,
    p0: Mat,
    x0_mean: Vector,
}

impl NoiseSpec {
    pub fn new(model: &ModelSpec, q: Vec<Mat>, r: Vec<Mat>, p0: Mat, x0_mean: Vector) -> Result<Self> {
        let spec = Self { q, r, p0, x0_mean };
        spec.check_dimensions(model)?;
        Ok(spec)
    }

    /// Time-invariant `Q`, `R` expanded over the whole schedule.
    pub fn constant(model: &ModelSpec, q: Mat, r: Mat, p0: Mat, x0_mean: Vector) -> Result<Self> {
        let len = model.trajectory_len();
        Self::new(model, vec![q; len], vec![r; len], p0, x0_mean)
    }

    /// Linearly drifting process noise `Q_t = Q + t·δQ` with constant `R`.
    pub fn with_drift(model: &ModelSpec, q: Mat, dq: &Mat, r: Mat, p0: Mat, x0_mean: Vector) -> Result<Self> {
        if dq.shape() != q.shape() {
            return Err(Error::dimension("dQ", shape(&q), shape(dq)));
        }
        let len = model.trajectory_len();
        let qs = (0..len).map(|t| &q + dq * t as f64).collect();
        Self::new(model, qs, vec![r; len], p0, x0_mean)
    }

    fn check_dimensions(&self, model: &ModelSpec) -> Result<()> {
        let (n, m, len) = (model.state_dim(), model.obs_dim(), model.trajectory_len());
        if self.q.len() != len {
            return Err(Error::dimension(
                "Q",
                format!("{len} matrices (t = 0..M+N-1)"),
                self.q.len(),
            ));
        }
        if self.r.len() != len {
            return Err(Error::dimension(
                "R",
                format!("{len} matrices (t = 1..M+N)"),
                self.r.len(),
            ));
        }
        for (t, q) in self.q.iter().enumerate() {
            if q.shape() != (n, n) {
                return Err(Error::dimension(format!("Q[{t}]"), format!("{n}×{n}"), shape(q)));
            }
        }
        for (t, r) in self.r.iter().enumerate() {
            if r.shape() != (m, m) {
                return Err(Error::dimension(format!("R[{}]", t + 1), format!("{m}×{m}"), shape(r)));
            }
        }
        if self.p0.shape() != (n, n) {
            return Err(Error::dimension("P0", format!("{n}×{n}"), shape(&self.p0)));
        }
        if self.x0_mean.len() != n {
            return Err(Error::dimension("x0_mean", n, self.x0_mean.len()));
        }
        Ok(())
    }

    /// Process noise covariance `Q_t`, `0 ≤ t < M+N`.
    pub fn q(&self, t: usize) -> &Mat {
        &self.q[t]
    }

    /// Measurement noise covariance `R_t`, `1 ≤ t ≤ M+N`.
    pub fn r(&self, t: usize) -> &Mat {
        assert!(t >= 1, "R_t is indexed from t = 1");
        &self.r[t - 1]
    }

    pub fn q_schedule(&self) -> &[Mat] {
        &self.q
    }

    pub fn r_schedule(&self) -> &[Mat] {
        &self.r
    }

    pub fn p0(&self) -> &Mat {
        &self.p0
    }

    pub fn x0_mean(&self) -> &Vector {
        &self.x0_mean
    }
}

/// Witness for one covariance check.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceCheck {
    pub label: String,
    pub symmetric: bool,
    pub min_eigenvalue: f64,
    pub passed: bool,
}

/// Pass/fail per standing assumption, with the computed witnesses.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    /// `Q_t` and `R_t` positive definiteness, in schedule order.
    pub noise: Vec<CovarianceCheck>,
    pub noise_positive_definite: bool,
    /// `P₀` symmetric PSD (singular is allowed).
    pub initial_covariance: CovarianceCheck,
    pub observability_rank: usize,
    pub observable: bool,
    pub a_min_singular_value: f64,
    pub a_invertible: bool,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.noise_positive_definite && self.initial_covariance.passed && self.observable && self.a_invertible
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mark = |ok: bool| if ok { "pass" } else { "FAIL" };
        let worst = self
            .noise
            .iter()
            .min_by(|a, b| a.min_eigenvalue.total_cmp(&b.min_eigenvalue));
        match worst {
            Some(w) => writeln!(
                f,
                "noise covariances positive definite: {} (smallest eigenvalue {:.6e} in {})",
                mark(self.noise_positive_definite),
                w.min_eigenvalue,
                w.label
            )?,
            None => writeln!(f, "noise covariances positive definite: {}", mark(false))?,
        }
        for c in self.noise.iter().filter(|c| !c.passed) {
            writeln!(
                f,
                "  {}: symmetric={} min eigenvalue {:.6e}",
                c.label, c.symmetric, c.min_eigenvalue
            )?;
        }
        writeln!(
            f,
            "initial covariance P0 PSD: {} (min eigenvalue {:.6e})",
            mark(self.initial_covariance.passed),
            self.initial_covariance.min_eigenvalue
        )?;
        writeln!(
            f,
            "(C, A) observable: {} (observability rank {})",
            mark(self.observable),
            self.observability_rank
        )?;
        write!(
            f,
            "A invertible: {} (min singular value {:.6e})",
            mark(self.a_invertible),
            self.a_min_singular_value
        )
    }
}

fn check_pd(label: String, m: &Mat) -> CovarianceCheck {
    let symmetric = linalg::is_symmetric(m, SYMMETRY_TOLERANCE);
    let min_eigenvalue = linalg::min_eigenvalue(m);
    let scale = linalg::spectral_norm(m).max(1.0);
    CovarianceCheck {
        passed: symmetric && min_eigenvalue > 1e-12 * scale,
        label,
        symmetric,
        min_eigenvalue,
    }
}

/// Check the standing assumptions: positive definite noise covariances,
/// PSD `P₀`, `(C, A)` observable and `A` invertible.
pub fn validate(model: &ModelSpec, noise: &NoiseSpec) -> Result<ValidationReport> {
    noise.check_dimensions(model)?;

    let mut checks = Vec::with_capacity(noise.q.len() + noise.r.len());
    for (t, q) in noise.q.iter().enumerate() {
        checks.push(check_pd(format!("Q[{t}]"), q));
    }
    for (t, r) in noise.r.iter().enumerate() {
        checks.push(check_pd(format!("R[{}]", t + 1), r));
    }
    let noise_positive_definite = checks.iter().all(|c| c.passed);

    let p0_symmetric = linalg::is_symmetric(&noise.p0, SYMMETRY_TOLERANCE);
    let initial_covariance = CovarianceCheck {
        label: "P0".into(),
        symmetric: p0_symmetric,
        min_eigenvalue: linalg::min_eigenvalue(&noise.p0),
        passed: p0_symmetric && linalg::is_psd(&noise.p0),
    };

    let n = model.state_dim();
    let observability_rank = linalg::rank(&linalg::observability_matrix(&model.a, &model.c));
    let a_min_singular_value = linalg::min_singular_value(&model.a);
    let a_invertible = a_min_singular_value > 1e-10 * linalg::spectral_norm(&model.a).max(1.0);

    Ok(ValidationReport {
        noise: checks,
        noise_positive_definite,
        initial_covariance,
        observability_rank,
        observable: observability_rank == n,
        a_min_singular_value,
        a_invertible,
    })
}

/// One simulated run: observations `y_1 .. y_{M+N}` and, when known, the
/// states `x_0 .. x_{M+N}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    observations: Vec<Vector>,
    states: Vec<Vector>,
}

impl Trajectory {
    /// A record carrying observations only, as collected from a real system.
    pub fn from_observations(observations: Vec<Vector>) -> Self {
        Self {
            observations,
            states: Vec::new(),
        }
    }

    /// Observation `y_t`, `t ≥ 1`.
    pub fn y(&self, t: usize) -> &Vector {
        &self.observations[t - 1]
    }

    /// State `x_t`; panics on observation-only records.
    pub fn x(&self, t: usize) -> &Vector {
        &self.states[t]
    }

    pub fn observations(&self) -> &[Vector] {
        &self.observations
    }

    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    /// Last observation time covered.
    pub fn last_time(&self) -> usize {
        self.observations.len()
    }
}

/// The sampled noises behind a trajectory, in the stacked order
/// `(e₀, ω₀ .. ω_{M+N-1}, v₁ .. v_{M+N})` with `e₀ = x₀ - x̂₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseRealization {
    pub initial_error: Vector,
    pub process: Vec<Vector>,
    pub measurement: Vec<Vector>,
}

impl NoiseRealization {
    pub fn stacked(&self) -> Vector {
        let parts = std::iter::once(&self.initial_error)
            .chain(&self.process)
            .chain(&self.measurement);
        let len = parts.clone().map(|v| v.len()).sum();
        Vector::from_iterator(len, parts.flat_map(|v| v.iter().copied()))
    }
}

/// `L` independent trajectories plus the shared filter initialization `x̂₀`.
///
/// Observations are also kept stacked by time (`m × L` per time) because the
/// gradient estimator works on whole batches at once.
#[derive(Debug, Clone)]
pub struct ObservationBatch {
    trajectories: Vec<Trajectory>,
    by_time: Vec<Mat>,
    x_hat0: Vector,
    master_seed: u64,
}

impl ObservationBatch {
    pub fn new(trajectories: Vec<Trajectory>, x_hat0: Vector, master_seed: u64) -> Result<Self> {
        let Some(first) = trajectories.first() else {
            return Err(Error::InvalidParameter {
                name: "L",
                reason: "an observation batch needs at least one trajectory".into(),
            });
        };
        let len = first.last_time();
        let m = first.observations.first().map_or(0, |y| y.len());
        for (l, tr) in trajectories.iter().enumerate() {
            if tr.last_time() != len {
                return Err(Error::dimension(format!("trajectories[{l}]"), len, tr.last_time()));
            }
            if let Some(bad) = tr.observations.iter().position(|y| y.len() != m) {
                return Err(Error::dimension(
                    format!("trajectories[{l}].y[{}]", bad + 1),
                    m,
                    tr.observations[bad].len(),
                ));
            }
        }
        let count = trajectories.len();
        let by_time = (0..len)
            .map(|t| Mat::from_fn(m, count, |i, l| trajectories[l].observations[t][i]))
            .collect();
        Ok(Self {
            trajectories,
            by_time,
            x_hat0,
            master_seed,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    /// All `L` observations at time `t ≥ 1`, one column per trajectory.
    pub fn observations_at(&self, t: usize) -> &Mat {
        &self.by_time[t - 1]
    }

    pub fn last_time(&self) -> usize {
        self.by_time.len()
    }

    pub fn x_hat0(&self) -> &Vector {
        &self.x_hat0
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }
}

/// Pre-factored noise model; sampling never refactors covariances.
#[derive(Debug, Clone)]
pub struct Simulator {
    model: ModelSpec,
    noise: NoiseSpec,
    p0_factor: Mat,
    q_factors: Vec<Mat>,
    r_factors: Vec<Mat>,
}

impl Simulator {
    pub fn new(model: &ModelSpec, noise: &NoiseSpec) -> Result<Self> {
        noise.check_dimensions(model)?;
        let p0_factor = linalg::psd_factor(&noise.p0, "P0")?;
        let q_factors = noise
            .q
            .iter()
            .enumerate()
            .map(|(t, q)| linalg::cholesky_lower(q, &format!("Q[{t}]")))
            .collect::<Result<_>>()?;
        let r_factors = noise
            .r
            .iter()
            .enumerate()
            .map(|(t, r)| linalg::cholesky_lower(r, &format!("R[{}]", t + 1)))
            .collect::<Result<_>>()?;
        Ok(Self {
            model: model.clone(),
            noise: noise.clone(),
            p0_factor,
            q_factors,
            r_factors,
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn noise(&self) -> &NoiseSpec {
        &self.noise
    }

    pub fn simulate(&self, seed: u64) -> Trajectory {
        self.simulate_with_noise(seed).0
    }

    /// Draw order per trajectory: `x₀` perturbation, then `ω_t`, `v_{t+1}`
    /// for `t = 0 .. M+N-1`.
    pub fn simulate_with_noise(&self, seed: u64) -> (Trajectory, NoiseRealization) {
        let mut rng = rng_from_seed(seed);
        let (n, m) = (self.model.state_dim(), self.model.obs_dim());
        let len = self.model.trajectory_len();

        let initial_error = &self.p0_factor * standard_normal(&mut rng, n);
        let mut x = self.noise.x0_mean() + &initial_error;
        let mut states = Vec::with_capacity(len + 1);
        let mut observations = Vec::with_capacity(len);
        let mut process = Vec::with_capacity(len);
        let mut measurement = Vec::with_capacity(len);
        states.push(x.clone());
        for t in 0..len {
            let w = &self.q_factors[t] * standard_normal(&mut rng, n);
            let v = &self.r_factors[t] * standard_normal(&mut rng, m);
            x = self.model.a() * &x + &w;
            observations.push(self.model.c() * &x + &v);
            states.push(x.clone());
            process.push(w);
            measurement.push(v);
        }
        (
            Trajectory { observations, states },
            NoiseRealization {
                initial_error,
                process,
                measurement,
            },
        )
    }

    /// Deterministic run with every noise forced to zero and `x₀ = x̄₀`.
    pub fn simulate_noiseless(&self) -> Trajectory {
        let len = self.model.trajectory_len();
        let mut x = self.noise.x0_mean().clone();
        let mut states = vec![x.clone()];
        let mut observations = Vec::with_capacity(len);
        for _ in 0..len {
            x = self.model.a() * &x;
            observations.push(self.model.c() * &x);
            states.push(x.clone());
        }
        Trajectory { observations, states }
    }

    /// `L` trajectories, the `l`-th seeded by `derive_seed(master_seed, l)`.
    pub fn sample_batch(&self, count: usize, master_seed: u64) -> Result<ObservationBatch> {
        if count == 0 {
            return Err(Error::InvalidParameter {
                name: "L",
                reason: "sample count must be at least 1".into(),
            });
        }
        let trajectories = (0..count as u64)
            .into_par_iter()
            .map(|l| self.simulate(derive_seed(master_seed, l)))
            .collect();
        ObservationBatch::new(trajectories, self.noise.x0_mean().clone(), master_seed)
    }
}

fn standard_normal<R: Rng>(rng: &mut R, len: usize) -> Vector {
    Vector::from_iterator(len, (0..len).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Simulate one trajectory from `seed`.
pub fn simulate(model: &ModelSpec, noise: &NoiseSpec, seed: u64) -> Result<Trajectory> {
    Ok(Simulator::new(model, noise)?.simulate(seed))
}

/// Sample `L` independent trajectories.
pub fn sample_batch(model: &ModelSpec, noise: &NoiseSpec, count: usize, master_seed: u64) -> Result<ObservationBatch> {
    Simulator::new(model, noise)?.sample_batch(count, master_seed)
}
