//! Problem instances: the 3-state / 2-output reference system used by the
//! experiment presets, and random well-posed instances for property checks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::linalg;
use crate::model::{ModelSpec, NoiseSpec};
use crate::objective::GainSchedule;
use crate::{Mat, Vector};

pub const REFERENCE_HORIZON: usize = 3;

pub fn reference_a() -> Mat {
    Mat::from_row_slice(
        3,
        3,
        &[0.24, -0.18, -0.3118, -0.0578, 0.4839, -0.0279, -0.1283, -0.0138, 0.4761],
    )
}

// Four-digit data, not an approximation of 1/sqrt(2).
#[allow(clippy::approx_constant)]
pub fn reference_c() -> Mat {
    Mat::from_row_slice(2, 3, &[0.0, 0.7071, 1.2247, 0.7071, -0.5125, 1.1124])
}

pub fn reference_q() -> Mat {
    Mat::from_row_slice(
        3,
        3,
        &[0.61, -0.195, -0.3377, -0.195, 0.775, -0.0953, -0.3377, -0.0953, 0.665],
    )
}

pub fn reference_r() -> Mat {
    Mat::from_row_slice(2, 2, &[0.9, 0.0, 0.0, 0.6])
}

/// Per-step drift `δQ` of the time-varying variant `Q_t = Q + t·δQ`.
pub fn reference_drift() -> Mat {
    Mat::from_row_slice(3, 3, &[0.12, -0.08, 0.0, -0.08, 0.12, 0.0, 0.0, 0.0, 0.05])
}

pub fn reference_x0() -> Vector {
    Vector::from_vec(vec![1.0, 1.0, 0.0])
}

/// Reference system with horizon `M = 3`, time-invariant noise and `P₀ = 0`.
pub fn reference_system() -> (ModelSpec, NoiseSpec) {
    let model = reference_model(REFERENCE_HORIZON);
    let noise = NoiseSpec::constant(&model, reference_q(), reference_r(), Mat::zeros(3, 3), reference_x0())
        .expect("reference noise dimensions");
    (model, noise)
}

pub fn reference_model(horizon: usize) -> ModelSpec {
    ModelSpec::new(reference_a(), reference_c(), horizon).expect("reference model dimensions")
}

/// Reference noise with drifting process covariance.
pub fn reference_drift_noise(model: &ModelSpec) -> NoiseSpec {
    NoiseSpec::with_drift(
        model,
        reference_q(),
        &reference_drift(),
        reference_r(),
        Mat::zeros(3, 3),
        reference_x0(),
    )
    .expect("reference drift dimensions")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceShape {
    pub state_dim: usize,
    pub obs_dim: usize,
    pub horizon: usize,
}

impl InstanceShape {
    /// Uniform shape with `N, m ≤ max_dim` and `M ≤ max_horizon`.
    pub fn random<R: Rng>(rng: &mut R, max_dim: usize, max_horizon: usize) -> Self {
        Self {
            state_dim: rng.random_range(1..=max_dim),
            obs_dim: rng.random_range(1..=max_dim),
            horizon: rng.random_range(1..=max_horizon),
        }
    }
}

fn gaussian<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Mat {
    Mat::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn random_spd<R: Rng>(rng: &mut R, dim: usize, floor: f64) -> Mat {
    let b = gaussian(rng, dim, dim);
    linalg::symmetrize(&((&b * b.transpose()) / dim as f64 + Mat::identity(dim, dim) * floor))
}

/// A random instance satisfying every standing assumption: `A` invertible
/// with condition number ≤ 10 and spectral norm 0.95, `(C, A)` observable,
/// time-varying positive definite `Q_t`, `R_t`, and a possibly singular PSD
/// `P₀`.
pub fn random_instance<R: Rng>(rng: &mut R, shape: InstanceShape) -> (ModelSpec, NoiseSpec) {
    let n = shape.state_dim;
    let m = shape.obs_dim;
    let a = loop {
        let a = gaussian(rng, n, n);
        let sv = linalg::singular_values(&a);
        let (lo, hi) = (sv[0], sv[n - 1]);
        if lo > 0.1 * hi {
            break a * (0.95 / hi);
        }
    };
    let c = loop {
        let c = gaussian(rng, m, n);
        if linalg::rank(&linalg::observability_matrix(&a, &c)) == n {
            break c;
        }
    };
    let model = ModelSpec::new(a, c, shape.horizon).expect("random model dimensions");
    let len = model.trajectory_len();
    let q = (0..len).map(|_| random_spd(rng, n, 0.2)).collect();
    let r = (0..len).map(|_| random_spd(rng, m, 0.2)).collect();
    let rank = rng.random_range(0..=n);
    let b = gaussian(rng, n, rank);
    let p0 = linalg::symmetrize(&(&b * b.transpose() * 0.5));
    let x0 = Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
    let noise = NoiseSpec::new(&model, q, r, p0, x0).expect("random noise dimensions");
    (model, noise)
}

/// Gains with i.i.d. `N(0, scale²)` entries.
pub fn random_gains<R: Rng>(rng: &mut R, model: &ModelSpec, scale: f64) -> GainSchedule {
    let (n, m) = (model.state_dim(), model.obs_dim());
    GainSchedule::new((0..model.horizon()).map(|_| gaussian(rng, n, m) * scale).collect())
        .expect("non-empty gain schedule")
}
