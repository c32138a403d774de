//! Learning gains from data.
//!
//! The filter driven by gains `K` predicts future observations
//! `ŷ_{t+1}ⁿ = CAⁿ x̂_{t+1}` with `x̂_{t+1} = A_t x̂_t + K_t y_{t+1}`. The
//! empirical cost averages the squared residuals `e_{t+1}ⁿ = y_{t+n+1} - ŷ_{t+1}ⁿ`
//! over a batch of trajectories; its exact gradient with respect to `K`
//! is the estimator used by SGD. Exact gradient descent on the closed-form
//! cost is provided for the known-noise case.

use std::time::Instant;

use crate::linalg::stacked_frobenius;
use crate::model::{ModelSpec, NoiseSpec, ObservationBatch, Simulator};
use crate::objective::{self, GainSchedule};
use crate::riccati::solve_riccati;
use crate::seed::derive_seed;
use crate::{Error, Mat, Result, Vector};

/// Default SGD step size.
pub const DEFAULT_ETA: f64 = 0.0008;
/// Runs abort once the tracked cost exceeds this multiple of its initial value.
pub const DIVERGENCE_FACTOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictedObservations {
    /// `x̂₀ .. x̂_M`.
    pub x_hat: Vec<Vector>,
    /// `y_hat[t][n-1] = ŷ_{t+1}ⁿ`.
    pub y_hat: Vec<Vec<Vector>>,
    /// `e[t][n-1] = y_{t+n+1} - ŷ_{t+1}ⁿ`.
    pub e: Vec<Vec<Vector>>,
}

fn check_length(model: &ModelSpec, got: usize) -> Result<()> {
    let needed = model.trajectory_len();
    if got < needed {
        return Err(Error::TrajectoryTooShort { needed, got });
    }
    Ok(())
}

/// `y[k]` holds `y_{k+1}`.
pub fn predict(
    model: &ModelSpec,
    gains: &GainSchedule,
    y: &[Vector],
    x_hat0: &Vector,
) -> Result<PredictedObservations> {
    gains.check(model)?;
    check_length(model, y.len())?;
    if x_hat0.len() != model.state_dim() {
        return Err(Error::dimension("x_hat0", model.state_dim(), x_hat0.len()));
    }
    let horizon = model.horizon();
    let mut x_hat = Vec::with_capacity(horizon + 1);
    x_hat.push(x_hat0.clone());
    let mut y_hat = Vec::with_capacity(horizon);
    let mut e = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let next = gains.closed_loop(model, t) * &x_hat[t] + gains.stage(t) * &y[t];
        let preds: Vec<Vector> = (1..=model.state_dim()).map(|n| model.c_a_pow(n) * &next).collect();
        e.push(preds.iter().enumerate().map(|(k, p)| &y[t + k + 1] - p).collect());
        y_hat.push(preds);
        x_hat.push(next);
    }
    Ok(PredictedObservations { x_hat, y_hat, e })
}

/// Filter states, innovations and residuals for a whole batch, one column
/// per trajectory.
struct BatchPass {
    /// `innovation[t] = Y_{t+1} - CA X̂_t`.
    innovation: Vec<Mat>,
    /// `residual[i][n-1] = E_{i+1}ⁿ`.
    residual: Vec<Vec<Mat>>,
}

fn batch_pass(model: &ModelSpec, gains: &GainSchedule, batch: &ObservationBatch) -> Result<BatchPass> {
    gains.check(model)?;
    check_length(model, batch.last_time())?;
    let horizon = model.horizon();
    let l = batch.len();
    let mut x_hat = Mat::from_fn(model.state_dim(), l, |i, _| batch.x_hat0()[i]);
    let mut innovation = Vec::with_capacity(horizon);
    let mut residual = Vec::with_capacity(horizon);
    for t in 0..horizon {
        let r = batch.observations_at(t + 1) - model.ca() * &x_hat;
        x_hat = model.a() * &x_hat + gains.stage(t) * &r;
        residual.push(
            (1..=model.state_dim())
                .map(|n| batch.observations_at(t + n + 1) - model.c_a_pow(n) * &x_hat)
                .collect(),
        );
        innovation.push(r);
    }
    Ok(BatchPass { innovation, residual })
}

impl BatchPass {
    fn cost(&self, samples: usize) -> f64 {
        let total: f64 = self.residual.iter().flatten().map(|e| e.norm_squared()).sum();
        total / samples as f64
    }

    /// Backward sweep `λ_M = g_M`, `λ_{t+1} = g_{t+1} + A_{t+1}ᵀ λ_{t+2}` with
    /// `g_{i+1} = Σ_n (CAⁿ)ᵀ E_{i+1}ⁿ`; then `∇̂_t = -(2/L) λ_{t+1} R_tᵀ`.
    fn gradient(&self, model: &ModelSpec, gains: &GainSchedule, samples: usize) -> Vec<Mat> {
        let horizon = model.horizon();
        let mut per_stage = vec![Mat::zeros(0, 0); horizon];
        let mut lambda: Option<Mat> = None;
        for t in (0..horizon).rev() {
            let mut acc = match lambda.take() {
                Some(next) => gains.closed_loop(model, t + 1).transpose() * next,
                None => Mat::zeros(model.state_dim(), samples),
            };
            for (k, e) in self.residual[t].iter().enumerate() {
                acc += model.c_a_pow(k + 1).transpose() * e;
            }
            per_stage[t] = &acc * self.innovation[t].transpose() * (-2.0 / samples as f64);
            lambda = Some(acc);
        }
        per_stage
    }
}

/// `(1/L) Σ_l Σ_{t,n} ‖e_{t+1}ⁿ(l)‖²`, an estimate of the cost plus a
/// gain-independent constant.
pub fn sample_cost(model: &ModelSpec, gains: &GainSchedule, batch: &ObservationBatch) -> Result<f64> {
    Ok(batch_pass(model, gains, batch)?.cost(batch.len()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub per_stage: Vec<Mat>,
    pub samples: usize,
    pub batch_seed: u64,
    /// Sample cost at the same gains, a by-product of the forward pass.
    pub sample_cost: f64,
}

impl GradientEstimate {
    pub fn norm(&self) -> f64 {
        stacked_frobenius(&self.per_stage)
    }
}

/// Exact gradient of [`sample_cost`] on `batch`.
pub fn estimate_gradient(
    model: &ModelSpec,
    gains: &GainSchedule,
    batch: &ObservationBatch,
) -> Result<GradientEstimate> {
    let pass = batch_pass(model, gains, batch)?;
    Ok(GradientEstimate {
        per_stage: pass.gradient(model, gains, batch.len()),
        samples: batch.len(),
        batch_seed: batch.master_seed(),
        sample_cost: pass.cost(batch.len()),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunRecord {
    pub iter: usize,
    pub cost: f64,
    /// `(f(K_k) - f*) / f*`, NaN when no evaluator is available.
    pub normalized_error: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub iter: usize,
    pub cost: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    /// One record per iterate `K_0 .. K_V` (fewer if the run diverged).
    pub records: Vec<RunRecord>,
    pub final_gains: GainSchedule,
    pub diverged: Option<Divergence>,
}

impl RunTrace {
    /// Copy with wall-clock times zeroed, for byte-stable output.
    pub fn without_timing(&self) -> RunTrace {
        let mut out = self.clone();
        for r in &mut out.records {
            r.seconds = 0.0;
        }
        out
    }

    pub fn last(&self) -> Option<&RunRecord> {
        self.records.last()
    }
}

fn check_step(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::InvalidParameter {
            name: "eta",
            reason: format!("step size must be positive and finite, got {eta}"),
        });
    }
    Ok(())
}

fn is_diverged(cost: f64, initial: f64) -> bool {
    !cost.is_finite() || cost > DIVERGENCE_FACTOR * initial
}

/// Exact gradient descent `K_{k+1} = K_k - η ∇f(K_k)` for `iterations`
/// steps. With `eta = None` the step is `min(c₃, c₄)` at `K₀`.
pub fn run_gd(
    model: &ModelSpec,
    noise: &NoiseSpec,
    k0: &GainSchedule,
    eta: Option<f64>,
    iterations: usize,
) -> Result<RunTrace> {
    k0.check(model)?;
    let evaluator = Evaluator::new(model, noise)?;
    let eta = match eta {
        Some(eta) => eta,
        None => objective::diagnostics(model, noise, k0, evaluator.f_opt)?.eta,
    };
    check_step(eta)?;

    let start = Instant::now();
    let mut gains = k0.clone();
    let mut records = Vec::with_capacity(iterations + 1);
    let mut initial = None;
    let mut diverged = None;
    for k in 0..=iterations {
        let g = objective::gradient(model, noise, &gains);
        let initial_cost = *initial.get_or_insert(g.value);
        records.push(RunRecord {
            iter: k,
            cost: g.value,
            normalized_error: evaluator.normalize(g.value),
            grad_norm: g.norm(),
            seconds: start.elapsed().as_secs_f64(),
        });
        if is_diverged(g.value, initial_cost) {
            diverged = Some(Divergence {
                iter: k,
                cost: g.value,
                threshold: DIVERGENCE_FACTOR * initial_cost,
            });
            break;
        }
        if k < iterations {
            gains = gains.step(&g.per_stage, eta);
        }
    }
    Ok(RunTrace {
        records,
        final_gains: gains,
        diverged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub eta: f64,
    pub iterations: usize,
    pub samples: usize,
    pub master_seed: u64,
    /// Draw a fresh batch every iteration instead of reusing the first one.
    pub resample_each_iter: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            eta: DEFAULT_ETA,
            iterations: 4000,
            samples: 200,
            master_seed: 0,
            resample_each_iter: false,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        check_step(self.eta)?;
        if self.iterations == 0 {
            return Err(Error::InvalidParameter {
                name: "iterations",
                reason: "need at least one iteration".into(),
            });
        }
        if self.samples == 0 {
            return Err(Error::InvalidParameter {
                name: "samples",
                reason: "need at least one trajectory".into(),
            });
        }
        Ok(())
    }
}

/// Where observation batches come from.
pub trait BatchSource {
    fn draw(&self, samples: usize, seed: u64) -> Result<ObservationBatch>;
}

impl BatchSource for Simulator {
    fn draw(&self, samples: usize, seed: u64) -> Result<ObservationBatch> {
        self.sample_batch(samples, seed)
    }
}

/// A pre-recorded batch, returned regardless of the requested size and seed.
impl BatchSource for ObservationBatch {
    fn draw(&self, _samples: usize, _seed: u64) -> Result<ObservationBatch> {
        Ok(self.clone())
    }
}

/// Evaluation-only access to the true cost, for reporting normalized error.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub noise: NoiseSpec,
    pub optimal: GainSchedule,
    pub f_opt: f64,
}

impl Evaluator {
    pub fn new(model: &ModelSpec, noise: &NoiseSpec) -> Result<Self> {
        let optimal = solve_riccati(model, noise)?.gains;
        let f_opt = objective::cost(model, noise, &optimal);
        Ok(Self {
            noise: noise.clone(),
            optimal,
            f_opt,
        })
    }

    pub fn normalize(&self, cost: f64) -> f64 {
        (cost - self.f_opt) / self.f_opt
    }

    pub fn cost(&self, model: &ModelSpec, gains: &GainSchedule) -> f64 {
        objective::cost(model, &self.noise, gains)
    }

    pub fn gain_error(&self, gains: &GainSchedule) -> f64 {
        gains.distance(&self.optimal)
    }
}

/// SGD on the empirical cost. The batch is drawn once from
/// `config.master_seed` and reused, unless `resample_each_iter` is set (then
/// iteration `k` uses seed `derive_seed(master_seed, k)`). With an evaluator
/// the trace records the true cost and normalized error; otherwise the
/// sample cost and NaN. Divergence is judged on the sample cost.
pub fn run_sgd(
    model: &ModelSpec,
    k0: &GainSchedule,
    config: &SgdConfig,
    source: &dyn BatchSource,
    evaluator: Option<&Evaluator>,
) -> Result<RunTrace> {
    config.validate()?;
    k0.check(model)?;
    let start = Instant::now();
    let mut batch = source.draw(config.samples, config.master_seed)?;
    let mut gains = k0.clone();
    let mut records = Vec::with_capacity(config.iterations + 1);
    let mut initial = None;
    let mut diverged = None;
    for k in 0..=config.iterations {
        if config.resample_each_iter && k > 0 {
            batch = source.draw(config.samples, derive_seed(config.master_seed, k as u64))?;
        }
        let estimate = estimate_gradient(model, &gains, &batch)?;
        let initial_cost = *initial.get_or_insert(estimate.sample_cost);
        let (cost, normalized_error) = match evaluator {
            Some(ev) => {
                let f = ev.cost(model, &gains);
                (f, ev.normalize(f))
            }
            None => (estimate.sample_cost, f64::NAN),
        };
        records.push(RunRecord {
            iter: k,
            cost,
            normalized_error,
            grad_norm: estimate.norm(),
            seconds: start.elapsed().as_secs_f64(),
        });
        if is_diverged(estimate.sample_cost, initial_cost) {
            diverged = Some(Divergence {
                iter: k,
                cost: estimate.sample_cost,
                threshold: DIVERGENCE_FACTOR * initial_cost,
            });
            break;
        }
        if k < config.iterations {
            gains = gains.step(&estimate.per_stage, config.eta);
        }
    }
    Ok(RunTrace {
        records,
        final_gains: gains,
        diverged,
    })
}
