use kfpo::dualsim::{build_stacked, dual_cost_mc, stacked_cost_and_gradient};
use kfpo::instances::{random_gains, random_instance, reference_drift_noise, reference_system, InstanceShape};
use kfpo::linalg::{min_eigenvalue, stacked_frobenius};
use kfpo::objective::{almost_smoothness_gap, cost, diagnostics, gradient, sigma_weight, GainSchedule};
use kfpo::riccati::solve_riccati;
use kfpo::seed::rng_from_seed;
use kfpo::{Mat, ModelSpec, NoiseSpec};

fn central_differences(model: &ModelSpec, noise: &NoiseSpec, gains: &GainSchedule, h: f64) -> Vec<Mat> {
    (0..gains.len())
        .map(|t| {
            let k = gains.stage(t);
            Mat::from_fn(k.nrows(), k.ncols(), |i, j| {
                let mut plus = gains.clone();
                plus.stage_mut(t)[(i, j)] += h;
                let mut minus = gains.clone();
                minus.stage_mut(t)[(i, j)] -= h;
                (cost(model, noise, &plus) - cost(model, noise, &minus)) / (2.0 * h)
            })
        })
        .collect()
}

fn relative_gap(a: &[Mat], b: &[Mat]) -> f64 {
    let diff: Vec<Mat> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    stacked_frobenius(&diff) / stacked_frobenius(b).max(1.0)
}

#[test]
fn gradient_three_ways_on_random_instances() {
    let mut rng = rng_from_seed(100);
    let mut worst = [0.0f64; 3];
    for _ in 0..50 {
        let shape = InstanceShape::random(&mut rng, 4, 5);
        let (model, noise) = random_instance(&mut rng, shape);
        let gains = random_gains(&mut rng, &model, 0.3);
        let exact = gradient(&model, &noise, &gains).per_stage;
        let fd = central_differences(&model, &noise, &gains, 1e-6);
        let rep = build_stacked(&model, &noise, &gains).unwrap();
        let stacked = stacked_cost_and_gradient(&rep, &model, &gains).per_stage;
        worst[0] = worst[0].max(relative_gap(&exact, &fd));
        worst[1] = worst[1].max(relative_gap(&stacked, &exact));
        worst[2] = worst[2].max(relative_gap(&stacked, &fd));
    }
    assert!(worst.iter().all(|&w| w < 1e-6), "{worst:?}");
}

/// Cost from the exact second moments of the dual state, with every
/// transition written out as an explicit product of closed-loop transposes.
fn dual_moment_cost(model: &ModelSpec, noise: &NoiseSpec, gains: &GainSchedule) -> f64 {
    let horizon = model.horizon();
    let sigma = sigma_weight(model);
    let n = model.state_dim();
    // psi(t, k): s_k ↦ s_t contribution, steps k..t-1 with step j using A_{M-j-1}ᵀ.
    let psi = |t: usize, k: usize| {
        let mut out = Mat::identity(n, n);
        for j in k..t {
            out = gains.closed_loop(model, horizon - j - 1).transpose() * out;
        }
        out
    };
    let second_moment = |t: usize| {
        let mut cov = psi(t, 0) * &sigma * psi(t, 0).transpose();
        for k in 0..t {
            if k + 2 <= horizon {
                cov += psi(t, k + 1) * &sigma * psi(t, k + 1).transpose();
            }
        }
        cov
    };
    let c = model.c();
    let mut total = 0.0;
    for t in 0..horizon {
        let k = gains.stage(horizon - t - 1);
        let q = noise.q(horizon - t - 1);
        let s_mat = c * q * c.transpose() + noise.r(horizon - t);
        let weight = q + k * s_mat * k.transpose() - k * c * q - q * c.transpose() * k.transpose();
        total += (weight * second_moment(t)).trace();
    }
    total + (noise.p0() * second_moment(horizon)).trace()
}

#[test]
fn dual_moments_reproduce_the_cost() {
    let mut rng = rng_from_seed(101);
    for _ in 0..30 {
        let mut shape = InstanceShape::random(&mut rng, 4, 3);
        shape.horizon = shape.horizon.min(3);
        let (model, noise) = random_instance(&mut rng, shape);
        let gains = random_gains(&mut rng, &model, 0.4);
        let f = cost(&model, &noise, &gains);
        let dual = dual_moment_cost(&model, &noise, &gains);
        assert!((f - dual).abs() < 1e-10 * (1.0 + f), "{f} vs {dual}");
    }
}

#[test]
fn zero_control_dual_reduction() {
    let (_, noise3) = reference_system();
    let model = kfpo::instances::reference_model(1);
    let noise = NoiseSpec::constant(
        &model,
        noise3.q(0).clone(),
        noise3.r(1).clone(),
        Mat::identity(3, 3) * 0.3,
        noise3.x0_mean().clone(),
    )
    .unwrap();
    let zero = GainSchedule::zeros(&model);
    let a = model.a();
    let expected = ((noise.q(0) + a * noise.p0() * a.transpose()) * sigma_weight(&model)).trace();
    assert!((cost(&model, &noise, &zero) - expected).abs() < 1e-13);
    let mc = dual_cost_mc(&model, &noise, &zero, 200_000, 5).unwrap();
    assert!((mc.mean - expected).abs() < 4.0 * mc.std_error, "{mc:?} vs {expected}");
}

#[test]
fn duality_on_random_instances() {
    let mut rng = rng_from_seed(102);
    for rep in 0..20 {
        let shape = InstanceShape::random(&mut rng, 3, 4);
        let (model, noise) = random_instance(&mut rng, shape);
        let gains = random_gains(&mut rng, &model, 0.3);
        let f = cost(&model, &noise, &gains);
        let mc = dual_cost_mc(&model, &noise, &gains, 40_000, rep).unwrap();
        assert!((mc.mean - f).abs() < 4.0 * mc.std_error, "{mc:?} vs {f}");
    }
}

#[test]
fn smoothness_identity_on_random_pairs() {
    let mut rng = rng_from_seed(103);
    for _ in 0..100 {
        let shape = InstanceShape::random(&mut rng, 4, 5);
        let (model, noise) = random_instance(&mut rng, shape);
        let k = random_gains(&mut rng, &model, 0.5);
        let k2 = random_gains(&mut rng, &model, 0.5);
        let gap = almost_smoothness_gap(&model, &noise, &k, &k2);
        assert!(gap.abs() < 1e-8 * (1.0 + cost(&model, &noise, &k)), "{gap}");
    }
    let (model, noise) = reference_system();
    let opt = solve_riccati(&model, &noise).unwrap().gains;
    for _ in 0..20 {
        let k = random_gains(&mut rng, &model, 0.5);
        let gap = almost_smoothness_gap(&model, &noise, &k, &opt);
        assert!(gap.abs() < 1e-8 * (1.0 + cost(&model, &noise, &k)));
    }
}

#[test]
fn gradient_dominance_sandwich_and_quadratic_growth() {
    for noise_kind in 0..2 {
        let (model, constant) = reference_system();
        let noise = if noise_kind == 0 {
            constant
        } else {
            reference_drift_noise(&model)
        };
        let opt = solve_riccati(&model, &noise).unwrap().gains;
        let f_opt = cost(&model, &noise, &opt);
        let sigma_min = min_eigenvalue(&sigma_weight(&model));
        let r_min = (1..=model.horizon())
            .map(|t| min_eigenvalue(noise.r(t)))
            .fold(f64::INFINITY, f64::min);
        let mut rng = rng_from_seed(104 + noise_kind);
        for _ in 0..100 {
            let k = random_gains(&mut rng, &model, 0.3);
            let g = gradient(&model, &noise, &k);
            let d = diagnostics(&model, &noise, &k, f_opt).unwrap();
            let gap = g.value - f_opt;
            let grad_sq: f64 = g.per_stage.iter().map(|m| m.norm_squared()).sum();
            let e_sq: f64 = g.e.iter().map(|m| m.norm_squared()).sum();
            assert!(gap <= d.c1 * grad_sq, "upper: {gap} > {}", d.c1 * grad_sq);
            assert!(gap >= d.c2 * e_sq, "lower: {gap} < {}", d.c2 * e_sq);
            let dist = k.distance(&opt);
            assert!(gap >= sigma_min * r_min * dist * dist);
        }
    }
}

#[test]
fn riccati_gains_minimize_the_cost_numerically() {
    // Independent minimizer: Barzilai-Borwein gradient iteration on f from
    // K = 0, with no knowledge of the Riccati structure.
    let (model, noise) = reference_system();
    let opt = solve_riccati(&model, &noise).unwrap().gains;
    let mut k = GainSchedule::zeros(&model);
    let mut g = gradient(&model, &noise, &k).per_stage;
    let mut step = 1e-3;
    for _ in 0..100_000 {
        if stacked_frobenius(&g) < 1e-12 {
            break;
        }
        let next = k.step(&g, step);
        let g_next = gradient(&model, &noise, &next).per_stage;
        let (mut ss, mut sy) = (0.0, 0.0);
        for t in 0..k.len() {
            let s_t = next.stage(t) - k.stage(t);
            let y_t = &g_next[t] - &g[t];
            ss += s_t.norm_squared();
            sy += s_t.dot(&y_t);
        }
        if sy > 0.0 {
            step = ss / sy;
        }
        k = next;
        g = g_next;
    }
    assert!(k.distance(&opt) < 1e-6, "{}", k.distance(&opt));
}
