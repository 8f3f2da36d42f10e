use eddy_stommel::integrator::{
    integrate_final, residual_sweep, simulate_trajectory, weak_convergence_probe, IntegratorConfig, PRODUCTION_DT,
};
use eddy_stommel::model::{GaussianSystem, Sde};
use eddy_stommel::noise::GaussianStream;
use eddy_stommel::{ModelParams, State, StreamSeed, Variant};

#[test]
fn residuals_stay_below_1e9_over_a_million_steps() {
    let p = ModelParams::default();
    for variant in Variant::ALL {
        let cfg = IntegratorConfig::for_variant(variant);
        let r = residual_sweep(variant, &State::at(variant, 0.97, 0.09), 1_000_000, &cfg, &p, StreamSeed::new(11)).unwrap();
        assert!(r <= 1e-9, "{variant}: max residual {r:e}");
    }
}

#[test]
fn eddy_velocity_chain_has_exact_backward_euler_variance() {
    // v' = (v + s dW) / (1 + h/eps) has stationary variance (2/eps) h / ((1 + h/eps)^2 - 1).
    let p = ModelParams::default();
    let h = PRODUCTION_DT;
    let a = 1.0 + h / p.eps();
    let exact = (2.0 / p.eps()) * h / (a * a - 1.0);

    let cfg = IntegratorConfig::for_variant(Variant::Full).with_stride(10);
    let n_steps = 10_000_000u64;
    let t = simulate_trajectory(
        Variant::Full,
        &State::full(0.97, 0.09, 0.0, 0.0, 0.0),
        (0.0, n_steps as f64 * h),
        &cfg,
        &p,
        StreamSeed::new(21),
    )
    .unwrap();
    // skip the first ~20 relaxation times of v
    let v: Vec<f64> = t.component(2).skip(200).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    assert!((var / exact - 1.0).abs() < 0.02, "empirical {var} vs exact {exact}");
}

/// One step of an anticipating scheme that evaluates the diffusion at the new point.
fn anticipating_step(sys: &GaussianSystem, u: [f64; 2], dw: &[f64; 3], dt: f64) -> [f64; 2] {
    let mut xk = u;
    for _ in 0..30 {
        let b = sys.drift(&xk);
        let n = sys.noise(&xk, dw);
        xk = [u[0] + dt * b[0] + n[0], u[1] + dt * b[1] + n[1]];
    }
    xk
}

fn euler_maruyama_step(sys: &GaussianSystem, u: [f64; 2], dw: &[f64; 3], dt: f64) -> [f64; 2] {
    let b = sys.drift(&u);
    let n = sys.noise(&u, dw);
    [u[0] + dt * b[0] + n[0], u[1] + dt * b[1] + n[1]]
}

fn mean_var(v: &[f64]) -> (f64, f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var, (var / n).sqrt())
}

#[test]
fn multiplicative_noise_is_ito() {
    // Large eps and moderate P make the Ito correction g^2 y of order one.
    let p = ModelParams::builder().eps(0.01).p_e(10.57).build().unwrap();
    let sys = GaussianSystem::new(&p);
    let members = 2000u64;
    let t_end = 1.0;
    let s0 = State::reduced(0.97, 0.3);

    let cfg = IntegratorConfig::for_variant(Variant::Gaussian).with_dt(2e-4);
    let n_be = (t_end / cfg.dt) as u64;
    let be: Vec<f64> = (0..members)
        .map(|m| integrate_final(Variant::Gaussian, &s0, n_be, &cfg, &p, StreamSeed::member(1, m)).unwrap().0.y())
        .collect();

    let run_reference = |dt: f64, step: &dyn Fn([f64; 2], &[f64; 3]) -> [f64; 2], key: u64| -> Vec<f64> {
        let n = (t_end / dt) as u64;
        (0..members)
            .map(|m| {
                let mut g = GaussianStream::new(StreamSeed::member(key, m));
                let mut u = [s0.x(), s0.y()];
                for _ in 0..n {
                    let dw: [f64; 3] = g.fill_scaled(dt.sqrt());
                    u = step(u, &dw);
                }
                u[1]
            })
            .collect()
    };
    let em_dt = 2e-5;
    let em = run_reference(em_dt, &|u, dw| euler_maruyama_step(&sys, u, dw, em_dt), 2);
    let anticipating = run_reference(2e-4, &|u, dw| anticipating_step(&sys, u, dw, 2e-4), 3);

    let (m_be, v_be, se_be) = mean_var(&be);
    let (m_em, v_em, se_em) = mean_var(&em);
    let (m_an, v_an, se_an) = mean_var(&anticipating);
    let se_ref = (se_be.powi(2) + se_em.powi(2)).sqrt();
    assert!((m_be - m_em).abs() < 4.0 * se_ref, "BE mean {m_be} vs EM {m_em} (se {se_ref})");
    assert!((v_be / v_em - 1.0).abs() < 0.15, "BE var {v_be} vs EM {v_em}");
    let se_an_diff = (se_be.powi(2) + se_an.powi(2)).sqrt();
    assert!(
        (m_an - m_be).abs() > 8.0 * se_an_diff,
        "anticipating mean {m_an} should differ from Ito {m_be}"
    );
    assert!((v_an / v_be - 1.0).abs() > 0.2, "anticipating var {v_an} vs Ito {v_be}");
}

#[test]
fn averaged_statistics_agree_at_two_step_sizes() {
    let p = ModelParams::default();
    let rows = weak_convergence_probe(
        Variant::Averaged,
        &State::reduced(0.97, 0.09),
        0.05,
        &[4e-6, 2e-6],
        200,
        &p,
        5,
    )
    .unwrap();
    let (a, b) = (&rows[0], &rows[1]);
    let se = (a.mean_x_se.powi(2) + b.mean_x_se.powi(2)).sqrt();
    assert!((a.mean_x - b.mean_x).abs() < 2.0 * se.max(1e-12), "{a:?} vs {b:?}");
}

#[test]
fn zero_noise_probe_is_independent_of_member_count() {
    let p = ModelParams::builder().sigma_x(0.0).sigma_y(0.0).build().unwrap();
    let s0 = State::reduced(0.9, 0.3);
    let a = weak_convergence_probe(Variant::Averaged, &s0, 0.01, &[1e-5], 100, &p, 1).unwrap();
    let b = weak_convergence_probe(Variant::Averaged, &s0, 0.01, &[1e-5], 150, &p, 2).unwrap();
    assert!((a[0].mean_x - b[0].mean_x).abs() <= 1e-14);
    assert!(a[0].var_x < 1e-28 && b[0].var_x < 1e-28);
}

#[test]
fn ten_time_units_give_fifty_thousand_samples() {
    let p = ModelParams::default();
    let cfg = IntegratorConfig::for_variant(Variant::Averaged);
    let t = simulate_trajectory(Variant::Averaged, &State::reduced(0.0, 0.0), (0.0, 10.0), &cfg, &p, StreamSeed::new(3))
        .unwrap();
    assert_eq!(t.len(), 50_000);
    assert!((t.sample_dt() - 2e-4).abs() < 1e-18);
    assert!((t.times[49_999] - 10.0).abs() < 1e-9);
}
