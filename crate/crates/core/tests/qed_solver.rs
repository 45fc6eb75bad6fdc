use photon_server::qed::{
    build_model, emission_probability, fit_coupling_scale, propagate, pulse_emission_probability, DensityState,
    PulseShape, QedParams, FIT_TOLERANCE, G0, UU,
};

fn paper() -> (QedParams, PulseShape) {
    (QedParams::default(), PulseShape::default())
}

#[test]
fn trace_is_preserved_over_a_full_pulse() {
    let (params, pulse) = paper();
    let model = build_model(params, pulse).unwrap();
    let traj = propagate(&model, DensityState::basis(UU), 1.0, pulse.duration_ns).unwrap();
    assert!(traj.max_trace_drift < 1e-8, "drift {}", traj.max_trace_drift);
    for pops in &traj.populations {
        assert!(pops.iter().all(|&p| p >= -1e-9), "{pops:?}");
    }
    traj.final_state.validate().unwrap();
}

#[test]
fn emitted_photons_account_for_the_dark_state_population() {
    let (params, pulse) = paper();
    let model = build_model(params, pulse).unwrap();
    let traj = propagate(&model, DensityState::basis(UU), 1.0, pulse.duration_ns).unwrap();
    let g0 = traj.populations.last().unwrap()[G0];
    assert!((traj.cumulative_cavity + traj.cumulative_free_g0 - g0).abs() < 1e-6);
    assert!((emission_probability(&traj) - traj.cumulative_cavity).abs() < 1e-6);
}

#[test]
fn halving_the_step_leaves_the_emission_probability_unchanged() {
    let (params, pulse) = paper();
    let coarse = pulse_emission_probability(params, pulse, 1.0).unwrap();
    let fine = pulse_emission_probability(params, pulse, 0.5).unwrap();
    assert!((coarse - fine).abs() < 1e-6, "{coarse} vs {fine}");
    assert!(coarse >= 0.5);
}

#[test]
fn emission_grows_with_coupling_scale() {
    let (params, pulse) = paper();
    let scan: Vec<f64> = (1..=10)
        .map(|i| pulse_emission_probability(params.with_coupling_scale(i as f64 / 10.0), pulse, 1.0).unwrap())
        .collect();
    assert!(scan.windows(2).all(|w| w[1] >= w[0]), "{scan:?}");
}

#[test]
fn fit_reaches_nine_percent() {
    let (params, pulse) = paper();
    let s = fit_coupling_scale(params, pulse, 0.09, 1.0).unwrap();
    assert!(s > 0.0 && s < 1.0);
    let p = pulse_emission_probability(params.with_coupling_scale(s), pulse, 1.0).unwrap();
    assert!((p - 0.09).abs() < FIT_TOLERANCE, "p = {p}");
}

#[test]
fn fitted_scale_increases_with_target() {
    let (params, pulse) = paper();
    let scales: Vec<f64> =
        [0.03, 0.09, 0.2, 0.4].iter().map(|&target| fit_coupling_scale(params, pulse, target, 1.0).unwrap()).collect();
    assert!(scales.windows(2).all(|w| w[1] > w[0]), "{scales:?}");
}

#[test]
fn fit_at_full_coupling_is_a_fixed_point() {
    let (params, pulse) = paper();
    let p_max = pulse_emission_probability(params, pulse, 1.0).unwrap();
    let s = fit_coupling_scale(params, pulse, p_max, 1.0).unwrap();
    assert!((s - 1.0).abs() < 1e-3);
    assert!(fit_coupling_scale(params, pulse, (p_max + 1.0) / 2.0, 1.0).is_err());
}
