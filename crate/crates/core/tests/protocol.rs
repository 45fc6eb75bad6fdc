//! Simulated runs pushed through the correlator and the qualification machine.

use photon_server::clickstream::{window_clicks, window_span, PulseSchedule};
use photon_server::correlator::{
    cross_correlate_binned, cross_correlate_fine, expected_background_coincidences, visibility, zero_and_mean_nonzero,
};
use photon_server::qualifier::{qualification_test, replay, QualificationOutcome, QualifierConfig};
use photon_server::simulator::{simulate_clicks, InitialAtoms, SimConfig};

fn pinned(n: u32, seconds: f64) -> SimConfig {
    SimConfig { initial_atoms: InitialAtoms::Pinned(n), run_duration: seconds, ..SimConfig::default() }
}

#[test]
fn single_atoms_pass_the_selection_rule() {
    let cfg = pinned(1, 2.5);
    let sched = PulseSchedule::default();
    let q = QualifierConfig::default();
    let runs = 300;
    let passed = (0..runs)
        .filter(|&seed| {
            let (s, _) = simulate_clicks(&cfg, &sched, seed);
            replay(&s, &sched, &q).unwrap().qualified
        })
        .count();
    // Zero-lag background coincidences reject about 6% of single-atom windows.
    assert!(passed as f64 / runs as f64 > 0.90, "{passed}/{runs}");
}

#[test]
fn two_atoms_show_a_zero_lag_excess() {
    let cfg = pinned(2, 5.0);
    let sched = PulseSchedule::default();
    let runs = 200;
    let mut excess = 0;
    for seed in 0..runs {
        let (s, _) = simulate_clicks(&cfg, &sched, seed);
        let h = cross_correlate_binned(&window_clicks(&s, &sched), 30).unwrap();
        let (c0, mean, _) = zero_and_mean_nonzero(&h).unwrap();
        if c0 > 0.3 * mean {
            excess += 1;
        }
    }
    assert!(excess as f64 / runs as f64 > 0.95, "{excess}/{runs}");
}

#[test]
fn two_atoms_never_reach_serving() {
    let cfg = pinned(2, 3.0);
    let sched = PulseSchedule::default();
    let q = QualifierConfig::default();
    for seed in 0..50 {
        let (s, _) = simulate_clicks(&cfg, &sched, seed);
        let v = replay(&s, &sched, &q).unwrap();
        assert!(!v.qualified);
        assert_eq!(v.served_clicks, 0);
    }
}

#[test]
fn zero_lag_count_matches_background_expectation() {
    let cfg = pinned(1, 10.0);
    let sched = PulseSchedule::default();
    let mut c0 = 0u64;
    for seed in 0..20 {
        let (s, _) = simulate_clicks(&cfg, &sched, seed);
        c0 += cross_correlate_binned(&window_clicks(&s, &sched), 30).unwrap().zero_lag().unwrap();
    }
    let signal_per_channel = 0.5 * cfg.trigger_rate * cfg.single_atom_click_probability();
    let e = expected_background_coincidences(signal_per_channel, cfg.background_rate, &sched, 200.0);
    let diff = c0 as f64 - e.expected;
    assert!(diff.abs() < 3.0 * e.stderr, "c0 {c0} expected {:.1} ± {:.1}", e.expected, e.stderr);
}

#[test]
fn visibility_is_one_without_background() {
    let cfg = SimConfig { background_rate: 0.0, ..pinned(1, 10.0) };
    let sched = PulseSchedule::default();
    let (s, _) = simulate_clicks(&cfg, &sched, 4);
    let h = cross_correlate_binned(&window_clicks(&s, &sched), 30).unwrap();
    assert_eq!(h.zero_lag(), Some(0));
    assert!(visibility(&h).unwrap().visibility > 0.999);
}

#[test]
fn fine_integral_over_a_trigger_window_equals_zero_lag() {
    let sched = PulseSchedule::default();
    let (s, _) = simulate_clicks(&pinned(2, 1.0), &sched, 8);
    let binned = cross_correlate_binned(&window_clicks(&s, &sched), 30).unwrap();
    let fine = cross_correlate_fine(&s, &sched, 200, 8_000).unwrap();
    let half = sched.trigger.len() as i64;
    assert!(binned.zero_lag().unwrap() > 0);
    assert_eq!(fine.integrate(half), binned.zero_lag().unwrap());
}

#[test]
fn qualification_starts_once_a_single_atom_remains() {
    let cfg = SimConfig { run_duration: 20.0, ..SimConfig::default() };
    let sched = PulseSchedule::default();
    let q = QualifierConfig::default();
    let window = (q.level_window_ms * 1e6) as i64;
    let (mut checked, mut near) = (0, 0);
    for seed in 0..100 {
        let (s, truth) = simulate_clicks(&cfg, &sched, seed);
        let (Some(onset), Some(start)) = (truth.single_atom_onset(), replay(&s, &sched, &q).unwrap().qualifying_t_ns)
        else {
            continue;
        };
        checked += 1;
        // A lone atom from t = 0 needs one full window before the level is known.
        let reference = if onset == 0 { window } else { onset as i64 };
        if (start as i64 - reference).abs() <= window {
            near += 1;
        }
    }
    assert!(checked > 50);
    assert!(near as f64 >= 0.95 * checked as f64, "{near}/{checked}");
}

#[test]
fn loss_is_flagged_within_the_loss_window() {
    let cfg = SimConfig { initial_atoms: InitialAtoms::Fixed(1), run_duration: 15.0, ..SimConfig::default() };
    let sched = PulseSchedule::default();
    let q = QualifierConfig::default();
    let (mut losses, mut prompt) = (0, 0);
    for seed in 0..200 {
        let (s, truth) = simulate_clicks(&cfg, &sched, seed);
        let v = replay(&s, &sched, &q).unwrap();
        let departure = (truth.departures_s[0].unwrap() * 1e9) as u64;
        if let Some(loss) = v.loss_t_ns {
            assert!(loss >= departure, "seed {seed}: loss flagged before the atom left");
            if v.qualified {
                losses += 1;
                if loss - departure <= 30_000_000 {
                    prompt += 1;
                }
            }
        }
    }
    assert!(losses > 50);
    assert!(prompt as f64 >= 0.98 * losses as f64, "{prompt}/{losses}");
}

#[test]
fn qualified_span_histogram_is_antibunched() {
    let cfg = SimConfig { run_duration: 30.0, ..SimConfig::default() };
    let sched = PulseSchedule::default();
    let q = QualifierConfig::default();
    for seed in 0..20 {
        let (s, _) = simulate_clicks(&cfg, &sched, seed);
        let v = replay(&s, &sched, &q).unwrap();
        if let Some((a, b)) = v.single_atom_span() {
            let h = cross_correlate_binned(&window_span(&s, &sched, a, b), 30).unwrap();
            assert_eq!(qualification_test(&h, &q), QualificationOutcome::Pass);
            assert_eq!(v.selection, Some(QualificationOutcome::Pass));
        }
    }
}
