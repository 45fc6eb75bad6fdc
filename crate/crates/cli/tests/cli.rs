use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use photon_server::clickstream::{read_clicks, Slot};
use photon_server::{Format, PulseSchedule, RunTruth};
use photon_server_cli::commands::{read_manifest, Manifest};
use tempfile::TempDir;

fn spserver(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spserver")).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn short_runs(dir: &Path) -> PathBuf {
    write_config(dir, "n_runs = 3\nseed = 11\nsim.run_duration = 4.0\n")
}

fn file_names(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    v.sort();
    v
}

fn read_hist(path: &Path) -> Vec<(i64, u64)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[1].parse().unwrap())
        })
        .collect()
}

#[test]
fn simulate_writes_one_stream_and_truth_per_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = short_runs(tmp.path());
    ok(&spserver(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "sim"], tmp.path()));
    assert_eq!(
        file_names(&tmp.path().join("sim")),
        [
            "manifest.json",
            "run_0000.ptag",
            "run_0000.truth.json",
            "run_0001.ptag",
            "run_0001.truth.json",
            "run_0002.ptag",
            "run_0002.truth.json"
        ]
    );
    let Manifest::Simulate(m) = read_manifest(&tmp.path().join("sim/manifest.json")).unwrap() else {
        panic!("wrong manifest kind")
    };
    assert_eq!(m.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), [11, 12, 13]);
    let truth = RunTruth::from_json(&fs::read_to_string(tmp.path().join("sim/run_0001.truth.json")).unwrap()).unwrap();
    assert_eq!(truth.n_signal + truth.n_recycle + truth.n_background, m.runs[1].n_clicks);
}

#[test]
fn flags_override_the_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = short_runs(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(&spserver(
        &["simulate", "--config", c, "--runs", "1", "--seed", "5", "--format", "csv", "--out", "s"],
        tmp.path(),
    ));
    assert_eq!(file_names(&tmp.path().join("s")), ["manifest.json", "run_0000.csv", "run_0000.truth.json"]);
    let text = fs::read_to_string(tmp.path().join("s/run_0000.csv")).unwrap();
    assert!(text.starts_with("t_ns,channel\n"));
}

#[test]
fn csv_and_ptag_streams_analyze_identically() {
    let tmp = TempDir::new().unwrap();
    let cfg = short_runs(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(&spserver(&["simulate", "--config", c, "--out", "bin"], tmp.path()));
    ok(&spserver(&["simulate", "--config", c, "--format", "csv", "--out", "text"], tmp.path()));
    ok(&spserver(&["analyze", "--config", c, "--out", "a_bin", "bin"], tmp.path()));
    ok(&spserver(&["analyze", "--config", c, "--out", "a_text", "text"], tmp.path()));
    for f in ["run_0000.hist.csv", "merged.hist.csv", "merged_fine.hist.csv"] {
        assert_eq!(
            fs::read(tmp.path().join("a_bin").join(f)).unwrap(),
            fs::read(tmp.path().join("a_text").join(f)).unwrap()
        );
    }
}

#[test]
fn merged_histogram_is_the_sum_of_run_histograms() {
    let tmp = TempDir::new().unwrap();
    let cfg = short_runs(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(&spserver(&["simulate", "--config", c, "--out", "sim"], tmp.path()));
    ok(&spserver(&["analyze", "--config", c, "--out", "an", "sim"], tmp.path()));
    let merged = read_hist(&tmp.path().join("an/merged.hist.csv"));
    let mut sum = vec![0u64; merged.len()];
    for i in 0..3 {
        for (k, (_, n)) in read_hist(&tmp.path().join(format!("an/run_{i:04}.hist.csv"))).into_iter().enumerate() {
            sum[k] += n;
        }
    }
    assert_eq!(merged.iter().map(|x| x.1).collect::<Vec<_>>(), sum);
    assert_eq!(merged.first().unwrap().0, -30);
}

#[test]
fn empty_stream_flags_undefined_visibility() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("empty.ptag"), b"").unwrap();
    ok(&spserver(&["analyze", "--out", "an", "empty.ptag"], tmp.path()));
    assert!(read_hist(&tmp.path().join("an/empty.hist.csv")).iter().all(|&(_, n)| n == 0));
    let Manifest::Analyze(m) = read_manifest(&tmp.path().join("an/manifest.json")).unwrap() else { panic!() };
    assert!(m.runs[0].visibility_error.is_some());
    assert!(m.summary.visibility.is_none());
}

#[test]
fn malformed_stream_fails_alone() {
    let tmp = TempDir::new().unwrap();
    let cfg = short_runs(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(&spserver(&["simulate", "--config", c, "--runs", "2", "--out", "sim"], tmp.path()));
    fs::write(tmp.path().join("sim/broken.ptag"), [0u8; 10]).unwrap();
    let out = spserver(
        &["analyze", "--config", c, "--out", "an", "sim/run_0000.ptag", "sim/broken.ptag", "sim/run_0001.ptag"],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.ptag"));
    assert!(tmp.path().join("an/run_0001.hist.csv").exists());
    let Manifest::Analyze(m) = read_manifest(&tmp.path().join("an/manifest.json")).unwrap() else { panic!() };
    assert_eq!(m.n_failed, 1);
    assert_eq!(m.summary.n_runs, 2);
    assert!(m.runs[1].error.as_deref().unwrap().contains("offset 9"));
}

#[test]
fn exit_codes_distinguish_failures() {
    let tmp = TempDir::new().unwrap();
    let bad = write_config(tmp.path(), "sim.p_gen_typo = 0.1\n");
    assert_eq!(spserver(&["simulate", "--config", bad.to_str().unwrap()], tmp.path()).status.code(), Some(2));
    let invalid = write_config(tmp.path(), "sim.p_gen = 2.0\n");
    assert_eq!(spserver(&["simulate", "--config", invalid.to_str().unwrap()], tmp.path()).status.code(), Some(2));
    assert_eq!(spserver(&["simulate", "--config", "missing.toml"], tmp.path()).status.code(), Some(3));
    assert_eq!(spserver(&["qualify", "--out", "q", "nowhere.ptag"], tmp.path()).status.code(), Some(3));
    assert_eq!(spserver(&["qed", "--fit", "0.99", "--out", "q"], tmp.path()).status.code(), Some(4));
}

#[test]
fn qualify_writes_verdicts_and_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "n_runs = 4\nsim.run_duration = 6.0\nsim.initial_atoms = \"pinned(1)\"\n");
    let c = cfg.to_str().unwrap();
    ok(&spserver(&["simulate", "--config", c, "--out", "sim"], tmp.path()));
    ok(&spserver(&["qualify", "--config", c, "--out", "q", "sim"], tmp.path()));
    let verdict: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("q/run_0000.verdict.json")).unwrap()).unwrap();
    for key in ["qualified", "visibility", "serving_s", "served_clicks", "loss_t_ns", "reject_reason"] {
        assert!(verdict.get(key).is_some(), "{key}");
    }
    let Manifest::Qualify(m) = read_manifest(&tmp.path().join("q/manifest.json")).unwrap() else { panic!() };
    assert_eq!(m.summary.n_runs, 4);
    assert_eq!(m.summary.qualified, 4);
    assert!(m.summary.serving_s_total > 4.0 * 4.0);
}

#[test]
fn qed_fit_reaches_target() {
    let tmp = TempDir::new().unwrap();
    ok(&spserver(&["qed", "--fit", "0.09", "--out", "qed"], tmp.path()));
    let Manifest::Qed(m) = read_manifest(&tmp.path().join("qed/manifest.json")).unwrap() else { panic!() };
    let fit = m.fit.unwrap();
    assert!((fit.emission_probability - 0.09).abs() < 1e-3);
    assert!(m.emission_probability > 0.5);
    let csv = fs::read_to_string(tmp.path().join("qed/trajectory.csv")).unwrap();
    assert!(csv.starts_with("t_ns,rho_uu,rho_ee,rho_g1,rho_g0,flux_per_ns\n"));
    assert_eq!(csv.lines().count(), 4002);
}

#[test]
fn report_combines_batches() {
    let tmp = TempDir::new().unwrap();
    let cfg = short_runs(tmp.path());
    let c = cfg.to_str().unwrap();
    ok(&spserver(&["simulate", "--config", c, "--out", "sim"], tmp.path()));
    ok(&spserver(&["qualify", "--config", c, "--out", "q_all", "sim"], tmp.path()));
    ok(&spserver(&["qualify", "--config", c, "--out", "q_a", "sim/run_0000.ptag", "sim/run_0001.ptag"], tmp.path()));
    ok(&spserver(&["qualify", "--config", c, "--out", "q_b", "sim/run_0002.ptag"], tmp.path()));
    ok(&spserver(&["report", "--out", "rep", "sim", "q_a", "q_b"], tmp.path()));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("rep/report.json")).unwrap()).unwrap();
    let Manifest::Qualify(all) = read_manifest(&tmp.path().join("q_all/manifest.json")).unwrap() else { panic!() };
    let q = &report["qualify"];
    assert_eq!(report["simulated_runs"], 3);
    assert_eq!(q["n_runs"], 3);
    assert_eq!(q["qualified"], all.summary.qualified);
    assert_eq!(q["histogram"]["counts"], serde_json::to_value(&all.summary.histogram.counts).unwrap());
}

#[test]
fn signal_rate_matches_reference_event_count() {
    // Trigger-window detections per second of single-atom time, scaled to the
    // 4379 s of single-atom data that held 4.2e6 detection events.
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "n_runs = 20\nseed = 100\n");
    ok(&spserver(&["simulate", "--config", cfg.to_str().unwrap(), "--out", "sim"], tmp.path()));
    let sched = PulseSchedule::default();
    let (mut events, mut seconds) = (0u64, 0.0);
    for i in 0..20 {
        let dir = tmp.path().join("sim");
        let truth =
            RunTruth::from_json(&fs::read_to_string(dir.join(format!("run_{i:04}.truth.json"))).unwrap()).unwrap();
        let stream = read_clicks(fs::File::open(dir.join(format!("run_{i:04}.ptag"))).unwrap(), Format::Ptag).unwrap();
        seconds += truth.single_atom_availability();
        events += stream
            .clicks()
            .iter()
            .filter(|c| matches!(sched.classify(c.t), Slot::Trigger(_)) && truth.atom_count_at(c.t) == 1)
            .count() as u64;
    }
    let scaled = events as f64 / seconds * 4379.0;
    assert!((scaled - 4.2e6).abs() < 0.1 * 4.2e6, "{scaled:.3e}");
}
