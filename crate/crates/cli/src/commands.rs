//! The subcommands. Each writes its outputs plus a `manifest.json` into the
//! output directory; identical inputs give byte-identical files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use photon_server::clickstream::{read_clicks, write_clicks, StreamError};
use photon_server::correlator::CorrelationHistogram;
use photon_server::qed::{
    build_model, emission_probability, fit_coupling_scale, propagate, pulse_emission_probability, DensityState, UU,
};
use photon_server::qualifier::QualificationOutcome;
use photon_server::simulator::simulate_run;
use photon_server::{ClickStream, Format, PulseShape, QedParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::batch::{self, AnalyzeSummary, QualifySummary};
use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Manifest {
    Simulate(SimulateManifest),
    Analyze(AnalyzeManifest),
    Qualify(QualifyManifest),
    Qed(QedManifest),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulatedRun {
    pub index: u64,
    pub seed: u64,
    pub stream: String,
    pub truth: String,
    pub duration_ns: u64,
    pub n_clicks: u64,
    pub n_signal: u64,
    pub n_recycle: u64,
    pub n_background: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SimulateManifest {
    pub config: serde_json::Value,
    pub runs: Vec<SimulatedRun>,
    pub n_clicks: u64,
}

/// Per-stream line of an analyze or qualify manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StreamResult {
    pub stream: String,
    pub output: Option<String>,
    pub error: Option<String>,
    pub n_clicks: Option<u64>,
    pub visibility: Option<f64>,
    pub visibility_error: Option<String>,
    pub qualified: Option<bool>,
    pub selection_passed: Option<bool>,
}

impl StreamResult {
    fn new(stream: &StreamInput) -> Self {
        StreamResult {
            stream: stream.path.display().to_string(),
            output: None,
            error: None,
            n_clicks: None,
            visibility: None,
            visibility_error: None,
            qualified: None,
            selection_passed: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalyzeManifest {
    pub config: serde_json::Value,
    pub runs: Vec<StreamResult>,
    pub n_failed: usize,
    pub summary: AnalyzeSummary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QualifyManifest {
    pub config: serde_json::Value,
    pub runs: Vec<StreamResult>,
    pub n_failed: usize,
    pub summary: QualifySummary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CouplingFit {
    pub target: f64,
    pub coupling_scale: f64,
    pub emission_probability: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QedManifest {
    pub params: QedParams,
    pub pulse: PulseShape,
    pub dt_ns: f64,
    pub trajectory: String,
    pub emission_probability: f64,
    pub cumulative_cavity: f64,
    pub cumulative_free_g0: f64,
    pub max_trace_drift: f64,
    pub final_populations: [f64; 4],
    pub fit: Option<CouplingFit>,
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("manifest serializes");
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn write_histogram(path: &Path, h: &CorrelationHistogram) -> Result<(), CliError> {
    let mut w = create(path)?;
    h.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Simulates `cfg.n_runs` runs into `cfg.out`: one stream and one truth
/// file per run, plus the manifest.
pub fn simulate(cfg: &ExperimentConfig) -> Result<SimulateManifest, CliError> {
    let sim = cfg.sim_config()?;
    prepare_out(&cfg.out)?;
    let runs = (0..cfg.n_runs)
        .into_par_iter()
        .map(|index| {
            let seed = batch::run_seed(cfg, index);
            let (stream, truth) = simulate_run(&sim, &cfg.schedule, seed);
            let name = format!("run_{index:04}");
            let stream_file = format!("{name}.{}", cfg.format.extension());
            let truth_file = format!("{name}.truth.json");
            let path = cfg.out.join(&stream_file);
            let mut w = create(&path)?;
            write_clicks(&stream, &mut w, cfg.format).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
            write_bytes(&cfg.out.join(&truth_file), (truth.to_json() + "\n").as_bytes())?;
            Ok(SimulatedRun {
                index,
                seed,
                stream: stream_file,
                truth: truth_file,
                duration_ns: stream.duration(),
                n_clicks: stream.len() as u64,
                n_signal: truth.n_signal,
                n_recycle: truth.n_recycle,
                n_background: truth.n_background,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let manifest = SimulateManifest { config: cfg.to_record(), n_clicks: runs.iter().map(|r| r.n_clicks).sum(), runs };
    write_json(&cfg.out.join(MANIFEST), &Manifest::Simulate(manifest.clone()))?;
    Ok(manifest)
}

/// A stream file to read, with its run duration when a simulate manifest
/// records it.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamInput {
    pub path: PathBuf,
    pub duration_ns: Option<u64>,
}

impl StreamInput {
    fn name(&self) -> String {
        let file = self.path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default();
        file.strip_suffix(".ptag").or_else(|| file.strip_suffix(".csv")).unwrap_or(&file).to_string()
    }

    pub fn read(&self) -> Result<ClickStream, CliError> {
        let file = File::open(&self.path).map_err(|e| CliError::io(&self.path, e))?;
        let stream = read_clicks(BufReader::new(file), Format::from_path(&self.path)).map_err(|e| match e {
            StreamError::Io(source) => CliError::io(&self.path, source),
            other => CliError::Analysis(format!("{}: {other}", self.path.display())),
        })?;
        match self.duration_ns {
            Some(d) => stream.with_duration(d).map_err(|e| CliError::Analysis(format!("{}: {e}", self.path.display()))),
            None => Ok(stream),
        }
    }
}

fn is_stream_file(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    (name.ends_with(".ptag") || name.ends_with(".csv"))
        && !name.ends_with(".hist.csv")
        && !name.ends_with("trajectory.csv")
}

/// Expands the command-line inputs: a directory with a simulate manifest
/// contributes its runs in order, any other directory its stream files in
/// name order, and a file itself.
pub fn resolve_streams(inputs: &[PathBuf]) -> Result<Vec<StreamInput>, CliError> {
    let mut out = Vec::new();
    for input in inputs {
        if !input.is_dir() {
            out.push(StreamInput { path: input.clone(), duration_ns: None });
            continue;
        }
        let manifest_path = input.join(MANIFEST);
        if manifest_path.is_file() {
            if let Ok(Manifest::Simulate(m)) = read_manifest(&manifest_path) {
                out.extend(
                    m.runs
                        .iter()
                        .map(|r| StreamInput { path: input.join(&r.stream), duration_ns: Some(r.duration_ns) }),
                );
                continue;
            }
        }
        let mut files: Vec<PathBuf> = fs::read_dir(input)
            .map_err(|e| CliError::io(input, e))?
            .map(|entry| entry.map(|e| e.path()).map_err(|e| CliError::io(input, e)))
            .collect::<Result<_, _>>()?;
        files.retain(|p| p.is_file() && is_stream_file(p));
        files.sort();
        out.extend(files.into_iter().map(|path| StreamInput { path, duration_ns: None }));
    }
    if out.is_empty() {
        return Err(CliError::Config("no click streams found in the given inputs".into()));
    }
    Ok(out)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Analysis(format!("{}: {e}", path.display())))
}

// Per-file failures are recorded and the batch continues; the first one
// becomes the command's error after all outputs are written.
fn first_failure(results: &[Result<(), CliError>], total: usize) -> Option<CliError> {
    let n = results.iter().filter(|r| r.is_err()).count();
    results.iter().find_map(|r| r.as_ref().err()).map(|first| {
        let msg = format!("{n} of {total} streams failed; first: {first}");
        match first {
            CliError::Io { path, source } => {
                CliError::Io { path: path.clone(), source: std::io::Error::new(source.kind(), msg) }
            }
            CliError::Config(_) => CliError::Config(msg),
            CliError::Analysis(_) => CliError::Analysis(msg),
        }
    })
}

/// Correlates each stream over the whole run: per-run histogram and
/// visibility files, then the merged histograms and manifest.
pub fn analyze(cfg: &ExperimentConfig, inputs: &[PathBuf]) -> Result<AnalyzeManifest, CliError> {
    let streams = resolve_streams(inputs)?;
    prepare_out(&cfg.out)?;
    let per_run: Vec<(StreamResult, Option<batch::RunAnalysis>, Result<(), CliError>)> = streams
        .par_iter()
        .map(|input| {
            let mut line = StreamResult::new(input);
            let result = input.read().and_then(|stream| {
                let a = batch::analyze_stream(&stream, cfg);
                let name = input.name();
                let hist = format!("{name}.hist.csv");
                write_histogram(&cfg.out.join(&hist), &a.histogram)?;
                write_json(&cfg.out.join(format!("{name}.visibility.json")), &a)?;
                line.output = Some(hist);
                line.n_clicks = Some(a.n_clicks as u64);
                line.visibility = a.visibility.map(|r| r.visibility);
                line.visibility_error = a.visibility_error.clone();
                Ok(a)
            });
            match result {
                Ok(a) => (line, Some(a), Ok(())),
                Err(e) => {
                    line.error = Some(e.to_string());
                    (line, None, Err(e))
                }
            }
        })
        .collect();
    let summary = AnalyzeSummary::from_runs(per_run.iter().filter_map(|r| r.1.as_ref()), cfg);
    write_histogram(&cfg.out.join("merged.hist.csv"), &summary.histogram)?;
    write_histogram(&cfg.out.join("merged_fine.hist.csv"), &summary.fine_histogram)?;
    let (lines, _, results): (Vec<_>, Vec<_>, Vec<_>) = multiunzip(per_run);
    let n_failed = results.iter().filter(|r| r.is_err()).count();
    let manifest = AnalyzeManifest { config: cfg.to_record(), runs: lines, n_failed, summary };
    write_json(&cfg.out.join(MANIFEST), &Manifest::Analyze(manifest.clone()))?;
    match first_failure(&results, streams.len()) {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

/// Replays each stream through the qualification machine: per-run verdicts,
/// merged single-atom histograms and the batch summary.
pub fn qualify(cfg: &ExperimentConfig, inputs: &[PathBuf]) -> Result<QualifyManifest, CliError> {
    let streams = resolve_streams(inputs)?;
    prepare_out(&cfg.out)?;
    let per_run: Vec<(StreamResult, Option<batch::RunQualification>, Result<(), CliError>)> = streams
        .par_iter()
        .map(|input| {
            let mut line = StreamResult::new(input);
            let result = input.read().and_then(|stream| {
                let q = batch::qualify_stream(&stream, cfg)?;
                let out = format!("{}.verdict.json", input.name());
                write_bytes(&cfg.out.join(&out), (q.verdict.to_json() + "\n").as_bytes())?;
                line.output = Some(out);
                line.n_clicks = Some(stream.len() as u64);
                line.visibility = q.verdict.report.map(|r| r.visibility);
                line.qualified = Some(q.verdict.qualified);
                line.selection_passed = q.verdict.selection.map(|s| s == QualificationOutcome::Pass);
                Ok(q)
            });
            match result {
                Ok(q) => (line, Some(q), Ok(())),
                Err(e) => {
                    line.error = Some(e.to_string());
                    (line, None, Err(e))
                }
            }
        })
        .collect();
    let summary = QualifySummary::from_runs(per_run.iter().filter_map(|r| r.1.as_ref()), cfg);
    write_histogram(&cfg.out.join("qualified.hist.csv"), &summary.histogram)?;
    write_histogram(&cfg.out.join("qualified_fine.hist.csv"), &summary.fine_histogram)?;
    let (lines, _, results): (Vec<_>, Vec<_>, Vec<_>) = multiunzip(per_run);
    let n_failed = results.iter().filter(|r| r.is_err()).count();
    let manifest = QualifyManifest { config: cfg.to_record(), runs: lines, n_failed, summary };
    write_json(&cfg.out.join(MANIFEST), &Manifest::Qualify(manifest.clone()))?;
    match first_failure(&results, streams.len()) {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

fn multiunzip<A, B, C>(v: Vec<(A, B, C)>) -> (Vec<A>, Vec<B>, Vec<C>) {
    let mut out = (Vec::with_capacity(v.len()), Vec::with_capacity(v.len()), Vec::with_capacity(v.len()));
    for (a, b, c) in v {
        out.0.push(a);
        out.1.push(b);
        out.2.push(c);
    }
    out
}

/// Solves one trigger pulse: trajectory CSV plus the scalar report, with an
/// optional coupling-scale fit to `cfg.solver.fit_target`.
pub fn qed(cfg: &ExperimentConfig) -> Result<QedManifest, CliError> {
    let fail = |e: photon_server::qed::QedError| CliError::Analysis(e.to_string());
    let model = build_model(cfg.qed, cfg.pulse).map_err(fail)?;
    let dt = cfg.solver.dt_ns;
    let traj = propagate(&model, DensityState::basis(UU), dt, cfg.pulse.duration_ns).map_err(fail)?;
    prepare_out(&cfg.out)?;
    let traj_file = "trajectory.csv";
    let path = cfg.out.join(traj_file);
    let mut w = create(&path)?;
    traj.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))?;
    let fit = match cfg.solver.fit_target {
        Some(target) => {
            let s = fit_coupling_scale(cfg.qed, cfg.pulse, target, dt).map_err(fail)?;
            let p = pulse_emission_probability(cfg.qed.with_coupling_scale(s), cfg.pulse, dt).map_err(fail)?;
            Some(CouplingFit { target, coupling_scale: s, emission_probability: p })
        }
        None => None,
    };
    let manifest = QedManifest {
        params: cfg.qed,
        pulse: cfg.pulse,
        dt_ns: dt,
        trajectory: traj_file.into(),
        emission_probability: emission_probability(&traj),
        cumulative_cavity: traj.cumulative_cavity,
        cumulative_free_g0: traj.cumulative_free_g0,
        max_trace_drift: traj.max_trace_drift,
        final_populations: traj.final_state.populations(),
        fit,
    };
    write_json(&cfg.out.join(MANIFEST), &Manifest::Qed(manifest.clone()))?;
    Ok(manifest)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Report {
    pub sources: Vec<String>,
    pub simulated_runs: u64,
    pub simulated_clicks: u64,
    pub analyze: Option<AnalyzeSummary>,
    pub qualify: Option<QualifySummary>,
    pub qed: Vec<QedManifest>,
}

/// Aggregates manifests (files, or directories holding one) into
/// `report.json` in `out`: run totals, summed histograms and recomputed
/// batch statistics.
pub fn report(inputs: &[PathBuf], out: &Path) -> Result<Report, CliError> {
    let mut report = Report::default();
    let (mut analyses, mut qualifications) = (Vec::new(), Vec::new());
    for input in inputs {
        let path = if input.is_dir() { input.join(MANIFEST) } else { input.clone() };
        report.sources.push(path.display().to_string());
        match read_manifest(&path)? {
            Manifest::Simulate(m) => {
                report.simulated_runs += m.runs.len() as u64;
                report.simulated_clicks += m.n_clicks;
            }
            Manifest::Analyze(m) => analyses.push(m.summary),
            Manifest::Qualify(m) => qualifications.push(m.summary),
            Manifest::Qed(m) => report.qed.push(m),
        }
    }
    report.analyze = AnalyzeSummary::combine(&analyses)?;
    report.qualify = QualifySummary::combine(&qualifications)?;
    prepare_out(out)?;
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}
