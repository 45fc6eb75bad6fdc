//! Per-run analysis and order-independent batch reductions. Nothing here
//! touches the filesystem.

use photon_server::clickstream::{window_clicks, window_span};
use photon_server::correlator::{
    cross_correlate_binned, cross_correlate_fine, expected_background_coincidences, visibility, BackgroundExpectation,
    CorrelationHistogram, LagAxis, VisibilityReport,
};
use photon_server::qualifier::{replay, QualificationOutcome, RejectReason, RunVerdict};
use photon_server::simulator::{simulate_clicks, SimConfig};
use photon_server::{Click, ClickStream};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;

fn fine_axis(cfg: &ExperimentConfig) -> LagAxis {
    LagAxis::Fine { resolution: cfg.analysis.fine_resolution_ns, span: cfg.analysis.fine_span_ns }
}

fn correlate(stream: &ClickStream, cfg: &ExperimentConfig) -> (CorrelationHistogram, CorrelationHistogram) {
    let binned = cross_correlate_binned(&window_clicks(stream, &cfg.schedule), cfg.qual.max_lag)
        .expect("max_lag validated with the config");
    let fine = cross_correlate_fine(stream, &cfg.schedule, cfg.analysis.fine_resolution_ns, cfg.analysis.fine_span_ns)
        .expect("fine axis validated with the config");
    (binned, fine)
}

/// Correlations of one whole run.
#[derive(Clone, Debug, Serialize)]
pub struct RunAnalysis {
    pub n_clicks: usize,
    pub duration_ns: u64,
    pub visibility: Option<VisibilityReport>,
    pub visibility_error: Option<String>,
    #[serde(skip)]
    pub histogram: CorrelationHistogram,
    #[serde(skip)]
    pub fine: CorrelationHistogram,
}

pub fn analyze_stream(stream: &ClickStream, cfg: &ExperimentConfig) -> RunAnalysis {
    let (histogram, fine) = correlate(stream, cfg);
    let (visibility, visibility_error) = match visibility(&histogram) {
        Ok(r) => (Some(r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    RunAnalysis {
        n_clicks: stream.len(),
        duration_ns: stream.duration(),
        visibility,
        visibility_error,
        histogram,
        fine,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnalyzeSummary {
    pub n_runs: usize,
    pub n_clicks: u64,
    pub visibility: Option<VisibilityReport>,
    pub visibility_error: Option<String>,
    pub histogram: CorrelationHistogram,
    pub fine_histogram: CorrelationHistogram,
}

impl AnalyzeSummary {
    pub fn from_runs<'a>(runs: impl IntoIterator<Item = &'a RunAnalysis>, cfg: &ExperimentConfig) -> Self {
        let mut histogram = CorrelationHistogram::zeros(LagAxis::Pulses { max_lag: cfg.qual.max_lag });
        let mut fine_histogram = CorrelationHistogram::zeros(fine_axis(cfg));
        let (mut n_runs, mut n_clicks) = (0, 0);
        for r in runs {
            n_runs += 1;
            n_clicks += r.n_clicks as u64;
            histogram += &r.histogram;
            fine_histogram += &r.fine;
        }
        let (visibility, visibility_error) = match visibility(&histogram) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        AnalyzeSummary { n_runs, n_clicks, visibility, visibility_error, histogram, fine_histogram }
    }

    /// Sum of several batch summaries; `None` for no input.
    pub fn combine(parts: &[AnalyzeSummary]) -> Result<Option<AnalyzeSummary>, CliError> {
        let Some((first, rest)) = parts.split_first() else {
            return Ok(None);
        };
        let mut total = first.clone();
        for p in rest {
            total.n_runs += p.n_runs;
            total.n_clicks += p.n_clicks;
            merge(&mut total.histogram, &p.histogram)?;
            merge(&mut total.fine_histogram, &p.fine_histogram)?;
        }
        (total.visibility, total.visibility_error) = match visibility(&total.histogram) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Ok(Some(total))
    }
}

fn merge(into: &mut CorrelationHistogram, other: &CorrelationHistogram) -> Result<(), CliError> {
    into.merge(other).map_err(|e| CliError::Analysis(format!("cannot combine histograms: {e}")))
}

/// Data of the certified single-atom interval of a qualified run.
#[derive(Clone, Debug)]
pub struct SingleAtomSpan {
    pub start_ns: u64,
    pub end_ns: u64,
    /// Whole trigger pulses inside the span.
    pub n_bins: u64,
    pub trigger_clicks: u64,
    pub histogram: CorrelationHistogram,
    pub fine: CorrelationHistogram,
}

#[derive(Clone, Debug)]
pub struct RunQualification {
    pub verdict: RunVerdict,
    pub span: Option<SingleAtomSpan>,
}

pub fn qualify_stream(stream: &ClickStream, cfg: &ExperimentConfig) -> Result<RunQualification, CliError> {
    let verdict = replay(stream, &cfg.schedule, &cfg.qual).map_err(|e| CliError::Analysis(e.to_string()))?;
    let span = verdict.single_atom_span().map(|(a, b)| {
        let w = window_span(stream, &cfg.schedule, a, b);
        let period = cfg.schedule.period;
        let (lo, hi) = (w.first_bin * period, w.end_bin.max(w.first_bin) * period);
        let clicks = stream.clicks();
        let inside: Vec<Click> =
            clicks[clicks.partition_point(|c| c.t < lo)..clicks.partition_point(|c| c.t < hi)].to_vec();
        let sub = ClickStream::new(inside, stream.duration()).expect("a slice of a valid stream is valid");
        let (histogram, fine) = correlate(&sub, cfg);
        SingleAtomSpan {
            start_ns: a,
            end_ns: b,
            n_bins: w.n_bins(),
            trigger_clicks: w.n_trigger() as u64,
            histogram,
            fine,
        }
    });
    Ok(RunQualification { verdict, span })
}

/// Zero-lag count of the qualified data against the background expectation.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BackgroundCheck {
    /// Background-subtracted trigger-window click rate per channel, Hz.
    pub signal_rate_hz_per_channel: f64,
    pub observed: u64,
    pub expectation: BackgroundExpectation,
    /// `(observed - expected) / stderr`.
    pub z: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QualifySummary {
    pub n_runs: usize,
    pub reached_qualifying: usize,
    /// Runs whose qualification histogram passed the selection rule,
    /// including those whose atom was lost before the window closed.
    pub selection_passed: usize,
    pub selection_pass_fraction: Option<f64>,
    /// Runs that went on to serve photons.
    pub qualified: usize,
    pub qualified_fraction: Option<f64>,
    pub rejected_too_few_correlations: usize,
    pub rejected_zero_lag_excess: usize,
    pub lost_while_qualifying: usize,
    pub lost_while_serving: usize,
    pub serving_s_total: f64,
    pub serving_s_mean: Option<f64>,
    pub served_clicks: u64,
    pub single_atom_s: f64,
    pub single_atom_trigger_clicks: u64,
    pub visibility: Option<VisibilityReport>,
    pub background: Option<BackgroundCheck>,
    pub histogram: CorrelationHistogram,
    pub fine_histogram: CorrelationHistogram,
}

fn fraction(k: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| k as f64 / n as f64)
}

impl QualifySummary {
    pub fn from_runs<'a>(runs: impl IntoIterator<Item = &'a RunQualification>, cfg: &ExperimentConfig) -> Self {
        let mut s = QualifySummary {
            n_runs: 0,
            reached_qualifying: 0,
            selection_passed: 0,
            selection_pass_fraction: None,
            qualified: 0,
            qualified_fraction: None,
            rejected_too_few_correlations: 0,
            rejected_zero_lag_excess: 0,
            lost_while_qualifying: 0,
            lost_while_serving: 0,
            serving_s_total: 0.0,
            serving_s_mean: None,
            served_clicks: 0,
            single_atom_s: 0.0,
            single_atom_trigger_clicks: 0,
            visibility: None,
            background: None,
            histogram: CorrelationHistogram::zeros(LagAxis::Pulses { max_lag: cfg.qual.max_lag }),
            fine_histogram: CorrelationHistogram::zeros(fine_axis(cfg)),
        };
        let period_s = cfg.schedule.period as f64 * 1e-9;
        let mut span_bins = 0u64;
        for r in runs {
            let v = &r.verdict;
            s.n_runs += 1;
            if v.qualifying_t_ns.is_some() {
                s.reached_qualifying += 1;
            }
            if v.selection == Some(QualificationOutcome::Pass) {
                s.selection_passed += 1;
            }
            match v.reject_reason {
                Some(RejectReason::TooFewCorrelations) => s.rejected_too_few_correlations += 1,
                Some(RejectReason::ZeroLagExcess) => s.rejected_zero_lag_excess += 1,
                None => {}
            }
            if v.loss_t_ns.is_some() {
                if v.qualified {
                    s.lost_while_serving += 1;
                } else {
                    s.lost_while_qualifying += 1;
                }
            }
            if v.qualified {
                s.qualified += 1;
                s.serving_s_total += v.serving_s;
                s.served_clicks += v.served_clicks;
            }
            if let Some(span) = &r.span {
                span_bins += span.n_bins;
                s.single_atom_trigger_clicks += span.trigger_clicks;
                s.histogram += &span.histogram;
                s.fine_histogram += &span.fine;
            }
        }
        s.single_atom_s = span_bins as f64 * period_s;
        s.finalize();
        if s.single_atom_s > 0.0 {
            let bg = cfg.sim.background_rate;
            let rate = s.single_atom_trigger_clicks as f64 / s.single_atom_s;
            let signal = ((rate - bg * cfg.schedule.trigger_duty()) / 2.0).max(0.0);
            let expectation = expected_background_coincidences(signal, bg, &cfg.schedule, s.single_atom_s);
            let observed = s.histogram.zero_lag().unwrap_or(0);
            let z = z_score(observed, &expectation);
            s.background = Some(BackgroundCheck { signal_rate_hz_per_channel: signal, observed, expectation, z });
        }
        s
    }

    // Recomputes the ratios and the visibility from the additive fields.
    fn finalize(&mut self) {
        let s = self;
        s.selection_pass_fraction = fraction(s.selection_passed, s.reached_qualifying);
        s.qualified_fraction = fraction(s.qualified, s.reached_qualifying);
        s.serving_s_mean = (s.qualified > 0).then(|| s.serving_s_total / s.qualified as f64);
        s.visibility = visibility(&s.histogram).ok();
    }

    /// Sum of several batch summaries; `None` for no input.
    pub fn combine(parts: &[QualifySummary]) -> Result<Option<QualifySummary>, CliError> {
        let Some((first, rest)) = parts.split_first() else {
            return Ok(None);
        };
        let mut t = first.clone();
        for p in rest {
            t.n_runs += p.n_runs;
            t.reached_qualifying += p.reached_qualifying;
            t.selection_passed += p.selection_passed;
            t.qualified += p.qualified;
            t.rejected_too_few_correlations += p.rejected_too_few_correlations;
            t.rejected_zero_lag_excess += p.rejected_zero_lag_excess;
            t.lost_while_qualifying += p.lost_while_qualifying;
            t.lost_while_serving += p.lost_while_serving;
            t.serving_s_total += p.serving_s_total;
            t.served_clicks += p.served_clicks;
            t.single_atom_s += p.single_atom_s;
            t.single_atom_trigger_clicks += p.single_atom_trigger_clicks;
            merge(&mut t.histogram, &p.histogram)?;
            merge(&mut t.fine_histogram, &p.fine_histogram)?;
            t.background = match (t.background, p.background) {
                (Some(a), Some(b)) => {
                    let (wa, wb) = (t.single_atom_s - p.single_atom_s, p.single_atom_s);
                    let mut e = a.expectation;
                    e.expected += b.expectation.expected;
                    e.signal_background += b.expectation.signal_background;
                    e.background_background += b.expectation.background_background;
                    e.n_bins += b.expectation.n_bins;
                    e.stderr = e.expected.sqrt();
                    let observed = a.observed + b.observed;
                    Some(BackgroundCheck {
                        signal_rate_hz_per_channel: (a.signal_rate_hz_per_channel * wa
                            + b.signal_rate_hz_per_channel * wb)
                            / (wa + wb),
                        observed,
                        expectation: e,
                        z: z_score(observed, &e),
                    })
                }
                (a, b) => a.or(b),
            };
        }
        t.finalize();
        Ok(Some(t))
    }
}

fn z_score(observed: u64, e: &BackgroundExpectation) -> f64 {
    if e.stderr > 0.0 {
        (observed as f64 - e.expected) / e.stderr
    } else if observed == 0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Run `index` of a batch is simulated with seed `cfg.seed + index`.
pub fn run_seed(cfg: &ExperimentConfig, index: u64) -> u64 {
    cfg.seed.wrapping_add(index)
}

/// Simulates `cfg.n_runs` runs in memory and qualifies each, in run order.
pub fn simulate_and_qualify(cfg: &ExperimentConfig, sim: &SimConfig) -> Result<Vec<RunQualification>, CliError> {
    (0..cfg.n_runs)
        .into_par_iter()
        .map(|i| {
            let (stream, _) = simulate_clicks(sim, &cfg.schedule, run_seed(cfg, i));
            qualify_stream(&stream, cfg)
        })
        .collect()
}
