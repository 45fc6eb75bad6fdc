//! Real-time qualify-then-serve protocol for one experimental run.
//!
//! The machine watches the recycle-window light level until it settles in
//! the band expected for exactly one atom, records trigger-window clicks for
//! a fixed qualification period, and checks the resulting cross-correlation
//! against two selection rules. A qualified source then forwards its
//! trigger-window clicks as served photons while a loss monitor watches the
//! recycle light; too few recycle clicks in the trailing loss window means
//! the atom is gone.
//!
//! Rolling windows are exact: counts change only when a click arrives or
//! leaves a window, and the machine evaluates its rules at each of those
//! instants, so callers only need ticks to mark the end of a run.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clickstream::{Click, ClickStream, PulseSchedule, Slot, WindowedClicks};
use crate::correlator::{self, CorrelationHistogram, VisibilityReport, DEFAULT_MAX_LAG};

/// Background rate assumed by the default loss threshold, Hz.
pub const DEFAULT_BACKGROUND_HZ: f64 = 84.0;

/// Probability that a background-only loss window stays at or below the
/// default loss threshold.
pub const LOSS_CONFIDENCE: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QualifierConfig {
    /// Nominal single-atom recycle level, detected photons per ms of
    /// recycle-window time.
    pub single_atom_level: f64,
    /// Accepted single-atom band `[low, high)` for the recycle level.
    pub level_band: [f64; 2],
    pub level_window_ms: f64,
    pub qual_duration_s: f64,
    /// Nonzero-lag correlation mean must exceed this.
    pub min_mean_nonzero: f64,
    /// Zero-lag count must stay below this fraction of the nonzero mean.
    pub zero_lag_fraction_max: f64,
    pub loss_window_ms: f64,
    /// The atom is declared lost when the trailing loss window holds at most
    /// this many recycle clicks.
    pub loss_max_counts: u32,
    pub max_lag: u32,
    /// Return to waiting after a rejection instead of stopping.
    pub retry: bool,
}

impl Default for QualifierConfig {
    fn default() -> Self {
        QualifierConfig {
            single_atom_level: 4.0,
            level_band: [2.0, 6.0],
            level_window_ms: 100.0,
            qual_duration_s: 1.5,
            min_mean_nonzero: 1.5,
            zero_lag_fraction_max: 0.30,
            loss_window_ms: 30.0,
            loss_max_counts: derive_loss_threshold(DEFAULT_BACKGROUND_HZ, 30.0, LOSS_CONFIDENCE),
            max_lag: DEFAULT_MAX_LAG,
            retry: false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum QualifierError {
    #[error("event at t={t} ns arrived after t={now} ns")]
    OutOfOrder { t: u64, now: u64 },
    #[error("invalid qualifier config: {0}")]
    Invalid(String),
}

impl QualifierConfig {
    pub fn validate(&self) -> Result<(), QualifierError> {
        let bad = |m: &str| Err(QualifierError::Invalid(m.to_string()));
        let [lo, hi] = self.level_band;
        if !(lo >= 0.0 && hi > lo) {
            return bad("level_band must be [low, high) with 0 <= low < high");
        }
        if !(self.level_window_ms > 0.0 && self.loss_window_ms > 0.0 && self.qual_duration_s > 0.0) {
            return bad("windows and qualification duration must be positive");
        }
        if !(self.min_mean_nonzero >= 0.0 && self.single_atom_level >= 0.0) {
            return bad("thresholds must be non-negative");
        }
        if !(self.zero_lag_fraction_max > 0.0 && self.zero_lag_fraction_max < 1.0) {
            return bad("zero_lag_fraction_max must lie in (0, 1)");
        }
        if self.max_lag == 0 {
            return bad("max_lag must be at least 1");
        }
        Ok(())
    }
}

/// `P(X <= k)` for `X ~ Poisson(mean)`.
pub fn poisson_cdf(k: u32, mean: f64) -> f64 {
    if mean <= 0.0 {
        return 1.0;
    }
    let ln_mean = mean.ln();
    let mut ln_fact = 0.0;
    let mut sum = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_fact += (i as f64).ln();
        }
        sum += (-mean + i as f64 * ln_mean - ln_fact).exp();
    }
    sum.min(1.0)
}

/// Smallest count `k` such that a background-only loss window holds at
/// most `k` clicks with probability `confidence`.
pub fn derive_loss_threshold(background_rate_hz: f64, loss_window_ms: f64, confidence: f64) -> u32 {
    let mean = background_rate_hz * loss_window_ms * 1e-3;
    (0..).find(|&k| poisson_cdf(k, mean) >= confidence).expect("Poisson CDF reaches any confidence below 1")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooFewCorrelations,
    ZeroLagExcess,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QualificationOutcome {
    Pass,
    Fail(RejectReason),
}

/// Pass iff `c_mean_nonzero > min_mean_nonzero` and
/// `c_zero < zero_lag_fraction_max · c_mean_nonzero`.
pub fn qualification_rule(c_zero: f64, c_mean_nonzero: f64, cfg: &QualifierConfig) -> QualificationOutcome {
    if !(c_mean_nonzero > cfg.min_mean_nonzero) {
        QualificationOutcome::Fail(RejectReason::TooFewCorrelations)
    } else if !(c_zero < cfg.zero_lag_fraction_max * c_mean_nonzero) {
        QualificationOutcome::Fail(RejectReason::ZeroLagExcess)
    } else {
        QualificationOutcome::Pass
    }
}

pub fn qualification_test(h: &CorrelationHistogram, cfg: &QualifierConfig) -> QualificationOutcome {
    match correlator::zero_and_mean_nonzero(h) {
        Ok((zero, mean, _)) => qualification_rule(zero, mean, cfg),
        Err(_) => QualificationOutcome::Fail(RejectReason::TooFewCorrelations),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossStatus {
    Present,
    Lost,
}

pub fn loss_test(recycle_count: u32, cfg: &QualifierConfig) -> LossStatus {
    if recycle_count <= cfg.loss_max_counts {
        LossStatus::Lost
    } else {
        LossStatus::Present
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    WaitingForSingleAtom,
    Qualifying,
    Serving,
    Rejected,
    Lost,
}

impl Phase {
    pub fn is_terminal(self) -> bool {
        matches!(self, Phase::Rejected | Phase::Lost)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Event {
    Click(Click),
    /// Advance the clock without a click.
    Tick(u64),
}

impl Event {
    pub fn time(&self) -> u64 {
        match self {
            Event::Click(c) => c.t,
            Event::Tick(t) => *t,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Notification {
    QualifyingStarted { t: u64 },
    Qualified { t: u64 },
    Rejected { t: u64, reason: RejectReason },
    Served(Click),
    AtomLost { t: u64 },
}

/// Outcome of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunVerdict {
    pub qualified: bool,
    pub histogram: Option<CorrelationHistogram>,
    pub report: Option<VisibilityReport>,
    pub serving_s: f64,
    pub served_clicks: u64,
    pub loss_t_ns: Option<u64>,
    pub reject_reason: Option<RejectReason>,
    /// Selection rule applied to the qualification histogram. Also set when
    /// the atom is lost before the window closes: the rule then sees the
    /// clicks collected so far over the full window.
    pub selection: Option<QualificationOutcome>,
    pub qualifying_t_ns: Option<u64>,
    pub serving_t_ns: Option<u64>,
    pub end_t_ns: u64,
}

impl RunVerdict {
    /// Interval `[qualification start, serving end)` of a qualified run: the
    /// certified single-atom data.
    pub fn single_atom_span(&self) -> Option<(u64, u64)> {
        if !self.qualified {
            return None;
        }
        let start = self.qualifying_t_ns?;
        Some((start, self.loss_t_ns.unwrap_or(self.end_t_ns)))
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            qualified: bool,
            visibility: Option<f64>,
            serving_s: f64,
            served_clicks: u64,
            loss_t_ns: Option<u64>,
            reject_reason: Option<RejectReason>,
            selection_passed: Option<bool>,
            qualifying_t_ns: Option<u64>,
            serving_t_ns: Option<u64>,
            c_zero: Option<f64>,
            c_mean_nonzero: Option<f64>,
            report: Option<&'a VisibilityReport>,
        }
        let r = Record {
            qualified: self.qualified,
            visibility: self.report.map(|r| r.visibility),
            serving_s: self.serving_s,
            served_clicks: self.served_clicks,
            loss_t_ns: self.loss_t_ns,
            reject_reason: self.reject_reason,
            selection_passed: self.selection.map(|o| o == QualificationOutcome::Pass),
            qualifying_t_ns: self.qualifying_t_ns,
            serving_t_ns: self.serving_t_ns,
            c_zero: self.histogram.as_ref().and_then(|h| h.zero_lag()).map(|c| c as f64),
            c_mean_nonzero: self.report.map(|r| r.c_mean_nonzero),
            report: self.report.as_ref(),
        };
        serde_json::to_string_pretty(&r).expect("verdict serializes")
    }
}

/// The qualification / serving state machine of one run, starting at t = 0.
#[derive(Clone, Debug)]
pub struct Qualifier {
    cfg: QualifierConfig,
    schedule: PulseSchedule,
    phase: Phase,
    transitions: Vec<(Phase, u64)>,
    now: u64,
    level_window: u64,
    loss_window: u64,
    qual_len: u64,
    level_q: VecDeque<u64>,
    loss_q: VecDeque<u64>,
    qual_deadline: u64,
    qual_clicks: WindowedClicks,
    histogram: Option<CorrelationHistogram>,
    report: Option<VisibilityReport>,
    served: u64,
    loss_t: Option<u64>,
    reject_reason: Option<RejectReason>,
    selection: Option<QualificationOutcome>,
}

fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

impl Qualifier {
    pub fn new(cfg: QualifierConfig, schedule: PulseSchedule) -> Self {
        Qualifier {
            level_window: ms_to_ns(cfg.level_window_ms),
            loss_window: ms_to_ns(cfg.loss_window_ms),
            qual_len: (cfg.qual_duration_s * 1e9).round() as u64,
            cfg,
            schedule,
            phase: Phase::WaitingForSingleAtom,
            transitions: vec![(Phase::WaitingForSingleAtom, 0)],
            now: 0,
            level_q: VecDeque::new(),
            loss_q: VecDeque::new(),
            qual_deadline: 0,
            qual_clicks: WindowedClicks::default(),
            histogram: None,
            report: None,
            served: 0,
            loss_t: None,
            reject_reason: None,
            selection: None,
        }
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Every phase entered, with its entry time.
    pub fn transitions(&self) -> &[(Phase, u64)] {
        &self.transitions
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    /// Recycle level over the trailing level window, photons per ms of
    /// recycle-window time.
    pub fn level_rate(&self) -> f64 {
        self.level_q.len() as f64 / (self.cfg.level_window_ms * self.schedule.recycle_duty())
    }

    /// Recycle clicks in the trailing loss window.
    pub fn loss_window_count(&self) -> u32 {
        self.loss_q.len() as u32
    }

    pub fn step(&mut self, event: Event) -> Result<Vec<Notification>, QualifierError> {
        let mut out = Vec::new();
        self.step_into(event, &mut out)?;
        Ok(out)
    }

    /// Like [`Qualifier::step`], appending notifications to `out`.
    pub fn step_into(&mut self, event: Event, out: &mut Vec<Notification>) -> Result<(), QualifierError> {
        let t = event.time();
        if t < self.now {
            return Err(QualifierError::OutOfOrder { t, now: self.now });
        }
        if self.phase.is_terminal() {
            self.now = t;
            return Ok(());
        }
        self.advance(t, out);
        self.now = t;
        match event {
            Event::Tick(_) => self.evaluate(t, out),
            Event::Click(c) => match self.schedule.classify(c.t) {
                Slot::Recycle(_) => {
                    self.level_q.push_back(c.t);
                    self.loss_q.push_back(c.t);
                    self.evaluate(t, out);
                }
                Slot::Trigger(_) => match self.phase {
                    Phase::Qualifying => {
                        self.qual_clicks.push(&self.schedule, c);
                    }
                    Phase::Serving => {
                        self.served += 1;
                        out.push(Notification::Served(c));
                    }
                    _ => {}
                },
                Slot::Outside => {}
            },
        }
        Ok(())
    }

    // Processes every window expiry and deadline up to and including `t`.
    fn advance(&mut self, t: u64, out: &mut Vec<Notification>) {
        loop {
            if self.phase.is_terminal() {
                return;
            }
            let mut next = u64::MAX;
            if let Some(&f) = self.level_q.front() {
                next = next.min(f + self.level_window);
            }
            if let Some(&f) = self.loss_q.front() {
                next = next.min(f + self.loss_window);
            }
            match self.phase {
                Phase::WaitingForSingleAtom if self.now < self.level_window => {
                    next = next.min(self.level_window);
                }
                Phase::Qualifying => {
                    next = next.min(self.qual_deadline);
                    if self.now < self.loss_window {
                        next = next.min(self.loss_window);
                    }
                }
                _ => {}
            }
            if next > t {
                return;
            }
            self.now = next;
            while self.level_q.front().is_some_and(|&f| f + self.level_window <= next) {
                self.level_q.pop_front();
            }
            while self.loss_q.front().is_some_and(|&f| f + self.loss_window <= next) {
                self.loss_q.pop_front();
            }
            self.evaluate(next, out);
        }
    }

    fn enter(&mut self, phase: Phase, t: u64) {
        self.phase = phase;
        self.transitions.push((phase, t));
    }

    fn atom_lost(&self, t: u64) -> bool {
        t >= self.loss_window && loss_test(self.loss_window_count(), &self.cfg) == LossStatus::Lost
    }

    fn evaluate(&mut self, t: u64, out: &mut Vec<Notification>) {
        match self.phase {
            Phase::WaitingForSingleAtom => {
                let [lo, hi] = self.cfg.level_band;
                let rate = self.level_rate();
                if t >= self.level_window && rate >= lo && rate < hi {
                    self.start_qualifying(t);
                    out.push(Notification::QualifyingStarted { t });
                }
            }
            Phase::Qualifying => {
                if self.atom_lost(t) {
                    self.lose(t, out);
                } else if t >= self.qual_deadline {
                    self.finish_qualifying(t, out);
                }
            }
            Phase::Serving => {
                if self.atom_lost(t) {
                    self.lose(t, out);
                }
            }
            Phase::Rejected | Phase::Lost => {}
        }
    }

    fn start_qualifying(&mut self, t: u64) {
        let p = self.schedule.period;
        let trig = self.schedule.trigger;
        let first = if t <= trig.start { 0 } else { (t - trig.start).div_ceil(p) };
        self.qual_deadline = t + self.qual_len;
        // Bins whose whole trigger window closes by the deadline.
        let end = if self.qual_deadline < trig.end { 0 } else { (self.qual_deadline - trig.end) / p + 1 };
        self.qual_clicks = WindowedClicks::new(first, end.max(first));
        self.enter(Phase::Qualifying, t);
    }

    fn apply_selection(&mut self) -> QualificationOutcome {
        let h = correlator::cross_correlate_binned(&self.qual_clicks, self.cfg.max_lag).expect("max_lag validated");
        let outcome = qualification_test(&h, &self.cfg);
        self.report = correlator::visibility(&h).ok();
        self.histogram = Some(h);
        self.selection = Some(outcome);
        outcome
    }

    fn finish_qualifying(&mut self, t: u64, out: &mut Vec<Notification>) {
        match self.apply_selection() {
            QualificationOutcome::Pass => {
                self.enter(Phase::Serving, t);
                out.push(Notification::Qualified { t });
            }
            QualificationOutcome::Fail(reason) => {
                self.reject_reason = Some(reason);
                self.enter(Phase::Rejected, t);
                out.push(Notification::Rejected { t, reason });
                if self.cfg.retry {
                    self.enter(Phase::WaitingForSingleAtom, t);
                }
            }
        }
    }

    fn lose(&mut self, t: u64, out: &mut Vec<Notification>) {
        if self.phase == Phase::Qualifying {
            self.apply_selection();
        }
        self.loss_t = Some(t);
        self.enter(Phase::Lost, t);
        out.push(Notification::AtomLost { t });
    }

    fn entry_time(&self, phase: Phase) -> Option<u64> {
        self.transitions.iter().rev().find(|(p, _)| *p == phase).map(|&(_, t)| t)
    }

    /// Closes the run at `end` and summarizes it.
    pub fn finish(mut self, end: u64) -> Result<RunVerdict, QualifierError> {
        self.step(Event::Tick(end))?;
        let serving_t = self.entry_time(Phase::Serving);
        let qualified = serving_t.is_some();
        let serving_s = serving_t.map_or(0.0, |s| (self.loss_t.unwrap_or(end) - s) as f64 * 1e-9);
        let qualifying_t = self.entry_time(Phase::Qualifying);
        Ok(RunVerdict {
            qualified,
            histogram: self.histogram,
            report: self.report,
            serving_s,
            served_clicks: self.served,
            loss_t_ns: self.loss_t,
            reject_reason: self.reject_reason,
            selection: self.selection,
            qualifying_t_ns: qualifying_t,
            serving_t_ns: serving_t,
            end_t_ns: end,
        })
    }
}

/// Replays a recorded stream through a fresh machine: a pure fold over the
/// clicks followed by a closing tick at the stream's duration.
pub fn replay(
    stream: &ClickStream,
    schedule: &PulseSchedule,
    cfg: &QualifierConfig,
) -> Result<RunVerdict, QualifierError> {
    let mut q = Qualifier::new(cfg.clone(), *schedule);
    let mut sink = Vec::new();
    for &c in stream.clicks() {
        q.step_into(Event::Click(c), &mut sink)?;
        sink.clear();
        if q.phase().is_terminal() {
            break;
        }
    }
    q.finish(stream.duration())
}
