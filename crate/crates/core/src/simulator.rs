//! Seeded Monte Carlo of complete experimental runs.
//!
//! A run starts with a few trapped atoms, each leaving after an independent
//! random lifetime. Every trigger pulse with atoms present may emit photons;
//! each photon survives the cavity, the propagation path and the detector
//! with the product of the three transmissions and lands on either detector
//! with equal probability. Recycle windows produce detected scatter clicks at
//! a fixed rate per atom, and a homogeneous background covers the whole run.
//!
//! Each source draws from its own ChaCha stream so changing one rate does not
//! reshuffle the others.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Gamma, Poisson};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clickstream::{Channel, Click, ClickStream, PulseSchedule};
use crate::qed::Trajectory;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Invalid(String),
    #[error("cannot parse `{input}`: {msg}")]
    Parse { input: String, msg: String },
}

/// Distribution of the time an atom stays trapped.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum LifetimeShape {
    Exponential,
    /// Gamma distribution with shape `k` and the configured mean.
    Gamma(f64),
}

/// How many atoms a run starts with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum InitialAtoms {
    /// `1 + Poisson(mean)`
    OnePlusPoisson(f64),
    /// Exactly `n` atoms with random lifetimes.
    Fixed(u32),
    /// Exactly `n` atoms that never leave.
    Pinned(u32),
}

/// How the trigger emission probability scales with the number of atoms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultiAtomEmission {
    /// Every atom emits independently with `p_gen`.
    Independent,
    /// One photon with probability `min(1, n·p_gen)`.
    Linear,
}

fn parse_call(s: &str) -> Option<(&str, &str)> {
    let s = s.trim();
    let open = s.find('(')?;
    let inner = s[open + 1..].strip_suffix(')')?;
    Some((s[..open].trim(), inner.trim()))
}

impl FromStr for LifetimeShape {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |msg: &str| SimError::Parse { input: s.to_string(), msg: msg.to_string() };
        if s.trim().eq_ignore_ascii_case("exponential") {
            return Ok(LifetimeShape::Exponential);
        }
        match parse_call(s) {
            Some(("gamma", k)) => {
                let k: f64 = k.parse().map_err(|_| err("gamma shape must be a number"))?;
                if k > 0.0 {
                    Ok(LifetimeShape::Gamma(k))
                } else {
                    Err(err("gamma shape must be positive"))
                }
            }
            _ => Err(err("expected `exponential` or `gamma(k)`")),
        }
    }
}

impl fmt::Display for LifetimeShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LifetimeShape::Exponential => write!(f, "exponential"),
            LifetimeShape::Gamma(k) => write!(f, "gamma({k})"),
        }
    }
}

impl TryFrom<String> for LifetimeShape {
    type Error = SimError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<LifetimeShape> for String {
    fn from(v: LifetimeShape) -> String {
        v.to_string()
    }
}

impl FromStr for InitialAtoms {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |msg: &str| SimError::Parse { input: s.to_string(), msg: msg.to_string() };
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        if let Some(rest) = compact.strip_prefix("1+") {
            if let Some(("poisson", mean)) = parse_call(rest) {
                let mean: f64 = mean.parse().map_err(|_| err("poisson mean must be a number"))?;
                return if mean >= 0.0 {
                    Ok(InitialAtoms::OnePlusPoisson(mean))
                } else {
                    Err(err("poisson mean must be non-negative"))
                };
            }
        }
        match parse_call(&compact) {
            Some(("fixed", n)) => n.parse().map(InitialAtoms::Fixed).map_err(|_| err("bad atom count")),
            Some(("pinned", n)) => n.parse().map(InitialAtoms::Pinned).map_err(|_| err("bad atom count")),
            _ => Err(err("expected `1+poisson(mean)`, `fixed(n)` or `pinned(n)`")),
        }
    }
}

impl fmt::Display for InitialAtoms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitialAtoms::OnePlusPoisson(m) => write!(f, "1+poisson({m})"),
            InitialAtoms::Fixed(n) => write!(f, "fixed({n})"),
            InitialAtoms::Pinned(n) => write!(f, "pinned({n})"),
        }
    }
}

impl TryFrom<String> for InitialAtoms {
    type Error = SimError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<InitialAtoms> for String {
    fn from(v: InitialAtoms) -> String {
        v.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Hz; must match the pulse schedule.
    pub trigger_rate: f64,
    /// Photon-generation probability per trigger and atom.
    pub p_gen: f64,
    pub t_cavity: f64,
    pub t_prop: f64,
    pub eta_det: f64,
    /// Combined background of both detectors, Hz.
    pub background_rate: f64,
    /// Detected recycle photons per ms of recycle-window time, per atom.
    pub recycle_det_rate: f64,
    /// Mean trap lifetime, s.
    pub trap_mean_life: f64,
    pub lifetime_shape: LifetimeShape,
    pub initial_atoms: InitialAtoms,
    /// s
    pub run_duration: f64,
    /// Probability that an emitting atom adds a second photon.
    pub p_two_photon: f64,
    /// Non-paralyzable dead time per detector, ns.
    pub dead_time_ns: u64,
    pub multi_atom: MultiAtomEmission,
    #[serde(skip)]
    pub emission_timing: EmissionTiming,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            trigger_rate: 1e5,
            p_gen: 0.09,
            t_cavity: 0.50,
            t_prop: 0.48,
            eta_det: 0.44,
            background_rate: 84.0,
            recycle_det_rate: 4.0,
            trap_mean_life: 10.3,
            lifetime_shape: LifetimeShape::Exponential,
            initial_atoms: InitialAtoms::OnePlusPoisson(1.5),
            run_duration: 30.0,
            p_two_photon: 0.0,
            dead_time_ns: 0,
            multi_atom: MultiAtomEmission::Independent,
            emission_timing: EmissionTiming::Uniform,
        }
    }
}

impl SimConfig {
    /// Probability that one emitted photon produces a click.
    pub fn detection_efficiency(&self) -> f64 {
        self.t_cavity * self.t_prop * self.eta_det
    }

    /// Expected trigger-window signal clicks per pulse with one atom.
    pub fn single_atom_click_probability(&self) -> f64 {
        self.p_gen * (1.0 + self.p_two_photon) * self.detection_efficiency()
    }

    pub fn validate(&self, schedule: &PulseSchedule) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Invalid(m));
        for (name, p) in [
            ("p_gen", self.p_gen),
            ("t_cavity", self.t_cavity),
            ("t_prop", self.t_prop),
            ("eta_det", self.eta_det),
            ("p_two_photon", self.p_two_photon),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        for (name, r) in [
            ("background_rate", self.background_rate),
            ("recycle_det_rate", self.recycle_det_rate),
            ("run_duration", self.run_duration),
        ] {
            if !(r >= 0.0 && r.is_finite()) {
                return bad(format!("{name} = {r} must be a finite non-negative number"));
            }
        }
        if !(self.trap_mean_life > 0.0) {
            return bad("trap_mean_life must be positive".into());
        }
        if (self.trigger_rate - schedule.trigger_rate()).abs() > 1e-9 * schedule.trigger_rate() {
            return bad(format!(
                "trigger_rate {} Hz does not match the schedule period ({} Hz)",
                self.trigger_rate,
                schedule.trigger_rate()
            ));
        }
        Ok(())
    }
}

/// Timestamp distribution of detected photons within the trigger window.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum EmissionTiming {
    #[default]
    Uniform,
    /// Inverse-CDF sampling from a tabulated emission flux on a uniform grid.
    Profile { dt_ns: f64, cdf: Vec<f64> },
}

impl EmissionTiming {
    /// Emission-time profile following the cavity output flux of a solved pulse.
    pub fn from_trajectory(traj: &Trajectory) -> EmissionTiming {
        let dt = traj.times_ns.get(1).copied().unwrap_or(1.0) - traj.times_ns[0];
        let mut cdf = Vec::with_capacity(traj.flux.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for f in traj.flux.windows(2) {
            acc += 0.5 * (f[0] + f[1]) * dt;
            cdf.push(acc);
        }
        if acc > 0.0 {
            for c in cdf.iter_mut() {
                *c /= acc;
            }
        }
        EmissionTiming::Profile { dt_ns: dt, cdf }
    }

    fn sample<R: Rng>(&self, rng: &mut R, window_len: u64) -> u64 {
        match self {
            EmissionTiming::Uniform => rng.random_range(0..window_len),
            EmissionTiming::Profile { dt_ns, cdf } => {
                let u: f64 = rng.random();
                let i = cdf.partition_point(|&c| c < u).clamp(1, cdf.len().max(2) - 1);
                let (c0, c1) = (cdf[i - 1], cdf[i]);
                let frac = if c1 > c0 { (u - c0) / (c1 - c0) } else { 0.0 };
                let t = ((i - 1) as f64 + frac) * dt_ns;
                (t as u64).min(window_len - 1)
            }
        }
    }
}

/// Origin of a simulated click.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClickSource {
    /// Photon from a trigger-pulse emission; carries the pulse index.
    Trigger(u64),
    Recycle,
    Background,
}

/// Ground truth of one simulated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunTruth {
    pub duration_ns: u64,
    pub period_ns: u64,
    /// Per-atom departure times in s; `None` for atoms that never leave.
    pub departures_s: Vec<Option<f64>>,
    /// Trigger pulses in which at least one photon was emitted, ascending;
    /// `None` when the run was simulated without recording them.
    #[serde(skip)]
    pub emission_bins: Option<Vec<u64>>,
    pub n_background: u64,
    /// Detected trigger-pulse photons.
    pub n_signal: u64,
    pub n_recycle: u64,
    /// Per-click origin, aligned with the click stream.
    #[serde(skip)]
    pub sources: Vec<ClickSource>,
}

// Serialized form with the run-length encoded emission flags.
#[derive(Serialize, Deserialize)]
struct TruthRecord {
    duration_ns: u64,
    period_ns: u64,
    departures_s: Vec<Option<f64>>,
    emission_flags_rle: Option<Vec<u64>>,
    n_background: u64,
    n_signal: u64,
    n_recycle: u64,
}

impl RunTruth {
    pub fn from_departures(departures_s: Vec<Option<f64>>, duration_ns: u64, period_ns: u64) -> Self {
        RunTruth {
            duration_ns,
            period_ns,
            departures_s,
            emission_bins: None,
            n_background: 0,
            n_signal: 0,
            n_recycle: 0,
            sources: Vec::new(),
        }
    }

    fn departure_ns(&self) -> Vec<Option<u64>> {
        self.departures_s.iter().map(|d| d.map(|s| (s * 1e9).round() as u64)).collect()
    }

    /// Number of atoms present at time `t_ns`; an atom is present strictly
    /// before its departure.
    pub fn atom_count_at(&self, t_ns: u64) -> u32 {
        self.departure_ns().iter().filter(|d| d.is_none_or(|d| t_ns < d)).count() as u32
    }

    /// `(t_ns, count)` steps: count holds from each `t_ns` until the next step.
    pub fn atom_steps(&self) -> Vec<(u64, u32)> {
        let mut finite: Vec<u64> = self.departure_ns().into_iter().flatten().collect();
        finite.sort_unstable();
        let mut n = self.departures_s.len() as u32;
        let mut steps = vec![(0, n)];
        for d in finite {
            n -= 1;
            match steps.last_mut() {
                Some(last) if last.0 == d => last.1 = n,
                _ => steps.push((d, n)),
            }
        }
        steps
    }

    /// Time in s during which exactly one atom is trapped, within the run.
    pub fn single_atom_availability(&self) -> f64 {
        let steps = self.atom_steps();
        let mut total = 0u64;
        for (i, &(t, n)) in steps.iter().enumerate() {
            let end = steps.get(i + 1).map_or(self.duration_ns, |s| s.0).min(self.duration_ns);
            if n == 1 && end > t {
                total += end - t;
            }
        }
        total as f64 * 1e-9
    }

    /// Departure time of the second-to-last atom (when a single atom is
    /// first left alone), ns. `None` if that never happens inside the run.
    pub fn single_atom_onset(&self) -> Option<u64> {
        self.atom_steps().into_iter().find(|&(_, n)| n == 1).map(|(t, _)| t).filter(|&t| t < self.duration_ns)
    }

    /// Alternating run lengths of non-emitting and emitting trigger pulses,
    /// starting with non-emitting (possibly zero).
    pub fn emission_flags_rle(&self) -> Option<Vec<u64>> {
        let bins = self.emission_bins.as_ref()?;
        let n_bins = self.duration_ns.div_ceil(self.period_ns.max(1));
        let mut out = Vec::new();
        let mut cursor = 0u64;
        let mut i = 0;
        while i < bins.len() {
            let start = bins[i];
            let mut end = start + 1;
            i += 1;
            while i < bins.len() && bins[i] == end {
                end += 1;
                i += 1;
            }
            out.push(start - cursor);
            out.push(end - start);
            cursor = end;
        }
        if cursor < n_bins {
            out.push(n_bins - cursor);
        }
        Some(out)
    }

    pub fn to_json(&self) -> String {
        let rec = TruthRecord {
            duration_ns: self.duration_ns,
            period_ns: self.period_ns,
            departures_s: self.departures_s.clone(),
            emission_flags_rle: self.emission_flags_rle(),
            n_background: self.n_background,
            n_signal: self.n_signal,
            n_recycle: self.n_recycle,
        };
        serde_json::to_string_pretty(&rec).expect("truth serializes")
    }

    /// Parses the JSON written by [`RunTruth::to_json`]; per-click sources
    /// are not stored and come back empty.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let rec: TruthRecord = serde_json::from_str(text)?;
        let emission_bins = rec.emission_flags_rle.map(|rle| {
            let mut bins = Vec::new();
            let mut cursor = 0u64;
            for (i, len) in rle.iter().enumerate() {
                if i % 2 == 1 {
                    bins.extend(cursor..cursor + len);
                }
                cursor += len;
            }
            bins
        });
        Ok(RunTruth {
            duration_ns: rec.duration_ns,
            period_ns: rec.period_ns,
            departures_s: rec.departures_s,
            emission_bins,
            n_background: rec.n_background,
            n_signal: rec.n_signal,
            n_recycle: rec.n_recycle,
            sources: Vec::new(),
        })
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_ATOMS: u64 = 0;
const STREAM_TRIGGER: u64 = 1;
const STREAM_RECYCLE: u64 = 2;
const STREAM_BACKGROUND: u64 = 3;
const STREAM_EMISSIONS: u64 = 4;

// Geometric number of failures before a success, by inversion.
struct Skip {
    ln_miss: f64,
}

impl Skip {
    fn new(q: f64) -> Option<Self> {
        (q > 0.0).then(|| Skip { ln_miss: (1.0 - q.min(1.0)).ln() })
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        if self.ln_miss == f64::NEG_INFINITY {
            return 0;
        }
        let u: f64 = rng.random();
        ((1.0 - u).ln() / self.ln_miss) as u64
    }
}

fn draw_lifetimes<R: Rng>(rng: &mut R, cfg: &SimConfig, n: usize) -> Vec<f64> {
    match cfg.lifetime_shape {
        LifetimeShape::Exponential => {
            let d = Exp::new(1.0 / cfg.trap_mean_life).expect("positive mean");
            (0..n).map(|_| d.sample(rng)).collect()
        }
        LifetimeShape::Gamma(k) => {
            let d = Gamma::new(k, cfg.trap_mean_life / k).expect("positive shape");
            (0..n).map(|_| d.sample(rng)).collect()
        }
    }
}

/// `n` independent trap lifetimes in s.
pub fn sample_lifetimes(cfg: &SimConfig, n: usize, seed: u64) -> Vec<f64> {
    draw_lifetimes(&mut rng_for(seed, STREAM_ATOMS), cfg, n)
}

// First pulse index whose window (starting at `offset` in the period) opens
// at or after `t`.
fn first_bin_from(t: u64, offset: u64, period: u64) -> u64 {
    if t <= offset {
        0
    } else {
        (t - offset).div_ceil(period)
    }
}

// Pulse ranges `[start, end)` with a constant atom count, for windows that
// open at `offset`.
fn count_segments(steps: &[(u64, u32)], offset: u64, period: u64, n_bins: u64) -> Vec<(u64, u64, u32)> {
    let mut out = Vec::new();
    for (i, &(t, n)) in steps.iter().enumerate() {
        let start = first_bin_from(t, offset, period).min(n_bins);
        let end = steps.get(i + 1).map_or(n_bins, |s| first_bin_from(s.0, offset, period).min(n_bins));
        if end > start && n > 0 {
            out.push((start, end, n));
        }
    }
    out
}

struct Pending {
    t: u64,
    channel: Channel,
    source: ClickSource,
}

fn random_channel<R: Rng>(rng: &mut R) -> Channel {
    if rng.random::<bool>() {
        Channel::One
    } else {
        Channel::Zero
    }
}

/// Simulates one run. Identical `(cfg, schedule, seed)` give identical output.
pub fn simulate_run(cfg: &SimConfig, schedule: &PulseSchedule, seed: u64) -> (ClickStream, RunTruth) {
    simulate(cfg, schedule, seed, true)
}

/// Like [`simulate_run`] but skips recording the per-pulse emission flags,
/// which dominate the cost for long runs. The click stream is identical.
pub fn simulate_clicks(cfg: &SimConfig, schedule: &PulseSchedule, seed: u64) -> (ClickStream, RunTruth) {
    simulate(cfg, schedule, seed, false)
}

fn simulate(cfg: &SimConfig, schedule: &PulseSchedule, seed: u64, record_emissions: bool) -> (ClickStream, RunTruth) {
    let period = schedule.period;
    let duration = (cfg.run_duration * 1e9).round() as u64;
    let n_bins = schedule.n_bins(duration);

    // Atoms.
    let mut rng = rng_for(seed, STREAM_ATOMS);
    let (n0, pinned) = match cfg.initial_atoms {
        InitialAtoms::OnePlusPoisson(mean) => {
            let extra = if mean > 0.0 { Poisson::new(mean).expect("positive mean").sample(&mut rng) as u32 } else { 0 };
            (1 + extra, false)
        }
        InitialAtoms::Fixed(n) => (n, false),
        InitialAtoms::Pinned(n) => (n, true),
    };
    let departures_s: Vec<Option<f64>> = if pinned {
        vec![None; n0 as usize]
    } else {
        draw_lifetimes(&mut rng, cfg, n0 as usize).into_iter().map(Some).collect()
    };
    let mut truth = RunTruth::from_departures(departures_s, duration, period);
    let steps = truth.atom_steps();

    let mut pending: Vec<Pending> = Vec::new();
    let eta = cfg.detection_efficiency();

    // Trigger pulses: skip directly between pulses with at least one
    // detected photon.
    let mut rng = rng_for(seed, STREAM_TRIGGER);
    let trig = schedule.trigger;
    let p = cfg.p_gen;
    let p2 = cfg.p_two_photon;
    // P(at least one detected photon | a source emits).
    let d1 = 1.0 - (1.0 - eta) * (1.0 - p2 * eta);
    let p_pair = if d1 > 0.0 { p2 * eta * eta / d1 } else { 0.0 };
    let segments = count_segments(&steps, trig.start, period, n_bins);
    let mut detected_bins = Vec::new();
    for &(start, end, n) in &segments {
        let a = p * d1;
        let q_det = match cfg.multi_atom {
            MultiAtomEmission::Independent => 1.0 - (1.0 - a).powi(n as i32),
            MultiAtomEmission::Linear => (n as f64 * p).min(1.0) * d1,
        };
        let Some(skip) = Skip::new(q_det) else { continue };
        let mut bin = start + skip.sample(&mut rng);
        while bin < end {
            detected_bins.push(bin);
            let sources = match cfg.multi_atom {
                MultiAtomEmission::Linear => 1,
                MultiAtomEmission::Independent => {
                    // Index of the first detected atom, conditioned on at least one.
                    let mut u = rng.random::<f64>() * q_det;
                    let mut first = 0u32;
                    let mut w = a;
                    while first + 1 < n && u >= w {
                        u -= w;
                        w *= 1.0 - a;
                        first += 1;
                    }
                    1 + (first + 1..n).filter(|_| rng.random::<f64>() < a).count() as u32
                }
            };
            for _ in 0..sources {
                let photons = if p_pair > 0.0 && rng.random::<f64>() < p_pair { 2 } else { 1 };
                for _ in 0..photons {
                    let channel = random_channel(&mut rng);
                    let t = bin * period + trig.start + cfg.emission_timing.sample(&mut rng, trig.len());
                    if t < duration {
                        pending.push(Pending { t, channel, source: ClickSource::Trigger(bin) });
                    }
                }
            }
            bin += 1 + skip.sample(&mut rng);
        }
    }

    // Emissions nobody saw, drawn from their own stream so the clicks do not
    // depend on whether they are recorded.
    if record_emissions {
        let mut rng = rng_for(seed, STREAM_EMISSIONS);
        let mut hidden = Vec::new();
        for &(start, end, n) in &segments {
            let (none_detected, none_emitted) = match cfg.multi_atom {
                MultiAtomEmission::Independent => ((1.0 - p * d1).powi(n as i32), (1.0 - p).powi(n as i32)),
                MultiAtomEmission::Linear => {
                    let q = (n as f64 * p).min(1.0);
                    (1.0 - q * d1, 1.0 - q)
                }
            };
            if none_detected <= 0.0 {
                continue;
            }
            let Some(skip) = Skip::new((none_detected - none_emitted) / none_detected) else { continue };
            let mut bin = start + skip.sample(&mut rng);
            while bin < end {
                if detected_bins.binary_search(&bin).is_err() {
                    hidden.push(bin);
                }
                bin += 1 + skip.sample(&mut rng);
            }
        }
        let mut all = Vec::with_capacity(detected_bins.len() + hidden.len());
        let (mut i, mut j) = (0, 0);
        while i < detected_bins.len() || j < hidden.len() {
            if j == hidden.len() || (i < detected_bins.len() && detected_bins[i] < hidden[j]) {
                all.push(detected_bins[i]);
                i += 1;
            } else {
                all.push(hidden[j]);
                j += 1;
            }
        }
        truth.emission_bins = Some(all);
    }

    // Recycle windows: a Poisson process on the concatenated window time.
    let mut rng = rng_for(seed, STREAM_RECYCLE);
    let rec = schedule.recycle;
    let w_len = rec.len();
    for (start, end, n) in count_segments(&steps, rec.start, period, n_bins) {
        let rate_per_ns = n as f64 * cfg.recycle_det_rate * 1e-6;
        if rate_per_ns <= 0.0 {
            continue;
        }
        let gap = Exp::new(rate_per_ns).expect("positive rate");
        let exposure = ((end - start) * w_len) as f64;
        let mut tau = gap.sample(&mut rng);
        while tau < exposure {
            let e = tau as u64;
            let t = (start + e / w_len) * period + rec.start + e % w_len;
            let channel = random_channel(&mut rng);
            if t < duration {
                pending.push(Pending { t, channel, source: ClickSource::Recycle });
            }
            tau += gap.sample(&mut rng);
        }
    }

    // Background.
    let mut rng = rng_for(seed, STREAM_BACKGROUND);
    if cfg.background_rate > 0.0 {
        let gap = Exp::new(cfg.background_rate * 1e-9).expect("positive rate");
        let mut tau = gap.sample(&mut rng);
        while tau < duration as f64 {
            let channel = random_channel(&mut rng);
            pending.push(Pending { t: tau as u64, channel, source: ClickSource::Background });
            tau += gap.sample(&mut rng);
        }
    }

    pending.sort_by_key(|p| p.t);
    let mut clicks = Vec::with_capacity(pending.len());
    let mut last: [Option<u64>; 2] = [None, None];
    for p in pending {
        let ch = p.channel.index();
        if cfg.dead_time_ns > 0 {
            if let Some(prev) = last[ch] {
                if p.t - prev < cfg.dead_time_ns {
                    continue;
                }
            }
        }
        last[ch] = Some(p.t);
        match p.source {
            ClickSource::Trigger(_) => truth.n_signal += 1,
            ClickSource::Recycle => truth.n_recycle += 1,
            ClickSource::Background => truth.n_background += 1,
        }
        clicks.push(Click::new(p.t, p.channel));
        truth.sources.push(p.source);
    }
    let stream = ClickStream::new(clicks, duration).expect("simulated clicks are sorted and inside the run");
    (stream, truth)
}
