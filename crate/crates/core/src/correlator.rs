//! Hanbury Brown & Twiss cross-correlation of the two detector channels.
//!
//! Correlations are directed channel 0 → channel 1: a pair contributes at lag
//! `bin(ch1) - bin(ch0)` (pulse-binned mode) or `t(ch1) - t(ch0)` (fine mode).
//! Same-channel pairs never contribute. Histograms with the same lag axis
//! add count-wise, so per-run results can be reduced in any order.

use std::io::{self, Write};
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clickstream::{Channel, ClickStream, PulseSchedule, Slot, WindowedClicks};

/// Default lag range in trigger pulses.
pub const DEFAULT_MAX_LAG: u32 = 30;

/// Default time resolution for fine correlations, ns.
pub const DEFAULT_FINE_RESOLUTION: u64 = 200;

#[derive(Debug, Error, PartialEq)]
pub enum CorrelationError {
    #[error("max_lag must be at least 1")]
    ZeroMaxLag,
    #[error("resolution {resolution} ns must be positive and divide span {span} ns")]
    BadResolution { resolution: u64, span: u64 },
    #[error("histogram has no counts at non-zero lag; visibility is undefined")]
    UndefinedVisibility,
    #[error("visibility needs a pulse-binned histogram")]
    NotPulseBinned,
    #[error("cannot merge histograms with different lag axes")]
    AxisMismatch,
}

/// What a lag unit means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LagAxis {
    /// Lags count trigger pulses, `-max_lag..=max_lag`.
    Pulses { max_lag: u32 },
    /// Lags are left bin edges in ns: bins `[k·res, (k+1)·res)` for
    /// `k` in `-span/res..span/res`.
    Fine { resolution: u64, span: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub axis: LagAxis,
    pub lags: Vec<i64>,
    pub counts: Vec<u64>,
    /// Number of pulse pairs that could contribute at each lag.
    pub n_bins: Vec<u64>,
}

impl CorrelationHistogram {
    pub fn zeros(axis: LagAxis) -> Self {
        let lags: Vec<i64> = match axis {
            LagAxis::Pulses { max_lag } => (-(max_lag as i64)..=max_lag as i64).collect(),
            LagAxis::Fine { resolution, span } => {
                let k = (span / resolution) as i64;
                (-k..k).map(|i| i * resolution as i64).collect()
            }
        };
        let n = lags.len();
        CorrelationHistogram { axis, lags, counts: vec![0; n], n_bins: vec![0; n] }
    }

    pub fn count_at(&self, lag: i64) -> Option<u64> {
        self.lags.iter().position(|&l| l == lag).map(|i| self.counts[i])
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Zero-lag count of a pulse-binned histogram.
    pub fn zero_lag(&self) -> Option<u64> {
        match self.axis {
            LagAxis::Pulses { .. } => self.count_at(0),
            LagAxis::Fine { .. } => None,
        }
    }

    /// Sum of counts over fine-lag bins lying fully inside `[-half_width, half_width)`.
    pub fn integrate(&self, half_width: i64) -> u64 {
        let res = match self.axis {
            LagAxis::Fine { resolution, .. } => resolution as i64,
            LagAxis::Pulses { .. } => 1,
        };
        self.lags
            .iter()
            .zip(&self.counts)
            .filter(|(&l, _)| l >= -half_width && l + res <= half_width)
            .map(|(_, &c)| c)
            .sum()
    }

    pub fn merge(&mut self, other: &CorrelationHistogram) -> Result<(), CorrelationError> {
        if self.axis != other.axis {
            return Err(CorrelationError::AxisMismatch);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.n_bins.iter_mut().zip(&other.n_bins) {
            *a += b;
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "lag,count,n_bins")?;
        for ((l, c), n) in self.lags.iter().zip(&self.counts).zip(&self.n_bins) {
            writeln!(w, "{l},{c},{n}")?;
        }
        w.flush()
    }
}

impl AddAssign<&CorrelationHistogram> for CorrelationHistogram {
    fn add_assign(&mut self, rhs: &CorrelationHistogram) {
        self.merge(rhs).expect("histograms share a lag axis");
    }
}

/// `counts[Δn] = Σ_i n0(i)·n1(i+Δn)` over bins inside the windowed range.
pub fn cross_correlate_binned(w: &WindowedClicks, max_lag: u32) -> Result<CorrelationHistogram, CorrelationError> {
    if max_lag == 0 {
        return Err(CorrelationError::ZeroMaxLag);
    }
    let mut h = CorrelationHistogram::zeros(LagAxis::Pulses { max_lag });
    let n = w.n_bins();
    for (slot, &lag) in h.n_bins.iter_mut().zip(&h.lags) {
        *slot = n.saturating_sub(lag.unsigned_abs());
    }
    let a = w.trigger_counts(Channel::Zero);
    let b = w.trigger_counts(Channel::One);
    let l = max_lag as u64;
    let mut lo = 0usize;
    for &(bin0, n0) in &a {
        while lo < b.len() && b[lo].0 + l < bin0 {
            lo += 1;
        }
        for &(bin1, n1) in b[lo..].iter().take_while(|&&(b1, _)| b1 <= bin0 + l) {
            let idx = (bin1 as i64 - bin0 as i64 + max_lag as i64) as usize;
            h.counts[idx] += n0 * n1;
        }
    }
    Ok(h)
}

/// Histogram of `t1 - t0` over all channel-0/channel-1 pairs whose clicks
/// both fall inside trigger windows and whose difference lies in `[-span, span)`.
pub fn cross_correlate_fine(
    stream: &ClickStream,
    schedule: &PulseSchedule,
    resolution: u64,
    span: u64,
) -> Result<CorrelationHistogram, CorrelationError> {
    if resolution == 0 || span == 0 || !span.is_multiple_of(resolution) {
        return Err(CorrelationError::BadResolution { resolution, span });
    }
    let mut h = CorrelationHistogram::zeros(LagAxis::Fine { resolution, span });
    let mut times: [Vec<i64>; 2] = [Vec::new(), Vec::new()];
    for c in stream.clicks() {
        if let Slot::Trigger(_) = schedule.classify(c.t) {
            times[c.channel.index()].push(c.t as i64);
        }
    }
    let span = span as i64;
    let res = resolution as i64;
    let k = span / res;
    let ones = &times[1];
    let mut lo = 0usize;
    for &t0 in &times[0] {
        while lo < ones.len() && ones[lo] < t0 - span {
            lo += 1;
        }
        for &t1 in ones[lo..].iter().take_while(|&&t1| t1 < t0 + span) {
            let bin = (t1 - t0).div_euclid(res);
            h.counts[(bin + k) as usize] += 1;
        }
    }
    let n = schedule.n_bins(stream.duration());
    for c in h.n_bins.iter_mut() {
        *c = n;
    }
    Ok(h)
}

/// Antibunching visibility `1 - c_zero / c_mean_nonzero` with Poisson errors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityReport {
    pub c_zero: f64,
    pub c_mean_nonzero: f64,
    pub visibility: f64,
    /// Standard error of the visibility.
    pub stderr: f64,
    pub stderr_zero: f64,
    pub stderr_mean_nonzero: f64,
}

impl VisibilityReport {
    /// Builds a report from a zero-lag count and the mean over `n_lags`
    /// nonzero lags. `n_lags` sets the error on the mean.
    pub fn from_counts(c_zero: f64, c_mean_nonzero: f64, n_lags: usize) -> Result<Self, CorrelationError> {
        if !(c_mean_nonzero > 0.0) {
            return Err(CorrelationError::UndefinedVisibility);
        }
        let ratio = c_zero / c_mean_nonzero;
        let stderr_zero = c_zero.sqrt();
        let stderr_mean_nonzero = (c_mean_nonzero / n_lags.max(1) as f64).sqrt();
        let stderr =
            ((stderr_zero / c_mean_nonzero).powi(2) + (ratio * stderr_mean_nonzero / c_mean_nonzero).powi(2)).sqrt();
        Ok(VisibilityReport {
            c_zero,
            c_mean_nonzero,
            visibility: 1.0 - ratio,
            stderr,
            stderr_zero,
            stderr_mean_nonzero,
        })
    }
}

/// Zero-lag count and mean over all nonzero lags of a pulse-binned histogram.
pub fn zero_and_mean_nonzero(h: &CorrelationHistogram) -> Result<(f64, f64, usize), CorrelationError> {
    if !matches!(h.axis, LagAxis::Pulses { .. }) {
        return Err(CorrelationError::NotPulseBinned);
    }
    let mut zero = 0u64;
    let mut sum = 0u64;
    let mut n = 0usize;
    for (&l, &c) in h.lags.iter().zip(&h.counts) {
        if l == 0 {
            zero = c;
        } else {
            sum += c;
            n += 1;
        }
    }
    Ok((zero as f64, sum as f64 / n as f64, n))
}

pub fn visibility(h: &CorrelationHistogram) -> Result<VisibilityReport, CorrelationError> {
    let (zero, mean, n) = zero_and_mean_nonzero(h)?;
    VisibilityReport::from_counts(zero, mean, n)
}

/// Expected zero-lag coincidences involving at least one background click.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundExpectation {
    /// Total expectation (signal×background cross terms plus background×background).
    pub expected: f64,
    pub stderr: f64,
    /// Signal×background part alone.
    pub signal_background: f64,
    /// Background×background part alone.
    pub background_background: f64,
    pub n_bins: f64,
}

/// Expected zero-lag coincidences from background over `total_time_s`.
///
/// `signal_click_rate_hz` is the detected signal rate on one channel
/// (averaged over wall-clock time); `background_rate_hz` is the combined
/// background of both detectors, split evenly. Per trigger bin the expected
/// coincidences are `s0·b1 + b0·s1 + b0·b1` with `s` the signal clicks per
/// pulse and `b` the background clicks falling in one trigger window.
pub fn expected_background_coincidences(
    signal_click_rate_hz: f64,
    background_rate_hz: f64,
    schedule: &PulseSchedule,
    total_time_s: f64,
) -> BackgroundExpectation {
    let period_s = schedule.period as f64 * 1e-9;
    let window_s = schedule.trigger.len() as f64 * 1e-9;
    let s = signal_click_rate_hz * period_s;
    let b = 0.5 * background_rate_hz * window_s;
    let n_bins = total_time_s / period_s;
    let signal_background = 2.0 * s * b * n_bins;
    let background_background = b * b * n_bins;
    let expected = signal_background + background_background;
    BackgroundExpectation { expected, stderr: expected.sqrt(), signal_background, background_background, n_bins }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clickstream::{window_clicks, Click};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stream(clicks: &[(u64, u8)], duration: u64) -> ClickStream {
        ClickStream::new(
            clicks.iter().map(|&(t, c)| Click::new(t, Channel::from_index(c).unwrap())).collect(),
            duration,
        )
        .unwrap()
    }

    // O(n²) pair enumeration over trigger-window clicks.
    fn brute_force(s: &ClickStream, sched: &PulseSchedule, max_lag: i64) -> Vec<u64> {
        let mut counts = vec![0u64; (2 * max_lag + 1) as usize];
        let binned: Vec<(u64, Channel)> = s
            .clicks()
            .iter()
            .filter_map(|c| match sched.classify(c.t) {
                Slot::Trigger(b) => Some((b, c.channel)),
                _ => None,
            })
            .collect();
        for &(b0, c0) in &binned {
            for &(b1, c1) in &binned {
                if c0 == Channel::Zero && c1 == Channel::One {
                    let d = b1 as i64 - b0 as i64;
                    if d.abs() <= max_lag {
                        counts[(d + max_lag) as usize] += 1;
                    }
                }
            }
        }
        counts
    }

    fn random_stream(rng: &mut ChaCha8Rng, n: usize, duration: u64) -> ClickStream {
        let mut v: Vec<(u64, u8)> = (0..n).map(|_| (rng.random_range(0..duration), rng.random_range(0..2u8))).collect();
        v.sort_by_key(|&(t, _)| t);
        stream(&v, duration)
    }

    #[test]
    fn single_pair_two_bins_apart() {
        let sched = PulseSchedule::default();
        let s = stream(&[(50_100, 0), (70_200, 1)], 100_000);
        let h = cross_correlate_binned(&window_clicks(&s, &sched), 30).unwrap();
        assert_eq!(h.count_at(2), Some(1));
        assert_eq!(h.total(), 1);
    }

    #[test]
    fn same_bin_pair_is_zero_lag() {
        let sched = PulseSchedule::default();
        let s = stream(&[(100, 1), (3_000, 0)], 10_000);
        let h = cross_correlate_binned(&window_clicks(&s, &sched), 5).unwrap();
        assert_eq!(h.count_at(0), Some(1));
        assert_eq!(h.total(), 1);
        assert_eq!(h.n_bins[5], 1);
    }

    #[test]
    fn zero_max_lag_is_rejected() {
        let w = WindowedClicks::new(0, 10);
        assert_eq!(cross_correlate_binned(&w, 0), Err(CorrelationError::ZeroMaxLag));
    }

    #[test]
    fn binned_matches_brute_force_on_random_streams() {
        let sched = PulseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            // 10³ bins.
            let s = random_stream(&mut rng, 600, 10_000_000);
            let h = cross_correlate_binned(&window_clicks(&s, &sched), 30).unwrap();
            assert_eq!(h.counts, brute_force(&s, &sched, 30));
        }
    }

    #[test]
    fn fine_pair_lands_in_left_closed_bin() {
        let sched = PulseSchedule::default();
        let s = stream(&[(1_000, 0), (1_300, 1)], 10_000);
        let h = cross_correlate_fine(&s, &sched, 200, 4_000).unwrap();
        assert_eq!(h.count_at(200), Some(1));
        assert_eq!(h.total(), 1);
        assert!(cross_correlate_fine(&s, &sched, 300, 4_000).is_err());
    }

    #[test]
    fn fine_histogram_of_swapped_stream_is_mirrored() {
        // Odd channel-1 times keep every difference off the bin edges, where
        // the half-open bins are not mirror-symmetric.
        let sched = PulseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v: Vec<(u64, u8)> = (0..2_000)
            .map(|_| {
                let ch = rng.random_range(0..2u8);
                let t = rng.random_range(0..5_000_000u64) * 2 + ch as u64;
                (t, ch)
            })
            .collect();
        v.sort_by_key(|&(t, _)| t);
        let s = stream(&v, 10_000_000);
        let h = cross_correlate_fine(&s, &sched, 200, 4_000).unwrap();
        let m = cross_correlate_fine(&s.swap_channels(), &sched, 200, 4_000).unwrap();
        let reversed: Vec<u64> = h.counts.iter().rev().copied().collect();
        assert_eq!(m.counts, reversed);
    }

    #[test]
    fn fine_integral_over_window_equals_zero_lag() {
        let sched = PulseSchedule::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = random_stream(&mut rng, 5_000, 20_000_000);
        let binned = cross_correlate_binned(&window_clicks(&s, &sched), 1).unwrap();
        let fine = cross_correlate_fine(&s, &sched, 200, 6_000).unwrap();
        assert_eq!(fine.integrate(4_000), binned.zero_lag().unwrap());
    }

    #[test]
    fn visibility_examples() {
        let r = VisibilityReport::from_counts(534.0, 1.0e4, 60).unwrap();
        assert_relative_eq!(r.visibility, 0.9466, epsilon = 1e-12);

        let mut h = CorrelationHistogram::zeros(LagAxis::Pulses { max_lag: 3 });
        h.counts = vec![4, 4, 4, 0, 4, 4, 4];
        assert_eq!(visibility(&h).unwrap().visibility, 1.0);
        h.counts = vec![4; 7];
        assert_eq!(visibility(&h).unwrap().visibility, 0.0);
        h.counts = vec![0; 7];
        assert_eq!(visibility(&h), Err(CorrelationError::UndefinedVisibility));
        h.counts = vec![0, 0, 0, 5, 0, 0, 0];
        assert_eq!(visibility(&h), Err(CorrelationError::UndefinedVisibility));
    }

    #[test]
    fn visibility_stderr_propagation() {
        let r = VisibilityReport::from_counts(100.0, 1000.0, 10).unwrap();
        // σ_z = 10, σ_m = 10, V = 0.9: σ_V² = (10/1000)² + (0.1·10/1000)²
        assert_relative_eq!(r.stderr, (1e-4f64 + 1e-6).sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn background_expectation_structure() {
        let sched = PulseSchedule::default();
        assert_eq!(expected_background_coincidences(500.0, 0.0, &sched, 100.0).expected, 0.0);
        let one = expected_background_coincidences(500.0, 84.0, &sched, 100.0);
        let two = expected_background_coincidences(500.0, 168.0, &sched, 100.0);
        assert_relative_eq!(two.signal_background, 2.0 * one.signal_background);
        assert_relative_eq!(two.background_background, 4.0 * one.background_background);
        assert!(two.expected > 2.0 * one.expected);
    }

    #[test]
    fn merge_adds_counts() {
        let mut a = CorrelationHistogram::zeros(LagAxis::Pulses { max_lag: 2 });
        let mut b = a.clone();
        a.counts = vec![1, 2, 3, 4, 5];
        b.counts = vec![5, 4, 3, 2, 1];
        a += &b;
        assert_eq!(a.counts, vec![6; 5]);
        let c = CorrelationHistogram::zeros(LagAxis::Pulses { max_lag: 3 });
        assert_eq!(a.merge(&c), Err(CorrelationError::AxisMismatch));
    }

    proptest! {
        #[test]
        fn pair_total_matches_oracle(seed in 0u64..10_000, n in 0usize..400, max_lag in 1u32..40) {
            let sched = PulseSchedule::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_stream(&mut rng, n, 2_000_000);
            let h = cross_correlate_binned(&window_clicks(&s, &sched), max_lag).unwrap();
            let oracle = brute_force(&s, &sched, max_lag as i64);
            prop_assert_eq!(h.total(), oracle.iter().sum::<u64>());
            prop_assert_eq!(h.counts, oracle);
        }
    }
}
