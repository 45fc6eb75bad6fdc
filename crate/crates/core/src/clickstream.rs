//! Detector click events, the trigger/recycle pulse schedule, and the
//! `.ptag` / CSV time-tag formats.
//!
//! A `.ptag` file is a headerless sequence of 9-byte records: an 8-byte
//! little-endian nanosecond timestamp followed by one channel byte (`0x00`
//! or `0x01`). Records must be timestamp-sorted. The CSV variant carries the
//! header `t_ns,channel` and one decimal record per line.
//!
//! Neither format stores the run duration. Readers set it to one past the
//! last timestamp (zero for an empty stream).

use std::fmt;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Size of one `.ptag` record in bytes.
pub const RECORD_LEN: usize = 9;

/// Detector index of the HBT pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Channel {
    Zero,
    One,
}

impl Channel {
    pub const BOTH: [Channel; 2] = [Channel::Zero, Channel::One];

    pub fn index(self) -> usize {
        match self {
            Channel::Zero => 0,
            Channel::One => 1,
        }
    }

    pub fn from_index(i: u8) -> Option<Channel> {
        match i {
            0 => Some(Channel::Zero),
            1 => Some(Channel::One),
            _ => None,
        }
    }

    pub fn other(self) -> Channel {
        match self {
            Channel::Zero => Channel::One,
            Channel::One => Channel::Zero,
        }
    }
}

/// A single detector event: nanoseconds since run start and the detector that fired.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Click {
    pub t: u64,
    pub channel: Channel,
}

impl Click {
    pub fn new(t: u64, channel: Channel) -> Self {
        Click { t, channel }
    }
}

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("truncated record at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("invalid channel byte {value:#04x} at byte offset {offset}")]
    BadChannel { offset: u64, value: u8 },
    #[error("timestamps out of order at record {index}: {t} after {prev}")]
    Unsorted { index: usize, prev: u64, t: u64 },
    #[error("click at t={t} ns is not before stream duration {duration} ns")]
    BeyondDuration { t: u64, duration: u64 },
    #[error("CSV line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

/// A run's worth of clicks, sorted by timestamp.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClickStream {
    clicks: Vec<Click>,
    duration: u64,
}

impl ClickStream {
    /// Validates ordering and that every click lies before `duration`.
    pub fn new(clicks: Vec<Click>, duration: u64) -> Result<Self, StreamError> {
        check_sorted(&clicks)?;
        if let Some(last) = clicks.last() {
            if last.t >= duration {
                return Err(StreamError::BeyondDuration { t: last.t, duration });
            }
        }
        Ok(ClickStream { clicks, duration })
    }

    /// Builds a stream whose duration ends one nanosecond after the last click.
    pub fn from_sorted(clicks: Vec<Click>) -> Result<Self, StreamError> {
        let duration = clicks.last().map_or(0, |c| c.t + 1);
        Self::new(clicks, duration)
    }

    pub fn empty(duration: u64) -> Self {
        ClickStream { clicks: Vec::new(), duration }
    }

    pub fn clicks(&self) -> &[Click] {
        &self.clicks
    }

    pub fn duration(&self) -> u64 {
        self.duration
    }

    pub fn len(&self) -> usize {
        self.clicks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clicks.is_empty()
    }

    pub fn into_clicks(self) -> Vec<Click> {
        self.clicks
    }

    /// Extends the run length; it can never shrink below the last click.
    pub fn with_duration(mut self, duration: u64) -> Result<Self, StreamError> {
        if let Some(last) = self.clicks.last() {
            if last.t >= duration {
                return Err(StreamError::BeyondDuration { t: last.t, duration });
            }
        }
        self.duration = duration;
        Ok(self)
    }

    /// Same stream with the two detectors exchanged.
    pub fn swap_channels(&self) -> ClickStream {
        ClickStream {
            clicks: self.clicks.iter().map(|c| Click::new(c.t, c.channel.other())).collect(),
            duration: self.duration,
        }
    }
}

fn check_sorted(clicks: &[Click]) -> Result<(), StreamError> {
    for (i, w) in clicks.windows(2).enumerate() {
        if w[1].t < w[0].t {
            return Err(StreamError::Unsorted { index: i + 1, prev: w[0].t, t: w[1].t });
        }
    }
    Ok(())
}

/// On-disk encoding of a click stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Ptag,
    Csv,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Ptag => "ptag",
            Format::Csv => "csv",
        }
    }

    /// Guesses the format from a file extension; anything but `csv` is binary.
    pub fn from_path(path: &std::path::Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Ptag,
        }
    }
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ptag" | "binary" => Ok(Format::Ptag),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown stream format `{other}` (expected ptag or csv)")),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.extension())
    }
}

pub fn read_clicks<R: Read>(source: R, format: Format) -> Result<ClickStream, StreamError> {
    let clicks = match format {
        Format::Ptag => read_ptag(source)?,
        Format::Csv => read_csv(source)?,
    };
    ClickStream::from_sorted(clicks)
}

fn read_ptag<R: Read>(source: R) -> Result<Vec<Click>, StreamError> {
    let mut reader = BufReader::new(source);
    let mut clicks = Vec::new();
    let mut record = [0u8; RECORD_LEN];
    let mut offset = 0u64;
    let mut prev = 0u64;
    loop {
        let filled = fill(&mut reader, &mut record)?;
        if filled == 0 {
            break;
        }
        if filled < RECORD_LEN {
            return Err(StreamError::Truncated { offset });
        }
        let t = u64::from_le_bytes(record[..8].try_into().expect("8-byte slice"));
        let channel =
            Channel::from_index(record[8]).ok_or(StreamError::BadChannel { offset: offset + 8, value: record[8] })?;
        if t < prev {
            return Err(StreamError::Unsorted { index: clicks.len(), prev, t });
        }
        prev = t;
        clicks.push(Click::new(t, channel));
        offset += RECORD_LEN as u64;
    }
    Ok(clicks)
}

// Reads until `buf` is full or EOF; returns the number of bytes read.
fn fill<R: Read>(reader: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match reader.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

fn read_csv<R: Read>(source: R) -> Result<Vec<Click>, StreamError> {
    let reader = BufReader::new(source);
    let mut clicks = Vec::new();
    let mut prev = 0u64;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        let line = line.trim();
        if i == 0 {
            if line.is_empty() {
                continue;
            }
            if line != "t_ns,channel" {
                return Err(StreamError::Csv {
                    line: lineno,
                    msg: format!("expected header `t_ns,channel`, found `{line}`"),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (t, ch) =
            line.split_once(',').ok_or_else(|| StreamError::Csv { line: lineno, msg: "expected two fields".into() })?;
        let t: u64 =
            t.trim().parse().map_err(|e| StreamError::Csv { line: lineno, msg: format!("bad timestamp: {e}") })?;
        let ch: u8 =
            ch.trim().parse().map_err(|e| StreamError::Csv { line: lineno, msg: format!("bad channel: {e}") })?;
        let channel = Channel::from_index(ch)
            .ok_or_else(|| StreamError::Csv { line: lineno, msg: format!("channel must be 0 or 1, got {ch}") })?;
        if t < prev {
            return Err(StreamError::Unsorted { index: clicks.len(), prev, t });
        }
        prev = t;
        clicks.push(Click::new(t, channel));
    }
    Ok(clicks)
}

pub fn write_clicks<W: Write>(stream: &ClickStream, mut sink: W, format: Format) -> io::Result<()> {
    match format {
        Format::Ptag => {
            let mut record = [0u8; RECORD_LEN];
            for c in stream.clicks() {
                record[..8].copy_from_slice(&c.t.to_le_bytes());
                record[8] = c.channel.index() as u8;
                sink.write_all(&record)?;
            }
        }
        Format::Csv => {
            writeln!(sink, "t_ns,channel")?;
            for c in stream.clicks() {
                writeln!(sink, "{},{}", c.t, c.channel.index())?;
            }
        }
    }
    sink.flush()
}

/// Encodes a stream into an in-memory buffer.
pub fn encode(stream: &ClickStream, format: Format) -> Vec<u8> {
    let mut buf = Vec::with_capacity(stream.len() * RECORD_LEN);
    write_clicks(stream, &mut buf, format).expect("writing to a Vec cannot fail");
    buf
}

/// Half-open offset interval `[start, end)` inside one schedule period, in ns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: u64,
    pub end: u64,
}

impl Window {
    pub const fn new(start: u64, end: u64) -> Self {
        Window { start, end }
    }

    pub fn len(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, offset: u64) -> bool {
        offset >= self.start && offset < self.end
    }

    fn overlaps(&self, other: &Window) -> bool {
        self.start < other.end && other.start < self.end
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("period must be positive")]
    ZeroPeriod,
    #[error("{0} window is empty")]
    EmptyWindow(&'static str),
    #[error("{name} window [{start}, {end}) does not fit in period {period} ns")]
    OutsidePeriod { name: &'static str, start: u64, end: u64, period: u64 },
    #[error("trigger and recycle windows overlap")]
    Overlap,
}

/// Periodic pulse layout: a trigger window for photon production and a
/// recycle window for repumping and monitoring, repeated every `period` ns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PulseSchedule {
    pub period: u64,
    pub trigger: Window,
    pub recycle: Window,
}

impl Default for PulseSchedule {
    fn default() -> Self {
        PulseSchedule { period: 10_000, trigger: Window::new(0, 4_000), recycle: Window::new(5_000, 9_000) }
    }
}

/// Where a timestamp falls within the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Trigger(u64),
    Recycle(u64),
    Outside,
}

impl PulseSchedule {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        if self.period == 0 {
            return Err(ScheduleError::ZeroPeriod);
        }
        for (name, w) in [("trigger", self.trigger), ("recycle", self.recycle)] {
            if w.is_empty() {
                return Err(ScheduleError::EmptyWindow(name));
            }
            if w.end > self.period {
                return Err(ScheduleError::OutsidePeriod { name, start: w.start, end: w.end, period: self.period });
            }
        }
        if self.trigger.overlaps(&self.recycle) {
            return Err(ScheduleError::Overlap);
        }
        Ok(())
    }

    /// Trigger repetition rate in Hz.
    pub fn trigger_rate(&self) -> f64 {
        1e9 / self.period as f64
    }

    pub fn bin_of(&self, t: u64) -> u64 {
        t / self.period
    }

    pub fn classify(&self, t: u64) -> Slot {
        let bin = t / self.period;
        let offset = t % self.period;
        if self.trigger.contains(offset) {
            Slot::Trigger(bin)
        } else if self.recycle.contains(offset) {
            Slot::Recycle(bin)
        } else {
            Slot::Outside
        }
    }

    /// Number of (possibly partial) periods covering `duration` ns.
    pub fn n_bins(&self, duration: u64) -> u64 {
        duration.div_ceil(self.period)
    }

    /// Fraction of wall-clock time covered by the recycle window.
    pub fn recycle_duty(&self) -> f64 {
        self.recycle.len() as f64 / self.period as f64
    }

    pub fn trigger_duty(&self) -> f64 {
        self.trigger.len() as f64 / self.period as f64
    }
}

/// A trigger-window click tagged with its trigger-pulse index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BinnedClick {
    pub bin: u64,
    pub t: u64,
}

/// Clicks sorted into trigger-pulse bins, per channel, plus recycle-window
/// counts per pulse. Bins cover the half-open range `[first_bin, end_bin)`.
/// Storage is sparse: only bins that saw clicks are present.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct WindowedClicks {
    pub first_bin: u64,
    pub end_bin: u64,
    trigger: [Vec<BinnedClick>; 2],
    recycle: Vec<(u64, u32)>,
    dropped: usize,
}

impl WindowedClicks {
    pub fn new(first_bin: u64, end_bin: u64) -> Self {
        WindowedClicks { first_bin, end_bin, ..Default::default() }
    }

    pub fn n_bins(&self) -> u64 {
        self.end_bin.saturating_sub(self.first_bin)
    }

    /// Trigger-window clicks of one channel, ordered by time.
    pub fn trigger_clicks(&self, channel: Channel) -> &[BinnedClick] {
        &self.trigger[channel.index()]
    }

    /// `(bin, count)` pairs for one channel, ascending by bin, zero bins omitted.
    pub fn trigger_counts(&self, channel: Channel) -> Vec<(u64, u64)> {
        let mut out: Vec<(u64, u64)> = Vec::new();
        for c in &self.trigger[channel.index()] {
            match out.last_mut() {
                Some((b, n)) if *b == c.bin => *n += 1,
                _ => out.push((c.bin, 1)),
            }
        }
        out
    }

    /// `(bin, count)` pairs of recycle-window clicks, ascending by bin.
    pub fn recycle_counts(&self) -> &[(u64, u32)] {
        &self.recycle
    }

    pub fn recycle_count(&self, bin: u64) -> u32 {
        self.recycle.binary_search_by_key(&bin, |&(b, _)| b).map_or(0, |i| self.recycle[i].1)
    }

    pub fn n_trigger(&self) -> usize {
        self.trigger[0].len() + self.trigger[1].len()
    }

    pub fn n_recycle(&self) -> usize {
        self.recycle.iter().map(|&(_, n)| n as usize).sum()
    }

    pub fn n_dropped(&self) -> usize {
        self.dropped
    }

    /// Adds a click; clicks must arrive in time order. Returns the slot it
    /// landed in, or `Slot::Outside` if it was dropped (outside both windows
    /// or outside the bin range).
    pub fn push(&mut self, schedule: &PulseSchedule, click: Click) -> Slot {
        let slot = schedule.classify(click.t);
        let in_range = |b: u64| b >= self.first_bin && b < self.end_bin;
        match slot {
            Slot::Trigger(bin) if in_range(bin) => {
                self.trigger[click.channel.index()].push(BinnedClick { bin, t: click.t });
                slot
            }
            Slot::Recycle(bin) if in_range(bin) => {
                match self.recycle.last_mut() {
                    Some((b, n)) if *b == bin => *n += 1,
                    _ => self.recycle.push((bin, 1)),
                }
                slot
            }
            _ => {
                self.dropped += 1;
                Slot::Outside
            }
        }
    }
}

/// Assigns each click to its trigger bin when its in-period offset lies in
/// the trigger window, counts recycle-window clicks per bin, and drops the rest.
pub fn window_clicks(stream: &ClickStream, schedule: &PulseSchedule) -> WindowedClicks {
    let mut w = WindowedClicks::new(0, schedule.n_bins(stream.duration()));
    for &c in stream.clicks() {
        w.push(schedule, c);
    }
    w
}

/// Windows only the clicks with `start <= t < end`, keeping whole trigger
/// bins that lie inside that interval.
pub fn window_span(stream: &ClickStream, schedule: &PulseSchedule, start: u64, end: u64) -> WindowedClicks {
    let first_bin = start.div_ceil(schedule.period);
    let end_bin = (end / schedule.period).max(first_bin);
    let mut w = WindowedClicks::new(first_bin, end_bin);
    let lo = stream.clicks().partition_point(|c| c.t < start);
    let hi = stream.clicks().partition_point(|c| c.t < end);
    for &c in &stream.clicks()[lo..hi] {
        w.push(schedule, c);
    }
    w
}
