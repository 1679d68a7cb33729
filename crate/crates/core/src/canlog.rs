//! Decoded CAN signal logs.
//!
//! The capture arrives as a stream of already-decoded, asynchronously
//! refreshed named signals. This module parses that stream, keeps only the
//! signals the model consumes, and densifies the asynchronous updates onto a
//! fixed tick so every row carries a value for every field.
//!
//! Log format (UTF-8, LF, no quoting):
//!
//! ```text
//! timestamp_ms,signal,value
//! 1000,Speed,35.790981
//! 1000.5,Voltage,400.368
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use thiserror::Error;

/// Header line of a CAN signal log.
pub const LOG_HEADER: &str = "timestamp_ms,signal,value";

/// Header line of a densified feature-row file.
pub const ROWS_HEADER: &str = "timestamp_ms,voltage,current,power,steering_speed,speed,steering_angle";

/// Default densification tick; the bus refreshes once per millisecond.
pub const DEFAULT_TICK_MS: f64 = 1.0;

/// Default power-consistency tolerance in kilowatts.
pub const DEFAULT_POWER_TOL_KW: f64 = 0.01;

#[derive(Debug, Error)]
pub enum CanLogError {
    #[error("missing or wrong header, expected `{expected}`")]
    MissingHeader { expected: &'static str },
    #[error("malformed line {0}")]
    MalformedLine(usize),
    #[error("non-finite value on line {0}")]
    NonFiniteValue(usize),
    #[error("signal `{0}` has out-of-order timestamps")]
    NonMonotonicSeries(String),
    #[error("signal `{0}` has no updates")]
    EmptySeries(String),
    #[error("signal `{0}` has no update at or before the window start")]
    NoInitialValue(String),
    #[error("invalid window: tick {tick_ms} ms over [{t_start}, {t_end})")]
    InvalidWindow { tick_ms: f64, t_start: f64, t_end: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("signal name `{0}` cannot be written to a log")]
    InvalidSignalName(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CanLogError>;

/// One asynchronous observation of a named signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalUpdate {
    pub timestamp_ms: f64,
    pub signal: String,
    pub value: f64,
}

impl SignalUpdate {
    pub fn new(timestamp_ms: f64, signal: impl Into<String>, value: f64) -> Self {
        Self { timestamp_ms, signal: signal.into(), value }
    }
}

/// Dense per-tick vector of the five model features plus the steering label.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CanFeatureRow {
    pub timestamp_ms: f64,
    /// Battery voltage, volts.
    pub voltage: f64,
    /// Battery current, amperes.
    pub current: f64,
    /// Battery power, kilowatts.
    pub power: f64,
    /// Steering wheel rate, degrees per second.
    pub steering_speed: f64,
    pub speed: f64,
    /// Supervision label, degrees.
    pub steering_angle: f64,
}

impl CanFeatureRow {
    /// Model inputs in fixed order: voltage, current, power, steering speed, speed.
    pub fn features(&self) -> [f64; 5] {
        [self.voltage, self.current, self.power, self.steering_speed, self.speed]
    }

    fn fields(&self) -> [f64; 7] {
        [
            self.timestamp_ms,
            self.voltage,
            self.current,
            self.power,
            self.steering_speed,
            self.speed,
            self.steering_angle,
        ]
    }

    fn from_fields(f: [f64; 7]) -> Self {
        Self {
            timestamp_ms: f[0],
            voltage: f[1],
            current: f[2],
            power: f[3],
            steering_speed: f[4],
            speed: f[5],
            steering_angle: f[6],
        }
    }

    /// |P - V*I/1000| in kilowatts.
    pub fn power_residual(&self) -> f64 {
        (self.power - self.voltage * self.current / 1000.0).abs()
    }

    /// Element-wise arithmetic mean of a non-empty block, timestamp included.
    pub fn mean_of(block: &[CanFeatureRow]) -> Option<CanFeatureRow> {
        if block.is_empty() {
            return None;
        }
        let mut acc = [0.0; 7];
        for row in block {
            for (a, v) in acc.iter_mut().zip(row.fields()) {
                *a += v;
            }
        }
        let n = block.len() as f64;
        Some(Self::from_fields(acc.map(|a| a / n)))
    }
}

/// Log signal names feeding each `CanFeatureRow` field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSignals {
    pub voltage: String,
    pub current: String,
    pub power: String,
    pub steering_speed: String,
    pub speed: String,
    pub steering_angle: String,
}

impl Default for FeatureSignals {
    fn default() -> Self {
        Self {
            voltage: "Voltage".into(),
            current: "Current".into(),
            power: "Power".into(),
            steering_speed: "SteeringSpeed".into(),
            speed: "Speed".into(),
            steering_angle: "SteeringAngle".into(),
        }
    }
}

impl FeatureSignals {
    /// Builds the mapping from six names given in field order.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Option<Self> {
        match names {
            [v, c, p, ss, s, a] => Some(Self {
                voltage: v.as_ref().to_string(),
                current: c.as_ref().to_string(),
                power: p.as_ref().to_string(),
                steering_speed: ss.as_ref().to_string(),
                speed: s.as_ref().to_string(),
                steering_angle: a.as_ref().to_string(),
            }),
            _ => None,
        }
    }

    /// Names in field order.
    pub fn names(&self) -> [&str; 6] {
        [
            &self.voltage,
            &self.current,
            &self.power,
            &self.steering_speed,
            &self.speed,
            &self.steering_angle,
        ]
    }

    pub fn wanted(&self) -> BTreeSet<String> {
        self.names().iter().map(|s| s.to_string()).collect()
    }
}

/// A single signal's `(timestamp_ms, value)` points in source order.
pub type Series = Vec<(f64, f64)>;

fn check_header(line: Option<std::io::Result<String>>, expected: &'static str) -> Result<()> {
    match line {
        Some(Ok(h)) if h.trim_end_matches('\r') == expected => Ok(()),
        Some(Err(e)) => Err(e.into()),
        _ => Err(CanLogError::MissingHeader { expected }),
    }
}

/// Parses a CAN signal log. Updates come back in file order.
pub fn parse_can_log<R: BufRead>(source: R) -> Result<Vec<SignalUpdate>> {
    let mut lines = source.lines();
    check_header(lines.next(), LOG_HEADER)?;
    let mut out = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        let line = line.trim_end_matches('\r');
        let mut fields = line.split(',');
        let (Some(ts), Some(name), Some(val), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(CanLogError::MalformedLine(line_no));
        };
        let timestamp_ms: f64 = ts.parse().map_err(|_| CanLogError::MalformedLine(line_no))?;
        if !timestamp_ms.is_finite() || timestamp_ms < 0.0 || name.is_empty() {
            return Err(CanLogError::MalformedLine(line_no));
        }
        let value: f64 = val.parse().map_err(|_| CanLogError::MalformedLine(line_no))?;
        if !value.is_finite() {
            return Err(CanLogError::NonFiniteValue(line_no));
        }
        out.push(SignalUpdate { timestamp_ms, signal: name.to_string(), value });
    }
    Ok(out)
}

/// Writes updates in the log format. `{}` formatting of `f64` is
/// shortest-round-trip, so re-parsing is exact.
pub fn write_can_log<W: Write>(updates: &[SignalUpdate], mut out: W) -> Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for u in updates {
        if u.signal.is_empty() || u.signal.contains([',', '\n', '\r']) {
            return Err(CanLogError::InvalidSignalName(u.signal.clone()));
        }
        writeln!(out, "{},{},{}", u.timestamp_ms, u.signal, u.value)?;
    }
    Ok(())
}

/// Keeps only the wanted signals. Every wanted name gets an entry, possibly
/// empty. A series whose timestamps go backwards is rejected.
pub fn select_signals(
    updates: &[SignalUpdate],
    wanted: &BTreeSet<String>,
) -> Result<BTreeMap<String, Series>> {
    let mut map: BTreeMap<String, Series> =
        wanted.iter().map(|w| (w.clone(), Vec::new())).collect();
    for u in updates {
        if let Some(series) = map.get_mut(&u.signal) {
            series.push((u.timestamp_ms, u.value));
        }
    }
    for (name, series) in &map {
        if series.windows(2).any(|w| w[1].0 < w[0].0) {
            return Err(CanLogError::NonMonotonicSeries(name.clone()));
        }
    }
    Ok(map)
}

/// Number of ticks `t_start + i*tick_ms` strictly below `t_end`.
pub(crate) fn tick_count(tick_ms: f64, t_start: f64, t_end: f64) -> usize {
    let mut n = ((t_end - t_start) / tick_ms).ceil().max(0.0) as usize;
    while n > 0 && t_start + (n - 1) as f64 * tick_ms >= t_end {
        n -= 1;
    }
    while t_start + n as f64 * tick_ms < t_end {
        n += 1;
    }
    n
}

/// Forward-fill cursor over one series.
struct Hold<'a> {
    series: &'a [(f64, f64)],
    next: usize,
}

impl Hold<'_> {
    fn value_at(&mut self, t: f64) -> f64 {
        while self.next < self.series.len() && self.series[self.next].0 <= t {
            self.next += 1;
        }
        // next >= 1 is guaranteed by the initial-value check
        self.series[self.next - 1].1
    }
}

/// Densifies asynchronous series onto ticks in `[t_start, t_end)`, holding
/// each signal's most recent update.
pub fn sample_and_hold(
    series_map: &BTreeMap<String, Series>,
    signals: &FeatureSignals,
    tick_ms: f64,
    t_start: f64,
    t_end: f64,
) -> Result<Vec<CanFeatureRow>> {
    if !(tick_ms > 0.0 && tick_ms.is_finite() && t_start.is_finite() && t_end.is_finite())
        || t_start >= t_end
    {
        return Err(CanLogError::InvalidWindow { tick_ms, t_start, t_end });
    }
    let mut holds = Vec::with_capacity(6);
    for name in signals.names() {
        let series = series_map.get(name).map(Vec::as_slice).unwrap_or(&[]);
        if series.is_empty() {
            return Err(CanLogError::EmptySeries(name.to_string()));
        }
        if series[0].0 > t_start {
            return Err(CanLogError::NoInitialValue(name.to_string()));
        }
        holds.push(Hold { series, next: 0 });
    }
    let n = tick_count(tick_ms, t_start, t_end);
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let t = t_start + i as f64 * tick_ms;
        let mut f = [t, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        for (slot, hold) in f[1..].iter_mut().zip(holds.iter_mut()) {
            *slot = hold.value_at(t);
        }
        rows.push(CanFeatureRow::from_fields(f));
    }
    Ok(rows)
}

/// Outcome of the power/voltage/current consistency check.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub pass: bool,
    pub tol_kw: f64,
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// Indices of rows whose residual exceeds the tolerance.
    pub offending: Vec<usize>,
}

/// Checks `|power - voltage*current/1000| <= tol_kw` on every row.
pub fn validate_rows(rows: &[CanFeatureRow], tol_kw: f64) -> Result<ValidationReport> {
    if rows.is_empty() {
        return Err(CanLogError::EmptyInput);
    }
    if !(tol_kw > 0.0) {
        return Err(CanLogError::InvalidTolerance(tol_kw));
    }
    let residuals: Vec<f64> = rows.iter().map(CanFeatureRow::power_residual).collect();
    let offending: Vec<usize> = residuals
        .iter()
        .enumerate()
        .filter(|(_, r)| !(**r <= tol_kw))
        .map(|(i, _)| i)
        .collect();
    let max_residual = residuals.iter().copied().fold(0.0, f64::max);
    Ok(ValidationReport { pass: offending.is_empty(), tol_kw, residuals, max_residual, offending })
}

/// Reads a feature-row file. Rows must be finite and strictly increasing in time.
pub fn read_rows<R: BufRead>(source: R) -> Result<Vec<CanFeatureRow>> {
    let mut lines = source.lines();
    check_header(lines.next(), ROWS_HEADER)?;
    let mut rows: Vec<CanFeatureRow> = Vec::new();
    for (idx, line) in lines.enumerate() {
        let line_no = idx + 2;
        let line = line?;
        let mut f = [0.0f64; 7];
        let mut count = 0;
        for (i, tok) in line.trim_end_matches('\r').split(',').enumerate() {
            if i >= 7 {
                return Err(CanLogError::MalformedLine(line_no));
            }
            f[i] = tok.parse().map_err(|_| CanLogError::MalformedLine(line_no))?;
            count += 1;
        }
        if count != 7 {
            return Err(CanLogError::MalformedLine(line_no));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(CanLogError::NonFiniteValue(line_no));
        }
        let row = CanFeatureRow::from_fields(f);
        if rows.last().is_some_and(|prev| prev.timestamp_ms >= row.timestamp_ms) {
            return Err(CanLogError::MalformedLine(line_no));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_rows<W: Write>(rows: &[CanFeatureRow], mut out: W) -> Result<()> {
    writeln!(out, "{ROWS_HEADER}")?;
    for r in rows {
        let f = r.fields();
        writeln!(out, "{},{},{},{},{},{},{}", f[0], f[1], f[2], f[3], f[4], f[5], f[6])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<SignalUpdate>> {
        parse_can_log(text.as_bytes())
    }

    fn constant_map(names: &FeatureSignals, t0: f64, v: f64) -> BTreeMap<String, Series> {
        names.names().iter().map(|n| (n.to_string(), vec![(t0, v)])).collect()
    }

    #[test]
    fn parses_table_speed_value() {
        let ups = parse("timestamp_ms,signal,value\n1000,Speed,35.790981\n").unwrap();
        assert_eq!(ups, vec![SignalUpdate::new(1000.0, "Speed", 35.790981)]);
    }

    #[test]
    fn header_only_is_empty() {
        assert!(parse("timestamp_ms,signal,value\n").unwrap().is_empty());
        assert!(parse("timestamp_ms,signal,value").unwrap().is_empty());
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse(""), Err(CanLogError::MissingHeader { .. })));
        assert!(matches!(parse("t,s,v\n1,a,2\n"), Err(CanLogError::MissingHeader { .. })));
        assert!(matches!(
            parse("timestamp_ms,signal,value\n1000,Speed\n"),
            Err(CanLogError::MalformedLine(2))
        ));
        assert!(matches!(
            parse("timestamp_ms,signal,value\n1,a,1\n2,a,1,3\n"),
            Err(CanLogError::MalformedLine(3))
        ));
        assert!(matches!(
            parse("timestamp_ms,signal,value\nx,a,1\n"),
            Err(CanLogError::MalformedLine(2))
        ));
        assert!(matches!(
            parse("timestamp_ms,signal,value\n-1,a,1\n"),
            Err(CanLogError::MalformedLine(2))
        ));
        assert!(matches!(
            parse("timestamp_ms,signal,value\n1,,1\n"),
            Err(CanLogError::MalformedLine(2))
        ));
        assert!(matches!(
            parse("timestamp_ms,signal,value\n1,a,NaN\n"),
            Err(CanLogError::NonFiniteValue(2))
        ));
        assert!(matches!(
            parse("timestamp_ms,signal,value\n1,a,inf\n"),
            Err(CanLogError::NonFiniteValue(2))
        ));
    }

    #[test]
    fn select_reduces_248_names_to_six() {
        let signals = FeatureSignals::default();
        let mut names: Vec<String> = (0..242).map(|i| format!("Param{i}")).collect();
        names.extend(signals.names().iter().map(|s| s.to_string()));
        assert_eq!(names.iter().collect::<BTreeSet<_>>().len(), 248);
        let updates: Vec<SignalUpdate> = (0..3)
            .flat_map(|t| names.iter().map(move |n| SignalUpdate::new(t as f64, n.clone(), 1.0)))
            .collect();
        let map = select_signals(&updates, &signals.wanted()).unwrap();
        assert_eq!(map.len(), 6);
        assert!(map.values().all(|s| s.len() == 3));
    }

    #[test]
    fn select_identity_and_empty() {
        let updates = vec![
            SignalUpdate::new(0.0, "A", 1.0),
            SignalUpdate::new(1.0, "B", 2.0),
            SignalUpdate::new(2.0, "A", 3.0),
        ];
        let all: BTreeSet<String> = ["A", "B"].iter().map(|s| s.to_string()).collect();
        let map = select_signals(&updates, &all).unwrap();
        assert_eq!(map.len(), 2);
        assert_eq!(map["A"], vec![(0.0, 1.0), (2.0, 3.0)]);

        let speed: BTreeSet<String> = ["Speed".to_string()].into();
        let map = select_signals(&updates, &speed).unwrap();
        assert_eq!(map["Speed"], Vec::<(f64, f64)>::new());
    }

    #[test]
    fn select_rejects_out_of_order() {
        let updates = vec![SignalUpdate::new(5.0, "A", 1.0), SignalUpdate::new(4.0, "A", 1.0)];
        let wanted: BTreeSet<String> = ["A".to_string()].into();
        assert!(matches!(
            select_signals(&updates, &wanted),
            Err(CanLogError::NonMonotonicSeries(n)) if n == "A"
        ));
    }

    #[test]
    fn forward_fill_holds_last_value() {
        let signals = FeatureSignals::default();
        let mut map = constant_map(&signals, 0.0, 1.0);
        map.insert("Voltage".into(), vec![(0.0, 400.0), (10.0, 401.0)]);
        let rows = sample_and_hold(&map, &signals, 1.0, 0.0, 12.0).unwrap();
        assert_eq!(rows.len(), 12);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.timestamp_ms, i as f64);
            assert_eq!(r.voltage, if i < 10 { 400.0 } else { 401.0 });
        }
    }

    #[test]
    fn constant_series_give_identical_rows() {
        let signals = FeatureSignals::default();
        let map = constant_map(&signals, 0.0, 3.5);
        let rows = sample_and_hold(&map, &signals, 0.5, 0.0, 20.0).unwrap();
        assert_eq!(rows.len(), 40);
        assert!(rows.iter().all(|r| r.features() == rows[0].features()));
    }

    #[test]
    fn hold_errors() {
        let signals = FeatureSignals::default();
        let mut map = constant_map(&signals, 0.0, 1.0);
        map.insert("Speed".into(), vec![(5.0, 10.0)]);
        assert!(matches!(
            sample_and_hold(&map, &signals, 1.0, 0.0, 10.0),
            Err(CanLogError::NoInitialValue(n)) if n == "Speed"
        ));
        map.insert("Speed".into(), vec![]);
        assert!(matches!(
            sample_and_hold(&map, &signals, 1.0, 0.0, 10.0),
            Err(CanLogError::EmptySeries(_))
        ));
        map.remove("Speed");
        assert!(matches!(
            sample_and_hold(&map, &signals, 1.0, 0.0, 10.0),
            Err(CanLogError::EmptySeries(_))
        ));
        let map = constant_map(&signals, 0.0, 1.0);
        assert!(sample_and_hold(&map, &signals, 0.0, 0.0, 10.0).is_err());
        assert!(sample_and_hold(&map, &signals, 1.0, 10.0, 10.0).is_err());
    }

    #[test]
    fn tick_count_is_exact_on_awkward_steps() {
        assert_eq!(tick_count(0.1, 0.0, 1.0), 10);
        assert_eq!(tick_count(1.0, 0.0, 12.0), 12);
        assert_eq!(tick_count(1.0, 0.0, 11.5), 12);
        assert_eq!(tick_count(3.0, 0.0, 10.0), 4);
    }

    #[test]
    fn validate_rows_cases() {
        let row = |v, i, p| CanFeatureRow { voltage: v, current: i, power: p, ..Default::default() };
        let r = validate_rows(&[row(400.368, -110.420, -44.208831)], 0.01).unwrap();
        assert!(r.pass);
        // hand product: 400.368 * -110.420 / 1000 = -44.20863456
        assert!((r.residuals[0] - 0.00019644).abs() < 1e-9);

        let r = validate_rows(&[row(100.0, 10.0, 1.0)], 0.01).unwrap();
        assert!(r.pass);
        assert_eq!(r.residuals[0], 0.0);

        let r = validate_rows(&[row(100.0, 10.0, 1.0), row(100.0, 10.0, 2.0)], 0.01).unwrap();
        assert!(!r.pass);
        assert_eq!(r.residuals[1], 1.0);
        assert_eq!(r.offending, vec![1]);

        assert!(matches!(validate_rows(&[], 0.01), Err(CanLogError::EmptyInput)));
        assert!(matches!(
            validate_rows(&[row(1.0, 1.0, 0.001)], 0.0),
            Err(CanLogError::InvalidTolerance(_))
        ));
    }

    #[test]
    fn rows_file_round_trip() {
        let rows: Vec<CanFeatureRow> = (0..5)
            .map(|i| CanFeatureRow {
                timestamp_ms: i as f64 * 25.0 + 12.0,
                voltage: 400.1 + i as f64 * 0.1,
                current: -110.42,
                power: -44.2,
                steering_speed: 2.583333,
                speed: 35.790981,
                steering_angle: -0.125,
            })
            .collect();
        let mut buf = Vec::new();
        write_rows(&rows, &mut buf).unwrap();
        assert_eq!(read_rows(buf.as_slice()).unwrap(), rows);
    }

    #[test]
    fn rows_file_rejects_bad_input() {
        let hdr = ROWS_HEADER;
        assert!(read_rows(format!("{hdr}\n1,2,3\n").as_bytes()).is_err());
        assert!(read_rows(format!("{hdr}\n2,1,1,1,1,1,1\n1,1,1,1,1,1,1\n").as_bytes()).is_err());
        assert!(read_rows("nope\n".as_bytes()).is_err());
    }

    #[test]
    fn write_rejects_unserializable_names() {
        let ups = vec![SignalUpdate::new(0.0, "a,b", 1.0)];
        assert!(matches!(
            write_can_log(&ups, Vec::new()),
            Err(CanLogError::InvalidSignalName(_))
        ));
    }
}
