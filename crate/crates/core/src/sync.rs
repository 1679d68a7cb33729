//! Stream synchronization.
//!
//! CAN rows are block-averaged down toward the frame rate, both streams are
//! searched for a stationary landmark (zero speed on the bus, unchanged
//! consecutive frames on camera), the landmark pair gives a constant clock
//! offset, and every frame is paired with the nearest CAN row under that
//! offset. Each recording group is aligned on its own landmark.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::canlog::CanFeatureRow;
use crate::videostream::{FrameRecord, Image};

pub const DEFAULT_FACTOR: usize = 25;
pub const DEFAULT_TOL_MS: f64 = 30.0;
pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_MIN_RUN: usize = 5;
pub const DEFAULT_DELTA_THRESH: f64 = 1e-3;
pub const DEFAULT_SEARCH_MS: f64 = 5000.0;

#[derive(Debug, Error)]
pub enum SyncError {
    #[error("empty input")]
    EmptyInput,
    #[error("downsampling factor must be positive")]
    ZeroFactor,
    #[error("invalid parameter: {0}")]
    InvalidParameter(&'static str),
    #[error("timestamps are not strictly increasing")]
    NotSorted,
    #[error("no stationary landmark found")]
    NoLandmark,
    #[error("at least two frames are needed, got {0}")]
    TooFewFrames(usize),
    #[error("no frames to join")]
    EmptyFrames,
    #[error("no CAN rows to join")]
    EmptyRows,
    #[error("segment {0} has no group assignment")]
    UnknownSegment(u32),
    #[error("validation group {0} is not present")]
    UnknownGroup(u8),
    #[error("split leaves the {0} side empty")]
    EmptySplit(&'static str),
    #[error("group {group}: {source}")]
    Group { group: u8, source: Box<SyncError> },
}

pub type Result<T> = std::result::Result<T, SyncError>;

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncedSample {
    pub timestamp_ms: f64,
    pub image: Image,
    /// Voltage, current, power, steering speed, speed.
    pub can_features: [f64; 5],
    pub steering_angle: f64,
    pub group_id: u8,
}

fn strictly_increasing(ts: impl Iterator<Item = f64>) -> bool {
    let mut prev = f64::NEG_INFINITY;
    ts.into_iter().all(|t| {
        let ok = t > prev;
        prev = t;
        ok
    })
}

/// Replaces each disjoint block of `factor` rows with its field-wise mean.
/// A trailing partial block is dropped.
pub fn downsample(rows: &[CanFeatureRow], factor: usize) -> Result<Vec<CanFeatureRow>> {
    if rows.is_empty() {
        return Err(SyncError::EmptyInput);
    }
    if factor == 0 {
        return Err(SyncError::ZeroFactor);
    }
    if !strictly_increasing(rows.iter().map(|r| r.timestamp_ms)) {
        return Err(SyncError::NotSorted);
    }
    if factor == 1 {
        return Ok(rows.to_vec());
    }
    Ok(rows
        .chunks_exact(factor)
        .map(|block| CanFeatureRow::mean_of(block).expect("non-empty block"))
        .collect())
}

/// Start index of the longest maximal run of `true` with length at least
/// `min_run`. Ties go to the earliest run.
pub(crate) fn longest_run(flags: impl IntoIterator<Item = bool>, min_run: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    let mut start = 0;
    let mut len = 0;
    let close = |start: usize, len: usize, best: &mut Option<(usize, usize)>| {
        if len >= min_run && best.map_or(true, |(_, l)| len > l) {
            *best = Some((start, len));
        }
    };
    for (i, f) in flags.into_iter().enumerate() {
        if f {
            if len == 0 {
                start = i;
            }
            len += 1;
        } else {
            close(start, len, &mut best);
            len = 0;
        }
    }
    close(start, len, &mut best);
    best
}

/// Timestamp of the first row of the longest run with `|speed| <= eps`.
pub fn detect_zero_speed_landmark(rows: &[CanFeatureRow], eps: f64, min_run: usize) -> Result<f64> {
    if rows.is_empty() {
        return Err(SyncError::EmptyInput);
    }
    if !(eps >= 0.0) || min_run == 0 {
        return Err(SyncError::InvalidParameter("eps must be >= 0 and min_run >= 1"));
    }
    longest_run(rows.iter().map(|r| r.speed.abs() <= eps), min_run)
        .map(|(start, _)| rows[start].timestamp_ms)
        .ok_or(SyncError::NoLandmark)
}

/// Still-frame landmark from precomputed consecutive differences;
/// `diffs[i]` compares frame `i` with frame `i + 1`.
pub fn still_landmark_from_diffs(
    timestamps: &[f64],
    diffs: &[f64],
    delta_thresh: f64,
    min_run: usize,
) -> Result<f64> {
    if timestamps.len() < 2 {
        return Err(SyncError::TooFewFrames(timestamps.len()));
    }
    if diffs.len() + 1 != timestamps.len() {
        return Err(SyncError::InvalidParameter("need one difference per consecutive frame pair"));
    }
    if !(delta_thresh > 0.0) || min_run == 0 {
        return Err(SyncError::InvalidParameter("delta_thresh must be > 0 and min_run >= 1"));
    }
    longest_run(diffs.iter().map(|&d| d <= delta_thresh), min_run)
        .map(|(start, _)| timestamps[start])
        .ok_or(SyncError::NoLandmark)
}

/// Mean absolute difference between consecutive frames; geometry changes
/// count as motion.
pub fn frame_differences(frames: &[(FrameRecord, Image)]) -> Vec<f64> {
    frames
        .windows(2)
        .map(|w| w[0].1.mean_abs_diff(&w[1].1).unwrap_or(f64::INFINITY))
        .collect()
}

/// Timestamp of the first frame of the longest run of near-identical
/// consecutive frames.
pub fn detect_still_frames(frames: &[(FrameRecord, Image)], delta_thresh: f64, min_run: usize) -> Result<f64> {
    if frames.len() < 2 {
        return Err(SyncError::TooFewFrames(frames.len()));
    }
    let ts: Vec<f64> = frames.iter().map(|(r, _)| r.timestamp_ms).collect();
    still_landmark_from_diffs(&ts, &frame_differences(frames), delta_thresh, min_run)
}

/// Offset that maps CAN timestamps onto the video clock.
pub fn align(can_landmark_ms: f64, video_landmark_ms: f64) -> f64 {
    video_landmark_ms - can_landmark_ms
}

/// Frames paired with CAN rows, plus how many frames found no row in tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinResult {
    pub samples: Vec<SyncedSample>,
    pub dropped: usize,
    /// `|frame_t - (row_t + offset)|` per kept sample.
    pub skews_ms: Vec<f64>,
}

/// Attaches to every frame the CAN row nearest under `offset_ms`, if it is
/// within `tol_ms`. Equidistant rows resolve to the earlier one.
pub fn join(
    frames: &[(FrameRecord, Image)],
    rows: &[CanFeatureRow],
    offset_ms: f64,
    tol_ms: f64,
    group_map: &BTreeMap<u32, u8>,
) -> Result<JoinResult> {
    if frames.is_empty() {
        return Err(SyncError::EmptyFrames);
    }
    if rows.is_empty() {
        return Err(SyncError::EmptyRows);
    }
    if !(tol_ms > 0.0) || !offset_ms.is_finite() {
        return Err(SyncError::InvalidParameter("tol_ms must be > 0 and offset finite"));
    }
    if !strictly_increasing(frames.iter().map(|(r, _)| r.timestamp_ms))
        || !strictly_increasing(rows.iter().map(|r| r.timestamp_ms))
    {
        return Err(SyncError::NotSorted);
    }
    let shifted: Vec<f64> = rows.iter().map(|r| r.timestamp_ms + offset_ms).collect();
    let mut out = JoinResult { samples: Vec::new(), dropped: 0, skews_ms: Vec::new() };
    for (rec, img) in frames {
        let group_id = *group_map.get(&rec.segment_id).ok_or(SyncError::UnknownSegment(rec.segment_id))?;
        let t = rec.timestamp_ms;
        let upper = shifted.partition_point(|&s| s < t);
        let candidates = [upper.checked_sub(1), (upper < shifted.len()).then_some(upper)];
        let Some((idx, dist)) = candidates
            .into_iter()
            .flatten()
            .map(|i| (i, (t - shifted[i]).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
        else {
            unreachable!("rows are non-empty")
        };
        if dist <= tol_ms {
            let row = &rows[idx];
            out.samples.push(SyncedSample {
                timestamp_ms: t,
                image: img.clone(),
                can_features: row.features(),
                steering_angle: row.steering_angle,
                group_id,
            });
            out.skews_ms.push(dist);
        } else {
            out.dropped += 1;
        }
    }
    Ok(out)
}

/// Partitions samples by group membership, keeping order on both sides.
pub fn split_groups<'a>(
    samples: &'a [SyncedSample],
    val_groups: &BTreeSet<u8>,
) -> Result<(Vec<&'a SyncedSample>, Vec<&'a SyncedSample>)> {
    let present: BTreeSet<u8> = samples.iter().map(|s| s.group_id).collect();
    if let Some(&g) = val_groups.iter().find(|g| !present.contains(g)) {
        return Err(SyncError::UnknownGroup(g));
    }
    let (val, train): (Vec<_>, Vec<_>) = samples.iter().partition(|s| val_groups.contains(&s.group_id));
    if train.is_empty() {
        return Err(SyncError::EmptySplit("training"));
    }
    if val.is_empty() {
        return Err(SyncError::EmptySplit("validation"));
    }
    Ok((train, val))
}

/// Parameters of the per-group synchronization pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct SyncConfig {
    pub factor: usize,
    pub tol_ms: f64,
    pub eps: f64,
    pub min_run: usize,
    pub delta_thresh: f64,
    /// Margin around a group's frame span, on the unified clock, in which
    /// its CAN landmark is searched.
    pub search_ms: f64,
}

impl Default for SyncConfig {
    fn default() -> Self {
        Self {
            factor: DEFAULT_FACTOR,
            tol_ms: DEFAULT_TOL_MS,
            eps: DEFAULT_EPS,
            min_run: DEFAULT_MIN_RUN,
            delta_thresh: DEFAULT_DELTA_THRESH,
            search_ms: DEFAULT_SEARCH_MS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SyncReport {
    /// Recovered offset per group.
    pub offset_ms: BTreeMap<u8, f64>,
    pub matched: usize,
    pub dropped: usize,
    /// Matched sample count per group.
    pub groups: BTreeMap<u8, usize>,
}

/// Aligns and joins every group independently. `rows` are the dense
/// (undownsampled) CAN rows; landmarks are found at full rate, joining uses
/// the `factor`-downsampled rows. `frames` must be on the unified clock.
pub fn synchronize(
    rows: &[CanFeatureRow],
    frames: &[(FrameRecord, Image)],
    group_map: &BTreeMap<u32, u8>,
    cfg: &SyncConfig,
) -> Result<(Vec<SyncedSample>, SyncReport)> {
    if frames.is_empty() {
        return Err(SyncError::EmptyFrames);
    }
    if rows.is_empty() {
        return Err(SyncError::EmptyRows);
    }
    let coarse = downsample(rows, cfg.factor)?;
    let mut by_group: BTreeMap<u8, Vec<(FrameRecord, Image)>> = BTreeMap::new();
    for f in frames {
        let g = *group_map.get(&f.0.segment_id).ok_or(SyncError::UnknownSegment(f.0.segment_id))?;
        by_group.entry(g).or_default().push(f.clone());
    }
    let mut report = SyncReport {
        offset_ms: BTreeMap::new(),
        matched: 0,
        dropped: 0,
        groups: BTreeMap::new(),
    };
    let mut samples = Vec::new();
    for (group, group_frames) in by_group {
        let wrap = |e: SyncError| SyncError::Group { group, source: Box::new(e) };
        let first = group_frames[0].0.timestamp_ms;
        let last = group_frames[group_frames.len() - 1].0.timestamp_ms;
        let lo = rows.partition_point(|r| r.timestamp_ms < first - cfg.search_ms);
        let hi = rows.partition_point(|r| r.timestamp_ms <= last + cfg.search_ms);
        let can_lm = detect_zero_speed_landmark(&rows[lo..hi], cfg.eps, cfg.min_run).map_err(wrap)?;
        let video_lm = detect_still_frames(&group_frames, cfg.delta_thresh, cfg.min_run).map_err(wrap)?;
        let offset = align(can_lm, video_lm);
        let joined = join(&group_frames, &coarse, offset, cfg.tol_ms, group_map).map_err(wrap)?;
        report.offset_ms.insert(group, offset);
        report.matched += joined.samples.len();
        report.dropped += joined.dropped;
        report.groups.insert(group, joined.samples.len());
        samples.extend(joined.samples);
    }
    samples.sort_by(|a, b| a.timestamp_ms.total_cmp(&b.timestamp_ms));
    Ok((samples, report))
}
