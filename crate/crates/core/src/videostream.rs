//! Front-camera frame streams.
//!
//! Recordings are exported as one image per frame and described by a
//! manifest (`segment_id,frame_index,timestamp_ms,path`). Each dashcam
//! segment carries its own local clock; [`concatenate_segments`] places the
//! segments on one clock, leaving room for the pause while the dashcam saves.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MANIFEST_HEADER: &str = "segment_id,frame_index,timestamp_ms,path";

/// Dashcam frame rate.
pub const DEFAULT_FPS: f64 = 36.0;

/// Pause between segments while the dashcam saves, in milliseconds.
pub const DEFAULT_SAVE_GAP_MS: f64 = 203_000.0;

#[derive(Debug, Error)]
pub enum VideoError {
    #[error("missing or wrong manifest header, expected `{MANIFEST_HEADER}`")]
    MissingHeader,
    #[error("malformed manifest line {0}")]
    MalformedLine(usize),
    #[error("frame indices not strictly increasing in segment {0}")]
    NonMonotonicFrameIndex(u32),
    #[error("timestamps not strictly increasing in segment {0}")]
    NonMonotonicTimestamps(u32),
    #[error("segment ids must run 1, 2, 3, ... in order; found {found} where {expected} was expected")]
    NonConsecutiveSegments { expected: u32, found: u32 },
    #[error("no frames in the stream")]
    EmptySegment,
    #[error("frame spacing in segment {segment_id} is {spacing_ms} ms, expected {expected_ms} ms")]
    FrameRateMismatch { segment_id: u32, spacing_ms: f64, expected_ms: f64 },
    #[error("unsupported image format")]
    UnsupportedFormat,
    #[error("malformed image header")]
    MalformedHeader,
    #[error("unsupported maxval {0}, only 255 is accepted")]
    BadMaxval(u32),
    #[error("image data truncated: expected {expected} bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("image dimensions must be at least 1x1")]
    ZeroDimension,
    #[error("image has {channels} channels, cannot encode as PGM/PPM")]
    UnsupportedChannels { channels: usize },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VideoError>;

/// One exported frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameRecord {
    pub segment_id: u32,
    pub frame_index: u64,
    pub timestamp_ms: f64,
    pub path: PathBuf,
}

/// Decoded pixel grid. Pixels are row-major, interleaved by channel, in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Self {
        assert_eq!(pixels.len(), height * width * channels, "pixel count mismatch");
        Self { height, width, channels, pixels }
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Mean absolute pixel difference; `None` if geometries differ.
    pub fn mean_abs_diff(&self, other: &Image) -> Option<f64> {
        if (self.height, self.width, self.channels) != (other.height, other.width, other.channels)
        {
            return None;
        }
        let sum: f64 = self.pixels.iter().zip(&other.pixels).map(|(a, b)| (a - b).abs()).sum();
        Some(sum / self.pixels.len().max(1) as f64)
    }
}

fn parse_manifest_line(line: &str, line_no: usize) -> Result<FrameRecord> {
    let mut it = line.trim_end_matches('\r').splitn(4, ',');
    let bad = || VideoError::MalformedLine(line_no);
    let segment_id: u32 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let frame_index: u64 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let timestamp_ms: f64 = it.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let path = it.next().ok_or_else(bad)?;
    if segment_id == 0 || !timestamp_ms.is_finite() || timestamp_ms < 0.0 || path.is_empty() {
        return Err(bad());
    }
    Ok(FrameRecord { segment_id, frame_index, timestamp_ms, path: PathBuf::from(path) })
}

/// Reads a frame manifest. Records keep file order; frame indices must rise
/// strictly within each segment.
pub fn load_manifest<R: BufRead>(source: R) -> Result<Vec<FrameRecord>> {
    let mut lines = source.lines();
    match lines.next() {
        Some(Ok(h)) if h.trim_end_matches('\r') == MANIFEST_HEADER => {}
        Some(Err(e)) => return Err(e.into()),
        _ => return Err(VideoError::MissingHeader),
    }
    let mut records: Vec<FrameRecord> = Vec::new();
    let mut last_index: std::collections::HashMap<u32, u64> = Default::default();
    for (idx, line) in lines.enumerate() {
        let rec = parse_manifest_line(&line?, idx + 2)?;
        if let Some(prev) = last_index.insert(rec.segment_id, rec.frame_index) {
            if rec.frame_index <= prev {
                return Err(VideoError::NonMonotonicFrameIndex(rec.segment_id));
            }
        }
        records.push(rec);
    }
    Ok(records)
}

pub fn write_manifest<W: Write>(records: &[FrameRecord], mut out: W) -> Result<()> {
    writeln!(out, "{MANIFEST_HEADER}")?;
    for r in records {
        writeln!(out, "{},{},{},{}", r.segment_id, r.frame_index, r.timestamp_ms, r.path.display())?;
    }
    Ok(())
}

/// Checks that every segment is spaced at `1000/fps` ms within `tol_ms`.
pub fn check_frame_rate(records: &[FrameRecord], fps: f64, tol_ms: f64) -> Result<()> {
    let expected_ms = 1000.0 / fps;
    for w in records.windows(2) {
        if w[0].segment_id != w[1].segment_id {
            continue;
        }
        let steps = (w[1].frame_index - w[0].frame_index) as f64;
        let spacing_ms = (w[1].timestamp_ms - w[0].timestamp_ms) / steps;
        if (spacing_ms - expected_ms).abs() > tol_ms {
            return Err(VideoError::FrameRateMismatch {
                segment_id: w[0].segment_id,
                spacing_ms,
                expected_ms,
            });
        }
    }
    Ok(())
}

/// Places segments 1..K on one clock. Segment k is shifted by the end of
/// segment k-1 (last frame plus one frame period) plus `gap_ms`.
pub fn concatenate_segments(records: &[FrameRecord], gap_ms: f64) -> Result<Vec<FrameRecord>> {
    if records.is_empty() {
        return Err(VideoError::EmptySegment);
    }
    // split into runs of equal segment id, which must count up from 1
    let mut segments: Vec<&[FrameRecord]> = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].segment_id != records[start].segment_id {
            let expected = segments.len() as u32 + 1;
            let found = records[start].segment_id;
            if found != expected {
                return Err(VideoError::NonConsecutiveSegments { expected, found });
            }
            segments.push(&records[start..i]);
            start = i;
        }
    }

    let mut out = Vec::with_capacity(records.len());
    let mut shift = 0.0;
    for seg in segments {
        let id = seg[0].segment_id;
        if seg.windows(2).any(|w| w[1].timestamp_ms <= w[0].timestamp_ms) {
            return Err(VideoError::NonMonotonicTimestamps(id));
        }
        let first = seg[0].timestamp_ms;
        let last = seg[seg.len() - 1].timestamp_ms;
        let period = if seg.len() > 1 {
            (last - first) / (seg.len() - 1) as f64
        } else {
            1000.0 / DEFAULT_FPS
        };
        out.extend(seg.iter().map(|r| FrameRecord { timestamp_ms: r.timestamp_ms + shift, ..r.clone() }));
        shift += last + period + gap_ms;
    }
    Ok(out)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| VideoError::Io { path: path.to_path_buf(), source })
}

/// Loads a binary PGM (P5) or PPM (P6) file with maxval 255.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    decode_pnm(&read_file(path.as_ref())?)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(if self.pos >= self.bytes.len() {
                VideoError::TruncatedFile { expected: self.pos + 1, found: self.bytes.len() }
            } else {
                VideoError::MalformedHeader
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(VideoError::MalformedHeader)
    }
}

/// Decodes an in-memory P5/P6 image.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(VideoError::UnsupportedFormat),
    };
    let mut cur = HeaderCursor { bytes, pos: 2 };
    let width = cur.number()? as usize;
    let height = cur.number()? as usize;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(VideoError::BadMaxval(maxval));
    }
    if width == 0 || height == 0 {
        return Err(VideoError::ZeroDimension);
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        Some(_) => return Err(VideoError::MalformedHeader),
        None => return Err(VideoError::TruncatedFile { expected: cur.pos + 1, found: bytes.len() }),
    }
    let n = width * height * channels;
    let data = &bytes[cur.pos..];
    if data.len() < n {
        return Err(VideoError::TruncatedFile { expected: cur.pos + n, found: bytes.len() });
    }
    let pixels = data[..n].iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Image { height, width, channels, pixels })
}

/// Quantizes to bytes (`round(p*255)`, clamped) and encodes as P5 or P6.
pub fn encode_pnm(img: &Image) -> Result<Vec<u8>> {
    let magic = match img.channels {
        1 => "P5",
        3 => "P6",
        channels => return Err(VideoError::UnsupportedChannels { channels }),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.pixels.iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_pnm(img)?)
        .map_err(|source| VideoError::Io { path: path.to_path_buf(), source })
}

/// Source coordinate for output index `i` under corner-aligned sampling.
#[inline]
fn source_coord(i: usize, n_in: usize, n_out: usize) -> f64 {
    if n_out == 1 {
        (n_in - 1) as f64 / 2.0
    } else {
        (i * (n_in - 1)) as f64 / (n_out - 1) as f64
    }
}

#[inline]
fn lerp(a: f64, b: f64, w: f64) -> f64 {
    (a + w * (b - a)).clamp(a.min(b), a.max(b))
}

/// Bilinear resize with corner-aligned sampling: output corners coincide with
/// input corners.
pub fn resize_bilinear(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 || img.height == 0 || img.width == 0 {
        return Err(VideoError::ZeroDimension);
    }
    let c = img.channels;
    let cols: Vec<(usize, usize, f64)> = (0..out_w)
        .map(|x| {
            let sx = source_coord(x, img.width, out_w);
            let x0 = (sx.floor() as usize).min(img.width - 1);
            ((x0), (x0 + 1).min(img.width - 1), sx - x0 as f64)
        })
        .collect();
    let mut pixels = Vec::with_capacity(out_h * out_w * c);
    for y in 0..out_h {
        let sy = source_coord(y, img.height, out_h);
        let y0 = (sy.floor() as usize).min(img.height - 1);
        let y1 = (y0 + 1).min(img.height - 1);
        let wy = sy - y0 as f64;
        for &(x0, x1, wx) in &cols {
            for ch in 0..c {
                let top = lerp(img.at(y0, x0, ch), img.at(y0, x1, ch), wx);
                let bottom = lerp(img.at(y1, x0, ch), img.at(y1, x1, ch), wx);
                pixels.push(lerp(top, bottom, wy));
            }
        }
    }
    Ok(Image { height: out_h, width: out_w, channels: c, pixels })
}
