//! Synthetic drives with a known steering law.
//!
//! The label mixes a term visible in the image (lane slope) with a term
//! only the CAN features carry (speed relative to `v_bar`). `beta = 0`
//! removes the CAN-only term.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ExperimentError, Result};
use crate::canlog::{write_can_log, CanFeatureRow, FeatureSignals, SignalUpdate};
use crate::fusionmodel::{CHANNELS, INPUT_H, INPUT_W};
use crate::seeds::{self, Stream};
use crate::sync::SyncedSample;
use crate::videostream::{save_image, write_manifest, FrameRecord, Image, DEFAULT_FPS, DEFAULT_SAVE_GAP_MS};

pub const GROUPS: usize = 5;
/// Mean speed per group: residential, highway, mixed, highway, residential.
pub const GROUP_SPEED_MEANS: [f64; GROUPS] = [25.0, 65.0, 45.0, 65.0, 25.0];
pub const SPEED_SD: f64 = 8.0;
pub const MIN_PER_GROUP: usize = 10;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_per_group: usize,
    pub groups: usize,
    /// Label per unit lane slope.
    pub alpha: f64,
    /// Label per unit of speed above `v_bar`.
    pub beta: f64,
    pub v_bar: f64,
    pub noise_sd: f64,
}

impl SynthConfig {
    pub fn new(seed: u64, n_per_group: usize) -> Self {
        Self { seed, n_per_group, groups: GROUPS, alpha: 0.1, beta: 0.002, v_bar: 45.0, noise_sd: 0.005 }
    }

    fn validate(&self) -> Result<()> {
        if self.groups != GROUPS {
            return Err(ExperimentError::BadGroupCount(self.groups));
        }
        if self.n_per_group < MIN_PER_GROUP {
            return Err(ExperimentError::InvalidConfig(format!(
                "n_per_group must be at least {MIN_PER_GROUP}, got {}",
                self.n_per_group
            )));
        }
        if ![self.alpha, self.beta, self.v_bar, self.noise_sd].iter().all(|v| v.is_finite()) || self.noise_sd < 0.0 {
            return Err(ExperimentError::InvalidConfig("label constants must be finite, noise_sd >= 0".into()));
        }
        Ok(())
    }

    fn label(&self, slope: f64, speed: f64, noise: f64) -> f64 {
        self.alpha * slope + self.beta * (speed - self.v_bar) + noise
    }
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite sd")
}

/// Dark road with pixel noise and one bright lane line. `slope` in
/// `[-1, 1]` tilts the line, `shift` moves it sideways in pixels.
pub fn render_lane(slope: f64, shift: f64, rng: &mut ChaCha8Rng) -> Image {
    let noise = normal(0.0, 0.03);
    let tint = [1.0, 0.95, 0.8];
    let mut pixels = vec![0.0; INPUT_H * INPUT_W * CHANNELS];
    for y in 0..INPUT_H {
        let center = INPUT_W as f64 / 2.0 + shift + slope * 1.4 * (INPUT_H - 1 - y) as f64;
        for x in 0..INPUT_W {
            let d = x as f64 - center;
            let line = if d.abs() < 8.0 { 0.65 * (-d * d / 4.5).exp() } else { 0.0 };
            let base = 0.25 + line + noise.sample(rng);
            for (c, t) in tint.iter().enumerate() {
                pixels[(y * INPUT_W + x) * CHANNELS + c] = (base * t).clamp(0.0, 1.0);
            }
        }
    }
    Image::new(INPUT_H, INPUT_W, CHANNELS, pixels)
}

/// Battery readings consistent with `power = voltage * current / 1000`.
fn battery(speed: f64, rng: &mut ChaCha8Rng) -> (f64, f64, f64) {
    let voltage = normal(400.0, 1.0).sample(rng);
    let current = -3.1 * speed + normal(0.0, 5.0).sample(rng);
    (voltage, current, voltage * current / 1000.0)
}

fn frame_period() -> f64 {
    1000.0 / DEFAULT_FPS
}

/// Independent labelled samples, `n_per_group` per group, on a clock with
/// the dashcam save pause between groups. Steering speed is drawn
/// independently of the label.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<SyncedSample>> {
    cfg.validate()?;
    let mut rng = seeds::rng(cfg.seed, Stream::Data);
    let period = frame_period();
    let mut out = Vec::with_capacity(cfg.groups * cfg.n_per_group);
    let mut start = 0.0;
    for (g, &mean_speed) in GROUP_SPEED_MEANS.iter().enumerate() {
        for i in 0..cfg.n_per_group {
            let slope: f64 = rng.gen_range(-1.0..=1.0);
            let shift: f64 = rng.gen_range(-25.0..=25.0);
            let speed = normal(mean_speed, SPEED_SD).sample(&mut rng).max(0.0);
            let (voltage, current, power) = battery(speed, &mut rng);
            let steering_speed = normal(0.0, 1.5).sample(&mut rng);
            let noise = normal(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE)).sample(&mut rng);
            let image = render_lane(slope, shift, &mut rng);
            out.push(SyncedSample {
                timestamp_ms: start + i as f64 * period,
                image,
                can_features: [voltage, current, power, steering_speed, speed],
                steering_angle: cfg.label(slope, speed, if cfg.noise_sd > 0.0 { noise } else { 0.0 }),
                group_id: g as u8 + 1,
            });
        }
        start += (cfg.n_per_group - 1) as f64 * period + period + DEFAULT_SAVE_GAP_MS;
    }
    Ok(out)
}

/// The CAN side of each sample as a feature row.
pub fn sample_rows(samples: &[SyncedSample]) -> Vec<CanFeatureRow> {
    samples
        .iter()
        .map(|s| {
            let [voltage, current, power, steering_speed, speed] = s.can_features;
            CanFeatureRow {
                timestamp_ms: s.timestamp_ms,
                voltage,
                current,
                power,
                steering_speed,
                speed,
                steering_angle: s.steering_angle,
            }
        })
        .collect()
}

/// One recording: 1 ms CAN rows on the CAN clock and frames on the video
/// clock, with `video_t = can_t + offset_ms`. The vehicle stands still for
/// one second starting at a frame a third of the way in.
#[derive(Debug, Clone)]
pub struct Drive {
    pub rows: Vec<CanFeatureRow>,
    pub frames: Vec<(FrameRecord, Image)>,
    pub offset_ms: f64,
    /// Video-clock time of the first still frame.
    pub stop_ms: f64,
}

/// Margin of CAN coverage around the frame span, in milliseconds.
const CAN_MARGIN_MS: f64 = 1000.0;

pub fn generate_drive(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    segment_id: u32,
    n_frames: usize,
    video_start_ms: f64,
    offset_ms: f64,
) -> Drive {
    let period = frame_period();
    let still = DEFAULT_FPS as usize;
    let first_still = n_frames / 3;
    let stop_ms = video_start_ms + first_still as f64 * period;
    let go_ms = stop_ms + still as f64 * period;
    let cruise: f64 = rng.gen_range(20.0..70.0);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let shift: f64 = rng.gen_range(-20.0..20.0);
    // lane slope and speed as smooth functions of video time; both hold
    // their value while stopped
    let frozen = |u: f64| if (stop_ms..go_ms).contains(&u) { stop_ms } else { u };
    let slope = |u: f64| 0.8 * (std::f64::consts::TAU * frozen(u) / 4000.0 + phase).sin();
    let speed = |u: f64| {
        if (stop_ms..go_ms).contains(&u) {
            0.0
        } else {
            (cruise + 6.0 * (std::f64::consts::TAU * u / 7000.0 + phase).cos()).max(3.0)
        }
    };

    let mut frames = Vec::with_capacity(n_frames);
    let mut still_image: Option<Image> = None;
    for i in 0..n_frames {
        let t = video_start_ms + i as f64 * period;
        let record = FrameRecord {
            segment_id,
            frame_index: i as u64,
            timestamp_ms: t,
            path: format!("frames/s{segment_id}_{i:05}.ppm").into(),
        };
        let image = if (first_still..first_still + still).contains(&i) {
            still_image.get_or_insert_with(|| render_lane(slope(t), shift, rng)).clone()
        } else {
            render_lane(slope(t), shift, rng)
        };
        frames.push((record, image));
    }

    let video_end = video_start_ms + (n_frames - 1) as f64 * period;
    let t0 = (video_start_ms - offset_ms - CAN_MARGIN_MS).floor();
    let t1 = (video_end - offset_ms + CAN_MARGIN_MS).ceil();
    let noise = normal(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE));
    let mut rows = Vec::with_capacity((t1 - t0) as usize);
    let mut t = t0;
    while t < t1 {
        let u = t + offset_ms;
        let v = speed(u);
        let (voltage, current, power) = battery(v, rng);
        let steering_speed = normal(0.0, 1.5).sample(rng);
        let n = if cfg.noise_sd > 0.0 { noise.sample(rng) } else { 0.0 };
        rows.push(CanFeatureRow {
            timestamp_ms: t,
            voltage,
            current,
            power,
            steering_speed,
            speed: v,
            steering_angle: cfg.label(slope(u), v, n),
        });
        t += 1.0;
    }
    Drive { rows, frames, offset_ms, stop_ms }
}

/// Ground truth of a written raw recording.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct RawRecording {
    /// Per-group offset, `video_t - can_t`.
    pub offsets_ms: BTreeMap<u8, f64>,
    pub frames_per_group: usize,
}

pub const RAW_LOG: &str = "can.log";
pub const RAW_MANIFEST: &str = "frames.csv";
pub const RAW_GROUPS: &str = "groups.csv";
pub const GROUPS_HEADER: &str = "segment_id,group_id";

/// Writes a dashcam-style recording to `dir`: `can.log` (signal updates on
/// the CAN clock), `frames.csv` (one segment per group, segment-local
/// timestamps), `groups.csv` and the frames as PPM files. Offsets between
/// the clocks are drawn uniformly from `[-2000, 2000]` ms per group.
pub fn write_raw_recording(dir: &Path, cfg: &SynthConfig) -> Result<RawRecording> {
    cfg.validate()?;
    let io = |e: std::io::Error| ExperimentError::Io { path: dir.to_path_buf(), source: e };
    fs::create_dir_all(dir.join("frames")).map_err(io)?;
    let mut rng = seeds::rng(cfg.seed, Stream::Streams);
    let names = FeatureSignals::default();
    let period = frame_period();
    let n = cfg.n_per_group;
    let mut updates = Vec::new();
    let mut manifest = Vec::new();
    let mut offsets = BTreeMap::new();
    let mut start = 0.0;
    for g in 1..=cfg.groups {
        let offset: f64 = rng.gen_range(-2000.0..=2000.0);
        let drive = generate_drive(cfg, &mut rng, g as u32, n, start, offset);
        for row in &drive.rows {
            let values = [
                row.voltage,
                row.current,
                row.power,
                row.steering_speed,
                row.speed,
                row.steering_angle,
            ];
            for (name, value) in names.names().iter().zip(values) {
                updates.push(SignalUpdate::new(row.timestamp_ms, *name, value));
            }
        }
        for (rec, img) in &drive.frames {
            save_image(img, dir.join(&rec.path))?;
            manifest.push(FrameRecord { timestamp_ms: rec.frame_index as f64 * period, ..rec.clone() });
        }
        offsets.insert(g as u8, offset);
        start += (n - 1) as f64 * period + period + DEFAULT_SAVE_GAP_MS;
    }
    let file = |name: &str| fs::File::create(dir.join(name)).map(BufWriter::new).map_err(io);
    write_can_log(&updates, file(RAW_LOG)?)?;
    write_manifest(&manifest, file(RAW_MANIFEST)?)?;
    let mut groups = file(RAW_GROUPS)?;
    writeln!(groups, "{GROUPS_HEADER}").map_err(io)?;
    for g in 1..=cfg.groups {
        writeln!(groups, "{g},{g}").map_err(io)?;
    }
    groups.flush().map_err(io)?;
    Ok(RawRecording { offsets_ms: offsets, frames_per_group: n })
}
