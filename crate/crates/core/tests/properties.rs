use std::collections::{BTreeMap, BTreeSet};

use canfuse::canlog::{
    parse_can_log, sample_and_hold, select_signals, write_can_log, CanFeatureRow, FeatureSignals, SignalUpdate,
};
use canfuse::neuralnet::{adam_step, mse, rmse, AdamState, Tensor};
use canfuse::sync::{downsample, join, split_groups, SyncedSample};
use canfuse::videostream::{concatenate_segments, decode_pnm, encode_pnm, resize_bilinear, FrameRecord, Image};
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    -1e6..1e6f64
}

fn signal_name() -> impl Strategy<Value = String> {
    prop_oneof![
        Just("Voltage".to_string()),
        Just("Current".to_string()),
        Just("Speed".to_string()),
        Just("Odometer".to_string()),
        "[A-Za-z][A-Za-z0-9_]{0,8}",
    ]
}

fn updates() -> impl Strategy<Value = Vec<SignalUpdate>> {
    prop::collection::vec((0.0..1e7f64, signal_name(), finite()), 0..40).prop_map(|mut v| {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        v.into_iter().map(|(t, s, x)| SignalUpdate::new(t, s, x)).collect()
    })
}

fn rows(n: usize) -> Vec<CanFeatureRow> {
    (0..n)
        .map(|i| {
            let t = i as f64;
            CanFeatureRow {
                timestamp_ms: t,
                voltage: 400.0 + (t * 0.37).sin(),
                current: -100.0 + (t * 0.11).cos() * 7.0,
                power: t * 0.5 - 20.0,
                steering_speed: (t * 1.3).sin() * 3.0,
                speed: (t * 0.05).sin() * 10.0 + 40.0,
                steering_angle: (t * 0.02).cos(),
            }
        })
        .collect()
}

fn frame(seg: u32, i: u64, t: f64) -> FrameRecord {
    FrameRecord { segment_id: seg, frame_index: i, timestamp_ms: t, path: "f.ppm".into() }
}

fn image(h: usize, w: usize, c: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0..=1.0f64, h * w * c).prop_map(move |p| Image::new(h, w, c, p))
}

fn sample(group: u8, t: f64) -> SyncedSample {
    SyncedSample {
        timestamp_ms: t,
        image: Image::filled(1, 1, 1, 0.0),
        can_features: [0.0; 5],
        steering_angle: 0.0,
        group_id: group,
    }
}

proptest! {
    #[test]
    fn log_round_trip(u in updates()) {
        let mut buf = Vec::new();
        write_can_log(&u, &mut buf).unwrap();
        prop_assert_eq!(parse_can_log(buf.as_slice()).unwrap(), u);
    }

    #[test]
    fn select_never_invents_values(u in updates()) {
        let wanted: BTreeSet<String> = ["Voltage", "Speed", "Missing"].iter().map(|s| s.to_string()).collect();
        let map = select_signals(&u, &wanted).unwrap();
        prop_assert_eq!(map.keys().cloned().collect::<BTreeSet<_>>(), wanted);
        for (name, series) in &map {
            let source: Vec<(f64, f64)> =
                u.iter().filter(|x| &x.signal == name).map(|x| (x.timestamp_ms, x.value)).collect();
            prop_assert_eq!(series, &source);
        }
    }

    #[test]
    fn sample_and_hold_ticks_form_progression(
        tick in 0.5..20.0f64,
        start in 0.0..100.0f64,
        span in 1.0..400.0f64,
        values in prop::collection::vec(finite(), 6),
    ) {
        let signals = FeatureSignals::default();
        let map: BTreeMap<String, Vec<(f64, f64)>> = signals
            .names()
            .iter()
            .zip(&values)
            .map(|(n, v)| (n.to_string(), vec![(start, *v), (start + span / 2.0, v + 1.0)]))
            .collect();
        let out = sample_and_hold(&map, &signals, tick, start, start + span).unwrap();
        prop_assert!(!out.is_empty());
        for (i, r) in out.iter().enumerate() {
            prop_assert_eq!(r.timestamp_ms, start + i as f64 * tick);
            prop_assert!(r.timestamp_ms < start + span);
            let expected = if r.timestamp_ms >= start + span / 2.0 { values[4] + 1.0 } else { values[4] };
            prop_assert_eq!(r.speed, expected);
        }
        prop_assert!(start + out.len() as f64 * tick >= start + span);
    }

    #[test]
    fn concatenation_preserves_deltas(
        lens in prop::collection::vec(1usize..12, 1..5),
        period in 10.0..50.0f64,
        gap in 0.0..1e5f64,
    ) {
        let mut recs = Vec::new();
        for (s, &n) in lens.iter().enumerate() {
            let t0 = (s as f64) * 3.0;
            recs.extend((0..n).map(|i| frame(s as u32 + 1, i as u64, t0 + i as f64 * period)));
        }
        let out = concatenate_segments(&recs, gap).unwrap();
        prop_assert_eq!(out.len(), recs.len());
        prop_assert!(out.windows(2).all(|w| w[1].timestamp_ms > w[0].timestamp_ms));
        for (a, b) in recs.windows(2).zip(out.windows(2)) {
            if a[0].segment_id == a[1].segment_id {
                let d_in = a[1].timestamp_ms - a[0].timestamp_ms;
                let d_out = b[1].timestamp_ms - b[0].timestamp_ms;
                prop_assert!((d_in - d_out).abs() <= 1e-9 * d_in.abs().max(1.0));
            }
        }
    }

    #[test]
    fn resize_stays_within_input_range(img in image(5, 7, 3), oh in 1usize..12, ow in 1usize..12) {
        let lo = img.pixels.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = img.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let out = resize_bilinear(&img, oh, ow).unwrap();
        prop_assert_eq!((out.height, out.width, out.channels), (oh, ow, 3));
        prop_assert!(out.pixels.iter().all(|&p| p >= lo - 1e-12 && p <= hi + 1e-12));
    }

    #[test]
    fn pnm_round_trip(bytes in prop::collection::vec(any::<u8>(), 12), gray in any::<bool>()) {
        let (h, w, c) = if gray { (3, 4, 1) } else { (2, 2, 3) };
        let img = Image::new(h, w, c, bytes.iter().map(|&b| b as f64 / 255.0).collect());
        let back = decode_pnm(&encode_pnm(&img).unwrap()).unwrap();
        prop_assert_eq!(back, img);
    }

    #[test]
    fn downsample_is_block_mean(n in 1usize..200, factor in 1usize..30) {
        let r = rows(n);
        let out = downsample(&r, factor).unwrap();
        prop_assert_eq!(out.len(), n / factor);
        for (k, d) in out.iter().enumerate() {
            let block = &r[k * factor..(k + 1) * factor];
            let mean = block.iter().map(|x| x.speed).sum::<f64>() / factor as f64;
            prop_assert!((d.speed - mean).abs() <= 1e-12 * mean.abs().max(1.0));
        }
    }

    #[test]
    fn join_ignores_frame_input_order(offset in -50.0..50.0f64, seed in any::<u64>()) {
        let r = rows(400);
        let coarse = downsample(&r, 25).unwrap();
        let frames: Vec<(FrameRecord, Image)> = (0..10)
            .map(|i| (frame(1, i, 20.0 + i as f64 * 27.7), Image::filled(1, 1, 1, i as f64 / 10.0)))
            .collect();
        let groups: BTreeMap<u32, u8> = [(1, 1)].into();
        let a = join(&frames, &coarse, offset, 30.0, &groups).unwrap();
        prop_assert_eq!(a.samples.len() + a.dropped, frames.len());
        // a rotation is a permutation that keeps the time order required by join
        let rot = (seed % 10) as usize;
        let mut shuffled: Vec<_> = frames[rot..].iter().chain(&frames[..rot]).cloned().collect();
        shuffled.sort_by(|x, y| x.0.timestamp_ms.total_cmp(&y.0.timestamp_ms));
        let b = join(&shuffled, &coarse, offset, 30.0, &groups).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn split_partitions_by_group(groups in prop::collection::vec(1u8..6, 2..60), val in 1u8..6) {
        let samples: Vec<_> = groups.iter().enumerate().map(|(i, &g)| sample(g, i as f64)).collect();
        let val_set: BTreeSet<u8> = [val].into();
        match split_groups(&samples, &val_set) {
            Ok((train, v)) => {
                prop_assert_eq!(train.len() + v.len(), samples.len());
                prop_assert!(v.iter().all(|s| s.group_id == val));
                prop_assert!(train.iter().all(|s| s.group_id != val));
            }
            Err(_) => prop_assert!(!groups.contains(&val) || groups.iter().all(|&g| g == val)),
        }
    }

    #[test]
    fn adam_second_moment_is_nonnegative(grads in prop::collection::vec(prop::collection::vec(-1e3..1e3f64, 4), 1..20)) {
        let mut p = Tensor::vector(vec![1.0, -2.0, 0.5, 0.0]);
        let mut state = AdamState::new(1e-3, &[&p]);
        for g in grads {
            adam_step(&mut [&mut p], &[Tensor::vector(g)], &mut state).unwrap();
            prop_assert!(state.v[0].data().iter().all(|&v| v >= 0.0));
            prop_assert!(p.all_finite());
        }
    }

    #[test]
    fn metrics_are_symmetric_and_nonnegative(
        pairs in prop::collection::vec((-1e3..1e3f64, -1e3..1e3f64), 1..50),
    ) {
        let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let m = mse(&a, &b).unwrap();
        prop_assert!(m >= 0.0);
        prop_assert_eq!(rmse(&a, &b).unwrap(), rmse(&b, &a).unwrap());
        prop_assert_eq!(mse(&a, &a).unwrap(), 0.0);
    }
}
