//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

mod common;

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use canfuse::canlog::{validate_rows, CanFeatureRow};
use canfuse::experiment::{
    compare, generate_drive, generate_synthetic, write_json, ComparisonReport, ExperimentConfig, SynthConfig,
};
use canfuse::fusionmodel::{FusedModel, ModelConfig, Variant};
use canfuse::neuralnet::{adam_step, grad_check, mse, rmse, AdamState, Tensor};
use canfuse::seeds::{self, Stream};
use canfuse::sync::{downsample, synchronize, SyncConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [1, 2, 3];
const N_PER_GROUP: usize = 200;
const SEED_BUDGET: Duration = Duration::from_secs(600);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn line(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}");
    let _ = out.flush();
}

fn run_compare(seed: u64, beta: Option<f64>) -> (ComparisonReport, Duration) {
    let start = Instant::now();
    let mut synth = SynthConfig::new(seed, N_PER_GROUP);
    if let Some(b) = beta {
        synth.beta = b;
    }
    let samples = generate_synthetic(&synth).expect("synthetic data");
    let report = compare(&ExperimentConfig::with_seed(seed), &samples).expect("comparison");
    (report, start.elapsed())
}

fn fusion_benefit(runs: &[(ComparisonReport, Duration)]) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for (seed, (r, t)) in SEEDS.iter().zip(runs) {
        pass &= r.percent_decrease_val >= 10.0 && *t <= SEED_BUDGET;
        parts.push(format!(
            "seed {seed}: {:.5} -> {:.5} ({:.1}%, {:.0}s)",
            r.vision_only.rmse_val,
            r.fused.rmse_val,
            r.percent_decrease_val,
            t.as_secs_f64()
        ));
    }
    outcome(pass, parts.join("; "))
}

fn ablation(runs: &[(ComparisonReport, Duration)]) -> Outcome {
    let pcts: Vec<f64> = runs.iter().map(|(r, _)| r.percent_decrease_val).collect();
    let mean = pcts.iter().sum::<f64>() / pcts.len() as f64;
    let shown: Vec<String> = pcts.iter().map(|p| format!("{p:.2}%")).collect();
    outcome(mean.abs() <= 5.0, format!("mean {mean:.2}% over [{}]", shown.join(", ")))
}

fn gradients() -> Outcome {
    let model = FusedModel::new(ModelConfig::new(Variant::Fused, 1)).unwrap();
    let input = common::model_input(Variant::Fused, 2);
    let r = grad_check(&model, &input, &[0.1], common::H, common::RTOL).unwrap();
    let mut pass = r.pass;
    let mut detail = format!(
        "fused: max rel {:.2e}, {} checked, {} at kinks",
        r.max_rel_error, r.checked, r.skipped_kinks
    );
    for (name, r) in common::per_layer_checks() {
        pass &= r.pass && r.checked > 0;
        detail.push_str(&format!("; {name} {:.1e}", r.max_rel_error));
    }
    outcome(pass, detail)
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..64);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let (m, r) = (mse(&a, &b).unwrap(), rmse(&a, &b).unwrap());
        worst = worst.max((r * r - m).abs() / m);
    }
    let m = mse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
    let r = rmse(&[0.0, 0.0], &[3.0, 4.0]).unwrap();
    let pass = worst <= 1e-12 && m == 12.5 && (r - 3.5355339).abs() < 1e-7;
    outcome(pass, format!("max |rmse^2 - mse|/mse {worst:.1e}; mse {m}, rmse {r:.7}"))
}

fn sync_recovery() -> Outcome {
    let cfg = SynthConfig::new(0, 10);
    let mut rng = seeds::rng(31, Stream::Streams);
    let groups: BTreeMap<u32, u8> = [(1, 1)].into();
    let mut worst_err: f64 = 0.0;
    let mut worst_match: f64 = 1.0;
    for _ in 0..20 {
        let offset: f64 = rng.gen_range(-2000.0..=2000.0);
        let start: f64 = rng.gen_range(0.0..5000.0);
        let drive = generate_drive(&cfg, &mut rng, 1, 150, start, offset);
        let (_, report) = synchronize(&drive.rows, &drive.frames, &groups, &SyncConfig::default()).unwrap();
        worst_err = worst_err.max((report.offset_ms[&1] - offset).abs());
        worst_match = worst_match.min(report.matched as f64 / drive.frames.len() as f64);
    }
    let pass = worst_err <= 1000.0 / 36.0 && worst_match >= 0.99;
    outcome(pass, format!("worst offset error {worst_err:.2} ms, worst match rate {:.1}%", 100.0 * worst_match))
}

fn downsampling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let rows: Vec<CanFeatureRow> = (0..1013)
        .map(|i| CanFeatureRow {
            timestamp_ms: i as f64,
            voltage: rng.gen_range(390.0..410.0),
            current: rng.gen_range(-200.0..50.0),
            power: rng.gen_range(-80.0..20.0),
            steering_speed: rng.gen_range(-10.0..10.0),
            speed: rng.gen_range(0.0..80.0),
            steering_angle: rng.gen_range(-1.0..1.0),
        })
        .collect();
    let out = downsample(&rows, 25).unwrap();
    let field = |r: &CanFeatureRow| [r.voltage, r.current, r.power, r.steering_speed, r.speed, r.steering_angle];
    let mut worst: f64 = 0.0;
    for k in 0..6 {
        let kept = &rows[..out.len() * 25];
        let a = kept.iter().map(|r| field(r)[k]).sum::<f64>() / kept.len() as f64;
        let b = out.iter().map(|r| field(r)[k]).sum::<f64>() / out.len() as f64;
        worst = worst.max((a - b).abs() / a.abs());
    }
    let identity = downsample(&rows, 1).unwrap() == rows;
    outcome(worst <= 1e-12 && identity && out.len() == 40, format!("{} blocks, max rel mean diff {worst:.1e}, factor 1 identity {identity}", out.len()))
}

fn table_rows() -> Outcome {
    let table = [
        (400.368, -110.42, -44.208831, 2.583333, 35.790981),
        (400.584, -112.58, -45.09774, 0.0, 35.592142),
        (400.81, -113.6, -45.532016, 2.75, 35.492723),
        (401.81, -119.3, -47.935933, 6.75, 34.647658),
        (401.62, -118.95, -47.772712, 8.5, 34.597948),
        (401.8475, -119.125, -47.87012, 9.25, 34.548238),
    ];
    let rows: Vec<CanFeatureRow> = table
        .iter()
        .enumerate()
        .map(|(i, &(voltage, current, power, steering_speed, speed))| CanFeatureRow {
            timestamp_ms: i as f64,
            voltage,
            current,
            power,
            steering_speed,
            speed,
            steering_angle: 0.0,
        })
        .collect();
    let r = validate_rows(&rows, 0.01).unwrap();
    outcome(r.pass, format!("max residual {:.6} kW", r.max_residual))
}

fn determinism(first: &ComparisonReport) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (second, _) = run_compare(SEEDS[0], None);
    let (a, b) = (dir.path().join("a.json"), dir.path().join("b.json"));
    write_json(&a, first).unwrap();
    write_json(&b, &second).unwrap();
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    outcome(a == b, format!("{} report bytes, identical {}", a.len(), a == b))
}

fn geometry() -> Outcome {
    let model = FusedModel::new(ModelConfig::new(Variant::VisionOnly, 0)).unwrap();
    let shapes = model.vision().shapes();
    let convs: Vec<Vec<usize>> =
        shapes.iter().filter(|s| s.len() == 3 && s[2] != 3).map(|s| s[..2].to_vec()).collect();
    let mut convs_dedup = convs.clone();
    convs_dedup.dedup();
    let expected = vec![vec![31, 98], vec![14, 47], vec![5, 22], vec![3, 20], vec![1, 18]];
    let flatten = shapes.iter().find(|s| s.len() == 1).map(|s| s[0]);
    let pass = convs_dedup == expected && flatten == Some(1152);
    outcome(pass, format!("{convs_dedup:?}, flatten {flatten:?}"))
}

fn adam() -> Outcome {
    let mut theta = Tensor::vector(vec![1.0]);
    let mut state = AdamState::new(1e-4, &[&theta]);
    adam_step(&mut [&mut theta], &[Tensor::vector(vec![1.0])], &mut state).unwrap();
    // m = 0.1, v = 0.001; both bias corrections give exactly 1
    let hand = 1.0 - 1e-4 * 1.0 / (1.0 + 1e-8);
    let moved = theta.data()[0] - 1.0;
    let one_step = (theta.data()[0] - hand).abs() <= 1e-9 && (moved + 1e-4).abs() <= 1e-9;

    let mut theta = Tensor::vector(vec![1.0]);
    let mut state = AdamState::new(1e-4, &[&theta]);
    let mut losses = vec![1.0];
    for _ in 0..10 {
        let g = Tensor::vector(vec![2.0 * theta.data()[0]]);
        adam_step(&mut [&mut theta], &[g], &mut state).unwrap();
        losses.push(theta.data()[0].powi(2));
    }
    let decreasing = losses.windows(2).all(|w| w[1] < w[0]);
    outcome(one_step && decreasing, format!("one step moved {moved:.3e}; 10 steps on theta^2 decreasing {decreasing}"))
}

fn main() {
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |id: u32, name: &'static str, o: Outcome| {
        line(&format!("criterion {id:>2} {name}: {} | {}", if o.pass { "PASS" } else { "FAIL" }, o.detail));
        results.push((id, name, o));
    };

    report(4, "metric identities", metrics());
    report(6, "downsample consistency", downsampling());
    report(7, "table rows validate", table_rows());
    report(9, "DAVE-2 geometry", geometry());
    report(10, "Adam behavior", adam());
    report(5, "sync recovery", sync_recovery());
    report(3, "gradient correctness", gradients());

    let with_can: Vec<_> = SEEDS.iter().map(|&s| run_compare(s, None)).collect();
    report(1, "fusion benefit", fusion_benefit(&with_can));
    let ablated: Vec<_> = SEEDS.iter().map(|&s| run_compare(s, Some(0.0))).collect();
    report(2, "ablation control", ablation(&ablated));
    report(8, "deterministic reports", determinism(&with_can[0].0));

    let failed: Vec<_> = results.iter().filter(|(_, _, o)| !o.pass).map(|(id, name, _)| format!("{id} ({name})")).collect();
    if failed.is_empty() {
        line(&format!("acceptance: all {} criteria passed", results.len()));
    } else {
        line(&format!("acceptance: failed {}", failed.join(", ")));
        std::process::exit(1);
    }
}
