#![allow(dead_code)]

use canfuse::fusionmodel::{ModelInput, Variant, CAN_DIM, CHANNELS, INPUT_H, INPUT_W};
use canfuse::neuralnet::{grad_check, Conv2d, Dense, GradCheckReport, Layer, Sequential, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const RTOL: f64 = 1e-4;

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// One random model input: a full-size image in [0, 1] and, for the fused
/// variant, a CAN vector.
pub fn model_input(variant: Variant, seed: u64) -> ModelInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = INPUT_H * INPUT_W * CHANNELS;
    let images = Tensor::new(vec![1, INPUT_H, INPUT_W, CHANNELS], (0..n).map(|_| rng.gen()).collect()).unwrap();
    let can = variant
        .uses_can()
        .then(|| Tensor::new(vec![1, CAN_DIM], (0..CAN_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
    ModelInput { images, can }
}

fn check(name: &'static str, net: Sequential, batch: usize, rng: &mut ChaCha8Rng) -> (&'static str, GradCheckReport) {
    let mut shape = vec![batch];
    shape.extend_from_slice(net.input_shape());
    let x = random_tensor(&shape, rng);
    let out: usize = batch * net.output_shape().iter().product::<usize>();
    let target: Vec<f64> = (0..out).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (name, grad_check(&net, &x, &target, H, RTOL).unwrap())
}

/// Gradient checks of each layer type on a small network that isolates it.
pub fn per_layer_checks() -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dense = |i, o, rng: &mut ChaCha8Rng| Layer::Dense(Dense::glorot(i, o, rng));
    let conv = |ci, co, k, s, rng: &mut ChaCha8Rng| Layer::Conv2d(Conv2d::glorot(ci, co, (k, k), s, rng));
    let nets = [
        ("dense", vec![4], vec![dense(4, 3, &mut rng)], 3),
        ("conv2d", vec![7, 9, 2], vec![conv(2, 3, 3, 2, &mut rng)], 2),
        ("conv2d_stride1", vec![5, 6, 3], vec![conv(3, 4, 3, 1, &mut rng)], 2),
        ("relu", vec![4], vec![dense(4, 6, &mut rng), Layer::Relu], 3),
        ("affine", vec![4], vec![Layer::Affine { scale: 2.0, shift: -1.0 }, dense(4, 2, &mut rng)], 3),
        (
            "standardize",
            vec![3],
            vec![Layer::Standardize { mean: vec![0.5, -1.0, 2.0], std: vec![2.0, 0.5, 3.0] }, dense(3, 2, &mut rng)],
            3,
        ),
        ("flatten", vec![4, 4, 2], vec![conv(2, 2, 2, 2, &mut rng), Layer::Flatten, dense(8, 2, &mut rng)], 2),
    ];
    nets.into_iter()
        .map(|(name, input, layers, batch)| check(name, Sequential::new(input, layers).unwrap(), batch, &mut rng))
        .collect()
}
