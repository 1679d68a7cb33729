use rand::Rng;

use super::ops::{self, ConvGeom};
use super::{check_shape, NnError, Result, Tensor};

/// Fully connected layer, weight `[n_out, n_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let &[n_out, _] = weight.shape() else {
            return Err(NnError::InvalidTensor("dense weight must be rank 2".into()));
        };
        check_shape("dense bias", &[n_out], bias.shape())?;
        Ok(Self { weight, bias })
    }

    pub fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { weight: Tensor::zeros(&[n_out, n_in]), bias: Tensor::zeros(&[n_out]) }
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot<R: Rng>(n_in: usize, n_out: usize, rng: &mut R) -> Self {
        let weight = glorot_tensor(&[n_out, n_in], n_in, n_out, rng);
        Self { weight, bias: Tensor::zeros(&[n_out]) }
    }

    pub fn n_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Valid-padding convolution, kernel `[c_out, kh, kw, c_in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize) -> Result<Self> {
        let &[c_out, _, _, _] = kernel.shape() else {
            return Err(NnError::InvalidTensor("conv kernel must be rank 4".into()));
        };
        check_shape("conv bias", &[c_out], bias.shape())?;
        if stride == 0 {
            return Err(NnError::InvalidTensor("stride must be positive".into()));
        }
        Ok(Self { kernel, bias, stride })
    }

    /// Glorot-uniform with receptive-field fan-in/fan-out, zero bias.
    pub fn glorot<R: Rng>(
        c_in: usize,
        c_out: usize,
        (kh, kw): (usize, usize),
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let kernel = glorot_tensor(&[c_out, kh, kw, c_in], kh * kw * c_in, kh * kw * c_out, rng);
        Self { kernel, bias: Tensor::zeros(&[c_out]), stride }
    }
}

fn glorot_tensor<R: Rng>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.gen_range(-limit..=limit)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    /// Elementwise `scale * x + shift`, not trained.
    Affine { scale: f64, shift: f64 },
    /// Per-feature `(x - mean) / std` on the last axis, not trained.
    Standardize { mean: Vec<f64>, std: Vec<f64> },
    Flatten,
}

impl Layer {
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense(d) => {
                check_shape("dense input", &[d.n_in()], input)?;
                Ok(vec![d.n_out()])
            }
            Layer::Conv2d(c) => Ok(ConvGeom::new(input, c.kernel.shape(), c.stride)?.out_shape()),
            Layer::Relu | Layer::Affine { .. } => Ok(input.to_vec()),
            Layer::Standardize { mean, std } => {
                if mean.len() != std.len() || std.iter().any(|s| !(*s > 0.0)) {
                    return Err(NnError::InvalidTensor("standardize needs positive std per mean".into()));
                }
                check_shape("standardize input", &[mean.len()], input)?;
                Ok(input.to_vec())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense(d) => vec![&d.weight, &d.bias],
            Layer::Conv2d(c) => vec![&c.kernel, &c.bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense(d) => vec![&mut d.weight, &mut d.bias],
            Layer::Conv2d(c) => vec![&mut c.kernel, &mut c.bias],
            _ => Vec::new(),
        }
    }

    /// Batched forward.
    fn forward(&self, x: &[f64], batch: usize, in_shape: &[usize]) -> Vec<f64> {
        match self {
            Layer::Dense(d) => ops::dense_batch(x, batch, &d.weight, &d.bias),
            Layer::Conv2d(c) => {
                let g = ConvGeom::new(in_shape, c.kernel.shape(), c.stride)
                    .expect("shapes validated at construction");
                ops::conv_batch(x, batch, &g, &c.kernel, &c.bias)
            }
            Layer::Relu => x.iter().map(|&v| v.max(0.0)).collect(),
            Layer::Affine { scale, shift } => x.iter().map(|&v| scale * v + shift).collect(),
            Layer::Standardize { mean, std } => x
                .chunks_exact(mean.len())
                .flat_map(|row| row.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s))
                .collect(),
            Layer::Flatten => x.to_vec(),
        }
    }
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    batch: usize,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    output: Tensor,
}

impl Trace {
    pub fn output(&self) -> &Tensor {
        &self.output
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

/// Forward state reused while probing parameter perturbations.
pub type SequentialCache = Trace;

/// A fixed chain of layers over a per-sample input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    /// `shapes[i]` is the per-sample input shape of layer `i`; the last entry
    /// is the output shape.
    shapes: Vec<Vec<usize>>,
}

impl Sequential {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut shapes = vec![input_shape.clone()];
        for layer in &layers {
            let next = layer.output_shape(shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(Self { input_shape, layers, shapes })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("non-empty")
    }

    /// Per-sample input shape of every layer, then the output shape.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access to layer contents. Replacing a layer with one of a
    /// different geometry is not allowed and is checked on the next forward.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    fn batch_of(&self, x: &Tensor) -> Result<usize> {
        let shape = x.shape();
        if shape.len() != self.input_shape.len() + 1 || shape[1..] != self.input_shape[..] {
            let mut expected = vec![0];
            expected.extend_from_slice(&self.input_shape);
            return Err(NnError::ShapeMismatch { context: "network input", expected, found: shape.to_vec() });
        }
        Ok(shape[0])
    }

    fn check_geometry(&self) -> Result<()> {
        for (layer, pair) in self.layers.iter().zip(self.shapes.windows(2)) {
            check_shape("layer geometry", &pair[1], &layer.output_shape(&pair[0])?)?;
        }
        Ok(())
    }

    fn batch_tensor(&self, batch: usize, data: Vec<f64>) -> Tensor {
        let mut shape = vec![batch];
        shape.extend_from_slice(self.output_shape());
        Tensor::from_parts(shape, data)
    }

    /// Inference on a batch `[b, ...input_shape]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.batch_of(x)?;
        self.check_geometry()?;
        let mut act = x.data().to_vec();
        for (layer, shape) in self.layers.iter().zip(&self.shapes) {
            act = layer.forward(&act, batch, shape);
        }
        if act.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("forward"));
        }
        Ok(self.batch_tensor(batch, act))
    }

    /// Forward pass that keeps what [`Sequential::backward`] needs.
    pub fn forward_trace(&self, x: &Tensor) -> Result<Trace> {
        let batch = self.batch_of(x)?;
        self.check_geometry()?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut act = x.data().to_vec();
        for (layer, shape) in self.layers.iter().zip(&self.shapes) {
            let next = layer.forward(&act, batch, shape);
            inputs.push(act);
            act = next;
        }
        if act.iter().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite("forward"));
        }
        Ok(Trace { batch, inputs, output: self.batch_tensor(batch, act) })
    }

    /// Reverse pass. `d_out` is dLoss/dOutput for the traced batch. Returns
    /// parameter gradients in [`Sequential::params`] order and, when
    /// `want_input_grad`, dLoss/dInput.
    pub fn backward(
        &self,
        trace: &Trace,
        d_out: &[f64],
        want_input_grad: bool,
    ) -> Result<(Vec<Tensor>, Option<Tensor>)> {
        check_shape("output gradient", &[trace.output.len()], &[d_out.len()])?;
        let batch = trace.batch;
        // layers below the first trainable one need no gradient unless dx is wanted
        let stop = if want_input_grad {
            0
        } else {
            self.layers.iter().position(|l| !l.params().is_empty()).unwrap_or(self.layers.len())
        };
        let mut grads: Vec<Vec<Tensor>> = vec![Vec::new(); self.layers.len()];
        let mut delta = d_out.to_vec();
        for i in (stop..self.layers.len()).rev() {
            let need_dx = i > stop || want_input_grad;
            let x = &trace.inputs[i];
            match &self.layers[i] {
                Layer::Dense(d) => {
                    let (dw, db, dx) = ops::dense_batch_backward(x, &delta, batch, &d.weight, need_dx);
                    grads[i] = vec![
                        Tensor::from_parts(d.weight.shape().to_vec(), dw),
                        Tensor::from_parts(d.bias.shape().to_vec(), db),
                    ];
                    delta = dx.unwrap_or_default();
                }
                Layer::Conv2d(c) => {
                    let g = ConvGeom::new(&self.shapes[i], c.kernel.shape(), c.stride)?;
                    let (dk, db, dx) = ops::conv_batch_backward(x, &delta, batch, &g, &c.kernel, need_dx);
                    grads[i] = vec![
                        Tensor::from_parts(c.kernel.shape().to_vec(), dk),
                        Tensor::from_parts(c.bias.shape().to_vec(), db),
                    ];
                    delta = dx.unwrap_or_default();
                }
                Layer::Relu => {
                    delta.iter_mut().zip(x).for_each(|(d, &v)| {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    });
                }
                Layer::Affine { scale, .. } => delta.iter_mut().for_each(|d| *d *= scale),
                Layer::Standardize { std, .. } => {
                    for row in delta.chunks_exact_mut(std.len()) {
                        row.iter_mut().zip(std).for_each(|(d, s)| *d /= s);
                    }
                }
                Layer::Flatten => {}
            }
        }
        let dx = want_input_grad.then(|| {
            let mut shape = vec![batch];
            shape.extend_from_slice(&self.input_shape);
            Tensor::from_parts(shape, delta)
        });
        Ok((grads.into_iter().flatten().collect(), dx))
    }

    /// Maps a flat parameter-tensor index to its layer.
    pub(crate) fn layer_of_param(&self, tensor: usize) -> usize {
        let mut seen = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            seen += layer.params().len();
            if tensor < seen {
                return i;
            }
        }
        panic!("parameter tensor {tensor} out of range");
    }

    fn cached_output(&self, trace: &'_ Trace, layer: usize) -> Vec<f64> {
        match trace.inputs.get(layer + 1) {
            Some(x) => x.clone(),
            None => trace.output.data().to_vec(),
        }
    }

    /// Output of the traced batch with parameter `(tensor, index)` shifted by
    /// `delta`, without touching the stored parameters. The flag reports
    /// whether any ReLU input changed sign against the trace.
    ///
    /// A single weight only moves one output channel of its layer, so that
    /// layer and the next linear layer are updated from the cached
    /// activations instead of being recomputed.
    pub(crate) fn forward_perturbed(&self, trace: &Trace, tensor: usize, index: usize, delta: f64) -> (Vec<f64>, bool) {
        let (layer, slot) = self.param_location(tensor);
        let batch = trace.batch;
        let mut act = self.cached_output(trace, layer);
        let x = &trace.inputs[layer];
        // the changed channel and the channel count of the activation
        let (channel, width) = match &self.layers[layer] {
            Layer::Dense(d) => {
                let (n_out, n_in) = (d.n_out(), d.n_in());
                let j = if slot == 0 { index / n_in } else { index };
                for b in 0..batch {
                    let step = if slot == 0 { x[b * n_in + index % n_in] } else { 1.0 };
                    act[b * n_out + j] += delta * step;
                }
                (j, n_out)
            }
            Layer::Conv2d(c) => {
                let g = ConvGeom::new(&self.shapes[layer], c.kernel.shape(), c.stride).expect("validated");
                let k = g.patch();
                let co = if slot == 0 { index / k } else { index };
                // kernel column (ky, kx, ci) of the perturbed weight
                let kk = index % k;
                let (ky, kx, ci) = (kk / (g.kw * g.c), kk / g.c % g.kw, kk % g.c);
                for b in 0..batch {
                    let xs = &x[b * g.in_len()..(b + 1) * g.in_len()];
                    for oy in 0..g.oh {
                        for ox in 0..g.ow {
                            let step = if slot == 0 {
                                xs[((oy * g.stride + ky) * g.w + ox * g.stride + kx) * g.c + ci]
                            } else {
                                1.0
                            };
                            act[((b * g.oh + oy) * g.ow + ox) * g.out_c + co] += delta * step;
                        }
                    }
                }
                (co, g.out_c)
            }
            _ => unreachable!("parameter tensors belong to dense or conv layers"),
        };
        let mut crossed = false;
        let mut sparse = true;
        for i in layer + 1..self.layers.len() {
            let cached_in = &trace.inputs[i];
            match &self.layers[i] {
                Layer::Relu => {
                    crossed |= act.iter().zip(cached_in).any(|(a, b)| (*a > 0.0) != (*b > 0.0));
                    act.iter_mut().for_each(|v| *v = v.max(0.0));
                }
                Layer::Flatten => {}
                Layer::Dense(d) if sparse => {
                    let (n_out, n_in) = (d.n_out(), d.n_in());
                    let w = d.weight.data();
                    let mut out = self.cached_output(trace, i);
                    for b in 0..batch {
                        for idx in (channel..n_in).step_by(width) {
                            let dv = act[b * n_in + idx] - cached_in[b * n_in + idx];
                            if dv != 0.0 {
                                for (o, slot) in out[b * n_out..(b + 1) * n_out].iter_mut().enumerate() {
                                    *slot += w[o * n_in + idx] * dv;
                                }
                            }
                        }
                    }
                    act = out;
                    sparse = false;
                }
                Layer::Conv2d(c) if sparse => {
                    let g = ConvGeom::new(&self.shapes[i], c.kernel.shape(), c.stride).expect("validated");
                    let kern = c.kernel.data();
                    let k = g.patch();
                    let mut out = self.cached_output(trace, i);
                    for b in 0..batch {
                        let xin = &act[b * g.in_len()..(b + 1) * g.in_len()];
                        let xold = &cached_in[b * g.in_len()..(b + 1) * g.in_len()];
                        for oy in 0..g.oh {
                            for ox in 0..g.ow {
                                let o_base = ((b * g.oh + oy) * g.ow + ox) * g.out_c;
                                for ky in 0..g.kh {
                                    for kx in 0..g.kw {
                                        let src = ((oy * g.stride + ky) * g.w + ox * g.stride + kx) * g.c + channel;
                                        let dv = xin[src] - xold[src];
                                        if dv == 0.0 {
                                            continue;
                                        }
                                        let kk = (ky * g.kw + kx) * g.c + channel;
                                        for o in 0..g.out_c {
                                            out[o_base + o] += kern[o * k + kk] * dv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    act = out;
                    sparse = false;
                }
                other => {
                    act = other.forward(&act, batch, &self.shapes[i]);
                    sparse = false;
                }
            }
        }
        (act, crossed)
    }

    /// Runs the whole chain on `input`, reporting ReLU sign changes against
    /// `trace` (used when an upstream branch changed).
    pub(crate) fn forward_checked(&self, trace: &Trace, input: Vec<f64>) -> (Vec<f64>, bool) {
        let mut crossed = false;
        let mut act = input;
        for i in 0..self.layers.len() {
            if matches!(self.layers[i], Layer::Relu) {
                crossed |= act.iter().zip(&trace.inputs[i]).any(|(a, b)| (*a > 0.0) != (*b > 0.0));
            }
            act = self.layers[i].forward(&act, trace.batch, &self.shapes[i]);
        }
        (act, crossed)
    }

    /// Per-layer param tensor offsets: `(layer, index within layer)`.
    pub(crate) fn param_location(&self, tensor: usize) -> (usize, usize) {
        let layer = self.layer_of_param(tensor);
        let before: usize = self.layers[..layer].iter().map(|l| l.params().len()).sum();
        (layer, tensor - before)
    }
}
