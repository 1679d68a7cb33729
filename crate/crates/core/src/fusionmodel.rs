//! DAVE-2 vision branch, CAN-feature MLP branch and the fusion head.
//!
//! The vision branch maps a `66x200x3` image in `[0, 1]` to a 10-wide
//! embedding. The fused variant concatenates that with the MLP's embedding
//! of the five CAN features before the head; the vision-only variant feeds
//! the head the image embedding alone.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neuralnet::{
    mse, mse_grad, read_checkpoint, write_checkpoint, AdamState, Conv2d, Dense, GradCheckable, Layer, NnError,
    Sequential, Tensor, Trace, DEFAULT_LR,
};
use crate::seeds::{self, Stream};
use crate::sync::SyncedSample;
use crate::videostream::Image;

pub const INPUT_H: usize = 66;
pub const INPUT_W: usize = 200;
pub const CHANNELS: usize = 3;
pub const CAN_DIM: usize = 5;
pub const VISION_EMBEDDING: usize = 10;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("fused model needs CAN features")]
    MissingCanFeatures,
    #[error("vision-only model was given CAN features")]
    UnexpectedCanFeatures,
    #[error("input geometry mismatch: expected {expected:?}, found {found:?}")]
    GeometryMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("bad checkpoint header: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    VisionOnly,
    Fused,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::VisionOnly => "vision_only",
            Variant::Fused => "fused",
        }
    }

    pub fn uses_can(self) -> bool {
        self == Variant::Fused
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub input_h: usize,
    pub input_w: usize,
    pub channels: usize,
    pub can_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        Self {
            variant,
            input_h: INPUT_H,
            input_w: INPUT_W,
            channels: CHANNELS,
            can_dim: CAN_DIM,
            mlp_hidden: vec![64, 32],
            head_hidden: vec![32, 16],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if (self.input_h, self.input_w, self.channels) != (INPUT_H, INPUT_W, CHANNELS) {
            return Err(ModelError::ConfigMismatch(format!(
                "vision branch needs {INPUT_H}x{INPUT_W}x{CHANNELS} input, got {}x{}x{}",
                self.input_h, self.input_w, self.channels
            )));
        }
        if self.variant == Variant::Fused {
            if self.can_dim != CAN_DIM {
                return Err(ModelError::ConfigMismatch(format!("can_dim must be {CAN_DIM}, got {}", self.can_dim)));
            }
            if self.mlp_hidden.is_empty() {
                return Err(ModelError::ConfigMismatch("mlp needs at least one layer".into()));
            }
        }
        if self.mlp_hidden.iter().chain(&self.head_hidden).any(|&w| w == 0) {
            return Err(ModelError::ConfigMismatch("layer widths must be positive".into()));
        }
        Ok(())
    }

    fn image_shape(&self) -> Vec<usize> {
        vec![self.input_h, self.input_w, self.channels]
    }

    fn mlp_width(&self) -> usize {
        match self.variant {
            Variant::Fused => *self.mlp_hidden.last().expect("validated"),
            Variant::VisionOnly => 0,
        }
    }
}

/// Normalization, five convolutions and the 100-50-10 dense stack.
pub fn build_dave2_branch(config: &ModelConfig) -> Result<Sequential> {
    config.validate()?;
    let mut rng = seeds::rng(config.seed, Stream::InitVision);
    let convs = [(3, 24, 5, 2), (24, 36, 5, 2), (36, 48, 5, 2), (48, 64, 3, 1), (64, 64, 3, 1)];
    let mut layers = vec![Layer::Affine { scale: 2.0, shift: -1.0 }];
    for (c_in, c_out, k, s) in convs {
        layers.push(Layer::Conv2d(Conv2d::glorot(c_in, c_out, (k, k), s, &mut rng)));
        layers.push(Layer::Relu);
    }
    layers.push(Layer::Flatten);
    for (n_in, n_out) in [(1152, 100), (100, 50), (50, VISION_EMBEDDING)] {
        layers.push(Layer::Dense(Dense::glorot(n_in, n_out, &mut rng)));
        layers.push(Layer::Relu);
    }
    Ok(Sequential::new(config.image_shape(), layers)?)
}

/// Standardization of the raw features (identity until fitted), then the
/// ReLU dense stack of `mlp_hidden`.
pub fn build_can_mlp(config: &ModelConfig) -> Result<Sequential> {
    config.validate()?;
    if config.can_dim != CAN_DIM || config.mlp_hidden.is_empty() {
        return Err(ModelError::ConfigMismatch("mlp needs can_dim 5 and at least one layer".into()));
    }
    let mut rng = seeds::rng(config.seed, Stream::InitMlp);
    let mut layers = vec![Layer::Standardize { mean: vec![0.0; config.can_dim], std: vec![1.0; config.can_dim] }];
    let mut n_in = config.can_dim;
    for &n_out in &config.mlp_hidden {
        layers.push(Layer::Dense(Dense::glorot(n_in, n_out, &mut rng)));
        layers.push(Layer::Relu);
        n_in = n_out;
    }
    Ok(Sequential::new(vec![config.can_dim], layers)?)
}

/// ReLU dense stack of `head_hidden` and a linear scalar output.
pub fn build_head(config: &ModelConfig) -> Result<Sequential> {
    config.validate()?;
    let mut rng = seeds::rng(config.seed, Stream::InitHead);
    let width = VISION_EMBEDDING + config.mlp_width();
    let mut layers = Vec::new();
    let mut n_in = width;
    for &n_out in &config.head_hidden {
        layers.push(Layer::Dense(Dense::glorot(n_in, n_out, &mut rng)));
        layers.push(Layer::Relu);
        n_in = n_out;
    }
    layers.push(Layer::Dense(Dense::glorot(n_in, 1, &mut rng)));
    Ok(Sequential::new(vec![width], layers)?)
}

/// A batch of model inputs: images `[b, h, w, c]` and, for the fused
/// variant, features `[b, can_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub images: Tensor,
    pub can: Option<Tensor>,
}

impl ModelInput {
    /// Stacks samples, including CAN features only when `with_can`.
    pub fn from_samples(samples: &[&SyncedSample], with_can: bool) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(NnError::EmptyInput.into());
        };
        let shape = [first.image.height, first.image.width, first.image.channels];
        let mut pixels = Vec::with_capacity(samples.len() * first.image.pixels.len());
        for s in samples {
            let found = [s.image.height, s.image.width, s.image.channels];
            if found != shape {
                return Err(ModelError::GeometryMismatch { expected: shape.to_vec(), found: found.to_vec() });
            }
            pixels.extend_from_slice(&s.image.pixels);
        }
        let images = Tensor::new(vec![samples.len(), shape[0], shape[1], shape[2]], pixels)?;
        let can = with_can
            .then(|| Tensor::new(vec![samples.len(), CAN_DIM], samples.iter().flat_map(|s| s.can_features).collect()))
            .transpose()?;
        Ok(Self { images, can })
    }

    pub fn batch(&self) -> usize {
        self.images.shape().first().copied().unwrap_or(0)
    }
}

/// Forward state of all three parts for one batch.
#[derive(Debug, Clone)]
pub struct FusedTrace {
    vision: Trace,
    mlp: Option<Trace>,
    head: Trace,
}

impl FusedTrace {
    pub fn predictions(&self) -> &[f64] {
        self.head.output().data()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedModel {
    config: ModelConfig,
    vision: Sequential,
    mlp: Option<Sequential>,
    head: Sequential,
}

fn concat_rows(a: &[f64], wa: usize, b: &[f64], wb: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.chunks_exact(wa).zip(b.chunks_exact(wb.max(1))) {
        out.extend_from_slice(ra);
        out.extend_from_slice(&rb[..wb]);
    }
    out
}

fn split_rows(x: &[f64], wa: usize, wb: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = Vec::with_capacity(x.len() / (wa + wb) * wa);
    let mut b = Vec::with_capacity(x.len() / (wa + wb) * wb);
    for row in x.chunks_exact(wa + wb) {
        a.extend_from_slice(&row[..wa]);
        b.extend_from_slice(&row[wa..]);
    }
    (a, b)
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    can_mean: Option<Vec<f64>>,
    can_std: Option<Vec<f64>>,
}

impl FusedModel {
    /// Builds a freshly initialized model. Both variants draw the vision
    /// branch from the same stream, so equal seeds give equal vision weights.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let vision = build_dave2_branch(&config)?;
        let mlp = config.variant.uses_can().then(|| build_can_mlp(&config)).transpose()?;
        let head = build_head(&config)?;
        Ok(Self { config, vision, mlp, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn vision(&self) -> &Sequential {
        &self.vision
    }

    pub fn mlp(&self) -> Option<&Sequential> {
        self.mlp.as_ref()
    }

    pub fn head(&self) -> &Sequential {
        &self.head
    }

    /// Vision, then MLP, then head; layer order within each.
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = self.vision.params();
        if let Some(m) = &self.mlp {
            out.extend(m.params());
        }
        out.extend(self.head.params());
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.vision.params_mut();
        if let Some(m) = &mut self.mlp {
            out.extend(m.params_mut());
        }
        out.extend(self.head.params_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }

    /// Sets the feature standardization applied in front of the MLP.
    pub fn set_can_standardization(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        let Some(mlp) = &mut self.mlp else {
            return Err(ModelError::UnexpectedCanFeatures);
        };
        if mean.len() != self.config.can_dim || std.len() != self.config.can_dim {
            return Err(ModelError::ConfigMismatch(format!("standardization needs {} entries", self.config.can_dim)));
        }
        if mean.iter().any(|m| !m.is_finite()) || std.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(ModelError::ConfigMismatch("standardization needs finite mean and positive std".into()));
        }
        mlp.layers_mut()[0] = Layer::Standardize { mean, std };
        Ok(())
    }

    pub fn can_standardization(&self) -> Option<(&[f64], &[f64])> {
        match self.mlp.as_ref()?.layers().first()? {
            Layer::Standardize { mean, std } => Some((mean, std)),
            _ => None,
        }
    }

    fn check_input(&self, input: &ModelInput) -> Result<usize> {
        let shape = input.images.shape();
        let expected = self.config.image_shape();
        if shape.len() != 4 || shape[1..] != expected[..] {
            return Err(ModelError::GeometryMismatch { expected, found: shape.get(1..).unwrap_or(&[]).to_vec() });
        }
        let batch = shape[0];
        match (&input.can, self.config.variant) {
            (None, Variant::Fused) => return Err(ModelError::MissingCanFeatures),
            (Some(_), Variant::VisionOnly) => return Err(ModelError::UnexpectedCanFeatures),
            (Some(c), _) if c.shape() != [batch, self.config.can_dim] => {
                return Err(ModelError::GeometryMismatch {
                    expected: vec![batch, self.config.can_dim],
                    found: c.shape().to_vec(),
                })
            }
            _ => {}
        }
        Ok(batch)
    }

    fn head_input(&self, vision_out: &[f64], mlp_out: Option<&[f64]>, batch: usize) -> Result<Tensor> {
        let data = match mlp_out {
            Some(m) => concat_rows(vision_out, VISION_EMBEDDING, m, self.config.mlp_width()),
            None => vision_out.to_vec(),
        };
        Ok(Tensor::new(vec![batch, VISION_EMBEDDING + self.config.mlp_width()], data)?)
    }

    /// One prediction per batch member.
    pub fn forward(&self, input: &ModelInput) -> Result<Vec<f64>> {
        let batch = self.check_input(input)?;
        let v = self.vision.forward(&input.images)?;
        let m = match (&self.mlp, &input.can) {
            (Some(mlp), Some(can)) => Some(mlp.forward(can)?),
            _ => None,
        };
        let h = self.head_input(v.data(), m.as_ref().map(Tensor::data), batch)?;
        Ok(self.head.forward(&h)?.into_data())
    }

    pub fn forward_trace(&self, input: &ModelInput) -> Result<FusedTrace> {
        let batch = self.check_input(input)?;
        let vision = self.vision.forward_trace(&input.images)?;
        let mlp = match (&self.mlp, &input.can) {
            (Some(mlp), Some(can)) => Some(mlp.forward_trace(can)?),
            _ => None,
        };
        let h = self.head_input(vision.output().data(), mlp.as_ref().map(|t| t.output().data()), batch)?;
        let head = self.head.forward_trace(&h)?;
        Ok(FusedTrace { vision, mlp, head })
    }

    /// Parameter gradients in [`FusedModel::parameters`] order.
    pub fn backward(&self, trace: &FusedTrace, d_out: &[f64]) -> Result<Vec<Tensor>> {
        let (head_grads, dx) = self.head.backward(&trace.head, d_out, true)?;
        let dx = dx.expect("input gradient requested");
        let (dv, dm) = split_rows(dx.data(), VISION_EMBEDDING, self.config.mlp_width());
        let (mut grads, _) = self.vision.backward(&trace.vision, &dv, false)?;
        if let (Some(mlp), Some(mt)) = (&self.mlp, &trace.mlp) {
            grads.extend(mlp.backward(mt, &dm, false)?.0);
        }
        grads.extend(head_grads);
        Ok(grads)
    }

    /// MSE over the batch and its parameter gradients.
    pub fn loss_and_gradients(&self, input: &ModelInput, target: &[f64]) -> Result<(f64, Vec<Tensor>)> {
        let trace = self.forward_trace(input)?;
        let pred = trace.predictions();
        let loss = mse(pred, target)?;
        if !loss.is_finite() {
            return Err(NnError::NonFinite("loss").into());
        }
        let grads = self.backward(&trace, &mse_grad(pred, target)?)?;
        Ok((loss, grads))
    }

    /// Single-sample prediction. `can` must be present exactly when the
    /// model is fused.
    pub fn predict(&self, image: &Image, can: Option<&[f64]>) -> Result<f64> {
        let found = vec![image.height, image.width, image.channels];
        if found != self.config.image_shape() {
            return Err(ModelError::GeometryMismatch { expected: self.config.image_shape(), found });
        }
        let mut shape = vec![1];
        shape.extend(found);
        let images = Tensor::new(shape, image.pixels.clone())?;
        let can = can.map(|c| Tensor::new(vec![1, c.len()], c.to_vec())).transpose()?;
        Ok(self.forward(&ModelInput { images, can })?[0])
    }

    /// Writes a JSON header line followed by the binary checkpoint. Without
    /// `adam`, fresh optimizer state is stored.
    pub fn save<W: Write>(&self, mut out: W, adam: Option<&AdamState>) -> Result<()> {
        let (can_mean, can_std) = match self.can_standardization() {
            Some((m, s)) => (Some(m.to_vec()), Some(s.to_vec())),
            None => (None, None),
        };
        let header = Header { config: self.config.clone(), can_mean, can_std };
        serde_json::to_writer(&mut out, &header).map_err(|e| ModelError::BadHeader(e.to_string()))?;
        out.write_all(b"\n")?;
        let params = self.parameters();
        let fresh;
        let adam = match adam {
            Some(a) => a,
            None => {
                fresh = AdamState::new(DEFAULT_LR, &params);
                &fresh
            }
        };
        write_checkpoint(out, &params, adam)?;
        Ok(())
    }

    pub fn load<R: BufRead>(mut source: R) -> Result<(Self, AdamState)> {
        let mut line = Vec::new();
        source.read_until(b'\n', &mut line)?;
        let header: Header = serde_json::from_slice(&line).map_err(|e| ModelError::BadHeader(e.to_string()))?;
        let mut model = Self::new(header.config)?;
        if let (Some(mean), Some(std)) = (header.can_mean, header.can_std) {
            model.set_can_standardization(mean, std)?;
        }
        let (params, adam) = read_checkpoint(source)?;
        let mut slots = model.parameters_mut();
        if slots.len() != params.len() {
            return Err(ModelError::BadHeader(format!(
                "checkpoint holds {} tensors, model has {}",
                params.len(),
                slots.len()
            )));
        }
        for (slot, p) in slots.iter_mut().zip(params) {
            if slot.shape() != p.shape() {
                return Err(ModelError::GeometryMismatch { expected: slot.shape().to_vec(), found: p.shape().to_vec() });
            }
            **slot = p;
        }
        Ok((model, adam))
    }
}

impl GradCheckable for FusedModel {
    type Input = ModelInput;
    type Cache = FusedTrace;

    fn param_tensors(&self) -> Vec<&Tensor> {
        self.parameters()
    }

    fn loss_and_grads(&self, input: &ModelInput, target: &[f64]) -> crate::neuralnet::Result<(f64, Vec<Tensor>)> {
        self.loss_and_gradients(input, target).map_err(|e| match e {
            ModelError::Nn(e) => e,
            e => NnError::InvalidTensor(e.to_string()),
        })
    }

    fn prepare(&self, input: &ModelInput) -> crate::neuralnet::Result<FusedTrace> {
        self.forward_trace(input).map_err(|e| match e {
            ModelError::Nn(e) => e,
            e => NnError::InvalidTensor(e.to_string()),
        })
    }

    fn perturbed_loss(&mut self, cache: &FusedTrace, target: &[f64], tensor: usize, index: usize, delta: f64) -> (f64, bool) {
        let n_vision = self.vision.params().len();
        let n_mlp = self.mlp.as_ref().map_or(0, |m| m.params().len());
        let mw = self.config.mlp_width();
        let (out, crossed) = if tensor < n_vision {
            let (v, c1) = self.vision.forward_perturbed(&cache.vision, tensor, index, delta);
            let h = match &cache.mlp {
                Some(mt) => concat_rows(&v, VISION_EMBEDDING, mt.output().data(), mw),
                None => v,
            };
            let (out, c2) = self.head.forward_checked(&cache.head, h);
            (out, c1 || c2)
        } else if tensor < n_vision + n_mlp {
            let mlp = self.mlp.as_ref().expect("mlp tensors exist");
            let mt = cache.mlp.as_ref().expect("fused trace");
            let (m, c1) = mlp.forward_perturbed(mt, tensor - n_vision, index, delta);
            let h = concat_rows(cache.vision.output().data(), VISION_EMBEDDING, &m, mw);
            let (out, c2) = self.head.forward_checked(&cache.head, h);
            (out, c1 || c2)
        } else {
            self.head.forward_perturbed(&cache.head, tensor - n_vision - n_mlp, index, delta)
        };
        (mse(&out, target).unwrap_or(f64::NAN), crossed)
    }
}
