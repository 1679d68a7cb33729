//! Central-difference verification of analytic gradients.
//!
//! Every scalar parameter is nudged by `±h` and the loss recomputed from the
//! first affected layer onward. A ReLU network is only piecewise smooth; when
//! a nudge flips any ReLU on either side, the difference quotient straddles a
//! kink and is not a derivative estimate, so that parameter is counted in
//! `skipped_kinks` instead of being compared.

use super::layers::{Sequential, Trace};
use super::ops::{mse, mse_grad};
use super::{check_shape, Result, Tensor};

/// A network whose parameters can be probed one scalar at a time.
pub trait GradCheckable: Clone {
    type Input;
    type Cache;

    fn param_tensors(&self) -> Vec<&Tensor>;

    /// MSE loss against `target` and its gradient for every parameter tensor.
    fn loss_and_grads(&self, input: &Self::Input, target: &[f64]) -> Result<(f64, Vec<Tensor>)>;

    /// Forward state shared by all probes.
    fn prepare(&self, input: &Self::Input) -> Result<Self::Cache>;

    /// Loss with parameter `(tensor, index)` shifted by `delta`, and whether
    /// any ReLU changed state relative to `cache`. Restores the parameter.
    fn perturbed_loss(
        &mut self,
        cache: &Self::Cache,
        target: &[f64],
        tensor: usize,
        index: usize,
        delta: f64,
    ) -> (f64, bool);
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub pass: bool,
    pub max_rel_error: f64,
    /// `(tensor, index)` of the worst parameter.
    pub worst: Option<(usize, usize)>,
    /// Position of the worst parameter in the flattened parameter vector.
    pub worst_flat_index: Option<usize>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub h: f64,
    pub rtol: f64,
}

/// Checks `analytic` against central differences of `net`'s loss.
/// Relative error uses `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn compare_gradients<N: GradCheckable>(
    net: &N,
    input: &N::Input,
    target: &[f64],
    analytic: &[Tensor],
    h: f64,
    rtol: f64,
) -> Result<GradCheckReport> {
    let mut probe = net.clone();
    let shapes: Vec<Vec<usize>> = net.param_tensors().iter().map(|t| t.shape().to_vec()).collect();
    check_shape("analytic gradient count", &[shapes.len()], &[analytic.len()])?;
    for (s, g) in shapes.iter().zip(analytic) {
        check_shape("analytic gradient", s, g.shape())?;
    }
    let cache = net.prepare(input)?;
    let mut report = GradCheckReport {
        pass: true,
        max_rel_error: 0.0,
        worst: None,
        worst_flat_index: None,
        checked: 0,
        skipped_kinks: 0,
        h,
        rtol,
    };
    let mut flat = 0;
    for (t, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.data().iter().enumerate() {
            let (plus, kink_p) = probe.perturbed_loss(&cache, target, t, i, h);
            let (minus, kink_m) = probe.perturbed_loss(&cache, target, t, i, -h);
            if kink_p || kink_m {
                report.skipped_kinks += 1;
            } else {
                let numeric = (plus - minus) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                report.checked += 1;
                if rel > report.max_rel_error || report.worst.is_none() || rel.is_nan() {
                    report.max_rel_error = rel;
                    report.worst = Some((t, i));
                    report.worst_flat_index = Some(flat);
                }
            }
            flat += 1;
        }
    }
    report.pass = report.max_rel_error <= rtol;
    Ok(report)
}

/// Runs the network's own backward pass and compares it with central
/// differences at step `h`.
pub fn grad_check<N: GradCheckable>(
    net: &N,
    input: &N::Input,
    target: &[f64],
    h: f64,
    rtol: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = net.loss_and_grads(input, target)?;
    compare_gradients(net, input, target, &analytic, h, rtol)
}

impl GradCheckable for Sequential {
    type Input = Tensor;
    type Cache = Trace;

    fn param_tensors(&self) -> Vec<&Tensor> {
        self.params()
    }

    fn loss_and_grads(&self, input: &Tensor, target: &[f64]) -> Result<(f64, Vec<Tensor>)> {
        let trace = self.forward_trace(input)?;
        let out = trace.output().data();
        let loss = mse(out, target)?;
        let (grads, _) = self.backward(&trace, &mse_grad(out, target)?, false)?;
        Ok((loss, grads))
    }

    fn prepare(&self, input: &Tensor) -> Result<Trace> {
        self.forward_trace(input)
    }

    fn perturbed_loss(&mut self, cache: &Trace, target: &[f64], tensor: usize, index: usize, delta: f64) -> (f64, bool) {
        let (out, crossed) = self.forward_perturbed(cache, tensor, index, delta);
        (mse(&out, target).unwrap_or(f64::NAN), crossed)
    }
}
