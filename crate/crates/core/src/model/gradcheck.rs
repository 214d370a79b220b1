//! Central finite-difference check of the analytic gradients.

use super::network::{backward, forward, loss, loss_and_grad, ForwardOptions};
use super::params::Params;
use super::{ModelConfig, ModelError};
use crate::seqprep::Batch;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / (|numeric| + 1e-8)` over all entries.
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

/// Compares [`backward`] against central differences with step `h`.
///
/// Every forward pass uses the same options, so train-mode dropout masks are
/// identical across the perturbed evaluations.
pub fn check_gradients(
    params: &Params<f64>,
    cfg: &ModelConfig,
    batch: &Batch,
    opts: ForwardOptions,
    h: f64,
) -> Result<GradCheckReport, ModelError> {
    let opts = ForwardOptions {
        keep_cache: true,
        ..opts
    };
    let out = forward(params, cfg, batch, opts)?;
    let (_, dlogits) = loss_and_grad(&out.logits, batch);
    let grads = backward(params, cfg, out.cache.as_ref(), &dlogits)?;
    let probe = ForwardOptions {
        keep_cache: false,
        ..opts
    };
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };
    for ti in 0..work.tensors.len() {
        for i in 0..work.tensors[ti].data.len() {
            let orig = work.tensors[ti].data[i];
            work.tensors[ti].data[i] = orig + h;
            let up = loss(&forward(&work, cfg, batch, probe)?.logits, batch);
            work.tensors[ti].data[i] = orig - h;
            let down = loss(&forward(&work, cfg, batch, probe)?.logits, batch);
            work.tensors[ti].data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.tensors[ti].data[i];
            let rel = (analytic - numeric).abs() / (numeric.abs() + 1e-8);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst_tensor = work.tensors[ti].name.clone();
                report.worst_index = i;
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
