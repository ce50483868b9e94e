//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Result, TensorError};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat entry) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// Max relative error between `backward()` and central differences over every entry.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    Ok(grad_check_sampled(f, inputs, h, usize::MAX)?.max_rel_err)
}

/// Like [`grad_check`] but probes at most `max_per_input` evenly spaced entries
/// of each input.
///
/// The error of one entry is `|a - n| / max(|a|, |n|, floor)` where `floor` is
/// `1e-5 · max(1, |a|∞, |n|∞)`, so entries whose true gradient is zero are
/// judged against the scale of the whole gradient rather than against 0.
pub fn grad_check_sampled<F>(f: F, inputs: &[Tensor], h: f64, max_per_input: usize) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if max_per_input == 0 {
        return Err(TensorError::Contract("grad_check needs at least one probe per input".into()));
    }
    let leaves: Vec<Tensor> = inputs.iter().map(Tensor::to_param).collect();
    let loss = f(&leaves)?;
    if loss.numel() != 1 {
        return Err(TensorError::Contract("grad_check needs a scalar function".into()));
    }
    loss.backward()?;

    let mut pairs: Vec<(usize, usize, f64, f64)> = Vec::new();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let n = leaf.numel();
        let stride = n.div_ceil(max_per_input.min(n)).max(1);
        for j in (0..n).step_by(stride) {
            let eval = |delta: f64| -> Result<f64> {
                no_grad(|| {
                    let shifted: Vec<Tensor> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, t)| {
                            if k == i {
                                let mut d = t.to_vec();
                                d[j] += delta;
                                Tensor::new(d, t.shape()).expect("same shape")
                            } else {
                                t.detach()
                            }
                        })
                        .collect();
                    Ok(f(&shifted)?.item())
                })
            };
            let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
            pairs.push((i, j, analytic[j], numeric));
        }
    }

    let scale = pairs
        .iter()
        .fold(1.0_f64, |m, &(_, _, a, n)| m.max(a.abs()).max(n.abs()));
    let floor = 1e-5 * scale;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: pairs.len(),
    };
    for (i, j, a, n) in pairs {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}
