//! Untracked forward kernels shared by the tape and by evaluation code.

use crate::error::{Error, Result};

use super::Tensor;

/// Row-wise softmax over the last axis, gated by a binary mask.
///
/// `a_ij = c_ij exp(z_ij) / sum_l c_il exp(z_il)`. The row maximum is taken
/// over allowed entries only, so masked logits never take part in the
/// stabilization. Disallowed entries are exactly zero in the output.
pub fn masked_softmax(logits: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    let cols = logits.cols();
    if let Some(m) = mask {
        if m.len() != logits.numel() {
            return Err(Error::dim("masked_softmax", logits.shape(), &[m.len()]));
        }
    }
    let mut out = vec![0.0; logits.numel()];
    for r in 0..logits.rows() {
        let z = logits.row(r);
        let allowed = |j: usize| mask.map_or(true, |m| m[r * cols + j]);
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for (j, &v) in z.iter().enumerate() {
            if allowed(j) {
                any = true;
                max = max.max(v);
            }
        }
        if !any {
            return Err(Error::DegenerateRow { row: r });
        }
        let row = &mut out[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (j, o) in row.iter_mut().enumerate() {
            if allowed(j) {
                *o = (z[j] - max).exp();
                total += *o;
            }
        }
        for o in row.iter_mut() {
            *o /= total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

pub fn softmax(logits: &Tensor) -> Tensor {
    masked_softmax(logits, None).expect("unmasked softmax cannot degenerate")
}

/// Log-softmax of a single row of logits.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Normalizes each row to zero mean and unit variance, then applies
/// `gain * x_hat + bias`. Returns `(output, x_hat, inv_std per row)`.
pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let d = x.cols();
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::dim("layer_norm", x.shape(), gain.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
    }
    let (g, b) = (gain.data(), bias.data());
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std.push(inv);
        for j in 0..d {
            let h = (row[j] - mean) * inv;
            xhat[r * d + j] = h;
            out[r * d + j] = h * g[j] + b[j];
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, xhat, inv_std))
}

/// Label-smoothed cross-entropy of one row of logits against `target`.
///
/// The smoothed distribution puts `1 - s + s/V` on the target and `s/V`
/// everywhere else.
pub fn label_smoothed_ce(logits: &[f64], target: usize, smoothing: f64) -> Result<f64> {
    let v = logits.len();
    if target >= v {
        return Err(Error::Index {
            what: "label_smoothed_ce target",
            index: target,
            limit: v,
        });
    }
    check_smoothing(smoothing)?;
    let logp = log_softmax(logits);
    let off = smoothing / v as f64;
    let on = 1.0 - smoothing + off;
    Ok(-logp
        .iter()
        .enumerate()
        .map(|(j, lp)| if j == target { on * lp } else { off * lp })
        .sum::<f64>())
}

pub(crate) fn check_smoothing(smoothing: f64) -> Result<()> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Contract(format!(
            "label smoothing must lie in [0, 1), got {smoothing}"
        )));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
