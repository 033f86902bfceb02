//! Real-valued head and stem layers: fully connected classifier, pooling,
//! and the softmax cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::RealTensor;

/// Fully connected layer, weight [out, in].
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: RealTensor,
    pub bias: Vec<f64>,
    pub frozen: bool,
}

impl LinearParams {
    pub fn zeros(out_features: usize, in_features: usize) -> Self {
        Self {
            weight: RealTensor::zeros(&[out_features, in_features]),
            bias: vec![0.0; out_features],
            frozen: false,
        }
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }
}

pub fn linear_forward(x: &RealTensor, p: &LinearParams) -> Result<RealTensor> {
    let (n, f) = x.dims2()?;
    if f != p.in_features() {
        return Err(Error::ShapeMismatch {
            context: "linear_forward",
            axis: "in_features",
            expected: p.in_features(),
            got: f,
        });
    }
    let o = p.out_features();
    let mut out = RealTensor::zeros(&[n, o]);
    let od = out.data_mut();
    let wd = p.weight.data();
    let xd = x.data();
    for ni in 0..n {
        for oi in 0..o {
            let mut acc = p.bias[oi];
            for fi in 0..f {
                acc += wd[oi * f + fi] * xd[ni * f + fi];
            }
            od[ni * o + oi] = acc;
        }
    }
    Ok(out)
}

pub fn linear_backward(
    grad_out: &RealTensor,
    x: &RealTensor,
    p: &LinearParams,
) -> Result<(RealTensor, RealTensor, Vec<f64>)> {
    let (n, f) = x.dims2()?;
    let o = p.out_features();
    if grad_out.shape() != [n, o] {
        return Err(Error::ShapeMismatch {
            context: "linear_backward",
            axis: "grad_out numel",
            expected: n * o,
            got: grad_out.numel(),
        });
    }
    let gd = grad_out.data();
    let xd = x.data();
    let wd = p.weight.data();
    let mut grad_x = RealTensor::zeros(&[n, f]);
    let mut grad_w = RealTensor::zeros(&[o, f]);
    let mut grad_b = vec![0.0; o];
    {
        let gx = grad_x.data_mut();
        for ni in 0..n {
            for oi in 0..o {
                let gval = gd[ni * o + oi];
                grad_b[oi] += gval;
                for fi in 0..f {
                    gx[ni * f + fi] += gval * wd[oi * f + fi];
                }
            }
        }
    }
    {
        let gw = grad_w.data_mut();
        for ni in 0..n {
            for oi in 0..o {
                let gval = gd[ni * o + oi];
                for fi in 0..f {
                    gw[oi * f + fi] += gval * xd[ni * f + fi];
                }
            }
        }
    }
    Ok((grad_x, grad_w, grad_b))
}

/// Average each channel plane down to one value: [N, C, H, W] -> [N, C].
pub fn global_avg_pool(x: &RealTensor) -> Result<RealTensor> {
    let (n, c, h, w) = x.dims4()?;
    let plane = h * w;
    let mut out = RealTensor::zeros(&[n, c]);
    let od = out.data_mut();
    let xd = x.data();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut acc = 0.0;
            for i in 0..plane {
                acc += xd[base + i];
            }
            od[ni * c + ci] = acc / plane as f64;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward(grad_out: &RealTensor, h: usize, w: usize) -> Result<RealTensor> {
    let (n, c) = grad_out.dims2()?;
    let plane = h * w;
    let mut grad_x = RealTensor::zeros(&[n, c, h, w]);
    let gx = grad_x.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let gval = grad_out.data()[ni * c + ci] / plane as f64;
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                gx[base + i] = gval;
            }
        }
    }
    Ok(grad_x)
}

pub struct MaxPoolCache {
    /// Flat input index of the selected element per output entry; ties go to
    /// the first element in scan order so the backward route is unique.
    argmax: Vec<usize>,
    in_shape: Vec<usize>,
}

/// 3x3 stride-2 max pool with padding 1, the standard stem pool. Padded
/// positions never win: every window overlaps the image.
pub fn maxpool2d_3x3s2(x: &RealTensor) -> Result<(RealTensor, MaxPoolCache)> {
    let (n, c, h, w) = x.dims4()?;
    let ho = (h + 2 - 3) / 2 + 1;
    let wo = (w + 2 - 3) / 2 + 1;
    let xd = x.data();
    let mut out = RealTensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let od = out.data_mut();
    for ni in 0..n {
        for ci in 0..c {
            let in_base = (ni * c + ci) * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for kh in 0..3usize {
                        let ih = (oh * 2 + kh) as i64 - 1;
                        if ih < 0 || ih >= h as i64 {
                            continue;
                        }
                        for kw in 0..3usize {
                            let iw = (ow * 2 + kw) as i64 - 1;
                            if iw < 0 || iw >= w as i64 {
                                continue;
                            }
                            let idx = in_base + ih as usize * w + iw as usize;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o_idx = ((ni * c + ci) * ho + oh) * wo + ow;
                    od[o_idx] = best;
                    argmax[o_idx] = best_idx;
                }
            }
        }
    }
    Ok((out, MaxPoolCache { argmax, in_shape: vec![n, c, h, w] }))
}

pub fn maxpool2d_backward(grad_out: &RealTensor, cache: &MaxPoolCache) -> Result<RealTensor> {
    if grad_out.numel() != cache.argmax.len() {
        return Err(Error::ShapeMismatch {
            context: "maxpool2d_backward",
            axis: "grad_out numel",
            expected: cache.argmax.len(),
            got: grad_out.numel(),
        });
    }
    let mut grad_x = RealTensor::zeros(&cache.in_shape);
    let gx = grad_x.data_mut();
    for (o_idx, &i_idx) in cache.argmax.iter().enumerate() {
        gx[i_idx] += grad_out.data()[o_idx];
    }
    Ok(grad_x)
}

/// Mean softmax cross-entropy over the batch. Returns the loss and the
/// gradient with respect to the logits, (softmax - onehot) / N. The softmax
/// is computed against the row maximum, so arbitrarily large logits stay
/// finite; a non-finite loss can only come from non-finite logits.
pub fn softmax_cross_entropy(logits: &RealTensor, labels: &[usize]) -> Result<(f64, RealTensor)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "softmax_cross_entropy",
            axis: "labels",
            expected: n,
            got: labels.len(),
        });
    }
    let ld = logits.data();
    let mut grad = RealTensor::zeros(&[n, k]);
    let gd = grad.data_mut();
    let mut loss = 0.0;
    for ni in 0..n {
        let row = &ld[ni * k..(ni + 1) * k];
        let y = labels[ni];
        if y >= k {
            return Err(Error::ShapeMismatch {
                context: "softmax_cross_entropy",
                axis: "label value",
                expected: k - 1,
                got: y,
            });
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        loss += denom.ln() - (row[y] - max);
        for ki in 0..k {
            let p = (row[ki] - max).exp() / denom;
            gd[ni * k + ki] = (p - if ki == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((loss / n as f64, grad))
}

/// How many rows place their label inside the top-k logits. A row counts as
/// a hit when fewer than k classes rank strictly above the label, with ties
/// broken toward lower class indices.
pub fn topk_hits(logits: &RealTensor, labels: &[usize], k: usize) -> Result<usize> {
    let (n, classes) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            context: "topk_hits",
            axis: "labels",
            expected: n,
            got: labels.len(),
        });
    }
    let ld = logits.data();
    let mut hits = 0;
    for ni in 0..n {
        let row = &ld[ni * classes..(ni + 1) * classes];
        let y = labels[ni];
        let target = row[y];
        let mut rank = 0usize;
        for (ci, &v) in row.iter().enumerate() {
            if v > target || (v == target && ci < y) {
                rank += 1;
            }
        }
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits)
}
