//! Elementwise training math: the sign binarizer and its surrogates, the
//! magnitude-aware weight binarizer, and momentum SGD.
//!
//! Kink policy: every piecewise function here uses half-open intervals
//! closed on the left, so at a breakpoint the right-hand branch applies.
//! sign(0) is +1 for the same reason.

use crate::tensor::{snap_f32, RealTensor};
use serde::{Deserialize, Serialize};

/// Backward rule substituted for the sign function's (almost-everywhere
/// zero) derivative when gradients cross a binarized activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SurrogateKind {
    /// Pass-through gate: derivative 1 on |x| < 1, else 0.
    ClipSte,
    /// Derivative of the piecewise-polynomial relaxation: 2 + 2x on [-1, 0),
    /// 2 - 2x on [0, 1), else 0.
    PiecewisePoly,
}

#[inline]
pub fn sign_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

pub fn sign_forward(x: &RealTensor) -> RealTensor {
    x.map(sign_scalar)
}

/// Piecewise-polynomial relaxation of sign: -1 below -1, 2x + x^2 on
/// [-1, 0), 2x - x^2 on [0, 1), +1 from 1 up. Continuously differentiable:
/// the derivative meets at 0 (value 2) and vanishes at both ends.
#[inline]
pub fn poly_scalar(x: f64) -> f64 {
    if x < -1.0 {
        -1.0
    } else if x < 0.0 {
        2.0 * x + x * x
    } else if x < 1.0 {
        2.0 * x - x * x
    } else {
        1.0
    }
}

#[inline]
pub fn poly_deriv_scalar(x: f64) -> f64 {
    if x < -1.0 {
        0.0
    } else if x < 0.0 {
        2.0 + 2.0 * x
    } else if x < 1.0 {
        2.0 - 2.0 * x
    } else {
        0.0
    }
}

pub fn poly_forward(x: &RealTensor) -> RealTensor {
    x.map(poly_scalar)
}

pub fn poly_backward(x: &RealTensor, grad_out: &RealTensor) -> RealTensor {
    debug_assert_eq!(x.shape(), grad_out.shape());
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xi, &gi)| gi * poly_deriv_scalar(xi))
        .collect();
    RealTensor::new(x.shape().to_vec(), data).unwrap()
}

/// Straight-through gate at the pre-binarization activation: grad * 1 on
/// |x| < 1, else 0.
pub fn clip_ste_backward(x: &RealTensor, grad_out: &RealTensor) -> RealTensor {
    debug_assert_eq!(x.shape(), grad_out.shape());
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xi, &gi)| if xi.abs() < 1.0 { gi } else { 0.0 })
        .collect();
    RealTensor::new(x.shape().to_vec(), data).unwrap()
}

pub fn surrogate_backward(kind: SurrogateKind, x: &RealTensor, grad_out: &RealTensor) -> RealTensor {
    match kind {
        SurrogateKind::ClipSte => clip_ste_backward(x, grad_out),
        SurrogateKind::PiecewisePoly => poly_backward(x, grad_out),
    }
}

/// Hard clip to [-1, 1], the activation used when pre-training a real-valued
/// twin whose activation range matches the binary network's.
pub fn clip_forward(x: &RealTensor) -> RealTensor {
    x.map(|v| v.clamp(-1.0, 1.0))
}

pub fn clip_backward(x: &RealTensor, grad_out: &RealTensor) -> RealTensor {
    clip_ste_backward(x, grad_out)
}

pub fn relu_forward(x: &RealTensor) -> RealTensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_backward(x: &RealTensor, grad_out: &RealTensor) -> RealTensor {
    debug_assert_eq!(x.shape(), grad_out.shape());
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xi, &gi)| if xi > 0.0 { gi } else { 0.0 })
        .collect();
    RealTensor::new(x.shape().to_vec(), data).unwrap()
}

fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels * 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Area between a surrogate's forward relaxation and the sign step, i.e.
/// the integral of |relax(x) - sign(x)|. Computed by quadrature split at the
/// breakpoints, where the integrand is piecewise quadratic. The clip gate,
/// whose forward relaxation is the identity clipped to [-1, 1], yields 1;
/// the polynomial relaxation hugs the step closer and yields 2/3.
pub fn approximation_area(kind: SurrogateKind) -> f64 {
    let relax: fn(f64) -> f64 = match kind {
        SurrogateKind::ClipSte => |x: f64| x.clamp(-1.0, 1.0),
        SurrogateKind::PiecewisePoly => poly_scalar,
    };
    let integrand = move |x: f64| (relax(x) - sign_scalar(x)).abs();
    [(-2.0, -1.0), (-1.0, 0.0), (0.0, 1.0), (1.0, 2.0)]
        .iter()
        .map(|&(a, b)| simpson(integrand, a, b, 32))
        .sum()
}

/// Scope over which the weight binarizer's magnitude scale is averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleScope {
    /// One scale per output channel's kernel (the default).
    PerKernel,
    /// A single scale for the whole layer.
    PerLayer,
}

/// Mean |w| per scope group. Weights are [O, I, Kh, Kw]; per-kernel groups
/// are the O contiguous slices of length I*Kh*Kw.
pub fn magnitude_scales(w: &RealTensor, scope: ScaleScope) -> Vec<f64> {
    let total = w.numel();
    match scope {
        ScaleScope::PerLayer => {
            let s = w.data().iter().map(|v| v.abs()).sum::<f64>() / total as f64;
            vec![s]
        }
        ScaleScope::PerKernel => {
            let o = w.shape()[0];
            let k = total / o;
            (0..o)
                .map(|oi| w.data()[oi * k..(oi + 1) * k].iter().map(|v| v.abs()).sum::<f64>() / k as f64)
                .collect()
        }
    }
}

/// Binarize weights to sign(w) scaled by the mean magnitude of their group:
/// the binary kernel keeps the L1 mass of the real kernel.
pub fn magnitude_aware_binarize_with(w: &RealTensor, scope: ScaleScope) -> RealTensor {
    let scales = magnitude_scales(w, scope);
    let o = w.shape()[0];
    let k = w.numel() / o;
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = match scope {
                ScaleScope::PerLayer => scales[0],
                ScaleScope::PerKernel => scales[i / k],
            };
            s * sign_scalar(v)
        })
        .collect();
    RealTensor::new(w.shape().to_vec(), data).unwrap()
}

pub fn magnitude_aware_binarize(w: &RealTensor) -> RealTensor {
    magnitude_aware_binarize_with(w, ScaleScope::PerKernel)
}

/// Gradient route for binarized weights: pass where the real weight is still
/// inside the unit interval, block once it has saturated.
pub fn magnitude_aware_backward(w: &RealTensor, grad_out: &RealTensor) -> RealTensor {
    debug_assert_eq!(w.shape(), grad_out.shape());
    let data = w
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&wi, &gi)| if wi.abs() < 1.0 { gi } else { 0.0 })
        .collect();
    RealTensor::new(w.shape().to_vec(), data).unwrap()
}

/// Differentiable stand-in for the scaled weight binarizer: s * P(w) with
/// s the group's mean |w| and P the polynomial relaxation. Gradient checking
/// differentiates this forward, so its backward must carry the exact chain
/// rule including the scale's own dependence on every weight in the group.
pub fn scaled_poly_binarize(w: &RealTensor, scope: ScaleScope) -> RealTensor {
    let scales = magnitude_scales(w, scope);
    let o = w.shape()[0];
    let k = w.numel() / o;
    let data = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = match scope {
                ScaleScope::PerLayer => scales[0],
                ScaleScope::PerKernel => scales[i / k],
            };
            s * poly_scalar(v)
        })
        .collect();
    RealTensor::new(w.shape().to_vec(), data).unwrap()
}

/// d/dw_j [ s * P(w) ] applied to grad_out:
///   g_j * s * P'(w_j)  +  sign(w_j)/K * sum_i g_i * P(w_i)
/// with the sum over the scale group (s = (1/K) sum |w_i| makes
/// ds/dw_j = sign(w_j)/K almost everywhere).
pub fn scaled_poly_binarize_backward(
    w: &RealTensor,
    grad_out: &RealTensor,
    scope: ScaleScope,
) -> RealTensor {
    debug_assert_eq!(w.shape(), grad_out.shape());
    let scales = magnitude_scales(w, scope);
    let o = w.shape()[0];
    let k = w.numel() / o;
    let groups: Vec<(usize, usize)> = match scope {
        ScaleScope::PerLayer => vec![(0, w.numel())],
        ScaleScope::PerKernel => (0..o).map(|oi| (oi * k, (oi + 1) * k)).collect(),
    };
    let mut out = vec![0.0; w.numel()];
    for (gi, &(lo, hi)) in groups.iter().enumerate() {
        let s = scales[if scales.len() == 1 { 0 } else { gi }];
        let group_len = (hi - lo) as f64;
        let dot: f64 = (lo..hi)
            .map(|i| grad_out.data()[i] * poly_scalar(w.data()[i]))
            .sum();
        for i in lo..hi {
            let wi = w.data()[i];
            out[i] = grad_out.data()[i] * s * poly_deriv_scalar(wi)
                + sign_scalar(wi) / group_len * dot;
        }
    }
    RealTensor::new(w.shape().to_vec(), out).unwrap()
}

/// Momentum SGD over flat parameter slices. Velocity buffers live here,
/// keyed by a slot index the caller assigns in a fixed walk order. Updated
/// parameters are snapped to stored (f32) precision so a saved model
/// reproduces the in-memory values bit for bit.
pub struct SgdState {
    pub momentum: f64,
    slots: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(momentum: f64) -> Self {
        Self { momentum, slots: Vec::new() }
    }

    /// v <- momentum * v + g;  p <- snap(p - lr * v). No weight decay: decay
    /// would drag real-valued master weights toward zero, which for weights
    /// that only ever act through their sign means erasing them.
    pub fn step(&mut self, slot: usize, lr: f64, p: &mut [f64], g: &[f64]) {
        assert_eq!(p.len(), g.len(), "sgd slot {slot}: param/grad length mismatch");
        while self.slots.len() <= slot {
            self.slots.push(Vec::new());
        }
        let v = &mut self.slots[slot];
        if v.is_empty() {
            v.resize(p.len(), 0.0);
        }
        assert_eq!(v.len(), p.len(), "sgd slot {slot} reused with a different length");
        for i in 0..p.len() {
            v[i] = self.momentum * v[i] + g[i];
            p[i] = snap_f32(p[i] - lr * v[i]);
        }
    }
}
