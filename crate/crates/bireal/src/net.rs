//! Forward and backward passes over the fixed block topology of a spec.
//!
//! There is no general autodiff here: the forward pass records exactly the
//! intermediates the reverse walk needs (pre-activation inputs, transformed
//! weights, normalization caches), and the backward pass visits blocks in
//! reverse, summing the shortcut and conv-path gradients where the forward
//! fanned out. Gradients come back in a parameter-shaped container.
//!
//! One mode switch selects what flows through the trunk: packed ±1 tensors
//! (inference), sign activations with surrogate backward (binary training),
//! the everywhere-differentiable polynomial relaxation (gradient checking),
//! or plain real activations (pre-training a real twin).

use crate::bn::{
    apply_running_update, batchnorm_backward, batchnorm_forward, BatchNormParams, BnCache,
};
use crate::conv::{binconv2d, float_conv2d, float_conv2d_backward};
use crate::error::{Error, Result};
use crate::layers::{
    global_avg_pool, global_avg_pool_backward, linear_backward, linear_forward, maxpool2d_3x3s2,
    maxpool2d_backward, MaxPoolCache,
};
use crate::model::{BlockParams, ConvParams, NetParams, NetworkSpec, Variant};
use crate::ops::{
    clip_backward, clip_forward, magnitude_aware_backward, magnitude_aware_binarize_with,
    poly_backward, poly_forward, relu_backward, relu_forward, scaled_poly_binarize,
    scaled_poly_binarize_backward, sign_forward, surrogate_backward, ScaleScope, SgdState,
    SurrogateKind,
};
use crate::tensor::{sign_pack, RealTensor};
use serde::{Deserialize, Serialize};

/// How binarized weights receive their updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightUpdate {
    /// Plain sign binarization forward, gated pass-through backward.
    OriginalSte,
    /// Sign scaled by the kernel's mean magnitude forward, same gate
    /// backward: updates become proportional to how far each real weight
    /// sits from the decision boundary rather than to a fixed step.
    MagnitudeAware,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinarySettings {
    pub weight_update: WeightUpdate,
    pub act_backward: SurrogateKind,
    pub scale_scope: ScaleScope,
}

impl Default for BinarySettings {
    fn default() -> Self {
        Self {
            weight_update: WeightUpdate::MagnitudeAware,
            act_backward: SurrogateKind::PiecewisePoly,
            scale_scope: ScaleScope::PerKernel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    /// Packed XNOR-popcount trunk; no gradients.
    BinaryInfer,
    /// Sign activations and binarized weights forward, surrogate gradients
    /// backward against the real master weights.
    BinaryTrain(BinarySettings),
    /// Polynomial relaxation everywhere (activations and the weight
    /// binarizer), so the whole network is differentiable and analytic
    /// gradients can be checked against finite differences.
    Surrogate(ScaleScope),
    /// Real twin with activations clipped to [-1, 1].
    PretrainClip,
    /// Real twin with ReLU activations.
    PretrainRelu,
}

impl Mode {
    fn is_pretrain(self) -> bool {
        matches!(self, Mode::PretrainClip | Mode::PretrainRelu)
    }

    /// Padding value for trunk convolutions: the binary trunk pads with -1
    /// (a sign output can never be 0), real twins pad with 0.
    fn trunk_pad(self) -> f64 {
        if self.is_pretrain() {
            0.0
        } else {
            -1.0
        }
    }
}

fn act_forward(mode: Mode, x: &RealTensor) -> RealTensor {
    match mode {
        Mode::BinaryTrain(_) => sign_forward(x),
        Mode::Surrogate(_) => poly_forward(x),
        Mode::PretrainClip => clip_forward(x),
        Mode::PretrainRelu => relu_forward(x),
        Mode::BinaryInfer => unreachable!("inference path does not use the training forward"),
    }
}

fn act_backward(mode: Mode, pre: &RealTensor, grad: &RealTensor) -> RealTensor {
    match mode {
        Mode::BinaryTrain(s) => surrogate_backward(s.act_backward, pre, grad),
        Mode::Surrogate(_) => poly_backward(pre, grad),
        Mode::PretrainClip => clip_backward(pre, grad),
        Mode::PretrainRelu => relu_backward(pre, grad),
        Mode::BinaryInfer => unreachable!(),
    }
}

fn weight_eff(mode: Mode, conv: &ConvParams) -> RealTensor {
    debug_assert!(conv.binarized);
    match mode {
        Mode::BinaryTrain(s) => match s.weight_update {
            WeightUpdate::OriginalSte => sign_forward(&conv.weight),
            WeightUpdate::MagnitudeAware => magnitude_aware_binarize_with(&conv.weight, s.scale_scope),
        },
        Mode::Surrogate(scope) => scaled_poly_binarize(&conv.weight, scope),
        Mode::PretrainClip | Mode::PretrainRelu => conv.weight.clone(),
        Mode::BinaryInfer => unreachable!(),
    }
}

fn weight_backward(mode: Mode, conv: &ConvParams, grad_eff: &RealTensor) -> RealTensor {
    match mode {
        Mode::BinaryTrain(_) => magnitude_aware_backward(&conv.weight, grad_eff),
        Mode::Surrogate(scope) => scaled_poly_binarize_backward(&conv.weight, grad_eff, scope),
        Mode::PretrainClip | Mode::PretrainRelu => grad_eff.clone(),
        Mode::BinaryInfer => unreachable!(),
    }
}

fn add_into(acc: &mut RealTensor, rhs: &RealTensor) {
    debug_assert_eq!(acc.shape(), rhs.shape());
    for (a, b) in acc.data_mut().iter_mut().zip(rhs.data()) {
        *a += b;
    }
}

struct UnitTape {
    pre_act: RealTensor,
    act_out: RealTensor,
    w_eff: RealTensor,
    bn: BnCache,
}

struct BlockTape {
    units: Vec<UnitTape>,
    ds_bn: Option<BnCache>,
    has_shortcut: bool,
}

pub struct Tape {
    mode: Mode,
    x: RealTensor,
    stem_bn: BnCache,
    /// Stem output before the twin's activation; None in binary modes,
    /// which feed the stem's BN output straight to the first sign layer.
    stem_act_pre: Option<RealTensor>,
    mp: Option<MaxPoolCache>,
    blocks: Vec<BlockTape>,
    feat_hw: (usize, usize),
    fc_in: RealTensor,
}

/// Gradients shaped like the parameters they belong to.
pub struct BlockGrads {
    pub conv1_w: RealTensor,
    pub bn1_gamma: Vec<f64>,
    pub bn1_beta: Vec<f64>,
    pub conv2_w: Option<RealTensor>,
    pub bn2_gamma: Option<Vec<f64>>,
    pub bn2_beta: Option<Vec<f64>>,
    pub ds_w: Option<RealTensor>,
    pub ds_gamma: Option<Vec<f64>>,
    pub ds_beta: Option<Vec<f64>>,
}

pub struct Grads {
    pub stem_w: RealTensor,
    pub stem_gamma: Vec<f64>,
    pub stem_beta: Vec<f64>,
    pub blocks: Vec<BlockGrads>,
    pub fc_w: RealTensor,
    pub fc_b: Vec<f64>,
}

fn unit_forward(
    cur: &RealTensor,
    conv: &ConvParams,
    bn: &BatchNormParams,
    mode: Mode,
    bn_train: bool,
) -> Result<(RealTensor, UnitTape)> {
    let act_out = act_forward(mode, cur);
    let w_eff = weight_eff(mode, conv);
    let m = float_conv2d(&act_out, &w_eff, &conv.geom, mode.trunk_pad())?;
    let (out, bn_cache) = batchnorm_forward(&m, bn, bn_train)?;
    Ok((out, UnitTape { pre_act: cur.clone(), act_out, w_eff, bn: bn_cache }))
}

fn unit_backward(
    grad_out: &RealTensor,
    unit: &UnitTape,
    conv: &ConvParams,
    bn: &BatchNormParams,
    mode: Mode,
) -> Result<(RealTensor, RealTensor, Vec<f64>, Vec<f64>)> {
    let (g_m, g_gamma, g_beta) = batchnorm_backward(grad_out, &unit.bn, bn)?;
    let (g_act, g_weff) =
        float_conv2d_backward(&g_m, &unit.act_out, &unit.w_eff, &conv.geom, mode.trunk_pad())?;
    let g_w = weight_backward(mode, conv, &g_weff);
    let g_cur = act_backward(mode, &unit.pre_act, &g_act);
    Ok((g_cur, g_w, g_gamma, g_beta))
}

fn block_forward(
    cur: &RealTensor,
    bp: &BlockParams,
    has_shortcut: bool,
    mode: Mode,
    bn_train: bool,
) -> Result<(RealTensor, BlockTape)> {
    let (b1, u1) = unit_forward(cur, &bp.conv1, &bp.bn1, mode, bn_train)?;
    let (mut out, units) = match (&bp.conv2, &bp.bn2) {
        (Some(c2), Some(bn2)) => {
            let (b2, u2) = unit_forward(&b1, c2, bn2, mode, bn_train)?;
            (b2, vec![u1, u2])
        }
        _ => (b1, vec![u1]),
    };
    let mut ds_bn = None;
    if has_shortcut {
        match &bp.downsample {
            Some((dc, dbn)) => {
                let sm = float_conv2d(cur, &dc.weight, &dc.geom, 0.0)?;
                let (sc, cache) = batchnorm_forward(&sm, dbn, bn_train)?;
                add_into(&mut out, &sc);
                ds_bn = Some(cache);
            }
            None => add_into(&mut out, cur),
        }
    }
    Ok((out, BlockTape { units, ds_bn, has_shortcut }))
}

fn block_backward(
    grad_out: &RealTensor,
    bp: &BlockParams,
    tape: &BlockTape,
    mode: Mode,
) -> Result<(RealTensor, BlockGrads)> {
    let block_input = &tape.units[0].pre_act;

    // Main path, last unit first.
    let mut g = grad_out.clone();
    let mut per_unit = Vec::with_capacity(tape.units.len());
    for (idx, unit) in tape.units.iter().enumerate().rev() {
        let (conv, bn) = if idx == 0 {
            (&bp.conv1, &bp.bn1)
        } else {
            (bp.conv2.as_ref().unwrap(), bp.bn2.as_ref().unwrap())
        };
        let (g_cur, g_w, g_gamma, g_beta) = unit_backward(&g, unit, conv, bn, mode)?;
        g = g_cur;
        per_unit.push((g_w, g_gamma, g_beta));
    }
    per_unit.reverse();
    let mut g_input = g;

    // Shortcut path joins the same upstream gradient.
    let mut ds_w = None;
    let mut ds_gamma = None;
    let mut ds_beta = None;
    if tape.has_shortcut {
        match (&bp.downsample, &tape.ds_bn) {
            (Some((dc, dbn)), Some(cache)) => {
                let (g_sm, gg, gb) = batchnorm_backward(grad_out, cache, dbn)?;
                let (g_sc, g_dw) =
                    float_conv2d_backward(&g_sm, block_input, &dc.weight, &dc.geom, 0.0)?;
                add_into(&mut g_input, &g_sc);
                ds_w = Some(g_dw);
                ds_gamma = Some(gg);
                ds_beta = Some(gb);
            }
            _ => add_into(&mut g_input, grad_out),
        }
    }

    let mut it = per_unit.into_iter();
    let (conv1_w, bn1_gamma, bn1_beta) = it.next().unwrap();
    let (conv2_w, bn2_gamma, bn2_beta) = match it.next() {
        Some((w, g, b)) => (Some(w), Some(g), Some(b)),
        None => (None, None, None),
    };
    Ok((
        g_input,
        BlockGrads {
            conv1_w,
            bn1_gamma,
            bn1_beta,
            conv2_w,
            bn2_gamma,
            bn2_beta,
            ds_w,
            ds_gamma,
            ds_beta,
        },
    ))
}

/// Differentiable forward pass. `bn_train` picks batch statistics (training)
/// or running statistics (evaluation); it is recorded on the tape together
/// with the mode, so the matching backward cannot be run with different
/// settings than the forward that produced it.
pub fn forward(
    params: &NetParams,
    spec: &NetworkSpec,
    x: &RealTensor,
    mode: Mode,
    bn_train: bool,
) -> Result<(RealTensor, Tape)> {
    if mode == Mode::BinaryInfer {
        return Err(Error::InvalidConfig(
            "the packed inference path has no tape; use forward_infer".into(),
        ));
    }
    params.validate_against(spec)?;
    let sm = float_conv2d(x, &params.stem.weight, &params.stem.geom, 0.0)?;
    let (sb, stem_bn) = batchnorm_forward(&sm, &params.stem_bn, bn_train)?;
    let (mut cur, stem_act_pre) = match mode {
        Mode::PretrainRelu => (relu_forward(&sb), Some(sb)),
        Mode::PretrainClip => (clip_forward(&sb), Some(sb)),
        _ => (sb, None),
    };
    let mut mp = None;
    if spec.stem.maxpool {
        let (pooled, cache) = maxpool2d_3x3s2(&cur)?;
        cur = pooled;
        mp = Some(cache);
    }
    let spec_blocks = spec.blocks();
    let mut blocks = Vec::with_capacity(spec_blocks.len());
    for (bp, bs) in params.blocks.iter().zip(&spec_blocks) {
        let (out, bt) = block_forward(&cur, bp, bs.variant != Variant::Plain, mode, bn_train)?;
        cur = out;
        blocks.push(bt);
    }
    let (_, _, fh, fw) = cur.dims4()?;
    let fc_in = global_avg_pool(&cur)?;
    let logits = linear_forward(&fc_in, &params.fc)?;
    Ok((
        logits,
        Tape { mode, x: x.clone(), stem_bn, stem_act_pre, mp, blocks, feat_hw: (fh, fw), fc_in },
    ))
}

pub fn backward(
    tape: &Tape,
    params: &NetParams,
    grad_logits: &RealTensor,
) -> Result<Grads> {
    let mode = tape.mode;
    let (g_feat, fc_w, fc_b) = linear_backward(grad_logits, &tape.fc_in, &params.fc)?;
    let mut g = global_avg_pool_backward(&g_feat, tape.feat_hw.0, tape.feat_hw.1)?;

    let mut blocks_rev = Vec::with_capacity(params.blocks.len());
    for (bp, bt) in params.blocks.iter().zip(&tape.blocks).rev() {
        let (g_cur, bg) = block_backward(&g, bp, bt, mode)?;
        g = g_cur;
        blocks_rev.push(bg);
    }
    blocks_rev.reverse();

    if let Some(cache) = &tape.mp {
        g = maxpool2d_backward(&g, cache)?;
    }
    if let Some(pre) = &tape.stem_act_pre {
        g = match mode {
            Mode::PretrainRelu => relu_backward(pre, &g),
            Mode::PretrainClip => clip_backward(pre, &g),
            _ => unreachable!("stem activation only exists in pretrain modes"),
        };
    }
    let (g_sm, stem_gamma, stem_beta) = batchnorm_backward(&g, &tape.stem_bn, &params.stem_bn)?;
    let (_, stem_w) =
        float_conv2d_backward(&g_sm, &tape.x, &params.stem.weight, &params.stem.geom, 0.0)?;
    Ok(Grads { stem_w, stem_gamma, stem_beta, blocks: blocks_rev, fc_w, fc_b })
}

/// Fold every train-mode batch statistic recorded on the tape into the
/// running estimates. Call once per optimizer step.
pub fn apply_bn_updates(params: &mut NetParams, tape: &Tape) {
    apply_running_update(&mut params.stem_bn, &tape.stem_bn);
    for (bp, bt) in params.blocks.iter_mut().zip(&tape.blocks) {
        apply_running_update(&mut bp.bn1, &bt.units[0].bn);
        if let (Some(bn2), Some(unit2)) = (&mut bp.bn2, bt.units.get(1)) {
            apply_running_update(bn2, &unit2.bn);
        }
        if let (Some((_, dbn)), Some(cache)) = (&mut bp.downsample, &bt.ds_bn) {
            apply_running_update(dbn, cache);
        }
    }
}

/// Momentum-SGD update for every unfrozen parameter. Slot numbering is a
/// fixed function of the block index, so velocity buffers stay attached to
/// their parameter across steps even when some slots are absent or frozen.
pub fn apply_sgd(params: &mut NetParams, grads: &Grads, sgd: &mut SgdState, lr: f64) {
    if !params.stem.frozen {
        sgd.step(0, lr, params.stem.weight.data_mut(), grads.stem_w.data());
    }
    sgd.step(1, lr, &mut params.stem_bn.gamma, &grads.stem_gamma);
    sgd.step(2, lr, &mut params.stem_bn.beta, &grads.stem_beta);
    for (i, (bp, bg)) in params.blocks.iter_mut().zip(&grads.blocks).enumerate() {
        let base = 3 + i * 9;
        if !bp.conv1.frozen {
            sgd.step(base, lr, bp.conv1.weight.data_mut(), bg.conv1_w.data());
        }
        sgd.step(base + 1, lr, &mut bp.bn1.gamma, &bg.bn1_gamma);
        sgd.step(base + 2, lr, &mut bp.bn1.beta, &bg.bn1_beta);
        if let (Some(c2), Some(gw)) = (&mut bp.conv2, &bg.conv2_w) {
            if !c2.frozen {
                sgd.step(base + 3, lr, c2.weight.data_mut(), gw.data());
            }
        }
        if let (Some(bn2), Some(gg), Some(gb)) = (&mut bp.bn2, &bg.bn2_gamma, &bg.bn2_beta) {
            sgd.step(base + 4, lr, &mut bn2.gamma, gg);
            sgd.step(base + 5, lr, &mut bn2.beta, gb);
        }
        if let Some((dc, dbn)) = &mut bp.downsample {
            if let Some(gw) = &bg.ds_w {
                if !dc.frozen {
                    sgd.step(base + 6, lr, dc.weight.data_mut(), gw.data());
                }
            }
            if let (Some(gg), Some(gb)) = (&bg.ds_gamma, &bg.ds_beta) {
                sgd.step(base + 7, lr, &mut dbn.gamma, gg);
                sgd.step(base + 8, lr, &mut dbn.beta, gb);
            }
        }
    }
    let fc_base = 3 + params.blocks.len() * 9;
    if !params.fc.frozen {
        sgd.step(fc_base, lr, params.fc.weight.data_mut(), grads.fc_w.data());
        sgd.step(fc_base + 1, lr, &mut params.fc.bias, &grads.fc_b);
    }
}

/// Inference over the packed trunk: activations are sign-packed per block,
/// weights sign-packed per conv, and every trunk convolution runs as XNOR +
/// popcount. Batch norm uses running statistics. Meant for models whose
/// binarized weights have been collapsed to ±1; for other models it
/// evaluates the unscaled sign of the master weights.
pub fn forward_infer(params: &NetParams, spec: &NetworkSpec, x: &RealTensor) -> Result<RealTensor> {
    params.validate_against(spec)?;
    let sm = float_conv2d(x, &params.stem.weight, &params.stem.geom, 0.0)?;
    let (mut cur, _) = batchnorm_forward(&sm, &params.stem_bn, false)?;
    if spec.stem.maxpool {
        cur = maxpool2d_3x3s2(&cur)?.0;
    }
    let spec_blocks = spec.blocks();
    for (bp, bs) in params.blocks.iter().zip(&spec_blocks) {
        let mut main = cur.clone();
        let mut convs: Vec<(&ConvParams, &BatchNormParams)> = vec![(&bp.conv1, &bp.bn1)];
        if let (Some(c2), Some(bn2)) = (&bp.conv2, &bp.bn2) {
            convs.push((c2, bn2));
        }
        for (conv, bn) in convs {
            let a = sign_pack(&main);
            let wb = sign_pack(&conv.weight);
            let m = binconv2d(&a, &wb, &conv.geom)?;
            main = batchnorm_forward(&m, bn, false)?.0;
        }
        if bs.variant != Variant::Plain {
            match &bp.downsample {
                Some((dc, dbn)) => {
                    let sm = float_conv2d(&cur, &dc.weight, &dc.geom, 0.0)?;
                    let sc = batchnorm_forward(&sm, dbn, false)?.0;
                    add_into(&mut main, &sc);
                }
                None => add_into(&mut main, &cur),
            }
        }
        cur = main;
    }
    let feat = global_avg_pool(&cur)?;
    linear_forward(&feat, &params.fc)
}

/// Logits under any mode, with batch norm in evaluation mode.
pub fn forward_logits(
    params: &NetParams,
    spec: &NetworkSpec,
    x: &RealTensor,
    mode: Mode,
) -> Result<RealTensor> {
    match mode {
        Mode::BinaryInfer => forward_infer(params, spec, x),
        _ => Ok(forward(params, spec, x, mode, false)?.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::softmax_cross_entropy;
    use crate::model::{build, StageSpec, StemSpec};
    use crate::ops::sign_scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_spec(variant: Variant) -> NetworkSpec {
        NetworkSpec {
            name: "toy".into(),
            input_channels: 1,
            input_height: 6,
            input_width: 6,
            num_classes: 3,
            stem: StemSpec { out_channels: 4, kernel: 3, stride: 1, padding: 1, maxpool: false },
            variant,
            stages: vec![StageSpec { channels: 4, convs: 2, stride: 1 }],
            block_kernel: 3,
        }
    }

    fn random_input(rng: &mut ChaCha8Rng, spec: &NetworkSpec, n: usize) -> RealTensor {
        let shape = [n, spec.input_channels, spec.input_height, spec.input_width];
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        RealTensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn forward_shapes_all_modes_all_variants() {
        for variant in [Variant::BiReal, Variant::ResNetStyle, Variant::Plain] {
            let spec = toy_spec(variant);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let params = build(&spec, &mut rng).unwrap();
            let x = random_input(&mut rng, &spec, 2);
            for mode in [
                Mode::BinaryTrain(BinarySettings::default()),
                Mode::Surrogate(ScaleScope::PerKernel),
                Mode::PretrainClip,
                Mode::PretrainRelu,
            ] {
                let (logits, _) = forward(&params, &spec, &x, mode, true).unwrap();
                assert_eq!(logits.shape(), &[2, 3], "{variant:?} {mode:?}");
                assert!(logits.all_finite());
            }
            let logits = forward_infer(&params, &spec, &x).unwrap();
            assert_eq!(logits.shape(), &[2, 3]);
        }
    }

    #[test]
    fn zero_input_identical_fc_rows_give_equal_logits() {
        // Zero input -> constant feature maps per channel at every depth;
        // if the classifier rows are identical the classes cannot differ.
        let spec = toy_spec(Variant::BiReal);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = build(&spec, &mut rng).unwrap();
        let f = params.fc.in_features();
        let row: Vec<f64> = (0..f).map(|i| 0.1 * i as f64).collect();
        let mut w = Vec::new();
        for _ in 0..3 {
            w.extend_from_slice(&row);
        }
        params.fc.weight = RealTensor::new(vec![3, f], w).unwrap();
        params.fc.bias = vec![0.7; 3];
        let x = RealTensor::zeros(&[1, 1, 6, 6]);
        let logits = forward_logits(
            &params,
            &spec,
            &x,
            Mode::BinaryTrain(BinarySettings::default()),
        )
        .unwrap();
        assert!((logits.data()[0] - logits.data()[1]).abs() < 1e-12);
        assert!((logits.data()[1] - logits.data()[2]).abs() < 1e-12);
    }

    #[test]
    fn infer_path_equals_float_path_for_pm1_weights() {
        // Collapse binarized weights to ±1: the packed XNOR trunk and the
        // float trunk compute identical integer dot products, so the two
        // paths must agree bit for bit.
        for variant in [Variant::BiReal, Variant::ResNetStyle, Variant::Plain] {
            let spec = toy_spec(variant);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut params = build(&spec, &mut rng).unwrap();
            for b in &mut params.blocks {
                b.conv1.weight = b.conv1.weight.map(sign_scalar);
                if let Some(c2) = &mut b.conv2 {
                    c2.weight = c2.weight.map(sign_scalar);
                }
            }
            let x = random_input(&mut rng, &spec, 2);
            let float_logits = forward_logits(
                &params,
                &spec,
                &x,
                Mode::BinaryTrain(BinarySettings::default()),
            )
            .unwrap();
            let packed_logits = forward_infer(&params, &spec, &x).unwrap();
            assert_eq!(float_logits.data(), packed_logits.data(), "{variant:?}");
        }
    }

    #[test]
    fn surrogate_gradcheck_smoke() {
        // A handful of coordinates across every parameter family; the full
        // sweep lives in the acceptance suite.
        let spec = toy_spec(Variant::BiReal);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = build(&spec, &mut rng).unwrap();
        let x = random_input(&mut rng, &spec, 2);
        let labels = [0usize, 2];
        let mode = Mode::Surrogate(ScaleScope::PerKernel);

        let loss = |p: &NetParams| -> f64 {
            let (logits, _) = forward(p, &spec, &x, mode, true).unwrap();
            softmax_cross_entropy(&logits, &labels).unwrap().0
        };
        let (logits, tape) = forward(&params, &spec, &x, mode, true).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
        let grads = backward(&tape, &params, &dlogits).unwrap();

        let h = 1e-5;
        let check = |analytic: f64, mut bump: Box<dyn FnMut(&mut NetParams, f64)>, what: &str| {
            let mut pp = params.clone();
            bump(&mut pp, h);
            let mut pm = params.clone();
            bump(&mut pm, -h);
            let fd = (loss(&pp) - loss(&pm)) / (2.0 * h);
            let rel = (fd - analytic).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-3, "{what}: analytic {analytic}, fd {fd}, rel {rel}");
        };
        check(
            grads.stem_w.data()[7],
            Box::new(|p, d| p.stem.weight.data_mut()[7] += d),
            "stem_w[7]",
        );
        check(
            grads.blocks[0].conv1_w.data()[11],
            Box::new(|p, d| p.blocks[0].conv1.weight.data_mut()[11] += d),
            "block0.conv1_w[11]",
        );
        check(
            grads.blocks[1].bn1_gamma[2],
            Box::new(|p, d| p.blocks[1].bn1.gamma[2] += d),
            "block1.bn1_gamma[2]",
        );
        check(
            grads.blocks[1].bn1_beta[0],
            Box::new(|p, d| p.blocks[1].bn1.beta[0] += d),
            "block1.bn1_beta[0]",
        );
        check(grads.fc_w.data()[3], Box::new(|p, d| p.fc.weight.data_mut()[3] += d), "fc_w[3]");
        check(grads.fc_b[1], Box::new(|p, d| p.fc.bias[1] += d), "fc_b[1]");
        check(
            grads.stem_gamma[1],
            Box::new(|p, d| p.stem_bn.gamma[1] += d),
            "stem_gamma[1]",
        );
    }

    #[test]
    fn shortcut_carries_gradient_when_surrogate_gates_shut() {
        // Saturate the first sign layer's pre-activations far above 1: the
        // surrogate derivative is 0 there, so without a shortcut no gradient
        // reaches the stem, while the identity path keeps it open. A bias
        // shift of +10 on the stem's normalization pushes every entry of the
        // stem output to roughly N(10, 1), safely outside the surrogate's
        // support, under eval-mode statistics (train mode would normalize
        // the shift away).
        let spec = toy_spec(Variant::BiReal);
        let plain = toy_spec(Variant::Plain);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = build(&spec, &mut rng).unwrap();
        params.stem_bn.beta = vec![10.0; params.stem_bn.channels()];
        let x = random_input(&mut rng, &spec, 1);
        let labels = [1usize];
        let mode = Mode::BinaryTrain(BinarySettings::default());
        let stem_grad_norm = |spec: &NetworkSpec| -> f64 {
            let (logits, tape) = forward(&params, spec, &x, mode, false).unwrap();
            let (_, dlogits) = softmax_cross_entropy(&logits, &labels).unwrap();
            let grads = backward(&tape, &params, &dlogits).unwrap();
            grads.stem_w.data().iter().map(|g| g * g).sum::<f64>().sqrt()
        };
        let with_shortcut = stem_grad_norm(&spec);
        let without = stem_grad_norm(&plain);
        assert!(
            without < 1e-12,
            "plain variant should be fully blocked, got {without}"
        );
        assert!(
            with_shortcut > 1e-8,
            "shortcut should keep gradient flowing, got {with_shortcut}"
        );
    }

    #[test]
    fn apply_sgd_respects_freeze() {
        let spec = toy_spec(Variant::BiReal);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut params = build(&spec, &mut rng).unwrap();
        params.blocks[0].conv1.frozen = true;
        let before = params.blocks[0].conv1.weight.clone();
        let stem_before = params.stem.weight.clone();

        let x = random_input(&mut rng, &spec, 2);
        let mode = Mode::BinaryTrain(BinarySettings::default());
        let (logits, tape) = forward(&params, &spec, &x, mode, true).unwrap();
        let (_, dlogits) = softmax_cross_entropy(&logits, &[0, 1]).unwrap();
        let grads = backward(&tape, &params, &dlogits).unwrap();
        let mut sgd = SgdState::new(0.9);
        apply_sgd(&mut params, &grads, &mut sgd, 0.1);
        assert_eq!(params.blocks[0].conv1.weight, before);
        assert_ne!(params.stem.weight, stem_before);
    }

    #[test]
    fn bn_updates_only_from_train_tapes() {
        let spec = toy_spec(Variant::BiReal);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = build(&spec, &mut rng).unwrap();
        let x = random_input(&mut rng, &spec, 2);
        let mode = Mode::BinaryTrain(BinarySettings::default());

        let (_, tape) = forward(&params, &spec, &x, mode, false).unwrap();
        let rm = params.stem_bn.running_mean.clone();
        apply_bn_updates(&mut params, &tape);
        assert_eq!(params.stem_bn.running_mean, rm);

        let (_, tape) = forward(&params, &spec, &x, mode, true).unwrap();
        apply_bn_updates(&mut params, &tape);
        assert_ne!(params.stem_bn.running_mean, rm);
    }
}
