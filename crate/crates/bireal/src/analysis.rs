//! Cost accounting: storage bits and multiplication counts for a spec,
//! always reported against a full-precision twin of the same topology.
//!
//! Counting conventions, chosen once and applied everywhere:
//! - Memory counts parameters: real-valued parameters (stem and projection
//!   convs, batch-norm affine pairs, classifier weights and biases) at 32
//!   bits each, binarized conv weights at 1 bit each. Running statistics
//!   are derived buffers, not parameters, and are not counted.
//! - Compute counts multiplications only. A convolution contributes
//!   output_elements * fan_in, the classifier contributes classes *
//!   features; batch norm, pooling, shortcut adds, and biases are
//!   element-wise work dominated by the convs and excluded.
//! - 64 binary multiplications ride in one machine word, so a binarized
//!   conv's multiplications count at 1/64 weight in the FLOPs total.
//! - Everything stays in exact integer arithmetic until the final ratios.

use crate::error::Result;
use crate::model::{NetworkSpec, Variant};
use serde::Serialize;

#[derive(Clone, Debug, Serialize)]
pub struct CostRow {
    pub name: String,
    pub real_params: u64,
    pub binary_params: u64,
    pub real_mults: u64,
    pub binary_mults: u64,
}

impl CostRow {
    pub fn memory_bits(&self) -> u64 {
        32 * self.real_params + self.binary_params
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CostReport {
    pub network: String,
    pub variant: Variant,
    pub input_height: usize,
    pub input_width: usize,
    pub rows: Vec<CostRow>,
    pub total_real_params: u64,
    pub total_binary_params: u64,
    /// 32 bits per real parameter plus 1 bit per binarized weight.
    pub memory_bits: u64,
    /// Every parameter at 32 bits: the full-precision twin.
    pub twin_memory_bits: u64,
    pub memory_saving_ratio: f64,
    pub total_real_mults: u64,
    pub total_binary_mults: u64,
    /// real_mults + binary_mults / 64.
    pub flops: f64,
    /// All multiplications at full cost: the twin again.
    pub twin_flops: u64,
    pub speedup_ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Comparison {
    /// baseline memory over subject memory: >1 means the subject is smaller.
    pub memory_ratio: f64,
    /// baseline FLOPs over subject FLOPs: >1 means the subject is cheaper.
    pub flops_ratio: f64,
}

fn conv_row(
    name: String,
    in_channels: usize,
    out_channels: usize,
    kernel_h: usize,
    kernel_w: usize,
    out_h: usize,
    out_w: usize,
    binarized: bool,
) -> CostRow {
    let params = (out_channels * in_channels * kernel_h * kernel_w) as u64;
    let mults = (out_h * out_w * out_channels) as u64 * (in_channels * kernel_h * kernel_w) as u64;
    if binarized {
        CostRow { name, real_params: 0, binary_params: params, real_mults: 0, binary_mults: mults }
    } else {
        CostRow { name, real_params: params, binary_params: 0, real_mults: mults, binary_mults: 0 }
    }
}

fn bn_row(name: String, channels: usize) -> CostRow {
    CostRow {
        name,
        real_params: 2 * channels as u64,
        binary_params: 0,
        real_mults: 0,
        binary_mults: 0,
    }
}

/// Per-layer and total costs for one forward pass of a single input at the
/// given spatial size (the spec's own size when `input_hw` is None).
pub fn cost_report(spec: &NetworkSpec, input_hw: Option<(usize, usize)>) -> Result<CostReport> {
    let spec = match input_hw {
        Some((h, w)) => spec.with_input_hw(h, w),
        None => spec.clone(),
    };
    spec.validate()?;

    let mut rows = Vec::new();
    let sg = spec.stem_geometry();
    let (sh, sw) = sg.out_hw(spec.input_height, spec.input_width)?;
    rows.push(conv_row(
        "stem.conv".into(),
        sg.in_channels,
        sg.out_channels,
        sg.kernel_h,
        sg.kernel_w,
        sh,
        sw,
        false,
    ));
    rows.push(bn_row("stem.bn".into(), sg.out_channels));

    let (mut h, mut w) = spec.trunk_in_hw()?;
    for (i, b) in spec.blocks().iter().enumerate() {
        let (bh, bw) = (h, w);
        for ci in 0..b.convs {
            let g = b.conv_geometry(ci);
            let (oh, ow) = g.out_hw(h, w)?;
            let tag = if b.convs == 2 { format!(".{}", ci + 1) } else { String::new() };
            rows.push(conv_row(
                format!("block{i}.conv{tag}"),
                g.in_channels,
                g.out_channels,
                g.kernel_h,
                g.kernel_w,
                oh,
                ow,
                true,
            ));
            rows.push(bn_row(format!("block{i}.bn{tag}"), g.out_channels));
            h = oh;
            w = ow;
        }
        if b.downsample {
            let g = b.downsample_geometry();
            let (oh, ow) = g.out_hw(bh, bw)?;
            rows.push(conv_row(
                format!("block{i}.shortcut_conv"),
                g.in_channels,
                g.out_channels,
                1,
                1,
                oh,
                ow,
                false,
            ));
            rows.push(bn_row(format!("block{i}.shortcut_bn"), g.out_channels));
        }
    }

    let (_, (feat_c, _, _)) = spec.feature_dims()?;
    rows.push(CostRow {
        name: "classifier".into(),
        real_params: (spec.num_classes * feat_c + spec.num_classes) as u64,
        binary_params: 0,
        real_mults: (spec.num_classes * feat_c) as u64,
        binary_mults: 0,
    });

    let total_real_params: u64 = rows.iter().map(|r| r.real_params).sum();
    let total_binary_params: u64 = rows.iter().map(|r| r.binary_params).sum();
    let total_real_mults: u64 = rows.iter().map(|r| r.real_mults).sum();
    let total_binary_mults: u64 = rows.iter().map(|r| r.binary_mults).sum();
    let memory_bits = 32 * total_real_params + total_binary_params;
    let twin_memory_bits = 32 * (total_real_params + total_binary_params);
    let flops = total_real_mults as f64 + total_binary_mults as f64 / 64.0;
    let twin_flops = total_real_mults + total_binary_mults;

    Ok(CostReport {
        network: spec.name.clone(),
        variant: spec.variant,
        input_height: spec.input_height,
        input_width: spec.input_width,
        rows,
        total_real_params,
        total_binary_params,
        memory_bits,
        twin_memory_bits,
        memory_saving_ratio: twin_memory_bits as f64 / memory_bits as f64,
        total_real_mults,
        total_binary_mults,
        flops,
        twin_flops,
        speedup_ratio: twin_flops as f64 / flops,
    })
}

/// Ratios of a baseline's costs to a subject's: how many times smaller and
/// cheaper the subject is. Comparing a report against itself gives 1.0.
pub fn compare(subject: &CostReport, baseline: &CostReport) -> Comparison {
    Comparison {
        memory_ratio: baseline.memory_bits as f64 / subject.memory_bits as f64,
        flops_ratio: baseline.flops / subject.flops,
    }
}
