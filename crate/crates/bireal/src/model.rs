//! Network descriptions and parameter containers.
//!
//! A [`NetworkSpec`] is a compact, serializable recipe: a real-valued stem
//! convolution, stages of binarized 3x3 convolutions in one of three block
//! styles, and a real-valued classifier head. Stage lists count binarized
//! convolutions, not blocks, so the same spec instantiated under any block
//! variant owns exactly the same list of binary conv layers and the
//! variants differ only in where shortcuts attach.

use crate::bn::BatchNormParams;
use crate::conv::ConvGeometry;
use crate::error::{Error, Result};
use crate::layers::LinearParams;
use crate::tensor::{snap_f32, RealTensor};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Where shortcuts attach around the binarized convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// One convolution per block, an identity shortcut around each: the
    /// real-valued pre-sign activation is added back onto the conv+BN
    /// output, so full-precision information crosses every binary layer.
    BiReal,
    /// Two convolutions per block with one shortcut across the pair.
    ResNetStyle,
    /// No shortcuts at all.
    Plain,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::BiReal => "bireal",
            Variant::ResNetStyle => "resnet",
            Variant::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bireal" => Ok(Variant::BiReal),
            "resnet" => Ok(Variant::ResNetStyle),
            "plain" => Ok(Variant::Plain),
            other => Err(Error::InvalidConfig(format!(
                "unknown variant `{other}` (expected bireal, resnet, or plain)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// 3x3 stride-2 max pool after the stem, as in the large presets.
    pub maxpool: bool,
}

/// One stage: `convs` binarized convolutions at a fixed width. The first
/// convolution of the stage carries the stride.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub channels: usize,
    pub convs: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub input_channels: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub num_classes: usize,
    pub stem: StemSpec,
    pub variant: Variant,
    pub stages: Vec<StageSpec>,
    /// Kernel size of every binarized convolution; padding is kernel / 2.
    pub block_kernel: usize,
}

/// One block as instantiated from the spec. `convs` is 1 for BiReal and
/// Plain, 2 for ResNetStyle; the first conv carries the stride and the
/// channel change.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub variant: Variant,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub convs: usize,
    /// A projection (1x1 real conv + BN) is needed whenever the identity
    /// path cannot carry the input through unchanged.
    pub downsample: bool,
}

impl BlockSpec {
    pub fn conv_geometry(&self, index: usize) -> ConvGeometry {
        let pad = self.kernel / 2;
        if index == 0 {
            ConvGeometry::square(self.in_channels, self.out_channels, self.kernel, self.stride, pad)
        } else {
            ConvGeometry::square(self.out_channels, self.out_channels, self.kernel, 1, pad)
        }
    }

    pub fn downsample_geometry(&self) -> ConvGeometry {
        ConvGeometry::square(self.in_channels, self.out_channels, 1, self.stride, 0)
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 || self.input_height == 0 || self.input_width == 0 {
            return Err(Error::InvalidSpec("input dimensions must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("need at least two classes".into()));
        }
        if self.stem.out_channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return Err(Error::InvalidSpec("stem conv must have positive shape".into()));
        }
        if self.block_kernel == 0 {
            return Err(Error::InvalidSpec("block kernel must be positive".into()));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.channels == 0 || st.stride == 0 {
                return Err(Error::InvalidSpec(format!("stage {i} has a zero field")));
            }
            if st.convs == 0 {
                return Err(Error::InvalidSpec(format!("stage {i} has no convolutions")));
            }
            if self.variant == Variant::ResNetStyle && st.convs % 2 != 0 {
                return Err(Error::InvalidSpec(format!(
                    "stage {i}: two-conv blocks need an even conv count, got {}",
                    st.convs
                )));
            }
        }
        // The whole walk must produce non-empty feature maps.
        self.feature_dims()?;
        Ok(())
    }

    pub fn stem_geometry(&self) -> ConvGeometry {
        ConvGeometry::square(
            self.input_channels,
            self.stem.out_channels,
            self.stem.kernel,
            self.stem.stride,
            self.stem.padding,
        )
    }

    /// Expand stages into the block list for this spec's variant.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let convs_per_block = if self.variant == Variant::ResNetStyle { 2 } else { 1 };
        let mut out = Vec::new();
        let mut cur = self.stem.out_channels;
        for st in &self.stages {
            let nblocks = st.convs / convs_per_block;
            for b in 0..nblocks {
                let stride = if b == 0 { st.stride } else { 1 };
                // Plain blocks have no shortcut path, so nothing to project;
                // their stride-carrying conv changes dimensions by itself.
                let downsample =
                    (stride != 1 || cur != st.channels) && self.variant != Variant::Plain;
                out.push(BlockSpec {
                    variant: self.variant,
                    in_channels: cur,
                    out_channels: st.channels,
                    kernel: self.block_kernel,
                    stride,
                    convs: convs_per_block,
                    downsample,
                });
                cur = st.channels;
            }
        }
        out
    }

    /// Spatial size entering the first block (after stem conv and pool).
    pub fn trunk_in_hw(&self) -> Result<(usize, usize)> {
        let (mut h, mut w) = self
            .stem_geometry()
            .out_hw(self.input_height, self.input_width)?;
        if self.stem.maxpool {
            h = (h + 2 - 3) / 2 + 1;
            w = (w + 2 - 3) / 2 + 1;
        }
        Ok((h, w))
    }

    /// (channels, h, w) entering each block, plus the final feature shape.
    pub fn feature_dims(&self) -> Result<(Vec<(usize, usize, usize)>, (usize, usize, usize))> {
        let (mut h, mut w) = self.trunk_in_hw()?;
        let mut c = self.stem.out_channels;
        let mut per_block = Vec::new();
        for b in self.blocks() {
            per_block.push((c, h, w));
            let (nh, nw) = b.conv_geometry(0).out_hw(h, w)?;
            h = nh;
            w = nw;
            c = b.out_channels;
        }
        Ok((per_block, (c, h, w)))
    }

    pub fn with_variant(&self, variant: Variant) -> NetworkSpec {
        let mut s = self.clone();
        s.variant = variant;
        s
    }

    pub fn with_input_hw(&self, height: usize, width: usize) -> NetworkSpec {
        let mut s = self.clone();
        s.input_height = height;
        s.input_width = width;
        s
    }

    pub fn preset_names() -> &'static [&'static str] {
        &["bireal18", "bireal34", "tiny", "micro", "demo32"]
    }

    /// Built-in geometries. The two large presets mirror the 18- and
    /// 34-layer ImageNet networks; the small ones are desk-scale.
    pub fn preset(name: &str) -> Result<NetworkSpec> {
        let imagenet_stem = StemSpec { out_channels: 64, kernel: 7, stride: 2, padding: 3, maxpool: true };
        let spec = match name {
            "bireal18" => NetworkSpec {
                name: "bireal18".into(),
                input_channels: 3,
                input_height: 224,
                input_width: 224,
                num_classes: 1000,
                stem: imagenet_stem,
                variant: Variant::BiReal,
                stages: vec![
                    StageSpec { channels: 64, convs: 4, stride: 1 },
                    StageSpec { channels: 128, convs: 4, stride: 2 },
                    StageSpec { channels: 256, convs: 4, stride: 2 },
                    StageSpec { channels: 512, convs: 4, stride: 2 },
                ],
                block_kernel: 3,
            },
            "bireal34" => NetworkSpec {
                name: "bireal34".into(),
                input_channels: 3,
                input_height: 224,
                input_width: 224,
                num_classes: 1000,
                stem: imagenet_stem,
                variant: Variant::BiReal,
                stages: vec![
                    StageSpec { channels: 64, convs: 6, stride: 1 },
                    StageSpec { channels: 128, convs: 8, stride: 2 },
                    StageSpec { channels: 256, convs: 12, stride: 2 },
                    StageSpec { channels: 512, convs: 6, stride: 2 },
                ],
                block_kernel: 3,
            },
            "tiny" => NetworkSpec {
                name: "tiny".into(),
                input_channels: 1,
                input_height: 28,
                input_width: 28,
                num_classes: 10,
                stem: StemSpec { out_channels: 16, kernel: 3, stride: 2, padding: 1, maxpool: false },
                variant: Variant::BiReal,
                stages: vec![
                    StageSpec { channels: 16, convs: 2, stride: 1 },
                    StageSpec { channels: 32, convs: 2, stride: 2 },
                ],
                block_kernel: 3,
            },
            "micro" => NetworkSpec {
                name: "micro".into(),
                input_channels: 1,
                input_height: 14,
                input_width: 14,
                num_classes: 4,
                stem: StemSpec { out_channels: 8, kernel: 3, stride: 1, padding: 1, maxpool: false },
                variant: Variant::BiReal,
                stages: vec![
                    StageSpec { channels: 8, convs: 2, stride: 1 },
                    StageSpec { channels: 16, convs: 2, stride: 2 },
                ],
                block_kernel: 3,
            },
            "demo32" => NetworkSpec {
                name: "demo32".into(),
                input_channels: 1,
                input_height: 28,
                input_width: 28,
                num_classes: 10,
                stem: StemSpec { out_channels: 32, kernel: 3, stride: 2, padding: 1, maxpool: false },
                variant: Variant::BiReal,
                stages: vec![StageSpec { channels: 32, convs: 1, stride: 1 }],
                block_kernel: 3,
            },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown preset `{other}` (known: {})",
                    Self::preset_names().join(", ")
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// A convolution's master weights. `binarized` marks trunk convolutions
/// that act through their sign; the stem and downsample projections stay
/// real. `frozen` excludes the weights from optimizer updates.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: RealTensor,
    pub geom: ConvGeometry,
    pub binarized: bool,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub conv1: ConvParams,
    pub bn1: BatchNormParams,
    pub conv2: Option<ConvParams>,
    pub bn2: Option<BatchNormParams>,
    pub downsample: Option<(ConvParams, BatchNormParams)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    pub stem: ConvParams,
    pub stem_bn: BatchNormParams,
    pub blocks: Vec<BlockParams>,
    pub fc: LinearParams,
    /// Set once binarized weights have been collapsed to exact ±1 and the
    /// normalization layers retrained; such a model may be stored with one
    /// bit per binarized weight.
    pub inference_ready: bool,
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> RealTensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            snap_f32(z * std)
        })
        .collect();
    RealTensor::new(shape.to_vec(), data).unwrap()
}

/// Allocate and randomly initialize parameters for a spec. Weight draws
/// happen in one fixed order (stem, then each block's convs, then the
/// classifier), so a given seed names one exact parameter set.
pub fn build(spec: &NetworkSpec, rng: &mut ChaCha8Rng) -> Result<NetParams> {
    spec.validate()?;
    let sg = spec.stem_geometry();
    let stem = ConvParams {
        weight: kaiming(
            rng,
            &[sg.out_channels, sg.in_channels, sg.kernel_h, sg.kernel_w],
            sg.fan_in(),
        ),
        geom: sg,
        binarized: false,
        frozen: false,
    };
    let stem_bn = BatchNormParams::new(sg.out_channels);

    let mut blocks = Vec::new();
    for b in spec.blocks() {
        let g1 = b.conv_geometry(0);
        let conv1 = ConvParams {
            weight: kaiming(
                rng,
                &[g1.out_channels, g1.in_channels, g1.kernel_h, g1.kernel_w],
                g1.fan_in(),
            ),
            geom: g1,
            binarized: true,
            frozen: false,
        };
        let bn1 = BatchNormParams::new(g1.out_channels);
        let (conv2, bn2) = if b.convs == 2 {
            let g2 = b.conv_geometry(1);
            (
                Some(ConvParams {
                    weight: kaiming(
                        rng,
                        &[g2.out_channels, g2.in_channels, g2.kernel_h, g2.kernel_w],
                        g2.fan_in(),
                    ),
                    geom: g2,
                    binarized: true,
                    frozen: false,
                }),
                Some(BatchNormParams::new(g2.out_channels)),
            )
        } else {
            (None, None)
        };
        let downsample = if b.downsample {
            let gd = b.downsample_geometry();
            Some((
                ConvParams {
                    weight: kaiming(rng, &[gd.out_channels, gd.in_channels, 1, 1], gd.fan_in()),
                    geom: gd,
                    binarized: false,
                    frozen: false,
                },
                BatchNormParams::new(gd.out_channels),
            ))
        } else {
            None
        };
        blocks.push(BlockParams { conv1, bn1, conv2, bn2, downsample });
    }

    let (_, (c, _, _)) = spec.feature_dims()?;
    let mut fc = LinearParams::zeros(spec.num_classes, c);
    fc.weight = kaiming(rng, &[spec.num_classes, c], c);
    Ok(NetParams { stem, stem_bn, blocks, fc, inference_ready: false })
}

impl NetParams {
    /// Total parameter count: conv and fc weights, biases, and the affine
    /// batch-norm parameters (running statistics are buffers, not
    /// parameters).
    pub fn param_count(&self) -> usize {
        let bn = |p: &BatchNormParams| 2 * p.channels();
        let mut n = self.stem.weight.numel() + bn(&self.stem_bn);
        for b in &self.blocks {
            n += b.conv1.weight.numel() + bn(&b.bn1);
            if let Some(c2) = &b.conv2 {
                n += c2.weight.numel();
            }
            if let Some(bn2) = &b.bn2 {
                n += bn(bn2);
            }
            if let Some((dc, dbn)) = &b.downsample {
                n += dc.weight.numel() + bn(dbn);
            }
        }
        n + self.fc.weight.numel() + self.fc.bias.len()
    }

    pub fn binarized_weight_count(&self) -> usize {
        let mut n = 0;
        for b in &self.blocks {
            n += b.conv1.weight.numel();
            if let Some(c2) = &b.conv2 {
                n += c2.weight.numel();
            }
        }
        n
    }

    /// Check structural agreement with a spec: same blocks, same shapes.
    pub fn validate_against(&self, spec: &NetworkSpec) -> Result<()> {
        let blocks = spec.blocks();
        if blocks.len() != self.blocks.len() {
            return Err(Error::ShapeMismatch {
                context: "NetParams::validate_against",
                axis: "blocks",
                expected: blocks.len(),
                got: self.blocks.len(),
            });
        }
        if self.stem.geom != spec.stem_geometry() {
            return Err(Error::InvalidSpec("stem geometry disagrees with spec".into()));
        }
        for (i, (bp, bs)) in self.blocks.iter().zip(&blocks).enumerate() {
            if bp.conv1.geom != bs.conv_geometry(0) {
                return Err(Error::InvalidSpec(format!("block {i}: conv1 geometry disagrees")));
            }
            if bp.conv2.is_some() != (bs.convs == 2) {
                return Err(Error::InvalidSpec(format!("block {i}: conv count disagrees")));
            }
            if let Some(c2) = &bp.conv2 {
                if c2.geom != bs.conv_geometry(1) {
                    return Err(Error::InvalidSpec(format!("block {i}: conv2 geometry disagrees")));
                }
            }
            if bp.downsample.is_some() != bs.downsample {
                return Err(Error::InvalidSpec(format!("block {i}: shortcut projection disagrees")));
            }
        }
        let (_, (c, _, _)) = spec.feature_dims()?;
        if self.fc.in_features() != c || self.fc.out_features() != spec.num_classes {
            return Err(Error::InvalidSpec("classifier shape disagrees with spec".into()));
        }
        Ok(())
    }
}

/// Per-layer value-count bookkeeping for the binary trunk.
///
/// Counting convention: a sign layer's entries each take 2 values. A binary
/// convolution entry sums fan_in terms from {-1,+1} and lands on one of
/// fan_in + 1 values (batch norm is per-channel affine and does not change
/// the count). An identity shortcut adds a real tensor whose entries are as
/// rich as the conv output itself, squaring the per-entry count where it
/// attaches.
#[derive(Clone, Debug, Serialize)]
pub struct CapabilityRow {
    pub name: String,
    pub values_per_entry: u64,
    pub num_entries: u64,
    /// log2(values_per_entry ^ num_entries)
    pub log2_total: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CapabilityReport {
    pub network: String,
    pub variant: Variant,
    pub rows: Vec<CapabilityRow>,
}

pub fn capability_report(spec: &NetworkSpec) -> Result<CapabilityReport> {
    spec.validate()?;
    let (per_block, _) = spec.feature_dims()?;
    let mut rows = Vec::new();
    for (i, (b, &(c, h, w))) in spec.blocks().iter().zip(&per_block).enumerate() {
        let mut h = h;
        let mut w = w;
        let mut in_entries = (c * h * w) as u64;
        for conv_idx in 0..b.convs {
            let g = b.conv_geometry(conv_idx);
            let (oh, ow) = g.out_hw(h, w)?;
            let out_entries = (g.out_channels * oh * ow) as u64;
            let conv_values = (g.fan_in() + 1) as u64;
            let tag = if b.convs == 2 { format!(".{}", conv_idx + 1) } else { String::new() };
            rows.push(CapabilityRow {
                name: format!("block{i}{tag}.sign"),
                values_per_entry: 2,
                num_entries: in_entries,
                log2_total: in_entries as f64,
            });
            rows.push(CapabilityRow {
                name: format!("block{i}{tag}.conv_bn"),
                values_per_entry: conv_values,
                num_entries: out_entries,
                log2_total: out_entries as f64 * (conv_values as f64).log2(),
            });
            let shortcut_here = match b.variant {
                Variant::BiReal => true,
                Variant::ResNetStyle => conv_idx + 1 == b.convs,
                Variant::Plain => false,
            };
            if shortcut_here {
                let sq = conv_values * conv_values;
                rows.push(CapabilityRow {
                    name: format!("block{i}{tag}.shortcut_add"),
                    values_per_entry: sq,
                    num_entries: out_entries,
                    log2_total: out_entries as f64 * (sq as f64).log2(),
                });
            }
            h = oh;
            w = ow;
            in_entries = out_entries;
        }
    }
    Ok(CapabilityReport { network: spec.name.clone(), variant: spec.variant, rows })
}
