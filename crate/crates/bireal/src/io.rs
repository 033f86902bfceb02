//! Model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "BRNM" | u32 version | u32 header_len | header JSON
//! | u64 body_len | body | u32 crc32(body)
//! ```
//!
//! The header holds the network spec plus the conventions a reader needs to
//! interpret the body (padding value, bit packing order, whether binarized
//! weights are stored as packed signs). The body is a flat run of tensor
//! records in one fixed walk order: stem conv, stem BN, then each block
//! (conv, BN, optional second conv + BN, optional projection conv + BN),
//! then the classifier weight and bias.
//!
//! Record: `u8 tag | u8 rank | rank x u32 dims | payload`. Tag 0 is dense
//! f32; tag 1 is sign bits packed into u64 words (bit 1 means +1, least
//! significant bit first, zero tail). Binarized convolutions are written as
//! tag 1 exactly when the model is inference-ready, which is what makes an
//! inference-ready file cost one bit per binarized weight. All stored reals
//! are f32-snapped in memory, so the f32 payload is lossless.

use crate::bn::BatchNormParams;
use crate::error::{Error, Result};
use crate::model::{BlockParams, ConvParams, NetParams, NetworkSpec};
use crate::tensor::{sign_pack, unpack, BitTensor, RealTensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

const MAGIC: &[u8; 4] = b"BRNM";
const VERSION: u32 = 1;

/// Trunk convolutions pad with -1 (a real sign value); the stem pads with 0.
pub const PADDING_CONVENTION: &str = "trunk_neg_one_stem_zero";
/// Element i lives in word i/64 at bit i%64; set bit means +1.
pub const BIT_ORDER: &str = "lsb_first_u64_le";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    padding_convention: String,
    bit_order: String,
    inference_ready: bool,
}

const TAG_F32: u8 = 0;
const TAG_BITS: u8 = 1;

fn push_record_header(body: &mut Vec<u8>, tag: u8, dims: &[usize]) {
    body.push(tag);
    body.push(dims.len() as u8);
    for &d in dims {
        body.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn push_f32_record(body: &mut Vec<u8>, dims: &[usize], data: &[f64]) {
    push_record_header(body, TAG_F32, dims);
    for &v in data {
        body.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn push_bits_record(body: &mut Vec<u8>, bits: &BitTensor) {
    push_record_header(body, TAG_BITS, bits.shape());
    for &w in bits.words() {
        body.extend_from_slice(&w.to_le_bytes());
    }
}

fn push_conv(body: &mut Vec<u8>, conv: &ConvParams, as_bits: bool) -> Result<()> {
    if as_bits {
        if conv.weight.data().iter().any(|&v| v != 1.0 && v != -1.0) {
            return Err(Error::Format(
                "inference-ready model holds a binarized weight that is not exactly +/-1".into(),
            ));
        }
        push_bits_record(body, &sign_pack(&conv.weight));
    } else {
        push_f32_record(body, conv.weight.shape(), conv.weight.data());
    }
    Ok(())
}

fn push_bn(body: &mut Vec<u8>, bn: &BatchNormParams) {
    let c = bn.channels();
    push_f32_record(body, &[c], &bn.gamma);
    push_f32_record(body, &[c], &bn.beta);
    push_f32_record(body, &[c], &bn.running_mean);
    push_f32_record(body, &[c], &bn.running_var);
}

/// Serialize a model. The byte stream is a pure function of (spec, params).
pub fn model_to_bytes(spec: &NetworkSpec, params: &NetParams) -> Result<Vec<u8>> {
    spec.validate()?;
    params.validate_against(spec)?;
    let header = Header {
        spec: spec.clone(),
        padding_convention: PADDING_CONVENTION.into(),
        bit_order: BIT_ORDER.into(),
        inference_ready: params.inference_ready,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Format(format!("header encode: {e}")))?;

    let mut body = Vec::new();
    push_conv(&mut body, &params.stem, false)?;
    push_bn(&mut body, &params.stem_bn);
    for b in &params.blocks {
        push_conv(&mut body, &b.conv1, params.inference_ready)?;
        push_bn(&mut body, &b.bn1);
        if let Some(c2) = &b.conv2 {
            push_conv(&mut body, c2, params.inference_ready)?;
            push_bn(&mut body, b.bn2.as_ref().unwrap());
        }
        if let Some((dc, dbn)) = &b.downsample {
            push_conv(&mut body, dc, false)?;
            push_bn(&mut body, dbn);
        }
    }
    push_f32_record(&mut body, params.fc.weight.shape(), params.fc.weight.data());
    push_f32_record(&mut body, &[params.fc.bias.len()], &params.fc.bias);

    let crc = crc32fast::hash(&body);

    let mut out = Vec::with_capacity(24 + header_json.len() + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated file: {what} needs {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_record(cur: &mut Cursor, expect_bits: bool, shape: &[usize], what: &str) -> Result<RealTensor> {
    let tag = cur.u8(what)?;
    let expected_tag = if expect_bits { TAG_BITS } else { TAG_F32 };
    if tag != expected_tag {
        return Err(Error::Format(format!(
            "{what}: record tag {tag}, expected {expected_tag}"
        )));
    }
    let rank = cur.u8(what)? as usize;
    if rank != shape.len() {
        return Err(Error::Format(format!(
            "{what}: rank {rank}, expected {}",
            shape.len()
        )));
    }
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(cur.u32(what)? as usize);
    }
    if dims != shape {
        return Err(Error::Format(format!("{what}: dims {dims:?}, expected {shape:?}")));
    }
    let numel: usize = shape.iter().product();
    if expect_bits {
        let words = numel.div_ceil(64);
        let raw = cur.take(words * 8, what)?;
        let words: Vec<u64> = raw
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let bits = BitTensor::from_words(shape, words)
            .map_err(|_| Error::Format(format!("{what}: non-canonical bit tail")))?;
        Ok(unpack(&bits))
    } else {
        let raw = cur.take(numel * 4, what)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        RealTensor::new(shape.to_vec(), data)
    }
}

fn read_bn(cur: &mut Cursor, channels: usize, what: &str) -> Result<BatchNormParams> {
    let mut bn = BatchNormParams::new(channels);
    bn.gamma = read_record(cur, false, &[channels], what)?.into_data();
    bn.beta = read_record(cur, false, &[channels], what)?.into_data();
    bn.running_mean = read_record(cur, false, &[channels], what)?.into_data();
    bn.running_var = read_record(cur, false, &[channels], what)?.into_data();
    Ok(bn)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<(NetworkSpec, NetParams)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected {MAGIC:?}")));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let header_len = cur.u32("header length")? as usize;
    let header_json = cur.take(header_len, "header")?;
    let header: Header = serde_json::from_slice(header_json)
        .map_err(|e| Error::Format(format!("header decode: {e}")))?;
    header.spec.validate()?;

    let body_len = cur.u64("body length")? as usize;
    let body = cur.take(body_len, "body")?;
    let crc_stored = cur.u32("checksum")?;
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checksum",
            bytes.len() - cur.pos
        )));
    }
    let crc_computed = crc32fast::hash(body);
    if crc_computed != crc_stored {
        return Err(Error::ChecksumMismatch { stored: crc_stored, computed: crc_computed });
    }

    let spec = header.spec;
    let ready = header.inference_ready;
    let mut cur = Cursor { bytes: body, pos: 0 };
    let sg = spec.stem_geometry();
    let stem = ConvParams {
        weight: read_record(
            &mut cur,
            false,
            &[sg.out_channels, sg.in_channels, sg.kernel_h, sg.kernel_w],
            "stem conv",
        )?,
        geom: sg,
        binarized: false,
        frozen: ready,
    };
    let stem_bn = read_bn(&mut cur, sg.out_channels, "stem bn")?;

    let mut blocks = Vec::new();
    for (i, b) in spec.blocks().iter().enumerate() {
        let g1 = b.conv_geometry(0);
        let conv1 = ConvParams {
            weight: read_record(
                &mut cur,
                ready,
                &[g1.out_channels, g1.in_channels, g1.kernel_h, g1.kernel_w],
                &format!("block {i} conv1"),
            )?,
            geom: g1,
            binarized: true,
            frozen: ready,
        };
        let bn1 = read_bn(&mut cur, g1.out_channels, &format!("block {i} bn1"))?;
        let (conv2, bn2) = if b.convs == 2 {
            let g2 = b.conv_geometry(1);
            let c2 = ConvParams {
                weight: read_record(
                    &mut cur,
                    ready,
                    &[g2.out_channels, g2.in_channels, g2.kernel_h, g2.kernel_w],
                    &format!("block {i} conv2"),
                )?,
                geom: g2,
                binarized: true,
                frozen: ready,
            };
            let bn2 = read_bn(&mut cur, g2.out_channels, &format!("block {i} bn2"))?;
            (Some(c2), Some(bn2))
        } else {
            (None, None)
        };
        let downsample = if b.downsample {
            let gd = b.downsample_geometry();
            let dc = ConvParams {
                weight: read_record(
                    &mut cur,
                    false,
                    &[gd.out_channels, gd.in_channels, 1, 1],
                    &format!("block {i} projection conv"),
                )?,
                geom: gd,
                binarized: false,
                frozen: ready,
            };
            let dbn = read_bn(&mut cur, gd.out_channels, &format!("block {i} projection bn"))?;
            Some((dc, dbn))
        } else {
            None
        };
        blocks.push(BlockParams { conv1, bn1, conv2, bn2, downsample });
    }

    let (_, (c, _, _)) = spec.feature_dims()?;
    let mut fc = crate::layers::LinearParams::zeros(spec.num_classes, c);
    fc.weight = read_record(&mut cur, false, &[spec.num_classes, c], "classifier weight")?;
    fc.bias = read_record(&mut cur, false, &[spec.num_classes], "classifier bias")?.into_data();
    fc.frozen = ready;
    if cur.pos != body.len() {
        return Err(Error::Format(format!(
            "{} unread bytes at end of body",
            body.len() - cur.pos
        )));
    }

    let params = NetParams { stem, stem_bn, blocks, fc, inference_ready: ready };
    params.validate_against(&spec)?;
    Ok((spec, params))
}

pub fn save_model(path: &Path, spec: &NetworkSpec, params: &NetParams) -> Result<()> {
    let bytes = model_to_bytes(spec, params)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(NetworkSpec, NetParams)> {
    let bytes = std::fs::read(path)?;
    model_from_bytes(&bytes)
}
