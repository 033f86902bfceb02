//! Dense real tensors and bit-packed binary tensors.
//!
//! `RealTensor` carries activations, master weights, and gradients during
//! training. `BitTensor` packs {-1,+1} values one bit per element for the
//! XNOR-popcount inference path: bit 1 encodes +1, bit 0 encodes -1, element
//! i lives at word i/64, bit i%64 (LSB first). Trailing bits of the last
//! word are kept at zero so word-level equality coincides with elementwise
//! equality.

use crate::error::{Error, Result};

/// Row-major f64 tensor, last axis fastest. Activations use [N, C, H, W],
/// convolution weights [O, I, Kh, Kw].
#[derive(Clone, Debug, PartialEq)]
pub struct RealTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                context: "RealTensor::new",
                axis: "numel",
                expected: numel,
                got: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Interpret as [N, C, H, W]; errors if the rank is not 4.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                context: "RealTensor::dims4",
                axis: "rank",
                expected: 4,
                got: self.shape.len(),
            });
        }
        Ok((self.shape[0], self.shape[1], self.shape[2], self.shape[3]))
    }

    /// Interpret as [N, F]; errors if the rank is not 2.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "RealTensor::dims2",
                axis: "rank",
                expected: 2,
                got: self.shape.len(),
            });
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Round through f32. Parameters are held at 32-bit precision in memory so
/// the on-disk format (32-bit floats) round-trips without loss; activations
/// and gradients stay full f64.
#[inline]
pub fn snap_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Bit-packed tensor over {-1, +1}. Bit 1 is +1, bit 0 is -1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
}

fn words_for(numel: usize) -> usize {
    numel.div_ceil(64)
}

impl BitTensor {
    /// All elements -1 (all bits zero).
    pub fn all_minus_one(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Self { shape: shape.to_vec(), words: vec![0u64; words_for(numel)] }
    }

    pub fn from_bools(shape: &[usize], bits: &[bool]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if bits.len() != numel {
            return Err(Error::ShapeMismatch {
                context: "BitTensor::from_bools",
                axis: "numel",
                expected: numel,
                got: bits.len(),
            });
        }
        let mut t = Self::all_minus_one(shape);
        for (i, &b) in bits.iter().enumerate() {
            if b {
                t.words[i >> 6] |= 1u64 << (i & 63);
            }
        }
        Ok(t)
    }

    /// Rebuild from raw words, e.g. when loading a model. Trailing bits of
    /// the last word must already be zero.
    pub fn from_words(shape: &[usize], words: Vec<u64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if words.len() != words_for(numel) {
            return Err(Error::ShapeMismatch {
                context: "BitTensor::from_words",
                axis: "words",
                expected: words_for(numel),
                got: words.len(),
            });
        }
        let t = Self { shape: shape.to_vec(), words };
        if !t.is_canonical() {
            return Err(Error::Format("bit tensor has nonzero trailing bits".into()));
        }
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < self.numel());
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    /// True when all bits past `numel` are zero.
    pub fn is_canonical(&self) -> bool {
        let numel = self.numel();
        let tail = numel & 63;
        if tail == 0 {
            return true;
        }
        let mask = !0u64 << tail;
        self.words[numel >> 6] & mask == 0
    }
}

/// Pack the sign of each value: x >= 0 packs to bit 1 (+1), x < 0 to bit 0.
/// Zero maps to +1 by the convention of the sign binarizer.
pub fn sign_pack(x: &RealTensor) -> BitTensor {
    let mut t = BitTensor::all_minus_one(x.shape());
    for (i, &v) in x.data().iter().enumerate() {
        if v >= 0.0 {
            t.words[i >> 6] |= 1u64 << (i & 63);
        }
    }
    t
}

/// Expand back to {-1.0, +1.0}.
pub fn unpack(b: &BitTensor) -> RealTensor {
    let numel = b.numel();
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        data.push(if b.get(i) { 1.0 } else { -1.0 });
    }
    RealTensor { shape: b.shape().to_vec(), data }
}

/// Number of positions (0..=64) where the two words agree. For words packing
/// {-1,+1} values, each agreeing bit contributes +1 to the dot product and
/// each disagreeing bit contributes -1, so over a whole exactly-packed vector
/// of length n the dot product is 2 * total_agreements - n.
#[inline]
pub fn popcount_xnor(a: u64, b: u64) -> u32 {
    (!(a ^ b)).count_ones()
}
