//! 2-D convolution kernels: the XNOR-popcount path for packed ±1 tensors and
//! a real-valued reference path used for training and as the exactness
//! oracle.
//!
//! Both paths share one geometry and one padding convention for the binary
//! trunk: padded positions hold -1 (bit 0), never 0, because inputs to a
//! binary convolution are themselves outputs of a sign binarizer and 0 is
//! not representable. The real path takes the pad value explicitly so the
//! real-valued stem can keep ordinary zero padding.

use crate::error::{Error, Result};
use crate::tensor::{popcount_xnor, BitTensor, RealTensor};
use rayon::prelude::*;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn square(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self { in_channels, out_channels, kernel_h: kernel, kernel_w: kernel, stride, padding }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidSpec("convolution with zero channels".into()));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 {
            return Err(Error::InvalidSpec("convolution kernel and stride must be positive".into()));
        }
        Ok(())
    }

    /// Output height/width for an input of the given size. Errors when the
    /// kernel does not fit even once (output would be empty).
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let span_h = h + 2 * self.padding;
        let span_w = w + 2 * self.padding;
        if span_h < self.kernel_h || span_w < self.kernel_w {
            return Err(Error::InvalidSpec(format!(
                "kernel {}x{} does not fit input {}x{} with padding {}",
                self.kernel_h, self.kernel_w, h, w, self.padding
            )));
        }
        Ok((
            (span_h - self.kernel_h) / self.stride + 1,
            (span_w - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Elements feeding one output entry.
    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }
}

fn check_shapes(
    context: &'static str,
    a_shape: &[usize],
    w_shape: &[usize],
    g: &ConvGeometry,
) -> Result<()> {
    if a_shape.len() != 4 {
        return Err(Error::ShapeMismatch { context, axis: "input rank", expected: 4, got: a_shape.len() });
    }
    if w_shape.len() != 4 {
        return Err(Error::ShapeMismatch { context, axis: "weight rank", expected: 4, got: w_shape.len() });
    }
    if a_shape[1] != g.in_channels {
        return Err(Error::ShapeMismatch { context, axis: "in_channels", expected: g.in_channels, got: a_shape[1] });
    }
    if w_shape[0] != g.out_channels {
        return Err(Error::ShapeMismatch { context, axis: "out_channels", expected: g.out_channels, got: w_shape[0] });
    }
    if w_shape[1] != g.in_channels {
        return Err(Error::ShapeMismatch { context, axis: "weight in_channels", expected: g.in_channels, got: w_shape[1] });
    }
    if w_shape[2] != g.kernel_h {
        return Err(Error::ShapeMismatch { context, axis: "kernel_h", expected: g.kernel_h, got: w_shape[2] });
    }
    if w_shape[3] != g.kernel_w {
        return Err(Error::ShapeMismatch { context, axis: "kernel_w", expected: g.kernel_w, got: w_shape[3] });
    }
    Ok(())
}

/// XNOR-popcount convolution over packed ±1 tensors. Out-of-image taps count
/// as -1. The result holds exact integer dot products in f64: each output is
/// 2 * agreements - fan_in, so it lies in [-fan_in, +fan_in] and has the
/// same parity as fan_in.
///
/// One bit-row per output position is assembled once (im2row over bits) and
/// reused against every output channel's packed weight row. Pad slots in the
/// row are bit 0, which is exactly the -1 convention; the only correction
/// needed is for the row's trailing alignment bits, which XNOR against the
/// weight row's zero tail as spurious agreements and are subtracted.
pub fn binconv2d(a: &BitTensor, w: &BitTensor, g: &ConvGeometry) -> Result<RealTensor> {
    check_shapes("binconv2d", a.shape(), w.shape(), g)?;
    let n = a.shape()[0];
    let (h, wd) = (a.shape()[2], a.shape()[3]);
    let (ho, wo) = g.out_hw(h, wd)?;
    let (c, o) = (g.in_channels, g.out_channels);
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    let k = g.fan_in();
    let wpr = k.div_ceil(64);
    let tail_bits = (wpr * 64 - k) as i64;

    // Weights are contiguous per output channel in [O, C, Kh, Kw] order, so
    // row o is just bits [o*k, (o+1)*k) realigned to a word boundary.
    let mut wrows = vec![0u64; o * wpr];
    for oi in 0..o {
        for ki in 0..k {
            if w.get(oi * k + ki) {
                wrows[oi * wpr + (ki >> 6)] |= 1u64 << (ki & 63);
            }
        }
    }

    let mut out = RealTensor::zeros(&[n, o, ho, wo]);
    let plane = o * ho * wo;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(ni, chunk)| {
            let mut arow = vec![0u64; wpr];
            for oh in 0..ho {
                for ow in 0..wo {
                    arow.iter_mut().for_each(|x| *x = 0);
                    let mut ki = 0usize;
                    for ci in 0..c {
                        for khi in 0..kh {
                            let ih = (oh * g.stride + khi) as i64 - g.padding as i64;
                            if ih < 0 || ih >= h as i64 {
                                ki += kw;
                                continue;
                            }
                            let base = ((ni * c + ci) * h + ih as usize) * wd;
                            for kwi in 0..kw {
                                let iw = (ow * g.stride + kwi) as i64 - g.padding as i64;
                                if iw >= 0 && iw < wd as i64 && a.get(base + iw as usize) {
                                    arow[ki >> 6] |= 1u64 << (ki & 63);
                                }
                                ki += 1;
                            }
                        }
                    }
                    for oi in 0..o {
                        let mut agree = 0i64;
                        for wi in 0..wpr {
                            agree += popcount_xnor(arow[wi], wrows[oi * wpr + wi]) as i64;
                        }
                        let dot = 2 * (agree - tail_bits) - k as i64;
                        chunk[(oi * ho + oh) * wo + ow] = dot as f64;
                    }
                }
            }
        });
    Ok(out)
}

/// Plain real-valued convolution. Out-of-image taps read `pad_value`.
pub fn float_conv2d(a: &RealTensor, w: &RealTensor, g: &ConvGeometry, pad_value: f64) -> Result<RealTensor> {
    check_shapes("float_conv2d", a.shape(), w.shape(), g)?;
    let (n, c, h, wd) = a.dims4()?;
    let (ho, wo) = g.out_hw(h, wd)?;
    let o = g.out_channels;
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    let adata = a.data();
    let wdata = w.data();

    let mut out = RealTensor::zeros(&[n, o, ho, wo]);
    let plane = o * ho * wo;
    out.data_mut()
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(ni, chunk)| {
            for oi in 0..o {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let mut acc = 0.0f64;
                        for ci in 0..c {
                            for khi in 0..kh {
                                let ih = (oh * g.stride + khi) as i64 - g.padding as i64;
                                for kwi in 0..kw {
                                    let iw = (ow * g.stride + kwi) as i64 - g.padding as i64;
                                    let x = if ih >= 0 && ih < h as i64 && iw >= 0 && iw < wd as i64 {
                                        adata[((ni * c + ci) * h + ih as usize) * wd + iw as usize]
                                    } else {
                                        pad_value
                                    };
                                    acc += x * wdata[((oi * c + ci) * kh + khi) * kw + kwi];
                                }
                            }
                        }
                        chunk[(oi * ho + oh) * wo + ow] = acc;
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of `float_conv2d` with respect to input and weight. Padded taps
/// contribute `pad_value * grad` to the weight gradient (they are constants,
/// so nothing flows back to the input there). Accumulation order is fixed
/// and independent of thread count: the input gradient is parallel over
/// batch entries, the weight gradient over output channels, and both use
/// serial inner loops.
pub fn float_conv2d_backward(
    grad_out: &RealTensor,
    a: &RealTensor,
    w: &RealTensor,
    g: &ConvGeometry,
    pad_value: f64,
) -> Result<(RealTensor, RealTensor)> {
    check_shapes("float_conv2d_backward", a.shape(), w.shape(), g)?;
    let (n, c, h, wd) = a.dims4()?;
    let (ho, wo) = g.out_hw(h, wd)?;
    let o = g.out_channels;
    let (kh, kw) = (g.kernel_h, g.kernel_w);
    let expect = [n, o, ho, wo];
    if grad_out.shape() != expect {
        return Err(Error::ShapeMismatch {
            context: "float_conv2d_backward",
            axis: "grad_out numel",
            expected: expect.iter().product(),
            got: grad_out.numel(),
        });
    }
    let gdata = grad_out.data();
    let adata = a.data();
    let wdata = w.data();

    let mut grad_a = RealTensor::zeros(&[n, c, h, wd]);
    grad_a
        .data_mut()
        .par_chunks_mut(c * h * wd)
        .enumerate()
        .for_each(|(ni, chunk)| {
            for oi in 0..o {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let gval = gdata[((ni * o + oi) * ho + oh) * wo + ow];
                        for ci in 0..c {
                            for khi in 0..kh {
                                let ih = (oh * g.stride + khi) as i64 - g.padding as i64;
                                if ih < 0 || ih >= h as i64 {
                                    continue;
                                }
                                for kwi in 0..kw {
                                    let iw = (ow * g.stride + kwi) as i64 - g.padding as i64;
                                    if iw < 0 || iw >= wd as i64 {
                                        continue;
                                    }
                                    chunk[(ci * h + ih as usize) * wd + iw as usize] +=
                                        gval * wdata[((oi * c + ci) * kh + khi) * kw + kwi];
                                }
                            }
                        }
                    }
                }
            }
        });

    let mut grad_w = RealTensor::zeros(&[o, c, kh, kw]);
    grad_w
        .data_mut()
        .par_chunks_mut(c * kh * kw)
        .enumerate()
        .for_each(|(oi, chunk)| {
            for ni in 0..n {
                for oh in 0..ho {
                    for ow in 0..wo {
                        let gval = gdata[((ni * o + oi) * ho + oh) * wo + ow];
                        if gval == 0.0 {
                            continue;
                        }
                        for ci in 0..c {
                            for khi in 0..kh {
                                let ih = (oh * g.stride + khi) as i64 - g.padding as i64;
                                for kwi in 0..kw {
                                    let iw = (ow * g.stride + kwi) as i64 - g.padding as i64;
                                    let x = if ih >= 0 && ih < h as i64 && iw >= 0 && iw < wd as i64 {
                                        adata[((ni * c + ci) * h + ih as usize) * wd + iw as usize]
                                    } else {
                                        pad_value
                                    };
                                    chunk[(ci * kh + khi) * kw + kwi] += gval * x;
                                }
                            }
                        }
                    }
                }
            }
        });

    Ok((grad_a, grad_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{sign_pack, unpack};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_pm1(rng: &mut ChaCha8Rng, shape: &[usize]) -> RealTensor {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        RealTensor::new(shape.to_vec(), data).unwrap()
    }

    fn random_real(rng: &mut ChaCha8Rng, shape: &[usize]) -> RealTensor {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        RealTensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn out_hw_floors_and_rejects_empty() {
        let g = ConvGeometry::square(3, 64, 7, 2, 3);
        assert_eq!(g.out_hw(224, 224).unwrap(), (112, 112));
        let g = ConvGeometry::square(1, 1, 5, 1, 0);
        assert!(g.out_hw(4, 4).is_err());
    }

    #[test]
    fn shape_errors_name_the_axis() {
        let g = ConvGeometry::square(3, 4, 3, 1, 1);
        let a = RealTensor::zeros(&[1, 2, 8, 8]);
        let w = RealTensor::zeros(&[4, 3, 3, 3]);
        let msg = float_conv2d(&a, &w, &g, 0.0).unwrap_err().to_string();
        assert!(msg.contains("in_channels"), "{msg}");
        let a = RealTensor::zeros(&[1, 3, 8, 8]);
        let w = RealTensor::zeros(&[4, 3, 2, 3]);
        let msg = float_conv2d(&a, &w, &g, 0.0).unwrap_err().to_string();
        assert!(msg.contains("kernel_h"), "{msg}");
    }

    // 4x4 all-(+1) input, all-(+1) 3x3 weights, stride 2, padding 1: each
    // output entry's mix of real and pad taps is hand-countable. The top-left
    // entry sees 4 real pixels and 5 pad slots (dot 4 - 5 = -1), the two edge
    // entries 6 real / 3 pad (dot 3), and the bottom-right all 9 real (dot 9).
    #[test]
    fn hand_counted_pad_example() {
        let g = ConvGeometry::square(1, 1, 3, 2, 1);
        let a = RealTensor::full(&[1, 1, 4, 4], 1.0);
        let w = RealTensor::full(&[1, 1, 3, 3], 1.0);
        let out = binconv2d(&sign_pack(&a), &sign_pack(&w), &g).unwrap();
        assert_eq!(out.data(), &[-1.0, 3.0, 3.0, 9.0]);
        let fout = float_conv2d(&a, &w, &g, -1.0).unwrap();
        assert_eq!(fout.data(), out.data());
    }

    #[test]
    fn binconv_matches_float_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            (1usize, 1usize, 1usize, 1usize, 1usize, 0usize, 5usize, 5usize),
            (2, 3, 4, 3, 1, 1, 8, 8),
            (1, 64, 8, 3, 1, 1, 6, 6), // fan_in 576: rows span multiple words
            (2, 5, 7, 3, 2, 1, 9, 9),
            (1, 2, 3, 5, 1, 2, 7, 7),
            (3, 1, 4, 1, 1, 0, 4, 6), // 1x1 kernel, rectangular input
        ];
        for (n, c, o, k, s, p, h, w) in cases {
            let g = ConvGeometry::square(c, o, k, s, p);
            let a = random_pm1(&mut rng, &[n, c, h, w]);
            let wt = random_pm1(&mut rng, &[o, c, k, k]);
            let fast = binconv2d(&sign_pack(&a), &sign_pack(&wt), &g).unwrap();
            let slow = float_conv2d(&a, &wt, &g, -1.0).unwrap();
            assert_eq!(fast.data(), slow.data(), "geometry {g:?}");
        }
    }

    #[test]
    fn binconv_consumes_packed_not_reexpanded() {
        // Packing a tensor, unpacking, and repacking must not change results:
        // the packed form is the source of truth.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeometry::square(3, 4, 3, 1, 1);
        let a = random_real(&mut rng, &[1, 3, 6, 6]);
        let wt = random_real(&mut rng, &[4, 3, 3, 3]);
        let pa = sign_pack(&a);
        let pw = sign_pack(&wt);
        let once = binconv2d(&pa, &pw, &g).unwrap();
        let twice = binconv2d(&sign_pack(&unpack(&pa)), &sign_pack(&unpack(&pw)), &g).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        // Every binary conv output lies in [-fan_in, fan_in] and shares its
        // parity with fan_in.
        #[test]
        fn prop_range_and_parity(
            seed in any::<u64>(),
            c in 1usize..5,
            o in 1usize..4,
            k in 1usize..4,
            s in 1usize..3,
            p in 0usize..2,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ConvGeometry::square(c, o, k, s, p);
            let a = random_pm1(&mut rng, &[1, c, 6, 6]);
            let wt = random_pm1(&mut rng, &[o, c, k, k]);
            let out = binconv2d(&sign_pack(&a), &sign_pack(&wt), &g).unwrap();
            let fan_in = g.fan_in() as i64;
            for &v in out.data() {
                let vi = v as i64;
                prop_assert!(vi.abs() <= fan_in);
                prop_assert_eq!((vi - fan_in).rem_euclid(2), 0);
            }
        }
    }

    #[test]
    fn one_by_one_backward_is_elementwise() {
        // 1x1 kernel, stride 1, no padding: grad_w[o][c] reduces to
        // sum_n,h,w grad_out[n,o,h,w] * a[n,c,h,w].
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeometry::square(2, 3, 1, 1, 0);
        let a = random_real(&mut rng, &[2, 2, 4, 4]);
        let w = random_real(&mut rng, &[3, 2, 1, 1]);
        let go = random_real(&mut rng, &[2, 3, 4, 4]);
        let (_, gw) = float_conv2d_backward(&go, &a, &w, &g, 0.0).unwrap();
        for oi in 0..3 {
            for ci in 0..2 {
                let mut want = 0.0;
                for ni in 0..2 {
                    for hi in 0..4 {
                        for wi in 0..4 {
                            want += go.data()[((ni * 3 + oi) * 4 + hi) * 4 + wi]
                                * a.data()[((ni * 2 + ci) * 4 + hi) * 4 + wi];
                        }
                    }
                }
                let got = gw.data()[oi * 2 + ci];
                assert!((got - want).abs() < 1e-12, "o{oi} c{ci}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (pad_value, p) in [(0.0, 1usize), (-1.0, 1), (0.0, 0)] {
            let g = ConvGeometry::square(2, 3, 3, 2, p);
            let a = random_real(&mut rng, &[2, 2, 7, 7]);
            let w = random_real(&mut rng, &[3, 2, 3, 3]);
            let go = random_real(&mut rng, &[2, 3, g.out_hw(7, 7).unwrap().0, g.out_hw(7, 7).unwrap().1]);
            let (ga, gw) = float_conv2d_backward(&go, &a, &w, &g, pad_value).unwrap();

            let loss = |a: &RealTensor, w: &RealTensor| -> f64 {
                let out = float_conv2d(a, w, &g, pad_value).unwrap();
                out.data().iter().zip(go.data()).map(|(o, g)| o * g).sum()
            };
            let h = 1e-3;
            // Spot-check a spread of coordinates in both gradients.
            for idx in [0usize, 7, 31, 97] {
                let idx = idx % a.numel();
                let mut ap = a.clone();
                ap.data_mut()[idx] += h;
                let mut am = a.clone();
                am.data_mut()[idx] -= h;
                let fd = (loss(&ap, &w) - loss(&am, &w)) / (2.0 * h);
                let an = ga.data()[idx];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-4);
                assert!(rel < 1e-4, "grad_a[{idx}]: analytic {an}, fd {fd}");
            }
            for idx in [0usize, 5, 23, 53] {
                let idx = idx % w.numel();
                let mut wp = w.clone();
                wp.data_mut()[idx] += h;
                let mut wm = w.clone();
                wm.data_mut()[idx] -= h;
                let fd = (loss(&a, &wp) - loss(&a, &wm)) / (2.0 * h);
                let an = gw.data()[idx];
                let rel = (fd - an).abs() / an.abs().max(fd.abs()).max(1e-4);
                assert!(rel < 1e-4, "grad_w[{idx}]: analytic {an}, fd {fd}");
            }
        }
    }

    #[test]
    fn results_identical_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = ConvGeometry::square(4, 6, 3, 1, 1);
        let a = random_real(&mut rng, &[3, 4, 9, 9]);
        let w = random_real(&mut rng, &[6, 4, 3, 3]);
        let go = random_real(&mut rng, &[3, 6, 9, 9]);
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| {
                let out = float_conv2d(&a, &w, &g, 0.0).unwrap();
                let (ga, gw) = float_conv2d_backward(&go, &a, &w, &g, 0.0).unwrap();
                (out, ga, gw)
            })
        };
        let (o1, ga1, gw1) = run(1);
        let (o4, ga4, gw4) = run(4);
        assert_eq!(o1.data(), o4.data());
        assert_eq!(ga1.data(), ga4.data());
        assert_eq!(gw1.data(), gw4.data());
    }
}
