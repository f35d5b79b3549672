//! Raw numeric kernels: convolution, pooling, upsampling, depth gradients,
//! normals normalization and the uniform quantizer. The autodiff graph and
//! the eager helpers both dispatch here, so forward/backward pairs live
//! side by side.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    Same,
    Valid,
}

struct ConvDims {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    pt: usize,
    pl: usize,
}

fn conv_shapes(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: Pad) -> Result<ConvDims> {
    if stride != 1 {
        return Err(Error::invalid("conv2d", format!("stride must be 1, got {stride}")));
    }
    if input.rank() != 4 || weight.rank() != 4 {
        return Err(Error::shape(
            "conv2d",
            format!(
                "input and weight must be rank 4, got {:?} and {:?}",
                input.shape(),
                weight.shape()
            ),
        ));
    }
    let (n, ci, h, w) = input.nchw();
    let (co, wci, kh, kw) = weight.nchw();
    if wci != ci {
        return Err(Error::shape(
            "conv2d",
            format!("input has {ci} channels but weight expects {wci}"),
        ));
    }
    if bias.shape() != [co] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {co} output channels", bias.shape()),
        ));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::invalid("conv2d", format!("kernel extents must be odd, got {kh}x{kw}")));
    }
    let (ho, wo, pt, pl) = match pad {
        Pad::Same => (h, w, (kh - 1) / 2, (kw - 1) / 2),
        Pad::Valid => {
            if h < kh || w < kw {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {h}x{w} smaller than kernel {kh}x{kw} with valid padding"),
                ));
            }
            (h - kh + 1, w - kw + 1, 0, 0)
        }
    };
    Ok(ConvDims { n, ci, h, w, co, kh, kw, ho, wo, pt, pl })
}

/// 2-D cross-correlation, stride 1, zero padding for `Same`.
pub fn conv2d_fwd(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, pad: Pad) -> Result<Tensor> {
    let ConvDims { n, ci, h, w, co, kh, kw, ho, wo, pt, pl } = conv_shapes(input, weight, bias, stride, pad)?;
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![0.0f32; n * co * ho * wo];

    for in_ in 0..n {
        for oc in 0..co {
            let obase = (in_ * co + oc) * ho * wo;
            out[obase..obase + ho * wo].fill(b[oc]);
            for ic in 0..ci {
                let ibase = (in_ * ci + ic) * h * w;
                let wbase = (oc * ci + ic) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[wbase + ky * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        // oy + ky - pt must land in 0..h
                        let oy_lo = pt.saturating_sub(ky);
                        let oy_hi = (h + pt - ky).min(ho);
                        let ox_lo = pl.saturating_sub(kx);
                        let ox_hi = (w + pl - kx).min(wo);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pt;
                            let irow = ibase + iy * w + kx - pl;
                            let orow = obase + oy * wo;
                            let (os, is) = (&mut out[orow + ox_lo..orow + ox_hi], &x[irow + ox_lo..irow + ox_hi]);
                            for (o, i) in os.iter_mut().zip(is.iter()) {
                                *o += wv * *i;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out)
}

/// Gradients of `conv2d_fwd` w.r.t. input, weight and bias.
pub fn conv2d_bwd(
    input: &Tensor,
    weight: &Tensor,
    gout: &Tensor,
    pad: Pad,
) -> (Tensor, Tensor, Tensor) {
    let (n, ci, h, w) = input.nchw();
    let (co, _, kh, kw) = weight.nchw();
    let (_, _, ho, wo) = gout.nchw();
    let (pt, pl) = match pad {
        Pad::Same => ((kh - 1) / 2, (kw - 1) / 2),
        Pad::Valid => (0, 0),
    };
    let x = input.data();
    let wt = weight.data();
    let g = gout.data();
    let mut gin = vec![0.0f32; x.len()];
    let mut gw = vec![0.0f32; wt.len()];
    let mut gb = vec![0.0f32; co];

    for in_ in 0..n {
        for oc in 0..co {
            let obase = (in_ * co + oc) * ho * wo;
            gb[oc] += g[obase..obase + ho * wo].iter().sum::<f32>();
            for ic in 0..ci {
                let ibase = (in_ * ci + ic) * h * w;
                let wbase = (oc * ci + ic) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wt[wbase + ky * kw + kx];
                        let mut acc = 0.0f32;
                        let oy_lo = pt.saturating_sub(ky);
                        let oy_hi = (h + pt - ky).min(ho);
                        let ox_lo = pl.saturating_sub(kx);
                        let ox_hi = (w + pl - kx).min(wo);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = oy + ky - pt;
                            let irow = ibase + iy * w + kx - pl;
                            let orow = obase + oy * wo;
                            let grow = &g[orow + ox_lo..orow + ox_hi];
                            let xrow = &x[irow + ox_lo..irow + ox_hi];
                            let ginrow = &mut gin[irow + ox_lo..irow + ox_hi];
                            for ((gi, gv), xv) in ginrow.iter_mut().zip(grow.iter()).zip(xrow.iter()) {
                                *gi += wv * *gv;
                                acc += *xv * *gv;
                            }
                        }
                        gw[wbase + ky * kw + kx] += acc;
                    }
                }
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), gin).unwrap(),
        Tensor::new(weight.shape().to_vec(), gw).unwrap(),
        Tensor::new(vec![co], gb).unwrap(),
    )
}

/// 2x2 max pooling, stride 2. Returns the pooled tensor plus flat argmax
/// indices into the input (ties resolved to the first element in row-major
/// order).
pub fn maxpool2_fwd(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (n, c, h, w) = input.nchw();
    if input.rank() != 4 {
        return Err(Error::shape("maxpool2", format!("expected rank 4, got {:?}", input.shape())));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid(
            "maxpool2",
            format!("spatial extents must be even, got {h}x{w}"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0f32; n * c * ho * wo];
    let mut arg = vec![0u32; out.len()];
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * ho * wo;
        for oy in 0..ho {
            for ox in 0..wo {
                let i00 = ibase + (2 * oy) * w + 2 * ox;
                let cand = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out[obase + oy * wo + ox] = x[best];
                arg[obase + oy * wo + ox] = best as u32;
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

pub fn maxpool2_bwd(input_shape: &[usize], gout: &Tensor, argmax: &[u32]) -> Tensor {
    let mut gin = Tensor::zeros(input_shape);
    let g = gout.data();
    let gi = gin.data_mut();
    for (k, &idx) in argmax.iter().enumerate() {
        gi[idx as usize] += g[k];
    }
    gin
}

/// Nearest-neighbor upsampling by 2: each pixel becomes a 2x2 block.
pub fn upsample2_fwd(input: &Tensor) -> Result<Tensor> {
    if input.rank() != 4 {
        return Err(Error::shape("upsample2", format!("expected rank 4, got {:?}", input.shape())));
    }
    let (n, c, h, w) = input.nchw();
    let x = input.data();
    let mut out = vec![0.0f32; n * c * 4 * h * w];
    let (ho, wo) = (2 * h, 2 * w);
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * ho * wo;
        for y in 0..h {
            for xx in 0..w {
                let v = x[ibase + y * w + xx];
                let o = obase + (2 * y) * wo + 2 * xx;
                out[o] = v;
                out[o + 1] = v;
                out[o + wo] = v;
                out[o + wo + 1] = v;
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

pub fn upsample2_bwd(input_shape: &[usize], gout: &Tensor) -> Tensor {
    let (n, c, ho, wo) = gout.nchw();
    let (h, w) = (ho / 2, wo / 2);
    let g = gout.data();
    let mut gin = Tensor::zeros(input_shape);
    let gi = gin.data_mut();
    for nc in 0..n * c {
        let ibase = nc * h * w;
        let obase = nc * ho * wo;
        for y in 0..h {
            for xx in 0..w {
                let o = obase + (2 * y) * wo + 2 * xx;
                gi[ibase + y * w + xx] += g[o] + g[o + 1] + g[o + wo] + g[o + wo + 1];
            }
        }
    }
    gin
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Centered difference with kernel [-1/2, 0, 1/2] and replicate padding at
/// the borders.
pub fn grad_fwd(input: &Tensor, axis: Axis) -> Tensor {
    let (n, c, h, w) = input.nchw();
    let x = input.data();
    let mut out = vec![0.0f32; x.len()];
    for nc in 0..n * c {
        let base = nc * h * w;
        match axis {
            Axis::X => {
                for y in 0..h {
                    let row = base + y * w;
                    for xx in 0..w {
                        let xr = x[row + (xx + 1).min(w - 1)];
                        let xl = x[row + xx.saturating_sub(1)];
                        out[row + xx] = 0.5 * (xr - xl);
                    }
                }
            }
            Axis::Y => {
                for y in 0..h {
                    let yd = (y + 1).min(h - 1);
                    let yu = y.saturating_sub(1);
                    for xx in 0..w {
                        out[base + y * w + xx] = 0.5 * (x[base + yd * w + xx] - x[base + yu * w + xx]);
                    }
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out).unwrap()
}

/// Transpose of `grad_fwd` (the operator is linear).
pub fn grad_bwd(gout: &Tensor, axis: Axis) -> Tensor {
    let (n, c, h, w) = gout.nchw();
    let g = gout.data();
    let mut gin = vec![0.0f32; g.len()];
    for nc in 0..n * c {
        let base = nc * h * w;
        match axis {
            Axis::X => {
                for y in 0..h {
                    let row = base + y * w;
                    for xx in 0..w {
                        let gv = g[row + xx];
                        gin[row + (xx + 1).min(w - 1)] += 0.5 * gv;
                        gin[row + xx.saturating_sub(1)] -= 0.5 * gv;
                    }
                }
            }
            Axis::Y => {
                for y in 0..h {
                    let yd = (y + 1).min(h - 1);
                    let yu = y.saturating_sub(1);
                    for xx in 0..w {
                        let gv = g[base + y * w + xx];
                        gin[base + yd * w + xx] += 0.5 * gv;
                        gin[base + yu * w + xx] -= 0.5 * gv;
                    }
                }
            }
        }
    }
    Tensor::new(gout.shape().to_vec(), gin).unwrap()
}

/// (gx, gy) -> unit normals (gx, gy, -1) / sqrt(gx^2 + gy^2 + 1), stacked as
/// 3 channels. The denominator is >= 1, so no division by zero is possible.
pub fn normals_fwd(gx: &Tensor, gy: &Tensor) -> Tensor {
    let (n, _, h, w) = gx.nchw();
    let a = gx.data();
    let b = gy.data();
    let hw = h * w;
    let mut out = vec![0.0f32; n * 3 * hw];
    for in_ in 0..n {
        for i in 0..hw {
            let av = a[in_ * hw + i];
            let bv = b[in_ * hw + i];
            let s = (av * av + bv * bv + 1.0).sqrt();
            let o = in_ * 3 * hw;
            out[o + i] = av / s;
            out[o + hw + i] = bv / s;
            out[o + 2 * hw + i] = -1.0 / s;
        }
    }
    Tensor::new(vec![n, 3, h, w], out).unwrap()
}

/// Jacobian-transpose product of `normals_fwd` w.r.t. (gx, gy).
pub fn normals_bwd(gx: &Tensor, gy: &Tensor, gout: &Tensor) -> (Tensor, Tensor) {
    let (n, _, h, w) = gx.nchw();
    let a = gx.data();
    let b = gy.data();
    let g = gout.data();
    let hw = h * w;
    let mut ga = vec![0.0f32; a.len()];
    let mut gb = vec![0.0f32; b.len()];
    for in_ in 0..n {
        for i in 0..hw {
            let av = a[in_ * hw + i] as f64;
            let bv = b[in_ * hw + i] as f64;
            let s2 = av * av + bv * bv + 1.0;
            let s3 = s2 * s2.sqrt();
            let o = in_ * 3 * hw;
            let g1 = g[o + i] as f64;
            let g2 = g[o + hw + i] as f64;
            let g3 = g[o + 2 * hw + i] as f64;
            ga[in_ * hw + i] = ((g1 * (bv * bv + 1.0) - g2 * av * bv + g3 * av) / s3) as f32;
            gb[in_ * hw + i] = ((-g1 * av * bv + g2 * (av * av + 1.0) + g3 * bv) / s3) as f32;
        }
    }
    (
        Tensor::new(gx.shape().to_vec(), ga).unwrap(),
        Tensor::new(gy.shape().to_vec(), gb).unwrap(),
    )
}

/// Symmetric uniform quantizer applied to one value:
/// sign(x) * min(d * floor(|x|/d + 1/2), x_max).
///
/// The arithmetic runs in f64 so that very fine lattices (b = 32) survive
/// the |x|/d division.
pub fn quantize_value(x: f32, d: f64, x_max: f64) -> f32 {
    let ax = (x as f64).abs();
    let q = (d * (ax / d + 0.5).floor()).min(x_max);
    (x.signum() as f64 * q) as f32
}

pub fn quantize_slice(x: &[f32], d: f64, x_max: f64, out: &mut [f32]) {
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o = quantize_value(v, d, x_max);
    }
}
