//! Stride-1 "same" 3D convolution and ReLU with explicit backward passes.
//!
//! Tensors are `(channels, depth, height, width)` in standard layout;
//! kernels are odd-sided cubes flattened as `[out][in][dz][dy][dx]`.
//! The inner loops run over contiguous x-rows so the hot paths are
//! plain AXPY/dot kernels.

use ndarray::Array4;

/// Valid output range along one axis for a kernel offset `delta` with
/// padding `pad`: `out + delta - pad` must fall inside `[0, len)`.
#[inline]
fn axis_range(len: usize, delta: usize, pad: usize) -> (usize, usize) {
    let lo = (pad as isize - delta as isize).max(0) as usize;
    let hi = (len as isize + pad as isize - delta as isize).min(len as isize) as usize;
    (lo, hi.max(lo))
}

/// Forward convolution: `out[o] = bias[o] + Σ_c w[o,c] * in[c]` with zero
/// padding of `k/2` on every side. `weight.len()` must equal
/// `c_out * c_in * k³`.
pub fn conv3d_forward(
    input: &Array4<f64>,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
    k: usize,
) -> Array4<f64> {
    let (c_in, d, h, w) = input.dim();
    debug_assert_eq!(weight.len(), c_out * c_in * k * k * k);
    debug_assert_eq!(bias.len(), c_out);
    let pad = k / 2;
    let plane = h * w;
    let vol = d * plane;
    let input_flat = input.as_slice().expect("standard layout");
    let mut out = Array4::<f64>::zeros((c_out, d, h, w));
    let out_flat = out.as_slice_mut().expect("standard layout");
    for o in 0..c_out {
        out_flat[o * vol..(o + 1) * vol].fill(bias[o]);
        for c in 0..c_in {
            let in_ch = &input_flat[c * vol..(c + 1) * vol];
            for dz in 0..k {
                let (zlo, zhi) = axis_range(d, dz, pad);
                for dy in 0..k {
                    let (ylo, yhi) = axis_range(h, dy, pad);
                    for dx in 0..k {
                        let (xlo, xhi) = axis_range(w, dx, pad);
                        if xhi == xlo {
                            continue;
                        }
                        let wv = weight[((o * c_in + c) * k + dz) * k * k + dy * k + dx];
                        let row_len = xhi - xlo;
                        let in_x = xlo + dx - pad;
                        for z in zlo..zhi {
                            let zi = z + dz - pad;
                            for y in ylo..yhi {
                                let yi = y + dy - pad;
                                let ob = o * vol + z * plane + y * w + xlo;
                                let ib = zi * plane + yi * w + in_x;
                                let src = &in_ch[ib..ib + row_len];
                                let dst = &mut out_flat[ob..ob + row_len];
                                for i in 0..row_len {
                                    dst[i] += wv * src[i];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward convolution: accumulates `d_weight`/`d_bias` in place and
/// returns the gradient w.r.t. the input.
pub fn conv3d_backward(
    input: &Array4<f64>,
    weight: &[f64],
    d_out: &Array4<f64>,
    k: usize,
    d_weight: &mut [f64],
    d_bias: &mut [f64],
) -> Array4<f64> {
    let (c_in, d, h, w) = input.dim();
    let (c_out, od, oh, ow) = d_out.dim();
    debug_assert_eq!((od, oh, ow), (d, h, w));
    debug_assert_eq!(weight.len(), c_out * c_in * k * k * k);
    debug_assert_eq!(d_weight.len(), weight.len());
    debug_assert_eq!(d_bias.len(), c_out);
    let pad = k / 2;
    let plane = h * w;
    let vol = d * plane;
    let input_flat = input.as_slice().expect("standard layout");
    let d_out_flat = d_out.as_slice().expect("standard layout");
    let mut d_input = Array4::<f64>::zeros((c_in, d, h, w));
    let d_input_flat = d_input.as_slice_mut().expect("standard layout");
    for o in 0..c_out {
        let dout_ch = &d_out_flat[o * vol..(o + 1) * vol];
        d_bias[o] += dout_ch.iter().sum::<f64>();
        for c in 0..c_in {
            let in_ch = &input_flat[c * vol..(c + 1) * vol];
            let din_ch = &mut d_input_flat[c * vol..(c + 1) * vol];
            for dz in 0..k {
                let (zlo, zhi) = axis_range(d, dz, pad);
                for dy in 0..k {
                    let (ylo, yhi) = axis_range(h, dy, pad);
                    for dx in 0..k {
                        let (xlo, xhi) = axis_range(w, dx, pad);
                        if xhi == xlo {
                            continue;
                        }
                        let widx = ((o * c_in + c) * k + dz) * k * k + dy * k + dx;
                        let wv = weight[widx];
                        let row_len = xhi - xlo;
                        let in_x = xlo + dx - pad;
                        let mut wacc = 0.0;
                        for z in zlo..zhi {
                            let zi = z + dz - pad;
                            for y in ylo..yhi {
                                let yi = y + dy - pad;
                                let ob = z * plane + y * w + xlo;
                                let ib = zi * plane + yi * w + in_x;
                                let dout_row = &dout_ch[ob..ob + row_len];
                                let in_row = &in_ch[ib..ib + row_len];
                                let din_row = &mut din_ch[ib..ib + row_len];
                                for i in 0..row_len {
                                    wacc += dout_row[i] * in_row[i];
                                    din_row[i] += wv * dout_row[i];
                                }
                            }
                        }
                        d_weight[widx] += wacc;
                    }
                }
            }
        }
    }
    d_input
}

pub fn relu_forward(x: &Array4<f64>) -> Array4<f64> {
    x.mapv(|v| v.max(0.0))
}

/// Gradient through ReLU given the pre-activation values.
pub fn relu_backward(pre: &Array4<f64>, d_post: &Array4<f64>) -> Array4<f64> {
    let mut out = d_post.clone();
    out.zip_mut_with(pre, |g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    out
}
