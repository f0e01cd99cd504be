//! Convolution primitives with explicit backward passes.
//!
//! All kernels work on one sample at a time. Weight layout for a dense
//! convolution is `[out][in][ky][kx]`; for a depthwise convolution it is
//! `[channel][ky][kx]`.

use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
        }
    }

    /// Output length along one axis, or `None` if the kernel does not fit.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.pad;
        if padded < self.kernel || self.stride == 0 {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    /// Range of output indices whose input tap `o * stride + k - pad` lands in `[0, len)`.
    #[inline]
    fn valid_range(&self, k: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o * s + off >= 0  and  o * s + off <= in_len - 1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = in_len as isize - 1 - off;
        let hi = if hi_num < 0 { -1 } else { hi_num / s };
        let hi = hi.min(out_len as isize - 1);
        if hi < lo {
            (0, 0)
        } else {
            (lo as usize, hi as usize + 1)
        }
    }
}

/// Dense 2-D convolution.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &[f64],
    bias: &[f64],
    out_channels: usize,
    geom: ConvGeometry,
) -> Tensor {
    let (cin, ih, iw) = input.shape();
    let k = geom.kernel;
    let oh = geom.out_len(ih).expect("kernel larger than input");
    let ow = geom.out_len(iw).expect("kernel larger than input");
    debug_assert_eq!(weight.len(), out_channels * cin * k * k);
    let mut out = Tensor::zeros(out_channels, oh, ow);
    let s = geom.stride;
    for o in 0..out_channels {
        let out_plane = out.plane_mut(o);
        out_plane.fill(bias[o]);
        for c in 0..cin {
            let in_plane = input.plane(c);
            let wbase = (o * cin + c) * k * k;
            for ky in 0..k {
                let (y0, y1) = geom.valid_range(ky, ih, oh);
                for kx in 0..k {
                    let wv = weight[wbase + ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = geom.valid_range(kx, iw, ow);
                    for oy in y0..y1 {
                        let iy = oy * s + ky - geom.pad;
                        let in_row = &in_plane[iy * iw..(iy + 1) * iw];
                        let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = x0 + kx - geom.pad;
                            let src = &in_row[ix0..ix0 + (x1 - x0)];
                            for (dst, &v) in out_row[x0..x1].iter_mut().zip(src) {
                                *dst += wv * v;
                            }
                        } else {
                            for ox in x0..x1 {
                                out_row[ox] += wv * in_row[ox * s + kx - geom.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv2d_forward`]. Accumulates into `grad_weight` and
/// `grad_bias`; returns the gradient with respect to the input when requested.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    geom: ConvGeometry,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    need_input_grad: bool,
) -> Option<Tensor> {
    let (cin, ih, iw) = input.shape();
    let (cout, oh, ow) = grad_out.shape();
    let k = geom.kernel;
    let s = geom.stride;
    let mut grad_in = need_input_grad.then(|| Tensor::zeros(cin, ih, iw));
    for o in 0..cout {
        let g_plane = grad_out.plane(o);
        grad_bias[o] += g_plane.iter().sum::<f64>();
        for c in 0..cin {
            let in_plane = input.plane(c);
            let wbase = (o * cin + c) * k * k;
            for ky in 0..k {
                let (y0, y1) = geom.valid_range(ky, ih, oh);
                for kx in 0..k {
                    let wv = weight[wbase + ky * k + kx];
                    let (x0, x1) = geom.valid_range(kx, iw, ow);
                    let mut gw = 0.0;
                    for oy in y0..y1 {
                        let iy = oy * s + ky - geom.pad;
                        let in_row = &in_plane[iy * iw..(iy + 1) * iw];
                        let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                        if s == 1 {
                            let ix0 = x0 + kx - geom.pad;
                            let src = &in_row[ix0..ix0 + (x1 - x0)];
                            for (&g, &v) in g_row[x0..x1].iter().zip(src) {
                                gw += g * v;
                            }
                        } else {
                            for ox in x0..x1 {
                                gw += g_row[ox] * in_row[ox * s + kx - geom.pad];
                            }
                        }
                    }
                    grad_weight[wbase + ky * k + kx] += gw;
                    if let Some(gi) = grad_in.as_mut() {
                        let gi_plane = gi.plane_mut(c);
                        for oy in y0..y1 {
                            let iy = oy * s + ky - geom.pad;
                            let g_row = &g_plane[oy * ow..(oy + 1) * ow];
                            let gi_row = &mut gi_plane[iy * iw..(iy + 1) * iw];
                            if s == 1 {
                                let ix0 = x0 + kx - geom.pad;
                                let dst = &mut gi_row[ix0..ix0 + (x1 - x0)];
                                for (d, &g) in dst.iter_mut().zip(&g_row[x0..x1]) {
                                    *d += wv * g;
                                }
                            } else {
                                for ox in x0..x1 {
                                    gi_row[ox * s + kx - geom.pad] += wv * g_row[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Depthwise (per-channel) 2-D convolution.
pub fn depthwise_forward(input: &Tensor, weight: &[f64], bias: &[f64], geom: ConvGeometry) -> Tensor {
    let (c, ih, iw) = input.shape();
    let k = geom.kernel;
    let oh = geom.out_len(ih).expect("kernel larger than input");
    let ow = geom.out_len(iw).expect("kernel larger than input");
    let s = geom.stride;
    let mut out = Tensor::zeros(c, oh, ow);
    for ch in 0..c {
        let in_plane = input.plane(ch);
        let out_plane = out.plane_mut(ch);
        out_plane.fill(bias[ch]);
        for ky in 0..k {
            let (y0, y1) = geom.valid_range(ky, ih, oh);
            for kx in 0..k {
                let wv = weight[ch * k * k + ky * k + kx];
                let (x0, x1) = geom.valid_range(kx, iw, ow);
                for oy in y0..y1 {
                    let iy = oy * s + ky - geom.pad;
                    for ox in x0..x1 {
                        out_plane[oy * ow + ox] += wv * in_plane[iy * iw + ox * s + kx - geom.pad];
                    }
                }
            }
        }
    }
    out
}

pub fn depthwise_backward(
    input: &Tensor,
    weight: &[f64],
    grad_out: &Tensor,
    geom: ConvGeometry,
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
) -> Tensor {
    let (c, ih, iw) = input.shape();
    let (_, oh, ow) = grad_out.shape();
    let k = geom.kernel;
    let s = geom.stride;
    let mut grad_in = Tensor::zeros(c, ih, iw);
    for ch in 0..c {
        let in_plane = input.plane(ch);
        let g_plane = grad_out.plane(ch);
        grad_bias[ch] += g_plane.iter().sum::<f64>();
        let gi_plane = grad_in.plane_mut(ch);
        for ky in 0..k {
            let (y0, y1) = geom.valid_range(ky, ih, oh);
            for kx in 0..k {
                let wi = ch * k * k + ky * k + kx;
                let wv = weight[wi];
                let (x0, x1) = geom.valid_range(kx, iw, ow);
                let mut gw = 0.0;
                for oy in y0..y1 {
                    let iy = oy * s + ky - geom.pad;
                    for ox in x0..x1 {
                        let ii = iy * iw + ox * s + kx - geom.pad;
                        let g = g_plane[oy * ow + ox];
                        gw += g * in_plane[ii];
                        gi_plane[ii] += wv * g;
                    }
                }
                grad_weight[wi] += gw;
            }
        }
    }
    grad_in
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    for v in &mut out.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Gradient through ReLU given the layer's output.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut g = grad_out.clone();
    for (gv, &o) in g.data.iter_mut().zip(&output.data) {
        if o <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}
