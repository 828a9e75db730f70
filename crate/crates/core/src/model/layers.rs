//! Forward and backward kernels. Activations are batch-major `[B, C, H, W]`
//! buffers in row-major order.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        in_h: usize,
        in_w: usize,
    ) -> Option<Self> {
        if stride == 0 || kernel == 0 || in_h + 2 * padding < kernel || in_w + 2 * padding < kernel
        {
            return None;
        }
        let out_h = (in_h + 2 * padding - kernel) / stride + 1;
        let out_w = (in_w + 2 * padding - kernel) / stride + 1;
        Some(Self {
            cin,
            cout,
            kernel,
            stride,
            padding,
            in_h,
            in_w,
            out_h,
            out_w,
        })
    }

    /// Range of output columns whose input column `o*stride + k - padding`
    /// falls inside the image.
    #[inline]
    fn valid_range(&self, k: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        // smallest o with o*s + k >= p
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        // largest o with o*s + k - p <= in_len - 1
        let hi_excl = if k >= in_len + p {
            0
        } else {
            ((in_len - 1 + p - k) / s + 1).min(out_len)
        };
        (lo, hi_excl.max(lo))
    }
}

pub(crate) fn conv_forward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    out: &mut [f64],
) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let kk = g.kernel * g.kernel;
    for b in 0..batch {
        let x = &input[b * g.cin * in_plane..(b + 1) * g.cin * in_plane];
        for co in 0..g.cout {
            let y = &mut out[(b * g.cout + co) * out_plane..(b * g.cout + co + 1) * out_plane];
            let b0 = bias.map_or(0.0, |bb| bb[co]);
            y.iter_mut().for_each(|v| *v = b0);
            for ci in 0..g.cin {
                let xp = &x[ci * in_plane..(ci + 1) * in_plane];
                let wk = &weight[(co * g.cin + ci) * kk..(co * g.cin + ci + 1) * kk];
                for ky in 0..g.kernel {
                    let (oy0, oy1) = g.valid_range(ky, g.out_h, g.in_h);
                    for kx in 0..g.kernel {
                        let w = wk[ky * g.kernel + kx];
                        let (ox0, ox1) = g.valid_range(kx, g.out_w, g.in_w);
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let yrow = &mut y[oy * g.out_w..(oy + 1) * g.out_w];
                            let xrow = &xp[iy * g.in_w..(iy + 1) * g.in_w];
                            for ox in ox0..ox1 {
                                yrow[ox] += w * xrow[ox * g.stride + kx - g.padding];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight/bias gradients (when requested) and writes the input
/// gradient into `d_input`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    mut d_weight: Option<&mut [f64]>,
    mut d_bias: Option<&mut [f64]>,
    d_input: Option<&mut [f64]>,
) {
    let in_plane = g.in_h * g.in_w;
    let out_plane = g.out_h * g.out_w;
    let kk = g.kernel * g.kernel;
    let mut d_input = d_input;
    if let Some(dx) = d_input.as_deref_mut() {
        dx.iter_mut().for_each(|v| *v = 0.0);
    }
    for b in 0..batch {
        for co in 0..g.cout {
            let dy = &d_out[(b * g.cout + co) * out_plane..(b * g.cout + co + 1) * out_plane];
            if let Some(db) = d_bias.as_deref_mut() {
                db[co] += dy.iter().sum::<f64>();
            }
            for ci in 0..g.cin {
                let base_in = (b * g.cin + ci) * in_plane;
                let xp = &input[base_in..base_in + in_plane];
                let widx = (co * g.cin + ci) * kk;
                for ky in 0..g.kernel {
                    let (oy0, oy1) = g.valid_range(ky, g.out_h, g.in_h);
                    for kx in 0..g.kernel {
                        let (ox0, ox1) = g.valid_range(kx, g.out_w, g.in_w);
                        let w = weight[widx + ky * g.kernel + kx];
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.padding;
                            let dyrow = &dy[oy * g.out_w..(oy + 1) * g.out_w];
                            let xrow = &xp[iy * g.in_w..(iy + 1) * g.in_w];
                            for ox in ox0..ox1 {
                                acc += dyrow[ox] * xrow[ox * g.stride + kx - g.padding];
                            }
                            if let Some(dx) = d_input.as_deref_mut() {
                                let dxrow = &mut dx[base_in + iy * g.in_w..base_in + (iy + 1) * g.in_w];
                                for ox in ox0..ox1 {
                                    dxrow[ox * g.stride + kx - g.padding] += w * dyrow[ox];
                                }
                            }
                        }
                        if let Some(dw) = d_weight.as_deref_mut() {
                            dw[widx + ky * g.kernel + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn linear_forward(
    batch: usize,
    inp: usize,
    outp: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    for b in 0..batch {
        let x = &input[b * inp..(b + 1) * inp];
        for o in 0..outp {
            let w = &weight[o * inp..(o + 1) * inp];
            out[b * outp + o] = bias[o] + w.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn linear_backward(
    batch: usize,
    inp: usize,
    outp: usize,
    input: &[f64],
    weight: &[f64],
    d_out: &[f64],
    mut d_weight: Option<&mut [f64]>,
    mut d_bias: Option<&mut [f64]>,
    d_input: Option<&mut [f64]>,
) {
    let mut d_input = d_input;
    if let Some(dx) = d_input.as_deref_mut() {
        dx.iter_mut().for_each(|v| *v = 0.0);
    }
    for b in 0..batch {
        let x = &input[b * inp..(b + 1) * inp];
        for o in 0..outp {
            let dy = d_out[b * outp + o];
            if dy == 0.0 {
                continue;
            }
            if let Some(db) = d_bias.as_deref_mut() {
                db[o] += dy;
            }
            if let Some(dw) = d_weight.as_deref_mut() {
                for (dwi, xi) in dw[o * inp..(o + 1) * inp].iter_mut().zip(x) {
                    *dwi += dy * xi;
                }
            }
            if let Some(dx) = d_input.as_deref_mut() {
                let w = &weight[o * inp..(o + 1) * inp];
                for (dxi, wi) in dx[b * inp..(b + 1) * inp].iter_mut().zip(w) {
                    *dxi += dy * wi;
                }
            }
        }
    }
}

/// Saved quantities for the normalization backward pass.
#[derive(Debug, Clone)]
pub(crate) struct NormCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub used_batch: bool,
    pub count: usize,
}

pub(crate) const NORM_EPS: f64 = 1e-5;

#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_forward(
    batch: usize,
    channels: usize,
    spatial: usize,
    input: &[f64],
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    use_batch: bool,
    out: &mut [f64],
) -> NormCache {
    let count = batch * spatial;
    let mut batch_mean = vec![0.0; channels];
    let mut batch_var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            s += input[off..off + spatial].iter().sum::<f64>();
        }
        let mean = s / count as f64;
        let mut v = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            v += input[off..off + spatial]
                .iter()
                .map(|x| (x - mean) * (x - mean))
                .sum::<f64>();
        }
        batch_mean[c] = mean;
        batch_var[c] = v / count as f64;
    }
    let mut inv_std = vec![0.0; channels];
    let mut xhat = vec![0.0; input.len()];
    for c in 0..channels {
        let (mean, var) = if use_batch {
            (batch_mean[c], batch_var[c])
        } else {
            (running_mean[c], running_var[c])
        };
        let is = 1.0 / (var + NORM_EPS).sqrt();
        inv_std[c] = is;
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                let xh = (input[i] - mean) * is;
                xhat[i] = xh;
                out[i] = gamma[c] * xh + beta[c];
            }
        }
    }
    NormCache {
        xhat,
        inv_std,
        batch_mean,
        batch_var,
        used_batch: use_batch,
        count,
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn norm_backward(
    batch: usize,
    channels: usize,
    spatial: usize,
    cache: &NormCache,
    gamma: &[f64],
    d_out: &[f64],
    mut d_gamma: Option<&mut [f64]>,
    mut d_beta: Option<&mut [f64]>,
    d_input: &mut [f64],
) {
    let n = cache.count as f64;
    for c in 0..channels {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                sum_dy += d_out[i];
                sum_dy_xhat += d_out[i] * cache.xhat[i];
            }
        }
        if let Some(dg) = d_gamma.as_deref_mut() {
            dg[c] += sum_dy_xhat;
        }
        if let Some(db) = d_beta.as_deref_mut() {
            db[c] += sum_dy;
        }
        let g = gamma[c];
        let is = cache.inv_std[c];
        for b in 0..batch {
            let off = (b * channels + c) * spatial;
            for i in off..off + spatial {
                d_input[i] = if cache.used_batch {
                    g * is * (d_out[i] - sum_dy / n - cache.xhat[i] * sum_dy_xhat / n)
                } else {
                    g * is * d_out[i]
                };
            }
        }
    }
}

pub(crate) fn pool_forward(batch: usize, channels: usize, spatial: usize, input: &[f64], out: &mut [f64]) {
    for bc in 0..batch * channels {
        out[bc] = input[bc * spatial..(bc + 1) * spatial].iter().sum::<f64>() / spatial as f64;
    }
}

pub(crate) fn pool_backward(batch: usize, channels: usize, spatial: usize, d_out: &[f64], d_input: &mut [f64]) {
    for bc in 0..batch * channels {
        let g = d_out[bc] / spatial as f64;
        d_input[bc * spatial..(bc + 1) * spatial]
            .iter_mut()
            .for_each(|v| *v = g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; g.cout * g.out_h * g.out_w];
        for co in 0..g.cout {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    let mut s = 0.0;
                    for ci in 0..g.cin {
                        for ky in 0..g.kernel {
                            for kx in 0..g.kernel {
                                let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                    continue;
                                }
                                s += w[((co * g.cin + ci) * g.kernel + ky) * g.kernel + kx]
                                    * x[(ci * g.in_h + iy as usize) * g.in_w + ix as usize];
                            }
                        }
                    }
                    y[(co * g.out_h + oy) * g.out_w + ox] = s;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive_for_strides_and_padding() {
        for &(stride, padding, k) in &[(1, 1, 3), (2, 1, 3), (2, 0, 3), (1, 0, 1), (3, 2, 3)] {
            let g = ConvGeom::new(2, 3, k, stride, padding, 7, 6).unwrap();
            let x: Vec<f64> = (0..2 * 42).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.1 - 0.3).collect();
            let mut y = vec![0.0; 3 * g.out_h * g.out_w];
            conv_forward(&g, 1, &x, &w, None, &mut y);
            let expect = naive_conv(&g, &x, &w);
            for (a, b) in y.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {padding}");
            }
        }
    }
}
