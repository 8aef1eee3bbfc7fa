//! Pure f64 kernels behind the tape ops. All loops run in a fixed
//! sequential order so repeated runs are bitwise identical.

/// c[m×n] = a[m×k] · b[k×n]
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let bt = &b[t * n..(t + 1) * n];
            for j in 0..n {
                ci[j] += av * bt[j];
            }
        }
    }
    c
}

/// y[cols×rows] = xᵀ for row-major x[rows×cols]
pub(crate) fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            y[c * rows + r] = x[r * cols + c];
        }
    }
    y
}

/// Output spatial extent of a 1-D convolution.
pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Valid kernel index range for one output coordinate: taps ky with
/// lo <= ky < hi land inside the input.
#[inline]
fn tap_range(base: usize, extent: usize, kernel: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(base);
    let hi = (extent + padding).saturating_sub(base).min(kernel);
    (lo, hi)
}

/// Depthwise conv forward: y[c][oh][ow] = Σ_{kh,kw} x[c][ih][iw]·k[c][kh][kw]
pub(crate) fn dw_conv_forward(
    x: &[f64],
    kern: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let kc = &kern[ch * kh * kw..(ch + 1) * kh * kw];
        let yc = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for oy in 0..oh {
            let base_y = oy * stride;
            let (ky_lo, ky_hi) = tap_range(base_y, h, kh, padding);
            for ox in 0..ow {
                let base_x = ox * stride;
                let (kx_lo, kx_hi) = tap_range(base_x, w, kw, padding);
                let mut acc = 0.0;
                for ky in ky_lo..ky_hi {
                    let iy = base_y + ky - padding;
                    let xrow = &xc[iy * w + base_x + kx_lo - padding..];
                    let krow = &kc[ky * kw + kx_lo..];
                    for t in 0..kx_hi - kx_lo {
                        acc += xrow[t] * krow[t];
                    }
                }
                yc[oy * ow + ox] = acc;
            }
        }
    }
    y
}

/// Adjoints of `dw_conv_forward`: accumulates into dx and dk.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dw_conv_backward(
    dy: &[f64],
    x: &[f64],
    kern: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
    dk: &mut [f64],
) {
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let kc = &kern[ch * kh * kw..(ch + 1) * kh * kw];
        let dyc = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let dxc = &mut dx[ch * h * w..(ch + 1) * h * w];
        let dkc = &mut dk[ch * kh * kw..(ch + 1) * kh * kw];
        for oy in 0..oh {
            let base_y = oy * stride;
            let (ky_lo, ky_hi) = tap_range(base_y, h, kh, padding);
            for ox in 0..ow {
                let g = dyc[oy * ow + ox];
                if g == 0.0 {
                    continue;
                }
                let base_x = ox * stride;
                let (kx_lo, kx_hi) = tap_range(base_x, w, kw, padding);
                for ky in ky_lo..ky_hi {
                    let iy = base_y + ky - padding;
                    let row = iy * w + base_x + kx_lo - padding;
                    for t in 0..kx_hi - kx_lo {
                        dxc[row + t] += g * kc[ky * kw + kx_lo + t];
                        dkc[ky * kw + kx_lo + t] += g * xc[row + t];
                    }
                }
            }
        }
    }
}

/// Dense conv forward: y[co][oh][ow] = Σ_{ci,kh,kw} x[ci][ih][iw]·wgt[co][ci][kh][kw]
#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_conv_forward(
    x: &[f64],
    wgt: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let yc = &mut y[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xc = &x[ci * h * w..(ci + 1) * h * w];
            let kc = &wgt[(co * cin + ci) * kh * kw..(co * cin + ci + 1) * kh * kw];
            for oy in 0..oh {
                let base_y = oy * stride;
                let (ky_lo, ky_hi) = tap_range(base_y, h, kh, padding);
                for ox in 0..ow {
                    let base_x = ox * stride;
                    let (kx_lo, kx_hi) = tap_range(base_x, w, kw, padding);
                    let mut acc = 0.0;
                    for ky in ky_lo..ky_hi {
                        let iy = base_y + ky - padding;
                        let xrow = &xc[iy * w + base_x + kx_lo - padding..];
                        let krow = &kc[ky * kw + kx_lo..];
                        for t in 0..kx_hi - kx_lo {
                            acc += xrow[t] * krow[t];
                        }
                    }
                    yc[oy * ow + ox] += acc;
                }
            }
        }
    }
    y
}

/// Adjoints of `dense_conv_forward`: accumulates into dx and dw.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dense_conv_backward(
    dy: &[f64],
    x: &[f64],
    wgt: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    for co in 0..cout {
        let dyc = &dy[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xc = &x[ci * h * w..(ci + 1) * h * w];
            let dxc = &mut dx[ci * h * w..(ci + 1) * h * w];
            let kbase = (co * cin + ci) * kh * kw;
            for oy in 0..oh {
                let base_y = oy * stride;
                let (ky_lo, ky_hi) = tap_range(base_y, h, kh, padding);
                for ox in 0..ow {
                    let g = dyc[oy * ow + ox];
                    if g == 0.0 {
                        continue;
                    }
                    let base_x = ox * stride;
                    let (kx_lo, kx_hi) = tap_range(base_x, w, kw, padding);
                    for ky in ky_lo..ky_hi {
                        let iy = base_y + ky - padding;
                        let row = iy * w + base_x + kx_lo - padding;
                        let koff = kbase + ky * kw + kx_lo;
                        for t in 0..kx_hi - kx_lo {
                            dxc[row + t] += g * wgt[koff + t];
                            dw[koff + t] += g * xc[row + t];
                        }
                    }
                }
            }
        }
    }
}

/// Walks every lane along `axis` of a row-major tensor, calling `f` with the
/// base offset and stride of the lane. Lane order is fixed (outer, inner).
pub(crate) fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    for o in 0..outer {
        for i in 0..inner {
            f(o * extent * inner + i, inner);
        }
    }
    let _ = extent;
}

pub(crate) const GELU_COEFF: f64 = 0.044_715;

/// tanh-form GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let inner = k * (x + GELU_COEFF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let inner = k * (x + GELU_COEFF * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_COEFF * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Single-class contribution of the stable binary cross-entropy on logits:
/// max(ℓ,0) − ℓ·t + ln(1 + e^{−|ℓ|}).
pub(crate) fn bce_logit_term(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}
