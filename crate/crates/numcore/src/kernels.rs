//! Forward and backward kernels on raw row-major buffers.
//!
//! Everything here is shape-checked by the caller (`graph`); the kernels
//! only assert lengths in debug builds.

/// `c = beta * c + op(a) * op(b)` with `op(a)` of size m×k and `op(b)` of size k×n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slices are sized exactly m×k, k×n and m×n with the strides above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfold one sample `[C, H, W]` into `[C*k*k, Ho*Wo]`.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *o = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Fold `[C*k*k, Ho*Wo]` back into `[C, H, W]`, accumulating.
fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation. `weight` is `[Co, C, k, k]`, output `[N, Co, Ho, Wo]`.
pub fn conv2d_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    out_channels: usize,
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let hw_in = g.channels * g.height * g.width;
    let ckk = g.channels * g.kernel * g.kernel;
    let plane = ho * wo;
    let mut out = vec![0.0; n * out_channels * plane];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; ckk * plane]
    };
    for s in 0..n {
        let xs = &x[s * hw_in..(s + 1) * hw_in];
        let ys = &mut out[s * out_channels * plane..(s + 1) * out_channels * plane];
        if let Some(b) = bias {
            for (co, row) in ys.chunks_mut(plane).enumerate() {
                row.fill(b[co]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        if g.is_pointwise() {
            gemm(out_channels, ckk, plane, weight, false, xs, false, beta, ys);
        } else {
            im2col(xs, g, &mut cols);
            gemm(out_channels, ckk, plane, weight, false, &cols, false, beta, ys);
        }
    }
    out
}

/// Returns (dx, dweight, dbias).
pub fn conv2d_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    out_channels: usize,
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let hw_in = g.channels * g.height * g.width;
    let ckk = g.channels * g.kernel * g.kernel;
    let plane = ho * wo;
    let mut dw = vec![0.0; out_channels * ckk];
    let mut db = vec![0.0; out_channels];
    let mut dx = need_dx.then(|| vec![0.0; n * hw_in]);
    let mut cols = vec![0.0; if g.is_pointwise() { 0 } else { ckk * plane }];
    let mut dcols = vec![0.0; if g.is_pointwise() { 0 } else { ckk * plane }];
    for s in 0..n {
        let xs = &x[s * hw_in..(s + 1) * hw_in];
        let dys = &dy[s * out_channels * plane..(s + 1) * out_channels * plane];
        for (co, row) in dys.chunks(plane).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
        if g.is_pointwise() {
            gemm(out_channels, plane, ckk, dys, false, xs, true, 1.0, &mut dw);
            if let Some(dx) = dx.as_mut() {
                let dxs = &mut dx[s * hw_in..(s + 1) * hw_in];
                gemm(ckk, out_channels, plane, weight, true, dys, false, 0.0, dxs);
            }
        } else {
            im2col(xs, g, &mut cols);
            gemm(out_channels, plane, ckk, dys, false, &cols, true, 1.0, &mut dw);
            if let Some(dx) = dx.as_mut() {
                gemm(ckk, out_channels, plane, weight, true, dys, false, 0.0, &mut dcols);
                col2im(&dcols, g, &mut dx[s * hw_in..(s + 1) * hw_in]);
            }
        }
    }
    (dx, dw, db)
}

/// Per-channel convolution; `weight` is `[C, 1, k, k]`.
pub fn depthwise_forward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let (h, w, k) = (g.height, g.width, g.kernel);
    let mut out = vec![0.0; n * g.channels * ho * wo];
    for s in 0..n {
        for c in 0..g.channels {
            let plane = &x[(s * g.channels + c) * h * w..(s * g.channels + c + 1) * h * w];
            let dst = &mut out[(s * g.channels + c) * ho * wo..(s * g.channels + c + 1) * ho * wo];
            dst.fill(bias.map_or(0.0, |b| b[c]));
            let kern = &weight[c * k * k..(c + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = kern[ky * k + kx];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, o) in row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < w as isize {
                                *o += wv * src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (dx, dweight, dbias).
pub fn depthwise_backward(
    x: &[f64],
    n: usize,
    g: &ConvGeom,
    weight: &[f64],
    dy: &[f64],
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let (h, w, k) = (g.height, g.width, g.kernel);
    let mut dw = vec![0.0; g.channels * k * k];
    let mut db = vec![0.0; g.channels];
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    for s in 0..n {
        for c in 0..g.channels {
            let base_in = (s * g.channels + c) * h * w;
            let base_out = (s * g.channels + c) * ho * wo;
            let plane = &x[base_in..base_in + h * w];
            let dys = &dy[base_out..base_out + ho * wo];
            db[c] += dys.iter().sum::<f64>();
            for ky in 0..k {
                for kx in 0..k {
                    let wv = weight[c * k * k + ky * k + kx];
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_in = iy as usize * w;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let d = dys[oy * wo + ox];
                            acc += d * plane[row_in + ix as usize];
                            if let Some(dx) = dx.as_mut() {
                                dx[base_in + row_in + ix as usize] += wv * d;
                            }
                        }
                    }
                    dw[c * k * k + ky * k + kx] += acc;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Layout of a tensor seen as `[N, C, S]` for per-channel normalization.
#[derive(Clone, Copy, Debug)]
pub struct ChannelLayout {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl ChannelLayout {
    /// Visit every element of channel `c` as a flat index.
    fn for_channel(&self, c: usize, mut f: impl FnMut(usize)) {
        for s in 0..self.batch {
            let base = (s * self.channels + c) * self.spatial;
            for i in base..base + self.spatial {
                f(i);
            }
        }
    }

    pub fn per_channel_count(&self) -> usize {
        self.batch * self.spatial
    }
}

pub struct BnForward {
    pub y: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    /// Batch mean and biased variance (train mode only).
    pub batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

pub fn batch_norm_forward(
    x: &[f64],
    layout: ChannelLayout,
    gamma: &[f64],
    beta: &[f64],
    stats: Option<(&[f64], &[f64])>,
    eps: f64,
) -> BnForward {
    let m = layout.per_channel_count() as f64;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; layout.channels];
    let mut batch_mean = vec![0.0; layout.channels];
    let mut batch_var = vec![0.0; layout.channels];
    for c in 0..layout.channels {
        let (mean, var) = match stats {
            Some((rm, rv)) => (rm[c], rv[c]),
            None => {
                let mut sum = 0.0;
                layout.for_channel(c, |i| sum += x[i]);
                let mean = sum / m;
                let mut sq = 0.0;
                layout.for_channel(c, |i| sq += (x[i] - mean) * (x[i] - mean));
                (mean, sq / m)
            }
        };
        batch_mean[c] = mean;
        batch_var[c] = var;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[c] = is;
        layout.for_channel(c, |i| {
            let h = (x[i] - mean) * is;
            xhat[i] = h;
            y[i] = gamma[c] * h + beta[c];
        });
    }
    BnForward {
        y,
        xhat,
        inv_std,
        batch_stats: stats.is_none().then_some((batch_mean, batch_var)),
    }
}

/// Returns (dx, dgamma, dbeta). `train` selects batch-statistics backward.
pub fn batch_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    layout: ChannelLayout,
    train: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let m = layout.per_channel_count() as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; layout.channels];
    let mut dbeta = vec![0.0; layout.channels];
    for c in 0..layout.channels {
        let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
        layout.for_channel(c, |i| {
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * xhat[i];
        });
        dgamma[c] = sum_dy_xhat;
        dbeta[c] = sum_dy;
        let scale = gamma[c] * inv_std[c];
        if train {
            layout.for_channel(c, |i| {
                dx[i] = scale * (dy[i] - sum_dy / m - xhat[i] * sum_dy_xhat / m);
            });
        } else {
            layout.for_channel(c, |i| dx[i] = scale * dy[i]);
        }
    }
    (dx, dgamma, dbeta)
}

/// Overflow-safe softplus: ln(1 + e^z), returning z itself above 20.
pub fn softplus(z: f64) -> f64 {
    if z > 20.0 {
        z
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn mish(z: f64) -> f64 {
    z * softplus(z).tanh()
}

/// d/dz [z tanh(softplus(z))].
pub fn mish_grad(z: f64) -> f64 {
    let t = softplus(z).tanh();
    t + z * (1.0 - t * t) * sigmoid(z)
}
