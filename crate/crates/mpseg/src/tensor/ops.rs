//! Forward and backward kernels for the operator set.
//!
//! Kernels are plain functions over flat row-major buffers so they can be
//! driven by the tape, by inference code, and by test oracles alike. All
//! backward kernels accumulate (`+=`) into their gradient buffers.

/// Dot product with four independent accumulators. Float sums cannot be
/// reassociated by the compiler, so the naive form is latency-bound; the
/// fixed four-lane order keeps results deterministic while letting the
/// lanes run in parallel.
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let mut acc = [0.0f64; 4];
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut rest = 0.0;
    for j in 4 * chunks..n {
        rest += a[j] * b[j];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// Sum with four independent accumulators (same rationale as [`dot4`]).
fn sum4(a: &[f64]) -> f64 {
    let chunks = a.len() / 4;
    let mut acc = [0.0f64; 4];
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j];
        acc[1] += a[j + 1];
        acc[2] += a[j + 2];
        acc[3] += a[j + 3];
    }
    let mut rest = 0.0;
    for v in &a[4 * chunks..] {
        rest += v;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + rest
}

/// Sum and sum of squares in one pass, four-lane accumulation.
fn sum_sumsq4(a: &[f64]) -> (f64, f64) {
    let chunks = a.len() / 4;
    let mut s = [0.0f64; 4];
    let mut q = [0.0f64; 4];
    for i in 0..chunks {
        let j = 4 * i;
        s[0] += a[j];
        q[0] += a[j] * a[j];
        s[1] += a[j + 1];
        q[1] += a[j + 1] * a[j + 1];
        s[2] += a[j + 2];
        q[2] += a[j + 2] * a[j + 2];
        s[3] += a[j + 3];
        q[3] += a[j + 3] * a[j + 3];
    }
    let (mut rs, mut rq) = (0.0, 0.0);
    for v in &a[4 * chunks..] {
        rs += v;
        rq += v * v;
    }
    (
        (s[0] + s[1]) + (s[2] + s[3]) + rs,
        (q[0] + q[1]) + (q[2] + q[3]) + rq,
    )
}

/// out[y][x] += k[dy][dx] * x[y+dy-1][x+dx-1], zero padding of 1.
///
/// The (dy,dx) loops are hoisted so each inner loop is a contiguous
/// scaled-add over one row, which the compiler vectorizes.
fn accumulate_correlation(x: &[f64], h: usize, w: usize, k: &[f64], out: &mut [f64]) {
    for dy in 0..3usize {
        let y0 = 1usize.saturating_sub(dy);
        let y1 = (h + 1 - dy).min(h);
        for dx in 0..3usize {
            let kv = k[dy * 3 + dx];
            if kv == 0.0 {
                continue;
            }
            let x0 = 1usize.saturating_sub(dx);
            let x1 = (w + 1 - dx).min(w);
            for y in y0..y1 {
                let src = (y + dy - 1) * w + x0 + dx - 1;
                let dst = y * w + x0;
                let n = x1 - x0;
                let src_row = &x[src..src + n];
                let dst_row = &mut out[dst..dst + n];
                for (d, s) in dst_row.iter_mut().zip(src_row) {
                    *d += kv * *s;
                }
            }
        }
    }
}

/// 3x3 convolution with zero padding 1 and stride 1.
///
/// `x`: [Cin,H,W], `weight`: [Cout,Cin,3,3], `bias`: [Cout], `out`: [Cout,H,W].
pub fn conv2d_forward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    bias: &[f64],
    out: &mut [f64],
) {
    let hw = h * w;
    debug_assert_eq!(x.len(), cin * hw);
    debug_assert_eq!(weight.len(), cout * cin * 9);
    debug_assert_eq!(out.len(), cout * hw);
    for co in 0..cout {
        let out_plane = &mut out[co * hw..(co + 1) * hw];
        out_plane.fill(bias[co]);
        for ci in 0..cin {
            let x_plane = &x[ci * hw..(ci + 1) * hw];
            let k = &weight[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            accumulate_correlation(x_plane, h, w, k, out_plane);
        }
    }
}

/// Gradients of [`conv2d_forward`]; all outputs accumulate.
pub fn conv2d_backward(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    cout: usize,
    gout: &[f64],
    mut gx: Option<&mut [f64]>,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let hw = h * w;
    for co in 0..cout {
        let gout_plane = &gout[co * hw..(co + 1) * hw];
        gb[co] += sum4(gout_plane);
        for ci in 0..cin {
            let x_plane = &x[ci * hw..(ci + 1) * hw];
            let gw9 = &mut gw[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
            for dy in 0..3usize {
                let y0 = 1usize.saturating_sub(dy);
                let y1 = (h + 1 - dy).min(h);
                for dx in 0..3usize {
                    let x0 = 1usize.saturating_sub(dx);
                    let x1 = (w + 1 - dx).min(w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src = (y + dy - 1) * w + x0 + dx - 1;
                        let dst = y * w + x0;
                        let n = x1 - x0;
                        acc += dot4(&x_plane[src..src + n], &gout_plane[dst..dst + n]);
                    }
                    gw9[dy * 3 + dx] += acc;
                }
            }
            if let Some(gx_buf) = gx.as_deref_mut() {
                let gx_plane = &mut gx_buf[ci * hw..(ci + 1) * hw];
                let k = &weight[(co * cin + ci) * 9..(co * cin + ci) * 9 + 9];
                // Scatter: gx[y+dy-1][x+dx-1] += k[dy][dx] * gout[y][x].
                for dy in 0..3usize {
                    let y0 = 1usize.saturating_sub(dy);
                    let y1 = (h + 1 - dy).min(h);
                    for dx in 0..3usize {
                        let kv = k[dy * 3 + dx];
                        if kv == 0.0 {
                            continue;
                        }
                        let x0 = 1usize.saturating_sub(dx);
                        let x1 = (w + 1 - dx).min(w);
                        for y in y0..y1 {
                            let dst = (y + dy - 1) * w + x0 + dx - 1;
                            let src = y * w + x0;
                            let n = x1 - x0;
                            let gs = &gout_plane[src..src + n];
                            let gd = &mut gx_plane[dst..dst + n];
                            for (d, g) in gd.iter_mut().zip(gs) {
                                *d += kv * *g;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping 2x2 max pooling. `h` and `w` must be even.
///
/// `argmax` receives, per output element, the flat index into `x` of the
/// chosen input; ties go to the first position in row-major window order.
pub fn maxpool2_forward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let base_out = ch * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (2 * oy) * w + 2 * ox;
                let mut best = plane[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * oy + dy) * w + 2 * ox + dx;
                    let v = plane[idx];
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                out[base_out + oy * ow + ox] = best;
                argmax[base_out + oy * ow + ox] = ch * h * w + best_idx;
            }
        }
    }
}

/// Routes each output gradient to its recorded argmax position.
pub fn maxpool2_backward(gout: &[f64], argmax: &[usize], gx: &mut [f64]) {
    for (g, &idx) in gout.iter().zip(argmax) {
        gx[idx] += *g;
    }
}

/// Per-axis interpolation table for 2x bilinear upsampling,
/// align-corners-false: src = (i + 0.5)/2 - 0.5, clamped to the valid range.
fn upsample_axis(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|i| {
            let src = (i as f64 + 0.5) / 2.0 - 0.5;
            let src = src.clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear 2x upsampling: [C,H,W] -> [C,2H,2W].
pub fn upsample2_forward(x: &[f64], c: usize, h: usize, w: usize, out: &mut [f64]) {
    let ys = upsample_axis(h);
    let xs = upsample_axis(w);
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        let out_plane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            let r0 = &plane[y0 * w..y0 * w + w];
            let r1 = &plane[y1 * w..y1 * w + w];
            let orow = &mut out_plane[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = r0[x0] * (1.0 - tx) + r0[x1] * tx;
                let bot = r1[x0] * (1.0 - tx) + r1[x1] * tx;
                orow[ox] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
}

/// Scatters the four interpolation weights back to the input grid.
pub fn upsample2_backward(gout: &[f64], c: usize, h: usize, w: usize, gx: &mut [f64]) {
    let ys = upsample_axis(h);
    let xs = upsample_axis(w);
    let (oh, ow) = (2 * h, 2 * w);
    for ch in 0..c {
        let gx_plane = &mut gx[ch * h * w..(ch + 1) * h * w];
        let gout_plane = &gout[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let g = gout_plane[oy * ow + ox];
                gx_plane[y0 * w + x0] += g * (1.0 - ty) * (1.0 - tx);
                gx_plane[y0 * w + x1] += g * (1.0 - ty) * tx;
                gx_plane[y1 * w + x0] += g * ty * (1.0 - tx);
                gx_plane[y1 * w + x1] += g * ty * tx;
            }
        }
    }
}

/// Whether batch normalization uses batch statistics (updating the running
/// state) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Running statistics and constants of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BnState {
    /// Fresh state: mean 0, variance 1, conventional constants.
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

/// Batch statistics saved by a train-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub invstd: Vec<f64>,
}

/// Batch normalization over all non-channel axes of an `[N,C,S]` buffer
/// (`S` = flattened spatial size; rank-3 `[C,H,W]` inputs use `n = 1`).
///
/// Train mode normalizes with batch statistics and folds them into the
/// running state with `momentum`; infer mode normalizes with the running
/// statistics. Returns the batch-statistics cache in train mode.
pub fn batchnorm_forward(
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    beta: &[f64],
    state: &mut BnState,
    mode: BnMode,
    out: &mut [f64],
) -> Option<BnCache> {
    let m = (n * s) as f64;
    match mode {
        BnMode::Train => {
            let mut mean = vec![0.0; c];
            let mut invstd = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * s;
                    let (bs, bq) = sum_sumsq4(&x[off..off + s]);
                    sum += bs;
                    sumsq += bq;
                }
                let mu = sum / m;
                let var = (sumsq / m - mu * mu).max(0.0);
                mean[ch] = mu;
                invstd[ch] = 1.0 / (var + state.eps).sqrt();
                state.running_mean[ch] =
                    (1.0 - state.momentum) * state.running_mean[ch] + state.momentum * mu;
                state.running_var[ch] =
                    (1.0 - state.momentum) * state.running_var[ch] + state.momentum * var;
                let (g, b_) = (gamma[ch], beta[ch]);
                for b in 0..n {
                    let off = (b * c + ch) * s;
                    for (o, &v) in out[off..off + s].iter_mut().zip(&x[off..off + s]) {
                        *o = g * (v - mu) * invstd[ch] + b_;
                    }
                }
            }
            Some(BnCache { mean, invstd })
        }
        BnMode::Infer => {
            batchnorm_infer(x, n, c, s, gamma, beta, state, out);
            None
        }
    }
}

/// Infer-mode normalization with the stored running statistics.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_infer(
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    beta: &[f64],
    state: &BnState,
    out: &mut [f64],
) {
    for ch in 0..c {
        let mu = state.running_mean[ch];
        let istd = 1.0 / (state.running_var[ch] + state.eps).sqrt();
        let (g, b_) = (gamma[ch], beta[ch]);
        for b in 0..n {
            let off = (b * c + ch) * s;
            for (o, &v) in out[off..off + s].iter_mut().zip(&x[off..off + s]) {
                *o = g * (v - mu) * istd + b_;
            }
        }
    }
}

/// Full train-mode batch-norm gradient (mean and variance terms included).
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward(
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    cache: &BnCache,
    gout: &[f64],
    gx: &mut [f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) {
    let m = (n * s) as f64;
    for ch in 0..c {
        let mu = cache.mean[ch];
        let istd = cache.invstd[ch];
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            let off = (b * c + ch) * s;
            sum_g += sum4(&gout[off..off + s]);
            sum_gx += dot4(&gout[off..off + s], &x[off..off + s]);
        }
        let sum_gx = (sum_gx - sum_g * mu) * istd;
        ggamma[ch] += sum_gx;
        gbeta[ch] += sum_g;
        let scale = gamma[ch] * istd / m;
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                let xhat = (x[i] - mu) * istd;
                gx[i] += scale * (m * gout[i] - sum_g - xhat * sum_gx);
            }
        }
    }
}

/// Gradient with fixed normalization constants (infer mode): the mean and
/// inverse standard deviation do not depend on the input.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_backward_fixed(
    x: &[f64],
    n: usize,
    c: usize,
    s: usize,
    gamma: &[f64],
    cache: &BnCache,
    gout: &[f64],
    gx: &mut [f64],
    ggamma: &mut [f64],
    gbeta: &mut [f64],
) {
    for ch in 0..c {
        let (mu, istd) = (cache.mean[ch], cache.invstd[ch]);
        let k = gamma[ch] * istd;
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                gx[i] += k * gout[i];
                ggamma[ch] += gout[i] * (x[i] - mu) * istd;
                gbeta[ch] += gout[i];
            }
        }
    }
}

/// Element-wise max(0, x).
pub fn relu_forward(x: &[f64], out: &mut [f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v.max(0.0);
    }
}

/// Subgradient at 0 is 0: gradient flows only where x > 0.
pub fn relu_backward(x: &[f64], gout: &[f64], gx: &mut [f64]) {
    for ((g, &v), &go) in gx.iter_mut().zip(x).zip(gout) {
        if v > 0.0 {
            *g += go;
        }
    }
}

/// Per-pixel softmax over the channel axis of a [K,HW] buffer,
/// computed with max subtraction.
pub fn softmax_channels_forward(x: &[f64], k: usize, hw: usize, out: &mut [f64]) {
    for px in 0..hw {
        let mut max = f64::NEG_INFINITY;
        for ch in 0..k {
            max = max.max(x[ch * hw + px]);
        }
        let mut denom = 0.0;
        for ch in 0..k {
            let e = (x[ch * hw + px] - max).exp();
            out[ch * hw + px] = e;
            denom += e;
        }
        for ch in 0..k {
            out[ch * hw + px] /= denom;
        }
    }
}

/// Softmax Jacobian-vector product: gx_k += p_k (g_k - sum_j g_j p_j).
pub fn softmax_channels_backward(probs: &[f64], k: usize, hw: usize, gout: &[f64], gx: &mut [f64]) {
    for px in 0..hw {
        let mut dot = 0.0;
        for ch in 0..k {
            dot += gout[ch * hw + px] * probs[ch * hw + px];
        }
        for ch in 0..k {
            let i = ch * hw + px;
            gx[i] += probs[i] * (gout[i] - dot);
        }
    }
}

/// Mean over pixels of log-sum-exp(logits) minus the true-class logit.
///
/// Returns the scalar loss and the per-pixel softmax probabilities the
/// backward pass needs. Labels must lie in 0..k.
pub fn pixel_loss_forward(logits: &[f64], k: usize, hw: usize, labels: &[u8]) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; k * hw];
    softmax_channels_forward(logits, k, hw, &mut probs);
    let mut total = 0.0;
    for (px, &lab) in labels.iter().enumerate() {
        let mut max = f64::NEG_INFINITY;
        for ch in 0..k {
            max = max.max(logits[ch * hw + px]);
        }
        let mut denom = 0.0;
        for ch in 0..k {
            denom += (logits[ch * hw + px] - max).exp();
        }
        let lse = max + denom.ln();
        total += lse - logits[lab as usize * hw + px];
    }
    (total / hw as f64, probs)
}

/// Gradient: (softmax - one_hot(label)) / pixel_count, scaled by `gscale`.
pub fn pixel_loss_backward(
    probs: &[f64],
    k: usize,
    hw: usize,
    labels: &[u8],
    gscale: f64,
    gx: &mut [f64],
) {
    let inv = gscale / hw as f64;
    for (px, &lab) in labels.iter().enumerate() {
        for ch in 0..k {
            let one_hot = if ch == lab as usize { 1.0 } else { 0.0 };
            gx[ch * hw + px] += inv * (probs[ch * hw + px] - one_hot);
        }
    }
}

/// One SGD-with-momentum update: v <- momentum*v + g; p <- p - lr*v.
pub fn sgd_update(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}
