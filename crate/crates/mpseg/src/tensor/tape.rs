//! Operation tape for reverse-mode differentiation.
//!
//! Forward calls record one entry per executed operation in topological
//! order; [`Tape::backward`] replays the records in reverse exactly once,
//! accumulating gradients into every entry. Values are validated finite
//! after each forward and backward step.

use super::ops::{self, BnCache, BnMode, BnState};
use super::{all_finite, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValId(usize);

/// Interprets a shape as (N, C, H, W, was_batched), promoting rank-3
/// tensors to a single-sample batch.
fn as_batched(shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match shape {
        [c, h, w] => Ok((1, *c, *h, *w, false)),
        [n, c, h, w] => Ok((*n, *c, *h, *w, true)),
        _ => Err(Error::Dim(format!(
            "expected rank-3 [C,H,W] or rank-4 [N,C,H,W] tensor, got {shape:?}"
        ))),
    }
}

struct Entry {
    value: Tensor,
}

enum Rec {
    Conv2d {
        x: usize,
        w: usize,
        b: usize,
        out: usize,
    },
    MaxPool2 {
        x: usize,
        out: usize,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: usize,
        out: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        out: usize,
        mode: BnMode,
        cache: BnCache,
    },
    Relu {
        x: usize,
        out: usize,
    },
    Softmax {
        x: usize,
        out: usize,
    },
    PixelLoss {
        logits: usize,
        out: usize,
        labels: Vec<u8>,
        probs: Vec<f64>,
    },
}

/// Records a forward computation for one backward replay.
#[derive(Default)]
pub struct Tape {
    entries: Vec<Entry>,
    recs: Vec<Rec>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Places a tensor on the tape and returns its handle.
    pub fn input(&mut self, value: Tensor) -> ValId {
        self.entries.push(Entry { value });
        ValId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.entries[id.0].value
    }

    /// Gradient of the last backward pass w.r.t. the given entry.
    pub fn grad(&self, id: ValId) -> Option<&[f64]> {
        self.entries[id.0].value.grad()
    }

    /// The value of a scalar (single-element) entry.
    pub fn scalar(&self, id: ValId) -> f64 {
        self.entries[id.0].value.data()[0]
    }

    fn push_output(&mut self, value: Tensor, context: &'static str) -> Result<ValId> {
        value.validate_finite(context)?;
        Ok(self.input(value))
    }

    /// 3x3 same convolution: x [Cin,H,W] or [N,Cin,H,W], w [Cout,Cin,3,3],
    /// b [Cout]. Batched inputs convolve each sample independently.
    pub fn conv2d(&mut self, x: ValId, w: ValId, b: ValId) -> Result<ValId> {
        let (n, cin, h, w_dim, batched) = as_batched(self.value(x).shape())?;
        let wshape = self.value(w).shape().to_vec();
        let (cout, wcin) = match wshape[..] {
            [cout, wcin, 3, 3] => (cout, wcin),
            _ => {
                return Err(Error::Dim(format!(
                    "conv2d weight must be [Cout,Cin,3,3], got {wshape:?}"
                )))
            }
        };
        if wcin != cin {
            return Err(Error::Dim(format!(
                "conv2d input has {cin} channels but weight expects {wcin}"
            )));
        }
        if self.value(b).shape() != [cout] {
            return Err(Error::Dim(format!(
                "conv2d bias must be [{cout}], got {:?}",
                self.value(b).shape()
            )));
        }
        let out_shape = if batched {
            vec![n, cout, h, w_dim]
        } else {
            vec![cout, h, w_dim]
        };
        let mut out = Tensor::zeros(&out_shape);
        let (in_stride, out_stride) = (cin * h * w_dim, cout * h * w_dim);
        for s in 0..n {
            ops::conv2d_forward(
                &self.value(x).data()[s * in_stride..(s + 1) * in_stride],
                cin,
                h,
                w_dim,
                self.value(w).data(),
                cout,
                self.value(b).data(),
                &mut out.data_mut()[s * out_stride..(s + 1) * out_stride],
            );
        }
        let out = self.push_output(out, "conv2d")?;
        self.recs.push(Rec::Conv2d {
            x: x.0,
            w: w.0,
            b: b.0,
            out: out.0,
        });
        Ok(out)
    }

    /// Non-overlapping 2x2 max pooling; H and W must be even.
    pub fn maxpool2(&mut self, x: ValId) -> Result<ValId> {
        let (n, c, h, w, batched) = as_batched(self.value(x).shape())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dim(format!(
                "maxpool2 requires even spatial dims, got {h}x{w}"
            )));
        }
        let out_shape = if batched {
            vec![n, c, h / 2, w / 2]
        } else {
            vec![c, h / 2, w / 2]
        };
        let mut out = Tensor::zeros(&out_shape);
        let mut argmax = vec![0usize; n * c * (h / 2) * (w / 2)];
        let (in_stride, out_stride) = (c * h * w, c * (h / 2) * (w / 2));
        for s in 0..n {
            let mut arg = vec![0usize; out_stride];
            ops::maxpool2_forward(
                &self.value(x).data()[s * in_stride..(s + 1) * in_stride],
                c,
                h,
                w,
                &mut out.data_mut()[s * out_stride..(s + 1) * out_stride],
                &mut arg,
            );
            // Shift per-sample indices into the whole-batch buffer.
            for (dst, a) in argmax[s * out_stride..(s + 1) * out_stride]
                .iter_mut()
                .zip(arg)
            {
                *dst = s * in_stride + a;
            }
        }
        let out = self.push_output(out, "maxpool2")?;
        self.recs.push(Rec::MaxPool2 {
            x: x.0,
            out: out.0,
            argmax,
        });
        Ok(out)
    }

    /// Bilinear 2x upsampling.
    pub fn upsample2(&mut self, x: ValId) -> Result<ValId> {
        let (n, c, h, w, batched) = as_batched(self.value(x).shape())?;
        let out_shape = if batched {
            vec![n, c, 2 * h, 2 * w]
        } else {
            vec![c, 2 * h, 2 * w]
        };
        let mut out = Tensor::zeros(&out_shape);
        let (in_stride, out_stride) = (c * h * w, c * h * w * 4);
        for s in 0..n {
            ops::upsample2_forward(
                &self.value(x).data()[s * in_stride..(s + 1) * in_stride],
                c,
                h,
                w,
                &mut out.data_mut()[s * out_stride..(s + 1) * out_stride],
            );
        }
        let out = self.push_output(out, "bilinear_upsample2")?;
        self.recs.push(Rec::Upsample2 { x: x.0, out: out.0 });
        Ok(out)
    }

    /// Batch normalization over all non-channel axes of a [C,H,W] or
    /// [N,C,H,W] input. Train mode updates `state` in place.
    pub fn batchnorm(
        &mut self,
        x: ValId,
        gamma: ValId,
        beta: ValId,
        state: &mut BnState,
        mode: BnMode,
    ) -> Result<ValId> {
        let shape = self.value(x).shape().to_vec();
        let (n, c, s) = match shape[..] {
            [c, h, w] => (1, c, h * w),
            [n, c, h, w] => (n, c, h * w),
            _ => {
                return Err(Error::Dim(format!(
                    "batchnorm expects [C,H,W] or [N,C,H,W], got {shape:?}"
                )))
            }
        };
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(Error::Dim(format!(
                    "batchnorm {name} must be [{c}], got {:?}",
                    self.value(id).shape()
                )));
            }
        }
        if state.running_mean.len() != c {
            return Err(Error::Dim(format!(
                "batchnorm state has {} channels, input has {c}",
                state.running_mean.len()
            )));
        }
        let mut out = Tensor::zeros(&shape);
        let cache = ops::batchnorm_forward(
            self.value(x).data(),
            n,
            c,
            s,
            self.value(gamma).data(),
            self.value(beta).data(),
            state,
            mode,
            out.data_mut(),
        );
        let cache = cache.unwrap_or_else(|| BnCache {
            mean: state.running_mean.clone(),
            invstd: state
                .running_var
                .iter()
                .map(|v| 1.0 / (v + state.eps).sqrt())
                .collect(),
        });
        let out = self.push_output(out, "batchnorm")?;
        self.recs.push(Rec::BatchNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            out: out.0,
            mode,
            cache,
        });
        Ok(out)
    }

    /// Element-wise max(0, x).
    pub fn relu(&mut self, x: ValId) -> Result<ValId> {
        let mut out = Tensor::zeros(self.value(x).shape());
        ops::relu_forward(self.value(x).data(), out.data_mut());
        let out = self.push_output(out, "relu")?;
        self.recs.push(Rec::Relu { x: x.0, out: out.0 });
        Ok(out)
    }

    /// Per-pixel softmax over the channel axis of a [K,H,W] or [N,K,H,W]
    /// tensor.
    pub fn softmax_channels(&mut self, x: ValId) -> Result<ValId> {
        let (n, k, h, w, _) = as_batched(self.value(x).shape())?;
        if k < 2 {
            return Err(Error::Dim(format!("softmax_channels requires K >= 2, got {k}")));
        }
        let mut out = Tensor::zeros(self.value(x).shape());
        let stride = k * h * w;
        for s in 0..n {
            ops::softmax_channels_forward(
                &self.value(x).data()[s * stride..(s + 1) * stride],
                k,
                h * w,
                &mut out.data_mut()[s * stride..(s + 1) * stride],
            );
        }
        let out = self.push_output(out, "softmax_channels")?;
        self.recs.push(Rec::Softmax { x: x.0, out: out.0 });
        Ok(out)
    }

    /// Mean over pixels of log-sum-exp(logits) minus the true-class logit.
    /// `labels` is row-major [H,W] (or [N,H,W] for batched logits) with
    /// values in 0..K.
    pub fn pixel_loss(&mut self, logits: ValId, labels: &[u8]) -> Result<ValId> {
        let (n, k, h, w, _) = as_batched(self.value(logits).shape())?;
        if labels.len() != n * h * w {
            return Err(Error::Dim(format!(
                "labels have {} pixels, logits are {n}x{h}x{w}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Validation(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let stride = k * h * w;
        let mut probs = vec![0.0; n * stride];
        let mut loss = 0.0;
        for s in 0..n {
            let (sample_loss, sample_probs) = ops::pixel_loss_forward(
                &self.value(logits).data()[s * stride..(s + 1) * stride],
                k,
                h * w,
                &labels[s * h * w..(s + 1) * h * w],
            );
            loss += sample_loss / n as f64;
            probs[s * stride..(s + 1) * stride].copy_from_slice(&sample_probs);
        }
        let out = self.push_output(Tensor::from_vec(&[1], vec![loss])?, "pixel_classification_loss")?;
        self.recs.push(Rec::PixelLoss {
            logits: logits.0,
            out: out.0,
            labels: labels.to_vec(),
            probs,
        });
        Ok(out)
    }

    /// Replays the tape in reverse, visiting each recorded operation exactly
    /// once and accumulating gradients into every entry. `root` must be a
    /// scalar.
    pub fn backward(&mut self, root: ValId) -> Result<()> {
        if self.entries[root.0].value.numel() != 1 {
            return Err(Error::Dim(format!(
                "backward root must be scalar, got shape {:?}",
                self.entries[root.0].value.shape()
            )));
        }
        let mut grads: Vec<Vec<f64>> = self
            .entries
            .iter()
            .map(|e| vec![0.0; e.value.numel()])
            .collect();
        grads[root.0][0] = 1.0;

        for rec in self.recs.iter().rev() {
            match rec {
                Rec::Conv2d { x, w, b, out } => {
                    let (n, cin, h, w_dim, _) = as_batched(self.entries[*x].value.shape())?;
                    let cout = self.entries[*w].value.shape()[0];
                    let gout = std::mem::take(&mut grads[*out]);
                    let mut gx = std::mem::take(&mut grads[*x]);
                    let mut gw = std::mem::take(&mut grads[*w]);
                    let mut gb = std::mem::take(&mut grads[*b]);
                    let (in_stride, out_stride) = (cin * h * w_dim, cout * h * w_dim);
                    for s in 0..n {
                        ops::conv2d_backward(
                            &self.entries[*x].value.data()[s * in_stride..(s + 1) * in_stride],
                            cin,
                            h,
                            w_dim,
                            self.entries[*w].value.data(),
                            cout,
                            &gout[s * out_stride..(s + 1) * out_stride],
                            Some(&mut gx[s * in_stride..(s + 1) * in_stride]),
                            &mut gw,
                            &mut gb,
                        );
                    }
                    grads[*out] = gout;
                    grads[*x] = gx;
                    grads[*w] = gw;
                    grads[*b] = gb;
                }
                Rec::MaxPool2 { x, out, argmax } => {
                    let gout = std::mem::take(&mut grads[*out]);
                    ops::maxpool2_backward(&gout, argmax, &mut grads[*x]);
                    grads[*out] = gout;
                }
                Rec::Upsample2 { x, out } => {
                    let (n, c, h, w, _) = as_batched(self.entries[*x].value.shape())?;
                    let gout = std::mem::take(&mut grads[*out]);
                    let mut gx = std::mem::take(&mut grads[*x]);
                    let (in_stride, out_stride) = (c * h * w, c * h * w * 4);
                    for s in 0..n {
                        ops::upsample2_backward(
                            &gout[s * out_stride..(s + 1) * out_stride],
                            c,
                            h,
                            w,
                            &mut gx[s * in_stride..(s + 1) * in_stride],
                        );
                    }
                    grads[*out] = gout;
                    grads[*x] = gx;
                }
                Rec::BatchNorm {
                    x,
                    gamma,
                    beta,
                    out,
                    mode,
                    cache,
                } => {
                    let shape = self.entries[*x].value.shape();
                    let (n, c, s) = match shape[..] {
                        [c, h, w] => (1, c, h * w),
                        [n, c, h, w] => (n, c, h * w),
                        _ => unreachable!("validated at record time"),
                    };
                    let gout = std::mem::take(&mut grads[*out]);
                    let mut gx = std::mem::take(&mut grads[*x]);
                    let mut gg = std::mem::take(&mut grads[*gamma]);
                    let mut gb = std::mem::take(&mut grads[*beta]);
                    match mode {
                        BnMode::Train => ops::batchnorm_backward(
                            self.entries[*x].value.data(),
                            n,
                            c,
                            s,
                            self.entries[*gamma].value.data(),
                            cache,
                            &gout,
                            &mut gx,
                            &mut gg,
                            &mut gb,
                        ),
                        BnMode::Infer => ops::batchnorm_backward_fixed(
                            self.entries[*x].value.data(),
                            n,
                            c,
                            s,
                            self.entries[*gamma].value.data(),
                            cache,
                            &gout,
                            &mut gx,
                            &mut gg,
                            &mut gb,
                        ),
                    }
                    grads[*out] = gout;
                    grads[*x] = gx;
                    grads[*gamma] = gg;
                    grads[*beta] = gb;
                }
                Rec::Relu { x, out } => {
                    let gout = std::mem::take(&mut grads[*out]);
                    let mut gx = std::mem::take(&mut grads[*x]);
                    ops::relu_backward(self.entries[*x].value.data(), &gout, &mut gx);
                    grads[*out] = gout;
                    grads[*x] = gx;
                }
                Rec::Softmax { x, out } => {
                    let (n, k, h, w, _) = as_batched(self.entries[*x].value.shape())?;
                    let gout = std::mem::take(&mut grads[*out]);
                    let mut gx = std::mem::take(&mut grads[*x]);
                    let stride = k * h * w;
                    for s in 0..n {
                        ops::softmax_channels_backward(
                            &self.entries[*out].value.data()[s * stride..(s + 1) * stride],
                            k,
                            h * w,
                            &gout[s * stride..(s + 1) * stride],
                            &mut gx[s * stride..(s + 1) * stride],
                        );
                    }
                    grads[*out] = gout;
                    grads[*x] = gx;
                }
                Rec::PixelLoss {
                    logits,
                    out,
                    labels,
                    probs,
                } => {
                    let (n, k, h, w, _) = as_batched(self.entries[*logits].value.shape())?;
                    let gscale = grads[*out][0] / n as f64;
                    let mut gx = std::mem::take(&mut grads[*logits]);
                    let stride = k * h * w;
                    for s in 0..n {
                        ops::pixel_loss_backward(
                            &probs[s * stride..(s + 1) * stride],
                            k,
                            h * w,
                            &labels[s * h * w..(s + 1) * h * w],
                            gscale,
                            &mut gx[s * stride..(s + 1) * stride],
                        );
                    }
                    grads[*logits] = gx;
                }
            }
        }

        for (entry, grad) in self.entries.iter_mut().zip(grads) {
            if !all_finite(&grad) {
                return Err(Error::NonFinite("backward"));
            }
            entry.value.set_grad(grad);
        }
        Ok(())
    }
}
