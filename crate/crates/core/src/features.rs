//! Time-invariant visual feature maps applied independently to every frame.
//!
//! A [`FeatureExtractor`] owns its parameters and is differentiable end to
//! end, so it trains jointly with the recurrent stack. `Identity` lets a task
//! consume precomputed feature vectors directly.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemv_acc, gemv_t_acc, ger_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    Identity,
    Linear,
    Mlp1,
    SmallConv,
}

impl ExtractorKind {
    pub fn name(self) -> &'static str {
        match self {
            ExtractorKind::Identity => "identity",
            ExtractorKind::Linear => "linear",
            ExtractorKind::Mlp1 => "mlp1",
            ExtractorKind::SmallConv => "smallconv",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ExtractorKind::Identity),
            "linear" => Ok(ExtractorKind::Linear),
            "mlp1" => Ok(ExtractorKind::Mlp1),
            "smallconv" => Ok(ExtractorKind::SmallConv),
            other => Err(Error::Spec(format!("unknown extractor '{other}'"))),
        }
    }
}

/// Shape description used to build a [`FeatureExtractor`].
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractorSpec {
    pub kind: ExtractorKind,
    /// `[d]` for flat inputs, `[channels, height, width]` for `SmallConv`.
    pub input_shape: Vec<usize>,
    /// Ignored by `Identity`, whose output size is its input size.
    pub output_dim: usize,
    /// Hidden width of `Mlp1`, filter count of `SmallConv`.
    pub hidden: usize,
    /// Square kernel side for `SmallConv`.
    pub kernel: usize,
}

impl FeatureExtractorSpec {
    pub fn identity(dim: usize) -> Self {
        FeatureExtractorSpec {
            kind: ExtractorKind::Identity,
            input_shape: vec![dim],
            output_dim: dim,
            hidden: 0,
            kernel: 0,
        }
    }

    pub fn linear(input: usize, output: usize) -> Self {
        FeatureExtractorSpec {
            kind: ExtractorKind::Linear,
            input_shape: vec![input],
            output_dim: output,
            hidden: 0,
            kernel: 0,
        }
    }

    pub fn mlp1(input: usize, hidden: usize, output: usize) -> Self {
        FeatureExtractorSpec {
            kind: ExtractorKind::Mlp1,
            input_shape: vec![input],
            output_dim: output,
            hidden,
            kernel: 0,
        }
    }

    /// Convolution (stride 1, no padding) with `filters` kernels, 2×2 max
    /// pooling, then a linear head.
    pub fn smallconv(channels: usize, height: usize, width: usize, filters: usize, kernel: usize, output: usize) -> Self {
        FeatureExtractorSpec {
            kind: ExtractorKind::SmallConv,
            input_shape: vec![channels, height, width],
            output_dim: output,
            hidden: filters,
            kernel,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn output_len(&self) -> usize {
        match self.kind {
            ExtractorKind::Identity => self.input_len(),
            _ => self.output_dim,
        }
    }

    fn conv_geometry(&self) -> Result<ConvGeometry> {
        let [c, h, w] = self.input_shape[..] else {
            return Err(Error::Spec("smallconv input shape must be [channels, height, width]".into()));
        };
        let k = self.kernel;
        if k == 0 || k > h || k > w {
            return Err(Error::Spec(format!("kernel {k} does not fit a {h}x{w} input")));
        }
        let (oh, ow) = (h - k + 1, w - k + 1);
        if oh < 2 || ow < 2 {
            return Err(Error::Spec("convolution output too small for 2x2 pooling".into()));
        }
        Ok(ConvGeometry {
            channels: c,
            height: h,
            width: w,
            filters: self.hidden,
            kernel: k,
            out_h: oh,
            out_w: ow,
            pool_h: oh / 2,
            pool_w: ow / 2,
        })
    }

    /// Randomly initialized extractor of this shape.
    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<FeatureExtractor> {
        self.build_with(|shape, fan_in| Tensor::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng))
    }

    /// All-zero extractor of this shape.
    pub fn build_zeros(&self) -> Result<FeatureExtractor> {
        self.build_with(|shape, _| Tensor::zeros(shape))
    }

    fn build_with(&self, mut weights: impl FnMut(&[usize], usize) -> Tensor) -> Result<FeatureExtractor> {
        if self.input_len() == 0 {
            return Err(Error::Spec("extractor input must be non-empty".into()));
        }
        let d_in = self.input_len();
        let d_out = self.output_dim;
        Ok(match self.kind {
            ExtractorKind::Identity => FeatureExtractor::Identity { dim: d_in },
            ExtractorKind::Linear => FeatureExtractor::Linear {
                w: weights(&[d_out, d_in], d_in),
                b: Tensor::zeros(&[d_out]),
            },
            ExtractorKind::Mlp1 => FeatureExtractor::Mlp1 {
                w1: weights(&[self.hidden, d_in], d_in),
                b1: Tensor::zeros(&[self.hidden]),
                w2: weights(&[d_out, self.hidden], self.hidden),
                b2: Tensor::zeros(&[d_out]),
            },
            ExtractorKind::SmallConv => {
                let g = self.conv_geometry()?;
                let fan = g.channels * g.kernel * g.kernel;
                let pooled = g.filters * g.pool_h * g.pool_w;
                FeatureExtractor::SmallConv {
                    geometry: g,
                    kernels: weights(&[g.filters, g.channels, g.kernel, g.kernel], fan),
                    kernel_bias: Tensor::zeros(&[g.filters]),
                    head_w: weights(&[d_out, pooled], pooled),
                    head_b: Tensor::zeros(&[d_out]),
                }
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pool_h: usize,
    pub pool_w: usize,
}

/// A differentiable map from one frame to a fixed-length vector.
#[derive(Clone, Debug, PartialEq)]
pub enum FeatureExtractor {
    Identity {
        dim: usize,
    },
    Linear {
        w: Tensor,
        b: Tensor,
    },
    Mlp1 {
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    SmallConv {
        geometry: ConvGeometry,
        kernels: Tensor,
        kernel_bias: Tensor,
        head_w: Tensor,
        head_b: Tensor,
    },
}

/// Values kept from [`FeatureExtractor::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub enum PhiCache {
    Identity,
    Linear { x: Vec<f64> },
    Mlp1 { x: Vec<f64>, hidden: Vec<f64> },
    SmallConv { x: Vec<f64>, pooled: Vec<f64>, winners: Vec<usize> },
}

impl FeatureExtractor {
    pub fn kind(&self) -> ExtractorKind {
        match self {
            FeatureExtractor::Identity { .. } => ExtractorKind::Identity,
            FeatureExtractor::Linear { .. } => ExtractorKind::Linear,
            FeatureExtractor::Mlp1 { .. } => ExtractorKind::Mlp1,
            FeatureExtractor::SmallConv { .. } => ExtractorKind::SmallConv,
        }
    }

    /// The spec this extractor would be built from.
    pub fn spec(&self) -> FeatureExtractorSpec {
        match self {
            FeatureExtractor::Identity { dim } => FeatureExtractorSpec::identity(*dim),
            FeatureExtractor::Linear { w, .. } => FeatureExtractorSpec::linear(w.shape()[1], w.shape()[0]),
            FeatureExtractor::Mlp1 { w1, w2, .. } => {
                FeatureExtractorSpec::mlp1(w1.shape()[1], w1.shape()[0], w2.shape()[0])
            }
            FeatureExtractor::SmallConv { geometry: g, head_w, .. } => FeatureExtractorSpec::smallconv(
                g.channels,
                g.height,
                g.width,
                g.filters,
                g.kernel,
                head_w.shape()[0],
            ),
        }
    }

    pub fn input_len(&self) -> usize {
        self.spec().input_len()
    }

    pub fn output_len(&self) -> usize {
        match self {
            FeatureExtractor::Identity { dim } => *dim,
            FeatureExtractor::Linear { b, .. } => b.len(),
            FeatureExtractor::Mlp1 { b2, .. } => b2.len(),
            FeatureExtractor::SmallConv { head_b, .. } => head_b.len(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.blocks_mut() {
            t.fill(0.0);
        }
        z
    }

    pub fn blocks(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            FeatureExtractor::Identity { .. } => vec![],
            FeatureExtractor::Linear { w, b } => vec![("w", w), ("b", b)],
            FeatureExtractor::Mlp1 { w1, b1, w2, b2 } => vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)],
            FeatureExtractor::SmallConv {
                kernels,
                kernel_bias,
                head_w,
                head_b,
                ..
            } => vec![
                ("kernels", kernels),
                ("kernel_bias", kernel_bias),
                ("head_w", head_w),
                ("head_b", head_b),
            ],
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            FeatureExtractor::Identity { .. } => vec![],
            FeatureExtractor::Linear { w, b } => vec![("w", w), ("b", b)],
            FeatureExtractor::Mlp1 { w1, b1, w2, b2 } => vec![("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)],
            FeatureExtractor::SmallConv {
                kernels,
                kernel_bias,
                head_w,
                head_b,
                ..
            } => vec![
                ("kernels", kernels),
                ("kernel_bias", kernel_bias),
                ("head_w", head_w),
                ("head_b", head_b),
            ],
        }
    }

    /// Maps one frame to its feature vector.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, PhiCache)> {
        let expect = self.input_len();
        if x.len() != expect {
            return Err(Error::Shape {
                op: "phi_forward",
                left: self.spec().input_shape,
                right: x.shape().to_vec(),
            });
        }
        let xs = x.data();
        match self {
            FeatureExtractor::Identity { .. } => Ok((Tensor::vector(xs.to_vec()), PhiCache::Identity)),
            FeatureExtractor::Linear { w, b } => {
                let mut out = b.data().to_vec();
                gemv_acc(w, xs, &mut out);
                Ok((Tensor::vector(out), PhiCache::Linear { x: xs.to_vec() }))
            }
            FeatureExtractor::Mlp1 { w1, b1, w2, b2 } => {
                let mut hidden = b1.data().to_vec();
                gemv_acc(w1, xs, &mut hidden);
                hidden.iter_mut().for_each(|v| *v = v.tanh());
                let mut out = b2.data().to_vec();
                gemv_acc(w2, &hidden, &mut out);
                Ok((Tensor::vector(out), PhiCache::Mlp1 { x: xs.to_vec(), hidden }))
            }
            FeatureExtractor::SmallConv {
                geometry: g,
                kernels,
                kernel_bias,
                head_w,
                head_b,
            } => {
                let conv = convolve(g, kernels.data(), kernel_bias.data(), xs);
                let (pooled, winners) = max_pool(g, &conv);
                let mut out = head_b.data().to_vec();
                gemv_acc(head_w, &pooled, &mut out);
                Ok((
                    Tensor::vector(out),
                    PhiCache::SmallConv {
                        x: xs.to_vec(),
                        pooled,
                        winners,
                    },
                ))
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input frame.
    pub fn backward(&self, cache: &PhiCache, grad_out: &[f64], grads: &mut FeatureExtractor) -> Result<Tensor> {
        if grad_out.len() != self.output_len() {
            return Err(Error::Shape {
                op: "phi_backward",
                left: vec![self.output_len()],
                right: vec![grad_out.len()],
            });
        }
        match (self, cache, grads) {
            (FeatureExtractor::Identity { .. }, PhiCache::Identity, FeatureExtractor::Identity { .. }) => {
                Ok(Tensor::vector(grad_out.to_vec()))
            }
            (FeatureExtractor::Linear { w, .. }, PhiCache::Linear { x }, FeatureExtractor::Linear { w: gw, b: gb }) => {
                ger_acc(gw, grad_out, x);
                gb.axpy(1.0, &Tensor::vector(grad_out.to_vec()));
                let mut dx = vec![0.0; x.len()];
                gemv_t_acc(w, grad_out, &mut dx);
                Ok(Tensor::vector(dx))
            }
            (
                FeatureExtractor::Mlp1 { w1, w2, .. },
                PhiCache::Mlp1 { x, hidden },
                FeatureExtractor::Mlp1 {
                    w1: gw1,
                    b1: gb1,
                    w2: gw2,
                    b2: gb2,
                },
            ) => {
                ger_acc(gw2, grad_out, hidden);
                gb2.axpy(1.0, &Tensor::vector(grad_out.to_vec()));
                let mut dh = vec![0.0; hidden.len()];
                gemv_t_acc(w2, grad_out, &mut dh);
                for (d, h) in dh.iter_mut().zip(hidden) {
                    *d *= 1.0 - h * h;
                }
                ger_acc(gw1, &dh, x);
                gb1.axpy(1.0, &Tensor::vector(dh.clone()));
                let mut dx = vec![0.0; x.len()];
                gemv_t_acc(w1, &dh, &mut dx);
                Ok(Tensor::vector(dx))
            }
            (
                FeatureExtractor::SmallConv {
                    geometry: g,
                    kernels,
                    head_w,
                    ..
                },
                PhiCache::SmallConv { x, pooled, winners },
                FeatureExtractor::SmallConv {
                    kernels: gk,
                    kernel_bias: gkb,
                    head_w: ghw,
                    head_b: ghb,
                    ..
                },
            ) => {
                ger_acc(ghw, grad_out, pooled);
                ghb.axpy(1.0, &Tensor::vector(grad_out.to_vec()));
                let mut d_pooled = vec![0.0; pooled.len()];
                gemv_t_acc(head_w, grad_out, &mut d_pooled);
                let mut d_conv = vec![0.0; g.filters * g.out_h * g.out_w];
                for (d, &win) in d_pooled.iter().zip(winners) {
                    d_conv[win] += d;
                }
                Ok(Tensor::vector(convolve_backward(
                    g,
                    kernels.data(),
                    x,
                    &d_conv,
                    gk.data_mut(),
                    gkb.data_mut(),
                )))
            }
            _ => Err(Error::Invalid("extractor, cache and gradient variants disagree".into())),
        }
    }
}

/// Applies `phi` to one frame.
pub fn phi_forward(phi: &FeatureExtractor, x: &Tensor) -> Result<Tensor> {
    phi.forward(x).map(|(y, _)| y)
}

/// Gradient of `phi` at the cached frame: returns `(grad_x, grad_params)`.
pub fn phi_backward(phi: &FeatureExtractor, cache: &PhiCache, grad_out: &Tensor) -> Result<(Tensor, FeatureExtractor)> {
    let mut grads = phi.zeros_like();
    let dx = phi.backward(cache, grad_out.data(), &mut grads)?;
    Ok((dx, grads))
}

fn convolve(g: &ConvGeometry, kernels: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    let k = g.kernel;
    let mut out = vec![0.0; g.filters * g.out_h * g.out_w];
    for f in 0..g.filters {
        for i in 0..g.out_h {
            for j in 0..g.out_w {
                let mut s = bias[f];
                for c in 0..g.channels {
                    for u in 0..k {
                        for v in 0..k {
                            let kv = kernels[((f * g.channels + c) * k + u) * k + v];
                            let xv = x[(c * g.height + i + u) * g.width + j + v];
                            s += kv * xv;
                        }
                    }
                }
                out[(f * g.out_h + i) * g.out_w + j] = s;
            }
        }
    }
    out
}

/// 2×2 stride-2 max pooling. Returns pooled values and the flat index in
/// `conv` that won each window (first in scan order on ties).
fn max_pool(g: &ConvGeometry, conv: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut pooled = Vec::with_capacity(g.filters * g.pool_h * g.pool_w);
    let mut winners = Vec::with_capacity(pooled.capacity());
    for f in 0..g.filters {
        for pi in 0..g.pool_h {
            for pj in 0..g.pool_w {
                let mut best = (f * g.out_h + 2 * pi) * g.out_w + 2 * pj;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (f * g.out_h + 2 * pi + di) * g.out_w + 2 * pj + dj;
                    if conv[idx] > conv[best] {
                        best = idx;
                    }
                }
                pooled.push(conv[best]);
                winners.push(best);
            }
        }
    }
    (pooled, winners)
}

fn convolve_backward(
    g: &ConvGeometry,
    kernels: &[f64],
    x: &[f64],
    d_conv: &[f64],
    d_kernels: &mut [f64],
    d_bias: &mut [f64],
) -> Vec<f64> {
    let k = g.kernel;
    let mut dx = vec![0.0; x.len()];
    for f in 0..g.filters {
        for i in 0..g.out_h {
            for j in 0..g.out_w {
                let d = d_conv[(f * g.out_h + i) * g.out_w + j];
                if d == 0.0 {
                    continue;
                }
                d_bias[f] += d;
                for c in 0..g.channels {
                    for u in 0..k {
                        for v in 0..k {
                            let ki = ((f * g.channels + c) * k + u) * k + v;
                            let xi = (c * g.height + i + u) * g.width + j + v;
                            d_kernels[ki] += d * x[xi];
                            dx[xi] += d * kernels[ki];
                        }
                    }
                }
            }
        }
    }
    dx
}
