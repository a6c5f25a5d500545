use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::chain::{Chain, ChainTape};
use super::graph::Param;
use super::kernels::{self, ConvGeom};
use super::{Element, Result, Tensor, TensorError};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv2d,
    TransposedUpsample,
    Maxpool2x2,
    Batchnorm2d,
    Relu,
    Sigmoid,
    Softmax,
    Dense,
    GlobalAvgPool,
    ResidualBlock,
    ConcatSkip,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::TransposedUpsample => "transposed-upsample",
            LayerKind::Maxpool2x2 => "maxpool2x2",
            LayerKind::Batchnorm2d => "batchnorm2d",
            LayerKind::Relu => "relu",
            LayerKind::Sigmoid => "sigmoid",
            LayerKind::Softmax => "softmax",
            LayerKind::Dense => "dense",
            LayerKind::GlobalAvgPool => "global-avg-pool",
            LayerKind::ResidualBlock => "residual-block",
            LayerKind::ConcatSkip => "concat-skip",
        };
        f.write_str(s)
    }
}

/// Static description of a layer: kind, hyperparameters and parameter names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    pub padding: Option<usize>,
    pub in_channels: Option<usize>,
    pub out_channels: Option<usize>,
    pub param_names: Vec<String>,
}

impl LayerSpec {
    fn bare(kind: LayerKind) -> Self {
        LayerSpec {
            kind,
            kernel: None,
            stride: None,
            padding: None,
            in_channels: None,
            out_channels: None,
            param_names: Vec::new(),
        }
    }
}

fn he_normal<T: Element, R: Rng>(rng: &mut R, len: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z * std)
        })
        .collect()
}

/// 2-D convolution with odd kernel and "same" padding `(k-1)/2`.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Element> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl<T: Element> Conv2d<T> {
    /// He-normal weights, zero bias.
    pub fn new<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) || stride == 0 || in_channels == 0 || out_channels == 0 {
            return Err(TensorError::BadLayer(format!(
                "conv `{name}`: kernel must be odd and extents positive (k={kernel}, stride={stride})"
            )));
        }
        let fan_in = in_channels * kernel * kernel;
        let weight = Tensor::from_parts(
            vec![out_channels, in_channels, kernel, kernel],
            he_normal(rng, out_channels * fan_in, fan_in),
        );
        Ok(Conv2d {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: bias.then(|| {
                Param::new(
                    format!("{name}.bias"),
                    Tensor::from_parts(vec![out_channels], vec![T::zero(); out_channels]),
                )
            }),
            in_channels,
            out_channels,
            kernel,
            stride,
        })
    }

    pub fn padding(&self) -> usize {
        (self.kernel - 1) / 2
    }

    fn geom(&self, h: usize, w: usize) -> ConvGeom {
        ConvGeom { cin: self.in_channels, h, w, k: self.kernel, stride: self.stride, pad: self.padding() }
    }

    fn out_dims(&self, idx: usize, kind: LayerKind, dims: &[usize]) -> Result<Vec<usize>> {
        match *dims {
            [n, c, h, w] if c == self.in_channels => {
                let (oh, ow) = self.geom(h, w).out_hw();
                Ok(vec![n, self.out_channels, oh, ow])
            }
            _ => Err(TensorError::ShapeMismatch {
                layer: idx,
                kind,
                expected: format!("N×{}×H×W", self.in_channels),
                got: dims.to_vec(),
            }),
        }
    }

    fn apply(&self, x: &Tensor<T>, out_dims: Vec<usize>) -> Tensor<T> {
        let (n, _, h, w) = x.nchw().expect("validated");
        let data = kernels::conv_forward(
            &x.data,
            n,
            &self.geom(h, w),
            &self.weight.value.data,
            self.out_channels,
            self.bias.as_ref().map(|b| &b.value.data[..]),
        );
        Tensor::from_parts(out_dims, data)
    }

    fn grads(&mut self, x: &Tensor<T>, gy: &Tensor<T>) -> Tensor<T> {
        let (n, _, h, w) = x.nchw().expect("validated");
        let geom = self.geom(h, w);
        let len = self.weight.value.data.len();
        let wt = &mut self.weight.value;
        let gw = wt.grad.get_or_insert_with(|| vec![T::zero(); len]);
        let gb = self.bias.as_mut().map(|b| {
            let l = b.value.data.len();
            &mut b.value.grad.get_or_insert_with(|| vec![T::zero(); l])[..]
        });
        let gx = kernels::conv_backward(&x.data, n, &geom, &wt.data, self.out_channels, &gy.data, gw, gb, true)
            .expect("requested");
        Tensor::from_parts(x.dims.clone(), gx)
    }
}

/// Nearest-neighbour 2× upsampling followed by a convolution.
#[derive(Debug, Clone)]
pub struct Upsample<T: Element> {
    pub conv: Conv2d<T>,
}

impl<T: Element> Upsample<T> {
    /// 3×3 convolution without bias (a batch norm is expected to follow).
    pub fn new<R: Rng>(name: &str, in_channels: usize, out_channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Upsample { conv: Conv2d::new(name, in_channels, out_channels, 3, 1, false, rng)? })
    }
}

/// Per-channel batch normalisation with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Element> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub channels: usize,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        let v = |x: T| Tensor::from_parts(vec![channels], vec![x; channels]);
        BatchNorm2d {
            gamma: Param::new(format!("{name}.gamma"), v(T::one())),
            beta: Param::new(format!("{name}.beta"), v(T::zero())),
            running_mean: Param::new(format!("{name}.running_mean"), v(T::zero())),
            running_var: Param::new(format!("{name}.running_var"), v(T::one())),
            channels,
        }
    }
}

/// Fully connected layer `y = x Wᵀ + b` on N×in inputs.
#[derive(Debug, Clone)]
pub struct Dense<T: Element> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Element> Dense<T> {
    pub fn new<R: Rng>(name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        Dense {
            weight: Param::new(
                format!("{name}.weight"),
                Tensor::from_parts(
                    vec![out_features, in_features],
                    he_normal(rng, out_features * in_features, in_features),
                ),
            ),
            bias: Param::new(
                format!("{name}.bias"),
                Tensor::from_parts(vec![out_features], vec![T::zero(); out_features]),
            ),
            in_features,
            out_features,
        }
    }
}

/// `relu(main(x) + shortcut(x))`; an empty shortcut chain is the identity.
#[derive(Debug, Clone)]
pub struct ResidualBlock<T: Element> {
    pub main: Chain<T>,
    pub shortcut: Chain<T>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

impl<T: Element> ResidualBlock<T> {
    /// Two 3×3 convolutions (ResNet "basic" block).
    pub fn basic<R: Rng>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let main = Chain::new(vec![
            Layer::Conv2d(Conv2d::new(&format!("{name}.conv1"), in_channels, out_channels, 3, stride, false, rng)?),
            Layer::BatchNorm2d(BatchNorm2d::new(&format!("{name}.bn1"), out_channels)),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(&format!("{name}.conv2"), out_channels, out_channels, 3, 1, false, rng)?),
            Layer::BatchNorm2d(BatchNorm2d::new(&format!("{name}.bn2"), out_channels)),
        ])?;
        Self::with_main(name, main, in_channels, out_channels, stride, rng)
    }

    /// 1×1 reduce, 3×3, 1×1 expand (ResNet "bottleneck" block).
    pub fn bottleneck<R: Rng>(
        name: &str,
        in_channels: usize,
        width: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let main = Chain::new(vec![
            Layer::Conv2d(Conv2d::new(&format!("{name}.conv1"), in_channels, width, 1, 1, false, rng)?),
            Layer::BatchNorm2d(BatchNorm2d::new(&format!("{name}.bn1"), width)),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(&format!("{name}.conv2"), width, width, 3, stride, false, rng)?),
            Layer::BatchNorm2d(BatchNorm2d::new(&format!("{name}.bn2"), width)),
            Layer::Relu,
            Layer::Conv2d(Conv2d::new(&format!("{name}.conv3"), width, out_channels, 1, 1, false, rng)?),
            Layer::BatchNorm2d(BatchNorm2d::new(&format!("{name}.bn3"), out_channels)),
        ])?;
        Self::with_main(name, main, in_channels, out_channels, stride, rng)
    }

    fn with_main<R: Rng>(
        name: &str,
        main: Chain<T>,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let shortcut = if in_channels == out_channels && stride == 1 {
            Chain::new(Vec::new())?
        } else {
            Chain::new(vec![
                Layer::Conv2d(Conv2d::new(&format!("{name}.proj"), in_channels, out_channels, 1, stride, false, rng)?),
                Layer::BatchNorm2d(BatchNorm2d::new(&format!("{name}.proj_bn"), out_channels)),
            ])?
        };
        Ok(ResidualBlock { main, shortcut, in_channels, out_channels, stride })
    }
}

/// One step of a [`Chain`].
#[derive(Debug, Clone)]
pub enum Layer<T: Element> {
    Conv2d(Conv2d<T>),
    Upsample(Upsample<T>),
    MaxPool2x2,
    BatchNorm2d(BatchNorm2d<T>),
    Relu,
    Sigmoid,
    /// Softmax over the feature axis of an N×K tensor.
    Softmax,
    Dense(Dense<T>),
    GlobalAvgPool,
    Residual(Box<ResidualBlock<T>>),
    /// Appends the channels of the output of layer `from` (same chain) to the
    /// current activation.
    ConcatSkip {
        from: usize,
    },
}

/// What a train-mode forward keeps beyond the layer's input and output.
#[derive(Debug)]
pub(crate) enum LayerCache<T: Element> {
    None,
    Norm { mean: Vec<T>, inv_std: Vec<T> },
    Residual { main: ChainTape<T>, shortcut: ChainTape<T> },
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Upsample(_) => LayerKind::TransposedUpsample,
            Layer::MaxPool2x2 => LayerKind::Maxpool2x2,
            Layer::BatchNorm2d(_) => LayerKind::Batchnorm2d,
            Layer::Relu => LayerKind::Relu,
            Layer::Sigmoid => LayerKind::Sigmoid,
            Layer::Softmax => LayerKind::Softmax,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::Residual(_) => LayerKind::ResidualBlock,
            Layer::ConcatSkip { .. } => LayerKind::ConcatSkip,
        }
    }

    pub fn spec(&self) -> LayerSpec {
        let mut spec = LayerSpec::bare(self.kind());
        let conv_spec = |spec: &mut LayerSpec, c: &Conv2d<T>| {
            spec.kernel = Some(c.kernel);
            spec.stride = Some(c.stride);
            spec.padding = Some(c.padding());
            spec.in_channels = Some(c.in_channels);
            spec.out_channels = Some(c.out_channels);
        };
        match self {
            Layer::Conv2d(c) => conv_spec(&mut spec, c),
            Layer::Upsample(u) => conv_spec(&mut spec, &u.conv),
            Layer::BatchNorm2d(b) => {
                spec.in_channels = Some(b.channels);
                spec.out_channels = Some(b.channels);
            }
            Layer::Dense(d) => {
                spec.in_channels = Some(d.in_features);
                spec.out_channels = Some(d.out_features);
            }
            Layer::Residual(r) => {
                spec.stride = Some(r.stride);
                spec.in_channels = Some(r.in_channels);
                spec.out_channels = Some(r.out_channels);
            }
            Layer::MaxPool2x2 => {
                spec.kernel = Some(2);
                spec.stride = Some(2);
            }
            _ => {}
        }
        self.visit_state(&mut |p| spec.param_names.push(p.name.clone()));
        spec
    }

    /// Visits trainable parameters.
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Layer::Conv2d(c) => {
                f(&mut c.weight);
                if let Some(b) = c.bias.as_mut() {
                    f(b);
                }
            }
            Layer::Upsample(u) => Layer::visit_conv_mut(&mut u.conv, f),
            Layer::BatchNorm2d(b) => {
                f(&mut b.gamma);
                f(&mut b.beta);
            }
            Layer::Dense(d) => {
                f(&mut d.weight);
                f(&mut d.bias);
            }
            Layer::Residual(r) => {
                r.main.visit_params_mut(f);
                r.shortcut.visit_params_mut(f);
            }
            _ => {}
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Layer::Conv2d(c) => {
                f(&c.weight);
                if let Some(b) = c.bias.as_ref() {
                    f(b);
                }
            }
            Layer::Upsample(u) => {
                f(&u.conv.weight);
                if let Some(b) = u.conv.bias.as_ref() {
                    f(b);
                }
            }
            Layer::BatchNorm2d(b) => {
                f(&b.gamma);
                f(&b.beta);
            }
            Layer::Dense(d) => {
                f(&d.weight);
                f(&d.bias);
            }
            Layer::Residual(r) => {
                r.main.visit_params(f);
                r.shortcut.visit_params(f);
            }
            _ => {}
        }
    }

    fn visit_conv_mut(c: &mut Conv2d<T>, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut c.weight);
        if let Some(b) = c.bias.as_mut() {
            f(b);
        }
    }

    /// Visits every persisted tensor: parameters and running statistics.
    pub fn visit_state(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Layer::Conv2d(c) => {
                f(&c.weight);
                if let Some(b) = c.bias.as_ref() {
                    f(b);
                }
            }
            Layer::Upsample(u) => {
                f(&u.conv.weight);
                if let Some(b) = u.conv.bias.as_ref() {
                    f(b);
                }
            }
            Layer::BatchNorm2d(b) => {
                f(&b.gamma);
                f(&b.beta);
                f(&b.running_mean);
                f(&b.running_var);
            }
            Layer::Dense(d) => {
                f(&d.weight);
                f(&d.bias);
            }
            Layer::Residual(r) => {
                r.main.visit_state(f);
                r.shortcut.visit_state(f);
            }
            _ => {}
        }
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Layer::BatchNorm2d(b) => {
                f(&mut b.gamma);
                f(&mut b.beta);
                f(&mut b.running_mean);
                f(&mut b.running_var);
            }
            Layer::Residual(r) => {
                r.main.visit_state_mut(f);
                r.shortcut.visit_state_mut(f);
            }
            other => other.visit_params_mut(f),
        }
    }

    fn mismatch(&self, idx: usize, expected: impl Into<String>, got: &[usize]) -> TensorError {
        TensorError::ShapeMismatch { layer: idx, kind: self.kind(), expected: expected.into(), got: got.to_vec() }
    }

    /// Shape inference without evaluating anything.
    pub fn output_dims(&self, idx: usize, x: &[usize], skip: Option<&[usize]>) -> Result<Vec<usize>> {
        let kind = self.kind();
        match self {
            Layer::Conv2d(c) => c.out_dims(idx, kind, x),
            Layer::Upsample(u) => match *x {
                [n, c, h, w] => u.conv.out_dims(idx, kind, &[n, c, 2 * h, 2 * w]),
                _ => Err(self.mismatch(idx, "N×C×H×W", x)),
            },
            Layer::MaxPool2x2 => match *x {
                [n, c, h, w] if h >= 2 && w >= 2 => Ok(vec![n, c, h / 2, w / 2]),
                _ => Err(self.mismatch(idx, "N×C×H×W with H,W ≥ 2", x)),
            },
            Layer::BatchNorm2d(b) => match *x {
                [_, c, _, _] if c == b.channels => Ok(x.to_vec()),
                _ => Err(self.mismatch(idx, format!("N×{}×H×W", b.channels), x)),
            },
            Layer::Relu | Layer::Sigmoid => Ok(x.to_vec()),
            Layer::Softmax => match *x {
                [_, _] => Ok(x.to_vec()),
                _ => Err(self.mismatch(idx, "N×K", x)),
            },
            Layer::Dense(d) => match *x {
                [n, f] if f == d.in_features => Ok(vec![n, d.out_features]),
                _ => Err(self.mismatch(idx, format!("N×{}", d.in_features), x)),
            },
            Layer::GlobalAvgPool => match *x {
                [n, c, _, _] => Ok(vec![n, c]),
                _ => Err(self.mismatch(idx, "N×C×H×W", x)),
            },
            Layer::Residual(r) => {
                let main =
                    r.main.output_dims(x).map_err(|_| self.mismatch(idx, format!("N×{}×H×W", r.in_channels), x))?;
                let sc =
                    r.shortcut.output_dims(x).map_err(|_| self.mismatch(idx, format!("N×{}×H×W", r.in_channels), x))?;
                if main != sc {
                    return Err(self.mismatch(idx, format!("branches agreeing, got {main:?}/{sc:?}"), x));
                }
                Ok(main)
            }
            Layer::ConcatSkip { .. } => match (x, skip) {
                ([n, c, h, w], Some([sn, sc, sh, sw])) if n == sn && h == sh && w == sw => Ok(vec![*n, c + sc, *h, *w]),
                _ => Err(self.mismatch(idx, format!("N×C×H×W matching skip source {skip:?}"), x)),
            },
        }
    }

    /// Eval-mode evaluation; no state is touched.
    pub(crate) fn infer(&self, idx: usize, x: &Tensor<T>, skip: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let out_dims = self.output_dims(idx, &x.dims, skip.map(|s| &s.dims[..]))?;
        Ok(match self {
            Layer::BatchNorm2d(b) => {
                let (n, c, h, w) = x.nchw().expect("validated");
                let eps = T::from_f64_lossy(BN_EPSILON);
                let hw = h * w;
                let mut out = x.data.clone();
                for ni in 0..n {
                    for ci in 0..c {
                        let scale = b.gamma.value.data[ci] / (b.running_var.value.data[ci] + eps).sqrt();
                        let shift = b.beta.value.data[ci] - b.running_mean.value.data[ci] * scale;
                        let s = (ni * c + ci) * hw;
                        out[s..s + hw].iter_mut().for_each(|v| *v = *v * scale + shift);
                    }
                }
                Tensor::from_parts(out_dims, out)
            }
            Layer::Residual(r) => {
                let main = r.main.infer(x)?;
                let sc = r.shortcut.infer(x)?;
                let data = main.data.iter().zip(&sc.data).map(|(&a, &b)| (a + b).max(T::zero())).collect();
                Tensor::from_parts(out_dims, data)
            }
            _ => self.stateless_forward(x, skip, out_dims),
        })
    }

    /// Forward shared by both modes for layers whose train and eval
    /// behaviour coincide.
    fn stateless_forward(&self, x: &Tensor<T>, skip: Option<&Tensor<T>>, out_dims: Vec<usize>) -> Tensor<T> {
        match self {
            Layer::Conv2d(c) => c.apply(x, out_dims),
            Layer::Upsample(u) => {
                let (n, c, h, w) = x.nchw().expect("validated");
                let up = Tensor::from_parts(vec![n, c, 2 * h, 2 * w], kernels::upsample2_forward(&x.data, n * c, h, w));
                u.conv.apply(&up, out_dims)
            }
            Layer::MaxPool2x2 => {
                let (n, c, h, w) = x.nchw().expect("validated");
                Tensor::from_parts(out_dims, kernels::maxpool2_forward(&x.data, n * c, h, w))
            }
            Layer::Relu => Tensor::from_parts(out_dims, x.data.iter().map(|v| v.max(T::zero())).collect()),
            Layer::Sigmoid => Tensor::from_parts(out_dims, x.data.iter().map(|&v| sigmoid(v)).collect()),
            Layer::Softmax => {
                let k = x.dims[1];
                let mut out = x.data.clone();
                for row in out.chunks_exact_mut(k) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    row.iter_mut().for_each(|v| *v = (*v - m).exp());
                    let s: T = row.iter().copied().sum();
                    row.iter_mut().for_each(|v| *v = *v / s);
                }
                Tensor::from_parts(out_dims, out)
            }
            Layer::Dense(d) => {
                let n = x.dims[0];
                let mut out = vec![T::zero(); n * d.out_features];
                kernels::matmul(
                    n,
                    d.in_features,
                    d.out_features,
                    &x.data,
                    false,
                    &d.weight.value.data,
                    true,
                    &mut out,
                    false,
                );
                for row in out.chunks_exact_mut(d.out_features) {
                    row.iter_mut().zip(&d.bias.value.data).for_each(|(v, &b)| *v = *v + b);
                }
                Tensor::from_parts(out_dims, out)
            }
            Layer::GlobalAvgPool => {
                let (_, _, h, w) = x.nchw().expect("validated");
                let inv = T::one() / T::from_usize(h * w).expect("size");
                let data = x.data.chunks_exact(h * w).map(|p| p.iter().copied().sum::<T>() * inv).collect();
                Tensor::from_parts(out_dims, data)
            }
            Layer::ConcatSkip { .. } => {
                let skip = skip.expect("validated");
                let (n, c1, h, w) = x.nchw().expect("validated");
                let c2 = skip.dims[1];
                let (a, b) = (c1 * h * w, c2 * h * w);
                let mut out = Vec::with_capacity(n * (a + b));
                for ni in 0..n {
                    out.extend_from_slice(&x.data[ni * a..(ni + 1) * a]);
                    out.extend_from_slice(&skip.data[ni * b..(ni + 1) * b]);
                }
                Tensor::from_parts(out_dims, out)
            }
            Layer::BatchNorm2d(_) | Layer::Residual(_) => unreachable!("mode-dependent layers"),
        }
    }

    /// Train-mode forward. Batch norm uses batch statistics and updates its
    /// running estimates.
    pub(crate) fn forward_train(
        &mut self,
        idx: usize,
        x: &Tensor<T>,
        skip: Option<&Tensor<T>>,
    ) -> Result<(Tensor<T>, LayerCache<T>)> {
        let out_dims = self.output_dims(idx, &x.dims, skip.map(|s| &s.dims[..]))?;
        match self {
            Layer::BatchNorm2d(b) => {
                let (n, c, h, w) = x.nchw().expect("validated");
                let hw = h * w;
                let count = n * hw;
                let cnt = T::from_usize(count).expect("size");
                let eps = T::from_f64_lossy(BN_EPSILON);
                let mom = T::from_f64_lossy(BN_MOMENTUM);
                let mut mean = vec![T::zero(); c];
                let mut inv_std = vec![T::zero(); c];
                let mut out = vec![T::zero(); x.data.len()];
                for ci in 0..c {
                    let planes = (0..n).map(|ni| &x.data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw]);
                    let mu = planes.clone().flatten().copied().sum::<T>() / cnt;
                    let var = planes.clone().flatten().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cnt;
                    let is = T::one() / (var + eps).sqrt();
                    mean[ci] = mu;
                    inv_std[ci] = is;
                    let (g, be) = (b.gamma.value.data[ci], b.beta.value.data[ci]);
                    for ni in 0..n {
                        let s = (ni * c + ci) * hw;
                        for (o, &v) in out[s..s + hw].iter_mut().zip(&x.data[s..s + hw]) {
                            *o = g * (v - mu) * is + be;
                        }
                    }
                    let unbiased = if count > 1 { var * cnt / (cnt - T::one()) } else { var };
                    let rm = &mut b.running_mean.value.data[ci];
                    *rm = (T::one() - mom) * *rm + mom * mu;
                    let rv = &mut b.running_var.value.data[ci];
                    *rv = (T::one() - mom) * *rv + mom * unbiased;
                }
                Ok((Tensor::from_parts(out_dims, out), LayerCache::Norm { mean, inv_std }))
            }
            Layer::Residual(r) => {
                let main = r.main.forward_train(x).map_err(|e| relabel(e, idx))?;
                let shortcut = r.shortcut.forward_train(x).map_err(|e| relabel(e, idx))?;
                let a = main.output().unwrap_or(x);
                let b = shortcut.output().unwrap_or(x);
                let data = a.data.iter().zip(&b.data).map(|(&p, &q)| (p + q).max(T::zero())).collect();
                Ok((Tensor::from_parts(out_dims, data), LayerCache::Residual { main, shortcut }))
            }
            _ => Ok((self.stateless_forward(x, skip, out_dims), LayerCache::None)),
        }
    }

    /// Accumulates parameter gradients and returns (input grad, skip grad).
    pub(crate) fn backward(
        &mut self,
        idx: usize,
        x: &Tensor<T>,
        y: &Tensor<T>,
        gy: Tensor<T>,
        cache: LayerCache<T>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let gx = match self {
            Layer::Conv2d(c) => c.grads(x, &gy),
            Layer::Upsample(u) => {
                let (n, ch, h, w) = x.nchw().expect("validated");
                let up =
                    Tensor::from_parts(vec![n, ch, 2 * h, 2 * w], kernels::upsample2_forward(&x.data, n * ch, h, w));
                let gup = u.conv.grads(&up, &gy);
                Tensor::from_parts(x.dims.clone(), kernels::upsample2_backward(&gup.data, n * ch, h, w))
            }
            Layer::MaxPool2x2 => {
                let (n, c, h, w) = x.nchw().expect("validated");
                Tensor::from_parts(x.dims.clone(), kernels::maxpool2_backward(&x.data, n * c, h, w, &gy.data))
            }
            Layer::BatchNorm2d(b) => {
                let LayerCache::Norm { mean, inv_std } = cache else {
                    return Err(TensorError::NoForwardCache);
                };
                let (n, c, h, w) = x.nchw().expect("validated");
                let hw = h * w;
                let cnt = T::from_usize(n * hw).expect("size");
                let mut gx = vec![T::zero(); x.data.len()];
                let gg = b.gamma.value.grad_mut();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ci in 0..c {
                    let (mu, is) = (mean[ci], inv_std[ci]);
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for ni in 0..n {
                        let s = (ni * c + ci) * hw;
                        for (&g, &v) in gy.data[s..s + hw].iter().zip(&x.data[s..s + hw]) {
                            sg = sg + g;
                            sgx = sgx + g * (v - mu) * is;
                        }
                    }
                    dgamma[ci] = sgx;
                    dbeta[ci] = sg;
                }
                for ci in 0..c {
                    gg[ci] = gg[ci] + dgamma[ci];
                }
                let gb = b.beta.value.grad_mut();
                for ci in 0..c {
                    gb[ci] = gb[ci] + dbeta[ci];
                }
                for ci in 0..c {
                    let (mu, is) = (mean[ci], inv_std[ci]);
                    let k = b.gamma.value.data[ci] * is / cnt;
                    for ni in 0..n {
                        let s = (ni * c + ci) * hw;
                        for ((o, &g), &v) in gx[s..s + hw].iter_mut().zip(&gy.data[s..s + hw]).zip(&x.data[s..s + hw]) {
                            let xh = (v - mu) * is;
                            *o = k * (cnt * g - dbeta[ci] - xh * dgamma[ci]);
                        }
                    }
                }
                Tensor::from_parts(x.dims.clone(), gx)
            }
            Layer::Relu => {
                let data =
                    gy.data.iter().zip(&x.data).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                Tensor::from_parts(x.dims.clone(), data)
            }
            Layer::Sigmoid => {
                let data = gy.data.iter().zip(&y.data).map(|(&g, &s)| g * s * (T::one() - s)).collect();
                Tensor::from_parts(x.dims.clone(), data)
            }
            Layer::Softmax => {
                let k = x.dims[1];
                let mut data = Vec::with_capacity(gy.data.len());
                for (grow, yrow) in gy.data.chunks_exact(k).zip(y.data.chunks_exact(k)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&g, &s)| g * s).sum();
                    data.extend(grow.iter().zip(yrow).map(|(&g, &s)| s * (g - dot)));
                }
                Tensor::from_parts(x.dims.clone(), data)
            }
            Layer::Dense(d) => {
                let n = x.dims[0];
                let (fi, fo) = (d.in_features, d.out_features);
                // gW (fo×fi) += gYᵀ (fo×n) · X (n×fi)
                matmul_acc(fo, n, fi, &gy.data, true, &x.data, false, d.weight.value.grad_mut());
                let gb = d.bias.value.grad_mut();
                for row in gy.data.chunks_exact(fo) {
                    gb.iter_mut().zip(row).for_each(|(b, &g)| *b = *b + g);
                }
                let mut gx = vec![T::zero(); n * fi];
                kernels::matmul(n, fo, fi, &gy.data, false, &d.weight.value.data, false, &mut gx, false);
                Tensor::from_parts(x.dims.clone(), gx)
            }
            Layer::GlobalAvgPool => {
                let (_, _, h, w) = x.nchw().expect("validated");
                let inv = T::one() / T::from_usize(h * w).expect("size");
                let mut gx = Vec::with_capacity(x.data.len());
                for &g in &gy.data {
                    gx.extend(std::iter::repeat_n(g * inv, h * w));
                }
                Tensor::from_parts(x.dims.clone(), gx)
            }
            Layer::Residual(r) => {
                let LayerCache::Residual { main, shortcut } = cache else {
                    return Err(TensorError::NoForwardCache);
                };
                let gpre: Vec<T> =
                    gy.data.iter().zip(&y.data).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                let gpre = Tensor::from_parts(y.dims.clone(), gpre);
                let g_main = r.main.backward(x, main, gpre.clone()).map_err(|e| relabel(e, idx))?;
                let g_sc = r.shortcut.backward(x, shortcut, gpre).map_err(|e| relabel(e, idx))?;
                let data = g_main.data.iter().zip(&g_sc.data).map(|(&a, &b)| a + b).collect();
                Tensor::from_parts(x.dims.clone(), data)
            }
            Layer::ConcatSkip { .. } => {
                let (n, c1, h, w) = x.nchw().expect("validated");
                let c2 = y.dims[1] - c1;
                let (a, b) = (c1 * h * w, c2 * h * w);
                let mut gx = Vec::with_capacity(n * a);
                let mut gs = Vec::with_capacity(n * b);
                for chunk in gy.data.chunks_exact(a + b) {
                    gx.extend_from_slice(&chunk[..a]);
                    gs.extend_from_slice(&chunk[a..]);
                }
                return Ok((Tensor::from_parts(x.dims.clone(), gx), Some(Tensor::from_parts(vec![n, c2, h, w], gs))));
            }
        };
        Ok((gx, None))
    }

    /// Fingerprint of the piecewise-linear regions the activation currently
    /// sits in (ReLU signs, pooling winners).
    pub(crate) fn kink_pattern(&self, x: &Tensor<T>, y: &Tensor<T>, cache: &LayerCache<T>) -> u64 {
        let sign_bits = |t: &Tensor<T>| {
            t.data.iter().fold(0xcbf2_9ce4_8422_2325u64, |acc, v| {
                (acc ^ u64::from(*v > T::zero())).wrapping_mul(0x0100_0000_01b3)
            })
        };
        match (self, cache) {
            (Layer::Relu, _) => sign_bits(y),
            (Layer::MaxPool2x2, _) => {
                let (n, c, h, w) = x.nchw().expect("validated");
                kernels::maxpool2_pattern(&x.data, n * c, h, w)
            }
            (Layer::Residual(r), LayerCache::Residual { main, shortcut }) => {
                sign_bits(y)
                    ^ r.main.kink_pattern(x, main).rotate_left(7)
                    ^ r.shortcut.kink_pattern(x, shortcut).rotate_left(13)
            }
            _ => 0,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_acc<T: Element>(m: usize, k: usize, n: usize, a: &[T], a_t: bool, b: &[T], b_t: bool, c: &mut [T]) {
    kernels::matmul(m, k, n, a, a_t, b, b_t, c, true);
}

/// Errors from inside a composite layer are reported at the composite's
/// position in the enclosing chain.
fn relabel(e: TensorError, idx: usize) -> TensorError {
    match e {
        TensorError::ShapeMismatch { expected, got, kind, .. } => {
            TensorError::ShapeMismatch { layer: idx, kind, expected, got }
        }
        TensorError::NonFinite { kind, .. } => TensorError::NonFinite { layer: idx, kind },
        other => other,
    }
}
