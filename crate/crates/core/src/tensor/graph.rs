use super::chain::{Chain, ChainTape};
use super::{Element, Layer, Mode, Result, Tensor, TensorError};

/// A named tensor owned by a layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Param { name: name.into(), value }
    }
}

/// A model: an ordered layer chain with a declared per-sample input shape.
///
/// A graph is single-writer while training (train-mode forward records a
/// tape that the next backward consumes). [`ModelGraph::infer`] takes
/// `&self`, so a frozen graph can be shared across inference workers.
#[derive(Debug)]
pub struct ModelGraph<T: Element = f32> {
    name: String,
    input_signature: Vec<usize>,
    chain: Chain<T>,
    tape: Option<(Tensor<T>, ChainTape<T>)>,
}

/// Tapes are transient: a clone starts without one.
impl<T: Element> Clone for ModelGraph<T> {
    fn clone(&self) -> Self {
        ModelGraph {
            name: self.name.clone(),
            input_signature: self.input_signature.clone(),
            chain: self.chain.clone(),
            tape: None,
        }
    }
}

impl<T: Element> ModelGraph<T> {
    /// `input_signature` excludes the batch axis (e.g. `[3, 256, 256]`).
    pub fn new(name: impl Into<String>, input_signature: Vec<usize>, layers: Vec<Layer<T>>) -> Result<Self> {
        Ok(ModelGraph { name: name.into(), input_signature, chain: Chain::new(layers)?, tape: None })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_signature(&self) -> &[usize] {
        &self.input_signature
    }

    pub fn layers(&self) -> &[Layer<T>] {
        self.chain.layers()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.dims().len() != self.input_signature.len() + 1 || x.dims()[1..] != self.input_signature[..] {
            return Err(TensorError::InputSignature { expected: self.input_signature.clone(), got: x.dims().to_vec() });
        }
        Ok(())
    }

    /// Output shape for an input of the given full shape (batch included).
    pub fn output_dims(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.chain.output_dims(input)
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Eval => {
                self.tape = None;
                self.infer(x)
            }
            Mode::Train => {
                self.check_input(x)?;
                self.tape = None;
                let tape = self.chain.forward_train(x)?;
                let out = tape.output().cloned().unwrap_or_else(|| x.clone());
                self.tape = Some((x.clone(), tape));
                Ok(out)
            }
        }
    }

    /// Eval-mode forward that leaves the graph untouched.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        self.chain.infer(x)
    }

    /// Consumes the tape of the last train-mode forward, accumulates
    /// dLoss/dParam into every parameter's grad slot and returns dLoss/dInput.
    pub fn backward(&mut self, output_grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (input, tape) = self.tape.take().ok_or(TensorError::NoForwardCache)?;
        let expected = tape.output().unwrap_or(&input).dims().to_vec();
        if output_grad.dims() != expected {
            let got = output_grad.dims().to_vec();
            self.tape = Some((input, tape));
            return Err(TensorError::GradShape { expected, got });
        }
        let mut gy = output_grad.clone();
        gy.clear_grad();
        self.chain.backward(&input, tape, gy)
    }

    /// Fingerprint of the ReLU/max-pool regions hit by the cached forward.
    pub fn kink_pattern(&self) -> Option<u64> {
        self.tape.as_ref().map(|(x, t)| self.chain.kink_pattern(x, t))
    }

    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    pub fn discard_tape(&mut self) {
        self.tape = None;
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.value.zero_grad());
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.chain.visit_params_mut(f);
    }

    pub fn visit_state(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.chain.visit_state(f);
    }

    pub fn visit_state_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.chain.visit_state_mut(f);
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.chain.visit_params(f);
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.len());
        n
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit_state(&mut |p| out.push(p.name.clone()));
        out
    }

    /// Converts every tensor to another element type.
    pub fn cast<U: Element>(&self) -> ModelGraph<U> {
        let layers = self.chain.layers().iter().map(cast_layer).collect();
        ModelGraph::new(self.name.clone(), self.input_signature.clone(), layers).expect("casting keeps structure valid")
    }
}

fn cast_param<T: Element, U: Element>(p: &Param<T>) -> Param<U> {
    Param::new(p.name.clone(), p.value.cast())
}

fn cast_chain<T: Element, U: Element>(c: &Chain<T>) -> Chain<U> {
    Chain::new(c.layers().iter().map(cast_layer).collect()).expect("valid")
}

fn cast_conv<T: Element, U: Element>(c: &super::Conv2d<T>) -> super::Conv2d<U> {
    super::Conv2d {
        weight: cast_param(&c.weight),
        bias: c.bias.as_ref().map(cast_param),
        in_channels: c.in_channels,
        out_channels: c.out_channels,
        kernel: c.kernel,
        stride: c.stride,
    }
}

fn cast_layer<T: Element, U: Element>(l: &Layer<T>) -> Layer<U> {
    use super::{BatchNorm2d, Dense, ResidualBlock, Upsample};
    match l {
        Layer::Conv2d(c) => Layer::Conv2d(cast_conv(c)),
        Layer::Upsample(u) => Layer::Upsample(Upsample { conv: cast_conv(&u.conv) }),
        Layer::MaxPool2x2 => Layer::MaxPool2x2,
        Layer::BatchNorm2d(b) => Layer::BatchNorm2d(BatchNorm2d {
            gamma: cast_param(&b.gamma),
            beta: cast_param(&b.beta),
            running_mean: cast_param(&b.running_mean),
            running_var: cast_param(&b.running_var),
            channels: b.channels,
        }),
        Layer::Relu => Layer::Relu,
        Layer::Sigmoid => Layer::Sigmoid,
        Layer::Softmax => Layer::Softmax,
        Layer::Dense(d) => Layer::Dense(Dense {
            weight: cast_param(&d.weight),
            bias: cast_param(&d.bias),
            in_features: d.in_features,
            out_features: d.out_features,
        }),
        Layer::GlobalAvgPool => Layer::GlobalAvgPool,
        Layer::Residual(r) => Layer::Residual(Box::new(ResidualBlock {
            main: cast_chain(&r.main),
            shortcut: cast_chain(&r.shortcut),
            in_channels: r.in_channels,
            out_channels: r.out_channels,
            stride: r.stride,
        })),
        Layer::ConcatSkip { from } => Layer::ConcatSkip { from: *from },
    }
}
