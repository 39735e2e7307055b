//! Small composable layers shared by the backbone families.

use rand::Rng;

use crate::engine::{self, he_uniform, Parameter, Shape, Tape, Tensor};
use crate::error::Result;

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.9;

/// Standard convolution. Backbone convs are bias-free (batch norm follows).
pub(crate) struct ConvLayer {
    weight: Parameter,
    bias: Option<Parameter>,
    stride: usize,
    padding: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> ConvLayer {
        let fan_in = c_in * kernel * kernel;
        ConvLayer {
            weight: Parameter::new(
                format!("{name}.weight"),
                he_uniform(Shape::new(c_out, c_in, kernel, kernel), fan_in, rng),
            ),
            bias: bias.then(|| {
                Parameter::new(format!("{name}.bias"), Tensor::vector(vec![0.0; c_out]))
            }),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        engine::conv2d(
            tape,
            x,
            self.weight.tensor(),
            self.bias.as_ref().map(|b| b.tensor()),
            self.stride,
            self.padding,
        )
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        out.push(&self.weight);
        if let Some(b) = &self.bias {
            out.push(b);
        }
    }
}

/// Batch normalization layer owning its affine parameters and running stats.
pub(crate) struct BnLayer {
    gamma: Parameter,
    beta: Parameter,
    running_mean: Parameter,
    running_var: Parameter,
}

impl BnLayer {
    pub fn new(name: &str, channels: usize) -> BnLayer {
        BnLayer {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::vector(vec![1.0; channels])),
            beta: Parameter::new(format!("{name}.beta"), Tensor::vector(vec![0.0; channels])),
            running_mean: Parameter::buffer(
                format!("{name}.running_mean"),
                Tensor::vector(vec![0.0; channels]),
            ),
            running_var: Parameter::buffer(
                format!("{name}.running_var"),
                Tensor::vector(vec![1.0; channels]),
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor, training: bool) -> Result<Tensor> {
        engine::batch_norm(
            tape,
            x,
            self.gamma.tensor(),
            self.beta.tensor(),
            self.running_mean.tensor(),
            self.running_var.tensor(),
            training,
            BN_MOMENTUM,
            BN_EPS,
        )
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        out.push(&self.gamma);
        out.push(&self.beta);
        out.push(&self.running_mean);
        out.push(&self.running_var);
    }
}

/// Fully connected layer with bias.
pub(crate) struct DenseLayer {
    weight: Parameter,
    bias: Parameter,
}

impl DenseLayer {
    pub fn new<R: Rng>(name: &str, c_in: usize, c_out: usize, rng: &mut R) -> DenseLayer {
        DenseLayer {
            weight: Parameter::new(
                format!("{name}.weight"),
                he_uniform(Shape::new(c_out, c_in, 1, 1), c_in, rng),
            ),
            bias: Parameter::new(format!("{name}.bias"), Tensor::vector(vec![0.0; c_out])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        engine::dense(tape, x, self.weight.tensor(), Some(self.bias.tensor()))
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }
}

/// Depthwise-separable convolution: per-channel 3×3 followed by a 1×1 mix.
/// Bias-free; batch norm follows in every use.
pub(crate) struct SeparableConv {
    depthwise: Parameter,
    pointwise: Parameter,
}

impl SeparableConv {
    pub fn new<R: Rng>(name: &str, c_in: usize, c_out: usize, rng: &mut R) -> SeparableConv {
        SeparableConv {
            depthwise: Parameter::new(
                format!("{name}.depthwise.weight"),
                he_uniform(Shape::new(c_in, 1, 3, 3), 9, rng),
            ),
            pointwise: Parameter::new(
                format!("{name}.pointwise.weight"),
                he_uniform(Shape::new(c_out, c_in, 1, 1), c_in, rng),
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: &Tensor) -> Result<Tensor> {
        let h = engine::depthwise_conv2d(tape, x, self.depthwise.tensor(), None, 1, 1)?;
        engine::pointwise_conv2d(tape, &h, self.pointwise.tensor(), None)
    }

    pub fn collect<'a>(&'a self, out: &mut Vec<&'a Parameter>) {
        out.push(&self.depthwise);
        out.push(&self.pointwise);
    }
}
