use super::{Buffer, Mode, Module, Param, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{Conv2dOpts, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Fully connected layer: `x · W + b` with `W: [d_in, d_out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new(name: &str, d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Param::new(
                format!("{name}.weight"),
                &[d_in, d_out],
                ParamKind::Weight { fan_in: d_in },
            ),
            bias: Param::new(format!("{name}.bias"), &[d_out], ParamKind::Bias),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.len() != 2 || s[1] != self.d_in() {
            return Err(Error::shape(format!(
                "{} expects [B, {}], got {s:?}",
                self.weight.name,
                self.d_in()
            )));
        }
        let w = self.weight.bind(tape);
        let b = self.bias.bind(tape);
        let xw = tape.matmul(x, w)?;
        tape.add(xw, b)
    }
}

impl Module for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
        f(&self.bias);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Bias-free convolution (regular or depthwise).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub opts: Conv2dOpts,
    pub depthwise: bool,
}

impl Conv2d {
    pub fn new(name: &str, c_in: usize, c_out: usize, k: [usize; 2], opts: Conv2dOpts) -> Self {
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                &[c_out, c_in, k[0], k[1]],
                ParamKind::Weight {
                    fan_in: c_in * k[0] * k[1],
                },
            ),
            opts,
            depthwise: false,
        }
    }

    pub fn depthwise(name: &str, channels: usize, k: [usize; 2], opts: Conv2dOpts) -> Self {
        Conv2d {
            weight: Param::new(
                format!("{name}.weight"),
                &[channels, 1, k[0], k[1]],
                ParamKind::Weight { fan_in: k[0] * k[1] },
            ),
            opts,
            depthwise: true,
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = self.weight.bind(tape);
        if self.depthwise {
            tape.depthwise_conv2d(x, w, self.opts)
        } else {
            tape.conv2d(x, w, self.opts)
        }
    }
}

impl Module for Conv2d {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
    }
}

/// Per-channel batch normalization over `[B, C, H, W]`.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Buffer,
    pub running_var: Buffer,
    pub momentum: f64,
    pub eps: f64,
    pub mode: Mode,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), &[channels], ParamKind::Gamma),
            beta: Param::new(format!("{name}.beta"), &[channels], ParamKind::Beta),
            running_mean: Buffer {
                name: format!("{name}.running_mean"),
                value: Tensor::zeros(&[channels]),
            },
            running_var: Buffer {
                name: format!("{name}.running_var"),
                value: Tensor::full(&[channels], 1.0),
            },
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: Mode::Train,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.numel()
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let c = self.channels();
        if s.len() != 4 || s[1] != c {
            return Err(Error::shape(format!(
                "{} expects [B, {c}, H, W], got {s:?}",
                self.gamma.name
            )));
        }
        let (mean, var) = match self.mode {
            Mode::Train => {
                let mean = tape.mean(x, &[0, 2, 3], true)?;
                let var = tape.var(x, &[0, 2, 3], true)?;
                let m = self.momentum;
                for (r, b) in self.running_mean.value.data_mut().iter_mut().zip(tape.data(mean)) {
                    *r = (1.0 - m) * *r + m * b;
                }
                for (r, b) in self.running_var.value.data_mut().iter_mut().zip(tape.data(var)) {
                    *r = (1.0 - m) * *r + m * b;
                }
                (mean, var)
            }
            Mode::Eval => {
                let mean = tape.constant(&self.running_mean.value.reshaped(&[1, c, 1, 1])?);
                let var = tape.constant(&self.running_var.value.reshaped(&[1, c, 1, 1])?);
                (mean, var)
            }
        };
        let centered = tape.sub(x, mean)?;
        let shifted = tape.add_scalar(var, self.eps)?;
        let std = tape.sqrt(shifted)?;
        let normed = tape.div(centered, std)?;
        let g = self.gamma.bind(tape);
        let g = tape.reshape(g, &[c, 1, 1])?;
        let b = self.beta.bind(tape);
        let b = tape.reshape(b, &[c, 1, 1])?;
        let scaled = tape.mul(normed, g)?;
        tape.add(scaled, b)
    }
}

impl Module for BatchNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.gamma);
        f(&self.beta);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer)) {
        f(&self.running_mean);
        f(&self.running_var);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        f(&mut self.running_mean);
        f(&mut self.running_var);
    }
    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }
}

#[derive(Clone, Debug)]
pub struct PRelu {
    pub alpha: Param,
}

impl PRelu {
    pub fn new(name: &str, channels: usize) -> Self {
        PRelu {
            alpha: Param::new(format!("{name}.alpha"), &[channels], ParamKind::Slope),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let a = self.alpha.bind(tape);
        tape.prelu(x, a)
    }
}

impl Module for PRelu {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.alpha);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.alpha);
    }
}

/// Convolution followed by batch norm and PReLU.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub act: PRelu,
}

impl ConvBnAct {
    pub fn new(name: &str, conv: Conv2d, channels: usize) -> Self {
        ConvBnAct {
            conv,
            bn: BatchNorm::new(&format!("{name}.bn"), channels),
            act: PRelu::new(&format!("{name}.act"), channels),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.bn.forward(tape, y)?;
        self.act.forward(tape, y)
    }
}

impl Module for ConvBnAct {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.conv.visit_params(f);
        self.bn.visit_params(f);
        self.act.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f);
        self.bn.visit_params_mut(f);
        self.act.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer)) {
        self.bn.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.bn.visit_buffers_mut(f);
    }
    fn set_mode(&mut self, mode: Mode) {
        self.bn.set_mode(mode);
    }
}

/// Depthwise-separable block: depthwise 3×3 stride 2, then pointwise 1×1,
/// each followed by batch norm and PReLU.
#[derive(Clone, Debug)]
pub struct DepthwiseBlock {
    pub dw: ConvBnAct,
    pub pw: ConvBnAct,
}

impl DepthwiseBlock {
    pub fn new(name: &str, c_in: usize, c_out: usize) -> Self {
        let dw = Conv2d::depthwise(&format!("{name}.dw.conv"), c_in, [3, 3], Conv2dOpts::new(2, 1));
        let pw = Conv2d::new(&format!("{name}.pw.conv"), c_in, c_out, [1, 1], Conv2dOpts::new(1, 0));
        DepthwiseBlock {
            dw: ConvBnAct::new(&format!("{name}.dw"), dw, c_in),
            pw: ConvBnAct::new(&format!("{name}.pw"), pw, c_out),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.dw.forward(tape, x)?;
        self.pw.forward(tape, y)
    }
}

impl Module for DepthwiseBlock {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        self.dw.visit_params(f);
        self.pw.visit_params(f);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.dw.visit_params_mut(f);
        self.pw.visit_params_mut(f);
    }
    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer)) {
        self.dw.visit_buffers(f);
        self.pw.visit_buffers(f);
    }
    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer)) {
        self.dw.visit_buffers_mut(f);
        self.pw.visit_buffers_mut(f);
    }
    fn set_mode(&mut self, mode: Mode) {
        self.dw.set_mode(mode);
        self.pw.set_mode(mode);
    }
}

/// Global depthwise convolution: one full-extent kernel per channel,
/// `[B, C, H, W] -> [B, C, 1, 1]`.
#[derive(Clone, Debug)]
pub struct GdConv {
    pub weight: Param,
}

impl GdConv {
    pub fn new(name: &str, channels: usize, h: usize, w: usize) -> Self {
        GdConv {
            weight: Param::new(
                format!("{name}.weight"),
                &[channels, 1, h, w],
                ParamKind::Weight { fan_in: h * w },
            ),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let k = self.weight.value.shape();
        if s.len() != 4 || s[1] != k[0] || s[2] != k[2] || s[3] != k[3] {
            return Err(Error::shape(format!(
                "{} kernel {k:?} does not span input {s:?}",
                self.weight.name
            )));
        }
        let w = self.weight.bind(tape);
        tape.depthwise_conv2d(x, w, Conv2dOpts::new(1, 0))
    }
}

impl Module for GdConv {
    fn visit_params(&self, f: &mut dyn FnMut(&Param)) {
        f(&self.weight);
    }
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
    }
}
