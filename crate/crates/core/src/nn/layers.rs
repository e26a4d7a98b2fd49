//! Parameterized layers over the tape.

use super::params::{ParamBuilder, ParamId, ParamKind};
use super::tape::{NodeId, Tape};

#[derive(Clone, Debug)]
pub struct Conv3d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv3d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let fan_in = cin * kernel.pow(3);
        let (weight, bias) = b.scope(name, |b| {
            let w = b.he_normal("weight", &[cout, cin, kernel, kernel, kernel], fan_in);
            let bias = bias.then(|| b.constant("bias", &[cout], 0.0, ParamKind::Bias));
            (w, bias)
        });
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
        }
    }

    /// Output layer variant with a small weight scale and a given bias.
    pub fn head(b: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, std: f32, bias: f32) -> Self {
        let (weight, bias) = b.scope(name, |b| {
            let w = b.normal("weight", &[cout, cin, 1, 1, 1], std, ParamKind::Weight);
            (w, b.constant("bias", &[cout], bias, ParamKind::Bias))
        });
        Self {
            weight,
            bias: Some(bias),
            cin,
            cout,
            kernel: 1,
            stride: 1,
            pad: 0,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        tape.conv3d(x, self.weight, self.bias, self.stride, self.pad)
    }
}

/// Kernel-2, stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct Upsample2 {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
}

impl Upsample2 {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, cin: usize, cout: usize, bias: bool) -> Self {
        let (weight, bias) = b.scope(name, |b| {
            let w = b.he_normal("weight", &[cin, cout, 2, 2, 2], cin);
            let bias = bias.then(|| b.constant("bias", &[cout], 0.0, ParamKind::Bias));
            (w, bias)
        });
        Self { weight, bias, cin, cout }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        tape.conv_transpose2(x, self.weight, self.bias)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm3d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm3d {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        b.scope(name, |b| Self {
            gamma: b.constant("weight", &[channels], 1.0, ParamKind::NormScale),
            beta: b.constant("bias", &[channels], 0.0, ParamKind::NormShift),
            running_mean: b.constant("running_mean", &[channels], 0.0, ParamKind::RunningStat),
            running_var: b.constant("running_var", &[channels], 1.0, ParamKind::RunningStat),
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        tape.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

/// Convolution followed by batch norm and an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv3d,
    pub bn: BatchNorm3d,
    pub relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut ParamBuilder<'_>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        relu: bool,
    ) -> Self {
        b.scope(name, |b| Self {
            conv: Conv3d::new(b, "conv", cin, cout, kernel, stride, pad, false),
            bn: BatchNorm3d::new(b, "bn", cout),
            relu,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        let y = self.conv.forward(tape, x);
        let y = self.bn.forward(tape, y);
        if self.relu {
            tape.relu(y)
        } else {
            y
        }
    }
}

/// Two 3×3×3 conv/BN layers with an identity shortcut.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub first: ConvBn,
    pub second: ConvBn,
}

impl ResBlock {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, channels: usize) -> Self {
        b.scope(name, |b| Self {
            first: ConvBn::new(b, "a", channels, channels, 3, 1, 1, true),
            second: ConvBn::new(b, "b", channels, channels, 3, 1, 1, false),
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        let y = self.first.forward(tape, x);
        let y = self.second.forward(tape, y);
        let y = tape.add(y, x);
        tape.relu(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fin: usize,
    pub fout: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, fin: usize, fout: usize) -> Self {
        b.scope(name, |b| Self {
            weight: b.he_normal("weight", &[fout, fin], fin),
            bias: b.constant("bias", &[fout], 0.0, ParamKind::Bias),
            fin,
            fout,
        })
    }

    pub fn with_std(b: &mut ParamBuilder<'_>, name: &str, fin: usize, fout: usize, std: f32) -> Self {
        b.scope(name, |b| Self {
            weight: b.normal("weight", &[fout, fin], std, ParamKind::Weight),
            bias: b.constant("bias", &[fout], 0.0, ParamKind::Bias),
            fin,
            fout,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: NodeId) -> NodeId {
        tape.linear(x, self.weight, self.bias)
    }
}
