//! 3D residual encoder-decoder with named feature endpoints.
//!
//! Encoder stages run at strides 1, 2, 4, 8 with widths `c, 2c, 4c, 8c`. The
//! decoder upsamples the stride-8 output once and fuses it with the stride-4
//! encoder output, so `down_4` and `feature_map_4` share a grid but differ in
//! receptive field.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::layers::{BatchNorm3d, ConvBn, ResBlock, Upsample2};
use crate::nn::{NodeId, ParamBuilder, Tape};
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;
/// Input sides must be multiples of the deepest stride.
pub const INPUT_MULTIPLE: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackboneError {
    #[error("input {axis} extent {len} is not divisible by {INPUT_MULTIPLE}")]
    IndivisibleInput { axis: &'static str, len: usize },
    #[error("input contains non-finite values")]
    NonFiniteInput,
    #[error("unknown endpoint {0:?}")]
    UnknownEndpoint(String),
    #[error("invalid backbone config: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub blocks_per_stage: usize,
    /// Stored intensities mapped linearly onto [-1, 1], clamped outside.
    pub window: [f32; 2],
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_channels: 8,
            blocks_per_stage: 2,
            window: [-1.0, 2.0],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.base_channels == 0 {
            return Err(BackboneError::InvalidConfig("base_channels must be at least 1".into()));
        }
        let [lo, hi] = self.window;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(BackboneError::InvalidConfig(format!("window {:?} must be finite and increasing", self.window)));
        }
        Ok(())
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Channel count shared by `down_4` and `feature_map_4`.
    pub fn feature_channels(&self) -> usize {
        self.stage_width(2)
    }

    pub fn endpoint_channels(&self, e: Endpoint) -> usize {
        match e {
            Endpoint::Down1 => self.stage_width(0),
            Endpoint::Down2 => self.stage_width(1),
            Endpoint::Down4 | Endpoint::FeatureMap4 => self.stage_width(2),
            Endpoint::Deep => self.stage_width(3),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    Down1,
    Down2,
    Down4,
    Deep,
    #[serde(rename = "feature_map_4")]
    FeatureMap4,
}

impl Endpoint {
    pub const ALL: [Endpoint; 5] = [
        Endpoint::Down1,
        Endpoint::Down2,
        Endpoint::Down4,
        Endpoint::Deep,
        Endpoint::FeatureMap4,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Endpoint::Down1 => "down_1",
            Endpoint::Down2 => "down_2",
            Endpoint::Down4 => "down_4",
            Endpoint::Deep => "deep",
            Endpoint::FeatureMap4 => "feature_map_4",
        }
    }

    pub fn stride(self) -> usize {
        match self {
            Endpoint::Down1 => 1,
            Endpoint::Down2 => 2,
            Endpoint::Down4 | Endpoint::FeatureMap4 => 4,
            Endpoint::Deep => 8,
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Endpoint {
    type Err = BackboneError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Endpoint::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| BackboneError::UnknownEndpoint(s.to_string()))
    }
}

/// One step of a layer path, for receptive-field accounting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RfLayer {
    Conv { kernel: usize, stride: usize },
    /// Kernel-2, stride-2 transposed convolution: each output cell reads one
    /// input cell, so the field is unchanged while the jump halves.
    Upsample2,
}

/// Edge length of the receptive field of a layer path, by
/// `rf += (k - 1) * jump; jump *= stride`.
pub fn receptive_field_of_path(path: &[RfLayer]) -> usize {
    let mut rf = 1;
    let mut jump = 1;
    for layer in path {
        match *layer {
            RfLayer::Conv { kernel, stride } => {
                rf += (kernel - 1) * jump;
                jump *= stride;
            }
            RfLayer::Upsample2 => {
                debug_assert!(jump % 2 == 0, "upsampling below input resolution");
                jump /= 2;
            }
        }
    }
    rf
}

/// The longest input-to-endpoint layer path of the backbone.
pub fn endpoint_path(config: &BackboneConfig, endpoint: Endpoint) -> Vec<RfLayer> {
    let conv3 = RfLayer::Conv { kernel: 3, stride: 1 };
    let down = RfLayer::Conv { kernel: 2, stride: 2 };
    let stages = match endpoint {
        Endpoint::Down1 => 1,
        Endpoint::Down2 => 2,
        Endpoint::Down4 => 3,
        Endpoint::Deep | Endpoint::FeatureMap4 => 4,
    };
    let mut path = vec![conv3];
    for s in 0..stages {
        if s > 0 {
            path.push(down);
        }
        path.extend(std::iter::repeat_n(conv3, 2 * config.blocks_per_stage));
    }
    if endpoint == Endpoint::FeatureMap4 {
        path.push(RfLayer::Upsample2);
        path.push(conv3);
    }
    path
}

pub fn receptive_field(config: &BackboneConfig, endpoint: Endpoint) -> usize {
    receptive_field_of_path(&endpoint_path(config, endpoint))
}

/// Same as [`receptive_field`] but with the endpoint given by name.
pub fn receptive_field_named(config: &BackboneConfig, endpoint: &str) -> Result<usize, BackboneError> {
    Ok(receptive_field(config, endpoint.parse()?))
}

#[derive(Clone, Copy, Debug)]
pub struct FeatureEndpoints {
    pub down_1: NodeId,
    pub down_2: NodeId,
    pub down_4: NodeId,
    pub deep: NodeId,
    pub feature_map_4: NodeId,
}

impl FeatureEndpoints {
    pub fn get(&self, e: Endpoint) -> NodeId {
        match e {
            Endpoint::Down1 => self.down_1,
            Endpoint::Down2 => self.down_2,
            Endpoint::Down4 => self.down_4,
            Endpoint::Deep => self.deep,
            Endpoint::FeatureMap4 => self.feature_map_4,
        }
    }
}

#[derive(Clone, Debug)]
struct Stage {
    down: Option<ConvBn>,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stem: ConvBn,
    stages: Vec<Stage>,
    up: Upsample2,
    up_bn: BatchNorm3d,
    fuse: ConvBn,
}

pub fn build_backbone(config: &BackboneConfig, b: &mut ParamBuilder<'_>) -> Result<Backbone, BackboneError> {
    config.validate()?;
    Ok(b.scope("backbone", |b| {
        let c0 = config.stage_width(0);
        let stem = ConvBn::new(b, "stem", 1, c0, 3, 1, 1, true);
        let stages = (0..NUM_STAGES)
            .map(|s| {
                let width = config.stage_width(s);
                b.scope(&format!("stage{s}"), |b| Stage {
                    down: (s > 0).then(|| ConvBn::new(b, "down", config.stage_width(s - 1), width, 2, 2, 0, true)),
                    blocks: (0..config.blocks_per_stage)
                        .map(|i| ResBlock::new(b, &format!("block{i}"), width))
                        .collect(),
                })
            })
            .collect();
        let (c2, c3) = (config.stage_width(2), config.stage_width(3));
        let (up, up_bn, fuse) = b.scope("decoder", |b| {
            (
                Upsample2::new(b, "up", c3, c2, false),
                BatchNorm3d::new(b, "up_bn", c2),
                ConvBn::new(b, "fuse", 2 * c2, c2, 3, 1, 1, true),
            )
        });
        Backbone {
            config: config.clone(),
            stem,
            stages,
            up,
            up_bn,
            fuse,
        }
    }))
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Maps raw intensities through the configured window to a `[1, D, H, W]` tensor.
    pub fn normalize(&self, shape: [usize; 3], voxels: &[f32]) -> Result<Tensor, BackboneError> {
        check_input_shape(shape)?;
        if voxels.iter().any(|v| !v.is_finite()) {
            return Err(BackboneError::NonFiniteInput);
        }
        let [lo, hi] = self.config.window;
        let scale = 2.0 / (hi - lo);
        let data = voxels.iter().map(|&v| ((v - lo) * scale - 1.0).clamp(-1.0, 1.0)).collect();
        Ok(Tensor::from_vec(&[1, shape[0], shape[1], shape[2]], data))
    }

    /// Runs the backbone on a `[1, D, H, W]` input node.
    pub fn forward(&self, tape: &mut Tape<'_>, input: NodeId) -> Result<FeatureEndpoints, BackboneError> {
        let x = tape.value(input);
        check_input_shape(x.spatial())?;
        if !x.all_finite() {
            return Err(BackboneError::NonFiniteInput);
        }
        let mut h = self.stem.forward(tape, input);
        let mut outs = Vec::with_capacity(NUM_STAGES);
        for stage in &self.stages {
            if let Some(down) = &stage.down {
                h = down.forward(tape, h);
            }
            for block in &stage.blocks {
                h = block.forward(tape, h);
            }
            outs.push(h);
        }
        let up = self.up.forward(tape, outs[3]);
        let up = self.up_bn.forward(tape, up);
        let up = tape.relu(up);
        let fused = tape.concat(&[up, outs[2]]);
        let feature_map_4 = self.fuse.forward(tape, fused);
        Ok(FeatureEndpoints {
            down_1: outs[0],
            down_2: outs[1],
            down_4: outs[2],
            deep: outs[3],
            feature_map_4,
        })
    }
}

fn check_input_shape(shape: [usize; 3]) -> Result<(), BackboneError> {
    for (axis, len) in ["z", "y", "x"].into_iter().zip(shape) {
        if len == 0 || len % INPUT_MULTIPLE != 0 {
            return Err(BackboneError::IndivisibleInput { axis, len });
        }
    }
    Ok(())
}
