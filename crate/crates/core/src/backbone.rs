//! Small convolutional encoder producing one stride-s feature map, plus the
//! auxiliary 2D lane-segmentation head. The same weights run on every frame
//! (current, past, synthetic future).

use crate::autodiff::Tensor;
use crate::nn::{join, Conv2d, Module, Norm2d, Param, ParamTape};
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// One feature map and the input-pixels-per-cell stride it lives at.
#[derive(Clone)]
pub struct FeatureMap {
    /// (C, H_f, W_f)
    pub values: Tensor,
    pub stride: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// Wraps a raw image (C,H,W) as a stride-1 feature map; the cost-volume
    /// oracles run directly on images through the same warp machinery.
    pub fn from_image(image: &Array3<f64>) -> Self {
        Self { values: Tensor::constant(image.clone().into_dyn()), stride: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub in_channels: usize,
    /// Output channels per block.
    pub channels: Vec<usize>,
    /// Stride per block; the encoder stride is their product.
    pub strides: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl EncoderConfig {
    pub fn desk_default() -> Self {
        Self { in_channels: 3, channels: vec![12, 24, 48, 48], strides: vec![2, 2, 2, 1] }
    }

    pub fn total_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("encoder needs at least one block")
    }
}

struct Block {
    conv: Conv2d,
    norm: Norm2d,
}

/// Conv -> normalization -> ReLU blocks.
pub struct Encoder {
    blocks: Vec<Block>,
    in_channels: usize,
    stride: usize,
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        assert_eq!(cfg.channels.len(), cfg.strides.len());
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut in_ch = cfg.in_channels;
        for (&out_ch, &stride) in cfg.channels.iter().zip(&cfg.strides) {
            blocks.push(Block {
                conv: Conv2d::new(in_ch, out_ch, 3, stride, 1, rng),
                norm: Norm2d::new(out_ch),
            });
            in_ch = out_ch;
        }
        Self { blocks, in_channels: cfg.in_channels, stride: cfg.total_stride() }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map(|b| b.conv.weight.shape()[0]).unwrap_or(self.in_channels)
    }

    /// image: (C, H, W) with H, W divisible by the total stride.
    pub fn forward(&self, image: &Tensor, tape: &ParamTape) -> FeatureMap {
        assert_eq!(
            image.shape()[0],
            self.in_channels,
            "encoder expects {} input channels",
            self.in_channels
        );
        assert!(
            image.shape()[1] % self.stride == 0 && image.shape()[2] % self.stride == 0,
            "image {}x{} not divisible by encoder stride {}",
            image.shape()[1],
            image.shape()[2],
            self.stride
        );
        let mut x = image.clone();
        for block in &self.blocks {
            x = block.norm.forward(&block.conv.forward(&x, tape), tape).relu();
        }
        FeatureMap { values: x, stride: self.stride }
    }
}

impl Module for Encoder {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.visit_params(&join(prefix, &format!("block{i}.conv")), out);
            b.norm.visit_params(&join(prefix, &format!("block{i}.norm")), out);
        }
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_params_mut(&join(prefix, &format!("block{i}.conv")), out);
            b.norm.visit_params_mut(&join(prefix, &format!("block{i}.norm")), out);
        }
    }
}

/// One logit per feature cell for the auxiliary 2D segmentation loss.
pub struct SegHead {
    conv: Conv2d,
}

impl SegHead {
    pub fn new(in_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { conv: Conv2d::new(in_channels, 1, 1, 1, 0, rng) }
    }

    pub fn zeroed(in_channels: usize) -> Self {
        Self { conv: Conv2d::zeroed(in_channels, 1, 1, 1, 0) }
    }

    /// (C,Hf,Wf) -> (1,Hf,Wf) logits.
    pub fn forward(&self, f: &FeatureMap, tape: &ParamTape) -> Tensor {
        self.conv.forward(&f.values, tape)
    }
}

impl Module for SegHead {
    fn visit_params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv.visit_params(&join(prefix, "conv"), out);
    }

    fn visit_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        self.conv.visit_params_mut(&join(prefix, "conv"), out);
    }
}
