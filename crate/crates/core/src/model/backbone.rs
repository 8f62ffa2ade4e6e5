//! VGG-style backbone split into a low stage (conv1..conv5) and an optional
//! high stage (conv6, conv7).
//!
//! Every named conv layer is one or two `conv -> BN -> leaky ReLU` blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    leaky_relu, leaky_relu_backward, maxpool2x2, maxpool2x2_backward, BatchNorm2d, BnCache,
    Conv2d, Mode, Pooled,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 128×128 input, conv5 maps 512×8×8.
    Paper,
    /// 64×64 input, conv5 maps 64×4×4.
    Desk,
}

impl Preset {
    pub fn tag(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn input_size(self) -> usize {
        match self {
            Preset::Paper => 128,
            Preset::Desk => 64,
        }
    }

    /// Output channels of conv1..conv7.
    pub fn channels(self) -> [usize; 7] {
        match self {
            Preset::Paper => [128, 128, 256, 512, 512, 512, 512],
            Preset::Desk => [32, 32, 64, 64, 64, 64, 64],
        }
    }

    pub fn feature_dim(self) -> usize {
        self.channels()[4]
    }

    /// Spatial side of the conv5 maps.
    pub fn conv5_size(self) -> usize {
        self.input_size() / 16
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Preset::Paper => 64,
            Preset::Desk => 32,
        }
    }

    fn low_layout(self) -> Vec<LayerSpec> {
        let ch = self.channels();
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &c) in ch[..5].iter().enumerate() {
            if i > 0 {
                out.push(LayerSpec::Pool);
            }
            out.push(LayerSpec::Block { cin, cout: c, kernel: 3, padding: 1 });
            out.push(LayerSpec::Block { cin: c, cout: c, kernel: 3, padding: 1 });
            cin = c;
        }
        out
    }

    fn high_layout(self) -> Vec<LayerSpec> {
        let ch = self.channels();
        let mut out = vec![
            LayerSpec::Pool,
            LayerSpec::Block { cin: ch[4], cout: ch[5], kernel: 3, padding: 1 },
            LayerSpec::Block { cin: ch[5], cout: ch[5], kernel: 3, padding: 1 },
        ];
        // conv5 of the desk preset is 4×4; pooling twice would leave 1×1 in
        // front of a 2×2 kernel, so the desk stack skips the second pool.
        if self == Preset::Paper {
            out.push(LayerSpec::Pool);
        }
        out.push(LayerSpec::Block { cin: ch[5], cout: ch[6], kernel: 2, padding: 0 });
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum LayerSpec {
    Block { cin: usize, cout: usize, kernel: usize, padding: usize },
    Pool,
}

/// `conv -> BN -> leaky ReLU`
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum Layer {
    Block(ConvBlock),
    Pool,
}

#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    Block {
        input: Tensor,
        bn: BnCache,
        pre_activation: Tensor,
    },
    Pool(Pooled),
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
}

/// An ordered sequence of conv blocks and 2×2 max-pools.
#[derive(Debug, Clone)]
pub struct Stage {
    pub layers: Vec<Layer>,
}

impl Stage {
    fn build<R: Rng + ?Sized>(layout: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let layers = layout
            .iter()
            .map(|spec| match *spec {
                LayerSpec::Pool => Ok(Layer::Pool),
                LayerSpec::Block { cin, cout, kernel, padding } => {
                    let mut conv = Conv2d::new(cin, cout, kernel, padding)?;
                    conv.init(rng);
                    Ok(Layer::Block(ConvBlock {
                        conv,
                        bn: BatchNorm2d::new(cout)?,
                    }))
                }
            })
            .collect::<Result<_>>()?;
        Ok(Stage { layers })
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ConvBlock> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Block(b) => Some(b),
            Layer::Pool => None,
        })
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ConvBlock> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Block(b) => Some(b),
            Layer::Pool => None,
        })
    }

    /// Inference pass; keeps no intermediate state.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Pool => maxpool2x2(&cur)?.output,
                Layer::Block(b) => {
                    let y = b.conv.forward(&cur)?;
                    let (z, _) = b.bn.forward(&y, mode)?;
                    leaky_relu(&z)
                }
            };
        }
        Ok(cur)
    }

    pub(crate) fn forward_cached(&self, x: Tensor, mode: Mode) -> Result<(Tensor, Vec<LayerCache>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x;
        for layer in &self.layers {
            cur = match layer {
                Layer::Pool => {
                    let pooled = maxpool2x2(&cur)?;
                    let out = pooled.output.clone();
                    caches.push(LayerCache::Pool(pooled));
                    out
                }
                Layer::Block(b) => {
                    let y = b.conv.forward(&cur)?;
                    let (z, bn) = b.bn.forward(&y, mode)?;
                    let a = leaky_relu(&z);
                    caches.push(LayerCache::Block {
                        input: cur,
                        bn,
                        pre_activation: z,
                    });
                    a
                }
            };
        }
        Ok((cur, caches))
    }

    /// Returns the input gradient and per-block parameter gradients in
    /// block order.
    pub(crate) fn backward(
        &self,
        grad: Tensor,
        caches: &[LayerCache],
    ) -> Result<(Tensor, Vec<BlockGrads>)> {
        let mut grads = Vec::new();
        let mut g = grad;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            g = match (layer, cache) {
                (Layer::Pool, LayerCache::Pool(p)) => maxpool2x2_backward(&g, p)?,
                (
                    Layer::Block(b),
                    LayerCache::Block {
                        input,
                        bn,
                        pre_activation,
                    },
                ) => {
                    let gz = leaky_relu_backward(&g, pre_activation)?;
                    let gbn = b.bn.backward(&gz, bn)?;
                    let gconv = b.conv.backward(&gbn.input, input)?;
                    grads.push(BlockGrads {
                        conv_weight: gconv.weight,
                        conv_bias: gconv.bias,
                        bn_gamma: gbn.gamma,
                        bn_beta: gbn.beta,
                    });
                    gconv.input
                }
                _ => unreachable!("cache layout always mirrors the stage layout"),
            };
        }
        grads.reverse();
        Ok((g, grads))
    }

    pub(crate) fn commit_running_stats(&mut self, caches: &[LayerCache]) {
        for (layer, cache) in self.layers.iter_mut().zip(caches) {
            if let (Layer::Block(b), LayerCache::Block { bn, .. }) = (layer, cache) {
                b.bn.commit_running_stats(bn);
            }
        }
    }
}

/// Low stage plus, for variants that use multi-scale features, the high stage.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub preset: Preset,
    pub low: Stage,
    pub high: Option<Stage>,
}

impl Backbone {
    /// Draws weights in layer order: low stage first, then high.
    pub fn new<R: Rng + ?Sized>(preset: Preset, with_high: bool, rng: &mut R) -> Result<Self> {
        let low = Stage::build(&preset.low_layout(), rng)?;
        let high = if with_high {
            Some(Stage::build(&preset.high_layout(), rng)?)
        } else {
            None
        };
        Ok(Backbone { preset, low, high })
    }

    pub fn check_images(&self, images: &Tensor) -> Result<()> {
        let s = self.preset.input_size();
        match images.shape() {
            &[b, 3, h, w] if h == s && w == s && b > 0 => Ok(()),
            other => Err(Error::mismatch(
                "backbone input",
                &[other.first().copied().unwrap_or(0), 3, s, s],
                other,
            )),
        }
    }

    /// conv5 feature maps `[B, C5, s, s]`.
    pub fn forward_low(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_images(images)?;
        self.low.forward(images, mode)
    }

    /// `x_h` as `[B, C7]`.
    pub fn forward_high(&self, maps: &Tensor, mode: Mode) -> Result<Tensor> {
        let high = self
            .high
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("this model has no high stage".into()))?;
        self.check_conv5(maps)?;
        squeeze_1x1(high.forward(maps, mode)?)
    }

    pub(crate) fn check_conv5(&self, maps: &Tensor) -> Result<()> {
        let (c, s) = (self.preset.feature_dim(), self.preset.conv5_size());
        match maps.shape() {
            &[_, cc, h, w] if cc == c && h == s && w == s => Ok(()),
            other => Err(Error::mismatch(
                "conv5 maps",
                &[other.first().copied().unwrap_or(0), c, s, s],
                other,
            )),
        }
    }
}

pub(crate) fn squeeze_1x1(t: Tensor) -> Result<Tensor> {
    match *t.shape() {
        [b, c, 1, 1] => t.reshape(&[b, c]),
        _ => Err(Error::mismatch("high stage output", &[t.shape()[0], t.shape()[1], 1, 1], t.shape())),
    }
}
