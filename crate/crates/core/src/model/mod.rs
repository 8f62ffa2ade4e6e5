//! The backbone, the shared cosine classifier, training and checkpoints.

pub mod backbone;
pub mod checkpoint;
pub mod optim;
pub mod train;
pub mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial::pool_raw;
use crate::error::{Error, Result};
use crate::nn::{CosineClassifier, Mode};
use crate::rng::{SeedStreams, STREAM_INIT};
use crate::tensor::{Shape, Tensor};

pub use backbone::{Backbone, Preset};
pub use checkpoint::{load_checkpoint, load_checkpoint_into, save_checkpoint};
pub use optim::{learning_rate, Optimizer, OptimizerKind};
pub use train::{forward_pass, training_step, ForwardPass, Gradients, LossRecord, TrainConfig, TrainState};
pub use trainer::{epoch_log_csv, train, EpochLog, TrainOutcome, EPOCH_LOG_HEADER};

/// Training objective. Every variant shares conv1..conv5 and the classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// `CE(x_a) + CE(x_h)`
    #[serde(rename = "full")]
    Full,
    /// `CE(x_l)`, no high stage.
    #[serde(rename = "c5_cls")]
    C5Cls,
    /// `CE(x_a)`, no high stage.
    #[serde(rename = "c5_adv")]
    C5Adv,
    /// `CE(x_l) + CE(x_h)`
    #[serde(rename = "c5_c7_cls")]
    C5C7Cls,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::C5Cls, Variant::C5Adv, Variant::C5C7Cls, Variant::Full];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::C5Cls => "c5_cls",
            Variant::C5Adv => "c5_adv",
            Variant::C5C7Cls => "c5_c7_cls",
        }
    }

    pub fn uses_high(self) -> bool {
        matches!(self, Variant::Full | Variant::C5C7Cls)
    }

    pub fn uses_adversarial(self) -> bool {
        matches!(self, Variant::Full | Variant::C5Adv)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts `-` or `_` as the separator.
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Images are embedded in chunks of this many to bound activation memory.
const EMBED_CHUNK: usize = 64;

#[derive(Debug, Clone)]
pub struct Model {
    pub backbone: Backbone,
    pub classifier: CosineClassifier,
}

impl Model {
    /// Initializes all weights from the `init` stream of `seed`: backbone
    /// layers in order, then the classifier.
    pub fn new(
        preset: Preset,
        variant: Variant,
        n_classes: usize,
        scale_train: f32,
        scale_adv: f32,
        seed: u64,
    ) -> Result<Self> {
        if n_classes == 0 {
            return Err(Error::InvalidArgument("model needs at least one class".into()));
        }
        let mut rng = SeedStreams::new(seed).stream(STREAM_INIT);
        let backbone = Backbone::new(preset, variant.uses_high(), &mut rng)?;
        let mut classifier =
            CosineClassifier::new(n_classes, preset.feature_dim(), scale_train, scale_adv)?;
        classifier.init(&mut rng);
        Ok(Model { backbone, classifier })
    }

    pub fn preset(&self) -> Preset {
        self.backbone.preset
    }

    pub fn has_high(&self) -> bool {
        self.backbone.high.is_some()
    }

    pub fn forward_low(&self, images: &Tensor, mode: Mode) -> Result<Tensor> {
        self.backbone.forward_low(images, mode)
    }

    pub fn forward_high(&self, maps: &Tensor, mode: Mode) -> Result<Tensor> {
        self.backbone.forward_high(maps, mode)
    }

    /// Test-time embedding `x_l`: eval-mode conv5 maps pooled with the
    /// uniform mask. Returns `[B, C5]`.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.backbone.check_images(images)?;
        let b = images.shape()[0];
        let per = images.numel() / b;
        let mut out = Vec::with_capacity(b * self.preset().feature_dim());
        for start in (0..b).step_by(EMBED_CHUNK) {
            let n = EMBED_CHUNK.min(b - start);
            let chunk = Tensor::from_parts(
                Shape::new(vec![n, 3, images.shape()[2], images.shape()[3]])?,
                images.data()[start * per..(start + n) * per].to_vec(),
            );
            out.extend(pool_uniform(&self.forward_low(&chunk, Mode::Eval)?)?);
        }
        let t = Tensor::from_parts(Shape::new(vec![b, self.preset().feature_dim()])?, out);
        t.check_finite("embedding")?;
        Ok(t)
    }

    fn stages(&self) -> impl Iterator<Item = (&'static str, &backbone::Stage)> {
        std::iter::once(("low", &self.backbone.low))
            .chain(self.backbone.high.as_ref().map(|h| ("high", h)))
    }

    /// Parameters in a fixed order: low blocks, high blocks, classifier.
    /// [`Model::params_mut`] and [`Gradients`] use the same order.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, stage) in self.stages() {
            for (i, b) in stage.blocks().enumerate() {
                out.push((format!("{prefix}.{i}.conv.weight"), &b.conv.weight));
                out.push((format!("{prefix}.{i}.conv.bias"), &b.conv.bias));
                out.push((format!("{prefix}.{i}.bn.gamma"), &b.bn.gamma));
                out.push((format!("{prefix}.{i}.bn.beta"), &b.bn.beta));
            }
        }
        out.push(("classifier.weight".to_string(), &self.classifier.weight));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_mut().0
    }

    /// BN running statistics, in block order.
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, stage) in self.stages() {
            for (i, b) in stage.blocks().enumerate() {
                out.push((format!("{prefix}.{i}.bn.running_mean"), &b.bn.running_mean));
                out.push((format!("{prefix}.{i}.bn.running_var"), &b.bn.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors_mut().1
    }

    /// Mutable parameters and buffers, each in the order of
    /// [`Model::params`] and [`Model::buffers`].
    pub fn tensors_mut(&mut self) -> (Vec<&mut Tensor>, Vec<&mut Tensor>) {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let Model { backbone, classifier } = self;
        let stages = std::iter::once(&mut backbone.low).chain(backbone.high.as_mut());
        for stage in stages {
            for b in stage.blocks_mut() {
                params.push(&mut b.conv.weight);
                params.push(&mut b.conv.bias);
                params.push(&mut b.bn.gamma);
                params.push(&mut b.bn.beta);
                buffers.push(&mut b.bn.running_mean);
                buffers.push(&mut b.bn.running_var);
            }
        }
        params.push(&mut classifier.weight);
        (params, buffers)
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }
}

/// Uniform-mask pooling of NCHW maps, flattened `[B*C]`.
pub(crate) fn pool_uniform(maps: &Tensor) -> Result<Vec<f32>> {
    let (b, c, h, w) = match *maps.shape() {
        [b, c, h, w] => (b, c, h, w),
        _ => return Err(Error::InvalidArgument(format!("expected NCHW maps, got {:?}", maps.shape()))),
    };
    let m0 = vec![1.0 / (h * w) as f32; h * w];
    let per = c * h * w;
    let mut out = Vec::with_capacity(b * c);
    for i in 0..b {
        out.extend(pool_raw(&maps.data()[i * per..(i + 1) * per], &m0, c).into_iter().map(|v| v as f32));
    }
    Ok(out)
}
