//! Few-shot image classification with adversarial feature learning.
//!
//! A convolutional backbone is trained with two losses that share one cosine
//! classifier: the usual loss on a high-level feature, and a loss on an
//! adversarial low-level feature. The adversarial feature pools the conv5
//! maps with a mask pushed along the gradient of the prediction entropy, so
//! the network must still classify when its most decisive locations are
//! down-weighted. At test time the backbone embeds support and query images
//! and queries go to the nearest class prototype by cosine similarity.
//!
//! # Modules
//!
//! - [`tensor`], [`nn`]: dense tensors and layers with hand-written backward passes.
//! - [`adversarial`]: the mask gradient `ΔM`, the adversarial mask and feature.
//! - [`model`]: backbone presets, training variants, the trainer and checkpoints.
//! - [`fewshot`]: episode sampling and prototype classification.
//! - [`data`]: the synthetic dataset generator and PPM image directories.
//! - [`analysis`]: γ sweeps, vulnerability curves, ablations and attention maps.
//! - [`cli`]: the `advfeat` command-line tool.
//!
//! # Examples
//!
//! Each capability has a runnable example under `examples/`:
//!
//! | example | shows |
//! |---|---|
//! | `gen_synth` | generating, writing and reloading the synthetic dataset |
//! | `train_desk` | training one variant and evaluating it |
//! | `evaluate_episodes` | N-way K-shot evaluation of a checkpoint |
//! | `gradient_check` | the analytic `ΔM` against finite differences |
//! | `gamma_sweep` | held-out accuracy across mask step sizes |
//! | `vulnerability_curve` | accuracy under growing mask perturbations |
//! | `attention_heatmaps` | exporting `ΔM` heatmaps and adversarial masks |
//! | `ablation_table` | every variant under several seeds |

pub mod adversarial;
pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod fewshot;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
