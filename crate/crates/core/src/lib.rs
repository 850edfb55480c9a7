//! Semantic segmentation as image-to-image translation.
//!
//! A U-Net generator learns to map a source image to its binary segmentation
//! mask, trained adversarially against a patch discriminator either on
//! `(image, mask)` pairs (conditional GAN) or on unpaired pools of images and
//! masks (cycle-consistent GAN).

pub mod cli;
pub mod data;
pub mod eval;
pub mod models;
pub mod tensor;
pub mod training;

pub use tensor::{Gradients, Graph, Tensor, TensorError, Var};
