//! A small vision transformer split right after the patch embedding.
//!
//! Each client owns a [`LowerSegment`] (patchify + linear embedding +
//! positional embedding); the server owns the [`UpperSegment`] (pre-LN
//! encoder blocks, final norm, mean pooling, linear head). Backward passes
//! are written out by hand.

mod checkpoint;
pub(crate) mod layers;
mod lower;
mod upper;

use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, CheckpointRecord,
};
pub use lower::{patchify, LowerCache, LowerSegment};
pub use upper::{Block, UpperCache, UpperSegment};

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{log_sum_exp, Tensor};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            image_height: 16,
            image_width: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 32,
            depth: 2,
            heads: 2,
            mlp_ratio: 2,
            classes: 4,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || !self.image_height.is_multiple_of(p) || !self.image_width.is_multiple_of(p) {
            return shape_err(format!(
                "{}×{} image is not divisible into {p}×{p} patches",
                self.image_height, self.image_width
            ));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.classes == 0 || self.mlp_ratio == 0 {
            return param_err("model dimensions must be positive");
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return param_err(format!(
                "embed_dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch_size) * (self.image_width / self.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }
}

/// Uniform access to the trainable tensors of a segment, in a fixed order.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// `p ← p − η·g` for every parameter.
pub fn sgd_step<P: Parameters>(params: &mut P, grads: &P, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return param_err(format!("learning rate must be positive, got {lr}"));
    }
    let g: Vec<Tensor> = grads
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let p = params.tensors_mut();
    if p.len() != g.len() {
        return shape_err("gradient layout differs from parameters");
    }
    for (p, g) in p.into_iter().zip(&g) {
        p.axpy(-lr, g)?;
    }
    Ok(())
}

/// Accumulates `src` into `dst` tensor by tensor.
pub fn accumulate<P: Parameters>(dst: &mut P, src: &P) -> Result<()> {
    let s: Vec<Tensor> = src
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let d = dst.tensors_mut();
    if d.len() != s.len() {
        return shape_err("parameter layouts differ");
    }
    for (d, s) in d.into_iter().zip(&s) {
        d.add_assign(s)?;
    }
    Ok(())
}

/// All parameters concatenated in `named_tensors` order.
pub fn flatten_params<P: Parameters>(params: &P) -> Vec<f64> {
    params
        .named_tensors()
        .into_iter()
        .flat_map(|(_, t)| t.data().to_vec())
        .collect()
}

/// Inverse of [`flatten_params`].
pub fn load_flat_params<P: Parameters>(params: &mut P, flat: &[f64]) -> Result<()> {
    if flat.len() != params.num_parameters() {
        return shape_err(format!(
            "{} values for {} parameters",
            flat.len(),
            params.num_parameters()
        ));
    }
    let mut at = 0;
    for t in params.tensors_mut() {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[at..at + n]);
        at += n;
    }
    Ok(())
}

/// Soft-target cross-entropy `−Σ_k t_k · log softmax(z)_k` and its gradient
/// `(Σ_k t_k)·softmax(z) − t`.
///
/// Targets are not renormalized, so the loss stays linear in them.
pub fn loss_soft_ce(logits: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    logits.same_shape(target)?;
    let lse = log_sum_exp(logits.data());
    let mass: f64 = target.sum();
    let loss = -logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(z, t)| t * (z - lse))
        .sum::<f64>();
    let grad = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(z, t)| mass * (z - lse).exp() - t)
        .collect();
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

pub fn argmax(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}
