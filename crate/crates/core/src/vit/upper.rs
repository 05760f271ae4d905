use crate::error::{shape_err, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::layers::{
    attention, attention_backward, gelu, gelu_grad, init_normal, layer_norm, layer_norm_backward,
    linear, linear_backward, AttentionCache, LayerNormCache,
};
use super::{Parameters, VitConfig};

/// Pre-LN encoder block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    /// `[d, 3d]`, columns ordered Q | K | V, heads contiguous within each.
    pub qkv_weight: Tensor,
    pub qkv_bias: Tensor,
    pub proj_weight: Tensor,
    pub proj_bias: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

#[derive(Debug, Clone)]
struct BlockCache {
    x_in: Tensor,
    ln1: LayerNormCache,
    a1: Tensor,
    qkv: Tensor,
    attn: AttentionCache,
    attn_out: Tensor,
    ln2: LayerNormCache,
    a2: Tensor,
    h_pre: Tensor,
    h_act: Tensor,
}

impl Block {
    fn init(c: &VitConfig, rng: &mut SeededRng) -> Self {
        let d = c.embed_dim;
        let h = c.hidden_dim();
        Self {
            ln1_gamma: Tensor::full(&[d], 1.0),
            ln1_beta: Tensor::zeros(&[d]),
            qkv_weight: init_normal(rng, &[d, 3 * d], 0.02),
            qkv_bias: Tensor::zeros(&[3 * d]),
            proj_weight: init_normal(rng, &[d, d], 0.02),
            proj_bias: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::full(&[d], 1.0),
            ln2_beta: Tensor::zeros(&[d]),
            fc1_weight: init_normal(rng, &[d, h], 0.02),
            fc1_bias: Tensor::zeros(&[h]),
            fc2_weight: init_normal(rng, &[h, d], 0.02),
            fc2_bias: Tensor::zeros(&[d]),
        }
    }

    fn zeros_like(&self) -> Self {
        let z = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            ln1_gamma: z(&self.ln1_gamma),
            ln1_beta: z(&self.ln1_beta),
            qkv_weight: z(&self.qkv_weight),
            qkv_bias: z(&self.qkv_bias),
            proj_weight: z(&self.proj_weight),
            proj_bias: z(&self.proj_bias),
            ln2_gamma: z(&self.ln2_gamma),
            ln2_beta: z(&self.ln2_beta),
            fc1_weight: z(&self.fc1_weight),
            fc1_bias: z(&self.fc1_bias),
            fc2_weight: z(&self.fc2_weight),
            fc2_bias: z(&self.fc2_bias),
        }
    }

    fn forward(&self, x: &Tensor, heads: usize) -> Result<(Tensor, BlockCache)> {
        let (a1, ln1) = layer_norm(x, &self.ln1_gamma, &self.ln1_beta);
        let qkv = linear(&a1, &self.qkv_weight, &self.qkv_bias)?;
        let (attn_out, attn) = attention(&qkv, heads)?;
        let proj = linear(&attn_out, &self.proj_weight, &self.proj_bias)?;
        let x1 = x.add(&proj)?;
        let (a2, ln2) = layer_norm(&x1, &self.ln2_gamma, &self.ln2_beta);
        let h_pre = linear(&a2, &self.fc1_weight, &self.fc1_bias)?;
        let h_act = h_pre.map(gelu);
        let mlp = linear(&h_act, &self.fc2_weight, &self.fc2_bias)?;
        let out = x1.add(&mlp)?;
        Ok((
            out,
            BlockCache {
                x_in: x.clone(),
                ln1,
                a1,
                qkv,
                attn,
                attn_out,
                ln2,
                a2,
                h_pre,
                h_act,
            },
        ))
    }

    fn backward(&self, cache: &BlockCache, dout: &Tensor) -> Result<(Block, Tensor)> {
        // MLP branch
        let (dh_act, dfc2_w, dfc2_b) = linear_backward(&cache.h_act, &self.fc2_weight, dout)?;
        let mut dh_pre = dh_act;
        for (g, &x) in dh_pre.data_mut().iter_mut().zip(cache.h_pre.data()) {
            *g *= gelu_grad(x);
        }
        let (da2, dfc1_w, dfc1_b) = linear_backward(&cache.a2, &self.fc1_weight, &dh_pre)?;
        let (dx1_ln, dln2_g, dln2_b) = layer_norm_backward(&cache.ln2, &self.ln2_gamma, &da2);
        let mut dx1 = dout.clone();
        dx1.add_assign(&dx1_ln)?;
        // Attention branch
        let (dattn_out, dproj_w, dproj_b) =
            linear_backward(&cache.attn_out, &self.proj_weight, &dx1)?;
        let dqkv = attention_backward(&cache.qkv, &cache.attn, &dattn_out)?;
        let (da1, dqkv_w, dqkv_b) = linear_backward(&cache.a1, &self.qkv_weight, &dqkv)?;
        let (dx_ln, dln1_g, dln1_b) = layer_norm_backward(&cache.ln1, &self.ln1_gamma, &da1);
        let mut dx = dx1;
        dx.add_assign(&dx_ln)?;
        debug_assert_eq!(dx.shape(), cache.x_in.shape());
        Ok((
            Block {
                ln1_gamma: dln1_g,
                ln1_beta: dln1_b,
                qkv_weight: dqkv_w,
                qkv_bias: dqkv_b,
                proj_weight: dproj_w,
                proj_bias: dproj_b,
                ln2_gamma: dln2_g,
                ln2_beta: dln2_b,
                fc1_weight: dfc1_w,
                fc1_bias: dfc1_b,
                fc2_weight: dfc2_w,
                fc2_bias: dfc2_b,
            },
            dx,
        ))
    }

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        [
            ("ln1.gamma", &self.ln1_gamma),
            ("ln1.beta", &self.ln1_beta),
            ("attn.qkv.weight", &self.qkv_weight),
            ("attn.qkv.bias", &self.qkv_bias),
            ("attn.proj.weight", &self.proj_weight),
            ("attn.proj.bias", &self.proj_bias),
            ("ln2.gamma", &self.ln2_gamma),
            ("ln2.beta", &self.ln2_beta),
            ("mlp.fc1.weight", &self.fc1_weight),
            ("mlp.fc1.bias", &self.fc1_bias),
            ("mlp.fc2.weight", &self.fc2_weight),
            ("mlp.fc2.bias", &self.fc2_bias),
        ]
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.qkv_weight,
            &mut self.qkv_bias,
            &mut self.proj_weight,
            &mut self.proj_bias,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.fc1_weight,
            &mut self.fc1_bias,
            &mut self.fc2_weight,
            &mut self.fc2_bias,
        ]
    }
}

/// Server-side model segment.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperSegment {
    pub config: VitConfig,
    pub blocks: Vec<Block>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    /// `[d, L]`
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

/// Saved activations of one upper forward pass.
#[derive(Debug, Clone)]
pub struct UpperCache {
    blocks: Vec<BlockCache>,
    norm: LayerNormCache,
    pooled: Tensor,
    num_patches: usize,
}

impl UpperSegment {
    pub fn init(config: VitConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let blocks = (0..config.depth)
            .map(|_| Block::init(&config, rng))
            .collect();
        Ok(Self {
            config,
            blocks,
            norm_gamma: Tensor::full(&[d], 1.0),
            norm_beta: Tensor::zeros(&[d]),
            head_weight: init_normal(rng, &[d, config.classes], 0.02),
            head_bias: Tensor::zeros(&[config.classes]),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            blocks: self.blocks.iter().map(Block::zeros_like).collect(),
            norm_gamma: Tensor::zeros(self.norm_gamma.shape()),
            norm_beta: Tensor::zeros(self.norm_beta.shape()),
            head_weight: Tensor::zeros(self.head_weight.shape()),
            head_bias: Tensor::zeros(self.head_bias.shape()),
        }
    }

    /// Logits `[L]` for one `[N, d]` (mixed) smashed input.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, UpperCache)> {
        if x.shape().len() != 2 || x.cols() != self.config.embed_dim {
            return shape_err(format!(
                "upper segment expects [N, {}], got {:?}",
                self.config.embed_dim,
                x.shape()
            ));
        }
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, cache) = b.forward(&h, self.config.heads)?;
            caches.push(cache);
            h = next;
        }
        let (normed, norm) = layer_norm(&h, &self.norm_gamma, &self.norm_beta);
        let n = normed.rows();
        let pooled = normed
            .sum_rows()
            .scale(1.0 / n as f64)
            .reshape(vec![1, self.config.embed_dim])?;
        let logits = linear(&pooled, &self.head_weight, &self.head_bias)?
            .reshape(vec![self.config.classes])?;
        Ok((
            logits,
            UpperCache {
                blocks: caches,
                norm,
                pooled,
                num_patches: n,
            },
        ))
    }

    /// Parameter gradients and the gradient with respect to the `[N, d]` input.
    pub fn backward(&self, cache: &UpperCache, dlogits: &Tensor) -> Result<(UpperSegment, Tensor)> {
        let l = self.config.classes;
        if dlogits.len() != l {
            return shape_err(format!(
                "expected {l} logit gradients, got {}",
                dlogits.len()
            ));
        }
        let dlogits = dlogits.clone().reshape(vec![1, l])?;
        let (dpooled, dhead_w, dhead_b) =
            linear_backward(&cache.pooled, &self.head_weight, &dlogits)?;
        let n = cache.num_patches;
        let mut dnormed = Tensor::zeros(&[n, self.config.embed_dim]);
        for r in 0..n {
            for (o, g) in dnormed.row_mut(r).iter_mut().zip(dpooled.data()) {
                *o = g / n as f64;
            }
        }
        let (mut dh, dnorm_g, dnorm_b) =
            layer_norm_backward(&cache.norm, &self.norm_gamma, &dnormed);
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (g, dx) = b.backward(c, &dh)?;
            block_grads.push(g);
            dh = dx;
        }
        block_grads.reverse();
        Ok((
            UpperSegment {
                config: self.config,
                blocks: block_grads,
                norm_gamma: dnorm_g,
                norm_beta: dnorm_b,
                head_weight: dhead_w,
                head_bias: dhead_b,
            },
            dh,
        ))
    }
}

impl Parameters for UpperSegment {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_tensors(&format!("blocks.{i}")));
        }
        out.push(("norm.gamma".into(), &self.norm_gamma));
        out.push(("norm.beta".into(), &self.norm_beta));
        out.push(("head.weight".into(), &self.head_weight));
        out.push(("head.bias".into(), &self.head_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.norm_gamma);
        out.push(&mut self.norm_beta);
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }
}
