use crate::error::{shape_err, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

use super::layers::{init_normal, linear, linear_backward};
use super::{Parameters, VitConfig};

/// Subtracted from every pixel before the embedding, so `[0, 1]` inputs are
/// zero-centred.
pub const PIXEL_CENTER: f64 = 0.5;

/// Client-side model segment: patchify, embed linearly, add positions.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerSegment {
    pub config: VitConfig,
    /// `[P²C, d]`
    pub weight: Tensor,
    /// `[d]`
    pub bias: Tensor,
    /// `[N, d]`
    pub pos: Tensor,
}

/// Saved forward state: the flattened input patches.
#[derive(Debug, Clone)]
pub struct LowerCache {
    pub patches: Tensor,
}

/// Splits `H×W×C` into `N = (H/P)(W/P)` rows of `P·P·C` values,
/// patches in row-major grid order, each flattened as `(dy, dx, c)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let [h, w, c] = *image.shape() else {
        return shape_err(format!("image must be H×W×C, got {:?}", image.shape()));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return shape_err(format!("{h}×{w} image not divisible by patch size {patch}"));
    }
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut out = Tensor::zeros(&[gh * gw, dim]);
    let src = image.data();
    for py in 0..gh {
        for px in 0..gw {
            let row = out.row_mut(py * gw + px);
            let mut i = 0;
            for dy in 0..patch {
                let y = py * patch + dy;
                let start = (y * w + px * patch) * c;
                row[i..i + patch * c].copy_from_slice(&src[start..start + patch * c]);
                i += patch * c;
            }
        }
    }
    Ok(out)
}

impl LowerSegment {
    pub fn init(config: VitConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            weight: init_normal(rng, &[config.patch_dim(), config.embed_dim], 0.02),
            bias: Tensor::zeros(&[config.embed_dim]),
            pos: init_normal(rng, &[config.num_patches(), config.embed_dim], 0.02),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            pos: Tensor::zeros(self.pos.shape()),
        }
    }

    /// Produces `[N, d]` smashed data (before any clamping) and the cache for backward.
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, LowerCache)> {
        let c = &self.config;
        if image.shape() != [c.image_height, c.image_width, c.channels] {
            return shape_err(format!(
                "expected {}×{}×{} image, got {:?}",
                c.image_height,
                c.image_width,
                c.channels,
                image.shape()
            ));
        }
        let patches = patchify(image, c.patch_size)?.map(|v| v - PIXEL_CENTER);
        let mut out = linear(&patches, &self.weight, &self.bias)?;
        out.add_assign(&self.pos)?;
        Ok((out, LowerCache { patches }))
    }

    pub fn backward(&self, cache: &LowerCache, dsmashed: &Tensor) -> Result<Self> {
        dsmashed.same_shape(&self.pos)?;
        let (_, dw, db) = linear_backward(&cache.patches, &self.weight, dsmashed)?;
        Ok(Self {
            config: self.config,
            weight: dw,
            bias: db,
            pos: dsmashed.clone(),
        })
    }
}

impl Parameters for LowerSegment {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("embed.weight".into(), &self.weight),
            ("embed.bias".into(), &self.bias),
            ("embed.pos".into(), &self.pos),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias, &mut self.pos]
    }
}
