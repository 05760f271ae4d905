//! Reconstruction attack: a small decoder trained to map (possibly mixed)
//! smashed data back to the raw image of one contributor.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::config::{ExperimentConfig, MixMode};
use crate::data::Dataset;
use crate::error::{param_err, shape_err, Error, Result};
use crate::interpolation::{cutout, mixup, patch_cutmix_aggregate, SmashedData};
use crate::mechanism::clamp_smashed;
use crate::mixer::{build_patch_masks, MixingRatios};
use crate::protocol::{run_round, SimulationState};
use crate::rng::{SeededRng, StreamKind};
use crate::tensor::Tensor;
use crate::vit::LowerSegment;

/// Minibatch size used by [`train_decoder`].
pub const DECODER_BATCH: usize = 8;

pub const LEAKAGE_COLUMNS: [&str; 4] = ["scheme", "train_fraction", "seed", "mse"];

/// Geometry of a decoder from `grid_h × grid_w` patches of `features` values
/// to an `H×W×channels` image with `H = grid_h·patch`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderShape {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub features: usize,
    pub channels: usize,
    pub hidden: usize,
    /// Nearest-neighbour upsampling factor between the two layers; divides `patch`.
    pub upsample: usize,
}

impl DecoderShape {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.grid_h,
            self.grid_w,
            self.patch,
            self.features,
            self.channels,
            self.hidden,
        ];
        if dims.contains(&0) || self.upsample == 0 {
            return param_err("decoder dimensions must be positive");
        }
        if !self.patch.is_multiple_of(self.upsample) {
            return param_err(format!(
                "upsample {} does not divide patch {}",
                self.upsample, self.patch
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [
            self.grid_h * self.patch,
            self.grid_w * self.patch,
            self.channels,
        ]
    }

    /// Coarse cells per patch side before upsampling.
    fn coarse(&self) -> usize {
        self.patch / self.upsample
    }
}

/// Per-patch linear map to a coarse `hidden`-channel block, nearest-neighbour
/// upsampling, then a zero-padded 3×3 convolution to the image channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub shape: DecoderShape,
    /// Per-feature mean subtracted from inputs before scaling.
    pub input_shift: Tensor,
    /// Inputs are multiplied by this after the shift.
    pub input_scale: f64,
    /// `[features × coarse²·hidden]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[9·hidden × channels]`, tap-major.
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
struct DecoderCache {
    input: Tensor,
    /// Upsampled hidden map, `H·W·hidden`.
    up: Vec<f64>,
}

#[derive(Debug, Clone)]
struct DecoderGrad {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Decoder {
    pub fn init(shape: DecoderShape, rng: &mut SeededRng) -> Result<Self> {
        shape.validate()?;
        let q = shape.coarse();
        let out1 = q * q * shape.hidden;
        let s1 = (1.0 / shape.features as f64).sqrt();
        let s2 = (1.0 / (9 * shape.hidden) as f64).sqrt();
        let w1 = (0..shape.features * out1)
            .map(|_| s1 * rng.standard_normal())
            .collect();
        // Centre tap starts as an average over hidden channels.
        let centre = 1.0 / shape.hidden as f64;
        let w2 = (0..9 * shape.hidden * shape.channels)
            .map(|i| {
                let tap = i / (shape.hidden * shape.channels);
                0.1 * s2 * rng.standard_normal() + if tap == 4 { centre } else { 0.0 }
            })
            .collect();
        Ok(Self {
            shape,
            input_shift: Tensor::zeros(&[shape.features]),
            input_scale: 1.0,
            w1: Tensor::new(vec![shape.features, out1], w1)?,
            b1: Tensor::zeros(&[out1]),
            w2: Tensor::new(vec![9 * shape.hidden, shape.channels], w2)?,
            b2: Tensor::zeros(&[shape.channels]),
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn forward_cached(&self, s: &Tensor) -> Result<(Tensor, DecoderCache)> {
        let sh = self.shape;
        if s.shape() != [sh.num_patches(), sh.features] {
            return shape_err(format!(
                "decoder expects [{}, {}], got {:?}",
                sh.num_patches(),
                sh.features,
                s.shape()
            ));
        }
        let mut input = s.clone();
        input.add_row_broadcast(&self.input_shift.scale(-1.0))?;
        let input = input.scale(self.input_scale);
        let mut z = input.matmul(&self.w1)?;
        z.add_row_broadcast(&self.b1)?;

        let (q, u, k) = (sh.coarse(), sh.upsample, sh.hidden);
        let [h, w, c] = sh.image_shape();
        let mut up = vec![0.0; h * w * k];
        for y in 0..h {
            for x in 0..w {
                let (cy, cx) = (y / u, x / u);
                let n = (cy / q) * sh.grid_w + cx / q;
                let off = ((cy % q) * q + cx % q) * k;
                up[(y * w + x) * k..(y * w + x + 1) * k].copy_from_slice(&z.row(n)[off..off + k]);
            }
        }

        let mut out = vec![0.0; h * w * c];
        let w2 = self.w2.data();
        for y in 0..h {
            for x in 0..w {
                let o = &mut out[(y * w + x) * c..(y * w + x + 1) * c];
                o.copy_from_slice(self.b2.data());
                for (t, (yy, xx)) in taps(y, x, h, w) {
                    let src = &up[(yy * w + xx) * k..(yy * w + xx + 1) * k];
                    for (ch, &v) in src.iter().enumerate() {
                        let wrow = &w2[(t * k + ch) * c..(t * k + ch + 1) * c];
                        for (oo, &ww) in o.iter_mut().zip(wrow) {
                            *oo += v * ww;
                        }
                    }
                }
            }
        }
        Ok((Tensor::new(vec![h, w, c], out)?, DecoderCache { input, up }))
    }

    pub fn forward(&self, s: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(s)?.0)
    }

    fn backward(&self, cache: &DecoderCache, dout: &Tensor) -> Result<DecoderGrad> {
        let sh = self.shape;
        let (q, u, k) = (sh.coarse(), sh.upsample, sh.hidden);
        let [h, w, c] = sh.image_shape();
        let d = dout.data();
        let w2 = self.w2.data();
        let mut dw2 = vec![0.0; w2.len()];
        let mut db2 = vec![0.0; c];
        let mut dup = vec![0.0; h * w * k];
        for y in 0..h {
            for x in 0..w {
                let g = &d[(y * w + x) * c..(y * w + x + 1) * c];
                for (b, &v) in db2.iter_mut().zip(g) {
                    *b += v;
                }
                for (t, (yy, xx)) in taps(y, x, h, w) {
                    let base = (yy * w + xx) * k;
                    for ch in 0..k {
                        let r = (t * k + ch) * c;
                        let mut acc = 0.0;
                        for (o, &gv) in g.iter().enumerate() {
                            dw2[r + o] += cache.up[base + ch] * gv;
                            acc += w2[r + o] * gv;
                        }
                        dup[base + ch] += acc;
                    }
                }
            }
        }
        let mut dz = Tensor::zeros(&[sh.num_patches(), q * q * k]);
        for y in 0..h {
            for x in 0..w {
                let (cy, cx) = (y / u, x / u);
                let n = (cy / q) * sh.grid_w + cx / q;
                let off = ((cy % q) * q + cx % q) * k;
                for (a, &v) in dz.row_mut(n)[off..off + k]
                    .iter_mut()
                    .zip(&dup[(y * w + x) * k..])
                {
                    *a += v;
                }
            }
        }
        Ok(DecoderGrad {
            w1: cache.input.matmul_tn(&dz)?,
            b1: dz.sum_rows(),
            w2: Tensor::new(self.w2.shape().to_vec(), dw2)?,
            b2: Tensor::new(vec![c], db2)?,
        })
    }

    /// Mean squared pixel error and its gradient for one pair.
    fn loss_grad(&self, s: &Tensor, target: &Tensor) -> Result<(f64, DecoderGrad)> {
        let (out, cache) = self.forward_cached(s)?;
        let diff = out.sub(target)?;
        let p = diff.len() as f64;
        let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / p;
        let grad = self.backward(&cache, &diff.scale(2.0 / p))?;
        Ok((loss, grad))
    }

    fn apply(&mut self, g: &DecoderGrad, step: f64) -> Result<()> {
        self.w1.axpy(-step, &g.w1)?;
        self.b1
            .axpy(-step, &g.b1.clone().reshape(self.b1.shape().to_vec())?)?;
        self.w2.axpy(-step, &g.w2)?;
        self.b2.axpy(-step, &g.b2)?;
        Ok(())
    }
}

/// `(tap index, source pixel)` for the in-bounds 3×3 neighbours of `(y, x)`.
fn taps(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, (usize, usize))> {
    (0..9).filter_map(move |t| {
        let yy = (y + t / 3).checked_sub(1)?;
        let xx = (x + t % 3).checked_sub(1)?;
        (yy < h && xx < w).then_some((t, (yy, xx)))
    })
}

/// Per-feature mean and overall RMS deviation of the representations; the
/// scale is `1` when every value equals its feature mean.
fn standardization(pairs: &[(Tensor, Tensor)], features: usize) -> (Tensor, f64) {
    let mut mean = vec![0.0; features];
    let mut rows = 0.0;
    for (s, _) in pairs {
        for r in 0..s.rows() {
            for (m, v) in mean.iter_mut().zip(s.row(r)) {
                *m += v;
            }
            rows += 1.0;
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows);
    let mut sq = 0.0;
    for (s, _) in pairs {
        for r in 0..s.rows() {
            sq += s
                .row(r)
                .iter()
                .zip(&mean)
                .map(|(v, m)| (v - m) * (v - m))
                .sum::<f64>();
        }
    }
    let rms = (sq / (rows * features as f64)).sqrt();
    let scale = if rms > 0.0 { 1.0 / rms } else { 1.0 };
    (
        Tensor::new(vec![features], mean).expect("length matches"),
        scale,
    )
}

/// Minibatch SGD on mean squared pixel error. Inputs are standardized with
/// statistics of the training set before the first layer.
pub fn train_decoder(
    rng: &mut SeededRng,
    shape: DecoderShape,
    pairs: &[(Tensor, Tensor)],
    epochs: usize,
    learning_rate: f64,
) -> Result<Decoder> {
    if pairs.is_empty() {
        return param_err("decoder needs at least one training pair");
    }
    let mut dec = Decoder::init(shape, rng)?;
    let img = shape.image_shape();
    for (s, x) in pairs {
        if s.shape() != [shape.num_patches(), shape.features] || x.shape() != img {
            return shape_err(format!(
                "training pair shapes {:?} → {:?}",
                s.shape(),
                x.shape()
            ));
        }
    }
    (dec.input_shift, dec.input_scale) = standardization(pairs, shape.features);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for batch in order.chunks(DECODER_BATCH) {
            let mut total: Option<DecoderGrad> = None;
            for &i in batch {
                let (_, g) = dec.loss_grad(&pairs[i].0, &pairs[i].1)?;
                match total.as_mut() {
                    None => total = Some(g),
                    Some(t) => {
                        t.w1.add_assign(&g.w1)?;
                        t.b1.add_assign(&g.b1)?;
                        t.w2.add_assign(&g.w2)?;
                        t.b2.add_assign(&g.b2)?;
                    }
                }
            }
            let g = total.expect("chunks are nonempty");
            dec.apply(&g, learning_rate / batch.len() as f64)?;
        }
    }
    Ok(dec)
}

/// Mean over pairs of the per-image mean squared pixel error.
pub fn reconstruction_mse(decoder: &Decoder, pairs: &[(Tensor, Tensor)]) -> Result<f64> {
    if pairs.is_empty() {
        return param_err("no evaluation pairs");
    }
    let mut total = 0.0;
    for (s, x) in pairs {
        let diff = decoder.forward(s)?.sub(x)?;
        total += diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackScheme {
    Raw,
    Cutout,
    Mixup,
    PatchCutmix,
}

impl AttackScheme {
    pub const ALL: [AttackScheme; 4] = [Self::Raw, Self::Cutout, Self::Mixup, Self::PatchCutmix];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Raw => "raw",
            Self::Cutout => "cutout",
            Self::Mixup => "mixup",
            Self::PatchCutmix => "patch_cutmix",
        }
    }
}

impl fmt::Display for AttackScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AttackScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown attack scheme {s:?}")))
    }
}

/// What the server would see of image `i` under `scheme`: the clamped smashed
/// data itself, its Cutout, or its mix with `g − 1` other images. The first
/// group member is always image `i`.
pub fn attacked_representation(
    scheme: AttackScheme,
    smashed: &[Tensor],
    i: usize,
    group_size: usize,
    rng: &mut SeededRng,
) -> Result<Tensor> {
    let n_p = smashed[i].rows();
    if scheme == AttackScheme::Raw {
        return Ok(smashed[i].clone());
    }
    if group_size == 0 || group_size > smashed.len() {
        return param_err(format!(
            "group of {group_size} from {} images",
            smashed.len()
        ));
    }
    let mut members = vec![i];
    while members.len() < group_size {
        let j = rng.below(smashed.len());
        if !members.contains(&j) {
            members.push(j);
        }
    }
    let ratios = MixingRatios::uniform(group_size)?;
    let items: Vec<SmashedData> = members
        .iter()
        .enumerate()
        .map(|(m, &j)| SmashedData::new(smashed[j].clone(), m))
        .collect::<Result<_>>()?;
    Ok(match scheme {
        AttackScheme::Raw => unreachable!("handled above"),
        AttackScheme::Mixup => {
            let weighted: Vec<(SmashedData, f64)> = items
                .into_iter()
                .zip(ratios.as_slice().iter().copied())
                .collect();
            mixup(&weighted)?.patches
        }
        AttackScheme::Cutout => {
            let masks = build_patch_masks(rng, &ratios, n_p)?;
            cutout(&items[0], &masks[0])?.patches
        }
        AttackScheme::PatchCutmix => {
            let masks = build_patch_masks(rng, &ratios, n_p)?;
            patch_cutmix_aggregate(&items.into_iter().zip(masks).collect::<Vec<_>>())?.patches
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LeakageRow {
    pub scheme: AttackScheme,
    pub train_fraction: f64,
    pub seed: u64,
    pub mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LeakageReport {
    pub rows: Vec<LeakageRow>,
}

impl LeakageReport {
    /// Median MSE of `scheme` at `fraction` over seeds.
    pub fn median(&self, scheme: AttackScheme, fraction: f64) -> Option<f64> {
        let mut v: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.scheme == scheme && r.train_fraction == fraction)
            .map(|r| r.mse)
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let m = v.len() / 2;
        Some(if v.len() % 2 == 1 {
            v[m]
        } else {
            0.5 * (v[m - 1] + v[m])
        })
    }
}

/// Noiseless plain split learning for `pretrain_rounds` rounds; returns the
/// state so the caller can attack client 0's lower segment.
pub fn pretrain(config: &ExperimentConfig, seed: u64) -> Result<SimulationState> {
    let mut cfg = config.clone();
    cfg.mode = MixMode::PlainSl;
    cfg.seed = seed;
    cfg.fedavg_lower = false;
    cfg.privacy.sigma_s = 0.0;
    cfg.privacy.sigma_y = 0.0;
    let mut state = SimulationState::new(cfg)?;
    for _ in 0..config.attack.pretrain_rounds {
        run_round(&mut state)?;
    }
    Ok(state)
}

fn smash_all(
    lower: &LowerSegment,
    data: &Dataset,
    count: usize,
    delta: f64,
) -> Result<Vec<Tensor>> {
    (0..count.min(data.len()))
        .map(|i| Ok(clamp_smashed(&lower.forward(&data.image(i))?.0, delta)))
        .collect()
}

fn scheme_pairs(
    scheme: AttackScheme,
    smashed: &[Tensor],
    data: &Dataset,
    group_size: usize,
    rng: &mut SeededRng,
) -> Result<Vec<(Tensor, Tensor)>> {
    (0..smashed.len())
        .map(|i| {
            Ok((
                attacked_representation(scheme, smashed, i, group_size, rng)?,
                data.image(i),
            ))
        })
        .collect()
}

/// Trains one decoder per (seed, scheme, fraction) against a pretrained lower
/// segment and reports held-out MSE.
pub fn leakage_sweep(config: &ExperimentConfig) -> Result<LeakageReport> {
    let a = &config.attack;
    if a.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::Config("attack fractions must lie in (0, 1]".into()));
    }
    let mut report = LeakageReport::default();
    for &seed in &a.seeds {
        let state = pretrain(config, seed)?;
        let lower = &state.clients[0].lower;
        let delta = config.privacy.delta_bound;
        let train_s = smash_all(lower, &state.train, a.train_count, delta)?;
        let test_s = smash_all(lower, &state.test, a.test_count, delta)?;
        let (h, w, c) = state.train.image_shape();
        let p = state.vit.patch_size;
        let shape = DecoderShape {
            grid_h: h / p,
            grid_w: w / p,
            patch: p,
            features: state.vit.embed_dim,
            channels: c,
            hidden: a.hidden,
            upsample: if p % 2 == 0 { 2 } else { 1 },
        };
        for (si, scheme) in AttackScheme::ALL.into_iter().enumerate() {
            let key = si as u64;
            let train = scheme_pairs(
                scheme,
                &train_s,
                &state.train,
                a.group_size,
                &mut SeededRng::derive(seed, StreamKind::Attack, &[key, 0]),
            )?;
            let test = scheme_pairs(
                scheme,
                &test_s,
                &state.test,
                a.group_size,
                &mut SeededRng::derive(seed, StreamKind::Attack, &[key, 1]),
            )?;
            for (fi, &fraction) in a.fractions.iter().enumerate() {
                let used = ((fraction * train.len() as f64).ceil() as usize).clamp(1, train.len());
                let mut rng = SeededRng::derive(seed, StreamKind::Attack, &[key, 2, fi as u64]);
                let dec =
                    train_decoder(&mut rng, shape, &train[..used], a.epochs, a.learning_rate)?;
                report.rows.push(LeakageRow {
                    scheme,
                    train_fraction: fraction,
                    seed,
                    mse: reconstruction_mse(&dec, &test)?,
                });
            }
        }
    }
    Ok(report)
}

pub fn write_leakage_csv(path: &Path, report: &LeakageReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(LEAKAGE_COLUMNS)?;
    for r in &report.rows {
        w.write_record([
            r.scheme.to_string(),
            r.train_fraction.to_string(),
            r.seed.to_string(),
            r.mse.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
