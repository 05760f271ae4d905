//! End-to-end runs, sweeps and output files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::interpolation::{cutout, mixup, patch_cutmix_aggregate, SmashedData};
use crate::mechanism::clamp_smashed;
use crate::mixer::{build_patch_masks, LambdaMode, MixingRatios};
use crate::protocol::{run_round, RoundMetrics, SimulationState, TrafficLog};
use crate::rdp::{report_at, RdpReport};
use crate::rng::{SeededRng, StreamKind};
use crate::tensor::Tensor;

pub const SEED_ENV: &str = "SPLITMIX_SEED";

pub const METRICS_COLUMNS: [&str; 13] = [
    "round",
    "mode",
    "n",
    "g",
    "sigma_s",
    "sigma_y",
    "train_loss",
    "test_acc",
    "eps_o",
    "eps_mix",
    "eps_cutmix",
    "uplink_bytes",
    "downlink_bytes",
];

pub const TRAFFIC_COLUMNS: [&str; 5] =
    ["round", "client", "peer", "uplink_bytes", "downlink_bytes"];

/// Replaces the seed with `SPLITMIX_SEED` when set.
pub fn apply_env_overrides(cfg: &mut ExperimentConfig) -> Result<()> {
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.seed = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct RunOutput {
    pub metrics: Vec<RoundMetrics>,
    pub traffic: TrafficLog,
    pub rdp: RdpReport,
    pub state: SimulationState,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut state = SimulationState::new(cfg.clone())?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut traffic = TrafficLog::default();
    for _ in 0..cfg.epochs {
        let (m, log) = run_round(&mut state)?;
        metrics.push(m);
        traffic.extend(&log);
    }
    let rdp = report_at(&cfg.privacy, state.budget_lambda())?;
    Ok(RunOutput {
        metrics,
        traffic,
        rdp,
        state,
    })
}

/// Budgets from the config alone: `max λ = 1/g` for uniform ratios, and the
/// worst case `max λ = 1` for Dirichlet ratios, whose draws are not known
/// before a run.
pub fn config_rdp(cfg: &ExperimentConfig) -> Result<RdpReport> {
    cfg.validate()?;
    let m = match cfg.lambda_mode {
        LambdaMode::Uniform => 1.0 / cfg.group_size as f64,
        LambdaMode::Dirichlet { .. } => 1.0,
    };
    report_at(&cfg.privacy, m)
}

fn metrics_record(m: &RoundMetrics) -> Vec<String> {
    vec![
        m.round.to_string(),
        m.mode.to_string(),
        m.n.to_string(),
        m.g.to_string(),
        m.sigma_s.to_string(),
        m.sigma_y.to_string(),
        m.train_loss.to_string(),
        m.test_acc.to_string(),
        m.eps_o.to_string(),
        m.eps_mix.to_string(),
        m.eps_cutmix.to_string(),
        m.uplink_bytes.to_string(),
        m.downlink_bytes.to_string(),
    ]
}

pub fn write_metrics_csv(path: &Path, rows: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_COLUMNS)?;
    for m in rows {
        w.write_record(metrics_record(m))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_traffic_csv(path: &Path, log: &TrafficLog) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRAFFIC_COLUMNS)?;
    for ((round, client, peer), bytes) in log.per_link() {
        let peer = match peer {
            crate::protocol::Role::Server => "server",
            crate::protocol::Role::Mixer => "mixer",
            crate::protocol::Role::Client(_) => "client",
        };
        w.write_record([
            round.to_string(),
            client.to_string(),
            peer.to_string(),
            bytes.uplink.to_string(),
            bytes.downlink.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rdp_json(path: &Path, report: &RdpReport) -> Result<()> {
    fs::write(path, report.to_json_line() + "\n")?;
    Ok(())
}

/// Writes `metrics.csv`, `traffic.csv` and `rdp.json` into `dir`.
pub fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_metrics_csv(&dir.join("metrics.csv"), &out.metrics)?;
    write_traffic_csv(&dir.join("traffic.csv"), &out.traffic)?;
    write_rdp_json(&dir.join("rdp.json"), &out.rdp)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Sets both `σ_s` and `σ_y`.
    Sigma,
    GroupSize,
    NumClients,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Sigma => "sigma",
            SweepAxis::GroupSize => "group_size",
            SweepAxis::NumClients => "num_clients",
        }
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!(
                    "{} needs a positive integer, got {value}",
                    self.as_str()
                )))
            }
        };
        match self {
            SweepAxis::Sigma => {
                cfg.privacy.sigma_s = value;
                cfg.privacy.sigma_y = value;
            }
            SweepAxis::GroupSize => cfg.group_size = count()?,
            SweepAxis::NumClients => {
                cfg.num_clients = count()?;
                cfg.group_size = cfg.group_size.min(cfg.num_clients);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma" => Ok(SweepAxis::Sigma),
            "group_size" => Ok(SweepAxis::GroupSize),
            "num_clients" => Ok(SweepAxis::NumClients),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub metrics: RoundMetrics,
}

/// One run per value, rows concatenated in `values` order.
pub fn sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs = values
        .iter()
        .map(|&v| axis.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (cfg, &value) in configs.iter().zip(values) {
        let out = run_experiment(cfg)?;
        rows.extend(
            out.metrics
                .into_iter()
                .map(|metrics| SweepRow { value, metrics }),
        );
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, axis: SweepAxis, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec![axis.as_str()];
    header.extend(METRICS_COLUMNS);
    w.write_record(header)?;
    for r in rows {
        let mut rec = vec![r.value.to_string()];
        rec.extend(metrics_record(&r.metrics));
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Binary PGM (P5) of `pixels` in `[0, 1]`, row-major `height × width`.
pub fn encode_pgm(pixels: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(
        pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

/// Min-max normalization to `[0, 1]`; a constant image maps to zeros.
pub fn min_max_normalize(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

/// Channel-averaged `H×W×C` image as an `H·W` grayscale buffer.
pub fn render_image(image: &Tensor) -> (Vec<f64>, usize, usize) {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let gray = image
        .data()
        .chunks(c)
        .map(|px| px.iter().sum::<f64>() / c as f64)
        .collect();
    (gray, w, h)
}

/// Smashed data `[N, F]` on its patch grid: each patch becomes a
/// `patch × patch` block holding its feature mean.
pub fn render_smashed(s: &SmashedData, patch: usize) -> Result<(Vec<f64>, usize, usize)> {
    let grid = s.grid_side()?;
    let side = grid * patch;
    let f = s.features() as f64;
    let means: Vec<f64> = (0..s.num_patches())
        .map(|k| s.patches.row(k).iter().sum::<f64>() / f)
        .collect();
    let mut px = vec![0.0; side * side];
    for y in 0..side {
        for x in 0..side {
            px[y * side + x] = means[(y / patch) * grid + x / patch];
        }
    }
    Ok((px, side, side))
}

pub const EXPORT_SCHEMES: [&str; 5] = ["raw", "smashed", "cutout", "mixup", "patch_cutmix"];

/// Nearest-neighbour enlargement by an integer factor.
fn upscale(px: &[f64], w: usize, h: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(px.len() * k * k);
    for y in 0..h * k {
        for x in 0..w * k {
            out.push(px[(y / k) * w + x / k]);
        }
    }
    out
}

/// Writes `{i}_{scheme}.pgm` for the first `count` training images, using the
/// initialized lower segment of client 0. Mixed schemes pair image `i` with
/// image `i + 1` at equal ratios.
pub fn export_smashed_images(
    cfg: &ExperimentConfig,
    count: usize,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    const SCALE: usize = 4;
    let state = SimulationState::new(cfg.clone())?;
    let lower = &state.clients[0].lower;
    let n_p = state.vit.num_patches();
    let patch = state.vit.patch_size;
    let delta = cfg.privacy.delta_bound;
    let mut rng = SeededRng::derive(cfg.seed, StreamKind::Export, &[]);
    let ratios = MixingRatios::uniform(2)?;
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let count = count.min(state.train.len());
    for i in 0..count {
        let img = state.train.image(i);
        let other = state.train.image((i + 1) % state.train.len());
        let a = SmashedData::new(clamp_smashed(&lower.forward(&img)?.0, delta), 0)?;
        let b = SmashedData::new(clamp_smashed(&lower.forward(&other)?.0, delta), 1)?;
        let masks = build_patch_masks(&mut rng, &ratios, n_p)?;
        let renders = [
            render_image(&img),
            render_smashed(&a, patch)?,
            render_smashed(&cutout(&a, &masks[0])?, patch)?,
            render_smashed(&mixup(&[(a.clone(), 0.5), (b.clone(), 0.5)])?, patch)?,
            render_smashed(
                &patch_cutmix_aggregate(&[
                    (cutout(&a, &masks[0])?, masks[0].clone()),
                    (cutout(&b, &masks[1])?, masks[1].clone()),
                ])?,
                patch,
            )?,
        ];
        for (scheme, (px, w, h)) in EXPORT_SCHEMES.iter().zip(renders) {
            let norm = upscale(&min_max_normalize(&px), w, h, SCALE);
            let path = dir.join(format!("{i}_{scheme}.pgm"));
            fs::write(&path, encode_pgm(&norm, w * SCALE, h * SCALE))?;
            written.push(path);
        }
    }
    Ok(written)
}
