//! Interpolation schemes over patchified data: Cutout, Mixup, bounding-box
//! CutMix, and the patch-level CutMix aggregation performed by the server.
//!
//! Raw images go through the same code paths by viewing every pixel as a
//! one-pixel patch.

use crate::error::{param_err, shape_err, Result};
use crate::mixer::{owner_map, PatchMask};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Patchified activation `[N, F]`: `N` patches on a square grid, `F` features per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct SmashedData {
    pub patches: Tensor,
    pub client_id: usize,
}

impl SmashedData {
    pub fn new(patches: Tensor, client_id: usize) -> Result<Self> {
        if patches.shape().len() != 2 {
            return shape_err(format!(
                "smashed data must be [N, F], got {:?}",
                patches.shape()
            ));
        }
        Ok(Self { patches, client_id })
    }

    /// Views an `H×W×C` image as `H·W` one-pixel patches of `C` features.
    pub fn from_image(image: &Tensor, client_id: usize) -> Result<Self> {
        let [h, w, c] = image.shape() else {
            return shape_err(format!("image must be H×W×C, got {:?}", image.shape()));
        };
        let patches = image.clone().reshape(vec![h * w, *c])?;
        Self::new(patches, client_id)
    }

    pub fn num_patches(&self) -> usize {
        self.patches.rows()
    }

    pub fn features(&self) -> usize {
        self.patches.cols()
    }

    /// Side of the square patch grid.
    pub fn grid_side(&self) -> Result<usize> {
        grid_side(self.num_patches())
    }
}

pub fn grid_side(num_patches: usize) -> Result<usize> {
    let side = (num_patches as f64).sqrt().round() as usize;
    if side * side != num_patches {
        return param_err(format!("{num_patches} patches do not form a square grid"));
    }
    Ok(side)
}

/// One server-side training example built from a mixing group.
#[derive(Debug, Clone)]
pub struct MixedBatchItem {
    pub smashed: SmashedData,
    pub label: Tensor,
    /// `(client id, λ, mask)` for every contributor.
    pub contributors: Vec<(usize, f64, PatchMask)>,
}

pub(crate) fn cutout_tensor(s: &Tensor, mask: &PatchMask) -> Result<Tensor> {
    if mask.num_patches != s.rows() {
        return shape_err(format!(
            "mask for {} patches applied to {} patches",
            mask.num_patches,
            s.rows()
        ));
    }
    let mut out = Tensor::zeros(s.shape());
    for &k in &mask.selected {
        out.row_mut(k).copy_from_slice(s.row(k));
    }
    Ok(out)
}

/// `M ⊙ s`: selected patches copied, every other patch exactly zero.
pub fn cutout(s: &SmashedData, mask: &PatchMask) -> Result<SmashedData> {
    Ok(SmashedData {
        patches: cutout_tensor(&s.patches, mask)?,
        client_id: s.client_id,
    })
}

/// Sums cutout uploads whose masks partition the patch grid.
///
/// Each output patch is copied from the single contributor owning it, which
/// equals the elementwise sum because every other contributor is zero there.
pub fn patch_cutmix_aggregate(items: &[(SmashedData, PatchMask)]) -> Result<SmashedData> {
    let Some((first, _)) = items.first() else {
        return param_err("nothing to aggregate");
    };
    for (s, _) in items {
        first.patches.same_shape(&s.patches)?;
    }
    let masks: Vec<PatchMask> = items.iter().map(|(_, m)| m.clone()).collect();
    if masks[0].num_patches != first.num_patches() {
        return shape_err("mask patch count differs from smashed data");
    }
    let owner = owner_map(&masks)?;
    let mut out = Tensor::zeros(first.patches.shape());
    for (k, &o) in owner.iter().enumerate() {
        out.row_mut(k).copy_from_slice(items[o].0.patches.row(k));
    }
    Ok(SmashedData {
        patches: out,
        client_id: first.client_id,
    })
}

fn check_ratio_sum(lambdas: impl Iterator<Item = f64>) -> Result<()> {
    let total: f64 = lambdas.sum();
    if (total - 1.0).abs() > 1e-9 {
        return param_err(format!("mixing ratios sum to {total}, not 1"));
    }
    Ok(())
}

/// Convex combination `Σ λ_i s_i`.
pub fn mixup(items: &[(SmashedData, f64)]) -> Result<SmashedData> {
    let Some((first, _)) = items.first() else {
        return param_err("nothing to mix");
    };
    check_ratio_sum(items.iter().map(|(_, l)| *l))?;
    let mut out = first.patches.scale(items[0].1);
    for (s, l) in &items[1..] {
        out.axpy(*l, &s.patches)?;
    }
    Ok(SmashedData {
        patches: out,
        client_id: first.client_id,
    })
}

/// `Σ λ_i y_i`.
pub fn mix_labels(labels: &[(Tensor, f64)]) -> Result<Tensor> {
    let Some((first, _)) = labels.first() else {
        return param_err("nothing to mix");
    };
    check_ratio_sum(labels.iter().map(|(_, l)| *l))?;
    let mut out = first.scale(labels[0].1);
    for (y, l) in &labels[1..] {
        out.axpy(*l, y)?;
    }
    Ok(out)
}

/// Half-open rectangle `[x0, x1) × [y0, y1)` on the patch grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoxRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxRegion {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

/// Unclipped box side for a square grid: `⌊side·√(1−λ)⌋`.
pub fn box_side(grid: usize, lambda_keep: f64) -> usize {
    ((grid as f64) * (1.0 - lambda_keep).max(0.0).sqrt()).floor() as usize
}

/// Box of side `box_side(grid, λ)` centred at `(cx, cy)`, clipped to the grid.
pub fn box_at(grid: usize, lambda_keep: f64, cx: usize, cy: usize) -> BoxRegion {
    let cut = box_side(grid, lambda_keep) as isize;
    let clip = |v: isize| v.clamp(0, grid as isize) as usize;
    let (x0, y0) = (cx as isize - cut / 2, cy as isize - cut / 2);
    BoxRegion {
        x0: clip(x0),
        y0: clip(y0),
        x1: clip(x0 + cut),
        y1: clip(y0 + cut),
    }
}

/// Box with uniformly random centre.
pub fn random_box(rng: &mut SeededRng, grid: usize, lambda_keep: f64) -> BoxRegion {
    let cx = rng.below(grid);
    let cy = rng.below(grid);
    box_at(grid, lambda_keep, cx, cy)
}

/// Copies `b`'s patches inside `region` over `a`; returns the mix and `a`'s realized share.
pub fn apply_box(
    a: &SmashedData,
    b: &SmashedData,
    region: BoxRegion,
) -> Result<(SmashedData, f64)> {
    a.patches.same_shape(&b.patches)?;
    let grid = a.grid_side()?;
    let mut out = a.patches.clone();
    for y in region.y0..region.y1 {
        for x in region.x0..region.x1 {
            let k = y * grid + x;
            out.row_mut(k).copy_from_slice(b.patches.row(k));
        }
    }
    let lambda = 1.0 - region.area() as f64 / (grid * grid) as f64;
    Ok((
        SmashedData {
            patches: out,
            client_id: a.client_id,
        },
        lambda,
    ))
}

/// Bounding-box CutMix of two samples: a random box covering `1 − λ_a` of the
/// grid is taken from `b`. Returns the realized λ after border clipping.
pub fn vanilla_cutmix(
    a: &SmashedData,
    b: &SmashedData,
    lambda_a: f64,
    rng: &mut SeededRng,
) -> Result<(SmashedData, f64)> {
    if !(0.0..=1.0).contains(&lambda_a) {
        return param_err(format!("λ must lie in [0, 1], got {lambda_a}"));
    }
    a.patches.same_shape(&b.patches)?;
    let grid = a.grid_side()?;
    let region = random_box(rng, grid, lambda_a);
    apply_box(a, b, region)
}

/// Bounding-box CutMix over a whole group: member 0 is the base, each later
/// member `j` pastes a random box of area fraction `λ_j` in order.
///
/// Returns the mix and the per-patch owner (index into `items`).
pub fn vanilla_cutmix_group(
    items: &[&SmashedData],
    lambdas: &[f64],
    rng: &mut SeededRng,
) -> Result<(SmashedData, Vec<usize>)> {
    let Some(base) = items.first() else {
        return param_err("nothing to mix");
    };
    if items.len() != lambdas.len() {
        return param_err("one ratio per group member required");
    }
    let n = base.num_patches();
    let grid = base.grid_side()?;
    let mut owner = vec![0usize; n];
    for (j, l) in lambdas.iter().enumerate().skip(1) {
        items[j].patches.same_shape(&base.patches)?;
        let region = random_box(rng, grid, 1.0 - l);
        for y in region.y0..region.y1 {
            for x in region.x0..region.x1 {
                owner[y * grid + x] = j;
            }
        }
    }
    let mut out = Tensor::zeros(base.patches.shape());
    for (k, &o) in owner.iter().enumerate() {
        out.row_mut(k).copy_from_slice(items[o].patches.row(k));
    }
    Ok((
        SmashedData {
            patches: out,
            client_id: base.client_id,
        },
        owner,
    ))
}

/// Fraction of patches owned by each of `members` group members.
pub fn ownership_shares(owner: &[usize], members: usize) -> Vec<f64> {
    let mut counts = vec![0usize; members];
    for &o in owner {
        counts[o] += 1;
    }
    counts
        .into_iter()
        .map(|c| c as f64 / owner.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sd(rows: &[&[f64]], id: usize) -> SmashedData {
        SmashedData::new(Tensor::from_rows(rows), id).unwrap()
    }

    #[test]
    fn cutout_cases() {
        let s = sd(&[&[1.0, 1.0], &[2.0, 2.0]], 0);
        assert_eq!(cutout(&s, &PatchMask::full(0, 2)).unwrap(), s);
        let empty = PatchMask::from_indices(0, 2, vec![]).unwrap();
        assert!(cutout(&s, &empty)
            .unwrap()
            .patches
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let first = PatchMask::from_indices(0, 2, vec![0]).unwrap();
        assert_eq!(
            cutout(&s, &first).unwrap().patches,
            Tensor::from_rows(&[&[1.0, 1.0], &[0.0, 0.0]])
        );
        assert!(cutout(&s, &PatchMask::full(0, 3)).is_err());
    }

    #[test]
    fn disjoint_aggregate() {
        let m0 = PatchMask::from_indices(0, 2, vec![0]).unwrap();
        let m1 = PatchMask::from_indices(1, 2, vec![1]).unwrap();
        let s1 = sd(&[&[1.0, 1.0], &[0.0, 0.0]], 0);
        let s2 = sd(&[&[0.0, 0.0], &[4.0, 4.0]], 1);
        let out =
            patch_cutmix_aggregate(&[(s1.clone(), m0.clone()), (s2.clone(), m1.clone())]).unwrap();
        assert_eq!(out.patches, Tensor::from_rows(&[&[1.0, 1.0], &[4.0, 4.0]]));
        assert_eq!(out.patches, s1.patches.add(&s2.patches).unwrap());
        let swapped = patch_cutmix_aggregate(&[(s2, m1), (s1, m0)]).unwrap();
        assert_eq!(swapped.patches, out.patches);
    }

    #[test]
    fn aggregate_single_full_mask_is_identity() {
        let s = sd(&[&[0.3], &[0.7]], 0);
        let out = patch_cutmix_aggregate(&[(s.clone(), PatchMask::full(0, 2))]).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn aggregate_rejects_overlap() {
        let s = sd(&[&[0.3], &[0.7]], 0);
        let m = PatchMask::full(0, 2);
        assert!(patch_cutmix_aggregate(&[(s.clone(), m.clone()), (s, m)]).is_err());
    }

    #[test]
    fn mixup_cases() {
        let a = sd(&[&[2.0]], 0);
        let b = sd(&[&[4.0]], 1);
        assert_eq!(mixup(&[(a.clone(), 1.0)]).unwrap(), a);
        assert_eq!(
            mixup(&[(a.clone(), 0.5), (b, 0.5)]).unwrap().patches.data(),
            &[3.0]
        );
        let x = sd(&[&[0.37, 0.11]], 0);
        let same = mixup(&[(x.clone(), 0.3), (x.clone(), 0.7)]).unwrap();
        for (u, v) in same.patches.data().iter().zip(x.patches.data()) {
            assert!((u - v).abs() < 1e-15);
        }
        assert!(mixup(&[(a.clone(), 0.5), (a, 0.4)]).is_err());
    }

    #[test]
    fn label_mixing() {
        let y0 = crate::mechanism::one_hot(0, 3);
        let y1 = crate::mechanism::one_hot(1, 3);
        let m = mix_labels(&[(y0.clone(), 0.3), (y1, 0.7)]).unwrap();
        assert_eq!(m.data(), &[0.3, 0.7, 0.0]);
        assert!((m.sum() - 1.0).abs() < 1e-15);
        assert_eq!(mix_labels(&[(y0.clone(), 1.0)]).unwrap(), y0);
        let bad = Tensor::zeros(&[4]);
        assert!(mix_labels(&[(y0, 0.5), (bad, 0.5)]).is_err());
    }

    #[test]
    fn vanilla_cutmix_edges() {
        let mut rng = SeededRng::new(1, 2);
        let a = SmashedData::new(Tensor::full(&[16, 2], 1.0), 0).unwrap();
        let b = SmashedData::new(Tensor::full(&[16, 2], 5.0), 1).unwrap();
        let (out, lam) = vanilla_cutmix(&a, &b, 1.0, &mut rng).unwrap();
        assert_eq!(out, a);
        assert_eq!(lam, 1.0);

        let full = BoxRegion {
            x0: 0,
            y0: 0,
            x1: 4,
            y1: 4,
        };
        let (out, lam) = apply_box(&a, &b, full).unwrap();
        assert_eq!(out.patches, b.patches);
        assert_eq!(lam, 0.0);
        // Centred full-size box covers everything too.
        assert_eq!(box_at(4, 0.0, 2, 2), full);

        let odd = SmashedData::new(Tensor::zeros(&[15, 1]), 0).unwrap();
        assert!(vanilla_cutmix(&odd, &odd, 0.5, &mut rng).is_err());
    }

    #[test]
    fn box_side_oracle() {
        // side = floor(√(1 − λ) · W): √0.25 · 32 = 16
        assert_eq!(box_side(32, 0.75), 16);
        let region = box_at(32, 0.75, 16, 16);
        assert_eq!((region.x1 - region.x0, region.y1 - region.y0), (16, 16));
        let clipped = box_at(32, 0.75, 0, 0);
        assert_eq!(clipped.area(), 64);
    }

    #[test]
    fn realized_lambda_matches_area() {
        let mut rng = SeededRng::new(9, 9);
        let a = SmashedData::new(Tensor::full(&[64, 1], 0.0), 0).unwrap();
        let b = SmashedData::new(Tensor::full(&[64, 1], 1.0), 1).unwrap();
        for _ in 0..50 {
            let (out, lam) = vanilla_cutmix(&a, &b, 0.6, &mut rng).unwrap();
            let from_b = out.patches.sum() / 64.0;
            assert!((lam - (1.0 - from_b)).abs() < 1e-15);
        }
    }

    #[test]
    fn group_cutmix_single_member_identity() {
        let mut rng = SeededRng::new(1, 1);
        let a = SmashedData::new(Tensor::full(&[4, 3], 0.5), 0).unwrap();
        let (out, owner) = vanilla_cutmix_group(&[&a], &[1.0], &mut rng).unwrap();
        assert_eq!(out, a);
        assert_eq!(owner, vec![0; 4]);
    }

    mod props {
        use super::*;
        use crate::mixer::{build_patch_masks, draw_mixing_ratios, LambdaMode};
        use proptest::prelude::*;

        fn random_smashed(
            rng: &mut SeededRng,
            n: usize,
            f: usize,
            id: usize,
            delta: f64,
        ) -> SmashedData {
            let data = (0..n * f).map(|_| rng.uniform() * delta).collect();
            SmashedData::new(Tensor::new(vec![n, f], data).unwrap(), id).unwrap()
        }

        proptest! {
            #[test]
            fn aggregate_copies_owner_patch(seed in any::<u64>(), members in 1usize..6, n in 1usize..40) {
                let mut rng = SeededRng::new(seed, 0);
                let ratios = draw_mixing_ratios(&mut rng, members, LambdaMode::Dirichlet { concentration: 1.0 }).unwrap();
                let masks = build_patch_masks(&mut rng, &ratios, n).unwrap();
                let raw: Vec<SmashedData> = (0..members).map(|i| random_smashed(&mut rng, n, 3, i, 0.2)).collect();
                let items: Vec<(SmashedData, PatchMask)> = raw.iter().zip(&masks)
                    .map(|(s, m)| (cutout(s, m).unwrap(), m.clone())).collect();
                let out = patch_cutmix_aggregate(&items).unwrap();
                for k in 0..n {
                    let owner = masks.iter().position(|m| m.contains(k)).unwrap();
                    prop_assert_eq!(out.patches.row(k), raw[owner].patches.row(k));
                }
                prop_assert!(out.patches.data().iter().all(|&v| (0.0..=0.2).contains(&v)));
            }

            #[test]
            fn mixup_permutation_invariant_and_bounded(seed in any::<u64>(), members in 1usize..6) {
                let mut rng = SeededRng::new(seed, 1);
                let ratios = draw_mixing_ratios(&mut rng, members, LambdaMode::Dirichlet { concentration: 1.0 }).unwrap();
                let items: Vec<(SmashedData, f64)> = ratios.as_slice().iter().enumerate()
                    .map(|(i, &l)| (random_smashed(&mut rng, 4, 2, i, 0.2), l)).collect();
                let fwd = mixup(&items).unwrap();
                let mut rev = items.clone();
                rev.reverse();
                let bwd = mixup(&rev).unwrap();
                for (a, b) in fwd.patches.data().iter().zip(bwd.patches.data()) {
                    prop_assert!((a - b).abs() < 1e-14);
                    prop_assert!(*a >= 0.0 && *a <= 0.2 + 1e-12);
                }
                let labels: Vec<(Tensor, f64)> = items.iter().map(|(s, l)| (s.patches.clone(), *l)).collect();
                let mut rlabels = labels.clone();
                rlabels.reverse();
                let lf = mix_labels(&labels).unwrap();
                let lb = mix_labels(&rlabels).unwrap();
                for (a, b) in lf.data().iter().zip(lb.data()) {
                    prop_assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }
}
