//! The mixer role: mixing ratios and the pseudorandom patch masks that
//! split a patch grid among the members of one mixing group.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::rng::{sample_dirichlet, SeededRng};

/// How the mixer draws ratios for a group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LambdaMode {
    #[default]
    Uniform,
    /// Symmetric Dirichlet with the given concentration.
    Dirichlet { concentration: f64 },
}

/// Per-client shares of one mixed sample; lies on the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingRatios(Vec<f64>);

impl MixingRatios {
    pub const SUM_TOLERANCE: f64 = 1e-12;

    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return param_err("mixing ratios need at least one client");
        }
        if lambdas.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return param_err(format!("mixing ratios must lie in [0, 1]: {lambdas:?}"));
        }
        let total: f64 = lambdas.iter().sum();
        if (total - 1.0).abs() > Self::SUM_TOLERANCE {
            return param_err(format!("mixing ratios sum to {total}, not 1"));
        }
        Ok(Self(lambdas))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return param_err("group size must be at least 1");
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

pub fn draw_mixing_ratios(
    rng: &mut SeededRng,
    group_size: usize,
    mode: LambdaMode,
) -> Result<MixingRatios> {
    if group_size == 0 {
        return param_err("group size must be at least 1");
    }
    if group_size == 1 {
        return Ok(MixingRatios(vec![1.0]));
    }
    match mode {
        LambdaMode::Uniform => MixingRatios::uniform(group_size),
        LambdaMode::Dirichlet { concentration } => {
            let draw = sample_dirichlet(rng, &vec![concentration; group_size])?;
            Ok(MixingRatios(draw))
        }
    }
}

/// Binary patch selector for one member of a mixing group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchMask {
    pub client_id: usize,
    pub num_patches: usize,
    /// Sorted patch indices this client keeps.
    pub selected: Vec<usize>,
}

impl PatchMask {
    pub fn full(client_id: usize, num_patches: usize) -> Self {
        Self {
            client_id,
            num_patches,
            selected: (0..num_patches).collect(),
        }
    }

    pub fn from_indices(
        client_id: usize,
        num_patches: usize,
        mut selected: Vec<usize>,
    ) -> Result<Self> {
        selected.sort_unstable();
        selected.dedup();
        if selected.last().is_some_and(|&k| k >= num_patches) {
            return param_err(format!(
                "patch index out of range for {num_patches} patches"
            ));
        }
        Ok(Self {
            client_id,
            num_patches,
            selected,
        })
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, patch: usize) -> bool {
        self.selected.binary_search(&patch).is_ok()
    }

    /// Dense 0/1 indicator of length `num_patches`.
    pub fn indicator(&self) -> Vec<bool> {
        let mut bits = vec![false; self.num_patches];
        for &k in &self.selected {
            bits[k] = true;
        }
        bits
    }
}

/// Largest-remainder apportionment of `num_patches` by `ratios`.
///
/// Each member gets `⌊λ·N⌋`; leftover patches go one each to the largest
/// fractional remainders, ties to the lower index.
pub fn apportion(ratios: &MixingRatios, num_patches: usize) -> Vec<usize> {
    let exact: Vec<f64> = ratios
        .as_slice()
        .iter()
        .map(|l| l * num_patches as f64)
        .collect();
    let mut quotas: Vec<usize> = exact.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = quotas.iter().sum();
    let mut leftover = num_patches.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    while leftover > 0 {
        for &i in &order {
            if leftover == 0 {
                break;
            }
            quotas[i] += 1;
            leftover -= 1;
        }
    }
    quotas
}

/// Splits a uniformly random permutation of `0..num_patches` by the apportioned quotas.
///
/// Masks carry the group-local member index as `client_id`.
pub fn build_patch_masks(
    rng: &mut SeededRng,
    ratios: &MixingRatios,
    num_patches: usize,
) -> Result<Vec<PatchMask>> {
    if num_patches == 0 {
        return param_err("number of patches must be positive");
    }
    let quotas = apportion(ratios, num_patches);
    let mut perm: Vec<usize> = (0..num_patches).collect();
    if ratios.len() > 1 {
        rng.shuffle(&mut perm);
    }
    let mut masks = Vec::with_capacity(quotas.len());
    let mut start = 0;
    for (member, &q) in quotas.iter().enumerate() {
        let mut selected = perm[start..start + q].to_vec();
        selected.sort_unstable();
        masks.push(PatchMask {
            client_id: member,
            num_patches,
            selected,
        });
        start += q;
    }
    Ok(masks)
}

/// Checks that `masks` are pairwise disjoint and jointly cover every patch.
pub fn check_partition(masks: &[PatchMask]) -> Result<()> {
    let Some(first) = masks.first() else {
        return Err(Error::Protocol("empty mask family".into()));
    };
    let n = first.num_patches;
    let mut owner = vec![usize::MAX; n];
    for (i, m) in masks.iter().enumerate() {
        if m.num_patches != n {
            return Err(Error::Protocol("masks disagree on patch count".into()));
        }
        for &k in &m.selected {
            if k >= n {
                return Err(Error::Protocol(format!("patch {k} out of range")));
            }
            if owner[k] != usize::MAX {
                return Err(Error::Protocol(format!("patch {k} selected by two masks")));
            }
            owner[k] = i;
        }
    }
    if let Some(k) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(Error::Protocol(format!(
            "patch {k} not covered by any mask"
        )));
    }
    Ok(())
}

/// Owner map: for each patch, the position in `masks` of the mask selecting it.
pub fn owner_map(masks: &[PatchMask]) -> Result<Vec<usize>> {
    check_partition(masks)?;
    let mut owner = vec![0; masks[0].num_patches];
    for (i, m) in masks.iter().enumerate() {
        for &k in &m.selected {
            owner[k] = i;
        }
    }
    Ok(owner)
}
