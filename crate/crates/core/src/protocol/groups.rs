use crate::error::{param_err, shape_err, Result};
use crate::rng::SeededRng;
use crate::vit::{flatten_params, load_flat_params, LowerSegment, Parameters};

/// Random partition of `0..n` into consecutive groups of `g`; the last group
/// takes the remainder when `g` does not divide `n`.
pub fn form_groups(rng: &mut SeededRng, n: usize, g: usize) -> Result<Vec<Vec<usize>>> {
    if n == 0 {
        return param_err("no clients to group");
    }
    if g == 0 || g > n {
        return param_err(format!("group size {g} outside 1..={n}"));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    if g > 1 {
        rng.shuffle(&mut ids);
    }
    Ok(ids.chunks(g).map(<[usize]>::to_vec).collect())
}

/// Parameterwise mean of the client lower segments.
pub fn fedavg_lower(states: &[LowerSegment]) -> Result<LowerSegment> {
    let Some(first) = states.first() else {
        return param_err("no segments to average");
    };
    let names: Vec<(String, Vec<usize>)> = first
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    let mut sum = vec![0.0; first.num_parameters()];
    for s in states {
        let layout: Vec<(String, Vec<usize>)> = s
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if layout != names || s.config != first.config {
            return shape_err("lower segments have different architectures");
        }
        for (a, v) in sum.iter_mut().zip(flatten_params(s)) {
            *a += v;
        }
    }
    let k = states.len() as f64;
    let mean: Vec<f64> = sum.into_iter().map(|v| v / k).collect();
    let mut out = first.clone();
    load_flat_params(&mut out, &mean)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::VitConfig;
    use proptest::prelude::*;

    #[test]
    fn pairs_cover_clients() {
        let groups = form_groups(&mut SeededRng::new(1, 0), 10, 2).unwrap();
        assert_eq!(groups.len(), 5);
        let mut all: Vec<usize> = groups.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn remainder_group() {
        let groups = form_groups(&mut SeededRng::new(2, 0), 10, 3).unwrap();
        let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 3, 1]);
        let singles = form_groups(&mut SeededRng::new(2, 0), 4, 1).unwrap();
        assert_eq!(singles, vec![vec![0], vec![1], vec![2], vec![3]]);
        assert!(form_groups(&mut SeededRng::new(2, 0), 4, 5).is_err());
    }

    proptest! {
        #[test]
        fn every_client_in_one_group(n in 1usize..40, g in 1usize..40, seed in any::<u64>()) {
            prop_assume!(g <= n);
            let groups = form_groups(&mut SeededRng::new(seed, 0), n, g).unwrap();
            let mut seen = vec![0; n];
            for grp in &groups {
                prop_assert!(!grp.is_empty() && grp.len() <= g);
                for &c in grp { seen[c] += 1; }
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }
    }

    fn seg(seed: u64) -> LowerSegment {
        LowerSegment::init(VitConfig::default(), &mut SeededRng::new(seed, 0)).unwrap()
    }

    fn constant(v: f64) -> LowerSegment {
        let mut s = seg(0);
        for t in s.tensors_mut() {
            t.data_mut().fill(v);
        }
        s
    }

    #[test]
    fn identical_segments_unchanged() {
        let a = seg(3);
        assert_eq!(fedavg_lower(&[a.clone(), a.clone()]).unwrap(), a);
        // (x + x + x) / 3 can be off by one ulp.
        let avg = flatten_params(&fedavg_lower(&[a.clone(), a.clone(), a.clone()]).unwrap());
        for (x, y) in avg.iter().zip(flatten_params(&a)) {
            assert!((x - y).abs() <= 2.0 * f64::EPSILON * y.abs());
        }
    }

    #[test]
    fn midpoint() {
        let avg = fedavg_lower(&[constant(2.0), constant(4.0)]).unwrap();
        assert!(flatten_params(&avg).iter().all(|&v| v == 3.0));
    }

    #[test]
    fn permutation_invariant() {
        let segs = [seg(1), seg(2), seg(3)];
        let a = flatten_params(&fedavg_lower(&segs).unwrap());
        let b = flatten_params(
            &fedavg_lower(&[segs[2].clone(), segs[0].clone(), segs[1].clone()]).unwrap(),
        );
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1e-300) + 1e-18);
        }
    }

    #[test]
    fn architecture_mismatch_rejected() {
        let other = LowerSegment::init(
            VitConfig {
                embed_dim: 16,
                ..VitConfig::default()
            },
            &mut SeededRng::new(0, 0),
        )
        .unwrap();
        assert!(fedavg_lower(&[seg(0), other]).is_err());
    }
}
