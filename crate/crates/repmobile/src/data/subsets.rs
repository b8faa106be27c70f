//! Nested, stratified training subsets.
//!
//! Every (class, device) stratum is shuffled once, and a subset takes a
//! prefix of each stratum. Per-stratum take counts start at
//! `floor(f * n_stratum)` and each class's leftover slots are handed out by
//! fractional remainder with a class-rotated start, so rounding errors
//! cancel across classes and both class and device proportions stay within
//! one sample of exact. Counts are computed for ascending fractions and
//! never shrink, which makes smaller subsets strict subsets of larger ones.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use super::index::SampleMeta;
use crate::error::{Error, Result};
use crate::rng::stream_rng;

const TAG_SUBSET: u64 = 0x5eb5;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SubsetManifest {
    pub fraction: f64,
    pub ids: Vec<u64>,
}

pub fn make_subsets(
    samples: &[SampleMeta],
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<SubsetManifest>> {
    if samples.is_empty() {
        return Err(Error::Input("cannot subset an empty index".into()));
    }
    for f in fractions {
        if !(*f > 0.0 && *f <= 1.0) {
            return Err(Error::Config(format!("fraction {} outside (0, 1]", f)));
        }
    }

    let mut strata: BTreeMap<(u32, u32), Vec<u64>> = BTreeMap::new();
    for s in samples {
        strata.entry((s.class, s.device)).or_default().push(s.id);
    }
    for ((class, device), ids) in strata.iter_mut() {
        ids.sort_unstable();
        let mut rng = stream_rng(seed, &[TAG_SUBSET, *class as u64, *device as u64]);
        ids.shuffle(&mut rng);
    }

    let classes: Vec<u32> = {
        let mut c: Vec<u32> = samples.iter().map(|s| s.class).collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let devices: Vec<u32> = {
        let mut d: Vec<u32> = samples.iter().map(|s| s.device).collect();
        d.sort_unstable();
        d.dedup();
        d
    };

    let mut order: Vec<(usize, f64)> = fractions.iter().copied().enumerate().collect();
    order.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());

    let mut taken: BTreeMap<(u32, u32), usize> = strata.keys().map(|k| (*k, 0usize)).collect();
    let mut out: Vec<Option<SubsetManifest>> = vec![None; fractions.len()];

    for (orig, f) in order {
        for (ci, &class) in classes.iter().enumerate() {
            let sizes: Vec<(u32, usize)> = devices
                .iter()
                .map(|&d| (d, strata.get(&(class, d)).map_or(0, |v| v.len())))
                .collect();
            let n_c: usize = sizes.iter().map(|(_, n)| n).sum();
            let k_c = ((f * n_c as f64 + 0.5).floor() as usize).min(n_c);

            // floors, clamped up to previous counts so fractions nest
            let mut base: BTreeMap<u32, usize> = BTreeMap::new();
            for (d, n_cd) in &sizes {
                let fl = (f * *n_cd as f64).floor() as usize;
                base.insert(*d, fl.max(taken[&(class, *d)]).min(*n_cd));
            }
            // tiny strata can overshoot the class quota when an earlier
            // fraction's extras exceed this fraction's floors elsewhere;
            // trim floor-driven increases (never below previous counts)
            let mut assigned: usize = base.values().sum();
            while assigned > k_c {
                let victim = sizes
                    .iter()
                    .filter(|(d, _)| base[d] > taken[&(class, *d)])
                    .max_by(|(da, na), (db, nb)| {
                        let over_a = base[da] as f64 - f * *na as f64;
                        let over_b = base[db] as f64 - f * *nb as f64;
                        over_a.partial_cmp(&over_b).unwrap().then(db.cmp(da))
                    })
                    .map(|(d, _)| *d);
                match victim {
                    Some(d) => *base.get_mut(&d).unwrap() -= 1,
                    None => break,
                }
                assigned -= 1;
            }
            let mut extras = k_c.saturating_sub(assigned);

            // positive-remainder candidates, start offset rotated per class
            let mut candidates: Vec<(f64, u32)> = sizes
                .iter()
                .filter(|(d, n_cd)| base[d] < *n_cd)
                .map(|(d, n_cd)| {
                    let q = f * *n_cd as f64;
                    (q - q.floor(), *d)
                })
                .filter(|(rem, _)| *rem > 1e-9)
                .collect();
            candidates.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            if !candidates.is_empty() {
                let len = candidates.len();
                let mut j = 0usize;
                let mut scanned = 0usize;
                while extras > 0 && scanned < 2 * len {
                    let (_, d) = candidates[(ci + j) % len];
                    let cap = sizes.iter().find(|(dd, _)| *dd == d).unwrap().1;
                    let b = base.get_mut(&d).unwrap();
                    if *b < cap {
                        *b += 1;
                        extras -= 1;
                    }
                    j += 1;
                    scanned += 1;
                }
            }
            // spill any leftovers (exhausted fairness candidates) anywhere
            if extras > 0 {
                for (d, n_cd) in &sizes {
                    while extras > 0 && base[d] < *n_cd {
                        *base.get_mut(d).unwrap() += 1;
                        extras -= 1;
                    }
                }
            }
            for (d, b) in base {
                taken.insert((class, d), b);
            }
        }

        let mut ids = Vec::new();
        for ((class, device), list) in &strata {
            ids.extend_from_slice(&list[..taken[&(*class, *device)]]);
        }
        ids.sort_unstable();
        out[orig] = Some(SubsetManifest { fraction: f, ids });
    }
    Ok(out.into_iter().map(|m| m.unwrap()).collect())
}

/// Check the nesting invariant over a list of manifests (each smaller
/// fraction fully contained in every larger one).
pub fn check_nesting(manifests: &[SubsetManifest]) -> bool {
    let mut sorted: Vec<&SubsetManifest> = manifests.iter().collect();
    sorted.sort_by(|a, b| a.fraction.partial_cmp(&b.fraction).unwrap());
    for pair in sorted.windows(2) {
        let small: std::collections::HashSet<u64> = pair[0].ids.iter().copied().collect();
        let large: std::collections::HashSet<u64> = pair[1].ids.iter().copied().collect();
        if !small.is_subset(&large) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced_index(per_class: usize, devices: usize) -> Vec<SampleMeta> {
        let mut out = Vec::new();
        let mut id = 0u64;
        for class in 0..10u32 {
            for j in 0..per_class {
                out.push(SampleMeta {
                    id,
                    class,
                    device: (j % devices) as u32,
                    seed: id,
                    file: String::new(),
                });
                id += 1;
            }
        }
        out
    }

    #[test]
    fn full_fraction_keeps_everything() {
        let idx = balanced_index(10, 3);
        let m = make_subsets(&idx, &[1.0], 1).unwrap();
        assert_eq!(m[0].ids.len(), 100);
    }

    #[test]
    fn subsets_nest_and_stratify() {
        let idx = balanced_index(100, 3); // 1000 samples
        let fractions = [1.0, 0.5, 0.25, 0.1, 0.05];
        let manifests = make_subsets(&idx, &fractions, 7).unwrap();
        assert!(check_nesting(&manifests));

        let mut dev_total = [0f64; 3];
        for s in &idx {
            dev_total[s.device as usize] += 1.0;
        }
        for m in &manifests {
            let mut per_class = [0usize; 10];
            let mut per_device = [0usize; 3];
            for id in &m.ids {
                let s = &idx[*id as usize];
                per_class[s.class as usize] += 1;
                per_device[s.device as usize] += 1;
            }
            for c in 0..10 {
                let want = m.fraction * 100.0;
                assert!(
                    (per_class[c] as f64 - want).abs() <= 1.0,
                    "fraction {} class {}: {} vs {}",
                    m.fraction,
                    c,
                    per_class[c],
                    want
                );
            }
            for d in 0..3 {
                let want = m.fraction * dev_total[d];
                assert!(
                    (per_device[d] as f64 - want).abs() <= 1.0,
                    "fraction {} device {}: {} vs {}",
                    m.fraction,
                    d,
                    per_device[d],
                    want
                );
            }
        }
    }

    #[test]
    fn half_fraction_counts() {
        let idx = balanced_index(10, 3);
        let m = make_subsets(&idx, &[0.5], 3).unwrap();
        let mut per_class = [0usize; 10];
        for id in &m[0].ids {
            per_class[idx[*id as usize].class as usize] += 1;
        }
        for c in per_class {
            assert!((c as i64 - 5).abs() <= 1);
        }
    }

    #[test]
    fn deterministic_and_fraction_validated() {
        let idx = balanced_index(10, 3);
        let a = make_subsets(&idx, &[0.25], 5).unwrap();
        let b = make_subsets(&idx, &[0.25], 5).unwrap();
        assert_eq!(a, b);
        assert!(make_subsets(&idx, &[0.0], 5).is_err());
        assert!(make_subsets(&idx, &[1.5], 5).is_err());
    }
}
