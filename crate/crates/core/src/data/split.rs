//! Deterministic three-way sample split: test / pretrain / pretrain-monitor.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{contract, Result};
use crate::rng;

use super::{ExpressionMatrix, SplitSpec};

/// Disjoint, exhaustive row-index partitions of a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitIndices {
    pub pretrain: Vec<usize>,
    pub pretrain_monitor: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    /// Development = everything that is not test.
    pub fn dev(&self) -> Vec<usize> {
        let mut v = self.pretrain.clone();
        v.extend_from_slice(&self.pretrain_monitor);
        v.sort_unstable();
        v
    }
}

/// Split samples with the given fractions. Sorting by id before the seeded
/// shuffle makes the result invariant to input row order; with `labels`
/// present and `spec.stratify`, each label stratum is split separately.
pub fn split(
    m: &ExpressionMatrix,
    labels: Option<&BTreeMap<String, String>>,
    spec: &SplitSpec,
) -> Result<SplitIndices> {
    for (name, f) in [
        ("test_fraction", spec.test_fraction),
        ("pretrain_fraction_of_dev", spec.pretrain_fraction_of_dev),
    ] {
        if !(0.0 < f && f < 1.0) {
            return Err(contract(format!("split: {name} {f} outside (0,1)")));
        }
    }

    // group rows by stratum (single stratum when not stratifying)
    let mut strata: BTreeMap<String, Vec<(String, usize)>> = BTreeMap::new();
    for (row, id) in m.sample_ids.iter().enumerate() {
        let key = match (spec.stratify, labels) {
            (true, Some(map)) => map
                .get(id)
                .ok_or_else(|| contract(format!("split: sample \"{id}\" has no label")))?
                .clone(),
            _ => String::new(),
        };
        strata.entry(key).or_default().push((id.clone(), row));
    }

    let mut out = SplitIndices {
        pretrain: Vec::new(),
        pretrain_monitor: Vec::new(),
        test: Vec::new(),
    };
    let mut rng = rng::stream(spec.seed, "split");
    for (stratum, mut members) in strata {
        if spec.stratify && members.len() < 2 {
            return Err(contract(format!(
                "split: stratum \"{stratum}\" has fewer than 2 samples"
            )));
        }
        members.sort(); // by id, so input order is irrelevant
        members.shuffle(&mut rng);
        let n = members.len();
        let n_test = ((n as f64) * spec.test_fraction).round() as usize;
        let n_test = n_test.min(n.saturating_sub(1)).max(usize::from(n >= 2));
        let (test, dev) = members.split_at(n_test);
        let n_pre = ((dev.len() as f64) * spec.pretrain_fraction_of_dev).round() as usize;
        let n_pre = n_pre.min(dev.len().saturating_sub(1)).max(usize::from(dev.len() >= 2));
        out.test.extend(test.iter().map(|(_, r)| *r));
        out.pretrain.extend(dev[..n_pre].iter().map(|(_, r)| *r));
        out.pretrain_monitor.extend(dev[n_pre..].iter().map(|(_, r)| *r));
    }
    out.test.sort_unstable();
    out.pretrain.sort_unstable();
    out.pretrain_monitor.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(n: usize) -> ExpressionMatrix {
        ExpressionMatrix::new(
            (0..n).map(|i| format!("s{i:03}")).collect(),
            vec!["g0".into()],
            vec![0.0; n],
            vec![true; n],
        )
        .unwrap()
    }

    fn spec(seed: u64) -> SplitSpec {
        SplitSpec {
            test_fraction: 0.3,
            pretrain_fraction_of_dev: 0.8,
            stratify: false,
            seed,
        }
    }

    #[test]
    fn deterministic_30_70() {
        let m = matrix(100);
        let a = split(&m, None, &spec(9)).unwrap();
        let b = split(&m, None, &spec(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.test.len(), 30);
        assert_eq!(a.pretrain.len() + a.pretrain_monitor.len(), 70);
        assert_eq!(a.pretrain.len(), 56); // 80% of 70
    }

    #[test]
    fn partitions_are_disjoint_and_exhaustive() {
        let m = matrix(53);
        let s = split(&m, None, &spec(1)).unwrap();
        let mut all: Vec<usize> = s
            .test
            .iter()
            .chain(&s.pretrain)
            .chain(&s.pretrain_monitor)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..53).collect::<Vec<_>>());
    }

    #[test]
    fn invariant_to_input_order() {
        let m = matrix(40);
        let s1 = split(&m, None, &spec(4)).unwrap();
        // reverse the rows; same ids, different positions
        let rows: Vec<usize> = (0..40).rev().collect();
        let rev = m.select_samples(&rows);
        let s2 = split(&rev, None, &spec(4)).unwrap();
        let ids = |idx: &[usize], m: &ExpressionMatrix| -> Vec<String> {
            let mut v: Vec<String> = idx.iter().map(|&r| m.sample_ids[r].clone()).collect();
            v.sort();
            v
        };
        assert_eq!(ids(&s1.test, &m), ids(&s2.test, &rev));
        assert_eq!(ids(&s1.pretrain, &m), ids(&s2.pretrain, &rev));
    }

    #[test]
    fn stratified_share_within_one_sample() {
        let n = 90;
        let m = matrix(n);
        let mut labels = BTreeMap::new();
        for i in 0..n {
            labels.insert(format!("s{i:03}"), format!("c{}", i % 3));
        }
        let mut sp = spec(7);
        sp.stratify = true;
        let s = split(&m, Some(&labels), &sp).unwrap();
        for c in 0..3 {
            let label = format!("c{c}");
            let in_test = s
                .test
                .iter()
                .filter(|&&r| labels[&m.sample_ids[r]] == label)
                .count();
            let expected = 30.0 * 0.3;
            assert!((in_test as f64 - expected).abs() <= 1.0, "stratum {label}: {in_test}");
        }
    }

    #[test]
    fn rejects_bad_fractions() {
        let m = matrix(10);
        let mut sp = spec(0);
        sp.test_fraction = 1.0;
        assert!(split(&m, None, &sp).is_err());
        sp.test_fraction = 0.0;
        assert!(split(&m, None, &sp).is_err());
    }
}
