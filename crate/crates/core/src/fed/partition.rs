use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionPlan {
    pub fractions: Vec<f64>,
    pub train_ratio: f64,
    /// Set from the run seed, not read from the config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PartitionPlan {
    fn default() -> Self {
        Self {
            fractions: vec![0.18, 0.22, 0.35, 0.25],
            train_ratio: 0.8,
            seed: 7,
        }
    }
}

/// Case indices held by one client.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub client: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Shuffles `0..n_cases`, cuts contiguous client slices of
/// `round(fraction·N)` cases (the last client takes the remainder), then
/// shuffles each slice again and keeps the first `round(ratio·n_k)` cases
/// (at least one) for training.
pub fn partition_dataset(n_cases: usize, plan: &PartitionPlan) -> Result<Vec<ClientSplit>> {
    let k = plan.fractions.len();
    if k == 0 {
        return Err(Error::invalid("fractions", "need at least one client"));
    }
    let total: f64 = plan.fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || plan.fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::invalid("fractions", format!("must be positive and sum to 1, got {total}")));
    }
    if !(plan.train_ratio > 0.0 && plan.train_ratio <= 1.0) {
        return Err(Error::invalid("train_ratio", "must lie in (0, 1]"));
    }
    if n_cases < k {
        return Err(Error::invalid("fractions", format!("{n_cases} cases for {k} clients")));
    }
    let mut sizes: Vec<usize> = plan.fractions[..k - 1]
        .iter()
        .map(|f| (f * n_cases as f64).round() as usize)
        .collect();
    let used: usize = sizes.iter().sum();
    if used >= n_cases {
        return Err(Error::invalid("fractions", "no cases left for the last client"));
    }
    sizes.push(n_cases - used);
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::invalid(
            "fractions",
            format!("client {i} would receive no cases"),
        ));
    }
    let mut rng = substream(plan.seed, &[0x9A47]);
    let mut order: Vec<usize> = (0..n_cases).collect();
    order.shuffle(&mut rng);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for (client, &size) in sizes.iter().enumerate() {
        let mut cases = order[start..start + size].to_vec();
        start += size;
        cases.shuffle(&mut rng);
        let n_train = ((plan.train_ratio * size as f64).round() as usize).clamp(1, size);
        let test = cases.split_off(n_train);
        out.push(ClientSplit {
            client,
            train: cases,
            test,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn brats_sized_partition() {
        let s = partition_dataset(1251, &PartitionPlan::default()).unwrap();
        let sizes: Vec<usize> = s.iter().map(ClientSplit::len).collect();
        assert_eq!(sizes, vec![225, 275, 438, 313]);
    }

    #[test]
    fn single_client_is_a_plain_split() {
        let plan = PartitionPlan {
            fractions: vec![1.0],
            ..PartitionPlan::default()
        };
        let s = partition_dataset(40, &plan).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].train.len(), s[0].test.len()), (32, 8));
    }

    #[test]
    fn tiny_fraction_is_rejected() {
        let plan = PartitionPlan {
            fractions: vec![0.01, 0.99],
            ..PartitionPlan::default()
        };
        assert!(partition_dataset(40, &plan).is_err());
        let bad_sum = PartitionPlan {
            fractions: vec![0.5, 0.6],
            ..PartitionPlan::default()
        };
        assert!(partition_dataset(40, &bad_sum).is_err());
    }

    proptest! {
        #[test]
        fn partition_is_a_disjoint_cover(seed in 0u64..1000, n in 8usize..200) {
            let plan = PartitionPlan { fractions: vec![0.25; 4], seed, ..PartitionPlan::default() };
            let s = partition_dataset(n, &plan).unwrap();
            let mut all: Vec<usize> = s.iter().flat_map(|c| c.train.iter().chain(&c.test).copied()).collect();
            all.sort();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            for c in &s {
                prop_assert!(!c.train.is_empty());
            }
            if n == 40 {
                prop_assert!(s.iter().all(|c| c.len() == 10));
            }
        }
    }
}
