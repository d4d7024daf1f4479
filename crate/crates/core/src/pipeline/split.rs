use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::DatasetBundle;
use super::task::SplitPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| format!("unknown split `{s}` (expected train, valid or test)"))
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Groups by key, largest group first (ties by key), filling train until it
/// reaches its share, then valid, then test. Returns the assignment and any
/// warnings.
pub fn scaffold_split(keys: &[&str], fractions: [f64; 3]) -> (Vec<Split>, Vec<String>) {
    let n = keys.len();
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        groups.entry(k).or_default().push(i);
    }
    let mut groups: Vec<(&str, Vec<usize>)> = groups.into_iter().collect();
    groups.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(b.0)));

    let train_target = fractions[0] * n as f64;
    let valid_target = fractions[1] * n as f64;
    let mut out = vec![Split::Test; n];
    let mut warnings = Vec::new();
    let (mut n_train, mut n_valid) = (0usize, 0usize);
    for (key, members) in groups {
        let dest = if (n_train as f64) < train_target {
            if members.len() as f64 > train_target {
                warnings.push(format!(
                    "scaffold `{key}` has {} molecules, more than the whole train budget",
                    members.len()
                ));
            }
            n_train += members.len();
            Split::Train
        } else if (n_valid as f64) < valid_target {
            n_valid += members.len();
            Split::Valid
        } else {
            Split::Test
        };
        for i in members {
            out[i] = dest;
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    (out, warnings)
}

/// Seeded shuffle, then cut at the cumulative fractions.
pub fn random_split(n: usize, fractions: [f64; 3], seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut_train = (fractions[0] * n as f64).round() as usize;
    let cut_valid = ((fractions[0] + fractions[1]) * n as f64).round() as usize;
    let mut out = vec![Split::Test; n];
    for (pos, &i) in order.iter().enumerate() {
        out[i] = if pos < cut_train {
            Split::Train
        } else if pos < cut_valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    out
}

/// Assigns `bundle.splits` according to its task spec.
pub fn assign_splits(bundle: &mut DatasetBundle) -> Vec<String> {
    let spec = &bundle.spec;
    let (splits, warnings) = match spec.split {
        SplitPolicy::Scaffold => {
            let keys: Vec<&str> = bundle.records.iter().map(|r| r.scaffold.as_str()).collect();
            scaffold_split(&keys, spec.fractions)
        }
        SplitPolicy::Random => (
            random_split(bundle.records.len(), spec.fractions, spec.seed),
            Vec::new(),
        ),
    };
    bundle.splits = splits;
    warnings
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{murcko_scaffold, parse_smiles};

    #[test]
    fn random_split_is_seeded() {
        let a = random_split(100, [0.8, 0.1, 0.1], 3);
        assert_eq!(a, random_split(100, [0.8, 0.1, 0.1], 3));
        assert_ne!(a, random_split(100, [0.8, 0.1, 0.1], 4));
        assert_eq!(a.iter().filter(|&&s| s == Split::Train).count(), 80);
        assert_eq!(a.iter().filter(|&&s| s == Split::Valid).count(), 10);
    }

    #[test]
    fn toluene_and_benzene_share_a_split() {
        let smiles = [
            "Cc1ccccc1",
            "c1ccccc1",
            "C1CCCCC1",
            "CCO",
            "c1ccncc1",
            "C1CC1",
            "Oc1ccccc1",
        ];
        let keys: Vec<String> = smiles
            .iter()
            .map(|s| murcko_scaffold(&parse_smiles(s).unwrap()).0)
            .collect();
        assert_eq!(keys[0], keys[1]);
        let refs: Vec<&str> = keys.iter().map(String::as_str).collect();
        let (s, _) = scaffold_split(&refs, [0.5, 0.25, 0.25]);
        assert_eq!(s[0], s[1]);
        assert_eq!(s[0], s[6]);
        assert_eq!(s[0], Split::Train);
    }

    #[test]
    fn oversized_group_goes_to_train_with_warning() {
        let keys = ["a"; 9].into_iter().chain(["b"]).collect::<Vec<_>>();
        let (s, w) = scaffold_split(&keys, [0.8, 0.1, 0.1]);
        assert_eq!(&s[..9], &[Split::Train; 9]);
        assert_eq!(s[9], Split::Valid);
        assert_eq!(w.len(), 1);
    }
}
