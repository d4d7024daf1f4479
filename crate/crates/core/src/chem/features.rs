use serde::{Deserialize, Serialize};

use super::graph::{Atom, MolGraph};
use crate::numkit::{Scalar, Tensor};

pub const ELEMENT_VOCAB: [&str; 11] = ["B", "C", "N", "O", "F", "Si", "P", "S", "Cl", "Br", "I"];

const ELEMENT_BLOCK: usize = 12;
const DEGREE_BLOCK: usize = 7;
const CHARGE_BLOCK: usize = 5;
const H_BLOCK: usize = 5;

/// Atom feature layout. `Extended` adds the aromatic flag and hydrogen count to
/// the element/degree/charge core kept by `Minimal`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    #[default]
    Extended,
    Minimal,
}

impl FeatureSet {
    pub fn width(self) -> usize {
        match self {
            FeatureSet::Extended => ELEMENT_BLOCK + DEGREE_BLOCK + CHARGE_BLOCK + 1 + H_BLOCK,
            FeatureSet::Minimal => ELEMENT_BLOCK + DEGREE_BLOCK + CHARGE_BLOCK,
        }
    }
}

pub const ATOM_FEATURES: usize = 30;

/// Writes the one-hot encoding of `atom` into `row` (length `set.width()`).
pub fn atom_features(atom: &Atom, set: FeatureSet, row: &mut [f64]) {
    assert_eq!(row.len(), set.width(), "feature row width");
    row.fill(0.0);
    let symbol = atom.element.symbol();
    let e = ELEMENT_VOCAB
        .iter()
        .position(|s| *s == symbol)
        .unwrap_or(ELEMENT_BLOCK - 1);
    row[e] = 1.0;
    let mut off = ELEMENT_BLOCK;
    row[off + atom.degree.min(DEGREE_BLOCK - 1)] = 1.0;
    off += DEGREE_BLOCK;
    row[off + (atom.charge.clamp(-2, 2) + 2) as usize] = 1.0;
    off += CHARGE_BLOCK;
    if set == FeatureSet::Minimal {
        return;
    }
    row[off] = if atom.aromatic { 1.0 } else { 0.0 };
    off += 1;
    row[off + (atom.hydrogens as usize).min(H_BLOCK - 1)] = 1.0;
}

/// `|V| × width` feature matrix.
pub fn featurize<T: Scalar>(g: &MolGraph, set: FeatureSet) -> Tensor<T> {
    let w = set.width();
    let mut row = vec![0.0; w];
    let mut data = Vec::with_capacity(g.num_atoms() * w);
    for atom in &g.atoms {
        atom_features(atom, set, &mut row);
        data.extend(row.iter().map(|&x| T::from_f64_lossy(x)));
    }
    Tensor::new(vec![g.num_atoms(), w], data).expect("row-major layout")
}

#[cfg(test)]
mod tests {
    use super::super::smiles::parse_smiles;
    use super::*;

    fn hot(t: &Tensor<f64>, r: usize) -> Vec<usize> {
        (0..t.shape()[1]).filter(|&c| t.at2(r, c) == 1.0).collect()
    }

    #[test]
    fn methane() {
        let f: Tensor<f64> = featurize(&parse_smiles("C").unwrap(), FeatureSet::Extended);
        assert_eq!(f.shape(), &[1, ATOM_FEATURES]);
        // C, degree 0, charge 0, not aromatic, 4 H
        assert_eq!(hot(&f, 0), vec![1, 12, 19 + 2, 25 + 4]);
    }

    #[test]
    fn ammonium_charge() {
        let f: Tensor<f64> = featurize(&parse_smiles("[NH4+]").unwrap(), FeatureSet::Extended);
        assert_eq!(f.at2(0, 19 + 3), 1.0);
        assert_eq!(f.at2(0, 2), 1.0);
    }

    #[test]
    fn unknown_elements_fall_into_other() {
        let f: Tensor<f64> = featurize(&parse_smiles("[Na+]").unwrap(), FeatureSet::Minimal);
        assert_eq!(f.shape(), &[1, 24]);
        assert_eq!(f.at2(0, 11), 1.0);
    }

    #[test]
    fn one_hot_blocks() {
        let f: Tensor<f64> = featurize(
            &parse_smiles("CC(=O)Oc1ccccc1C(=O)[O-]").unwrap(),
            FeatureSet::Extended,
        );
        for r in 0..f.shape()[0] {
            for (lo, hi) in [(0, 12), (12, 19), (19, 24), (25, 30)] {
                let s: f64 = (lo..hi).map(|c| f.at2(r, c)).sum();
                assert_eq!(s, 1.0);
            }
        }
    }
}
