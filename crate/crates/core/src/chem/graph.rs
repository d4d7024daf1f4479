use serde::{Deserialize, Serialize};

use super::elements::Element;
use super::rings;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    /// Contribution to the valence sum; aromatic bonds count as 1 and the
    /// missing electron is handled by the implicit-H rule.
    pub fn valence(self) -> u8 {
        match self {
            BondOrder::Single | BondOrder::Aromatic => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            BondOrder::Single => 1,
            BondOrder::Double => 2,
            BondOrder::Triple => 3,
            BondOrder::Aromatic => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub charge: i8,
    /// Total attached hydrogens (implicit or bracket-specified).
    pub hydrogens: u8,
    pub aromatic: bool,
    pub degree: usize,
    pub isotope: Option<u16>,
    /// Raw chirality marker (`@`, `@@`), recorded but not interpreted.
    pub chirality: Option<String>,
    pub bracket: bool,
}

impl Atom {
    pub fn new(element: Element) -> Self {
        Self {
            element,
            charge: 0,
            hydrogens: 0,
            aromatic: false,
            degree: 0,
            isotope: None,
            chirality: None,
            bracket: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
    /// `/` or `\` when written, otherwise `None`.
    pub direction: Option<char>,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.a == atom {
            self.b
        } else {
            self.a
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MolGraph {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    /// Smallest set of smallest rings, each an atom cycle in path order.
    pub rings: Vec<Vec<usize>>,
    pub source_smiles: String,
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl MolGraph {
    /// Assembles a graph, recomputing degrees, adjacency and rings. Hydrogen
    /// counts are taken as given.
    pub fn from_parts(mut atoms: Vec<Atom>, bonds: Vec<Bond>, source_smiles: String) -> Self {
        let mut adjacency = vec![Vec::new(); atoms.len()];
        for (k, bond) in bonds.iter().enumerate() {
            adjacency[bond.a].push((bond.b, k));
            adjacency[bond.b].push((bond.a, k));
        }
        for (atom, adj) in atoms.iter_mut().zip(&adjacency) {
            atom.degree = adj.len();
        }
        let pairs: Vec<(usize, usize)> = bonds.iter().map(|b| (b.a, b.b)).collect();
        let rings = rings::sssr(atoms.len(), &pairs);
        Self {
            atoms,
            bonds,
            rings,
            source_smiles,
            adjacency,
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    /// `(neighbour, bond index)` pairs in bond insertion order.
    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adjacency[atom]
    }

    pub fn ring_membership(&self) -> Vec<bool> {
        let mut member = vec![false; self.atoms.len()];
        for ring in &self.rings {
            for &a in ring {
                member[a] = true;
            }
        }
        member
    }

    /// Undirected adjacency lists over atom indices.
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        self.adjacency
            .iter()
            .map(|adj| adj.iter().map(|&(n, _)| n).collect())
            .collect()
    }

    /// Relabels atoms so that old atom `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MolGraph {
        assert_eq!(perm.len(), self.atoms.len(), "permutation length");
        let mut atoms = vec![None; self.atoms.len()];
        for (i, atom) in self.atoms.iter().enumerate() {
            atoms[perm[i]] = Some(atom.clone());
        }
        let atoms = atoms
            .into_iter()
            .map(|a| a.expect("perm is a bijection"))
            .collect();
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                a: perm[b.a],
                b: perm[b.b],
                ..b.clone()
            })
            .collect();
        MolGraph::from_parts(atoms, bonds, self.source_smiles.clone())
    }
}

/// Smallest standard valence that accommodates the explicit bonds, minus the
/// bond sum. Aromatic C gains one extra unit when it carries no multiple bond;
/// aromatic N, P and B only when they have at most two bond units (pyrrole-type
/// atoms must be written `[nH]`). Returns `None` on valence overflow or for
/// elements outside the organic subset.
pub(crate) fn implicit_hydrogens(
    element: Element,
    aromatic: bool,
    orders: impl Iterator<Item = BondOrder>,
) -> Option<u8> {
    let valences = element.default_valences()?;
    let mut sum = 0u8;
    let mut multiple = false;
    for o in orders {
        sum += o.valence();
        multiple |= matches!(o, BondOrder::Double | BondOrder::Triple);
    }
    if aromatic && !multiple {
        match element {
            Element::C => sum += 1,
            Element::N | Element::P | Element::B if sum <= 2 => sum += 1,
            _ => {}
        }
    }
    valences.iter().find(|&&v| v >= sum).map(|&v| v - sum)
}
