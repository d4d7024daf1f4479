use serde::{Deserialize, Serialize};

use super::canon::canonical_smiles;
use super::graph::{Bond, MolGraph};

/// Canonical SMILES of the Bemis–Murcko scaffold; empty for acyclic molecules.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScaffoldKey(pub String);

impl ScaffoldKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_acyclic(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::fmt::Display for ScaffoldKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Ring systems plus linkers: repeatedly deletes non-ring atoms of degree ≤ 1.
/// Atoms that lose a substituent gain the corresponding hydrogens.
pub fn scaffold_graph(g: &MolGraph) -> MolGraph {
    let n = g.num_atoms();
    let in_ring = g.ring_membership();
    let mut alive = vec![true; n];
    let mut degree: Vec<usize> = g.atoms.iter().map(|a| a.degree).collect();
    let mut frontier: Vec<usize> = (0..n).filter(|&v| !in_ring[v] && degree[v] <= 1).collect();
    while let Some(v) = frontier.pop() {
        if !alive[v] {
            continue;
        }
        alive[v] = false;
        for &(u, _) in g.neighbors(v) {
            if alive[u] {
                degree[u] -= 1;
                if !in_ring[u] && degree[u] <= 1 {
                    frontier.push(u);
                }
            }
        }
    }
    if !alive.iter().any(|&a| a) {
        return MolGraph::from_parts(Vec::new(), Vec::new(), String::new());
    }

    let mut remap = vec![usize::MAX; n];
    let mut atoms = Vec::new();
    for v in (0..n).filter(|&v| alive[v]) {
        remap[v] = atoms.len();
        let mut atom = g.atoms[v].clone();
        atom.chirality = None;
        atoms.push(atom);
    }
    let mut bonds = Vec::new();
    for bond in &g.bonds {
        match (alive[bond.a], alive[bond.b]) {
            (true, true) => bonds.push(Bond {
                a: remap[bond.a],
                b: remap[bond.b],
                order: bond.order,
                direction: None,
            }),
            (true, false) | (false, true) => {
                let keep = if alive[bond.a] { bond.a } else { bond.b };
                atoms[remap[keep]].hydrogens += bond.order.valence();
            }
            (false, false) => {}
        }
    }
    let source = g.source_smiles.clone();
    MolGraph::from_parts(atoms, bonds, source)
}

pub fn murcko_scaffold(g: &MolGraph) -> ScaffoldKey {
    let s = scaffold_graph(g);
    ScaffoldKey(canonical_smiles(&s))
}

#[cfg(test)]
mod tests {
    use super::super::smiles::parse_smiles;
    use super::*;

    fn key(s: &str) -> ScaffoldKey {
        murcko_scaffold(&parse_smiles(s).unwrap())
    }

    #[test]
    fn toluene_and_benzene_share_scaffold() {
        assert_eq!(key("Cc1ccccc1"), key("c1ccccc1"));
        assert_eq!(key("c1ccccc1").as_str(), "c1ccccc1");
    }

    #[test]
    fn acyclic_is_empty() {
        assert!(key("CCCC").is_acyclic());
        assert!(key("CC(=O)O.[Na+]").is_acyclic());
    }

    #[test]
    fn linkers_are_kept_and_exocyclic_double_bonds_dropped() {
        assert_eq!(key("c1ccccc1CCc1ccccc1CC"), key("c1ccc(CCc2ccccc2)cc1"));
        assert_eq!(key("O=C1CCCCC1"), key("C1CCCCC1"));
        assert_eq!(key("Cn1cccc1"), key("c1cc[nH]c1"));
    }
}
