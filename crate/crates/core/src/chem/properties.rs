use serde::{Deserialize, Serialize};

use super::elements::Element;
use super::graph::MolGraph;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Properties {
    pub molecular_weight: f64,
    pub heavy_atoms: usize,
    pub rings: usize,
    pub aromatic_rings: usize,
    pub h_bond_donors: usize,
    pub h_bond_acceptors: usize,
    pub net_charge: i32,
}

pub fn compute_properties(g: &MolGraph) -> Properties {
    let h = Element::H.mass();
    let mut mw = 0.0;
    let mut heavy = 0;
    let mut donors = 0;
    let mut acceptors = 0;
    let mut charge = 0i32;
    for atom in &g.atoms {
        if atom.element == Element::H {
            mw += atom.isotope.map_or(h, f64::from);
        } else {
            heavy += 1;
            mw += atom.isotope.map_or(atom.element.mass(), f64::from);
        }
        mw += atom.hydrogens as f64 * h;
        charge += atom.charge as i32;
        if matches!(atom.element, Element::N | Element::O) {
            acceptors += 1;
            if atom.hydrogens > 0 {
                donors += 1;
            }
        }
    }
    let aromatic_rings = g
        .rings
        .iter()
        .filter(|r| r.iter().all(|&a| g.atoms[a].aromatic))
        .count();
    Properties {
        molecular_weight: mw,
        heavy_atoms: heavy,
        rings: g.rings.len(),
        aromatic_rings,
        h_bond_donors: donors,
        h_bond_acceptors: acceptors,
        net_charge: charge,
    }
}
