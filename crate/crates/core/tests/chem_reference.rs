//! Per-molecule counts and scaffold groupings frozen from an independent
//! cheminformatics toolkit, compared over both bundled datasets.

use std::collections::BTreeMap;

use molfuse::chem::{compute_properties, murcko_scaffold, parse_smiles};

#[derive(Debug, serde::Deserialize)]
struct Row {
    smiles: String,
    atoms: usize,
    bonds: usize,
    hydrogens: usize,
    rings: usize,
    aromatic_atoms: usize,
    charge: i32,
    mw: f64,
    scaffold: String,
}

fn rows(name: &str) -> Vec<Row> {
    let path = format!("{}/tests/data/{name}", env!("CARGO_MANIFEST_DIR"));
    csv::Reader::from_path(path)
        .unwrap()
        .deserialize()
        .map(|r| r.unwrap())
        .collect()
}

fn check_counts(rows: &[Row]) {
    for r in rows {
        let g = parse_smiles(&r.smiles).unwrap_or_else(|e| panic!("{}: {e}", r.smiles));
        let p = compute_properties(&g);
        let h: usize = g.atoms.iter().map(|a| a.hydrogens as usize).sum();
        let aromatic = g.atoms.iter().filter(|a| a.aromatic).count();
        assert_eq!(
            (
                g.num_atoms(),
                g.bonds.len(),
                h,
                g.rings.len(),
                aromatic,
                p.net_charge
            ),
            (
                r.atoms,
                r.bonds,
                r.hydrogens,
                r.rings,
                r.aromatic_atoms,
                r.charge
            ),
            "{}",
            r.smiles
        );
        // Reference weights for S and Cl differ in the third decimal.
        assert!(
            (p.molecular_weight - r.mw).abs() < 0.05,
            "{}: {} vs {}",
            r.smiles,
            p.molecular_weight,
            r.mw
        );
    }
}

/// Two molecules share our scaffold key exactly when they share the
/// reference canonical scaffold.
fn check_scaffold_partition(rows: &[Row]) {
    let mut ours_by_ref: BTreeMap<&str, String> = BTreeMap::new();
    let mut ref_by_ours: BTreeMap<String, &str> = BTreeMap::new();
    for r in rows {
        let key = murcko_scaffold(&parse_smiles(&r.smiles).unwrap()).0;
        assert_eq!(key.is_empty(), r.scaffold.is_empty(), "{}", r.smiles);
        let a = ours_by_ref
            .entry(&r.scaffold)
            .or_insert_with(|| key.clone());
        assert_eq!(
            *a, key,
            "reference scaffold {} split across keys",
            r.scaffold
        );
        let b = ref_by_ours.entry(key.clone()).or_insert(&r.scaffold);
        assert_eq!(
            *b, r.scaffold,
            "key {key} merges distinct reference scaffolds"
        );
    }
}

#[test]
fn bace_counts_match_reference() {
    check_counts(&rows("bace_reference.csv"));
}

#[test]
fn freesolv_counts_match_reference() {
    check_counts(&rows("freesolv_reference.csv"));
}

#[test]
fn bace_scaffold_groups_match_reference() {
    check_scaffold_partition(&rows("bace_reference.csv"));
}

#[test]
fn freesolv_scaffold_groups_match_reference() {
    check_scaffold_partition(&rows("freesolv_reference.csv"));
}

#[test]
fn aspirin() {
    let g = parse_smiles("CC(=O)Oc1ccccc1C(=O)O").unwrap();
    assert_eq!(g.num_atoms(), 13);
    assert_eq!(g.bonds.len(), 13);
    assert_eq!(g.rings.len(), 1);
    assert_eq!(g.rings[0].len(), 6);
    assert_eq!(g.atoms.iter().filter(|a| a.aromatic).count(), 6);
    assert!((compute_properties(&g).molecular_weight - 180.159).abs() < 0.01);
}
