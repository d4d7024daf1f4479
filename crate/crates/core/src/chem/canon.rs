//! Canonical atom ranking and canonical SMILES.
//!
//! Ranks start from atom invariants and are refined by neighbourhood
//! (Morgan-style) until stable. Remaining ties are broken by individualizing
//! each member of the first tied class in turn; the canonical string is the
//! lexicographic minimum over the resulting leaves.

use super::graph::MolGraph;
use super::writer::write_smiles;

/// Upper bound on explored leaves of the individualization tree. Highly
/// symmetric ring systems reach their minimum long before this.
const MAX_LEAVES: usize = 4096;

pub fn canonical_smiles(g: &MolGraph) -> String {
    if g.is_empty() {
        return String::new();
    }
    let nbrs: Vec<Vec<(usize, u8)>> = (0..g.num_atoms())
        .map(|v| {
            g.neighbors(v)
                .iter()
                .map(|&(u, k)| (u, g.bonds[k].order.code()))
                .collect()
        })
        .collect();
    let initial = dense_ranks(
        &g.atoms
            .iter()
            .map(|a| {
                (
                    a.element.atomic_number(),
                    a.aromatic,
                    a.charge,
                    a.hydrogens,
                    a.degree,
                    a.isotope.unwrap_or(0),
                )
            })
            .collect::<Vec<_>>(),
    );
    let mut search = Search {
        g,
        nbrs: &nbrs,
        best: None,
        leaves: 0,
    };
    search.descend(initial);
    search.best.expect("at least one leaf")
}

struct Search<'a> {
    g: &'a MolGraph,
    nbrs: &'a [Vec<(usize, u8)>],
    best: Option<String>,
    leaves: usize,
}

impl Search<'_> {
    fn descend(&mut self, ranks: Vec<usize>) {
        let ranks = refine(self.nbrs, ranks);
        let n = ranks.len();
        let mut counts = vec![0usize; n];
        for &r in &ranks {
            counts[r] += 1;
        }
        let Some(tied) = (0..n).find(|&r| counts[r] > 1) else {
            self.leaves += 1;
            let s = write_smiles(self.g, Some(&ranks));
            if self.best.as_ref().is_none_or(|b| s < *b) {
                self.best = Some(s);
            }
            return;
        };
        let members: Vec<usize> = (0..n).filter(|&v| ranks[v] == tied).collect();
        for v in members {
            if self.leaves >= MAX_LEAVES {
                return;
            }
            let split: Vec<usize> = ranks
                .iter()
                .enumerate()
                .map(|(u, &r)| {
                    if r > tied || (r == tied && u != v) {
                        r + 1
                    } else {
                        r
                    }
                })
                .collect();
            self.descend(split);
        }
    }
}

/// Refines ranks until the number of classes stops growing. Ranks are dense
/// class indices; the ordering of classes depends only on graph structure.
fn refine(nbrs: &[Vec<(usize, u8)>], mut ranks: Vec<usize>) -> Vec<usize> {
    let mut classes = count_classes(&ranks);
    loop {
        let keys: Vec<(usize, Vec<(usize, u8)>)> = ranks
            .iter()
            .enumerate()
            .map(|(v, &r)| {
                let mut around: Vec<(usize, u8)> =
                    nbrs[v].iter().map(|&(u, o)| (ranks[u], o)).collect();
                around.sort_unstable();
                (r, around)
            })
            .collect();
        let next = dense_ranks(&keys);
        let next_classes = count_classes(&next);
        ranks = next;
        if next_classes == classes {
            return ranks;
        }
        classes = next_classes;
    }
}

fn count_classes(ranks: &[usize]) -> usize {
    ranks.iter().max().map_or(0, |m| m + 1)
}

fn dense_ranks<K: Ord>(keys: &[K]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    let mut ranks = vec![0; keys.len()];
    let mut r = 0;
    for w in 0..idx.len() {
        if w > 0 && keys[idx[w]] != keys[idx[w - 1]] {
            r += 1;
        }
        ranks[idx[w]] = r;
    }
    ranks
}
