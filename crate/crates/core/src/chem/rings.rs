//! Minimum cycle basis (SSSR) by Horton's candidate set followed by Gaussian
//! elimination over GF(2).

use std::collections::{HashSet, VecDeque};

struct Candidate {
    atoms: Vec<usize>,
    edges: Vec<u64>,
}

/// Returns the smallest set of smallest rings for the graph given as an edge
/// list. Each ring is listed as atoms in path order. The result is
/// deterministic for a fixed input ordering.
pub fn sssr(n_atoms: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let rank = edges.len() + components(n_atoms, edges) - n_atoms;
    if rank == 0 {
        return Vec::new();
    }

    let mut adj = vec![Vec::new(); n_atoms];
    for (k, &(a, b)) in edges.iter().enumerate() {
        adj[a].push((b, k));
        adj[b].push((a, k));
    }
    let words = edges.len().div_ceil(64);

    let mut candidates = Vec::new();
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for root in 0..n_atoms {
        // BFS shortest-path tree from root.
        let mut dist = vec![usize::MAX; n_atoms];
        let mut parent = vec![(usize::MAX, usize::MAX); n_atoms];
        dist[root] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(v) = queue.pop_front() {
            for &(u, k) in &adj[v] {
                if dist[u] == usize::MAX {
                    dist[u] = dist[v] + 1;
                    parent[u] = (v, k);
                    queue.push_back(u);
                }
            }
        }
        let path = |mut v: usize| {
            let mut atoms = vec![v];
            let mut bonds = Vec::new();
            while v != root {
                let (p, k) = parent[v];
                bonds.push(k);
                atoms.push(p);
                v = p;
            }
            atoms.reverse();
            (atoms, bonds)
        };
        for (k, &(x, y)) in edges.iter().enumerate() {
            if dist[x] == usize::MAX || parent[x].1 == k || parent[y].1 == k {
                continue;
            }
            let (px, bx) = path(x);
            let (py, by) = path(y);
            let shared: HashSet<usize> = px[1..].iter().copied().collect();
            if py[1..].iter().any(|a| shared.contains(a)) {
                continue;
            }
            let mut bits = vec![0u64; words];
            for &e in bx.iter().chain(&by).chain(std::iter::once(&k)) {
                bits[e / 64] ^= 1 << (e % 64);
            }
            if !seen.insert(bits.clone()) {
                continue;
            }
            let mut atoms = px;
            atoms.extend(py[1..].iter().rev());
            candidates.push(Candidate { atoms, edges: bits });
        }
    }
    // Stable sort keeps the root/edge enumeration order within equal lengths.
    candidates.sort_by_key(|c| c.atoms.len());

    let mut basis: Vec<(usize, Vec<u64>)> = Vec::new();
    let mut rings = Vec::new();
    for c in candidates {
        let mut v = c.edges.clone();
        for (pivot, row) in &basis {
            if v[pivot / 64] >> (pivot % 64) & 1 == 1 {
                for (w, r) in v.iter_mut().zip(row) {
                    *w ^= r;
                }
            }
        }
        let Some(pivot) = v
            .iter()
            .enumerate()
            .find(|(_, w)| **w != 0)
            .map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
        else {
            continue;
        };
        for (_, row) in basis.iter_mut() {
            if row[pivot / 64] >> (pivot % 64) & 1 == 1 {
                for (w, r) in row.iter_mut().zip(&v) {
                    *w ^= r;
                }
            }
        }
        basis.push((pivot, v));
        rings.push(c.atoms);
        if rings.len() == rank {
            break;
        }
    }
    rings
}

fn components(n: usize, edges: &[(usize, usize)]) -> usize {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut count = n;
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra] = rb;
            count -= 1;
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle(n: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (i, (i + 1) % n)).collect()
    }

    #[test]
    fn acyclic_has_no_rings() {
        assert!(sssr(4, &[(0, 1), (1, 2), (2, 3)]).is_empty());
    }

    #[test]
    fn single_ring_in_path_order() {
        let rings = sssr(6, &cycle(6));
        assert_eq!(rings.len(), 1);
        let r = &rings[0];
        assert_eq!(r.len(), 6);
        for w in 0..6 {
            let (a, b) = (r[w], r[(w + 1) % 6]);
            assert!(cycle(6)
                .iter()
                .any(|&(x, y)| (x, y) == (a, b) || (x, y) == (b, a)));
        }
    }

    #[test]
    fn naphthalene_gives_two_six_rings() {
        let mut e = cycle(6);
        e.extend([(5, 6), (6, 7), (7, 8), (8, 9), (9, 0)]);
        let rings = sssr(10, &e);
        assert_eq!(rings.iter().map(Vec::len).collect::<Vec<_>>(), vec![6, 6]);
    }

    #[test]
    fn cubane_has_five_four_rings() {
        let e = [
            (0, 1),
            (1, 2),
            (2, 3),
            (3, 0),
            (4, 5),
            (5, 6),
            (6, 7),
            (7, 4),
            (0, 4),
            (1, 5),
            (2, 6),
            (3, 7),
        ];
        let rings = sssr(8, &e);
        assert_eq!(rings.len(), 5);
        assert!(rings.iter().all(|r| r.len() == 4));
    }

    #[test]
    fn bicyclo_with_odd_ring() {
        // norbornane: rings of 5 and 5
        let e = [
            (0, 1),
            (1, 2),
            (2, 3),
            (3, 4),
            (4, 0),
            (0, 5),
            (5, 6),
            (6, 3),
        ];
        let mut sizes: Vec<usize> = sssr(7, &e).iter().map(Vec::len).collect();
        sizes.sort();
        assert_eq!(sizes, vec![5, 5]);
    }
}
