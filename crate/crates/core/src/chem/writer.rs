use std::fmt::Write;

use super::graph::{implicit_hydrogens, Atom, BondOrder, MolGraph};

const ORGANIC: &[&str] = &["B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"];

/// Serializes a graph to SMILES. Traversal starts at the lowest-ranked atom of
/// each component and visits neighbours in rank order; with canonical ranks the
/// output is canonical. Without ranks, atom indices are used.
pub fn write_smiles(g: &MolGraph, ranks: Option<&[usize]>) -> String {
    let n = g.num_atoms();
    let identity: Vec<usize>;
    let rank = match ranks {
        Some(r) => r,
        None => {
            identity = (0..n).collect();
            &identity
        }
    };

    let sorted_nbrs: Vec<Vec<(usize, usize)>> = (0..n)
        .map(|v| {
            let mut nb = g.neighbors(v).to_vec();
            nb.sort_by_key(|&(u, _)| rank[u]);
            nb
        })
        .collect();

    // Pass 1: DFS to classify tree edges vs ring closures.
    let mut visited = vec![false; n];
    let mut children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    let mut opens: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut closes: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut order_of_roots = Vec::new();
    let mut by_rank: Vec<usize> = (0..n).collect();
    by_rank.sort_by_key(|&v| rank[v]);
    let mut bond_used = vec![false; g.bonds.len()];
    for &root in &by_rank {
        if visited[root] {
            continue;
        }
        order_of_roots.push(root);
        let mut stack = vec![(root, 0usize)];
        visited[root] = true;
        while let Some(top) = stack.last_mut() {
            let v = top.0;
            if top.1 == sorted_nbrs[v].len() {
                stack.pop();
                continue;
            }
            let (u, k) = sorted_nbrs[v][top.1];
            top.1 += 1;
            if bond_used[k] {
                continue;
            }
            bond_used[k] = true;
            if visited[u] {
                opens[u].push(k);
                closes[v].push(k);
            } else {
                visited[u] = true;
                children[v].push((u, k));
                stack.push((u, 0));
            }
        }
    }

    // Pass 2: emit.
    let mut out = String::new();
    let mut digit_of = vec![0usize; g.bonds.len()];
    let mut free: Vec<bool> = vec![true; 100];
    for (c, &root) in order_of_roots.iter().enumerate() {
        if c > 0 {
            out.push('.');
        }
        let mut stack: Vec<Frame> = vec![Frame::Atom(root, None)];
        while let Some(frame) = stack.pop() {
            match frame {
                Frame::Close => out.push(')'),
                Frame::Atom(v, via) => {
                    if let Some(k) = via {
                        let b = &g.bonds[k];
                        out.push_str(bond_symbol(g, b.a, b.b, b.order));
                    }
                    out.push_str(&atom_token(g, v));
                    for &k in &closes[v] {
                        let d = digit_of[k];
                        free[d] = true;
                        write_digit(&mut out, d);
                    }
                    for &k in &opens[v] {
                        let d = (1..100)
                            .find(|&d| free[d])
                            .expect("fewer than 100 open rings");
                        free[d] = false;
                        digit_of[k] = d;
                        let b = &g.bonds[k];
                        out.push_str(bond_symbol(g, b.a, b.b, b.order));
                        write_digit(&mut out, d);
                    }
                    let kids = &children[v];
                    for (idx, &(u, k)) in kids.iter().enumerate().rev() {
                        if idx + 1 == kids.len() {
                            stack.push(Frame::Atom(u, Some(k)));
                        } else {
                            stack.push(Frame::Close);
                            stack.push(Frame::Atom(u, Some(k)));
                            stack.push(Frame::Open);
                        }
                    }
                }
                Frame::Open => out.push('('),
            }
        }
    }
    out
}

enum Frame {
    Atom(usize, Option<usize>),
    Open,
    Close,
}

fn write_digit(out: &mut String, d: usize) {
    if d < 10 {
        out.push((b'0' + d as u8) as char);
    } else {
        write!(out, "%{d:02}").unwrap();
    }
}

fn bond_symbol(g: &MolGraph, a: usize, b: usize, order: BondOrder) -> &'static str {
    let both_aromatic = g.atoms[a].aromatic && g.atoms[b].aromatic;
    match order {
        BondOrder::Single if both_aromatic => "-",
        BondOrder::Single => "",
        BondOrder::Double => "=",
        BondOrder::Triple => "#",
        BondOrder::Aromatic if both_aromatic => "",
        BondOrder::Aromatic => ":",
    }
}

fn atom_token(g: &MolGraph, v: usize) -> String {
    let atom = &g.atoms[v];
    let symbol = atom.element.symbol();
    let written = if atom.aromatic {
        symbol.to_ascii_lowercase()
    } else {
        symbol.to_string()
    };
    if !needs_bracket(g, v, atom) {
        return written;
    }
    let mut s = String::from("[");
    if let Some(iso) = atom.isotope {
        write!(s, "{iso}").unwrap();
    }
    s.push_str(&written);
    match atom.hydrogens {
        0 => {}
        1 => s.push('H'),
        h => write!(s, "H{h}").unwrap(),
    }
    match atom.charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c if c > 0 => write!(s, "+{c}").unwrap(),
        c => write!(s, "-{}", -c).unwrap(),
    }
    s.push(']');
    s
}

fn needs_bracket(g: &MolGraph, v: usize, atom: &Atom) -> bool {
    if atom.charge != 0 || atom.isotope.is_some() || !ORGANIC.contains(&atom.element.symbol()) {
        return true;
    }
    if atom.aromatic && !matches!(atom.element.symbol(), "B" | "C" | "N" | "O" | "P" | "S") {
        return true;
    }
    let orders = g.neighbors(v).iter().map(|&(_, k)| g.bonds[k].order);
    implicit_hydrogens(atom.element, atom.aromatic, orders) != Some(atom.hydrogens)
}
