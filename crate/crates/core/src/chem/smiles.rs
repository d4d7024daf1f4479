use std::collections::BTreeMap;

use thiserror::Error;

use super::elements::Element;
use super::graph::{implicit_hydrogens, Atom, Bond, BondOrder, MolGraph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("empty SMILES")]
    Empty,
    #[error("unbalanced parentheses")]
    UnbalancedParentheses,
    #[error("unmatched ring-closure digit {0}")]
    UnmatchedRingClosure(u32),
    #[error("unknown atom token `{0}`")]
    UnknownAtom(String),
    #[error("unexpected character `{0}`")]
    UnexpectedChar(char),
    #[error("valence overflow on {0}")]
    ValenceOverflow(String),
    #[error("bond symbol without a following atom")]
    DanglingBond,
    #[error("duplicate bond")]
    DuplicateBond,
    #[error("atom bonded to itself")]
    SelfBond,
    #[error("conflicting ring-closure bond orders")]
    RingBondConflict,
    #[error("aromatic atom outside any ring")]
    AromaticOutsideRing,
    #[error("malformed bracket atom: {0}")]
    Bracket(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("SMILES parse error at byte {offset}: {kind}")]
pub struct ParseError {
    pub offset: usize,
    pub kind: ParseErrorKind,
}

fn err<T>(offset: usize, kind: ParseErrorKind) -> Result<T, ParseError> {
    Err(ParseError { offset, kind })
}

#[derive(Clone, Copy)]
struct PendingBond {
    order: BondOrder,
    direction: Option<char>,
    offset: usize,
}

struct Builder {
    atoms: Vec<Atom>,
    atom_offsets: Vec<usize>,
    bonds: Vec<Bond>,
    pairs: std::collections::HashSet<(usize, usize)>,
}

impl Builder {
    fn bond(
        &mut self,
        a: usize,
        b: usize,
        spec: Option<PendingBond>,
        offset: usize,
    ) -> Result<(), ParseError> {
        if a == b {
            return err(offset, ParseErrorKind::SelfBond);
        }
        if !self.pairs.insert((a.min(b), a.max(b))) {
            return err(offset, ParseErrorKind::DuplicateBond);
        }
        let order = match spec {
            Some(p) => p.order,
            None if self.atoms[a].aromatic && self.atoms[b].aromatic => BondOrder::Aromatic,
            None => BondOrder::Single,
        };
        self.bonds.push(Bond {
            a,
            b,
            order,
            direction: spec.and_then(|p| p.direction),
        });
        Ok(())
    }
}

/// Parses a SMILES string. Errors carry the byte offset of the offending token.
pub fn parse_smiles(s: &str) -> Result<MolGraph, ParseError> {
    if s.trim().is_empty() {
        return err(0, ParseErrorKind::Empty);
    }
    let bytes = s.as_bytes();
    let mut b = Builder {
        atoms: Vec::new(),
        atom_offsets: Vec::new(),
        bonds: Vec::new(),
        pairs: Default::default(),
    };
    let mut prev: Option<usize> = None;
    let mut pending: Option<PendingBond> = None;
    let mut branches: Vec<(Option<usize>, usize)> = Vec::new();
    let mut rings: BTreeMap<u32, (usize, Option<PendingBond>, usize)> = BTreeMap::new();

    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        let start = i;
        match c {
            '(' => {
                if prev.is_none() || pending.is_some() {
                    return err(i, ParseErrorKind::UnexpectedChar(c));
                }
                branches.push((prev, i));
                i += 1;
            }
            ')' => {
                if pending.is_some() {
                    return err(pending.unwrap().offset, ParseErrorKind::DanglingBond);
                }
                match branches.pop() {
                    Some((p, _)) => prev = p,
                    None => return err(i, ParseErrorKind::UnbalancedParentheses),
                }
                i += 1;
            }
            '.' => {
                if let Some(p) = pending {
                    return err(p.offset, ParseErrorKind::DanglingBond);
                }
                prev = None;
                i += 1;
            }
            '-' | '=' | '#' | ':' | '/' | '\\' => {
                if pending.is_some() || prev.is_none() {
                    return err(i, ParseErrorKind::UnexpectedChar(c));
                }
                let (order, direction) = match c {
                    '-' => (BondOrder::Single, None),
                    '=' => (BondOrder::Double, None),
                    '#' => (BondOrder::Triple, None),
                    ':' => (BondOrder::Aromatic, None),
                    d => (BondOrder::Single, Some(d)),
                };
                pending = Some(PendingBond {
                    order,
                    direction,
                    offset: i,
                });
                i += 1;
            }
            '0'..='9' | '%' => {
                let digit = if c == '%' {
                    let ds = bytes
                        .get(i + 1..i + 3)
                        .filter(|d| d.iter().all(u8::is_ascii_digit));
                    let Some(ds) = ds else {
                        return err(i, ParseErrorKind::UnexpectedChar('%'));
                    };
                    i += 3;
                    ((ds[0] - b'0') * 10 + (ds[1] - b'0')) as u32
                } else {
                    i += 1;
                    (c as u8 - b'0') as u32
                };
                let Some(atom) = prev else {
                    return err(start, ParseErrorKind::UnexpectedChar(c));
                };
                match rings.remove(&digit) {
                    Some((other, open_spec, _)) => {
                        let spec = match (open_spec, pending) {
                            (Some(x), Some(y)) if x.order != y.order => {
                                return err(start, ParseErrorKind::RingBondConflict)
                            }
                            (x, y) => y.or(x),
                        };
                        b.bond(other, atom, spec, start)?;
                    }
                    None => {
                        rings.insert(digit, (atom, pending, start));
                    }
                }
                pending = None;
            }
            '[' => {
                let Some(len) = s[i..].find(']') else {
                    return err(i, ParseErrorKind::Bracket("missing `]`".into()));
                };
                let atom = parse_bracket(&s[i + 1..i + len], i + 1)?;
                i += len + 1;
                add_atom(&mut b, atom, start, &mut prev, &mut pending)?;
            }
            _ => {
                let (atom, len) = parse_organic(bytes, i)?;
                i += len;
                add_atom(&mut b, atom, start, &mut prev, &mut pending)?;
            }
        }
    }
    if let Some(p) = pending {
        return err(p.offset, ParseErrorKind::DanglingBond);
    }
    if let Some(&(_, offset)) = branches.first() {
        return err(offset, ParseErrorKind::UnbalancedParentheses);
    }
    if let Some((&digit, &(_, _, offset))) = rings.iter().min_by_key(|(_, v)| v.2) {
        return err(offset, ParseErrorKind::UnmatchedRingClosure(digit));
    }
    if b.atoms.is_empty() {
        return err(0, ParseErrorKind::Empty);
    }

    let Builder {
        mut atoms,
        atom_offsets,
        bonds,
        ..
    } = b;
    let mut incident: Vec<Vec<BondOrder>> = vec![Vec::new(); atoms.len()];
    for bond in &bonds {
        incident[bond.a].push(bond.order);
        incident[bond.b].push(bond.order);
    }
    for (k, atom) in atoms.iter_mut().enumerate() {
        if atom.bracket {
            continue;
        }
        match implicit_hydrogens(atom.element, atom.aromatic, incident[k].iter().copied()) {
            Some(h) => atom.hydrogens = h,
            None => {
                return err(
                    atom_offsets[k],
                    ParseErrorKind::ValenceOverflow(atom.element.symbol().to_string()),
                )
            }
        }
    }
    let graph = MolGraph::from_parts(atoms, bonds, s.to_string());
    let in_ring = graph.ring_membership();
    if let Some(k) = (0..graph.num_atoms()).find(|&k| graph.atoms[k].aromatic && !in_ring[k]) {
        return err(atom_offsets[k], ParseErrorKind::AromaticOutsideRing);
    }
    Ok(graph)
}

fn add_atom(
    b: &mut Builder,
    atom: Atom,
    offset: usize,
    prev: &mut Option<usize>,
    pending: &mut Option<PendingBond>,
) -> Result<(), ParseError> {
    let idx = b.atoms.len();
    b.atoms.push(atom);
    b.atom_offsets.push(offset);
    if let Some(p) = *prev {
        b.bond(p, idx, pending.take(), offset)?;
    }
    *prev = Some(idx);
    Ok(())
}

fn parse_organic(bytes: &[u8], i: usize) -> Result<(Atom, usize), ParseError> {
    let two = bytes.get(i..i + 2);
    let (symbol, aromatic, len) = match (bytes[i], two) {
        (_, Some(b"Cl")) => ("Cl", false, 2),
        (_, Some(b"Br")) => ("Br", false, 2),
        (b'B', _) => ("B", false, 1),
        (b'C', _) => ("C", false, 1),
        (b'N', _) => ("N", false, 1),
        (b'O', _) => ("O", false, 1),
        (b'P', _) => ("P", false, 1),
        (b'S', _) => ("S", false, 1),
        (b'F', _) => ("F", false, 1),
        (b'I', _) => ("I", false, 1),
        (b'b', _) => ("B", true, 1),
        (b'c', _) => ("C", true, 1),
        (b'n', _) => ("N", true, 1),
        (b'o', _) => ("O", true, 1),
        (b'p', _) => ("P", true, 1),
        (b's', _) => ("S", true, 1),
        (c, _) if c.is_ascii_alphabetic() || c == b'*' => {
            let end = bytes[i + 1..]
                .iter()
                .position(|c| !c.is_ascii_lowercase())
                .map_or(bytes.len(), |p| i + 1 + p);
            let token = String::from_utf8_lossy(&bytes[i..end.max(i + 1)]).into_owned();
            return err(i, ParseErrorKind::UnknownAtom(token));
        }
        _ => {
            let ch = std::str::from_utf8(&bytes[i..])
                .ok()
                .and_then(|s| s.chars().next())
                .unwrap_or('?');
            return err(i, ParseErrorKind::UnexpectedChar(ch));
        }
    };
    let mut atom = Atom::new(Element::from_symbol(symbol).expect("organic subset"));
    atom.aromatic = aromatic;
    Ok((atom, len))
}

/// Parses the interior of `[...]`; `base` is the byte offset of its first char.
fn parse_bracket(body: &str, base: usize) -> Result<Atom, ParseError> {
    let bytes = body.as_bytes();
    let mut i = 0;
    let bad = |at: usize, msg: &str| err(base + at, ParseErrorKind::Bracket(msg.to_string()));

    let digits = |i: &mut usize| {
        let st = *i;
        while *i < bytes.len() && bytes[*i].is_ascii_digit() {
            *i += 1;
        }
        (st < *i)
            .then(|| body[st..*i].parse::<u32>().ok())
            .flatten()
    };

    let isotope = digits(&mut i);
    if isotope.is_some_and(|v| v > u16::MAX as u32) {
        return bad(0, "isotope out of range");
    }

    if i >= bytes.len() || !bytes[i].is_ascii_alphabetic() {
        if bytes.get(i) == Some(&b'*') {
            return err(base + i, ParseErrorKind::UnknownAtom("*".into()));
        }
        return bad(i, "missing element symbol");
    }
    let (element, aromatic, len) = {
        let first = bytes[i];
        let lower2 = bytes
            .get(i + 1)
            .filter(|c| c.is_ascii_lowercase())
            .map(|&c| c as char);
        if first.is_ascii_uppercase() {
            let one = (first as char).to_string();
            match lower2
                .map(|l| format!("{one}{l}"))
                .and_then(|t| Element::from_symbol(&t).map(|e| (e, 2)))
            {
                Some((e, n)) => (e, false, n),
                None => match Element::from_symbol(&one) {
                    Some(e) => (e, false, 1),
                    None => return err(base + i, ParseErrorKind::UnknownAtom(one)),
                },
            }
        } else {
            let aromatic_two = [("se", "Se"), ("as", "As"), ("te", "Te")];
            let two = body.get(i..i + 2);
            match aromatic_two.iter().find(|(t, _)| Some(*t) == two) {
                Some((_, sym)) => (Element::from_symbol(sym).unwrap(), true, 2),
                None => {
                    let sym = (first as char).to_ascii_uppercase().to_string();
                    match Element::from_symbol(&sym).filter(|e| e.can_be_aromatic()) {
                        Some(e) => (e, true, 1),
                        None => {
                            return err(
                                base + i,
                                ParseErrorKind::UnknownAtom((first as char).to_string()),
                            )
                        }
                    }
                }
            }
        }
    };
    i += len;

    let mut atom = Atom::new(element);
    atom.aromatic = aromatic;
    atom.bracket = true;
    atom.isotope = isotope.map(|v| v as u16);

    if bytes.get(i) == Some(&b'@') {
        let st = i;
        while bytes.get(i) == Some(&b'@') {
            i += 1;
        }
        // Extended classes such as @TH1 / @SP2 / @OH12 are consumed and kept raw.
        if ["TH", "AL", "SP", "TB", "OH"]
            .iter()
            .any(|c| body[i..].starts_with(c))
        {
            i += 2;
            digits(&mut i);
        }
        atom.chirality = Some(body[st..i].to_string());
    }

    if bytes.get(i) == Some(&b'H') {
        i += 1;
        let h = digits(&mut i).unwrap_or(1);
        if h > 16 {
            return bad(i, "hydrogen count out of range");
        }
        atom.hydrogens = h as u8;
    }

    if let Some(&sign) = bytes.get(i).filter(|c| **c == b'+' || **c == b'-') {
        let unit: i32 = if sign == b'+' { 1 } else { -1 };
        i += 1;
        let mut magnitude = 1i32;
        if let Some(n) = digits(&mut i) {
            magnitude = n as i32;
        } else {
            while bytes.get(i) == Some(&sign) {
                magnitude += 1;
                i += 1;
            }
        }
        if magnitude > 15 {
            return bad(i, "charge out of range");
        }
        atom.charge = (unit * magnitude) as i8;
    }

    if bytes.get(i) == Some(&b':') {
        i += 1;
        if digits(&mut i).is_none() {
            return bad(i, "atom class requires digits");
        }
    }

    if i != bytes.len() {
        return bad(i, "unexpected trailing characters");
    }
    Ok(atom)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ethanol() {
        let g = parse_smiles("CCO").unwrap();
        assert_eq!(g.num_atoms(), 3);
        assert_eq!(g.bonds.len(), 2);
        assert!(g.bonds.iter().all(|b| b.order == BondOrder::Single));
        assert_eq!(g.atoms[2].element, Element::O);
        assert_eq!(g.atoms[2].hydrogens, 1);
        assert_eq!(g.atoms[0].hydrogens, 3);
    }

    #[test]
    fn unmatched_ring_digit_reports_its_offset() {
        let e = parse_smiles("C1CC").unwrap_err();
        assert_eq!(e.offset, 1);
        assert_eq!(e.kind, ParseErrorKind::UnmatchedRingClosure(1));
    }

    #[test]
    fn bracket_atoms() {
        let g = parse_smiles("[NH4+]").unwrap();
        assert_eq!(g.atoms[0].charge, 1);
        assert_eq!(g.atoms[0].hydrogens, 4);
        let g = parse_smiles("[13CH3][O-]").unwrap();
        assert_eq!(g.atoms[0].isotope, Some(13));
        assert_eq!(g.atoms[1].charge, -1);
        assert_eq!(g.atoms[1].hydrogens, 0);
        let g = parse_smiles("[Fe++]").unwrap();
        assert_eq!(g.atoms[0].charge, 2);
        let g = parse_smiles("N[C@@H](C)C(=O)O").unwrap();
        assert_eq!(g.atoms[1].chirality.as_deref(), Some("@@"));
        assert_eq!(g.atoms[1].hydrogens, 1);
        let g = parse_smiles("[CH3:7]C").unwrap();
        assert_eq!(g.atoms[0].hydrogens, 3);
    }

    #[test]
    fn aromatic_heteroatoms() {
        let g = parse_smiles("c1cc[nH]c1").unwrap();
        assert_eq!(g.atoms[3].hydrogens, 1);
        let g = parse_smiles("c1ccncc1").unwrap();
        assert_eq!(g.atoms[3].hydrogens, 0);
        let g = parse_smiles("c1ccsc1").unwrap();
        assert!(g.atoms.iter().all(|a| a.aromatic));
        let g = parse_smiles("c1cc[se]c1").unwrap();
        assert_eq!(g.atoms[3].element.symbol(), "Se");
    }

    #[test]
    fn percent_ring_closures_and_bond_on_closure() {
        let g = parse_smiles("C%12CCCC%12").unwrap();
        assert_eq!(g.rings.len(), 1);
        let g = parse_smiles("C=1CCCC1").unwrap();
        assert_eq!(g.bonds.last().unwrap().order, BondOrder::Double);
        assert_eq!(g.atoms[0].hydrogens, 1);
    }

    #[test]
    fn stereo_bonds_recorded() {
        let g = parse_smiles("F/C=C/F").unwrap();
        assert_eq!(g.bonds[0].direction, Some('/'));
        assert_eq!(g.bonds[0].order, BondOrder::Single);
    }

    #[test]
    fn error_cases_with_offsets() {
        let cases: &[(&str, usize)] = &[
            ("C(C", 1),
            ("CC)", 2),
            ("CXC", 1),
            ("C*", 1),
            ("FF(F)", 1),
            ("C=", 1),
            ("C11", 2),
            ("c1ccccc1.c", 9),
            ("[Xx]", 1),
            ("C[C", 1),
            ("", 0),
            ("C(=C)=", 5),
        ];
        for &(s, off) in cases {
            let e = parse_smiles(s).expect_err(s);
            assert_eq!(e.offset, off, "{s}: {e}");
        }
    }

    #[test]
    fn disconnected_components() {
        let g = parse_smiles("[Na+].[Cl-]").unwrap();
        assert_eq!(g.num_atoms(), 2);
        assert!(g.bonds.is_empty());
    }
}
