use super::{AtomVocab, MolecularGraph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AtomValence {
    pub order_sum: f64,
    pub capacity: u32,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValenceReport {
    pub valid: bool,
    pub atoms: Vec<AtomValence>,
}

/// Sums bond orders per atom (aromatic = 1.5) against the vocabulary capacity.
pub fn check_valence(g: &MolecularGraph, vocab: &AtomVocab) -> Result<ValenceReport> {
    let n = g.n_atoms();
    let mut atoms = Vec::with_capacity(n);
    for i in 0..n {
        let capacity = vocab.max_valence(g.atom_type(i)).ok_or_else(|| {
            Error::invalid(format!("atom {i} has unknown type {}", g.atom_type(i)))
        })?;
        let order_sum: f64 = (0..n).filter(|&j| j != i).map(|j| g.bond_type(i, j).order()).sum();
        atoms.push(AtomValence { order_sum, capacity, ok: order_sum <= capacity as f64 });
    }
    Ok(ValenceReport { valid: atoms.iter().all(|a| a.ok), atoms })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn carbon_four_single() {
        let g = MolecularGraph::from_bond_list(
            vec![0; 5],
            &[(0, 1, 1), (0, 2, 1), (0, 3, 1), (0, 4, 1)],
        )
        .unwrap();
        let r = check_valence(&g, &AtomVocab::default()).unwrap();
        assert!(r.valid);
        assert_eq!(r.atoms[0].order_sum, 4.0);
    }

    #[test]
    fn carbon_two_double_one_single() {
        let g = MolecularGraph::from_bond_list(vec![0; 4], &[(0, 1, 2), (0, 2, 2), (0, 3, 1)])
            .unwrap();
        let r = check_valence(&g, &AtomVocab::default()).unwrap();
        assert!(!r.valid);
        assert_eq!(r.atoms[0].order_sum, 5.0);
        assert!(!r.atoms[0].ok);
        assert!(r.atoms[1].ok);
    }

    #[test]
    fn benzene_carbon_with_substituent() {
        let mut bonds: Vec<(usize, usize, u8)> = (0..6).map(|i| (i, (i + 1) % 6, 4)).collect();
        bonds[5] = (0, 5, 4);
        bonds.push((0, 6, 1));
        let g = MolecularGraph::from_bond_list(vec![0; 7], &bonds).unwrap();
        let r = check_valence(&g, &AtomVocab::default()).unwrap();
        assert!(r.valid);
        assert_eq!(r.atoms[0].order_sum, 4.0);
        assert_eq!(r.atoms[1].order_sum, 3.0);
    }

    #[test]
    fn unknown_type() {
        let g = MolecularGraph::empty(vec![0, 11]).unwrap();
        assert!(matches!(check_valence(&g, &AtomVocab::default()), Err(Error::InvalidInput(_))));
    }
}
