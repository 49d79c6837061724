//! Exact maximum common edge subgraph distance for small molecules.

use crate::error::{Error, Result};
use crate::molgraph::{MolecularGraph, N_BOND_CLASSES};

pub const DEFAULT_MCES_BOND_CAP: usize = 12;

/// `|E1| + |E2| - 2 |MCES|`, with atom and bond types preserved by the
/// common subgraph.
pub fn mces_distance(g1: &MolecularGraph, g2: &MolecularGraph) -> Result<usize> {
    mces_distance_with_cap(g1, g2, DEFAULT_MCES_BOND_CAP)
}

pub fn mces_distance_with_cap(g1: &MolecularGraph, g2: &MolecularGraph, cap: usize) -> Result<usize> {
    let (e1, e2) = (g1.n_bonds(), g2.n_bonds());
    if e1 > cap || e2 > cap {
        return Err(Error::UnsupportedSize(format!("MCES limited to {cap} bonds, got {e1} and {e2}")));
    }
    Ok(e1 + e2 - 2 * max_common_edges(g1, g2))
}

/// Size of the maximum common edge subgraph, by branch and bound over
/// partial injective type-preserving atom maps from `g1` into `g2`.
pub fn max_common_edges(g1: &MolecularGraph, g2: &MolecularGraph) -> usize {
    // Map the smaller bond set into the larger one; only atoms with bonds matter.
    let (a, b) = if g1.n_bonds() <= g2.n_bonds() { (g1, g2) } else { (g2, g1) };
    let mut order: Vec<usize> = (0..a.n_atoms()).filter(|&i| a.degree(i) > 0).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(a.degree(i)));
    let mut b_class = [0usize; N_BOND_CLASSES];
    for (_, _, c) in b.bond_list() {
        b_class[c as usize] += 1;
    }
    let mut s = Search {
        a,
        b,
        order,
        map: vec![None; a.n_atoms()],
        used: vec![false; b.n_atoms()],
        best: 0,
        b_class,
    };
    let mut open = [0usize; N_BOND_CLASSES];
    for (_, _, c) in a.bond_list() {
        open[c as usize] += 1;
    }
    s.branch(0, 0, &mut open, &mut [0; N_BOND_CLASSES]);
    s.best
}

struct Search<'g> {
    a: &'g MolecularGraph,
    b: &'g MolecularGraph,
    order: Vec<usize>,
    map: Vec<Option<usize>>,
    used: Vec<bool>,
    best: usize,
    b_class: [usize; N_BOND_CLASSES],
}

impl Search<'_> {
    /// `open[c]`: class-`c` bonds of `a` with an undecided endpoint;
    /// `taken[c]`: class-`c` bonds of `b` already matched.
    fn branch(&mut self, depth: usize, score: usize, open: &mut [usize; N_BOND_CLASSES], taken: &mut [usize; N_BOND_CLASSES]) {
        let bound: usize = score + (0..N_BOND_CLASSES).map(|c| open[c].min(self.b_class[c] - taken[c])).sum::<usize>();
        if bound <= self.best {
            return;
        }
        if depth == self.order.len() {
            self.best = score;
            return;
        }
        let i = self.order[depth];
        // Bonds of `i` to atoms decided earlier close now.
        let mut closing = [0usize; N_BOND_CLASSES];
        for k in self.a.neighbors(i) {
            if self.order[..depth].contains(&k) {
                closing[self.a.bond(i, k) as usize] += 1;
            }
        }
        for c in 0..N_BOND_CLASSES {
            open[c] -= closing[c];
        }
        for v in 0..self.b.n_atoms() {
            if self.used[v] || self.b.atom_type(v) != self.a.atom_type(i) {
                continue;
            }
            let mut gained = [0usize; N_BOND_CLASSES];
            for k in self.a.neighbors(i) {
                if let Some(w) = self.map[k] {
                    let c = self.a.bond(i, k);
                    if self.b.bond(v, w) == c {
                        gained[c as usize] += 1;
                    }
                }
            }
            let g: usize = gained.iter().sum();
            self.map[i] = Some(v);
            self.used[v] = true;
            for c in 0..N_BOND_CLASSES {
                taken[c] += gained[c];
            }
            self.branch(depth + 1, score + g, open, taken);
            for c in 0..N_BOND_CLASSES {
                taken[c] -= gained[c];
            }
            self.used[v] = false;
            self.map[i] = None;
        }
        self.branch(depth + 1, score, open, taken);
        for c in 0..N_BOND_CLASSES {
            open[c] += closing[c];
        }
    }
}
