use super::{LineGraphIndex, MolecularGraph};
use crate::error::{Error, Result};

/// Longest simple cycle reported as a ring motif.
pub const MAX_RING_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ring {
    /// Atoms in cycle order, starting from the smallest index.
    pub atoms: Vec<usize>,
    /// Line nodes of the ring bonds, ascending.
    pub bonds: Vec<usize>,
}

impl Ring {
    pub fn len(&self) -> usize {
        self.bonds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bonds.is_empty()
    }
}

/// Bond-level motifs of a graph, expressed in line-node indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MotifSummary {
    /// Adjacent actual bonds `(u, v)`, `u < v`: one bond angle each.
    pub angle_pairs: Vec<(usize, usize)>,
    /// Bond paths `(u, v, w)` spanning four distinct atoms, `u < w`: one torsion each.
    pub dihedral_triples: Vec<(usize, usize, usize)>,
    pub rings: Vec<Ring>,
}

pub fn extract_motifs(g: &MolecularGraph, lg: &LineGraphIndex) -> Result<MotifSummary> {
    if g.n_atoms() != lg.n_atoms() {
        return Err(Error::invalid(format!(
            "graph has {} atoms but line graph was built for {}",
            g.n_atoms(),
            lg.n_atoms()
        )));
    }
    let bonded: Vec<usize> = (0..lg.n_pairs())
        .filter(|&u| {
            let (i, j) = lg.pair(u);
            g.bond(i, j) > 0
        })
        .collect();

    let mut angle_pairs = Vec::new();
    for (a, &u) in bonded.iter().enumerate() {
        for &v in &bonded[a + 1..] {
            if lg.adjacent(u, v) {
                angle_pairs.push((u, v));
            }
        }
    }

    // A length-2 line-graph path u-v-w is a torsion only when u and w hang
    // off opposite ends of v; if they share an atom the three bonds meet at
    // a star or close a triangle.
    let mut dihedral_triples = Vec::new();
    for &v in &bonded {
        for (a, &u) in bonded.iter().enumerate() {
            if u == v || !lg.adjacent(u, v) {
                continue;
            }
            for &w in &bonded[a + 1..] {
                if w != v && lg.adjacent(v, w) && !lg.adjacent(u, w) {
                    dihedral_triples.push((u, v, w));
                }
            }
        }
    }
    dihedral_triples.sort_unstable();

    let rings = simple_cycles(g, MAX_RING_LEN)
        .into_iter()
        .map(|atoms| {
            let k = atoms.len();
            let mut bonds: Vec<usize> = (0..k)
                .map(|x| lg.index_of(atoms[x], atoms[(x + 1) % k]).expect("distinct ring atoms"))
                .collect();
            bonds.sort_unstable();
            Ring { atoms, bonds }
        })
        .collect();

    Ok(MotifSummary { angle_pairs, dihedral_triples, rings })
}

/// Simple cycles of length `3..=max_len`, each reported once.
fn simple_cycles(g: &MolecularGraph, max_len: usize) -> Vec<Vec<usize>> {
    let n = g.n_atoms();
    let mut out = Vec::new();
    let mut path = Vec::with_capacity(max_len);
    let mut on_path = vec![false; n];
    for start in 0..n {
        path.clear();
        path.push(start);
        on_path[start] = true;
        extend_cycle(g, start, max_len, &mut path, &mut on_path, &mut out);
        on_path[start] = false;
    }
    out.sort();
    out
}

fn extend_cycle(
    g: &MolecularGraph,
    start: usize,
    max_len: usize,
    path: &mut Vec<usize>,
    on_path: &mut [bool],
    out: &mut Vec<Vec<usize>>,
) {
    let last = *path.last().expect("path starts non-empty");
    for next in g.neighbors(last) {
        if next == start && path.len() >= 3 {
            // Each cycle is found in both directions; keep one.
            if path[1] < path[path.len() - 1] {
                out.push(path.clone());
            }
        } else if next > start && !on_path[next] && path.len() < max_len {
            path.push(next);
            on_path[next] = true;
            extend_cycle(g, start, max_len, path, on_path, out);
            on_path[next] = false;
            path.pop();
        }
    }
}
