use std::fmt;

use super::MolecularGraph;
use crate::error::{Error, Result};

pub const DEFAULT_CANON_LIMIT: usize = 16;

/// Isomorphism-invariant graph certificate. Equal keys iff the graphs are
/// isomorphic with atom and bond types preserved.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CanonicalKey(String);

impl CanonicalKey {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn canonical_key(g: &MolecularGraph) -> Result<CanonicalKey> {
    canonical_key_with_limit(g, DEFAULT_CANON_LIMIT)
}

/// Color refinement followed by an individualization search over every
/// remaining tie; the key is the smallest certificate over all leaves.
pub fn canonical_key_with_limit(g: &MolecularGraph, limit: usize) -> Result<CanonicalKey> {
    let n = g.n_atoms();
    if n > limit {
        return Err(Error::UnsupportedSize(format!(
            "canonical key supports at most {limit} atoms, got {n}"
        )));
    }
    let mut colors = normalize(&g.atom_types().to_vec());
    refine(g, &mut colors);
    let mut best: Option<Vec<u8>> = None;
    search(g, colors, &mut best);
    let cert = best.expect("search visits at least one leaf");

    let types = &cert[..n];
    let bonds = &cert[n..];
    let mut key = String::with_capacity(4 * n + bonds.len());
    key.push_str(&n.to_string());
    key.push(':');
    for (k, t) in types.iter().enumerate() {
        if k > 0 {
            key.push('.');
        }
        key.push_str(&t.to_string());
    }
    key.push(':');
    for b in bonds {
        key.push(char::from(b'0' + b));
    }
    Ok(CanonicalKey(key))
}

fn search(g: &MolecularGraph, colors: Vec<usize>, best: &mut Option<Vec<u8>>) {
    let n = colors.len();
    let mut cell_size = vec![0usize; n];
    for &c in &colors {
        cell_size[c] += 1;
    }
    let Some(target) = (0..n).find(|&c| cell_size[c] > 1) else {
        let cert = certificate(g, &colors);
        if best.as_ref().is_none_or(|b| cert < *b) {
            *best = Some(cert);
        }
        return;
    };
    let cell: Vec<usize> = (0..n).filter(|&v| colors[v] == target).collect();
    let mut explored: Vec<usize> = Vec::new();
    for &v in &cell {
        // Swapping two same-colored twins is an automorphism fixing the
        // coloring, so their subtrees produce identical certificates.
        if explored.iter().any(|&w| twins(g, v, w)) {
            continue;
        }
        explored.push(v);
        let mut next: Vec<usize> =
            colors.iter().enumerate().map(|(w, &c)| 2 * c + usize::from(w != v)).collect();
        next = normalize(&next);
        refine(g, &mut next);
        search(g, next, best);
    }
}

fn twins(g: &MolecularGraph, v: usize, w: usize) -> bool {
    (0..g.n_atoms()).all(|x| x == v || x == w || g.bond(v, x) == g.bond(w, x))
}

/// Atom types then upper-triangle bond classes in discrete-coloring order.
/// Types are capped to u8, which the vocabulary sizes in use never exceed.
fn certificate(g: &MolecularGraph, colors: &[usize]) -> Vec<u8> {
    let n = colors.len();
    let mut order = vec![0; n];
    for (v, &c) in colors.iter().enumerate() {
        order[c] = v;
    }
    let mut cert = Vec::with_capacity(n + n * (n - 1) / 2);
    cert.extend(order.iter().map(|&v| g.atom_type(v).min(255) as u8));
    for a in 0..n {
        for b in (a + 1)..n {
            cert.push(g.bond(order[a], order[b]));
        }
    }
    cert
}

fn refine(g: &MolecularGraph, colors: &mut Vec<usize>) {
    let n = colors.len();
    let mut n_colors = distinct(colors);
    loop {
        let sigs: Vec<(usize, Vec<(u8, usize)>)> = (0..n)
            .map(|v| {
                let mut nb: Vec<(u8, usize)> =
                    g.neighbors(v).map(|w| (g.bond(v, w), colors[w])).collect();
                nb.sort_unstable();
                (colors[v], nb)
            })
            .collect();
        let refined = normalize(&sigs);
        let k = distinct(&refined);
        *colors = refined;
        if k == n_colors {
            return;
        }
        n_colors = k;
    }
}

/// Replaces each value by its rank among the sorted distinct values.
fn normalize<T: Ord + Clone>(values: &[T]) -> Vec<usize> {
    let mut sorted: Vec<T> = values.to_vec();
    sorted.sort();
    sorted.dedup();
    values.iter().map(|v| sorted.binary_search(v).expect("value present")).collect()
}

fn distinct(colors: &[usize]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}
