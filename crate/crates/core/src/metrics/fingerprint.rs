//! Circular (Morgan-style) fingerprints.
//!
//! Hashing is seedless and fully specified so bits are reproducible:
//! * `mix` is the SplitMix64 finalizer;
//! * `combine(h, v) = mix(h ^ mix(v))` folds a value into a running hash;
//! * a symbol hashes as FNV-1a 64 over its UTF-8 bytes, then `mix`.
//!
//! Round 0 gives atom `a` the identifier
//! `combine(combine(combine(S, symbol), degree), orders...)` with the sorted
//! bond classes of its actual bonds folded in one at a time, where `S` is
//! `ROUND_SALT`. Round `r` folds `r`, the atom's previous identifier and the
//! sorted `(bond class, neighbor identifier)` pairs into `S`. Every
//! identifier of every round sets bit `id % n_bits`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::{AtomVocab, MolecularGraph};

pub const DEFAULT_RADIUS: usize = 2;
pub const DEFAULT_BITS: usize = 2048;
pub const ROUND_SALT: u64 = 0x6c67_6466_6670_0001;

pub fn mix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

pub fn combine(h: u64, v: u64) -> u64 {
    mix(h ^ mix(v))
}

pub fn hash_symbol(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    mix(h)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    n_bits: usize,
    radius: usize,
    words: Vec<u64>,
}

impl Fingerprint {
    pub fn empty(n_bits: usize, radius: usize) -> Self {
        Self { n_bits, radius, words: vec![0; n_bits.div_ceil(64)] }
    }

    pub fn n_bits(&self) -> usize {
        self.n_bits
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_bits).filter(|&b| self.get(b))
    }

    /// 0/1 vector, the denoiser's conditioning input.
    pub fn to_dense(&self) -> Vec<f64> {
        (0..self.n_bits).map(|b| f64::from(self.get(b))).collect()
    }
}

pub fn circular_fingerprint(
    g: &MolecularGraph,
    vocab: &AtomVocab,
    radius: usize,
    n_bits: usize,
) -> Result<Fingerprint> {
    if n_bits == 0 {
        return Err(Error::invalid("fingerprint needs at least one bit"));
    }
    let n = g.n_atoms();
    let mut fp = Fingerprint::empty(n_bits, radius);
    let mut ids = Vec::with_capacity(n);
    for a in 0..n {
        let sym = vocab
            .symbol(g.atom_type(a))
            .ok_or_else(|| Error::invalid(format!("atom type {} not in vocabulary", g.atom_type(a))))?;
        let mut orders: Vec<u8> = g.neighbors(a).map(|b| g.bond(a, b)).collect();
        orders.sort_unstable();
        let mut h = combine(combine(ROUND_SALT, hash_symbol(sym)), g.degree(a) as u64);
        for o in orders {
            h = combine(h, u64::from(o));
        }
        ids.push(h);
    }
    for &h in &ids {
        fp.set((h % n_bits as u64) as usize);
    }
    for r in 1..=radius {
        let mut next = Vec::with_capacity(n);
        for a in 0..n {
            let mut env: Vec<(u8, u64)> = g.neighbors(a).map(|b| (g.bond(a, b), ids[b])).collect();
            env.sort_unstable();
            let mut h = combine(combine(ROUND_SALT, r as u64), ids[a]);
            for (o, id) in env {
                h = combine(combine(h, u64::from(o)), id);
            }
            next.push(h);
        }
        ids = next;
        for &h in &ids {
            fp.set((h % n_bits as u64) as usize);
        }
    }
    Ok(fp)
}

/// `|a & b| / |a | b|`, and 1 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    if a.n_bits != b.n_bits {
        return Err(Error::invalid(format!("fingerprint sizes differ: {} vs {}", a.n_bits, b.n_bits)));
    }
    let (mut and, mut or) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        and += (x & y).count_ones();
        or += (x | y).count_ones();
    }
    Ok(if or == 0 { 1.0 } else { f64::from(and) / f64::from(or) })
}
