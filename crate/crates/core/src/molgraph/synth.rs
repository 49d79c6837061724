use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::motifs::MAX_RING_LEN;
use super::{check_valence, extract_motifs, AtomVocab, BondType, LineGraphIndex, MolecularGraph};
use crate::error::{Error, Result};

/// Atom-type multiset, stored as a count per vocabulary index.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Formula {
    counts: Vec<usize>,
}

impl Formula {
    pub fn from_counts(counts: Vec<usize>) -> Self {
        Self { counts }
    }

    pub fn of(g: &MolecularGraph) -> Self {
        let n_types = g.atom_types().iter().max().map_or(0, |&t| t + 1);
        let mut counts = vec![0; n_types];
        for &t in g.atom_types() {
            counts[t] += 1;
        }
        Self { counts }
    }

    /// Parses Hill-style strings such as `C4NO2` or `C:4,N:1,O:2`.
    pub fn parse(text: &str, vocab: &AtomVocab) -> Result<Self> {
        let mut counts = vec![0; vocab.len()];
        let cleaned: String = text.chars().filter(|c| !matches!(c, ':' | ',' | ' ')).collect();
        let chars: Vec<char> = cleaned.chars().collect();
        let mut k = 0;
        while k < chars.len() {
            if !chars[k].is_ascii_uppercase() {
                return Err(Error::invalid(format!("bad formula `{text}`")));
            }
            let mut sym = chars[k].to_string();
            k += 1;
            while k < chars.len() && chars[k].is_ascii_lowercase() {
                sym.push(chars[k]);
                k += 1;
            }
            let mut digits = String::new();
            while k < chars.len() && chars[k].is_ascii_digit() {
                digits.push(chars[k]);
                k += 1;
            }
            let count: usize = if digits.is_empty() {
                1
            } else {
                digits.parse().map_err(|_| Error::invalid(format!("bad count in `{text}`")))?
            };
            let idx = vocab
                .index_of(&sym)
                .ok_or_else(|| Error::invalid(format!("unknown element `{sym}`")))?;
            counts[idx] += count;
        }
        Ok(Self { counts })
    }

    pub fn n_atoms(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn count(&self, atom_type: usize) -> usize {
        self.counts.get(atom_type).copied().unwrap_or(0)
    }

    /// Expanded atom types in ascending type order.
    pub fn atom_types(&self) -> Vec<usize> {
        self.counts.iter().enumerate().flat_map(|(t, &c)| std::iter::repeat_n(t, c)).collect()
    }

    pub fn display<'a>(&'a self, vocab: &'a AtomVocab) -> impl fmt::Display + 'a {
        FormulaDisplay { formula: self, vocab }
    }
}

struct FormulaDisplay<'a> {
    formula: &'a Formula,
    vocab: &'a AtomVocab,
}

impl fmt::Display for FormulaDisplay<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (t, &c) in self.formula.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            f.write_str(self.vocab.symbol(t).unwrap_or("?"))?;
            if c > 1 {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub max_atoms: usize,
    pub retries: usize,
    /// Probability of each of up to two ring-closing bonds.
    pub ring_prob: f64,
    pub double_prob: f64,
    pub triple_prob: f64,
    /// Probability of aromatizing an all-single 5/6-ring.
    pub aromatic_prob: f64,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            max_atoms: 16,
            retries: 200,
            ring_prob: 0.3,
            double_prob: 0.2,
            triple_prob: 0.05,
            aromatic_prob: 0.7,
        }
    }
}

/// Random connected, valence-valid graph over exactly the atoms of `formula`.
pub fn random_molecule(
    formula: &Formula,
    rng_seed: u64,
    vocab: &AtomVocab,
    opts: &SynthOptions,
) -> Result<MolecularGraph> {
    let n = formula.n_atoms();
    if n == 0 {
        return Err(Error::invalid("formula is empty"));
    }
    if n > opts.max_atoms {
        return Err(Error::UnsupportedSize(format!(
            "formula has {n} atoms, limit is {}",
            opts.max_atoms
        )));
    }
    let types = formula.atom_types();
    let capacity: Vec<f64> = types
        .iter()
        .map(|&t| {
            vocab
                .max_valence(t)
                .map(f64::from)
                .ok_or_else(|| Error::invalid(format!("formula uses unknown atom type {t}")))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for _ in 0..opts.retries.max(1) {
        if let Some(g) = attempt(&types, &capacity, opts, &mut rng)? {
            if g.is_connected() && check_valence(&g, vocab)?.valid {
                return Ok(g);
            }
        }
    }
    Err(Error::GenerationFailure(format!(
        "no valid graph for {} within {} attempts",
        formula.display(vocab),
        opts.retries
    )))
}

fn attempt(
    types: &[usize],
    capacity: &[f64],
    opts: &SynthOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Option<MolecularGraph>> {
    let n = types.len();
    let mut g = MolecularGraph::empty(types.to_vec())?;
    if n == 1 {
        return Ok(Some(g));
    }
    let mut used = vec![0.0f64; n];
    let spare = |used: &[f64], i: usize| capacity[i] - used[i];

    // Random spanning tree.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for k in 1..n {
        let v = order[k];
        let options: Vec<usize> =
            order[..k].iter().copied().filter(|&w| spare(&used, w) >= 1.0).collect();
        if options.is_empty() || spare(&used, v) < 1.0 {
            return Ok(None);
        }
        let w = options[rng.random_range(0..options.len())];
        g.set_bond(v, w, BondType::Single.class());
        used[v] += 1.0;
        used[w] += 1.0;
    }

    for _ in 0..2 {
        if !rng.random_bool(opts.ring_prob) {
            continue;
        }
        let options: Vec<(usize, usize)> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .filter(|&(i, j)| g.bond(i, j) == 0 && spare(&used, i) >= 1.0 && spare(&used, j) >= 1.0)
            .collect();
        if let Some(&(i, j)) = options.get(rng.random_range(0..options.len().max(1))) {
            g.set_bond(i, j, BondType::Single.class());
            used[i] += 1.0;
            used[j] += 1.0;
        }
    }

    let lg = LineGraphIndex::new(n)?;
    let motifs = extract_motifs(&g, &lg)?;
    for ring in &motifs.rings {
        if !(5..=6).contains(&ring.len()) || !rng.random_bool(opts.aromatic_prob) {
            continue;
        }
        let all_single = ring.bonds.iter().all(|&u| {
            let (i, j) = lg.pair(u);
            g.bond(i, j) == BondType::Single.class()
        });
        if all_single && ring.atoms.iter().all(|&a| spare(&used, a) >= 1.0) {
            for &u in &ring.bonds {
                let (i, j) = lg.pair(u);
                g.set_bond(i, j, BondType::Aromatic.class());
            }
            for &a in &ring.atoms {
                used[a] += 1.0;
            }
        }
    }
    debug_assert!(motifs.rings.iter().all(|r| r.len() <= MAX_RING_LEN));

    for (i, j, b) in g.bond_list() {
        if b != BondType::Single.class() || !rng.random_bool(opts.double_prob) {
            continue;
        }
        if spare(&used, i) >= 1.0 && spare(&used, j) >= 1.0 {
            let triple = rng.random_bool(opts.triple_prob / opts.double_prob.max(1e-12))
                && spare(&used, i) >= 2.0
                && spare(&used, j) >= 2.0;
            let (class, extra) =
                if triple { (BondType::Triple, 2.0) } else { (BondType::Double, 1.0) };
            g.set_bond(i, j, class.class());
            used[i] += extra;
            used[j] += extra;
        }
    }
    Ok(Some(g))
}

/// Relative frequency of each vocabulary index when drawing formulas for a
/// synthetic corpus; indices past the end get the last weight.
pub const CORPUS_TYPE_WEIGHTS: [f64; 5] = [0.6, 0.15, 0.15, 0.05, 0.05];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusFailure {
    pub seed: u64,
    pub formula: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub molecules: Vec<MolecularGraph>,
    pub failures: Vec<CorpusFailure>,
}

/// `n` molecules of 2..=`max_atoms` atoms with random formulas. Record `k`
/// uses seed `seed + k`; formulas that cannot be realized are recorded as
/// failures and skipped, up to `20 n` attempts in total.
pub fn synthetic_corpus(n: usize, max_atoms: usize, seed: u64, vocab: &AtomVocab) -> Result<Corpus> {
    if max_atoms < 2 {
        return Err(Error::invalid("max_atoms must be at least 2"));
    }
    let opts = SynthOptions { max_atoms, ..SynthOptions::default() };
    let weights: Vec<f64> = (0..vocab.len())
        .map(|t| CORPUS_TYPE_WEIGHTS[t.min(CORPUS_TYPE_WEIGHTS.len() - 1)])
        .collect();
    let total: f64 = weights.iter().sum();
    let mut molecules = Vec::with_capacity(n);
    let mut failures = Vec::new();
    let mut k = 0u64;
    while molecules.len() < n {
        if k >= 20 * n as u64 {
            return Err(Error::GenerationFailure(format!(
                "only {} of {n} molecules after {k} attempts",
                molecules.len()
            )));
        }
        let s = seed.wrapping_add(k);
        k += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0x636f_7270_7573);
        let atoms = rng.random_range(2..=max_atoms);
        let mut counts = vec![0; vocab.len()];
        for _ in 0..atoms {
            let mut u = rng.random::<f64>() * total;
            let mut t = 0;
            while t + 1 < weights.len() && u >= weights[t] {
                u -= weights[t];
                t += 1;
            }
            counts[t] += 1;
        }
        let formula = Formula::from_counts(counts);
        match random_molecule(&formula, s, vocab, &opts) {
            Ok(g) => molecules.push(g),
            Err(Error::GenerationFailure(e)) => failures.push(CorpusFailure {
                seed: s,
                formula: formula.display(vocab).to_string(),
                error: e,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(Corpus { molecules, failures })
}
