//! Heavy-atom molecular graphs and the structures derived from them.
//!
//! A [`MolecularGraph`] is an atom-type vector plus a symmetric matrix of bond
//! classes. Class `0` is "no bond"; `1..=4` are single, double, triple and
//! aromatic. The line graph over *all* atom pairs ([`LineGraphIndex`]) is the
//! index space the bond stream of the denoiser works in.

mod canon;
mod graph;
mod io;
mod linegraph;
mod motifs;
mod synth;
mod valence;
mod vocab;

pub use canon::{canonical_key, canonical_key_with_limit, CanonicalKey, DEFAULT_CANON_LIMIT};
pub use graph::{BondType, MolecularGraph, N_BOND_CLASSES};
pub use io::{read_jsonl, write_jsonl, MoleculeRecord};
pub use linegraph::{build_line_graph, pair_index, LineGraphIndex};
pub use motifs::{extract_motifs, MotifSummary, Ring, MAX_RING_LEN};
pub use synth::{
    random_molecule, synthetic_corpus, Corpus, CorpusFailure, Formula, SynthOptions, CORPUS_TYPE_WEIGHTS,
};
pub use valence::{check_valence, AtomValence, ValenceReport};
pub use vocab::AtomVocab;
