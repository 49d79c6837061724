//! Fingerprints, similarity, MCES distance, top-K evaluation and the
//! endpoint-attention asymmetry analysis.

mod asymmetry;
mod eval;
mod fingerprint;
mod mces;

pub use asymmetry::{
    asymmetry_records, attention_asymmetry, log2_ratio, mean_and_se, summarize, AsymmetryRecord,
    AsymmetryReport, ClassSummary,
};
pub use eval::{evaluate, EvalReport, TopK};
pub use fingerprint::{
    circular_fingerprint, combine, hash_symbol, mix, tanimoto, Fingerprint, DEFAULT_BITS, DEFAULT_RADIUS,
    ROUND_SALT,
};
pub use mces::{max_common_edges, mces_distance, mces_distance_with_cap, DEFAULT_MCES_BOND_CAP};
