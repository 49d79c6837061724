use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::fingerprint::{circular_fingerprint, tanimoto, DEFAULT_BITS, DEFAULT_RADIUS};
use super::mces::mces_distance;
use crate::error::{Error, Result};
use crate::molgraph::{canonical_key, AtomVocab, MolecularGraph};

/// Metrics at one cutoff `k`, averaged over queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub accuracy: f64,
    /// Mean over queries of the smallest MCES distance in the top `k`;
    /// queries whose MCES exceeded the size cap are left out.
    pub mces: f64,
    /// Mean over queries of the largest Tanimoto similarity in the top `k`.
    pub tanimoto: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub at: Vec<TopK>,
    /// Queries that had no candidates (scored as misses).
    pub empty_queries: Vec<usize>,
    /// Candidate comparisons skipped because MCES was over the size cap.
    pub mces_skipped: usize,
}

impl EvalReport {
    pub fn get(&self, k: usize) -> Option<&TopK> {
        self.at.iter().find(|t| t.k == k)
    }

    /// Plain-text table: accuracy, MCES and Tanimoto at each cutoff.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "");
        for t in &self.at {
            let _ = write!(s, "{:>12}", format!("Top-{}", t.k));
        }
        s.push('\n');
        for (name, f) in [
            ("Accuracy", (|t: &TopK| t.accuracy * 100.0) as fn(&TopK) -> f64),
            ("MCES", |t: &TopK| t.mces),
            ("Tanimoto", |t: &TopK| t.tanimoto),
        ] {
            let _ = write!(s, "{name:<10}");
            for t in &self.at {
                let _ = write!(s, "{:>12.4}", f(t));
            }
            s.push('\n');
        }
        let _ = writeln!(s, "queries: {}, empty: {}", self.n_queries, self.empty_queries.len());
        s
    }
}

/// Scores ranked candidate lists against their ground truth.
///
/// A query with no candidates counts as a miss with Tanimoto 0 and MCES
/// equal to the truth's bond count (its distance to an empty graph).
pub fn evaluate(
    truths: &[MolecularGraph],
    candidates: &[Vec<MolecularGraph>],
    ks: &[usize],
    vocab: &AtomVocab,
) -> Result<EvalReport> {
    if truths.len() != candidates.len() {
        return Err(Error::invalid(format!(
            "{} queries but {} candidate lists",
            truths.len(),
            candidates.len()
        )));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::invalid("cutoffs must be positive"));
    }
    let fp = |g: &MolecularGraph| circular_fingerprint(g, vocab, DEFAULT_RADIUS, DEFAULT_BITS);
    let mut acc = vec![0.0; ks.len()];
    let mut tan = vec![0.0; ks.len()];
    let mut mces = vec![0.0; ks.len()];
    let mut mces_n = vec![0usize; ks.len()];
    let mut empty = Vec::new();
    let mut skipped = 0;
    for (q, (truth, cands)) in truths.iter().zip(candidates).enumerate() {
        if cands.is_empty() {
            empty.push(q);
            for k in 0..ks.len() {
                mces[k] += truth.n_bonds() as f64;
                mces_n[k] += 1;
            }
            continue;
        }
        let key = canonical_key(truth)?;
        let tfp = fp(truth)?;
        let deepest = cands.len().min(ks.iter().copied().max().unwrap_or(1));
        let mut hit = Vec::with_capacity(deepest);
        let mut sim = Vec::with_capacity(deepest);
        let mut dist = Vec::with_capacity(deepest);
        for c in &cands[..deepest] {
            hit.push(canonical_key(c)? == key);
            sim.push(tanimoto(&tfp, &fp(c)?)?);
            dist.push(match mces_distance(truth, c) {
                Ok(d) => Some(d as f64),
                Err(Error::UnsupportedSize(_)) => {
                    skipped += 1;
                    None
                }
                Err(e) => return Err(e),
            });
        }
        for (slot, &k) in ks.iter().enumerate() {
            let top = k.min(deepest);
            if hit[..top].iter().any(|&h| h) {
                acc[slot] += 1.0;
            }
            tan[slot] += sim[..top].iter().copied().fold(0.0, f64::max);
            if let Some(d) = dist[..top].iter().flatten().copied().reduce(f64::min) {
                mces[slot] += d;
                mces_n[slot] += 1;
            }
        }
    }
    let n = truths.len().max(1) as f64;
    let at = ks
        .iter()
        .enumerate()
        .map(|(s, &k)| TopK {
            k,
            accuracy: acc[s] / n,
            mces: if mces_n[s] > 0 { mces[s] / mces_n[s] as f64 } else { f64::NAN },
            tanimoto: tan[s] / n,
        })
        .collect();
    Ok(EvalReport { n_queries: truths.len(), at, empty_queries: empty, mces_skipped: skipped })
}
