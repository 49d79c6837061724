//! Endpoint attention asymmetry of bond nodes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fingerprint::{circular_fingerprint, DEFAULT_RADIUS};
use crate::denoiser::{Denoiser, DenoiserInput, ForwardOptions};
use crate::error::{Error, Result};
use crate::molgraph::{AtomVocab, LineGraphIndex, MolecularGraph};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryRecord {
    /// Numerator endpoint: the less electronegative atom, or a random one
    /// when both are equally electronegative.
    pub low: usize,
    pub high: usize,
    pub bond_class: u8,
    pub homonuclear: bool,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub log2_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub bond_class: u8,
    pub count: usize,
    pub mean: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryReport {
    pub records: Vec<AsymmetryRecord>,
    pub by_class: Vec<ClassSummary>,
}

/// `log2(alpha_low) - log2(alpha_high)`; written as a difference so that
/// swapping the arguments negates the result bit for bit.
pub fn log2_ratio(alpha_low: f64, alpha_high: f64) -> f64 {
    alpha_low.log2() - alpha_high.log2()
}

/// Mean and standard error of a sample (`std_err` is 0 below two values).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// One record per actual bond from endpoint weights `alpha` (M x 2,
/// columns for the pair's lower and higher atom index).
pub fn asymmetry_records<R: Rng + ?Sized>(
    g: &MolecularGraph,
    alpha: &Tensor,
    lg: &LineGraphIndex,
    vocab: &AtomVocab,
    rng: &mut R,
) -> Result<Vec<AsymmetryRecord>> {
    if alpha.shape() != [lg.n_pairs(), 2] || lg.n_atoms() != g.n_atoms() {
        return Err(Error::shape(format!("endpoint weights {:?} for {} pairs", alpha.shape(), lg.n_pairs())));
    }
    let en = |a: usize| {
        vocab
            .electronegativity(g.atom_type(a))
            .ok_or_else(|| Error::invalid(format!("atom type {} not in vocabulary", g.atom_type(a))))
    };
    let mut out = Vec::new();
    for (u, &(i, j)) in lg.pairs().iter().enumerate() {
        let class = g.bond(i, j);
        if class == 0 {
            continue;
        }
        let (ei, ej) = (en(i)?, en(j)?);
        let i_low = if ei == ej { rng.random_bool(0.5) } else { ei < ej };
        let (low, high, al, ah) =
            if i_low { (i, j, alpha.at2(u, 0), alpha.at2(u, 1)) } else { (j, i, alpha.at2(u, 1), alpha.at2(u, 0)) };
        out.push(AsymmetryRecord {
            low,
            high,
            bond_class: class,
            homonuclear: g.atom_type(i) == g.atom_type(j),
            alpha_low: al,
            alpha_high: ah,
            log2_ratio: log2_ratio(al, ah),
        });
    }
    Ok(out)
}

pub fn summarize(records: &[AsymmetryRecord]) -> Vec<ClassSummary> {
    let mut classes: Vec<u8> = records.iter().map(|r| r.bond_class).collect();
    classes.sort_unstable();
    classes.dedup();
    classes
        .into_iter()
        .map(|c| {
            let xs: Vec<f64> = records.iter().filter(|r| r.bond_class == c).map(|r| r.log2_ratio).collect();
            let (mean, std_err) = mean_and_se(&xs);
            ClassSummary { bond_class: c, count: xs.len(), mean, std_err }
        })
        .collect()
}

/// Runs the network on the clean molecule at timestep `t`, conditioned on
/// its own fingerprint, and reads the final-layer endpoint weights.
pub fn attention_asymmetry(
    net: &Denoiser,
    g: &MolecularGraph,
    vocab: &AtomVocab,
    t: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<AsymmetryRecord>> {
    let cond = circular_fingerprint(g, vocab, DEFAULT_RADIUS, net.config().cond_dim)?.to_dense();
    let tape = Tape::new();
    let out = net.forward(&tape, &DenoiserInput { noisy: g, cond: &cond, t, steps }, &ForwardOptions::default())?;
    asymmetry_records(g, &out.endpoint_attention, &out.line_graph, vocab, &mut ChaCha8Rng::seed_from_u64(seed))
}
