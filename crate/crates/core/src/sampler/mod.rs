//! Reverse sampling along a decreasing timestep subsequence, candidate
//! generation and ranking.

use std::cell::Cell;
use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserInput, ForwardOptions};
use crate::diffusion::{sample_categorical, softmax, TransitionModel};
use crate::error::{Error, Result};
use crate::metrics::combine;
use crate::molgraph::{canonical_key, check_valence, AtomVocab, LineGraphIndex, MolecularGraph};
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    #[default]
    Uniform,
    Cosine,
}

/// `T = taus[0] > taus[1] > ... > taus[J] = 0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JumpSchedule {
    taus: Vec<usize>,
}

impl JumpSchedule {
    pub fn new(taus: Vec<usize>) -> Result<Self> {
        if taus.len() < 2 || taus[0] == 0 || *taus.last().unwrap() != 0 {
            return Err(Error::invalid(format!("schedule must run from T > 0 down to 0, got {taus:?}")));
        }
        if taus.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid(format!("schedule must strictly decrease, got {taus:?}")));
        }
        Ok(Self { taus })
    }

    pub fn taus(&self) -> &[usize] {
        &self.taus
    }

    pub fn steps(&self) -> usize {
        self.taus[0]
    }

    /// Number of denoiser evaluations.
    pub fn jumps(&self) -> usize {
        self.taus.len() - 1
    }
}

pub fn make_jump_schedule(steps: usize, jumps: usize, spacing: Spacing) -> Result<JumpSchedule> {
    if jumps == 0 || jumps > steps {
        return Err(Error::invalid(format!("need 1 <= J <= T, got J = {jumps}, T = {steps}")));
    }
    let taus = match spacing {
        Spacing::Uniform => (0..=jumps).map(|k| steps - k * steps / jumps).collect(),
        Spacing::Cosine => {
            // tau_k = round(T cos^2(pi k / 2J)), then nudged into
            // [J - k, tau_{k-1} - 1] so the sequence stays strict.
            let mut taus = vec![steps];
            for k in 1..=jumps {
                let x = (std::f64::consts::FRAC_PI_2 * k as f64 / jumps as f64).cos();
                let raw = (steps as f64 * x * x).round() as usize;
                taus.push(raw.clamp(jumps - k, taus[k - 1] - 1));
            }
            taus
        }
    };
    JumpSchedule::new(taus)
}

/// Predicted clean-bond distribution for every atom pair (pair order of
/// [`LineGraphIndex`]) of a noisy graph at timestep `t`.
pub trait CleanPredictor {
    fn predict(&self, noisy: &MolecularGraph, t: usize) -> Result<Vec<Vec<f64>>>;
}

/// Runs a denoiser with a fixed conditioning vector and counts calls.
pub struct DenoiserPredictor<'a> {
    pub net: &'a Denoiser,
    pub cond: &'a [f64],
    pub steps: usize,
    calls: Cell<usize>,
}

impl<'a> DenoiserPredictor<'a> {
    pub fn new(net: &'a Denoiser, cond: &'a [f64], steps: usize) -> Self {
        Self { net, cond, steps, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl CleanPredictor for DenoiserPredictor<'_> {
    fn predict(&self, noisy: &MolecularGraph, t: usize) -> Result<Vec<Vec<f64>>> {
        self.calls.set(self.calls.get() + 1);
        let tape = Tape::new();
        let input = DenoiserInput { noisy, cond: self.cond, t, steps: self.steps };
        let out = self.net.forward(&tape, &input, &ForwardOptions::default())?;
        let logits = out.logits.value();
        let c = logits.shape()[1];
        Ok(logits.data().chunks(c).map(softmax).collect())
    }
}

/// `p(e_s | e_t)` used by the jump sampler: the skipped posterior mixed
/// over the predicted clean class.
pub fn jump_step_distribution(tm: &TransitionModel, p0: &[f64], e_t: usize, s: usize, t: usize) -> Result<Vec<f64>> {
    tm.model_posterior(p0, e_t, s, t)
}

/// The standard sampler's step from `t` to `t - 1`, built from the
/// one-step matrices.
pub fn standard_step_distribution(tm: &TransitionModel, p0: &[f64], e_t: usize, t: usize) -> Result<Vec<f64>> {
    let k = tm.n_classes();
    if p0.len() != k {
        return Err(Error::shape(format!("{} clean probabilities for {k} classes", p0.len())));
    }
    let mut out = vec![0.0; k];
    let mut mass = 0.0;
    for (x, &w) in p0.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        match tm.unit_step_posterior(e_t, x, t) {
            Ok(q) => {
                mass += w;
                out.iter_mut().zip(&q).for_each(|(o, p)| *o += w * p);
            }
            Err(Error::ImpossibleTransition(_)) => {}
            Err(e) => return Err(e),
        }
    }
    if !(mass > 0.0) {
        return Err(Error::ImpossibleTransition(format!("no predicted clean class reaches e_t = {e_t}")));
    }
    out.iter_mut().for_each(|o| *o /= mass);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub graph: MolecularGraph,
    /// Mean log-probability of the chosen classes under the final clean
    /// prediction (0 for graphs without pairs).
    pub score: f64,
    pub evaluations: usize,
}

/// Draws `E_T` from the marginals and walks the schedule, one prediction
/// per jump. The last jump takes the per-pair argmax of the prediction.
pub fn reverse_sample<P: CleanPredictor + ?Sized, R: Rng + ?Sized>(
    tm: &TransitionModel,
    predictor: &P,
    atom_types: Vec<usize>,
    schedule: &JumpSchedule,
    rng: &mut R,
) -> Result<SampleOutcome> {
    run_chain(tm, predictor, atom_types, schedule, rng, |p0, e, s, t| jump_step_distribution(tm, p0, e, s, t))
}

/// The plain `T`-step loop with one-step posteriors.
pub fn reverse_sample_standard<P: CleanPredictor + ?Sized, R: Rng + ?Sized>(
    tm: &TransitionModel,
    predictor: &P,
    atom_types: Vec<usize>,
    rng: &mut R,
) -> Result<SampleOutcome> {
    let schedule = make_jump_schedule(tm.steps(), tm.steps(), Spacing::Uniform)?;
    run_chain(tm, predictor, atom_types, &schedule, rng, |p0, e, _, t| standard_step_distribution(tm, p0, e, t))
}

fn run_chain<P, R, F>(
    tm: &TransitionModel,
    predictor: &P,
    atom_types: Vec<usize>,
    schedule: &JumpSchedule,
    rng: &mut R,
    step: F,
) -> Result<SampleOutcome>
where
    P: CleanPredictor + ?Sized,
    R: Rng + ?Sized,
    F: Fn(&[f64], usize, usize, usize) -> Result<Vec<f64>>,
{
    if schedule.steps() != tm.steps() {
        return Err(Error::invalid(format!(
            "schedule starts at {} but the diffusion has {} steps",
            schedule.steps(),
            tm.steps()
        )));
    }
    let mut g = tm.sample_prior(atom_types, rng)?;
    let n = g.n_atoms();
    if n < 2 {
        return Ok(SampleOutcome { graph: g, score: 0.0, evaluations: 0 });
    }
    let lg = LineGraphIndex::new(n)?;
    let taus = schedule.taus();
    let mut score = 0.0;
    for k in 0..schedule.jumps() {
        let (t, s) = (taus[k], taus[k + 1]);
        let p0 = predictor.predict(&g, t)?;
        if p0.len() != lg.n_pairs() {
            return Err(Error::shape(format!("{} predictions for {} pairs", p0.len(), lg.n_pairs())));
        }
        let mut next = g.clone();
        if s == 0 {
            let mut total = 0.0;
            for (u, &(i, j)) in lg.pairs().iter().enumerate() {
                let c = argmax(&p0[u]);
                total += p0[u][c].ln();
                next.set_bond(i, j, c as u8);
            }
            score = total / lg.n_pairs() as f64;
        } else {
            for (u, &(i, j)) in lg.pairs().iter().enumerate() {
                let p = step(&p0[u], g.bond(i, j) as usize, s, t)?;
                next.set_bond(i, j, sample_categorical(&p, rng) as u8);
            }
        }
        g = next;
    }
    Ok(SampleOutcome { graph: g, score, evaluations: schedule.jumps() })
}

/// First index of the largest entry.
fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub n_candidates: usize,
    /// Denoiser evaluations per candidate; `None` runs all `T` steps.
    pub jumps: Option<usize>,
    pub spacing: Spacing,
    pub seed: u64,
    pub filter_valence: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_candidates: 100, jumps: None, spacing: Spacing::Uniform, seed: 0, filter_valence: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub graph: MolecularGraph,
    /// Ranking score; isomorphic candidates share the best raw score of
    /// their group.
    pub score: f64,
    pub raw_score: f64,
    pub seed: u64,
    pub evaluations: usize,
    pub elapsed_ms: f64,
}

/// Seed of candidate `index`.
pub fn candidate_seed(base: u64, index: usize) -> u64 {
    combine(base, index as u64)
}

/// Independent samples ranked by score (descending), ties by canonical key.
pub fn generate_candidates<P: CleanPredictor + ?Sized>(
    tm: &TransitionModel,
    predictor: &P,
    atom_types: &[usize],
    config: &SampleConfig,
    vocab: &AtomVocab,
) -> Result<Vec<Candidate>> {
    if config.n_candidates == 0 {
        return Err(Error::invalid("n_candidates must be at least 1"));
    }
    let schedule = make_jump_schedule(tm.steps(), config.jumps.unwrap_or(tm.steps()), config.spacing)?;
    let mut out = Vec::with_capacity(config.n_candidates);
    for i in 0..config.n_candidates {
        let seed = candidate_seed(config.seed, i);
        let start = Instant::now();
        let o = reverse_sample(tm, predictor, atom_types.to_vec(), &schedule, &mut ChaCha8Rng::seed_from_u64(seed))?;
        out.push(Candidate {
            graph: o.graph,
            score: o.score,
            raw_score: o.score,
            seed,
            evaluations: o.evaluations,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    rank(out, config.filter_valence, vocab)
}

/// Candidates drawn pair-by-pair from the marginals with no denoiser,
/// scored by their mean log marginal probability.
pub fn marginal_candidates(
    tm: &TransitionModel,
    atom_types: &[usize],
    n_candidates: usize,
    seed: u64,
    vocab: &AtomVocab,
) -> Result<Vec<Candidate>> {
    let m = tm.marginals();
    let mut out = Vec::with_capacity(n_candidates);
    for i in 0..n_candidates {
        let seed = candidate_seed(seed, i);
        let g = tm.sample_prior(atom_types.to_vec(), &mut ChaCha8Rng::seed_from_u64(seed))?;
        let n = g.n_atoms();
        let pairs = n * n.saturating_sub(1) / 2;
        let total: f64 = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| m[g.bond(i, j) as usize].ln()).sum();
        let score = if pairs > 0 { total / pairs as f64 } else { 0.0 };
        out.push(Candidate { graph: g, score, raw_score: score, seed, evaluations: 0, elapsed_ms: 0.0 });
    }
    rank(out, false, vocab)
}

fn rank(mut cands: Vec<Candidate>, filter_valence: bool, vocab: &AtomVocab) -> Result<Vec<Candidate>> {
    if filter_valence {
        let mut kept = Vec::with_capacity(cands.len());
        for c in cands {
            if check_valence(&c.graph, vocab)?.valid {
                kept.push(c);
            }
        }
        cands = kept;
    }
    let keys = cands.iter().map(|c| canonical_key(&c.graph)).collect::<Result<Vec<_>>>()?;
    let mut best: HashMap<&str, f64> = HashMap::new();
    for (c, k) in cands.iter().zip(&keys) {
        let e = best.entry(k.as_str()).or_insert(f64::NEG_INFINITY);
        *e = e.max(c.raw_score);
    }
    for (c, k) in cands.iter_mut().zip(&keys) {
        c.score = best[k.as_str()];
    }
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].score.total_cmp(&cands[a].score).then_with(|| keys[a].cmp(&keys[b])));
    let mut slots: Vec<Option<Candidate>> = cands.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().unwrap()).collect())
}
