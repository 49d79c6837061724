//! Categorical bond diffusion with marginal transitions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::molgraph::{MolecularGraph, N_BOND_CLASSES};
use crate::tensor::{Tensor, Var};

pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
/// Per-step retention is clamped into `[ALPHA_CLAMP, 1 - ALPHA_CLAMP]`.
pub const ALPHA_CLAMP: f64 = 1e-6;

/// Cosine schedule. Index 0 is the clean endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    offset: f64,
    alpha_bar: Vec<f64>,
    alpha: Vec<f64>,
}

fn cosine_f(t: usize, steps: usize, s: f64) -> f64 {
    let x = ((t as f64 / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
    x.cos().powi(2)
}

pub fn build_schedule(steps: usize, offset: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::invalid("diffusion needs at least one step"));
    }
    if !(offset.is_finite() && offset > 0.0) {
        return Err(Error::invalid(format!("cosine offset must be positive, got {offset}")));
    }
    let f0 = cosine_f(0, steps, offset);
    let mut alpha = vec![1.0; steps + 1];
    let mut alpha_bar = vec![1.0; steps + 1];
    let mut prev = 1.0;
    for t in 1..=steps {
        let raw = (cosine_f(t, steps, offset) / f0) / prev;
        prev = cosine_f(t, steps, offset) / f0;
        alpha[t] = raw.clamp(ALPHA_CLAMP, 1.0 - ALPHA_CLAMP);
        alpha_bar[t] = alpha_bar[t - 1] * alpha[t];
    }
    Ok(NoiseSchedule { offset, alpha_bar, alpha })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alpha.len() - 1
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Unit-step retention `alpha_bar[t] / alpha_bar[t-1]`; `alpha(0)` is 1.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::invalid(format!("timestep {t} beyond T = {}", self.steps())));
        }
        Ok(())
    }
}

/// `alpha * I + (1 - alpha) * 1 m^T`.
pub fn marginal_transition(alpha: f64, m: &[f64]) -> Result<Tensor> {
    check_distribution(m)?;
    let k = m.len();
    Ok(Tensor::from_fn(&[k, k], |idx| {
        let (a, b) = (idx / k, idx % k);
        (1.0 - alpha) * m[b] + if a == b { alpha } else { 0.0 }
    }))
}

fn check_distribution(m: &[f64]) -> Result<()> {
    if m.is_empty() || m.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
        return Err(Error::invalid("marginals must be finite and nonnegative"));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("marginals sum to {total}, not 1")));
    }
    Ok(())
}

/// Bond-class frequencies over unordered pairs, with `pseudocount` added to
/// every class so no class is unreachable under the noise.
pub fn estimate_marginals(graphs: &[MolecularGraph], pseudocount: f64) -> Result<Vec<f64>> {
    let mut counts = vec![pseudocount; N_BOND_CLASSES];
    for g in graphs {
        let n = g.n_atoms();
        for i in 0..n {
            for j in i + 1..n {
                counts[g.bond(i, j) as usize] += 1.0;
            }
        }
    }
    let total: f64 = counts.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("no pairs to estimate marginals from"));
    }
    Ok(counts.into_iter().map(|c| c / total).collect())
}

/// Schedule plus stationary marginals; everything the forward process and
/// its posteriors need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionModel {
    schedule: NoiseSchedule,
    marginals: Vec<f64>,
}

impl TransitionModel {
    pub fn new(schedule: NoiseSchedule, marginals: Vec<f64>) -> Result<Self> {
        check_distribution(&marginals)?;
        if marginals.len() != N_BOND_CLASSES {
            return Err(Error::invalid(format!(
                "{} marginals for {N_BOND_CLASSES} bond classes",
                marginals.len()
            )));
        }
        Ok(Self { schedule, marginals })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn marginals(&self) -> &[f64] {
        &self.marginals
    }

    pub fn n_classes(&self) -> usize {
        self.marginals.len()
    }

    pub fn steps(&self) -> usize {
        self.schedule.steps()
    }

    /// Retention between `s` and `t`; exactly `alpha(t)` for adjacent steps.
    fn retention(&self, s: usize, t: usize) -> f64 {
        if t == s + 1 {
            self.schedule.alpha(t)
        } else {
            self.schedule.alpha_bar(t) / self.schedule.alpha_bar(s)
        }
    }

    /// Unit-step matrix `Q(t)`.
    pub fn transition(&self, t: usize) -> Result<Tensor> {
        self.schedule.check_t(t)?;
        if t == 0 {
            return Err(Error::invalid("Q(t) is defined for t >= 1"));
        }
        marginal_transition(self.schedule.alpha(t), &self.marginals)
    }

    /// Cumulative matrix `Qbar(t) = Q_{0->t}`.
    pub fn cumulative(&self, t: usize) -> Result<Tensor> {
        self.schedule.check_t(t)?;
        marginal_transition(self.schedule.alpha_bar(t), &self.marginals)
    }

    /// `Q_{s->t}` in closed form.
    pub fn multi_step_transition(&self, s: usize, t: usize) -> Result<Tensor> {
        if s >= t {
            return Err(Error::invalid(format!("need s < t, got s = {s}, t = {t}")));
        }
        self.schedule.check_t(t)?;
        marginal_transition(self.retention(s, t), &self.marginals)
    }

    /// Entry `[a, b]` of `Q_{s->t}` without building the matrix.
    fn q_entry(&self, r: f64, a: usize, b: usize) -> f64 {
        (1.0 - r) * self.marginals[b] + if a == b { r } else { 0.0 }
    }

    /// Samples `E_t ~ E_0 Qbar(t)` independently per unordered pair.
    pub fn forward_corrupt<R: Rng + ?Sized>(
        &self,
        e0: &MolecularGraph,
        t: usize,
        rng: &mut R,
    ) -> Result<MolecularGraph> {
        self.schedule.check_t(t)?;
        let ab = self.schedule.alpha_bar(t);
        let n = e0.n_atoms();
        let mut out = e0.clone();
        for i in 0..n {
            for j in i + 1..n {
                let c = e0.bond(i, j) as usize;
                let row: Vec<f64> = (0..self.n_classes()).map(|b| self.q_entry(ab, c, b)).collect();
                out.set_bond(i, j, sample_categorical(&row, rng) as u8);
            }
        }
        Ok(out)
    }

    /// Draws the fully-noised bond matrix from the marginals.
    pub fn sample_prior<R: Rng + ?Sized>(&self, atom_types: Vec<usize>, rng: &mut R) -> Result<MolecularGraph> {
        let mut g = MolecularGraph::empty(atom_types)?;
        let n = g.n_atoms();
        for i in 0..n {
            for j in i + 1..n {
                g.set_bond(i, j, sample_categorical(&self.marginals, rng) as u8);
            }
        }
        Ok(g)
    }

    /// `q(e_s | e_t, e_0)` for any `s < t`.
    pub fn skipped_posterior(&self, e_t: usize, e0: usize, s: usize, t: usize) -> Result<Vec<f64>> {
        if s >= t {
            return Err(Error::invalid(format!("need s < t, got s = {s}, t = {t}")));
        }
        self.schedule.check_t(t)?;
        let k = self.n_classes();
        if e_t >= k || e0 >= k {
            return Err(Error::invalid(format!("bond class out of range 0..{k}")));
        }
        let r = self.retention(s, t);
        let ab_s = self.schedule.alpha_bar(s);
        let mut p: Vec<f64> = (0..k)
            .map(|es| self.q_entry(r, es, e_t) * self.q_entry(ab_s, e0, es))
            .collect();
        let z: f64 = p.iter().sum();
        if !(z > 0.0) {
            return Err(Error::ImpossibleTransition(format!(
                "e0 = {e0} cannot reach e_t = {e_t} between s = {s} and t = {t}"
            )));
        }
        p.iter_mut().for_each(|x| *x /= z);
        Ok(p)
    }

    /// One-step posterior computed from the matrices,
    /// `(e_t Q(t)^T) * (e_0 Qbar(t-1)) / (e_0 Qbar(t) e_t^T)`.
    pub fn unit_step_posterior(&self, e_t: usize, e0: usize, t: usize) -> Result<Vec<f64>> {
        if t == 0 {
            return Err(Error::invalid("unit-step posterior needs t >= 1"));
        }
        let q = self.transition(t)?;
        let qb_prev = self.cumulative(t - 1)?;
        let qb = self.cumulative(t)?;
        let k = self.n_classes();
        let den = qb.at2(e0, e_t);
        if !(den > 0.0) {
            return Err(Error::ImpossibleTransition(format!("e0 = {e0} cannot reach e_t = {e_t} at t = {t}")));
        }
        Ok((0..k).map(|es| q.at2(es, e_t) * qb_prev.at2(e0, es) / den).collect())
    }

    /// `p(e_s | e_t) = sum_x q(e_s | e_t, x) p0[x]` where `p0` is the
    /// predicted clean-bond distribution. Clean classes that cannot reach
    /// `e_t` are dropped and the rest renormalized.
    pub fn model_posterior(&self, p0: &[f64], e_t: usize, s: usize, t: usize) -> Result<Vec<f64>> {
        let k = self.n_classes();
        if p0.len() != k {
            return Err(Error::shape(format!("{} clean probabilities for {k} classes", p0.len())));
        }
        let mut out = vec![0.0; k];
        let mut mass = 0.0;
        for (x, &w) in p0.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            match self.skipped_posterior(e_t, x, s, t) {
                Ok(q) => {
                    mass += w;
                    out.iter_mut().zip(&q).for_each(|(o, p)| *o += w * p);
                }
                Err(Error::ImpossibleTransition(_)) => {}
                Err(e) => return Err(e),
            }
        }
        if !(mass > 0.0) {
            return Err(Error::ImpossibleTransition(format!(
                "no predicted clean class reaches e_t = {e_t}"
            )));
        }
        out.iter_mut().for_each(|o| *o /= mass);
        Ok(out)
    }
}

/// Inverse-CDF draw; falls back to the last positive class on round-off.
pub fn sample_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * p.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Row-wise softmax of a plain slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|x| (x - mx).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Mean cross-entropy over the rows of `logits` (pairs x classes) selected by
/// `mask`, against clean classes `e0`.
pub fn training_loss<'t>(logits: Var<'t>, e0: &[usize], mask: &[bool]) -> Result<Var<'t>> {
    let rows = logits.shape().first().copied().unwrap_or(0);
    if e0.len() != rows || mask.len() != rows {
        return Err(Error::shape(format!(
            "{} targets and {} mask entries for {rows} rows",
            e0.len(),
            mask.len()
        )));
    }
    let keep: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
    if keep.is_empty() {
        return Err(Error::invalid("loss mask selects no pairs"));
    }
    let targets: Vec<usize> = keep.iter().map(|&r| e0[r]).collect();
    if keep.len() == rows {
        logits.cross_entropy(&targets)
    } else {
        logits.index_select(&keep)?.cross_entropy(&targets)
    }
}
