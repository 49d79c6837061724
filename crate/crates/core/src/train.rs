//! Fingerprint-conditioned denoiser training.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::denoiser::{Denoiser, DenoiserInput, ForwardOptions};
use crate::diffusion::{training_loss, TransitionModel};
use crate::error::{Error, Result};
use crate::metrics::{circular_fingerprint, combine};
use crate::molgraph::{AtomVocab, LineGraphIndex, MolecularGraph};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::{AdamW, Tape, Tensor, Var};

/// A molecule with its conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub graph: MolecularGraph,
    pub cond: Vec<f64>,
}

pub fn fingerprint_cond(g: &MolecularGraph, vocab: &AtomVocab, radius: usize, bits: usize) -> Result<Vec<f64>> {
    Ok(circular_fingerprint(g, vocab, radius, bits)?.to_dense())
}

/// Molecules with fewer than two atoms have no pairs and are dropped.
pub fn prepare_examples(graphs: &[MolecularGraph], vocab: &AtomVocab, radius: usize, bits: usize) -> Result<Vec<Example>> {
    graphs
        .iter()
        .filter(|g| g.n_atoms() >= 2)
        .map(|g| Ok(Example { graph: g.clone(), cond: fingerprint_cond(g, vocab, radius, bits)? }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub batch_losses: Vec<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrainState {
    epoch: usize,
    optimizer_step: u64,
    marginals: Vec<f64>,
    config: RunConfig,
}

pub struct Trainer {
    pub net: Denoiser,
    pub tm: TransitionModel,
    pub config: RunConfig,
    opt: AdamW,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, marginals: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let net = Denoiser::new(config.model.clone(), config.train.seed)?;
        let tm = config.diffusion.transition_model(marginals)?;
        let opt = AdamW::new(config.train.optimizer(), net.store());
        Ok(Self { net, tm, config, opt, epoch: 0 })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.opt
    }

    /// Mean over the batch of each molecule's mean cross-entropy over all
    /// atom pairs, after corrupting it at a uniformly drawn timestep.
    pub fn batch_loss<'t, R: Rng + ?Sized>(&self, tape: &'t Tape, batch: &[&Example], rng: &mut R) -> Result<Var<'t>> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let steps = self.tm.steps();
        let mut total: Option<Var<'t>> = None;
        for ex in batch {
            let t = rng.random_range(1..=steps);
            let noisy = self.tm.forward_corrupt(&ex.graph, t, rng)?;
            let opts = ForwardOptions {
                dropout_seed: (self.config.model.dropout > 0.0).then(|| rng.random()),
                feature_seed: None,
            };
            let out = self.net.forward(tape, &DenoiserInput { noisy: &noisy, cond: &ex.cond, t, steps }, &opts)?;
            let lg: &LineGraphIndex = &out.line_graph;
            let targets: Vec<usize> = lg.pairs().iter().map(|&(i, j)| ex.graph.bond(i, j) as usize).collect();
            let loss = training_loss(out.logits, &targets, &vec![true; targets.len()])?;
            total = Some(match total {
                None => loss,
                Some(acc) => acc.add(loss)?,
            });
        }
        total.expect("non-empty batch").scale(1.0 / batch.len() as f64)
    }

    /// One optimizer update; returns the batch loss before the update.
    pub fn step<R: Rng + ?Sized>(&mut self, batch: &[&Example], rng: &mut R) -> Result<f64> {
        let (loss, grads) = {
            let tape = Tape::new();
            let loss = self.batch_loss(&tape, batch, rng)?;
            let value = loss.value().data()[0];
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss is {value}")));
            }
            let mut grads = tape.backward(loss)?.param_grads(self.net.store());
            clip_global_norm(&mut grads, self.config.train.clip_norm);
            (value, grads)
        };
        self.opt.apply(self.net.store_mut(), &grads)?;
        Ok(loss)
    }

    /// Shuffles with a generator derived from `(seed, epoch)` so a resumed
    /// run repeats the same batches.
    pub fn train_epoch(&mut self, data: &[Example]) -> Result<EpochStats> {
        if data.is_empty() {
            return Err(Error::invalid("no training examples"));
        }
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(combine(self.config.train.seed, self.epoch as u64));
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(self.config.train.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            losses.push(self.step(&batch, &mut rng)?);
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            batch_losses: losses,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Parameters, optimizer moments and enough metadata to resume.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let state = TrainState {
            epoch: self.epoch,
            optimizer_step: self.opt.step_count(),
            marginals: self.tm.marginals().to_vec(),
            config: self.config.clone(),
        };
        let mut ck = Checkpoint::new(self.config.hash(), serde_json::to_value(state)?);
        ck.push_params(self.net.store());
        let (m, v) = self.opt.moments();
        for ((p, m), v) in self.net.store().iter().zip(m).zip(v) {
            ck.push(format!("adam.m.{}", p.name()), m.clone());
            ck.push(format!("adam.v.{}", p.name()), v.clone());
        }
        Ok(ck)
    }

    /// Rebuilds a trainer; `expected` must hash like the checkpoint's config.
    pub fn resume(ck: &Checkpoint, expected: Option<&RunConfig>) -> Result<Self> {
        let state: TrainState = serde_json::from_value(ck.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        check_hash(ck, expected.unwrap_or(&state.config))?;
        let config = expected.cloned().unwrap_or(state.config);
        let mut t = Self::new(config, state.marginals)?;
        ck.load_params(t.net.store_mut())?;
        let get = |name: String| -> Result<Tensor> {
            ck.get(&name).cloned().ok_or_else(|| Error::Checkpoint(format!("missing `{name}`")))
        };
        let names: Vec<String> = t.net.store().iter().map(|p| p.name().to_string()).collect();
        let m = names.iter().map(|n| get(format!("adam.m.{n}"))).collect::<Result<Vec<_>>>()?;
        let v = names.iter().map(|n| get(format!("adam.v.{n}"))).collect::<Result<Vec<_>>>()?;
        t.opt.restore(state.optimizer_step, m, v)?;
        t.epoch = state.epoch;
        Ok(t)
    }
}

/// Rescales all gradients together so their joint L2 norm is at most
/// `max_norm` (no-op for `max_norm == 0`). Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= s));
    }
    norm
}

/// The trained network, its diffusion and the run configuration stored in
/// a checkpoint.
pub fn load_model(ck: &Checkpoint) -> Result<(Denoiser, TransitionModel, RunConfig)> {
    let state: TrainState =
        serde_json::from_value(ck.metadata.clone()).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    check_hash(ck, &state.config)?;
    let mut net = Denoiser::new(state.config.model.clone(), 0)?;
    ck.load_params(net.store_mut())?;
    let tm = state.config.diffusion.transition_model(state.marginals)?;
    Ok((net, tm, state.config))
}

/// The run configuration stored in a checkpoint.
pub fn checkpoint_config(ck: &Checkpoint) -> Result<RunConfig> {
    let state: TrainState =
        serde_json::from_value(ck.metadata.clone()).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    Ok(state.config)
}

pub fn check_hash(ck: &Checkpoint, config: &RunConfig) -> Result<()> {
    let expected = config.hash();
    if ck.config_hash != expected {
        return Err(Error::ConfigMismatch { expected, found: ck.config_hash.clone() });
    }
    Ok(())
}
