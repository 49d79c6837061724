use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Binds a parameter store onto a tape, creating each leaf once per tape.
pub struct Binder<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    leaves: RefCell<Vec<Option<Var<'t>>>>,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'t, 's> Binder<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore) -> Self {
        Self { tape, store, leaves: RefCell::new(vec![None; store.len()]), dropout: None }
    }

    /// Enables dropout with rate `p`; masks are drawn from `seed`.
    pub fn with_dropout(mut self, p: f64, seed: u64) -> Self {
        if p > 0.0 {
            self.dropout = Some((p, RefCell::new(ChaCha8Rng::seed_from_u64(seed))));
        }
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        let mut leaves = self.leaves.borrow_mut();
        *leaves[id.index()].get_or_insert_with(|| self.tape.param(self.store, id))
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Inverted dropout; the identity unless enabled.
    pub fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        let Some((p, rng)) = &self.dropout else { return Ok(x) };
        let keep = 1.0 / (1.0 - p);
        let mut rng = rng.borrow_mut();
        let mask = Tensor::from_fn(&x.shape(), |_| if rng.random::<f64>() < *p { 0.0 } else { keep });
        x.mul(self.tape.constant(mask))
    }
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Lin {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Lin {
    pub fn apply<'t>(&self, bind: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.linear(bind.param(self.w), self.b.map(|b| bind.param(b)))
    }

    /// Plain-tensor evaluation, used by oracles.
    #[cfg(test)]
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut y = x.matmul(store.get(self.w).value()).unwrap();
        if let Some(b) = self.b {
            let c = y.shape()[1];
            let bias = store.get(b).value().data().to_vec();
            y.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v += bias[i % c]);
        }
        y
    }
}

/// Layer norm with learned gain and shift.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Norm {
    pub g: ParamId,
    pub b: ParamId,
}

impl Norm {
    pub fn apply<'t>(&self, bind: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm()?.mul(bind.param(self.g))?.add(bind.param(self.b))
    }
}

/// Registers parameters under a name prefix.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Builder<'_> {
    pub fn lin(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Lin> {
        let w = self.store.add_weight(format!("{name}.w"), fan_in, fan_out, &mut self.rng)?;
        let b = if bias { Some(self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?) } else { None };
        Ok(Lin { w, b })
    }

    /// Zero-initialized map (FiLM starts as the identity).
    pub fn zero_lin(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Lin> {
        let w = self.store.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]))?;
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]))?;
        Ok(Lin { w, b: Some(b) })
    }

    pub fn norm(&mut self, name: &str, dim: usize) -> Result<Norm> {
        let g = self.store.add(format!("{name}.g"), Tensor::full(&[dim], 1.0))?;
        let b = self.store.add(format!("{name}.b"), Tensor::zeros(&[dim]))?;
        Ok(Norm { g, b })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EmbedParams {
    pub atom: Lin,
    pub edge: Lin,
    pub cond: Lin,
    pub y0: Lin,
    pub init1: Lin,
    pub init2: Lin,
}

#[derive(Debug, Clone)]
pub(crate) struct FilmParams {
    pub gamma_p: Lin,
    pub beta_p: Lin,
    pub gamma_l: Lin,
    pub beta_l: Lin,
}

#[derive(Debug, Clone)]
pub(crate) struct PrimalParams {
    pub ln1: Norm,
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
    pub edge_bias: Lin,
    pub edge_update: Lin,
    pub ln2: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
    pub pool: Lin,
}

#[derive(Debug, Clone)]
pub(crate) struct LineParams {
    pub ln1: Norm,
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
    pub ln2: Norm,
    pub ff1: Lin,
    pub ff2: Lin,
    pub pool_score: Lin,
    pub pool: Lin,
}

#[derive(Debug, Clone)]
pub(crate) struct CrossParams {
    pub q: Lin,
    pub k: Lin,
    pub v: Lin,
    pub o: Lin,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerParams {
    pub film: FilmParams,
    pub primal: PrimalParams,
    pub line: LineParams,
    pub atoms_from_bonds: CrossParams,
    pub bonds_from_atoms: CrossParams,
    pub fuse: Lin,
}

#[derive(Debug, Clone)]
pub(crate) struct DecodeParams {
    pub out1: Lin,
    pub out2: Lin,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub embed: EmbedParams,
    pub layers: Vec<LayerParams>,
    pub decode: DecodeParams,
}
