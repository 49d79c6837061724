//! The dual-stream bond denoiser.
//!
//! Atoms carry states `h` (N x d_x), every unordered atom pair carries a
//! line-graph state `z` (M x d_e) and the molecule carries a global state
//! `y` (1 x d_y). Each layer runs FiLM, the atom stream, the bond stream,
//! both incidence cross-attentions and the global fusion in that order.

mod layers;
mod params;
#[cfg(test)]
mod tests;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fastattn::{AttentionKernel, RandomFeatureMap};
use crate::molgraph::{LineGraphIndex, MolecularGraph};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub use params::Binder;
use params::{
    Builder, CrossParams, DecodeParams, EmbedParams, FilmParams, LayerParams, Layout, LineParams,
    PrimalParams,
};

/// Logit given to non-zero classes on the diagonal; `exp` of it is exactly 0.
pub const DIAGONAL_SENTINEL: f64 = -1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub n_layers: usize,
    pub d_x: usize,
    pub d_e: usize,
    pub d_y: usize,
    pub heads_primal: usize,
    pub heads_line: usize,
    pub heads_cross: usize,
    pub ffn_x: usize,
    pub ffn_e: usize,
    pub n_bond_classes: usize,
    pub n_atom_types: usize,
    /// Length of the conditioning vector (fingerprint bits).
    pub cond_dim: usize,
    /// Width of the sinusoidal timestep embedding; even.
    pub time_dim: usize,
    pub kernel: AttentionKernel,
    /// Random features for the linear kernel.
    pub n_features: usize,
    pub feature_seed: u64,
    pub dropout: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DenoiserConfig {
    /// CPU-sized default.
    pub fn desk() -> Self {
        Self {
            n_layers: 3,
            d_x: 64,
            d_e: 32,
            d_y: 128,
            heads_primal: 4,
            heads_line: 4,
            heads_cross: 4,
            ffn_x: 128,
            ffn_e: 64,
            n_bond_classes: 5,
            n_atom_types: 5,
            cond_dim: 2048,
            time_dim: 16,
            kernel: AttentionKernel::Exact,
            n_features: 128,
            feature_seed: 0,
            dropout: 0.0,
        }
    }

    /// Full-size configuration.
    pub fn reference() -> Self {
        Self {
            n_layers: 5,
            d_x: 256,
            d_e: 64,
            d_y: 1024,
            heads_primal: 8,
            heads_line: 8,
            heads_cross: 8,
            ffn_x: 256,
            ffn_e: 128,
            kernel: AttentionKernel::Linear,
            dropout: 0.1,
            time_dim: 64,
            ..Self::desk()
        }
    }

    /// A very small network for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            n_layers: 2,
            d_x: 8,
            d_e: 6,
            d_y: 8,
            heads_primal: 2,
            heads_line: 2,
            heads_cross: 2,
            ffn_x: 10,
            ffn_e: 8,
            cond_dim: 16,
            time_dim: 4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.n_layers == 0 {
            return bad("need at least one layer".into());
        }
        for (name, v) in [
            ("d_x", self.d_x),
            ("d_e", self.d_e),
            ("d_y", self.d_y),
            ("ffn_x", self.ffn_x),
            ("ffn_e", self.ffn_e),
            ("heads_primal", self.heads_primal),
            ("heads_line", self.heads_line),
            ("heads_cross", self.heads_cross),
            ("n_atom_types", self.n_atom_types),
            ("cond_dim", self.cond_dim),
            ("n_features", self.n_features),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_bond_classes < 2 {
            return bad("need at least two bond classes".into());
        }
        if self.d_x % self.heads_primal != 0 || self.d_x % self.heads_cross != 0 {
            return bad(format!("d_x = {} not divisible by the atom/cross head counts", self.d_x));
        }
        if self.d_e % self.heads_line != 0 {
            return bad(format!("d_e = {} not divisible by {} line heads", self.d_e, self.heads_line));
        }
        if self.time_dim % 2 != 0 {
            return bad("time_dim must be even".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn line_head_dim(&self) -> usize {
        self.d_e / self.heads_line
    }
}

/// One noisy molecule to denoise.
#[derive(Debug, Clone, Copy)]
pub struct DenoiserInput<'a> {
    /// Atom types plus the noisy bond classes `E_t`.
    pub noisy: &'a MolecularGraph,
    /// Conditioning vector of length `cond_dim`.
    pub cond: &'a [f64],
    pub t: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Enables dropout with masks drawn from this seed.
    pub dropout_seed: Option<u64>,
    /// Redraws the linear-kernel feature map for this pass.
    pub feature_seed: Option<u64>,
}

pub struct DenoiserOutput<'t> {
    /// Clean-bond logits per unordered pair (M x classes), pairs in
    /// [`LineGraphIndex`] order.
    pub logits: Var<'t>,
    pub line_graph: LineGraphIndex,
    /// Final-layer endpoint attention (M x 2, mean over heads): column 0 is
    /// the weight on the lower-index atom `i`, column 1 on `j`.
    pub endpoint_attention: Tensor,
}

impl DenoiserOutput<'_> {
    /// Symmetric N x N x classes logits; diagonal entries say "no bond" with
    /// certainty.
    pub fn dense_logits(&self) -> Tensor {
        dense_logits(&self.logits.value(), &self.line_graph)
    }
}

pub fn dense_logits(pair_logits: &Tensor, lg: &LineGraphIndex) -> Tensor {
    let n = lg.n_atoms();
    let c = pair_logits.shape()[1];
    let mut out = Tensor::zeros(&[n, n, c]);
    let d = out.data_mut();
    for i in 0..n {
        for k in 1..c {
            d[(i * n + i) * c + k] = DIAGONAL_SENTINEL;
        }
    }
    for (u, &(i, j)) in lg.pairs().iter().enumerate() {
        let row = pair_logits.row(u);
        d[(i * n + j) * c..(i * n + j + 1) * c].copy_from_slice(row);
        d[(j * n + i) * c..(j * n + i + 1) * c].copy_from_slice(row);
    }
    out
}

/// Sinusoidal features of `t / steps`.
pub fn timestep_embedding(t: usize, steps: usize, dim: usize) -> Vec<f64> {
    let x = 1000.0 * t as f64 / steps.max(1) as f64;
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let freq = 10_000f64.powf(-(k as f64) / half as f64);
        out.push((x * freq).sin());
    }
    for k in 0..half {
        let freq = 10_000f64.powf(-(k as f64) / half as f64);
        out.push((x * freq).cos());
    }
    out
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    store: ParamStore,
    layout: Layout,
    features: Option<RandomFeatureMap>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let layout = build_layout(&config, &mut store, seed)?;
        let features = match config.kernel {
            AttentionKernel::Linear => {
                Some(RandomFeatureMap::new(config.n_features, config.line_head_dim(), config.feature_seed)?)
            }
            AttentionKernel::Exact => None,
        };
        Ok(Self { config, store, layout, features })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Moves the parameters out, e.g. to differentiate them while the
    /// network itself is borrowed; pair with [`Denoiser::restore_store`].
    pub fn take_store(&mut self) -> ParamStore {
        std::mem::take(&mut self.store)
    }

    pub fn restore_store(&mut self, store: ParamStore) -> Result<()> {
        let fresh = Denoiser::new(self.config.clone(), 0)?;
        if fresh.store.len() != store.len()
            || fresh.store.iter().zip(store.iter()).any(|(a, b)| a.name() != b.name() || a.value().shape() != b.value().shape())
        {
            return Err(Error::invalid("parameter store does not match this architecture"));
        }
        self.store = store;
        Ok(())
    }

    pub fn n_parameters(&self) -> usize {
        self.store.n_scalars()
    }

    /// Switches the bond-stream kernel, keeping the weights.
    pub fn set_kernel(&mut self, kernel: AttentionKernel) -> Result<()> {
        self.features = match kernel {
            AttentionKernel::Linear => Some(RandomFeatureMap::new(
                self.config.n_features,
                self.config.line_head_dim(),
                self.config.feature_seed,
            )?),
            AttentionKernel::Exact => None,
        };
        self.config.kernel = kernel;
        Ok(())
    }

    fn feature_map(&self, seed: Option<u64>) -> Result<Option<RandomFeatureMap>> {
        match (self.config.kernel, seed) {
            (AttentionKernel::Exact, _) => Ok(None),
            (AttentionKernel::Linear, Some(s)) => {
                Ok(Some(RandomFeatureMap::new(self.config.n_features, self.config.line_head_dim(), s)?))
            }
            (AttentionKernel::Linear, None) => Ok(self.features.clone()),
        }
    }

    /// Binds parameters for one pass, honoring the dropout option.
    pub fn binder<'t, 's>(&'s self, tape: &'t Tape, opts: &ForwardOptions) -> Binder<'t, 's> {
        let b = Binder::new(tape, &self.store);
        match opts.dropout_seed {
            Some(seed) => b.with_dropout(self.config.dropout, seed),
            None => b,
        }
    }

    /// Runs the network on one noisy molecule (N >= 2).
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        input: &DenoiserInput<'_>,
        opts: &ForwardOptions,
    ) -> Result<DenoiserOutput<'t>> {
        let bind = self.binder(tape, opts);
        let features = self.feature_map(opts.feature_seed)?;
        self.forward_bound(&bind, input, features.as_ref())
    }

    /// Forward pass with parameters from `bind` (which may wrap a store
    /// other than this network's own).
    pub fn forward_bound<'t>(
        &self,
        bind: &Binder<'t, '_>,
        input: &DenoiserInput<'_>,
        features: Option<&RandomFeatureMap>,
    ) -> Result<DenoiserOutput<'t>> {
        let cfg = &self.config;
        let g = input.noisy;
        let n = g.n_atoms();
        if n < 2 {
            return Err(Error::UnsupportedSize(format!("denoiser needs at least 2 atoms, got {n}")));
        }
        if input.cond.len() != cfg.cond_dim {
            return Err(Error::shape(format!(
                "conditioning vector has {} entries, config expects {}",
                input.cond.len(),
                cfg.cond_dim
            )));
        }
        if input.t == 0 || input.t > input.steps {
            return Err(Error::invalid(format!("timestep {} outside 1..={}", input.t, input.steps)));
        }
        if let Some(&a) = g.atom_types().iter().find(|&&a| a >= cfg.n_atom_types) {
            return Err(Error::invalid(format!("atom type {a} outside the {} known types", cfg.n_atom_types)));
        }
        if self.config.kernel == AttentionKernel::Linear && features.is_none() {
            return Err(Error::invalid("linear kernel needs a feature map"));
        }
        let lg = LineGraphIndex::new(n)?;
        let c = cfg.n_bond_classes;

        let atom_onehot = Tensor::from_fn(&[n, cfg.n_atom_types], |k| {
            f64::from(g.atom_type(k / cfg.n_atom_types) == k % cfg.n_atom_types)
        });
        let edge_onehot = Tensor::from_fn(&[n * n, c], |k| {
            let (ij, cls) = (k / c, k % c);
            let (i, j) = (ij / n, ij % n);
            f64::from(i != j && g.bond(i, j) as usize == cls)
        });
        let pair_onehot = Tensor::from_fn(&[lg.n_pairs(), c], |k| {
            let (i, j) = lg.pair(k / c);
            f64::from(g.bond(i, j) as usize == k % c)
        });

        let h0 = self.embed_atoms(bind, bind.constant(atom_onehot))?;
        let mut e = self.embed_edges(bind, bind.constant(edge_onehot))?;
        let mut y = self.embed_global(bind, input.cond, input.t, input.steps)?;
        let mut h = h0;
        let mut z = self.init_line_nodes(bind, e, h0, &lg)?;
        let mut alpha = Tensor::zeros(&[lg.n_pairs(), 2]);
        for l in 0..cfg.n_layers {
            let (h1, z1) = self.film(bind, l, h, z, y)?;
            let (h2, e2, y_p) = self.primal_layer(bind, l, h1, e, n)?;
            let (z2, y_l) = self.line_layer(bind, l, z1, features)?;
            let h3 = self.cross_attn_atoms_from_bonds(bind, l, h2, z2, &lg)?;
            let (z3, a) = self.cross_attn_bonds_from_atoms(bind, l, z2, h2, &lg)?;
            y = self.global_fusion(bind, l, y, y_p, y_l, h3, z3)?;
            h = h3;
            z = z3;
            e = e2;
            alpha = a;
        }
        let logits = self.decode_edges(bind, z, bind.constant(pair_onehot))?;
        Ok(DenoiserOutput { logits, line_graph: lg, endpoint_attention: alpha })
    }
}

fn build_layout(cfg: &DenoiserConfig, store: &mut ParamStore, seed: u64) -> Result<Layout> {
    let mut b = Builder { store, rng: ChaCha8Rng::seed_from_u64(seed) };
    let (dx, de, dy) = (cfg.d_x, cfg.d_e, cfg.d_y);
    let embed = EmbedParams {
        atom: b.lin("embed.atom", cfg.n_atom_types, dx, true)?,
        edge: b.lin("embed.edge", cfg.n_bond_classes, de, false)?,
        cond: b.lin("embed.cond", cfg.cond_dim, dy, true)?,
        y0: b.lin("embed.y0", dy + cfg.time_dim, dy, true)?,
        init1: b.lin("embed.init1", de + 2 * dx, de, true)?,
        init2: b.lin("embed.init2", de, de, true)?,
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        let film = FilmParams {
            gamma_p: b.zero_lin(&p("film.gamma_p"), dy, dx)?,
            beta_p: b.zero_lin(&p("film.beta_p"), dy, dx)?,
            gamma_l: b.zero_lin(&p("film.gamma_l"), dy, de)?,
            beta_l: b.zero_lin(&p("film.beta_l"), dy, de)?,
        };
        let primal = PrimalParams {
            ln1: b.norm(&p("primal.ln1"), dx)?,
            q: b.lin(&p("primal.q"), dx, dx, false)?,
            k: b.lin(&p("primal.k"), dx, dx, false)?,
            v: b.lin(&p("primal.v"), dx, dx, false)?,
            o: b.lin(&p("primal.o"), dx, dx, true)?,
            edge_bias: b.lin(&p("primal.edge_bias"), de, cfg.heads_primal, false)?,
            edge_update: b.lin(&p("primal.edge_update"), cfg.heads_primal, de, false)?,
            ln2: b.norm(&p("primal.ln2"), dx)?,
            ff1: b.lin(&p("primal.ff1"), dx, cfg.ffn_x, true)?,
            ff2: b.lin(&p("primal.ff2"), cfg.ffn_x, dx, true)?,
            pool: b.lin(&p("primal.pool"), dx, dy, true)?,
        };
        let line = LineParams {
            ln1: b.norm(&p("line.ln1"), de)?,
            q: b.lin(&p("line.q"), de, de, false)?,
            k: b.lin(&p("line.k"), de, de, false)?,
            v: b.lin(&p("line.v"), de, de, false)?,
            o: b.lin(&p("line.o"), de, de, true)?,
            ln2: b.norm(&p("line.ln2"), de)?,
            ff1: b.lin(&p("line.ff1"), de, cfg.ffn_e, true)?,
            ff2: b.lin(&p("line.ff2"), cfg.ffn_e, de, true)?,
            pool_score: b.lin(&p("line.pool_score"), de, 1, false)?,
            pool: b.lin(&p("line.pool"), de, dy, true)?,
        };
        let atoms_from_bonds = CrossParams {
            q: b.lin(&p("xab.q"), dx, dx, false)?,
            k: b.lin(&p("xab.k"), de, dx, false)?,
            v: b.lin(&p("xab.v"), de, dx, false)?,
            o: b.lin(&p("xab.o"), dx, dx, true)?,
        };
        let bonds_from_atoms = CrossParams {
            q: b.lin(&p("xba.q"), de, dx, false)?,
            k: b.lin(&p("xba.k"), dx, dx, false)?,
            v: b.lin(&p("xba.v"), dx, dx, false)?,
            o: b.lin(&p("xba.o"), dx, de, true)?,
        };
        let fuse = b.lin(&p("fuse"), 2 * dy + dx + de, dy, false)?;
        layers.push(LayerParams { film, primal, line, atoms_from_bonds, bonds_from_atoms, fuse });
    }
    let decode = DecodeParams {
        out1: b.lin("decode.out1", de, de, true)?,
        out2: b.lin("decode.out2", de, cfg.n_bond_classes, true)?,
    };
    Ok(Layout { embed, layers, decode })
}
