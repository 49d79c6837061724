use super::params::Binder;
use super::{timestep_embedding, Denoiser};
use crate::error::{Error, Result};
use crate::fastattn::{exact_attention_var, linear_attention_var, RandomFeatureMap};
use crate::molgraph::LineGraphIndex;
use crate::tensor::{Tensor, Var};

/// Splits `x` (rows x heads*dh) into per-head column blocks.
fn heads<'t>(x: Var<'t>, n_heads: usize) -> Result<Vec<Var<'t>>> {
    let dh = x.shape()[1] / n_heads;
    (0..n_heads).map(|h| x.narrow(1, h * dh, dh)).collect()
}

/// Row mean as a 1 x d matrix.
fn mean_row(x: Var<'_>) -> Result<Var<'_>> {
    let d = x.shape()[1];
    x.mean_axis(0)?.reshape(&[1, d])
}

/// Broadcasts a 1 x d row over every row of `x`: `(1 + gamma) * x + beta`.
fn modulate<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let d = gamma.shape()[1];
    let g = gamma.add_scalar(1.0)?.reshape(&[d])?;
    x.mul(g)?.add(beta.reshape(&[d])?)
}

impl Denoiser {
    pub fn embed_atoms<'t>(&self, bind: &Binder<'t, '_>, onehot: Var<'t>) -> Result<Var<'t>> {
        self.layout.embed.atom.apply(bind, onehot)
    }

    /// `E` embedding for all N*N ordered pairs (row `i * n + j`).
    pub fn embed_edges<'t>(&self, bind: &Binder<'t, '_>, onehot: Var<'t>) -> Result<Var<'t>> {
        self.layout.embed.edge.apply(bind, onehot)
    }

    /// Initial global state from the conditioning vector and the timestep.
    pub fn embed_global<'t>(
        &self,
        bind: &Binder<'t, '_>,
        cond: &[f64],
        t: usize,
        steps: usize,
    ) -> Result<Var<'t>> {
        let e = &self.layout.embed;
        let c = bind.constant(Tensor::new(vec![1, cond.len()], cond.to_vec())?);
        let c = e.cond.apply(bind, c)?;
        let time = timestep_embedding(t, steps, self.config.time_dim);
        let time = bind.constant(Tensor::new(vec![1, time.len()], time)?);
        e.y0.apply(bind, Var::concat(&[c, time], 1)?)
    }

    /// Bond-node initialization: a two-layer GELU network on the pair's edge
    /// embedding and both endpoint states, averaged over the two endpoint
    /// orders so the result does not depend on atom numbering.
    pub fn init_line_nodes<'t>(
        &self,
        bind: &Binder<'t, '_>,
        edges: Var<'t>,
        h0: Var<'t>,
        lg: &LineGraphIndex,
    ) -> Result<Var<'t>> {
        let n = lg.n_atoms();
        let (de, dx) = (self.config.d_e, self.config.d_x);
        if edges.shape() != [n * n, de] || h0.shape() != [n, dx] {
            return Err(Error::shape(format!(
                "init_line_nodes: edges {:?}, atoms {:?} for n = {n}",
                edges.shape(),
                h0.shape()
            )));
        }
        let e = &self.layout.embed;
        let rows: Vec<usize> = lg.pairs().iter().map(|&(i, j)| i * n + j).collect();
        let is: Vec<usize> = lg.pairs().iter().map(|p| p.0).collect();
        let js: Vec<usize> = lg.pairs().iter().map(|p| p.1).collect();
        let ee = edges.index_select(&rows)?;
        let hi = h0.index_select(&is)?;
        let hj = h0.index_select(&js)?;
        let f = |x: Var<'t>| -> Result<Var<'t>> { e.init2.apply(bind, e.init1.apply(bind, x)?.gelu()?) };
        let a = f(Var::concat(&[ee, hi, hj], 1)?)?;
        let b = f(Var::concat(&[ee, hj, hi], 1)?)?;
        a.add(b)?.scale(0.5)
    }

    /// FiLM from the global state onto both streams.
    pub fn film<'t>(
        &self,
        bind: &Binder<'t, '_>,
        layer: usize,
        h: Var<'t>,
        z: Var<'t>,
        y: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let p = &self.layout.layers[layer].film;
        let h = modulate(h, p.gamma_p.apply(bind, y)?, p.beta_p.apply(bind, y)?)?;
        let z = modulate(z, p.gamma_l.apply(bind, y)?, p.beta_l.apply(bind, y)?)?;
        Ok((h, z))
    }

    /// Edge-modulated self-attention over atoms. Returns the new atom states,
    /// the updated edge features (N*N rows) and the pooled global term `y_P`.
    pub fn primal_layer<'t>(
        &self,
        bind: &Binder<'t, '_>,
        layer: usize,
        h: Var<'t>,
        edges: Var<'t>,
        n: usize,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let p = &self.layout.layers[layer].primal;
        let nh = self.config.heads_primal;
        if h.shape() != [n, self.config.d_x] || edges.shape() != [n * n, self.config.d_e] {
            return Err(Error::shape(format!("primal layer: h {:?}, edges {:?}", h.shape(), edges.shape())));
        }
        let dh = self.config.d_x / nh;
        let x = p.ln1.apply(bind, h)?;
        let q = heads(p.q.apply(bind, x)?, nh)?;
        let k = heads(p.k.apply(bind, x)?, nh)?;
        let v = heads(p.v.apply(bind, x)?, nh)?;
        let bias = p.edge_bias.apply(bind, edges)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(nh);
        let mut scores = Vec::with_capacity(nh);
        for hd in 0..nh {
            let s = q[hd]
                .matmul(k[hd].transpose()?)?
                .scale(scale)?
                .add(bias.narrow(1, hd, 1)?.reshape(&[n, n])?)?;
            outs.push(s.softmax()?.matmul(v[hd])?);
            scores.push(s.reshape(&[n * n, 1])?);
        }
        let att = p.o.apply(bind, Var::concat(&outs, 1)?)?;
        let h = h.add(bind.dropout(att)?)?;
        let ff = p.ff2.apply(bind, p.ff1.apply(bind, p.ln2.apply(bind, h)?)?.gelu()?)?;
        let h = h.add(bind.dropout(ff)?)?;

        let s = Var::concat(&scores, 1)?;
        let swap: Vec<usize> = (0..n * n).map(|r| (r % n) * n + r / n).collect();
        let sym = s.add(s.index_select(&swap)?)?.scale(0.5)?;
        let edges = edges.add(p.edge_update.apply(bind, sym)?)?;
        let y_p = p.pool.apply(bind, mean_row(h)?)?;
        Ok((h, edges, y_p))
    }

    /// Multi-head self-attention over bond nodes before the output
    /// projection, with the configured kernel.
    pub fn line_attention<'t>(
        &self,
        bind: &Binder<'t, '_>,
        layer: usize,
        x: Var<'t>,
        features: Option<&RandomFeatureMap>,
    ) -> Result<Var<'t>> {
        let p = &self.layout.layers[layer].line;
        let nh = self.config.heads_line;
        let q = heads(p.q.apply(bind, x)?, nh)?;
        let k = heads(p.k.apply(bind, x)?, nh)?;
        let v = heads(p.v.apply(bind, x)?, nh)?;
        let outs = (0..nh)
            .map(|h| match features {
                Some(rf) => linear_attention_var(q[h], k[h], v[h], rf),
                None => exact_attention_var(q[h], k[h], v[h]),
            })
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&outs, 1)
    }

    /// Pre-norm self-attention and feed-forward on the bond nodes. Returns
    /// the new states and `y_L`, a projection of their attention-pooled mean.
    pub fn line_layer<'t>(
        &self,
        bind: &Binder<'t, '_>,
        layer: usize,
        z: Var<'t>,
        features: Option<&RandomFeatureMap>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let p = &self.layout.layers[layer].line;
        if z.shape().len() != 2 || z.shape()[1] != self.config.d_e {
            return Err(Error::shape(format!("line layer: z {:?}", z.shape())));
        }
        let att = self.line_attention(bind, layer, p.ln1.apply(bind, z)?, features)?;
        let z = z.add(bind.dropout(p.o.apply(bind, att)?)?)?;
        let ff = p.ff2.apply(bind, p.ff1.apply(bind, p.ln2.apply(bind, z)?)?.gelu()?)?;
        let z = z.add(bind.dropout(ff)?)?;
        let w = p.pool_score.apply(bind, z)?.transpose()?.softmax()?;
        let y_l = p.pool.apply(bind, w.matmul(z)?)?;
        Ok((z, y_l))
    }

    /// Each atom attends over exactly its incident bond nodes.
    pub fn cross_attn_atoms_from_bonds<'t>(
        &self,
        bind: &Binder<'t, '_>,
        layer: usize,
        h: Var<'t>,
        z: Var<'t>,
        lg: &LineGraphIndex,
    ) -> Result<Var<'t>> {
        let (n, m) = (lg.n_atoms(), lg.n_pairs());
        if h.shape() != [n, self.config.d_x] || z.shape() != [m, self.config.d_e] {
            return Err(Error::shape(format!("atoms-from-bonds: h {:?}, z {:?}", h.shape(), z.shape())));
        }
        let p = &self.layout.layers[layer].atoms_from_bonds;
        let nh = self.config.heads_cross;
        let scale = 1.0 / ((self.config.d_x / nh) as f64).sqrt();
        let q = heads(p.q.apply(bind, h)?, nh)?;
        let k = heads(p.k.apply(bind, z)?, nh)?;
        let v = heads(p.v.apply(bind, z)?, nh)?;
        let mut outs = Vec::with_capacity(nh);
        for hd in 0..nh {
            let a = q[hd].matmul(k[hd].transpose()?)?.scale(scale)?.masked_softmax(lg.incidence())?;
            outs.push(a.matmul(v[hd])?);
        }
        h.add(p.o.apply(bind, Var::concat(&outs, 1)?)?)
    }

    /// Each bond node attends over its two endpoint atoms. Also returns the
    /// head-averaged endpoint weights (M x 2; columns `i`, `j`).
    pub fn cross_attn_bonds_from_atoms<'t>(
        &self,
        bind: &Binder<'t, '_>,
        layer: usize,
        z: Var<'t>,
        h: Var<'t>,
        lg: &LineGraphIndex,
    ) -> Result<(Var<'t>, Tensor)> {
        let (n, m) = (lg.n_atoms(), lg.n_pairs());
        let (dx, nh) = (self.config.d_x, self.config.heads_cross);
        if h.shape() != [n, dx] || z.shape() != [m, self.config.d_e] {
            return Err(Error::shape(format!("bonds-from-atoms: z {:?}, h {:?}", z.shape(), h.shape())));
        }
        let p = &self.layout.layers[layer].bonds_from_atoms;
        let dh = dx / nh;
        let is: Vec<usize> = lg.pairs().iter().map(|p| p.0).collect();
        let js: Vec<usize> = lg.pairs().iter().map(|p| p.1).collect();
        let q = p.q.apply(bind, z)?.reshape(&[m, nh, dh])?;
        let k = p.k.apply(bind, h)?;
        let v = p.v.apply(bind, h)?;
        let score = |idx: &[usize]| -> Result<Var<'t>> {
            let kk = k.index_select(idx)?.reshape(&[m, nh, dh])?;
            q.mul(kk)?.sum_axis(2)?.scale(1.0 / (dh as f64).sqrt())?.reshape(&[m, nh, 1])
        };
        let a = Var::concat(&[score(&is)?, score(&js)?], 2)?.softmax()?;
        let vi = v.index_select(&is)?.reshape(&[m, nh, dh])?;
        let vj = v.index_select(&js)?.reshape(&[m, nh, dh])?;
        let mixed = a.narrow(2, 0, 1)?.mul(vi)?.add(a.narrow(2, 1, 1)?.mul(vj)?)?.reshape(&[m, dx])?;
        let z = z.add(p.o.apply(bind, mixed)?)?;

        let av = a.value();
        let mut alpha = Tensor::zeros(&[m, 2]);
        for u in 0..m {
            for hd in 0..nh {
                for side in 0..2 {
                    alpha.data_mut()[u * 2 + side] += av.data()[(u * nh + hd) * 2 + side] / nh as f64;
                }
            }
        }
        Ok((z, alpha))
    }

    /// `y <- LN(y + W_g [y_P | y_L | mean h | mean z])`.
    #[allow(clippy::too_many_arguments)]
    pub fn global_fusion<'t>(
        &self,
        bind: &Binder<'t, '_>,
        layer: usize,
        y: Var<'t>,
        y_p: Var<'t>,
        y_l: Var<'t>,
        h: Var<'t>,
        z: Var<'t>,
    ) -> Result<Var<'t>> {
        let w = &self.layout.layers[layer].fuse;
        let cat = Var::concat(&[y_p, y_l, mean_row(h)?, mean_row(z)?], 1)?;
        y.add(w.apply(bind, cat)?)?.layer_norm()
    }

    /// Pair logits: an MLP on the final bond states plus the one-hot noisy
    /// class as a residual in logit space.
    pub fn decode_edges<'t>(&self, bind: &Binder<'t, '_>, z: Var<'t>, noisy_onehot: Var<'t>) -> Result<Var<'t>> {
        let d = &self.layout.decode;
        if z.shape()[0] != noisy_onehot.shape()[0] {
            return Err(Error::shape(format!(
                "decode: {} bond states, {} noisy rows",
                z.shape()[0],
                noisy_onehot.shape()[0]
            )));
        }
        d.out2.apply(bind, d.out1.apply(bind, z)?.gelu()?)?.add(noisy_onehot)
    }
}
