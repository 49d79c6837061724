//! Positive orthogonal random features (FAVOR+) for linear-time softmax
//! attention, with the exact quadratic kernel as reference.
//!
//! Both kernels see queries and keys scaled by `d^{-1/4}` each, so the
//! kernel being approximated is exactly `exp(q.k / sqrt(d))`.

mod bench;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{softmax_rows, Tape, Tensor, Var};

pub use bench::{bench_attention, write_bench_csv, BenchRow, TrackingAllocator, BENCH_CSV_HEADER};

/// Smallest admissible normalizer in [`linear_attention`].
pub const MIN_DENOMINATOR: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKernel {
    Exact,
    Linear,
}

impl std::str::FromStr for AttentionKernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "softmax" => Ok(Self::Exact),
            "linear" | "favor" => Ok(Self::Linear),
            _ => Err(Error::invalid(format!("unknown attention kernel `{s}`"))),
        }
    }
}

impl std::fmt::Display for AttentionKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Exact => "softmax",
            Self::Linear => "linear",
        })
    }
}

/// `R x d` projection with blockwise-orthogonal rows whose norms follow a
/// chi distribution with `d` degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomFeatureMap {
    features: Tensor,
    seed: u64,
}

impl RandomFeatureMap {
    pub fn new(n_features: usize, d_head: usize, seed: u64) -> Result<Self> {
        if n_features == 0 || d_head == 0 {
            return Err(Error::invalid("random feature map needs R >= 1 and d >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let chi2 = ChiSquared::new(d_head as f64).expect("positive degrees of freedom");
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n_features);
        while rows.len() < n_features {
            let block = orthonormal_block(d_head, &mut rng);
            for mut r in block.into_iter().take(n_features - rows.len()) {
                let norm = chi2.sample(&mut rng).sqrt();
                r.iter_mut().for_each(|x| *x *= norm);
                rows.push(r);
            }
        }
        let features = Tensor::new(vec![n_features, d_head], rows.concat())?;
        Ok(Self { features, seed })
    }

    pub fn n_features(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn d_head(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn matrix(&self) -> &Tensor {
        &self.features
    }
}

/// Gram-Schmidt (applied twice) on a square Gaussian matrix.
fn orthonormal_block(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for r in &rows {
                let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows
}

/// `phi(x)_r = exp(w_r . x - |x|^2 / 2) / sqrt(R)` for each row of `x`.
pub fn feature_map(x: &Tensor, rf: &RandomFeatureMap) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if d != rf.d_head() {
        return Err(Error::shape(format!("feature map expects d = {}, got {d}", rf.d_head())));
    }
    let r = rf.n_features();
    let proj = x.matmul(&rf.features.transpose2()?)?;
    let norm = 1.0 / (r as f64).sqrt();
    let mut out = proj.into_data();
    for i in 0..n {
        let half_sq = 0.5 * x.row(i).iter().map(|a| a * a).sum::<f64>();
        for v in &mut out[i * r..(i + 1) * r] {
            *v = (*v - half_sq).exp() * norm;
        }
    }
    Tensor::new(vec![n, r], out)
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(usize, usize, usize)> {
    let (m, d) = q.dims2()?;
    let (mk, dk) = k.dims2()?;
    let (mv, dv) = v.dims2()?;
    if d != dk || mk != mv {
        return Err(Error::shape(format!(
            "attention Q {:?} K {:?} V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    Ok((m, mk, dv))
}

/// Scaled dot-product softmax attention; materializes the `M x M` scores.
pub fn exact_softmax_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    let d = q.shape()[1];
    let scores = q.matmul(&k.transpose2()?)?.map(|x| x / (d as f64).sqrt());
    softmax_rows(&scores, None)?.matmul(v)
}

/// `phi(Q) [phi(K)^T V] / phi(Q) [phi(K)^T 1]`; never forms an `M x M` matrix.
pub fn linear_attention(q: &Tensor, k: &Tensor, v: &Tensor, rf: &RandomFeatureMap) -> Result<Tensor> {
    let (m, _, dv) = check_qkv(q, k, v)?;
    let d = q.shape()[1];
    let s = (d as f64).powf(-0.25);
    let fq = feature_map(&q.map(|x| x * s), rf)?;
    let fk = feature_map(&k.map(|x| x * s), rf)?;
    let kv = fk.transpose2()?.matmul(v)?;
    let r = rf.n_features();
    let mut ksum = vec![0.0; r];
    for row in 0..fk.shape()[0] {
        for (a, b) in ksum.iter_mut().zip(fk.row(row)) {
            *a += b;
        }
    }
    let mut out = fq.matmul(&kv)?.into_data();
    for i in 0..m {
        let den: f64 = fq.row(i).iter().zip(&ksum).map(|(a, b)| a * b).sum();
        if !(den >= MIN_DENOMINATOR) {
            return Err(Error::NumericalUnderflow(format!(
                "linear attention normalizer {den:e} for query {i}"
            )));
        }
        out[i * dv..(i + 1) * dv].iter_mut().for_each(|x| *x /= den);
    }
    Tensor::new(vec![m, dv], out)
}

/// Recorded counterpart of [`exact_softmax_attention`] for one head.
pub fn exact_attention_var<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let d = q.shape()[1];
    q.matmul(k.transpose()?)?.scale(1.0 / (d as f64).sqrt())?.softmax()?.matmul(v)
}

fn feature_map_var<'t>(x: Var<'t>, wt: Var<'t>, r: usize) -> Result<Var<'t>> {
    let n = x.shape()[0];
    let half_sq = x.mul(x)?.sum_axis(1)?.reshape(&[n, 1])?.scale(0.5)?;
    x.matmul(wt)?.sub(half_sq)?.exp()?.scale(1.0 / (r as f64).sqrt())
}

/// Recorded counterpart of [`linear_attention`] for one head.
pub fn linear_attention_var<'t>(
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    rf: &RandomFeatureMap,
) -> Result<Var<'t>> {
    let tape: &Tape = q.tape();
    let d = q.shape()[1];
    if d != rf.d_head() {
        return Err(Error::shape(format!("feature map expects d = {}, got {d}", rf.d_head())));
    }
    let r = rf.n_features();
    let s = (d as f64).powf(-0.25);
    let wt = tape.constant(rf.features.transpose2()?);
    let fq = feature_map_var(q.scale(s)?, wt, r)?;
    let fk = feature_map_var(k.scale(s)?, wt, r)?;
    let kv = fk.transpose()?.matmul(v)?;
    let ksum = fk.sum_axis(0)?.reshape(&[r, 1])?;
    let den = fq.matmul(ksum)?;
    if let Some(i) = den.value().data().iter().position(|&x| !(x >= MIN_DENOMINATOR)) {
        return Err(Error::NumericalUnderflow(format!("linear attention normalizer for query {i}")));
    }
    fq.matmul(kv)?.div(den)
}
