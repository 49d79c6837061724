//! Central finite-difference checks against the tape's analytic gradients.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;
/// Step for the fourth-order stencil used by [`check_params`].
pub const STENCIL_STEP: f64 = 1e-3;

/// Norm-wise relative error `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.frobenius().max(numeric.frobenius());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function of several tensors.
pub fn numeric_gradients(
    inputs: &[Tensor],
    f: &dyn Fn(&[Tensor]) -> Result<f64>,
    step: f64,
) -> Result<Vec<Tensor>> {
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].shape());
        for i in 0..inputs[k].len() {
            let x0 = work[k].data()[i];
            work[k].data_mut()[i] = x0 + step;
            let plus = f(&work)?;
            work[k].data_mut()[i] = x0 - step;
            let minus = f(&work)?;
            work[k].data_mut()[i] = x0;
            g.data_mut()[i] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Builds `f` on a fresh tape with every input as a differentiable leaf and
/// returns the worst relative error over inputs.
pub fn check<F>(inputs: &[Tensor], f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    let scalar = |xs: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = xs.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, &vs)?.value().item()
    };
    let numeric = numeric_gradients(inputs, &scalar, FD_STEP)?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max))
}

/// Like [`check`] but also differentiates the parameters in `store`. The
/// closure receives the store so it can bind parameters onto the tape. At
/// most `max_entries` entries per tensor are probed (evenly strided); the
/// error is computed over the probed entries. Derivatives use the five-point
/// stencil, whose O(h^4) truncation lets a larger step keep round-off small
/// on deep compositions.
pub fn check_params<F>(store: &mut ParamStore, inputs: &[Tensor], max_entries: usize, f: F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &ParamStore, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let loss = f(&tape, store, &vars)?;
    let grads = tape.backward(loss)?;
    let input_grads: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();
    let param_grads = grads.param_grads(store);
    drop(tape);

    let probe = |len: usize| -> Vec<usize> {
        if len <= max_entries {
            (0..len).collect()
        } else {
            (0..max_entries).map(|k| k * len / max_entries).collect()
        }
    };
    let eval = |store: &ParamStore, xs: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        let vs: Vec<Var<'_>> = xs.iter().map(|x| t.constant(x.clone())).collect();
        f(&t, store, &vs)?.value().item()
    };
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for k in 0..inputs.len() {
        let idx = probe(inputs[k].len());
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for &i in &idx {
            let x0 = work[k].data()[i];
            let mut at = |dx: f64| -> Result<f64> {
                work[k].data_mut()[i] = x0 + dx;
                eval(store, &work)
            };
            n.push(stencil(&mut at)?);
            work[k].data_mut()[i] = x0;
            a.push(input_grads[k].data()[i]);
        }
        worst = worst.max(relative_error(&Tensor::vector(a), &Tensor::vector(n)));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let idx = probe(store.get(id).value().len());
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for &i in &idx {
            let x0 = store.get(id).value().data()[i];
            let mut at = |dx: f64| -> Result<f64> {
                store.value_mut(id).data_mut()[i] = x0 + dx;
                eval(store, inputs)
            };
            n.push(stencil(&mut at)?);
            store.value_mut(id).data_mut()[i] = x0;
            a.push(param_grads[id.index()].data()[i]);
        }
        worst = worst.max(relative_error(&Tensor::vector(a), &Tensor::vector(n)));
    }
    Ok(worst)
}

fn stencil(f: &mut dyn FnMut(f64) -> Result<f64>) -> Result<f64> {
    let h = STENCIL_STEP;
    let (p2, p1, m1, m2) = (f(2.0 * h)?, f(h)?, f(-h)?, f(-2.0 * h)?);
    // Differences first, so a flat direction gives exactly zero.
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}
