//! Central finite-difference gradient checking.

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Mode, NodeId, ParamStore};
use crate::nn::normal_tensor;
use crate::rng::{seeded, substream, Rng};
use crate::tensor::Tensor;

/// Returns a head computing `loss = Σ c_i y_i` for fixed pseudo-random
/// coefficients `c` (drawn from `seed`), together with `dloss/dy = c`.
pub fn weighted_sum_head(seed: u64) -> impl Fn(&Tensor) -> Result<(f64, Tensor)> {
    move |y: &Tensor| {
        let scale = 1.0 / (y.len() as f64).sqrt();
        let c = normal_tensor(y.shape(), scale, &mut substream(seed, "gradcheck-head"))?;
        let loss = y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum();
        Ok((loss, c))
    }
}

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name (or `input<k>`), scalar index, analytic and numeric values.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// [`grad_check_with`] using [`weighted_sum_head`].
pub fn grad_check<B>(
    params: &ParamStore,
    inputs: &[Tensor],
    eps: f64,
    mode: Mode,
    seeds: &[u64],
    build: B,
) -> Result<f64>
where
    B: Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId>,
{
    Ok(grad_check_with(params, inputs, eps, mode, seeds, build, weighted_sum_head(0x5eed))?.max_rel_error)
}

/// Largest relative error `|a - n| / max(|a|, |n|, 1e-8)` between analytic
/// and central-difference gradients, over every parameter scalar and every
/// differentiable input scalar.
///
/// `build` constructs the forward pass from the input nodes; `head` maps the
/// output to a scalar loss and its gradient. Each evaluation uses fresh
/// streams seeded from `seeds`, so dropout masks are replayed identically
/// across perturbations.
pub fn grad_check_with<B, H>(
    params: &ParamStore,
    inputs: &[Tensor],
    eps: f64,
    mode: Mode,
    seeds: &[u64],
    build: B,
    head: H,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph<'_>, &[NodeId]) -> Result<NodeId>,
    H: Fn(&Tensor) -> Result<(f64, Tensor)>,
{
    if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Config(format!("finite-difference step {eps} must be positive")));
    }
    let streams = || -> Vec<Rng> { seeds.iter().map(|&s| seeded(s)).collect() };

    let loss_at = |store: &ParamStore, xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(store, mode, streams());
        let ids = xs.iter().map(|x| g.input(x.clone())).collect::<Result<Vec<_>>>()?;
        let out = build(&mut g, &ids)?;
        let (loss, _) = head(g.value(out))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        Ok(loss)
    };

    let mut g = Graph::new(params, mode, streams());
    let ids = inputs.iter().map(|x| g.input(x.clone())).collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &ids)?;
    let (_, dy) = head(g.value(out))?;
    let analytic = g.backward(out, dy)?;

    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None };
    let mut record = |what: &dyn Fn() -> String, j: usize, a: f64, n: f64| {
        let r = rel(a, n);
        if r > report.max_rel_error {
            report.max_rel_error = r;
            report.worst = Some((what(), j, a, n));
        }
    };

    let mut store = params.clone();
    for p in 0..store.len() {
        for j in 0..store.tensors_mut()[p].len() {
            let orig = store.tensors_mut()[p].data()[j];
            store.tensors_mut()[p].data_mut()[j] = orig + eps;
            let plus = loss_at(&store, inputs)?;
            store.tensors_mut()[p].data_mut()[j] = orig - eps;
            let minus = loss_at(&store, inputs)?;
            store.tensors_mut()[p].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            record(&|| params.names()[p].clone(), j, analytic.params[p].data()[j], numeric);
        }
    }

    let mut xs = inputs.to_vec();
    for (k, &id) in ids.iter().enumerate() {
        let Some(gx) = analytic.input(id) else { continue };
        for j in 0..xs[k].len() {
            let orig = xs[k].data()[j];
            xs[k].data_mut()[j] = orig + eps;
            let plus = loss_at(params, &xs)?;
            xs[k].data_mut()[j] = orig - eps;
            let minus = loss_at(params, &xs)?;
            xs[k].data_mut()[j] = orig;
            record(&|| format!("input{k}"), j, gx.data()[j], (plus - minus) / (2.0 * eps));
        }
    }
    Ok(report)
}
