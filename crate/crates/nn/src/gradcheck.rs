//! Central finite-difference verification of analytic gradients.

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all checked coordinates.
    pub max_rel_error: f64,
    /// Parameter name (or input index) and flat coordinate of the worst entry.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    /// Smallest |pre-activation| at any ReLU of the analytic evaluation.
    pub relu_margin: Option<f64>,
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&h) {
        return Err(NnError::Config(format!("finite-difference step {h} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

struct Tracker {
    max: f64,
    worst: Option<(String, usize)>,
    n: usize,
}

impl Tracker {
    fn new() -> Self {
        Self { max: 0.0, worst: None, n: 0 }
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let e = rel_error(analytic, numeric);
        self.n += 1;
        if e > self.max || self.worst.is_none() {
            self.max = e.max(self.max);
            self.worst = Some((name.to_string(), idx));
        }
    }
}

/// Checks the gradient of a scalar function of the trainable parameters in `store`.
///
/// `f` builds a fresh graph reading parameters from the store and returns the
/// one-element objective. Parameter values are restored afterwards; gradient
/// buffers are overwritten with the analytic gradient.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    check_step(h)?;
    store.zero_grad();
    let (g, loss) = f(store)?;
    let grads = g.backward(loss)?;
    g.accumulate_into(&grads, store);
    let relu_margin = g.min_relu_margin();
    drop(g);

    let mut tr = Tracker::new();
    let ids: Vec<_> = store.ids().filter(|&id| store.is_trainable(id)).collect();
    for id in ids {
        let name = store.get(id).name.clone();
        for idx in 0..store.value(id).len() {
            let orig = store.value(id).data()[idx];
            let analytic = store.get(id).grad.data()[idx];
            store.value_mut(id).data_mut()[idx] = orig + h;
            let plus = eval(store, &mut f);
            store.value_mut(id).data_mut()[idx] = orig - h;
            let minus = eval(store, &mut f);
            store.value_mut(id).data_mut()[idx] = orig;
            let (plus, minus) = match (plus, minus) {
                (Some(p), Some(m)) if p.is_finite() && m.is_finite() => (p, m),
                _ => return Err(NnError::NonFiniteObjective { param: name, index: idx }),
            };
            tr.record(&name, idx, analytic, (plus - minus) / (2.0 * h));
        }
    }
    Ok(GradCheckReport { max_rel_error: tr.max, worst: tr.worst, coordinates: tr.n, relu_margin })
}

fn eval<F>(store: &ParamStore, f: &mut F) -> Option<f64>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    f(store).ok().map(|(g, v)| g.scalar(v))
}

/// Checks gradients with respect to free input tensors.
///
/// `f` receives a graph whose first `inputs.len()` nodes are differentiable
/// leaves holding the inputs, and returns the objective.
pub fn grad_check_inputs<F>(inputs: &[Tensor], h: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    check_step(h)?;
    let run = |vals: &[Tensor], f: &mut F| -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, out, vars))
    };
    let (g, loss, vars) = run(inputs, &mut f)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    let relu_margin = g.min_relu_margin();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut tr = Tracker::new();
    for (k, a) in analytic.iter().enumerate() {
        let name = format!("input{k}");
        for idx in 0..a.len() {
            let orig = work[k].data()[idx];
            work[k].data_mut()[idx] = orig + h;
            let plus = run(&work, &mut f).ok().map(|(g, v, _)| g.scalar(v));
            work[k].data_mut()[idx] = orig - h;
            let minus = run(&work, &mut f).ok().map(|(g, v, _)| g.scalar(v));
            work[k].data_mut()[idx] = orig;
            let (plus, minus) = match (plus, minus) {
                (Some(p), Some(m)) if p.is_finite() && m.is_finite() => (p, m),
                _ => return Err(NnError::NonFiniteObjective { param: name, index: idx }),
            };
            tr.record(&name, idx, a.data()[idx], (plus - minus) / (2.0 * h));
        }
    }
    Ok(GradCheckReport { max_rel_error: tr.max, worst: tr.worst, coordinates: tr.n, relu_margin })
}

/// Checks a hand-supplied gradient of a plain scalar function.
pub fn grad_check_fn<F>(mut f: F, analytic: &[f64], x: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    check_step(h)?;
    if analytic.len() != x.len() {
        return Err(NnError::Shape {
            op: "grad_check_fn",
            detail: format!("{} gradient entries for {} coordinates", analytic.len(), x.len()),
        });
    }
    let mut work = x.to_vec();
    let mut tr = Tracker::new();
    for idx in 0..x.len() {
        let orig = work[idx];
        work[idx] = orig + h;
        let plus = f(&work);
        work[idx] = orig - h;
        let minus = f(&work);
        work[idx] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(NnError::NonFiniteObjective { param: "x".into(), index: idx });
        }
        tr.record("x", idx, analytic[idx], (plus - minus) / (2.0 * h));
    }
    Ok(GradCheckReport { max_rel_error: tr.max, worst: tr.worst, coordinates: tr.n, relu_margin: None })
}
