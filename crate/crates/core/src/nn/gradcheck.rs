use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Anything that owns one or more [`ParamStore`]s with disjoint names.
pub trait HasParams {
    fn stores(&self) -> Vec<&ParamStore>;
    fn stores_mut(&mut self) -> Vec<&mut ParamStore>;
}

impl HasParams for ParamStore {
    fn stores(&self) -> Vec<&ParamStore> {
        vec![self]
    }
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![self]
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_entries_per_tensor: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub entries_checked: usize,
}

fn loss_value<M, F>(model: &mut M, f: &mut F) -> Result<(Tape, Var, f64)>
where
    F: FnMut(&mut M, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(model, &mut tape)?;
    let v = tape.scalar(root);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss = {v}")));
    }
    Ok((tape, root, v))
}

fn set_entry<M: HasParams>(
    model: &mut M,
    store: usize,
    name: &str,
    idx: usize,
    v: f64,
) -> Result<()> {
    model.stores_mut()[store].get_mut(name)?.values_mut()[idx] = v;
    Ok(())
}

/// Compares tape gradients of the scalar `f` against central differences for
/// every trainable parameter. Relative error per entry is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`; frozen tensors
/// are not reported.
pub fn gradient_check<M, F>(
    model: &mut M,
    opts: &GradCheckOptions,
    mut f: F,
) -> Result<GradCheckReport>
where
    M: HasParams,
    F: FnMut(&mut M, &mut Tape) -> Result<Var>,
{
    let names: Vec<(usize, String)> = model
        .stores()
        .iter()
        .enumerate()
        .flat_map(|(si, s)| s.trainable_names().into_iter().map(move |n| (si, n)))
        .collect();
    for store in model.stores_mut() {
        for n in store.trainable_names() {
            store.get_mut(&n)?.clear_grad();
        }
    }
    let (tape, root, _) = loss_value(model, &mut f)?;
    let grads = tape.backward(root);
    for store in model.stores_mut() {
        tape.accumulate_param_grads(&grads, store)?;
    }
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for (si, name) in &names {
        let t = model.stores()[*si].get(name)?;
        let len = t.len();
        let analytic: Vec<f64> = t.grad().map_or_else(|| vec![0.0; len], <[f64]>::to_vec);
        let indices: Vec<usize> = match opts.max_entries_per_tensor {
            Some(cap) if cap < len => (0..cap).map(|i| i * len / cap).collect(),
            _ => (0..len).collect(),
        };
        for idx in indices {
            let orig = model.stores()[*si].get(name)?.values()[idx];
            set_entry(model, *si, name, idx, orig + opts.step)?;
            let plus = loss_value(model, &mut f)?.2;
            set_entry(model, *si, name, idx, orig - opts.step)?;
            let minus = loss_value(model, &mut f)?.2;
            set_entry(model, *si, name, idx, orig)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
