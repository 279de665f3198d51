use super::{Graph, ParamStore, Real, Result, Tensor, Var};

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<Real>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares the tape's gradient of the scalar `f` against central finite
/// differences at every coordinate of every input. Returns the maximum
/// [`relative_error`].
pub fn gradient_check<F>(f: F, inputs: &[Tensor], eps: Real) -> Result<Real>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    gradient_check_with(f, inputs, eps, |_| {})
}

/// [`gradient_check`] with a hook applied to the analytic-pass graph before
/// recording (used for fault injection).
pub fn gradient_check_with<F, H>(f: F, inputs: &[Tensor], eps: Real, hook: H) -> Result<Real>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    H: Fn(&mut Graph),
{
    let mut g = Graph::new();
    hook(&mut g);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut worst: Real = 0.0;
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; inputs[i].len()];
        let analytic = grads.get(*v).unwrap_or(&zeros).to_vec();
        for j in 0..inputs[i].len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + eps;
            let fp = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig - eps;
            let fm = eval_scalar(&f, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    Ok(worst)
}

/// Finite-difference check of `f` with respect to every trainable parameter
/// in `store`. `f` must be deterministic and must not mutate anything that
/// changes its value between calls.
pub fn gradient_check_params<F>(store: &mut ParamStore, f: F, eps: Real) -> Result<Real>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    Ok(gradient_check_per_param(store, f, eps)?
        .into_iter()
        .fold(0.0, |m, (_, e)| if e.is_nan() || e > m { e } else { m }))
}

/// [`gradient_check_params`] reporting the worst relative error of each
/// parameter by name.
pub fn gradient_check_per_param<F>(
    store: &mut ParamStore,
    f: F,
    eps: Real,
) -> Result<Vec<(String, Real)>>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let eval = |store: &ParamStore| -> Result<Real> {
        let mut g = Graph::new();
        let out = f(&mut g, store)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out)?;
    store.zero_grad();
    grads.accumulate_into(&g, store);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let analytic = store.grad(id).data().to_vec();
        let mut worst: Real = 0.0;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + eps;
            let fp = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig - eps;
            let fm = eval(store)?;
            store.value_mut(id).data_mut()[j] = orig;
            let e = relative_error(a, (fp - fm) / (2.0 * eps));
            if e.is_nan() || e > worst {
                worst = e;
            }
        }
        rows.push((store.param(id).name.clone(), worst));
    }
    Ok(rows)
}
