use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

/// Settings for [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many evenly spaced elements per parameter (`None` = all).
    pub max_elements: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { step: 1e-3, tolerance: 1e-4, max_elements: None }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tolerance)
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs() + 1e-12)
}

/// Reverse-mode gradients of `loss_fn` at the current parameters.
pub fn analytic_gradients<F>(store: &mut ParamStore<f64>, loss_fn: &mut F) -> Result<Vec<Tensor<f64>>>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = loss_fn(store, &mut g)?;
    g.backward(loss, store)?;
    let grads = store.ids().map(|id| store.grad(id).clone()).collect();
    store.zero_grad();
    Ok(grads)
}

/// Compares reverse-mode gradients against central differences `(L(θ+h) − L(θ−h)) / 2h`.
pub fn finite_diff_check<F>(store: &mut ParamStore<f64>, opts: &CheckOptions, mut loss_fn: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let analytic = analytic_gradients(store, &mut loss_fn)?;
    compare_with_finite_differences(store, &analytic, opts, loss_fn)
}

/// Same as [`finite_diff_check`] but with caller-supplied analytic gradients.
pub fn compare_with_finite_differences<F>(
    store: &mut ParamStore<f64>,
    analytic: &[Tensor<f64>],
    opts: &CheckOptions,
    mut loss_fn: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore<f64>, &mut Graph<f64>) -> Result<Var>,
{
    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(store, &mut g)?;
        Ok(g.value(loss).item())
    };
    let ids: Vec<_> = store.ids().collect();
    let mut params = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(analytic) {
        let n = store.value(id).numel();
        let stride = match opts.max_elements {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        let mut check = ParamCheck {
            name: store.name(id).to_string(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(store);
            store.value_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(store);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.step);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            check.checked += 1;
            if err > check.max_rel_error || check.checked == 1 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport { params, tolerance: opts.tolerance })
}
