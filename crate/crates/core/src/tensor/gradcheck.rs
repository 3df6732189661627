use super::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Per-parameter comparison of analytic and central-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Compare analytic gradients from `f` against central differences of step `eps`.
///
/// `f` returns the scalar loss and, for each parameter, its analytic gradient
/// (flattened, in the parameter's layout). Relative error per element is
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(params: &ParamStore, eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Vec<(ParamId, Vec<f64>)>)>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(Error::Config(format!("grad_check step must be positive, got {eps}")));
    }
    let (base, analytic) = f(params)?;
    if !base.is_finite() {
        return Err(Error::NonFinite("grad_check loss at base point".into()));
    }
    let mut probe = params.clone();
    let mut entries = Vec::new();
    for (id, grad) in analytic {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for (j, &a) in grad.iter().enumerate() {
            let orig = probe.get(id).data()[j];
            probe.get_mut(id).data_mut()[j] = orig + eps;
            let plus = f(&probe)?.0;
            probe.get_mut(id).data_mut()[j] = orig - eps;
            let minus = f(&probe)?.0;
            probe.get_mut(id).data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "grad_check loss at perturbed {}[{j}]",
                    params.name(id)
                )));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let abs = (a - numeric).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / (a.abs() + numeric.abs()).max(1e-8));
        }
        entries.push(GradCheckEntry {
            name: params.name(id).to_string(),
            max_rel_error: max_rel,
            max_abs_error: max_abs,
        });
    }
    Ok(GradCheckReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn square_loss(store: &ParamStore) -> Result<(f64, Vec<(ParamId, Vec<f64>)>)> {
        let id = store.id("x")?;
        let mut g = Graph::new();
        let x = g.param(store, id)?;
        let y = g.mul(x, x)?;
        let s = g.sum(y)?;
        let grads = g.backward(s)?;
        Ok((
            g.value(s).item()?,
            vec![(id, grads.param(id).unwrap().data().to_vec())],
        ))
    }

    #[test]
    fn quadratic_is_exact_under_central_differences() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0)).unwrap();
        let (_, grads) = square_loss(&store).unwrap();
        assert_eq!(grads[0].1, vec![6.0]);
        let report = grad_check(&store, 1e-5, square_loss).unwrap();
        assert!(report.entries[0].max_abs_error < 1e-7);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::full(&[3], 1.5)).unwrap();
        let report = grad_check(&store, 1e-5, |_| Ok((7.0, vec![(id, vec![0.0; 3])]))).unwrap();
        assert_eq!(report.max_rel_error(), 0.0);
    }

    #[test]
    fn non_finite_perturbation_is_reported() {
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::scalar(0.0)).unwrap();
        let err = grad_check(&store, 1e-3, |p| {
            let v = p.get(id).data()[0];
            Ok((if v > 0.0 { f64::INFINITY } else { 0.0 }, vec![(id, vec![0.0])]))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        assert!(grad_check(&store, 0.0, |_| Ok((0.0, vec![]))).is_err());
    }
}
