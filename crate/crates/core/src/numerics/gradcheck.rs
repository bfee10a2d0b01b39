use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares tape gradients of the scalar `f` against central differences for
/// every entry of every parameter in `store`.
pub fn grad_check<F>(store: &ParamStore, eps: f64, tol: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    grad_check_sampled(store, eps, tol, None, 0, f)
}

/// Like [`grad_check`] but probes at most `max_entries` random entries per
/// parameter when set.
pub fn grad_check_sampled<F>(
    store: &ParamStore,
    eps: f64,
    tol: f64,
    max_entries: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid("grad_check", format!("eps {eps} not in (0, 1e-2]")));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(s, &mut tape)?;
        let v = tape.value(out);
        if v.len() != 1 {
            return Err(Error::invalid("grad_check", "function must return a scalar"));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite { op: "grad_check" });
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    if !tape.value(out).item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    let grads = tape.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut params = Vec::new();
    for (id, name, tensor) in store.iter() {
        let n = tensor.len();
        let entries: Vec<usize> = match max_entries {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        let analytic = grads.params().get(id);
        let mut check = ParamCheck {
            name: name.to_string(),
            checked: entries.len(),
            max_rel_err: 0.0,
            max_abs_err: 0.0,
        };
        for &i in &entries {
            let orig = tensor.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            check.max_abs_err = check.max_abs_err.max((a - numeric).abs());
            check.max_rel_err = check.max_rel_err.max(relative_error(a, numeric));
        }
        params.push(check);
    }
    Ok(GradCheckReport { eps, tol, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn quadratic_at_three() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(3.0)).unwrap();
        let report = grad_check(&store, 1e-5, 1e-6, |s, t| {
            let v = t.param(s, x)?;
            t.mul(v, v)
        })
        .unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_err() < 1e-6);
    }

    #[test]
    fn linear_is_exact() {
        let mut store = ParamStore::new();
        let w = store
            .add("w", Tensor::row(vec![0.5, -1.5, 2.0]))
            .unwrap();
        let report = grad_check(&store, 1e-5, 1e-9, |s, t| {
            let v = t.param(s, w)?;
            let k = t.scale(v, 4.0)?;
            t.sum(k)
        })
        .unwrap();
        assert!(report.max_rel_err() < 1e-9, "{report:?}");
    }

    #[test]
    fn rejects_bad_eps() {
        let store = ParamStore::new();
        let f = |_: &ParamStore, t: &mut Tape| t.constant(Tensor::scalar(1.0));
        assert!(grad_check(&store, 0.0, 1e-4, f).is_err());
        assert!(grad_check(&store, 0.1, 1e-4, f).is_err());
    }

    #[test]
    fn non_finite_function_errors() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(1e200)).unwrap();
        let res = grad_check(&store, 1e-5, 1e-4, |s, t| {
            let v = t.param(s, x)?;
            let sq = t.mul(v, v)?;
            t.mul(sq, sq)
        });
        assert!(res.is_err());
    }
}
