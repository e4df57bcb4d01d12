//! Central-difference gradient checking against stored analytic gradients.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Denominator floor for the relative error: coordinates whose analytic
/// and numeric gradients are both below this are compared absolutely.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Compare the gradients currently stored for `ids` against central finite
/// differences of `loss_fn`, returning the worst relative error.
///
/// `loss_fn` must be deterministic in the store contents. The store is
/// restored to its original values before returning.
pub fn grad_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    eps: f64,
    mut loss_fn: F,
) -> Result<f64>
where
    F: FnMut(&ParamStore) -> f64,
{
    assert!(eps > 0.0, "grad_check eps must be positive");
    let mut worst: f64 = 0.0;
    for &id in ids {
        let analytic = store
            .entry(id)
            .grad
            .clone()
            .ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "parameter {} has no stored gradient to check",
                    store.entry(id).name
                ))
            })?;
        for i in 0..analytic.len() {
            let orig = store.entry(id).value.data()[i];
            let hi = orig + eps;
            let lo = orig - eps;
            store.entry_mut(id).value.data_mut()[i] = hi;
            let f_hi = loss_fn(store);
            store.entry_mut(id).value.data_mut()[i] = lo;
            let f_lo = loss_fn(store);
            store.entry_mut(id).value.data_mut()[i] = orig;
            if !f_hi.is_finite() || !f_lo.is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: 0,
                    value: if f_hi.is_finite() { f_lo } else { f_hi },
                });
            }
            let numeric = (f_hi - f_lo) / (hi - lo);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Tape;
    use crate::tensor::Tensor;

    fn quadratic_loss(store: &ParamStore) -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<_> = store.trainable_ids();
        let mut total = None;
        for id in ids {
            let v = tape.param(store, id);
            let sq = tape.mul(v, v);
            let s = tape.sum_all(sq);
            let s = tape.scale(s, 0.5);
            total = Some(match total {
                None => s,
                Some(acc) => tape.add(acc, s),
            });
        }
        tape.value(total.unwrap()).item()
    }

    #[test]
    fn quadratic_is_exact_up_to_rounding() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]), true);
        // analytic gradient of 0.5 * |p|^2 is p itself
        store.entry_mut(id).grad = Some(vec![1.0, 2.0, 3.0]);
        let err = grad_check(&mut store, &[id], DEFAULT_EPS, quadratic_loss).unwrap();
        assert!(err <= 1e-8, "quadratic gradcheck error {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]), true);
        // gradient deliberately inflated by 10%
        store.entry_mut(id).grad = Some(vec![1.1, 2.2, 3.3]);
        let err = grad_check(&mut store, &[id], DEFAULT_EPS, quadratic_loss).unwrap();
        assert!(err >= 0.05, "fault injection went undetected: {err}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut store = ParamStore::new();
        let id = store.add("p", Tensor::scalar(1.0), true);
        assert!(grad_check(&mut store, &[id], DEFAULT_EPS, quadratic_loss).is_err());
    }
}
