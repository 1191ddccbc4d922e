//! Shared helpers for unit tests.

use crate::autograd::{ParamGrads, ParamId, ParamStore};

/// Central-difference check of analytic parameter gradients on a sample of entries.
pub fn check_param_grads(
    store: &mut ParamStore,
    ids: &[ParamId],
    grads: &ParamGrads,
    loss: impl Fn(&ParamStore) -> f64,
    tol: f64,
) {
    let h = 1e-5;
    let mut checked = 0;
    for &id in ids {
        let n = store.get(id).len();
        for i in (0..n).step_by((n / 3).max(1)) {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let lp = loss(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let lm = loss(store);
            store.get_mut(id).data_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads.get(id).map_or(0.0, |g| g.data()[i]);
            let scale = fd.abs().max(an.abs());
            if scale < 1e-7 {
                continue;
            }
            assert!(
                (fd - an).abs() <= tol * scale,
                "{}[{i}]: fd {fd} vs analytic {an}",
                store.name(id)
            );
            checked += 1;
        }
    }
    assert!(checked > 0, "no gradients were checked");
}

