use crate::error::{CoreError, Result};
use crate::numerics::{Matrix, ParamId, ParamStore};

/// Default central-difference step for gradient verification.
pub const FD_STEP: f64 = 1e-5;
/// Maximum relative error tolerated between analytic and numeric gradients.
pub const GRAD_REL_TOL: f64 = 1e-4;
/// Denominator floor: differences below this scale are compared absolutely,
/// keeping truncation noise in near-zero gradients from raising false alarms.
pub const REL_FLOOR: f64 = 1e-4;

/// Central finite differences of a scalar function with respect to every
/// element of the listed parameters. The function is evaluated with each
/// scalar nudged by +/- step; the original values are restored exactly.
pub fn finite_diff_grad(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut f: impl FnMut(&ParamStore) -> Result<f64>,
    step: f64,
) -> Result<Vec<Matrix>> {
    if step <= 0.0 {
        return Err(CoreError::InvalidArg("finite_diff_grad: step must be > 0".into()));
    }
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let (rows, cols) = store.value(id).shape();
        let mut grad = Matrix::zeros(rows, cols);
        for i in 0..rows * cols {
            let orig = store.value(id).as_slice()[i];
            store.get_mut(id).value.as_mut_slice()[i] = orig + step;
            let up = f(store)?;
            store.get_mut(id).value.as_mut_slice()[i] = orig - step;
            let down = f(store)?;
            store.get_mut(id).value.as_mut_slice()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "finite_diff_grad: f non-finite near {}[{i}]",
                    store.name(id)
                )));
            }
            grad.as_mut_slice()[i] = (up - down) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Relative error with a floored denominator.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Largest relative elementwise error between two same-shaped matrices.
pub fn max_rel_error(a: &Matrix, b: &Matrix) -> f64 {
    assert!(a.same_shape(b), "max_rel_error: shape mismatch");
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| rel_error(x, y))
        .fold(0.0, f64::max)
}

/// Run backward through `loss_fn` once for the analytic gradients, then
/// compare against central differences for every listed parameter.
/// Returns the worst relative error observed.
pub fn check_gradients(
    store: &mut ParamStore,
    ids: &[ParamId],
    mut loss_fn: impl FnMut(&ParamStore, &mut crate::numerics::Tape) -> Result<crate::numerics::NodeId>,
    step: f64,
) -> Result<f64> {
    store.zero_grads();
    let mut tape = crate::numerics::Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    tape.backward(loss)?;
    tape.export_grads(store);
    let analytic: Vec<Matrix> = ids.iter().map(|&id| store.grad(id).clone()).collect();

    let numeric = finite_diff_grad(store, ids, |s| {
        let mut t = crate::numerics::Tape::new();
        let l = loss_fn(s, &mut t)?;
        Ok(t.value(l).item())
    }, step)?;

    let mut worst: f64 = 0.0;
    for ((id, a), n) in ids.iter().zip(&analytic).zip(&numeric) {
        let e = max_rel_error(a, n);
        if e > worst {
            worst = e;
        }
        if e > GRAD_REL_TOL {
            eprintln!(
                "gradient mismatch on {}: rel err {e:.3e} (analytic vs finite difference)",
                store.name(*id)
            );
        }
    }
    Ok(worst)
}
