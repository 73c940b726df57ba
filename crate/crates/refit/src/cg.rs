//! Matrix-free conjugate gradient for the SPD resolvent systems.

use crate::error::{RefitError, Result};

/// Solves `A x = b` for SPD `apply: x -> A x`, stopping when the relative
/// residual falls at or below `rel_tol`. Returns (x, relative residual,
/// iterations used).
pub(crate) fn conjugate_gradient(
    mut apply: impl FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x0: Option<&[f64]>,
    rel_tol: f64,
    max_iters: usize,
    context: &'static str,
) -> Result<(Vec<f64>, f64, usize)> {
    let n = b.len();
    let b_norm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if b_norm == 0.0 {
        return Ok((vec![0.0; n], 0.0, 0));
    }

    let mut x = match x0 {
        Some(x0) => x0.to_vec(),
        None => vec![0.0; n],
    };
    let mut ax = vec![0.0; n];
    apply(&x, &mut ax);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut p = r.clone();
    let mut rs: f64 = r.iter().map(|v| v * v).sum();

    if rs.sqrt() / b_norm <= rel_tol {
        return Ok((x, rs.sqrt() / b_norm, 0));
    }

    let mut ap = vec![0.0; n];
    for iter in 1..=max_iters {
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        if pap <= 0.0 {
            // p = 0 means we already converged; anything else is not SPD.
            if pap == 0.0 {
                return Ok((x, rs.sqrt() / b_norm, iter));
            }
            return Err(RefitError::CgDidNotConverge { context, residual: rs.sqrt() / b_norm, iters: iter });
        }
        let alpha = rs / pap;
        for ((xi, pi), (ri, api)) in x.iter_mut().zip(&p).zip(r.iter_mut().zip(&ap)) {
            *xi += alpha * pi;
            *ri -= alpha * api;
        }
        let rs_new: f64 = r.iter().map(|v| v * v).sum();
        if rs_new.sqrt() / b_norm <= rel_tol {
            return Ok((x, rs_new.sqrt() / b_norm, iter));
        }
        let beta = rs_new / rs;
        rs = rs_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    Err(RefitError::CgDidNotConverge { context, residual: rs.sqrt() / b_norm, iters: max_iters })
}
