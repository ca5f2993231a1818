//! Central finite-difference oracle for analytic gradients.

use super::{Result, Tape, Tensor, TensorError, Var};

/// Relative error with the `max(|a|, |n|, 1e-6)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Worst relative error between `analytic` and the central difference
/// `(f(p + eps) - f(p - eps)) / 2eps`, taken per coordinate.
pub fn finite_diff_check<F>(mut f: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if params.len() != analytic.len() {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_check",
            msg: format!("{} params but {} analytic gradients", params.len(), analytic.len()),
        });
    }
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + eps;
        let up = f(&p)?;
        p[i] = orig - eps;
        let down = f(&p)?;
        p[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_check",
                index: i,
            });
        }
        worst = worst.max(relative_error(analytic[i], (up - down) / (2.0 * eps)));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (parameter index, flat element index) of the worst coordinate.
    pub worst_at: (usize, usize),
    pub analytic: Vec<Vec<f64>>,
}

/// Runs `build` once with backward for the analytic gradients of every
/// tensor in `params`, then re-runs it forward-only for each perturbed
/// coordinate.
pub fn check_tape_gradients<F>(params: &[Tensor<f64>], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();

    let mut work = params.to_vec();
    let mut worst = (0.0f64, (0, 0));
    for pi in 0..work.len() {
        for ei in 0..work[pi].numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(TensorError::NonFinite {
                    op: "finite_diff_check",
                    index: ei,
                });
            }
            let err = relative_error(analytic[pi][ei], (up - down) / (2.0 * eps));
            if err > worst.0 {
                worst = (err, (pi, ei));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_err: worst.0,
        worst_at: worst.1,
        analytic,
    })
}
