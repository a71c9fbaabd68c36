use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug)]
pub struct GradReport {
    /// Largest relative error over the elements of each parameter.
    pub max_rel_err: Vec<f64>,
    pub tol: f64,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.worst() < self.tol
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// finite differences.
///
/// `f` builds the function on the given tape from one leaf per entry of
/// `params` and returns the scalar output. The numeric side only evaluates
/// forward values. Relative error per element is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`; exceeding `tol`
/// is reported through [`GradReport::passed`], not raised.
pub fn finite_diff_check<F>(params: &[Tensor], step: f64, tol: f64, mut f: F) -> Result<GradReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec))
        .collect();

    let mut eval = |ps: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = ps.iter().map(|p| t.leaf(p.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.scalar(o))
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel_err = Vec::with_capacity(params.len());
    for (pi, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for (j, &a) in grad.iter().enumerate() {
            let orig = params[pi].data()[j];
            work[pi].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        max_rel_err.push(worst);
    }
    Ok(GradReport { max_rel_err, tol })
}
