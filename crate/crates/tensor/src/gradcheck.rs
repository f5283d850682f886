use rand::rngs::StdRng;
use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Coordinates checked exhaustively up to this count, sampled above it.
pub const FULL_CHECK_LIMIT: usize = 10_000;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// `(param index, coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
}

fn eval<G>(f: &G, params: &[Tensor<f64>]) -> Result<f64>
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::with_finite_checks(true);
    let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&tape, &vars)?.value();
    if loss.numel() != 1 || !loss.is_finite() {
        return Err(TensorError::NonFinite("grad_check loss"));
    }
    Ok(loss.item())
}

/// Compares tape gradients of `f` against central finite differences.
///
/// `eps` must lie in `[1e-7, 1e-4]`. Relative error per coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
pub fn grad_check<G>(f: G, params: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    G: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(TensorError::Invalid(format!("grad_check eps {eps} outside [1e-7, 1e-4]")));
    }
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::with_finite_checks(true);
        let vars: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter()
            .zip(params)
            .map(|(v, p)| grads.get(*v).cloned().unwrap_or_else(|| p.map(|_| 0.0)))
            .collect()
    };

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, p)| (0..p.numel()).map(move |c| (pi, c)))
        .collect();
    let chosen: Vec<(usize, usize)> = if coords.len() > FULL_CHECK_LIMIT {
        let mut rng = StdRng::seed_from_u64(0x9e37_79b9);
        let mut picks = sample(&mut rng, coords.len(), FULL_CHECK_LIMIT).into_vec();
        picks.sort_unstable();
        picks.into_iter().map(|i| coords[i]).collect()
    } else {
        coords
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, c) in chosen {
        let orig = params[pi].data()[c];
        work[pi].data_mut()[c] = orig + eps;
        let plus = eval(&f, &work)?;
        work[pi].data_mut()[c] = orig - eps;
        let minus = eval(&f, &work)?;
        work[pi].data_mut()[c] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[pi].data()[c];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (pi, c);
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::from_f64(vec![1], &[3.0]).unwrap();
        let report = grad_check(|_, v: &[Var<f64>]| v[0].mul(v[0])?.sum(), &[x.clone()], 1e-5).unwrap();
        assert!(report.max_rel_err < 1e-9, "{report:?}");

        let tape = Tape::new();
        let v = tape.param(x);
        let y = v.mul(v).unwrap().sum().unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[6.0]);
    }

    #[test]
    fn eps_out_of_range() {
        let x = Tensor::<f64>::from_f64(vec![1], &[1.0]).unwrap();
        let err = grad_check(|_, v: &[Var<f64>]| v[0].sum(), &[x], 1e-2);
        assert!(matches!(err, Err(TensorError::Invalid(_))));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let x = Tensor::<f64>::from_f64(vec![2], &[f64::INFINITY, 1.0]).unwrap();
        let err = grad_check(|_, v: &[Var<f64>]| v[0].sum(), &[x], 1e-5);
        assert!(err.is_err());
    }
}
