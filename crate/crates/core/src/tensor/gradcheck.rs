//! Central finite-difference verification of analytic gradients.

use super::{Real, Tensor, TensorResult};

/// Location and values of the single worst coordinate found.
#[derive(Debug, Clone)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: Real,
    pub numeric: Real,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: Real,
    pub worst: Option<WorstCoordinate>,
    /// Max relative error per named parameter tensor.
    pub per_param: Vec<(String, Real)>,
}

/// Relative error metric used throughout: `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: Real, b: Real) -> Real {
    let denom = (1.0 as Real).max(a.abs()).max(b.abs());
    (a - b).abs() / denom
}

/// Compares the analytic gradients stored on `params` against central
/// differences of `loss`. `loss` must be deterministic (dropout disabled,
/// fixed rng) and is re-evaluated twice per coordinate at `±eps`.
///
/// Coordinates without an analytic gradient buffer are treated as zero.
pub fn finite_diff_gradcheck<F>(
    params: &mut [Tensor],
    names: &[&str],
    eps: Real,
    mut loss: F,
) -> TensorResult<GradCheckReport>
where
    F: FnMut(&[Tensor]) -> TensorResult<Real>,
{
    assert_eq!(params.len(), names.len());
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        per_param: Vec::with_capacity(params.len()),
    };
    for pi in 0..params.len() {
        let mut group_worst = 0.0;
        for idx in 0..params[pi].numel() {
            let original = params[pi].values()[idx];
            params[pi].values_mut()[idx] = original + eps;
            let plus = loss(params)?;
            params[pi].values_mut()[idx] = original - eps;
            let minus = loss(params)?;
            params[pi].values_mut()[idx] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = params[pi].grad().map_or(0.0, |g| g[idx]);
            let rel = relative_error(analytic, numeric);
            if rel > group_worst {
                group_worst = rel;
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some(WorstCoordinate {
                    param: names[pi].to_string(),
                    index: idx,
                    analytic,
                    numeric,
                });
            }
        }
        report.per_param.push((names[pi].to_string(), group_worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_checks_tightly() {
        let mut x = Tensor::from_vec(vec![0.4, -1.3, 2.2, 0.05]);
        // analytic gradient of sum(x^2)/2 is x itself
        let analytic = x.values().to_vec();
        x.accumulate_grad(&analytic);
        let report = finite_diff_gradcheck(std::slice::from_mut(&mut x), &["x"], 1e-5, |ps| {
            Ok(ps[0].values().iter().map(|v| v * v).sum::<Real>() / 2.0)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let mut x = Tensor::from_vec(vec![1.0, 2.0]);
        x.grad_mut(); // zeros
        let report =
            finite_diff_gradcheck(std::slice::from_mut(&mut x), &["x"], 1e-4, |_| Ok(7.25))
                .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.worst.is_none());
    }

    #[test]
    fn mismatch_is_reported_with_location() {
        let mut x = Tensor::from_vec(vec![1.0, 2.0]);
        x.accumulate_grad(&[1.0, 0.0]); // wrong for the second coordinate
        let report = finite_diff_gradcheck(std::slice::from_mut(&mut x), &["x"], 1e-5, |ps| {
            Ok(ps[0].values().iter().sum())
        })
        .unwrap();
        let worst = report.worst.unwrap();
        assert_eq!(worst.param, "x");
        assert_eq!(worst.index, 1);
        assert!(report.max_rel_error > 0.9);
    }
}
