use super::{forward, DiffError, Tape, Tensor, Var};

/// Denominator floor of the relative error, so components whose true
/// gradient is ~0 are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(|analytic|, |numeric|, GRAD_CHECK_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, flat element index) of the worst component.
    pub worst: Option<(usize, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of a scalar graph with central finite
/// differences, step `h = 1e−6 · max(1, |θ|)` per component.
pub fn grad_check<F>(graph: F, point: &[Tensor], tolerance: f64) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let rec = forward(point, &graph)?;
    if rec.value().len() != 1 {
        return Err(super::shape_err("grad_check", "function must be scalar-valued"));
    }
    let seed = Tensor::filled(rec.value().shape(), 1.0);
    let analytic = rec.backward(&seed)?;

    let eval = |inputs: &[Tensor]| -> Result<f64, DiffError> { Ok(forward(inputs, &graph)?.value().item()) };

    let mut work: Vec<Tensor> = point.to_vec();
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    let mut worst = None;
    for (ti, t) in point.iter().enumerate() {
        for ei in 0..t.len() {
            let theta = t.data()[ei];
            let h = 1e-6 * theta.abs().max(1.0);
            work[ti].data_mut()[ei] = theta + h;
            let up = eval(&work)?;
            work[ti].data_mut()[ei] = theta - h;
            let down = eval(&work)?;
            work[ti].data_mut()[ei] = theta;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            max_abs = max_abs.max(abs);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((ti, ei));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        max_abs_error: max_abs,
        worst,
        tolerance,
        passed: max_rel < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::vector(vec![0.5, -2.0, 3.0]).unwrap();
        let x = Tensor::vector(vec![1.0, 2.0, -1.5]).unwrap();
        let report = grad_check(
            |t, v| {
                let wv = t.constant(w.clone());
                let p = t.mul(v[0], wv)?;
                t.sum(p)
            },
            &[x],
            1e-7,
        )
        .unwrap();
        // Only finite-difference round-off remains.
        assert!(report.passed, "{report:?}");
        assert!(report.max_abs_error < 1e-8);
    }
}
