use super::{Array, DiffError, Tape, Var};

/// Outcome of comparing analytic gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest relative error over the coordinates that were compared.
    pub max_rel_error: f64,
    /// (parameter, flat coordinate) attaining `max_rel_error`.
    pub worst: Option<(usize, usize)>,
    /// (analytic, numeric) at `worst`.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
    /// Coordinates skipped because the finite-difference stencil crosses a
    /// nondifferentiable point (relu/abs at 0, max ties, sort reorders, ...).
    pub excluded: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    pub fn nondifferentiable(&self) -> bool {
        self.excluded > 0
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn evaluate<F>(build: &F, params: &[Array]) -> Result<(f64, u64), DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    let mut tape = Tape::new();
    tape.track_branches();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let value = tape.value(root).item()?;
    Ok((value, tape.branch_signature().unwrap_or_default()))
}

/// Check the gradient of the scalar produced by `build` with respect to every
/// coordinate of every entry of `params`.
///
/// A coordinate is excluded when the branch pattern at `p ± step` differs
/// from the one at `p`, i.e. the stencil straddles a kink.
pub fn grad_check<F>(
    build: F,
    params: &[Array],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, DiffError>,
{
    if !(step > 0.0) {
        return Err(DiffError::InvalidArgument {
            op: "grad_check",
            reason: format!("step must be positive, got {step}"),
        });
    }
    let mut tape = Tape::new();
    tape.track_branches();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let root = build(&mut tape, &vars)?;
    let base_sig = tape.branch_signature().unwrap_or_default();
    tape.backward(root)?;
    let analytic: Vec<Array> =
        vars.iter().map(|&v| tape.grad(v).expect("registered").clone()).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: None,
        checked: 0,
        excluded: 0,
        tolerance,
    };
    let mut probe: Vec<Array> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ci in 0..param.len() {
            let orig = param.data()[ci];
            probe[pi].data_mut()[ci] = orig + step;
            let (plus, sig_plus) = evaluate(&build, &probe)?;
            probe[pi].data_mut()[ci] = orig - step;
            let (minus, sig_minus) = evaluate(&build, &probe)?;
            probe[pi].data_mut()[ci] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.excluded += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[pi].data()[ci], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((pi, ci));
                report.worst_values = Some((analytic[pi].data()[ci], numeric));
            }
        }
    }
    Ok(report)
}
