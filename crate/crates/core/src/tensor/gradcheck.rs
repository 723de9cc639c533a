use super::{Tape, Tensor, Var};
use crate::error::{MpnError, Result};

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|, floor)` over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter index, flat element index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coordinates: usize,
    pub tol: f64,
}

/// Step, pass threshold and the denominator floor of the relative error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Keeps near-zero coordinates from turning rounding noise into large
    /// relative errors.
    pub floor: f64,
}

impl GradCheckOptions {
    pub fn new(h: f64, tol: f64) -> Self {
        Self { h, tol, floor: 1e-8 }
    }
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Check every coordinate of `params` for the scalar produced by `f`.
///
/// `f` receives a fresh tape and one trainable leaf per parameter, and must
/// return a single-element node. Runs in `f64`.
pub fn grad_check<Fun>(f: Fun, params: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check_with(|_| {}, f, params, GradCheckOptions::new(h, tol))
}

/// Like [`grad_check`] but lets the caller prepare each tape, e.g. to inject
/// a backward fault.
pub fn grad_check_with<Fun, Prep>(
    prepare: Prep,
    f: Fun,
    params: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    Prep: Fn(&mut Tape<f64>),
{
    let GradCheckOptions { h, tol, floor } = opts;
    if !(h > 0.0) {
        return Err(MpnError::Parameter(format!("step h must be positive, got {h}")));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        prepare(&mut tape);
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut tape = Tape::new();
    prepare(&mut tape);
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).all_finite() {
        return Err(MpnError::Numerical("objective is not finite at the base point".into()));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coordinates: 0,
        tol,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for (pi, &v) in vars.iter().enumerate() {
        let analytic = grads.get(v);
        for ei in 0..params[pi].len() {
            let base = params[pi].data()[ei];
            work[pi].data_mut()[ei] = base + h;
            let plus = eval(&work)?;
            work[pi].data_mut()[ei] = base - h;
            let minus = eval(&work)?;
            work[pi].data_mut()[ei] = base;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[ei];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(MpnError::Numerical(format!(
                    "non-finite gradient at parameter {pi}, element {ei}: analytic {a}, numeric {numeric}"
                )));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}
