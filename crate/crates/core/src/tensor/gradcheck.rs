use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Coordinates whose one-sided difference quotients disagree by more than
/// this (relative), or whose step flips a relu input sign, are not compared.
pub const KINK_GUARD: f64 = 1e-3;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`.
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input index, coordinate)` pairs skipped as non-differentiable.
    pub excluded: Vec<(usize, usize)>,
    /// Some relu input at the base point lies within [`KINK_GUARD`] of zero.
    pub near_kink: bool,
    pub passed: bool,
}

fn eval<F>(f: &F, xs: &[Tensor<f64>]) -> Result<(f64, Option<u64>)>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::with_kink_trace();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let out = f(&g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out)));
    }
    Ok((g.scalar_value(out), g.kink_trace().map(|k| k.signature)))
}

/// Compares analytic gradients of a scalar function of several tensors with
/// central differences.
pub fn grad_check_many<F>(f: F, xs: &[Tensor<f64>], tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &[Var]) -> Result<Var>,
{
    let g = Graph::with_kink_trace();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&g, &vars)?;
    g.backward(out)?;
    let f0 = g.scalar_value(out);
    let trace = g.kink_trace().expect("trace enabled");
    let analytic: Vec<Vec<f64>> =
        vars.iter().zip(xs).map(|(&v, x)| g.grad(v).unwrap_or_else(|| vec![0.0; x.numel()])).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        excluded: Vec::new(),
        near_kink: trace.min_margin < KINK_GUARD,
        passed: true,
    };
    let mut probe: Vec<Tensor<f64>> = xs.to_vec();
    for (ti, x) in xs.iter().enumerate() {
        for c in 0..x.numel() {
            probe[ti].data[c] = x.data[c] + STEP;
            let (fp, sp) = eval(&f, &probe)?;
            probe[ti].data[c] = x.data[c] - STEP;
            let (fm, sm) = eval(&f, &probe)?;
            probe[ti].data[c] = x.data[c];

            let central = (fp - fm) / (2.0 * STEP);
            let forward = (fp - f0) / STEP;
            let backward = (f0 - fm) / STEP;
            let crosses = sp != Some(trace.signature) || sm != Some(trace.signature);
            let lopsided = (forward - backward).abs() > KINK_GUARD * central.abs().max(1.0);
            if crosses || lopsided {
                report.excluded.push((ti, c));
                continue;
            }
            let a = analytic[ti][c];
            let err = (a - central).abs() / a.abs().max(central.abs()).max(REL_FLOOR);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor<f64>, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), tol)
}
