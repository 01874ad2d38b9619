use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Worst disagreement found by [`gradient_check_many`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// `(input, coordinate)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn eval_scalar<F>(f: &F, xs: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs
        .iter()
        .map(|x| if track { g.param(x.clone()) } else { g.constant(x.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract(format!(
            "gradient_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of `f` against central differences
/// `(f(x+eps) - f(x-eps)) / 2eps`, coordinate by coordinate, over every
/// input tensor.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn gradient_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let (mut g, vars, out) = eval_scalar(&f, xs, true)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.numel()]))
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut probe = xs.to_vec();
    for (t, grads) in analytic.iter().enumerate() {
        for c in 0..xs[t].numel() {
            let orig = xs[t].data()[c];
            probe[t].data_mut()[c] = orig + eps;
            let (gp, _, op) = eval_scalar(&f, &probe, false)?;
            let fp = gp.value(op).data()[0];
            probe[t].data_mut()[c] = orig - eps;
            let (gm, _, om) = eval_scalar(&f, &probe, false)?;
            let fm = gm.value(om).data()[0];
            probe[t].data_mut()[c] = orig;

            let numeric = (fp - fm) / (2.0 * eps);
            let a = grads[c];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_relative_error || rel.is_nan() {
                report.max_relative_error = rel;
                report.worst = (t, c);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

/// Single-input form of [`gradient_check_many`]; returns the worst relative error.
pub fn gradient_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let report = gradient_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)?;
    Ok(report.max_relative_error)
}
