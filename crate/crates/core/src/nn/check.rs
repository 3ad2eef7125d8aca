//! Central finite-difference gradient checking.

use super::{Graph, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input, element, analytic, numeric) of the worst probe.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub passed: bool,
}

/// Compares analytic gradients of the scalar built by `f` against central
/// differences with step `h = 1e-5`. At most `max_probes` evenly spaced
/// elements of each input are perturbed.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tol: f64, max_probes: usize) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    grad_check_with_step(f, inputs, tol, max_probes, FD_STEP)
}

/// [`grad_check`] with a caller-chosen step. Smaller steps lower the chance
/// of straddling a leaky-ReLU kink when one parameter feeds many sites.
pub fn grad_check_with_step<F>(f: F, inputs: &[Tensor<f64>], tol: f64, max_probes: usize, step: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).data[0]
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars);
    g.backward(out);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape)))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None, passed: true };
    let mut vals = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let n = t.len();
        let stride = n.div_ceil(max_probes.max(1)).max(1);
        for j in (0..n).step_by(stride) {
            let orig = vals[i].data[j];
            vals[i].data[j] = orig + step;
            let up = eval(&vals);
            vals[i].data[j] = orig - step;
            let down = eval(&vals);
            vals[i].data[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i].data[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((i, j, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    report
}
