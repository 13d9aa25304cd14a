//! Finite-difference verification harness for the reverse-mode gradients.

use super::raw::Tensor;
use super::var::Var;
use crate::error::Result;

/// Components where both the analytic gradient and the finite difference
/// are below this are skipped: an exactly-zero gradient leaves nothing but
/// cancellation noise in the finite difference, which would otherwise read
/// as a large relative error.
const NEGLIGIBLE: f64 = 1e-5;

fn rel_error(g: f64, fd: f64) -> f64 {
    if g.abs() < NEGLIGIBLE && fd.abs() < NEGLIGIBLE {
        return 0.0;
    }
    (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8)
}

/// Compares the reverse-mode gradient of a scalar-valued function against
/// central finite differences, component by component. Returns the maximum
/// relative error, with denominator `max(|g|, |g_fd|, 1e-8)`.
///
/// `f` must be smooth at `x` (keep relu inputs away from kinks) and must be
/// a pure function of its argument.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    let leaf = Var::leaf(x.clone());
    let out = f(&leaf)?;
    out.backward()?;
    let analytic = leaf
        .grad()
        .unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols()));

    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let fp = f(&Var::constant(probe.clone()))?.value().item();
        probe.as_mut_slice()[i] = orig - eps;
        let fm = f(&Var::constant(probe.clone()))?.value().item();
        probe.as_mut_slice()[i] = orig;

        let fd = (fp - fm) / (2.0 * eps);
        let g = analytic.as_slice()[i];
        max_rel = max_rel.max(rel_error(g, fd));
    }
    Ok(max_rel)
}

/// Like [`grad_check`] but perturbs several leaves jointly: `f` receives one
/// `Var` per input tensor. Used for end-to-end model checks where every
/// parameter participates.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Var]) -> Result<Var>,
{
    let leaves: Vec<Var> = xs.iter().map(|t| Var::leaf(t.clone())).collect();
    let out = f(&leaves)?;
    out.backward()?;
    let grads: Vec<Tensor> = leaves
        .iter()
        .zip(xs)
        .map(|(l, t)| l.grad().unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols())))
        .collect();

    let mut max_rel = 0.0f64;
    let mut probes: Vec<Tensor> = xs.to_vec();
    for (k, x) in xs.iter().enumerate() {
        for i in 0..x.len() {
            let orig = probes[k].as_slice()[i];
            probes[k].as_mut_slice()[i] = orig + eps;
            let fp = {
                let vars: Vec<Var> = probes.iter().map(|t| Var::constant(t.clone())).collect();
                f(&vars)?.value().item()
            };
            probes[k].as_mut_slice()[i] = orig - eps;
            let fm = {
                let vars: Vec<Var> = probes.iter().map(|t| Var::constant(t.clone())).collect();
                f(&vars)?.value().item()
            };
            probes[k].as_mut_slice()[i] = orig;

            let fd = (fp - fm) / (2.0 * eps);
            let g = grads[k].as_slice()[i];
            max_rel = max_rel.max(rel_error(g, fd));
        }
    }
    Ok(max_rel)
}
