//! Finite-difference verification of graph gradients.

use alloc::string::String;
use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-parameter outcome of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    /// Elements re-evaluated with smaller steps after exceeding the tolerance.
    pub refined: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Options for [`grad_check`].
#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced elements of each parameter.
    pub max_elements: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tol: 1e-4,
            max_elements: None,
        }
    }
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences `(f(p + h) - f(p - h)) / 2h`.
///
/// The relative error of element `i` is `|a_i - n_i| / max(|a_i|, |n_i|, s)`
/// where `s = max(1e-3 * max_j |n_j|, 1e-6 * max(|f|, 1))` with `j` ranging
/// over the checked elements of the same parameter. Entries that are
/// negligible relative to their tensor are judged on the tensor's scale, and
/// exactly-zero gradients (a bias feeding batch norm) on the rounding level
/// of the objective `f`.
///
/// An element whose error exceeds `opts.tol` is re-differenced with steps
/// `h/10`, `h/100` and `h/1000` and keeps the smallest error; the count of such elements
/// is reported per parameter.
pub fn grad_check<F>(params: &[(String, Tensor<f64>)], f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Tensor<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        if g.value(root).numel() != 1 {
            return Err(crate::error::dim_err("grad_check objective", alloc::format!("expected a scalar, got {:?}", g.shape(root))));
        }
        let value = g.value(root).data()[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(root);
        Ok((value, vars.iter().map(|&v| grads.get_or_zeros(&g, v)).collect()))
    };

    let mut values: Vec<Tensor<f64>> = params.iter().map(|p| p.1.clone()).collect();
    let (base, analytic) = eval(&values, true)?;
    if !base.is_finite() {
        return Err(Error::NonFinite(String::from("objective at the unperturbed point")));
    }

    let mut entries = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        if !analytic[pi].is_finite() {
            return Err(Error::NonFinite(name.clone()));
        }
        let n = tensor.numel();
        let count = opts.max_elements.map_or(n, |m| m.min(n));
        let central = |values: &mut [Tensor<f64>], idx: usize, h: f64| -> Result<f64> {
            let orig = values[pi].data()[idx];
            values[pi].data_mut()[idx] = orig + h;
            let (plus, _) = eval(values, false)?;
            values[pi].data_mut()[idx] = orig - h;
            let (minus, _) = eval(values, false)?;
            values[pi].data_mut()[idx] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(name.clone()));
            }
            Ok((plus - minus) / (2.0 * h))
        };
        let mut pairs = Vec::with_capacity(count);
        for c in 0..count {
            let idx = c * n / count;
            pairs.push((idx, analytic[pi].data()[idx], central(&mut values, idx, opts.h)?));
        }
        let scale = pairs.iter().map(|p| p.2.abs()).fold(0.0, f64::max);
        let floor = (1e-3 * scale).max(1e-6 * base.abs().max(1.0));
        let rel = |a: f64, num: f64| (a - num).abs() / a.abs().max(num.abs()).max(floor);
        let mut refined = 0;
        let mut max_rel = 0.0f64;
        for &(idx, a, num) in &pairs {
            let mut err = rel(a, num);
            if err > opts.tol {
                // a piecewise-linear kink within h of the point spoils the central difference
                refined += 1;
                for div in [10.0, 100.0, 1000.0] {
                    err = err.min(rel(a, central(&mut values, idx, opts.h / div)?));
                }
            }
            max_rel = max_rel.max(err);
        }
        entries.push(GradCheckEntry {
            name: name.clone(),
            checked: count,
            refined,
            max_rel_error: max_rel,
        });
    }
    let max_rel_error = entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        entries,
        max_rel_error,
        tol: opts.tol,
        passed: max_rel_error <= opts.tol,
    })
}
