//! Central finite-difference oracle for analytic gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Var};

/// Finite-difference step on 64-bit values.
pub const FD_STEP: f64 = 1e-4;

/// Magnitude below which errors are measured absolutely rather than relatively.
///
/// Central differences at step 1e-4 carry O(1e-9) truncation error, so
/// relative error on gradients much smaller than this floor measures the
/// oracle's noise rather than the analytic rule.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

/// Relative error of one analytic/numeric pair.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: BTreeMap<String, ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .values()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, &ParamCheck)> {
        self.params
            .iter()
            .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
            .map(|(k, v)| (k.as_str(), v))
    }
}

fn eval<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    g.value(loss).item()
}

/// Compares the analytic gradient of the scalar built by `f` against central
/// differences for every element of every parameter in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, tolerance: f64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let first = eval(&f, params)?;
    let second = eval(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Determinism { first, second });
    }

    let mut g = Graph::new();
    let loss = f(&mut g, params)?;
    let analytic = g.backward(loss)?.params();

    let mut probe = params.clone();
    let mut checks = BTreeMap::new();
    for (name, value) in params.iter() {
        let zeros;
        let grad = match analytic.get(name) {
            Some(grad) => grad,
            None => {
                zeros = crate::tensor::Tensor::zeros(value.shape().to_vec());
                &zeros
            }
        };
        let mut check = ParamCheck {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..value.len() {
            let base = value.data()[i];
            let plus = perturbed(&mut probe, name, i, base + FD_STEP, &f)?;
            let minus = perturbed(&mut probe, name, i, base - FD_STEP, &f)?;
            restore(&mut probe, name, value);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || i == 0 {
                check = ParamCheck {
                    max_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        checks.insert(name.to_owned(), check);
    }
    let passed = checks.values().all(|c| c.max_rel_error <= tolerance);
    Ok(GradReport {
        params: checks,
        tolerance,
        passed,
    })
}

fn perturbed<F>(probe: &mut ParamStore, name: &str, i: usize, v: f64, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let t = probe.get(name)?;
    let mut data = t.data().to_vec();
    data[i] = v;
    let replaced = crate::tensor::Tensor::new(t.shape().to_vec(), data)?;
    probe.insert(name, replaced);
    eval(f, probe)
}

fn restore(probe: &mut ParamStore, name: &str, original: &crate::tensor::Tensor) {
    probe.insert(name, original.clone());
}
