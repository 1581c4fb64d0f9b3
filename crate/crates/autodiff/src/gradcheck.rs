//! Central finite-difference oracle for tape gradients.

use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::params::ParamStore;
use crate::rng::SeededRng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub seed: u64,
    /// Denominator floor for the relative error.
    pub abs_floor: f64,
    /// Check at most this many randomly chosen elements per tensor.
    pub max_elements_per_tensor: Option<usize>,
    /// Applied to the analytic gradients before comparison. Used to check
    /// that a corrupted gradient is caught.
    pub tamper: Option<fn(&mut BTreeMap<String, Tensor>)>,
    /// When set, an element whose error exceeds this value is re-measured
    /// with half the step. If the two central differences disagree the
    /// stencil straddles a non-differentiable point, and the element is
    /// listed in `kinks` instead of counted in the error.
    pub kink_threshold: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            seed: 0,
            abs_floor: 1e-6,
            max_elements_per_tensor: None,
            tamper: None,
            kink_threshold: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor and flat element index holding the largest error.
    pub worst: Option<(String, usize)>,
    pub per_tensor: BTreeMap<String, f64>,
    pub elements_checked: usize,
    /// Elements skipped because the loss is not smooth around them.
    pub kinks: Vec<(String, usize)>,
}

/// Relative error with a floor on the denominator.
pub fn relative_error(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(abs_floor)
}

fn eval_loss<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(AutodiffError::NonScalarLoss(v.shape().to_vec()));
    }
    let x = v.data()[0];
    if !x.is_finite() {
        return Err(AutodiffError::NonFiniteLoss(x));
    }
    Ok(x)
}

fn central<F>(
    f: &F,
    work: &mut ParamStore,
    name: &str,
    k: usize,
    orig: f64,
    step: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    work.get_mut(name).unwrap().data_mut()[k] = orig + step;
    let up = eval_loss(f, work)?;
    work.get_mut(name).unwrap().data_mut()[k] = orig - step;
    let down = eval_loss(f, work)?;
    work.get_mut(name).unwrap().data_mut()[k] = orig;
    Ok((up - down) / (2.0 * step))
}

/// Compares the tape gradient of `f` against central differences for every
/// parameter element (or a seeded sample of them).
pub fn grad_check<F>(f: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(opts.step > 1e-7 && opts.step < 1e-3) {
        return Err(AutodiffError::InvalidArgument(format!(
            "finite-difference step {} outside (1e-7, 1e-3)",
            opts.step
        )));
    }
    let analytic = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, params)?;
        let x = tape.scalar_value(loss);
        if !x.is_finite() {
            return Err(AutodiffError::NonFiniteLoss(x));
        }
        let mut grads = tape.backward(loss, params)?;
        if let Some(f) = opts.tamper {
            f(&mut grads);
        }
        grads
    };

    let mut rng = SeededRng::new(opts.seed);
    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let n = params.get(&name).map_or(0, |t| t.len());
        let mut elems: Vec<usize> = (0..n).collect();
        if let Some(cap) = opts.max_elements_per_tensor {
            if cap < n {
                rng.shuffle(&mut elems);
                elems.truncate(cap);
                elems.sort_unstable();
            }
        }
        let mut worst_here: f64 = 0.0;
        for k in elems {
            let orig = params.get(&name).unwrap().data()[k];
            work.get_mut(&name).unwrap().data_mut()[k] = orig + opts.step;
            let numeric = central(&f, &mut work, &name, k, orig, opts.step)?;
            let a = analytic[&name].data()[k];
            let err = relative_error(a, numeric, opts.abs_floor);
            report.elements_checked += 1;
            if let Some(threshold) = opts.kink_threshold {
                if err > threshold {
                    let half = central(&f, &mut work, &name, k, orig, opts.step / 2.0)?;
                    if relative_error(half, numeric, opts.abs_floor) > threshold {
                        report.kinks.push((name.clone(), k));
                        continue;
                    }
                }
            }
            worst_here = worst_here.max(err);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), k));
            }
        }
        report.per_tensor.insert(name, worst_here);
    }
    Ok(report)
}
