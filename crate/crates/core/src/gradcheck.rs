//! Central finite-difference validation of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;

/// A scalar loss over a parameter store, evaluated in 64-bit.
pub trait Checkable {
    fn store(&self) -> &ParamStore<f64>;
    fn store_mut(&mut self) -> &mut ParamStore<f64>;
    fn loss(&self, g: &mut Graph<f64>) -> Result<NodeId>;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step; must lie in `[1e-6, 1e-4]`.
    pub step: f64,
    /// Denominator floor for the relative error of near-zero gradients.
    pub floor: f64,
    /// Rectifier inputs closer than this to zero trigger a resample.
    pub kink_margin: f64,
    /// Normalized rows with a smaller standard deviation trigger a resample.
    pub min_norm_spread: f64,
    /// Multiplies the analytic gradient before comparing. Only used to show
    /// that the harness catches a broken backward pass.
    pub corrupt_scale: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-4,
            kink_margin: 1e-3,
            min_norm_spread: 0.02,
            corrupt_scale: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub elements: usize,
    pub relu_margin: f64,
    pub norm_spread: f64,
}

fn loss_value(case: &impl Checkable) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new(case.store());
    let l = case.loss(&mut g)?;
    let v = g.value(l);
    if v.len() != 1 {
        return Err(Error::Dimension(format!("loss has shape {:?}", v.shape())));
    }
    let v = v.data()[0];
    if !v.is_finite() {
        return Err(Error::Numerical(format!("gradient check hit non-finite loss {v}")));
    }
    Ok((v, g.relu_margin(), g.norm_spread()))
}

/// Compares the taped gradient of every parameter element with central
/// differences and returns the largest relative error.
pub fn grad_check(case: &mut impl Checkable, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&opts.step) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-6, 1e-4]",
            opts.step
        )));
    }
    let (_, relu_margin, norm_spread) = loss_value(case)?;
    let grads = {
        let mut g = Graph::new(case.store());
        let l = case.loss(&mut g)?;
        g.backward(l)?
    };
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        elements: 0,
        relu_margin,
        norm_spread,
    };
    let ids: Vec<_> = case.store().ids().collect();
    for id in ids {
        let n = case.store().get(id).value.len();
        let analytic: Vec<f64> = match grads.get(id) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; n],
        };
        for i in 0..n {
            let orig = case.store().get(id).value.data()[i];
            case.store_mut().value_mut(id).data_mut()[i] = orig + opts.step;
            let plus = loss_value(case);
            case.store_mut().value_mut(id).data_mut()[i] = orig - opts.step;
            let minus = loss_value(case);
            case.store_mut().value_mut(id).data_mut()[i] = orig;
            let numeric = (plus?.0 - minus?.0) / (2.0 * opts.step);
            let a = analytic[i] * opts.corrupt_scale.unwrap_or(1.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.elements += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = case.store().get(id).name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Runs [`grad_check`] on cases drawn from `make(seed)`, `make(seed + 1)`, …
/// until one keeps every rectifier input at least `kink_margin` from zero and
/// every normalized row spread at least `min_norm_spread`.
pub fn grad_check_resampled<C: Checkable>(
    mut make: impl FnMut(u64) -> Result<C>,
    seed: u64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    const ATTEMPTS: u64 = 64;
    for attempt in 0..ATTEMPTS {
        let mut case = make(seed.wrapping_add(attempt * 7919))?;
        let (_, margin, spread) = loss_value(&case)?;
        if margin >= opts.kink_margin && spread >= opts.min_norm_spread {
            return grad_check(&mut case, opts);
        }
    }
    Err(Error::Numerical(format!(
        "no sample within {ATTEMPTS} attempts kept rectifier inputs {} away from zero \
         and normalized rows spread by {}",
        opts.kink_margin, opts.min_norm_spread
    )))
}
