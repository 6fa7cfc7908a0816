//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::graph::{Graph, NodeId};
use super::params::{ParamHandles, ParamStore};
use crate::error::{Error, Result};
use crate::rng::rng_for;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Maximum accepted relative error.
    pub tol: f64,
    /// Coordinates checked per parameter tensor (all when the tensor is
    /// smaller).
    pub samples_per_param: usize,
    /// Gradients smaller than this are compared absolutely rather than
    /// relatively; finite differences carry roundoff of order
    /// `machine_eps * |loss| / eps`.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-3,
            samples_per_param: 32,
            abs_floor: 1e-7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Coordinate holding the worst error.
    pub worst_index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tol
    }

    pub fn coordinates_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compare analytic gradients of the scalar built by `build` against
/// central differences. Failures are reported, not raised; only invalid
/// options or a failing forward pass produce an error.
pub fn grad_check<F>(params: &ParamStore<f64>, build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamHandles) -> Result<NodeId>,
{
    if !(opts.eps.is_finite() && opts.eps > 0.0) {
        return Err(Error::param(format!("finite-difference step must be positive, got {}", opts.eps)));
    }
    if opts.samples_per_param == 0 {
        return Err(Error::param("samples_per_param must be at least 1"));
    }

    let eval = |p: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let h = p.attach(&mut g)?;
        let loss = build(&mut g, &h)?;
        Ok(g.value(loss).item())
    };

    let analytic = {
        let mut g = Graph::new();
        let h = params.attach(&mut g)?;
        let loss = build(&mut g, &h)?;
        g.backward(loss)?
    };

    let mut work = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let n = tensor.numel();
        let coords: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut rng = rng_for(opts.seed, &[pi as u64]);
            let mut v = sample(&mut rng, n, opts.samples_per_param).into_vec();
            v.sort_unstable();
            v
        };
        let grad = analytic.get(name).expect("every parameter has a gradient");
        let mut worst = (0.0f64, 0usize);
        for &c in &coords {
            let orig = tensor.data()[c];
            work.get_mut(name).unwrap().data_mut()[c] = orig + opts.eps;
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[c] = orig - opts.eps;
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let err = relative_error(grad.data()[c], numeric, opts.abs_floor);
            if err > worst.0 {
                worst = (err, c);
            }
        }
        report.push(ParamCheck {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport {
        params: report,
        tol: opts.tol,
    })
}
