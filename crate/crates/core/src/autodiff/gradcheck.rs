//! Central finite-difference check of analytic gradients.

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so entries whose true
    /// gradient is zero are compared on an absolute scale.
    pub floor: f64,
    /// Elements probed per input; `None` checks every element.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_elements: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

/// Relative discrepancy used by the check: `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of `f` against central differences for each
/// named input. `f` receives one leaf per input (all `requires_grad`) and must
/// return a scalar.
pub fn gradcheck<T, F>(
    inputs: &[(&str, Tensor<T>)],
    f: F,
    opts: GradcheckOptions,
) -> Result<GradcheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0].f64())
    };

    let base: Vec<Tensor<T>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut g = Graph::new();
    let vars: Vec<Var> = base.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = T::c(opts.step);
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, (name, t)) in inputs.iter().enumerate() {
        let analytic = match g.grad(vars[k]) {
            Some(gr) => gr.clone(),
            None => Tensor::zeros(t.shape()),
        };
        let idx: Vec<usize> = match opts.max_elements {
            Some(m) if m < t.len() => {
                let mut v = sample(&mut rng, t.len(), m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..t.len()).collect(),
        };
        let mut values = base.clone();
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        for &i in &idx {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + h;
            let fp = eval(&values)?;
            values[k].data_mut()[i] = orig - h;
            let fm = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            let a = analytic.data()[i].f64();
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::NonFinite(format!("gradcheck on {name}[{i}]")));
            }
            max_rel = max_rel.max(relative_error(a, numeric, opts.floor));
            max_abs = max_abs.max((a - numeric).abs());
        }
        reports.push(InputReport {
            name: name.to_string(),
            checked: idx.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradcheckReport { inputs: reports })
}

/// `Σ out ⊙ weights`: projects a tensor output onto a fixed random direction so
/// that a non-scalar op can be checked through a scalar loss.
pub fn project<T: Scalar>(g: &mut Graph<T>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(g.value(out).shape(), 0.0, 1.0, &mut rng);
    let w = g.constant(w);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}
