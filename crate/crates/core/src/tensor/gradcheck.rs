//! Central-difference verification of analytic gradients (float64).

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor: errors on gradients smaller than this are
    /// measured against the floor instead of the gradient magnitude.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-5,
            floor: 1e-4,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }
}

#[derive(Clone, Debug)]
pub struct InputReport {
    pub name: String,
    pub numel: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tol
    }

    pub fn elements(&self) -> usize {
        self.inputs.iter().map(|r| r.numel).sum()
    }

    pub fn worst(&self) -> Option<&InputReport> {
        self.inputs
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks a scalar function built on a graph from the given inputs.
///
/// `f` receives one differentiable leaf per input tensor and must return a
/// scalar node.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], config: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| g.input(t.clone().with_requires_grad(true)))
            .collect();
        let root = f(&mut g, &vars)?;
        let loss = g.value(root).data()[0];
        if !want_grad {
            return Ok((loss, Vec::new()));
        }
        g.backward(root)?;
        let grads = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| {
                g.grad_slice(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        Ok((loss, grads))
    };
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    check(inputs.to_vec(), &names, eval, config)
}

/// Checks every parameter of `store` for the scalar built by `f`.
pub fn grad_check_params<F>(
    f: F,
    store: &ParamStore<f64>,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let ids: Vec<_> = store.ids().collect();
    let names: Vec<String> = ids.iter().map(|&id| store.name(id).to_string()).collect();
    let values: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();
    let eval = |values: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut s = store.clone();
        for (&id, t) in ids.iter().zip(values) {
            s.set(id, t.clone())?;
        }
        let mut g = Graph::new();
        let root = f(&mut g, &s)?;
        let loss = g.value(root).data()[0];
        if !want_grad {
            return Ok((loss, Vec::new()));
        }
        g.backward(root)?;
        let grads = ids
            .iter()
            .zip(values)
            .map(|(&id, t)| {
                g.param_grad(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect();
        Ok((loss, grads))
    };
    check(values, &names, eval, config)
}

fn check<E>(
    mut values: Vec<Tensor<f64>>,
    names: &[String],
    eval: E,
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    E: Fn(&[Tensor<f64>], bool) -> Result<(f64, Vec<Vec<f64>>)>,
{
    let (_, analytic) = eval(&values, true)?;
    for (input, g) in analytic.iter().enumerate() {
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                which: "analytic",
                input,
                index,
            });
        }
    }
    let mut reports = Vec::with_capacity(values.len());
    for input in 0..values.len() {
        let mut report = InputReport {
            name: names[input].clone(),
            numel: values[input].numel(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for index in 0..values[input].numel() {
            let orig = values[input].data()[index];
            values[input].data_mut()[index] = orig + config.step;
            let (plus, _) = eval(&values, false)?;
            values[input].data_mut()[index] = orig - config.step;
            let (minus, _) = eval(&values, false)?;
            values[input].data_mut()[index] = orig;
            let numeric = (plus - minus) / (2.0 * config.step);
            if !numeric.is_finite() {
                return Err(Error::NonFiniteGradient {
                    which: "numeric",
                    input,
                    index,
                });
            }
            let a = analytic[input][index];
            let err = relative_error(a, numeric, config.floor);
            if err > report.max_rel_error || index == 0 {
                report.max_rel_error = err;
                report.worst_index = index;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport {
        inputs: reports,
        tol: config.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::from_f64([3, 2], &[0.5, -1.0, 2.0, 0.25, 1.5, -0.75]).unwrap();
        let x = Tensor::from_f64([2, 3], &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0]).unwrap();
        let report = grad_check(
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                Ok(g.sum(y))
            },
            &[x, w],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-9, "{:?}", report);
        assert!(report.passed());
    }

    #[test]
    fn broken_gradient_is_caught() {
        // The function is x^2 but the value fed to the loss is computed so
        // that the analytic path sees only x * stop_grad(x): half the slope.
        let x = Tensor::from_f64([3], &[0.7, -1.3, 2.1]).unwrap();
        let report = grad_check(
            |g, v| {
                let frozen = g.constant(g.value(v[0]).clone());
                let sq = g.mul(v[0], frozen)?;
                Ok(g.sum(sq))
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 0.4);
    }

    #[test]
    fn non_finite_gradient_names_element() {
        let x = Tensor::from_f64([3], &[1.0, -1.0, 0.0]).unwrap();
        let err = grad_check(
            |g, v| {
                // Scaling by infinity makes every analytic gradient infinite.
                let s = g.scale(v[0], f64::INFINITY);
                Ok(g.sum(s))
            },
            &[x],
            GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 0, .. }), "{err}");
    }
}
