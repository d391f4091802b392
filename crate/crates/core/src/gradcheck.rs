//! Central finite-difference oracle for the tape's gradients.

use serde::Serialize;

use crate::autodiff::{Fault, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub pass: bool,
    pub epsilon: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_abs_err)
            .fold(0.0, f64::max)
    }
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Oracle settings. `only` restricts which parameters are probed;
/// `max_entries` strides through large tensors instead of probing every entry.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub epsilon: f64,
    pub tolerance: f64,
    pub only: Option<Vec<String>>,
    pub max_entries: Option<usize>,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl GradCheck {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            tolerance: DEFAULT_TOLERANCE,
            only: None,
            max_entries: None,
            fault: None,
        }
    }

    pub fn tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    pub fn only<S: Into<String>>(mut self, names: impl IntoIterator<Item = S>) -> Self {
        self.only = Some(names.into_iter().map(Into::into).collect());
        self
    }

    pub fn max_entries(mut self, n: usize) -> Self {
        self.max_entries = Some(n);
        self
    }

    #[doc(hidden)]
    pub fn fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    /// Checks a loss over bare tensors; the closure receives one leaf per
    /// entry of `params`, in order.
    pub fn run<F>(&self, loss_fn: F, params: &[Tensor]) -> Result<GradReport>
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    {
        let mut store = ParamStore::new();
        for (i, p) in params.iter().enumerate() {
            store.insert(format!("p{i:03}"), p.clone());
        }
        let n = params.len();
        self.run_store(&store, |g| {
            let vars = (0..n)
                .map(|i| g.param(&format!("p{i:03}")))
                .collect::<Result<Vec<_>>>()?;
            loss_fn(&mut g.tape, &vars)
        })
    }

    /// Checks a loss built from a [`ParamStore`].
    pub fn run_store<F>(&self, store: &ParamStore, loss_fn: F) -> Result<GradReport>
    where
        F: Fn(&mut Graph) -> Result<Var>,
    {
        if !(1e-7..=1e-3).contains(&self.epsilon) {
            return Err(Error::EpsilonOutOfRange(self.epsilon));
        }
        let eval = |s: &ParamStore| -> Result<f64> {
            let mut g = Graph::new(s);
            let loss = loss_fn(&mut g)?;
            Ok(g.tape.scalar(loss))
        };

        let mut g = Graph::with_fault(store, self.fault);
        let loss = loss_fn(&mut g)?;
        let base = g.tape.scalar(loss);
        g.tape.backward(loss)?;
        let analytic = g.param_grads();
        if eval(store)?.to_bits() != base.to_bits() {
            return Err(Error::NonDeterministicLoss);
        }

        let mut probe = store.clone();
        let mut reports = Vec::new();
        for (name, tensor) in store.iter() {
            if let Some(only) = &self.only {
                if !only.iter().any(|o| o == name) {
                    continue;
                }
            }
            let numel = tensor.numel();
            let stride = match self.max_entries {
                Some(m) if numel > m => numel.div_ceil(m),
                _ => 1,
            };
            let mut report = ParamReport {
                name: name.to_string(),
                max_rel_err: 0.0,
                max_abs_err: 0.0,
                checked: 0,
            };
            for i in (0..numel).step_by(stride) {
                let orig = tensor.data()[i];
                probe.get_mut(name).expect("cloned store").data_mut()[i] = orig + self.epsilon;
                let plus = eval(&probe)?;
                probe.get_mut(name).expect("cloned store").data_mut()[i] = orig - self.epsilon;
                let minus = eval(&probe)?;
                probe.get_mut(name).expect("cloned store").data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.epsilon);
                let a = analytic[name][i];
                report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
                report.max_rel_err = report.max_rel_err.max(relative_error(a, numeric));
                report.checked += 1;
            }
            reports.push(report);
        }
        let pass = reports.iter().all(|r| r.max_rel_err < self.tolerance);
        Ok(GradReport {
            params: reports,
            pass,
            epsilon: self.epsilon,
            tolerance: self.tolerance,
        })
    }
}

/// Finite-difference check of `loss_fn` at the default tolerance.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], epsilon: f64) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    GradCheck::new(epsilon).run(loss_fn, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn sum_sq(t: &mut Tape, v: &[Var]) -> Result<Var> {
        let sq = t.mul(v[0], v[0])?;
        Ok(t.sum(sq))
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let r = grad_check(sum_sq, &[x], 1e-5).unwrap();
        assert!(r.pass);
        assert!(r.max_rel_err() < 1e-6, "{}", r.max_rel_err());
        assert_eq!(r.params[0].checked, 3);
    }

    #[test]
    fn epsilon_range_is_enforced() {
        let x = Tensor::from_vec(vec![1.0]);
        assert!(matches!(
            grad_check(sum_sq, &[x.clone()], 1e-2),
            Err(Error::EpsilonOutOfRange(_))
        ));
        assert!(matches!(
            grad_check(sum_sq, &[x], 1e-9),
            Err(Error::EpsilonOutOfRange(_))
        ));
    }

    #[test]
    fn unfrozen_randomness_is_rejected() {
        let calls = Cell::new(0u32);
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let err = grad_check(
            |t, v| {
                calls.set(calls.get() + 1);
                let s = t.scale(v[0], 1.0 + calls.get() as f64 * 1e-3);
                Ok(t.sum(s))
            },
            &[x],
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministicLoss));
        assert_eq!(err.to_string(), "oracle requires frozen randomness");
    }

    #[test]
    fn corrupted_backward_is_caught() {
        let a = Tensor::matrix(2, 3, vec![0.1, -0.4, 0.3, 0.9, 0.2, -0.7]).unwrap();
        let b = Tensor::matrix(3, 2, vec![0.5, 0.1, -0.3, 0.8, 0.6, -0.2]).unwrap();
        let f = |t: &mut Tape, v: &[Var]| {
            let m = t.matmul(v[0], v[1])?;
            let h = t.tanh(m);
            Ok(t.sum(h))
        };
        assert!(
            GradCheck::new(1e-5)
                .run(f, &[a.clone(), b.clone()])
                .unwrap()
                .pass
        );
        let bad = GradCheck::new(1e-5)
            .fault(Fault::MatMulLhsScale(1.01))
            .run(f, &[a, b])
            .unwrap();
        assert!(!bad.pass);
        assert!(bad.params[0].max_rel_err > 1e-3);
        assert!(bad.params[1].max_rel_err < 1e-4);
    }
}
