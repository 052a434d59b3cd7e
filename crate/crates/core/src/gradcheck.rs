//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes, so it stays
//! independent of the backward rules it checks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared by absolute error scaled by it.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tolerance: f64,
    /// `(tensor, entry)` of the largest relative error. Tensors are the
    /// inputs in order, then the store's parameters by id.
    pub worst: (usize, usize),
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tolerance: f64,
    /// Check at most this many entries per input (evenly strided); `None`
    /// checks all of them.
    pub max_entries: Option<usize>,
    /// Added to every analytic entry; only used to prove the checker fails.
    pub perturb: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            max_entries: None,
            perturb: 0.0,
        }
    }
}

impl GradCheck {
    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    pub fn with_tolerance(mut self, tol: f64) -> Self {
        self.tolerance = tol;
        self
    }

    pub fn with_max_entries(mut self, n: usize) -> Self {
        self.max_entries = Some(n);
        self
    }

    pub fn with_perturbation(mut self, p: f64) -> Self {
        self.perturb = p;
        self
    }

    /// Compare d loss / d input for every tensor in `inputs`, where `f`
    /// builds a scalar loss from leaves holding those inputs.
    pub fn run<F>(&self, name: &str, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        self.run_with_params(name, &ParamStore::new(), inputs, |t, _, v| f(t, v))
    }

    /// Like [`GradCheck::run`], additionally checking every parameter of
    /// `store` loaded through [`Tape::param`].
    pub fn run_with_params<F>(
        &self,
        name: &str,
        store: &ParamStore<f64>,
        inputs: &[Tensor<f64>],
        f: F,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = f(&mut tape, store, &vars)?;
        tape.backward(loss)?;
        let mut analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        for (id, g) in tape.param_grads(store.len()).into_iter().enumerate() {
            analytic.push(g.unwrap_or_else(|| Tensor::zeros(store.tensor(id).shape())));
        }
        drop(tape);

        let eval = |ins: &[Tensor<f64>], ps: &ParamStore<f64>| -> Result<f64> {
            let mut tape = Tape::inference();
            let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), false)).collect();
            let loss = f(&mut tape, ps, &vars)?;
            let v = tape.value(loss).item();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name}: loss {v}")));
            }
            Ok(v)
        };

        let mut work: Vec<Tensor<f64>> = inputs.to_vec();
        let mut ps = store.clone();
        let mut report = GradCheckReport {
            name: name.to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            tolerance: self.tolerance,
            worst: (0, 0),
        };
        let n_in = work.len();
        for i in 0..analytic.len() {
            let n = analytic[i].numel();
            let stride = match self.max_entries {
                Some(m) if m < n => n.div_ceil(m),
                _ => 1,
            };
            for j in (0..n).step_by(stride) {
                let mut probe = |delta: f64| -> Result<f64> {
                    let slot = if i < n_in {
                        &mut work[i].data_mut()[j]
                    } else {
                        &mut ps.tensor_mut(i - n_in).data_mut()[j]
                    };
                    let orig = *slot;
                    *slot = orig + delta;
                    let v = eval(&work, &ps);
                    let slot = if i < n_in {
                        &mut work[i].data_mut()[j]
                    } else {
                        &mut ps.tensor_mut(i - n_in).data_mut()[j]
                    };
                    *slot = orig;
                    v
                };
                let up = probe(self.step)?;
                let down = probe(-self.step)?;
                let numeric = (up - down) / (2.0 * self.step);
                let a = analytic[i].data()[j] + self.perturb;
                let e = rel_err(a, numeric);
                if e > report.max_rel_err {
                    report.max_rel_err = e;
                    report.worst = (i, j);
                }
                report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
                report.checked += 1;
            }
        }
        Ok(report)
    }
}

/// Seeded standard-normal tensor.
pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("consistent shape")
}

/// `sum(out * r)` with fixed random `r`, so every output entry contributes a
/// distinct weight to the scalar under test.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(randn(tape.shape(out), seed ^ 0x5eed));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_uses_floor_for_tiny_values() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let x = randn(&[3], 1);
        let ok = GradCheck::default()
            .run("square", &[x.clone()], |t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.sum(y))
            })
            .unwrap();
        assert!(ok.passed(), "{ok:?}");
        let bad = GradCheck::default()
            .with_perturbation(1e-2)
            .run("square", &[x], |t, v| {
                let y = t.mul(v[0], v[0])?;
                Ok(t.sum(y))
            })
            .unwrap();
        assert!(!bad.passed());
    }
}
