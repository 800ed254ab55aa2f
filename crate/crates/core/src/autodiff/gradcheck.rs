//! Central finite-difference gradient checking.

use rand::seq::index;

use crate::autodiff::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Checks the gradient of a scalar function of one tensor and returns the
/// maximum relative error over all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let errs = GradCheck::new(eps).run(std::slice::from_ref(x), |g, vars| f(g, vars[0]))?;
    Ok(errs[0])
}

/// Multi-input gradient check, optionally sampling a subset of coordinates
/// per input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Check at most this many coordinates of each input (all if `None`).
    pub max_coords: Option<usize>,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl GradCheck {
    pub fn new(step: f64) -> Self {
        GradCheck {
            step,
            max_coords: None,
            seed: 0,
        }
    }

    pub fn sample(mut self, max_coords: usize, seed: u64) -> Self {
        self.max_coords = Some(max_coords);
        self.seed = seed;
        self
    }

    fn eval<F>(&self, inputs: &[Tensor], f: &F) -> Result<f64>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.len() != 1 {
            return Err(Error::invalid("gradient check needs a scalar function"));
        }
        Ok(v.item())
    }

    /// Returns, per input, the maximum relative error between the analytic
    /// and central-difference gradients.
    pub fn run<F>(&self, inputs: &[Tensor], f: F) -> Result<Vec<f64>>
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var>,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let grads = g.backward(out)?;

        let mut errors = Vec::with_capacity(inputs.len());
        let mut probe: Vec<Tensor> = inputs.to_vec();
        for (which, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var);
            let n = inputs[which].len();
            let coords: Vec<usize> = match self.max_coords {
                Some(k) if k < n => {
                    let mut r = rng::indexed_stream(self.seed, "gradcheck", which as u64);
                    let mut picked = index::sample(&mut r, n, k).into_vec();
                    picked.sort_unstable();
                    picked
                }
                _ => (0..n).collect(),
            };
            let mut worst: f64 = 0.0;
            for i in coords {
                let orig = probe[which].data()[i];
                probe[which].data_mut()[i] = orig + self.step;
                let plus = self.eval(&probe, &f)?;
                probe[which].data_mut()[i] = orig - self.step;
                let minus = self.eval(&probe, &f)?;
                probe[which].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.step);
                worst = worst.max(relative_error(analytic.data()[i], numeric));
            }
            errors.push(worst);
        }
        Ok(errors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(&[4], vec![0.3, -1.2, 2.0, 0.7]).unwrap();
        let w = Tensor::new(&[4], vec![1.5, -0.5, 0.25, 2.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let wv = g.constant(w.clone());
                let p = g.mul(v, wv)?;
                Ok(g.sum(p))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err <= 1e-10, "linear grad err {err}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0 + 1e-6) - 1e-6 / (2.0 + 1e-6)).abs() < 1e-15);
    }
}
