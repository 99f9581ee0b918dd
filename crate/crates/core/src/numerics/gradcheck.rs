//! Central finite-difference certification of hand-written backward passes.
//!
//! The scalar loss is `sum(output * cotangent)` with a seeded Gaussian
//! cotangent, so a backward pass that is wrong only along the all-ones
//! direction cannot hide behind cancellation.

use super::Tensor;
use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_err: f64,
    /// Which input tensor holds the worst element.
    pub argmax_input: usize,
    /// Flat index of the worst element within that input.
    pub argmax_index: usize,
    pub eps: f64,
    pub probes: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Checker settings. Inputs larger than `max_probes` elements are probed at a
/// seeded random subset of positions; the analytic gradient is always
/// computed in full.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub eps: f64,
    pub seed: u64,
    pub max_probes: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-4,
            seed: 0,
            max_probes: 256,
        }
    }
}

impl GradCheck {
    pub fn new(eps: f64, seed: u64) -> Self {
        GradCheck {
            eps,
            seed,
            ..Default::default()
        }
    }

    pub fn with_max_probes(mut self, max_probes: usize) -> Self {
        self.max_probes = max_probes;
        self
    }

    /// `forward` maps inputs to an output; `backward` maps inputs and an
    /// output cotangent to one gradient per input.
    pub fn run<F, B>(
        &self,
        op_name: &str,
        inputs: &[Tensor],
        forward: F,
        backward: B,
    ) -> Result<GradCheckReport>
    where
        F: Fn(&[Tensor]) -> Result<Tensor>,
        B: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
    {
        if !(self.eps > 0.0) {
            return Err(Error::arg("grad_check", format!("eps must be positive, got {}", self.eps)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let out = forward(inputs)?;
        out.ensure_finite("grad_check forward")?;
        let cot = Tensor::randn(out.shape(), 1.0, &mut rng);
        let grads = backward(inputs, &cot)?;
        if grads.len() != inputs.len() {
            return Err(Error::arg(
                "grad_check",
                format!("backward returned {} gradients for {} inputs", grads.len(), inputs.len()),
            ));
        }
        let loss = |xs: &[Tensor]| -> Result<f64> { forward(xs)?.dot(&cot) };

        let mut report = GradCheckReport {
            op_name: op_name.to_string(),
            max_rel_err: 0.0,
            argmax_input: 0,
            argmax_index: 0,
            eps: self.eps,
            probes: 0,
        };
        let mut work: Vec<Tensor> = inputs.to_vec();
        for (k, (input, grad)) in inputs.iter().zip(&grads).enumerate() {
            if grad.shape() != input.shape() {
                return Err(Error::shape(
                    "grad_check",
                    format!("gradient {:?} for input {:?}", grad.shape(), input.shape()),
                ));
            }
            grad.ensure_finite("grad_check backward")?;
            let n = input.len();
            let probes: Vec<usize> = if n <= self.max_probes {
                (0..n).collect()
            } else {
                let mut idx = rand::seq::index::sample(&mut rng, n, self.max_probes).into_vec();
                idx.sort_unstable();
                idx
            };
            for &i in &probes {
                let orig = input.data()[i];
                work[k].data_mut()[i] = orig + self.eps;
                let plus = loss(&work)?;
                work[k].data_mut()[i] = orig - self.eps;
                let minus = loss(&work)?;
                work[k].data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * self.eps);
                let analytic = grad.data()[i];
                if !numeric.is_finite() {
                    return Err(Error::NonFinite { op: "grad_check" });
                }
                let rel = (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs());
                if rel > report.max_rel_err {
                    report.max_rel_err = rel;
                    report.argmax_input = k;
                    report.argmax_index = i;
                }
            }
            report.probes += probes.len();
        }
        Ok(report)
    }
}

/// Convenience wrapper around [`GradCheck::run`] with the default probe cap.
pub fn grad_check<F, B>(
    op_name: &str,
    inputs: &[Tensor],
    eps: f64,
    seed: u64,
    forward: F,
    backward: B,
) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
    B: Fn(&[Tensor], &Tensor) -> Result<Vec<Tensor>>,
{
    GradCheck::new(eps, seed).run(op_name, inputs, forward, backward)
}
