//! Small closed-form problems for checking the descent behavior of score
//! updates and of integrated multi-loss steps.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::integration::{integrate_block, IntegrationConfig};
use crate::numerics::Tensor;
use crate::prunable::{build_mask, PrunableLinear, ScoreGradient, ScoredTensor};

/// Two convex quadratics `0.5 (x - c_k)^T A_k (x - c_k)`. The summed
/// gradient is Lipschitz with constant `lipschitz`, the top eigenvalue of
/// `A_1 + A_2`.
#[derive(Debug, Clone)]
pub struct QuadraticToy {
    pub curvatures: [DMatrix<f64>; 2],
    pub centers: [DVector<f64>; 2],
    pub lipschitz: f64,
}

impl QuadraticToy {
    pub fn new(curvatures: [DMatrix<f64>; 2], centers: [DVector<f64>; 2]) -> Result<Self> {
        let dim = centers[0].len();
        if centers[1].len() != dim {
            return Err(Error::shape("centers differ in dimension"));
        }
        for a in &curvatures {
            if a.nrows() != dim || a.ncols() != dim {
                return Err(Error::shape("curvature matrix does not match dimension"));
            }
            if a.clone().symmetric_eigen().eigenvalues.iter().any(|&l| l <= 0.0) {
                return Err(Error::invalid("curvature is not positive definite"));
            }
        }
        let lipschitz = (&curvatures[0] + &curvatures[1]).symmetric_eigen().eigenvalues.max();
        Ok(Self {
            curvatures,
            centers,
            lipschitz,
        })
    }

    /// `A = B^T B + 0.1 I` with `B` uniform in `[-1, 1]`; centers uniform in
    /// `[-3, 3]`, far enough apart that the two gradients often conflict.
    pub fn random<R: Rng>(dim: usize, rng: &mut R) -> Self {
        let mut mat = || {
            let b = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
            b.transpose() * &b + DMatrix::identity(dim, dim) * 0.1
        };
        let curvatures = [mat(), mat()];
        let centers = [
            DVector::from_fn(dim, |_, _| rng.gen_range(-3.0..3.0)),
            DVector::from_fn(dim, |_, _| rng.gen_range(-3.0..3.0)),
        ];
        Self::new(curvatures, centers).expect("positive definite by construction")
    }

    pub fn dim(&self) -> usize {
        self.centers[0].len()
    }

    pub fn loss(&self, k: usize, x: &[f64]) -> f64 {
        let d = DVector::from_column_slice(x) - &self.centers[k];
        0.5 * d.dot(&(&self.curvatures[k] * &d))
    }

    pub fn total_loss(&self, x: &[f64]) -> f64 {
        self.loss(0, x) + self.loss(1, x)
    }

    pub fn gradient(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let d = DVector::from_column_slice(x) - &self.centers[k];
        (&self.curvatures[k] * d).as_slice().to_vec()
    }

    /// One integrated step of size `eta`.
    pub fn step(&self, x: &[f64], eta: f64, cfg: &IntegrationConfig) -> Result<Vec<f64>> {
        let grads = [self.gradient(0, x), self.gradient(1, x)];
        let g = integrate_block(&grads, cfg)?;
        Ok(x.iter().zip(&g).map(|(a, b)| a - eta * b).collect())
    }
}

/// One output neuron `I = sum_j r(s_j) w_j z_j` with loss `0.5 (I - y)^2`,
/// evaluated through [`PrunableLinear`].
#[derive(Debug, Clone)]
pub struct SingleNeuronToy {
    pub layer: PrunableLinear,
    pub input: Vec<f64>,
    pub target: f64,
    pub capacity: f64,
}

/// Outcome of one score-only step on a [`SingleNeuronToy`].
#[derive(Debug, Clone, PartialEq)]
pub struct SwapOutcome {
    pub loss_before: f64,
    pub loss_after: f64,
    /// `dL/dI` before the step.
    pub output_grad: f64,
    /// Change of the neuron's input caused by the new mask.
    pub output_change: f64,
    /// Connections that entered the kept set.
    pub swapped: usize,
}

impl SwapOutcome {
    /// Second-order terms are small next to the first-order one.
    pub fn in_taylor_regime(&self) -> bool {
        self.output_change.abs() <= self.output_grad.abs()
    }
}

impl SingleNeuronToy {
    pub fn new(weights: Vec<f64>, scores: Vec<f64>, input: Vec<f64>, target: f64, capacity: f64) -> Result<Self> {
        let n = weights.len();
        if scores.len() != n || input.len() != n || n == 0 {
            return Err(Error::shape("weights, scores and inputs must have one entry per connection"));
        }
        let param = ScoredTensor::new(Tensor::new(vec![1, n], weights)?, Tensor::new(vec![1, n], scores)?)?;
        Ok(Self {
            layer: PrunableLinear::new(param, vec![0.0])?,
            input,
            target,
            capacity,
        })
    }

    /// Weights and inputs uniform in `[-1, 1]`, scores uniform in `[0, 1]`,
    /// target at distance `U(0.5, 2)` from the current output.
    pub fn random<R: Rng>(connections: usize, capacity: f64, rng: &mut R) -> Result<Self> {
        let w = (0..connections).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let z = (0..connections).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = (0..connections).map(|_| rng.gen_range(0.0..1.0)).collect();
        let mut toy = Self::new(w, s, z, 0.0, capacity)?;
        let offset = rng.gen_range(0.5..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        toy.target = toy.output()? + offset;
        Ok(toy)
    }

    fn input_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.input.len()], self.input.clone()).expect("one row")
    }

    pub fn output(&self) -> Result<f64> {
        let mask = build_mask(&self.layer.param, self.capacity)?;
        let (out, _) = self.layer.forward_masked(&mask, &self.input_tensor())?;
        Ok(out.data()[0])
    }

    pub fn loss(&self) -> Result<f64> {
        Ok(0.5 * (self.output()? - self.target).powi(2))
    }

    /// Updates only the scores with the straight-through gradient and
    /// reports the loss before and after the mask is rebuilt.
    pub fn score_step(&mut self, eta: f64) -> Result<SwapOutcome> {
        let x = self.input_tensor();
        let mask = build_mask(&self.layer.param, self.capacity)?;
        let (out, cache) = self.layer.forward_masked(&mask, &x)?;
        let before = out.data()[0];
        let g = before - self.target;
        let grad_out = Tensor::new(vec![1, 1], vec![g])?;
        let grads = self.layer.backward_masked_with(&mask, &cache, &grad_out, ScoreGradient::Unfiltered)?;
        for (s, d) in self.layer.param.score.data_mut().iter_mut().zip(grads.score.data()) {
            *s -= eta * d;
        }
        let new_mask = build_mask(&self.layer.param, self.capacity)?;
        let swapped = new_mask
            .bits()
            .iter()
            .zip(mask.bits())
            .filter(|(&now, &was)| now && !was)
            .count();
        let after = self.output()?;
        Ok(SwapOutcome {
            loss_before: 0.5 * g * g,
            loss_after: 0.5 * (after - self.target).powi(2),
            output_grad: g,
            output_change: after - before,
            swapped,
        })
    }
}
