use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Named parameter matrices in a fixed declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix) {
        self.names.push(name.into());
        self.values.push(value);
    }

    /// Uniform init in `±1/sqrt(fan_in)`, with `fan_in` = rows of the matrix.
    /// Bias rows (`1 × n`) use the fan-in of the weight declared before them.
    pub fn push_uniform<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, rng: &mut R) {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.push(name, Matrix::new(rows, cols, data).expect("finite init"));
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.values[i])
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.values.iter().map(Matrix::shape).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values.iter().flat_map(|m| m.data().iter().copied()).collect()
    }

    /// Overwrite all values from a flat slice laid out as in [`flatten`](Self::flatten).
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.scalar_count() {
            return Err(Error::Shape {
                op: "assign_flat",
                lhs: (self.scalar_count(), 1),
                rhs: (flat.len(), 1),
            });
        }
        let mut at = 0;
        for m in &mut self.values {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values
            .iter()
            .map(|m| Matrix::zeros(m.rows(), m.cols()))
            .collect()
    }

    /// Plain SGD step: `θ ← θ − lr · g`.
    pub fn sgd_step(&mut self, grads: &[Matrix], lr: f64) -> Result<()> {
        for (p, g) in self.values.iter_mut().zip(grads) {
            p.axpy(-lr, g)?;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Matrix::is_finite)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

/// Sum per-example gradients in the order given.
pub fn reduce_grads(parts: &[Vec<Matrix>], scale: f64) -> Vec<Matrix> {
    let mut acc: Vec<Matrix> = parts[0].iter().map(|m| Matrix::zeros(m.rows(), m.cols())).collect();
    for part in parts {
        for (a, g) in acc.iter_mut().zip(part) {
            a.axpy(scale, g).expect("matching grad shapes");
        }
    }
    acc
}

/// Exponential moving average of a parameter set:
/// `shadow ← decay · shadow + (1 − decay) · live` after every step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ema {
    decay: f64,
    shadow: ParamSet,
}

impl Ema {
    pub fn new(initial: &ParamSet, decay: f64) -> Self {
        Ema {
            decay,
            shadow: initial.clone(),
        }
    }

    pub fn from_parts(shadow: ParamSet, decay: f64) -> Self {
        Ema { decay, shadow }
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn update(&mut self, live: &ParamSet) {
        let d = self.decay;
        for (s, l) in self.shadow.values.iter_mut().zip(&live.values) {
            for (sv, lv) in s.data_mut().iter_mut().zip(l.data()) {
                *sv = d * *sv + (1.0 - d) * lv;
            }
        }
    }

    pub fn shadow(&self) -> &ParamSet {
        &self.shadow
    }
}
