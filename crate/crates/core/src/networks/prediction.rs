use crate::error::{bail, Result};
use crate::nn::ops::softmax_channels;
use crate::tensor::{Scalar, Tensor};

/// Per-pixel class distributions with their logarithms.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMaps<T> {
    pub probabilities: Tensor<T>,
    pub log_probabilities: Tensor<T>,
}

impl<T: Scalar> ProbMaps<T> {
    pub fn from_logits(logits: &Tensor<T>) -> Self {
        let (probabilities, log_probabilities) = softmax_channels(logits);
        Self {
            probabilities,
            log_probabilities,
        }
    }

    /// Wraps externally produced probabilities after checking that every
    /// pixel lies on the simplex (tolerance 1e-5).
    pub fn from_probabilities(probabilities: Tensor<T>) -> Result<Self> {
        check_simplex(&probabilities, 1e-5)?;
        let log_probabilities = probabilities.map(|p| p.ln());
        Ok(Self {
            probabilities,
            log_probabilities,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.probabilities.shape()
    }
}

/// Segmenter output: main head and, for the two-level setting, the ASPP
/// auxiliary head at the same resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBatch<T> {
    pub main: ProbMaps<T>,
    pub aux: Option<ProbMaps<T>>,
}

impl<T: Scalar> PredictionBatch<T> {
    pub fn probabilities(&self) -> &Tensor<T> {
        &self.main.probabilities
    }

    pub fn aux_probabilities(&self) -> Option<&Tensor<T>> {
        self.aux.as_ref().map(|a| &a.probabilities)
    }

    pub fn check(&self) -> Result<()> {
        check_simplex(&self.main.probabilities, 1e-5)?;
        if let Some(a) = &self.aux {
            check_simplex(&a.probabilities, 1e-5)?;
            if a.shape() != self.main.shape() {
                bail!(Shape, "aux shape {:?} != main {:?}", a.shape(), self.main.shape());
            }
        }
        Ok(())
    }

    /// Per-pixel argmax labels, one (rows × cols) plane per batch item.
    pub fn argmax(&self) -> Vec<Vec<u8>> {
        argmax_labels(&self.main.probabilities)
    }
}

pub fn argmax_labels<T: Scalar>(p: &Tensor<T>) -> Vec<Vec<u8>> {
    let (c, plane) = (p.c(), p.plane_len());
    (0..p.n())
        .map(|n| {
            let s = p.sample(n);
            (0..plane)
                .map(|px| {
                    let mut best = 0;
                    for k in 1..c {
                        if s[k * plane + px] > s[best * plane + px] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

pub fn check_simplex<T: Scalar>(p: &Tensor<T>, tol: f64) -> Result<()> {
    let (c, plane) = (p.c(), p.plane_len());
    for n in 0..p.n() {
        let s = p.sample(n);
        for px in 0..plane {
            let mut sum = 0.0;
            for k in 0..c {
                let v = s[k * plane + px].f64();
                if !(-tol..=1.0 + tol).contains(&v) {
                    bail!(Shape, "probability {v} outside [0,1] at sample {n}");
                }
                sum += v;
            }
            if (sum - 1.0).abs() > tol {
                bail!(Shape, "probabilities sum to {sum} at sample {n}, pixel {px}");
            }
        }
    }
    Ok(())
}
