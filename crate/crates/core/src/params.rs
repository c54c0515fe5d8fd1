//! Parameter containers generic over their carrier.
//!
//! Weight trees are built once over [`Tensor`] and re-projected over
//! [`Var`] when a forward pass binds them to a tape. `try_map` walks a tree
//! and rebuilds it through a fallible closure that also receives the stable
//! hierarchical parameter name, so binding, enumeration, checkpoint I/O,
//! and optimizer updates all share one traversal and one naming scheme.

use crate::error::Result;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Affine map `x * weight (+ bias)`. `weight` is stored input-major
/// ([in, out]) so application is a plain matmul on row vectors.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: Option<T>,
}

impl Linear<Tensor> {
    /// Symmetric uniform init scaled by 1/sqrt(fan_in); zero bias.
    pub fn init(rng: &mut Rng, fan_in: usize, fan_out: usize, bias: bool) -> Linear<Tensor> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.uniform(-bound, bound))
            .collect();
        Linear {
            weight: Tensor::from_vec(&[fan_in, fan_out], data).expect("init shape"),
            bias: bias.then(|| Tensor::zeros(&[fan_out])),
        }
    }
}

impl<T> Linear<T> {
    pub fn try_map<U>(
        self,
        prefix: &str,
        f: &mut impl FnMut(String, T) -> Result<U>,
    ) -> Result<Linear<U>> {
        Ok(Linear {
            weight: f(format!("{prefix}.weight"), self.weight)?,
            bias: match self.bias {
                Some(b) => Some(f(format!("{prefix}.bias"), b)?),
                None => None,
            },
        })
    }
}

impl Linear<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => tape.add_bias(y, b),
            None => Ok(y),
        }
    }
}

/// Per-row normalization parameters; gamma starts at 1, beta at 0.
#[derive(Debug, Clone)]
pub struct LayerNormW<T> {
    pub gamma: T,
    pub beta: T,
}

impl LayerNormW<Tensor> {
    pub fn init(dim: usize) -> LayerNormW<Tensor> {
        LayerNormW {
            gamma: Tensor::filled(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
        }
    }
}

impl<T> LayerNormW<T> {
    pub fn try_map<U>(
        self,
        prefix: &str,
        f: &mut impl FnMut(String, T) -> Result<U>,
    ) -> Result<LayerNormW<U>> {
        Ok(LayerNormW {
            gamma: f(format!("{prefix}.gamma"), self.gamma)?,
            beta: f(format!("{prefix}.beta"), self.beta)?,
        })
    }
}

impl LayerNormW<Var> {
    pub fn apply(&self, tape: &mut Tape, x: Var, eps: f64) -> Result<Var> {
        tape.layer_norm(x, self.gamma, self.beta, eps)
    }
}
