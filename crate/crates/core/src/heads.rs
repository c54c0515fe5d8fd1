//! Output heads: attentional reduction of a feature set to one vector,
//! linear fusion of the two modalities, and the answer classifier.

use crate::error::Result;
use crate::feature::FeatureVar;
use crate::params::{LayerNormW, Linear};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Two-layer scoring MLP d -> d -> 1 with ReLU and dropout between.
#[derive(Debug, Clone)]
pub struct ReductionWeights<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl ReductionWeights<Tensor> {
    pub fn init(rng: &mut Rng, d: usize) -> ReductionWeights<Tensor> {
        ReductionWeights {
            fc1: Linear::init(rng, d, d, true),
            fc2: Linear::init(rng, d, 1, true),
        }
    }
}

impl<T> ReductionWeights<T> {
    pub fn try_map<U>(
        self,
        prefix: &str,
        f: &mut impl FnMut(String, T) -> Result<U>,
    ) -> Result<ReductionWeights<U>> {
        Ok(ReductionWeights {
            fc1: self.fc1.try_map(&format!("{prefix}.fc1"), f)?,
            fc2: self.fc2.try_map(&format!("{prefix}.fc2"), f)?,
        })
    }
}

/// Reduced vector plus the attention weights that formed it.
pub struct ReductionOutput {
    /// 1 x d attended vector.
    pub vector: Var,
    /// 1 x k weights: nonnegative, sum 1, exactly 0 at masked rows.
    pub alpha: Var,
}

/// Score every row with the MLP, softmax over valid rows, and take the
/// weighted sum of the rows.
pub fn attentional_reduce(
    tape: &mut Tape,
    f: &FeatureVar,
    w: &ReductionWeights<Var>,
    dropout: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<ReductionOutput> {
    let hidden = w.fc1.apply(tape, f.var)?;
    let hidden = tape.relu(hidden);
    let hidden = tape.dropout(hidden, dropout, rng, training)?;
    let scores = w.fc2.apply(tape, hidden)?; // k x 1
    let row = tape.transpose(scores)?; // 1 x k
    let alpha = tape.softmax_masked(row, &f.mask)?;
    let vector = tape.matmul(alpha, f.var)?; // 1 x d
    Ok(ReductionOutput { vector, alpha })
}

/// Fusion weights: one projection per modality into the fused width, plus
/// the norm over the fused vector.
#[derive(Debug, Clone)]
pub struct FusionWeights<T> {
    pub wx: T,
    pub wy: T,
    pub ln: LayerNormW<T>,
}

impl FusionWeights<Tensor> {
    pub fn init(rng: &mut Rng, d: usize, d_z: usize) -> FusionWeights<Tensor> {
        let bound = 1.0 / (d as f64).sqrt();
        let mut sample = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.uniform(-bound, bound)).collect()
        };
        FusionWeights {
            wx: Tensor::from_vec(&[d, d_z], sample(d * d_z)).expect("fusion shape"),
            wy: Tensor::from_vec(&[d, d_z], sample(d * d_z)).expect("fusion shape"),
            ln: LayerNormW::init(d_z),
        }
    }
}

impl<T> FusionWeights<T> {
    pub fn try_map<U>(
        self,
        prefix: &str,
        f: &mut impl FnMut(String, T) -> Result<U>,
    ) -> Result<FusionWeights<U>> {
        Ok(FusionWeights {
            wx: f(format!("{prefix}.wx"), self.wx)?,
            wy: f(format!("{prefix}.wy"), self.wy)?,
            ln: self.ln.try_map(&format!("{prefix}.ln"), f)?,
        })
    }
}

/// Fused vector with a tap on the pre-norm sum (used by linearity checks).
pub struct FusionOutput {
    pub fused: Var,
    pub pre_norm: Var,
}

/// z = LN(x * Wx + y * Wy) over 1 x d row vectors.
pub fn fuse(
    tape: &mut Tape,
    x: Var,
    y: Var,
    w: &FusionWeights<Var>,
    eps: f64,
) -> Result<FusionOutput> {
    let px = tape.matmul(x, w.wx)?;
    let py = tape.matmul(y, w.wy)?;
    let pre_norm = tape.add(px, py)?;
    let fused = tape.layer_norm(pre_norm, w.ln.gamma, w.ln.beta, eps)?;
    Ok(FusionOutput { fused, pre_norm })
}

/// Affine map from the fused vector to one logit per answer. Sigmoid is
/// applied at the loss, never here; argmax over logits equals argmax over
/// probabilities because sigmoid is monotone.
pub fn classify(tape: &mut Tape, z: Var, w: &Linear<Var>) -> Result<Var> {
    w.apply(tape, z)
}
