//! Scaled dot-product and multi-head attention with key masking.
//!
//! Queries attend over the valid keys only; masked key columns get exactly
//! zero probability. Query rows are computed unconditionally here — callers
//! zero padded query rows afterwards, which keeps this module mask-agnostic
//! on the query side.

use crate::error::{Error, Result};
use crate::params::Linear;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Attended features plus the per-head probability maps that produced them.
/// Maps stay on the tape so tracing and training share one forward path.
pub struct AttentionOutput {
    pub features: Var,
    /// One m x n probability matrix per head (a single entry for the
    /// unprojected single-head case).
    pub maps: Vec<Var>,
}

/// `softmax(Q K^T / sqrt(d)) V` with masked keys excluded from the softmax.
pub fn scaled_dot_product(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[bool],
) -> Result<AttentionOutput> {
    let d = tape.value(q).cols();
    let (kt_rows, kd) = (tape.value(k).rows(), tape.value(k).cols());
    if kd != d || tape.value(v).rows() != kt_rows {
        return Err(Error::ShapeMismatch {
            op: "scaled_dot_product",
            lhs: tape.value(k).shape().to_vec(),
            rhs: tape.value(v).shape().to_vec(),
        });
    }
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let scaled = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_masked(scaled, key_mask)?;
    let features = tape.matmul(weights, v)?;
    Ok(AttentionOutput {
        features,
        maps: vec![weights],
    })
}

/// Projections for one attention head.
#[derive(Debug, Clone)]
pub struct HeadProj<T> {
    pub wq: Linear<T>,
    pub wk: Linear<T>,
    pub wv: Linear<T>,
}

impl<T> HeadProj<T> {
    pub fn try_map<U>(
        self,
        prefix: &str,
        f: &mut impl FnMut(String, T) -> Result<U>,
    ) -> Result<HeadProj<U>> {
        Ok(HeadProj {
            wq: self.wq.try_map(&format!("{prefix}.wq"), f)?,
            wk: self.wk.try_map(&format!("{prefix}.wk"), f)?,
            wv: self.wv.try_map(&format!("{prefix}.wv"), f)?,
        })
    }
}

/// Multi-head attention weights: per-head d -> d_h projections and the
/// (h * d_h) -> d output projection. Requires h * d_h = d.
#[derive(Debug, Clone)]
pub struct MhaWeights<T> {
    pub heads: Vec<HeadProj<T>>,
    pub out: Linear<T>,
}

impl MhaWeights<Tensor> {
    pub fn init(rng: &mut Rng, d: usize, heads: usize, bias: bool) -> MhaWeights<Tensor> {
        let d_h = d / heads;
        let heads = (0..heads)
            .map(|_| HeadProj {
                wq: Linear::init(rng, d, d_h, bias),
                wk: Linear::init(rng, d, d_h, bias),
                wv: Linear::init(rng, d, d_h, bias),
            })
            .collect();
        MhaWeights {
            heads,
            out: Linear::init(rng, d, d, bias),
        }
    }
}

impl<T> MhaWeights<T> {
    pub fn try_map<U>(
        self,
        prefix: &str,
        f: &mut impl FnMut(String, T) -> Result<U>,
    ) -> Result<MhaWeights<U>> {
        let mut heads = Vec::with_capacity(self.heads.len());
        for (j, head) in self.heads.into_iter().enumerate() {
            heads.push(head.try_map(&format!("{prefix}.h{j}"), f)?);
        }
        Ok(MhaWeights {
            heads,
            out: self.out.try_map(&format!("{prefix}.out"), f)?,
        })
    }
}

/// Project per head, attend, concatenate the heads, and apply the output
/// projection. The returned maps hold every head's probabilities.
pub fn multi_head(
    tape: &mut Tape,
    q_in: Var,
    k_in: Var,
    v_in: Var,
    w: &MhaWeights<Var>,
    key_mask: &[bool],
) -> Result<AttentionOutput> {
    let d = tape.value(q_in).cols();
    let d_h = tape.value(w.heads[0].wq.weight).cols();
    if w.heads.len() * d_h != d {
        return Err(Error::InvalidShape {
            op: "multi_head",
            shape: vec![w.heads.len(), d_h],
            reason: format!("head count x head dim must equal model dim {d}"),
        });
    }
    let mut parts = Vec::with_capacity(w.heads.len());
    let mut maps = Vec::with_capacity(w.heads.len());
    for head in &w.heads {
        let q = head.wq.apply(tape, q_in)?;
        let k = head.wk.apply(tape, k_in)?;
        let v = head.wv.apply(tape, v_in)?;
        let att = scaled_dot_product(tape, q, k, v, key_mask)?;
        parts.push(att.features);
        maps.extend(att.maps);
    }
    let cat = tape.concat_cols(&parts)?;
    let features = w.out.apply(tape, cat)?;
    Ok(AttentionOutput { features, maps })
}
