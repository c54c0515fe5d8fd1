//! Self-attention and guided-attention units: multi-head attention and a
//! pointwise feed-forward block, each wrapped in residual + layer norm
//! (post-norm ordering). The reduced form used inside the SGA composition
//! drops the feed-forward block and its norm.

use crate::attention::{multi_head, MhaWeights};
use crate::error::Result;
use crate::feature::FeatureVar;
use crate::params::{LayerNormW, Linear};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Feed-forward block FC(4d) - ReLU - Dropout - FC(d) with its own norm
/// for the residual wrapper.
#[derive(Debug, Clone)]
pub struct FfnBlock<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub ln: LayerNormW<T>,
}

impl FfnBlock<Tensor> {
    pub fn init(rng: &mut Rng, d: usize) -> FfnBlock<Tensor> {
        FfnBlock {
            fc1: Linear::init(rng, d, 4 * d, true),
            fc2: Linear::init(rng, 4 * d, d, true),
            ln: LayerNormW::init(d),
        }
    }
}

impl<T> FfnBlock<T> {
    pub fn try_map<U>(
        self,
        prefix: &str,
        f: &mut impl FnMut(String, T) -> Result<U>,
    ) -> Result<FfnBlock<U>> {
        Ok(FfnBlock {
            fc1: self.fc1.try_map(&format!("{prefix}.fc1"), f)?,
            fc2: self.fc2.try_map(&format!("{prefix}.fc2"), f)?,
            ln: self.ln.try_map(&format!("{prefix}.ln"), f)?,
        })
    }
}

/// Weights of one attention unit. `ffn = None` is the reduced form whose
/// norms cover only the attention sub-layer.
#[derive(Debug, Clone)]
pub struct UnitWeights<T> {
    pub mha: MhaWeights<T>,
    pub ln_att: LayerNormW<T>,
    pub ffn: Option<FfnBlock<T>>,
}

impl UnitWeights<Tensor> {
    pub fn init(
        rng: &mut Rng,
        d: usize,
        heads: usize,
        attn_bias: bool,
        with_ffn: bool,
    ) -> UnitWeights<Tensor> {
        UnitWeights {
            mha: MhaWeights::init(rng, d, heads, attn_bias),
            ln_att: LayerNormW::init(d),
            ffn: with_ffn.then(|| FfnBlock::init(rng, d)),
        }
    }
}

impl<T> UnitWeights<T> {
    pub fn try_map<U>(
        self,
        prefix: &str,
        f: &mut impl FnMut(String, T) -> Result<U>,
    ) -> Result<UnitWeights<U>> {
        Ok(UnitWeights {
            mha: self.mha.try_map(&format!("{prefix}.mha"), f)?,
            ln_att: self.ln_att.try_map(&format!("{prefix}.ln_att"), f)?,
            ffn: match self.ffn {
                Some(b) => Some(b.try_map(&format!("{prefix}.ffn"), f)?),
                None => None,
            },
        })
    }
}

/// Numeric knobs shared by every unit application.
#[derive(Debug, Clone, Copy)]
pub struct UnitCtx {
    pub eps: f64,
    pub dropout: f64,
    pub training: bool,
}

/// FC(4d) - ReLU - Dropout - FC(d), pre-residual.
pub fn ffn(
    tape: &mut Tape,
    x: Var,
    w: &FfnBlock<Var>,
    ctx: UnitCtx,
    rng: &mut Rng,
) -> Result<Var> {
    let hidden = w.fc1.apply(tape, x)?;
    let hidden = tape.relu(hidden);
    let hidden = tape.dropout(hidden, ctx.dropout, rng, ctx.training)?;
    w.fc2.apply(tape, hidden)
}

/// One attended sub-layer plus optional feed-forward sub-layer, both in
/// residual + norm wrappers. Padded query rows are zeroed on the way out so
/// padding never leaks into later statistics. Returns the new features and
/// the per-head attention maps.
fn attend_unit(
    tape: &mut Tape,
    queries: &FeatureVar,
    keys: &FeatureVar,
    w: &UnitWeights<Var>,
    ctx: UnitCtx,
    rng: &mut Rng,
) -> Result<(FeatureVar, Vec<Var>)> {
    let att = multi_head(tape, queries.var, keys.var, keys.var, &w.mha, &keys.mask)?;
    let summed = tape.add(queries.var, att.features)?;
    let mut z = tape.layer_norm(summed, w.ln_att.gamma, w.ln_att.beta, ctx.eps)?;
    if let Some(block) = &w.ffn {
        let ff = ffn(tape, z, block, ctx, rng)?;
        let summed = tape.add(z, ff)?;
        z = tape.layer_norm(summed, block.ln.gamma, block.ln.beta, ctx.eps)?;
    }
    let z = tape.mask_rows(z, &queries.mask)?;
    Ok((FeatureVar::new(z, queries.mask.clone()), att.maps))
}

/// Self-attention: queries, keys, and values all come from `x`.
pub fn sa_unit(
    tape: &mut Tape,
    x: &FeatureVar,
    w: &UnitWeights<Var>,
    ctx: UnitCtx,
    rng: &mut Rng,
) -> Result<(FeatureVar, Vec<Var>)> {
    attend_unit(tape, x, x, w, ctx, rng)
}

/// Guided attention: queries from `x`, keys and values from `y`; `x`'s mask
/// passes through.
pub fn ga_unit(
    tape: &mut Tape,
    x: &FeatureVar,
    y: &FeatureVar,
    w: &UnitWeights<Var>,
    ctx: UnitCtx,
    rng: &mut Rng,
) -> Result<(FeatureVar, Vec<Var>)> {
    attend_unit(tape, x, y, w, ctx, rng)
}
