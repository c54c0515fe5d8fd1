//! Whole-model assembly: configuration, the parameter tree with stable
//! hierarchical names, and the per-sample forward pass from raw features
//! and token ids to answer logits.

use std::collections::BTreeMap;

use crate::cascade::{
    cascade_forward, input_projection, CascadeStrategy, LayerWeights, McaVariant,
};
use crate::error::{Error, Result};
use crate::feature::{FeatureSet, FeatureVar};
use crate::heads::{attentional_reduce, classify, fuse, FusionWeights, ReductionWeights};
use crate::params::Linear;
use crate::rng::{streams, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trace::AttentionTrace;
use crate::units::UnitCtx;

/// Architecture hyper-parameters. `d` is the model width inside the
/// cascade, `d_x`/`d_y` the raw modality widths, `d_z` the fused width.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: McaVariant,
    pub strategy: CascadeStrategy,
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub d_z: usize,
    pub answers: usize,
    pub vocab: usize,
    pub attn_bias: bool,
    pub positional: bool,
    pub dropout: f64,
    pub eps: f64,
}

impl ModelConfig {
    pub fn d_h(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 8] = [
            ("layers", self.layers),
            ("d", self.d),
            ("heads", self.heads),
            ("d_x", self.d_x),
            ("d_y", self.d_y),
            ("d_z", self.d_z),
            ("answers", self.answers),
            ("vocab", self.vocab),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide d ({})",
                self.heads, self.d
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }

    pub fn unit_ctx(&self, training: bool) -> UnitCtx {
        UnitCtx {
            eps: self.eps,
            dropout: self.dropout,
            training,
        }
    }
}

/// Every learnable weight, generic over the carrier (tensors at rest,
/// tape handles during a forward pass).
#[derive(Debug, Clone)]
pub struct ModelParams<T> {
    pub embed: T,
    pub proj_x: Linear<T>,
    pub proj_y: Linear<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub reduce_x: ReductionWeights<T>,
    pub reduce_y: ReductionWeights<T>,
    pub fuse: FusionWeights<T>,
    pub classifier: Linear<T>,
}

impl<T> ModelParams<T> {
    /// Rebuild the tree through a fallible closure receiving each leaf's
    /// stable name. The traversal order defines the canonical name order.
    pub fn try_map<U>(
        self,
        f: &mut impl FnMut(String, T) -> Result<U>,
    ) -> Result<ModelParams<U>> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, w) in self.layers.into_iter().enumerate() {
            layers.push(w.try_map(&format!("layers.{l}"), f)?);
        }
        Ok(ModelParams {
            embed: f("embed.table".into(), self.embed)?,
            proj_x: self.proj_x.try_map("proj_x", f)?,
            proj_y: self.proj_y.try_map("proj_y", f)?,
            layers,
            reduce_x: self.reduce_x.try_map("reduce_x", f)?,
            reduce_y: self.reduce_y.try_map("reduce_y", f)?,
            fuse: self.fuse.try_map("fuse", f)?,
            classifier: self.classifier.try_map("classifier", f)?,
        })
    }
}

impl ModelParams<Tensor> {
    /// Fresh weights: symmetric uniform 1/sqrt(fan_in) projections, identity
    /// norms, zero biases. Deterministic in (config, seed).
    pub fn init(cfg: &ModelConfig, base: &Rng) -> ModelParams<Tensor> {
        let mut rng = base.derive(&[streams::PARAM_INIT]);
        let embed = {
            let bound = 1.0 / (cfg.d_y as f64).sqrt();
            let data: Vec<f64> = (0..cfg.vocab * cfg.d_y)
                .map(|_| rng.uniform(-bound, bound))
                .collect();
            Tensor::from_vec(&[cfg.vocab, cfg.d_y], data).expect("embed shape")
        };
        ModelParams {
            embed,
            proj_x: Linear::init(&mut rng, cfg.d_x, cfg.d, true),
            proj_y: Linear::init(&mut rng, cfg.d_y, cfg.d, true),
            layers: (0..cfg.layers)
                .map(|_| LayerWeights::init(&mut rng, cfg.d, cfg.heads, cfg.attn_bias, cfg.variant))
                .collect(),
            reduce_x: ReductionWeights::init(&mut rng, cfg.d),
            reduce_y: ReductionWeights::init(&mut rng, cfg.d),
            fuse: FusionWeights::init(&mut rng, cfg.d, cfg.d_z),
            classifier: Linear::init(&mut rng, cfg.d_z, cfg.answers, true),
        }
    }

    /// Register every weight on the tape as a named parameter.
    pub fn bind(&self, tape: &mut Tape) -> ModelParams<Var> {
        self.clone()
            .try_map(&mut |name, t| Ok(tape.param(name, t)))
            .expect("binding is infallible")
    }

    /// (name, tensor) pairs in canonical order.
    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.clone()
            .try_map(&mut |name, t| {
                out.push((name, t));
                Ok(())
            })
            .expect("collection is infallible");
        out
    }

    pub fn value_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuild a parameter tree of this config's shape from named tensors.
    /// Every name must be present with the exact shape; extras are rejected.
    pub fn from_named(
        cfg: &ModelConfig,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<ModelParams<Tensor>> {
        let skeleton = ModelParams::init(cfg, &Rng::from_seed(0));
        let mut used = 0usize;
        let built = skeleton.try_map(&mut |name, want: Tensor| {
            let found = tensors
                .get(&name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if found.shape() != want.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    found.shape(),
                    want.shape()
                )));
            }
            used += 1;
            Ok(found.clone())
        })?;
        if used != tensors.len() {
            let known: Vec<String> = built.named().into_iter().map(|(n, _)| n).collect();
            let extra: Vec<&String> = tensors
                .keys()
                .filter(|k| !known.contains(k))
                .collect();
            return Err(Error::Config(format!(
                "unexpected parameters: {extra:?}"
            )));
        }
        Ok(built)
    }
}

/// Sinusoidal positional encoding rows for positions 0..n at width d:
/// even columns sin(pos / 10000^(j/d)), odd columns cos with the same rate.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for j in 0..d {
            let pair = (j - j % 2) as f64;
            let rate = 1.0 / 10000f64.powf(pair / d as f64);
            let angle = pos as f64 * rate;
            data[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(&[n, d], data).expect("encoding shape")
}

/// A question at rest: token ids plus validity (padding) flags.
#[derive(Debug, Clone)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn dense(ids: Vec<usize>) -> TokenSeq {
        let mask = vec![true; ids.len()];
        TokenSeq { ids, mask }
    }
}

/// Everything a forward pass exposes besides the loss.
pub struct ForwardOutput {
    pub logits: Var,
    pub trace: Option<AttentionTrace>,
    /// Reduction weights over image rows / question rows (1 x m, 1 x n).
    pub alpha_x: Var,
    pub alpha_y: Var,
    /// Pre-norm fusion tap.
    pub fused_pre_norm: Var,
}

/// Embed tokens, add the positional encoding when enabled, and zero padded
/// rows. Gradients flow to the embedding table through the gather.
pub fn embed_question(
    tape: &mut Tape,
    table: Var,
    tokens: &TokenSeq,
    positional: bool,
) -> Result<FeatureVar> {
    if tokens.ids.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if tokens.ids.len() != tokens.mask.len() {
        return Err(Error::ShapeMismatch {
            op: "embed_question",
            lhs: vec![tokens.ids.len()],
            rhs: vec![tokens.mask.len()],
        });
    }
    let mut y = tape.embed(table, &tokens.ids)?;
    if positional {
        let d_y = tape.value(table).cols();
        let pe = tape.leaf(positional_encoding(tokens.ids.len(), d_y));
        y = tape.add(y, pe)?;
    }
    let y = if tokens.mask.iter().all(|&v| v) {
        y
    } else {
        tape.mask_rows(y, &tokens.mask)?
    };
    Ok(FeatureVar::new(y, tokens.mask.clone()))
}

/// Full forward pass for one sample: project both modalities, run the
/// cascade, reduce, fuse, classify.
pub fn forward_sample(
    tape: &mut Tape,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    x_raw: &FeatureSet,
    tokens: &TokenSeq,
    base_rng: &Rng,
    training: bool,
    want_trace: bool,
) -> Result<ForwardOutput> {
    if x_raw.valid_rows() == 0 {
        return Err(Error::DegenerateMask { row: 0 });
    }
    if x_raw.dim() != cfg.d_x {
        return Err(Error::ShapeMismatch {
            op: "forward_sample",
            lhs: x_raw.features().shape().to_vec(),
            rhs: vec![cfg.d_x],
        });
    }
    let ctx = cfg.unit_ctx(training);

    let y_embedded = embed_question(tape, params.embed, tokens, cfg.positional)?;
    let x_leaf = x_raw.leaf(tape)?;
    let x0 = input_projection(tape, &x_leaf, &params.proj_x)?;
    let y0 = input_projection(tape, &y_embedded, &params.proj_y)?;

    let out = cascade_forward(
        tape,
        &x0,
        &y0,
        &params.layers,
        cfg.variant,
        cfg.strategy,
        ctx,
        base_rng,
        want_trace,
    )?;

    let mut rng_rx = base_rng.derive(&[streams::DROPOUT_REDUCE, 0]);
    let red_x = attentional_reduce(tape, &out.x, &params.reduce_x, cfg.dropout, &mut rng_rx, training)?;
    let mut rng_ry = base_rng.derive(&[streams::DROPOUT_REDUCE, 1]);
    let red_y = attentional_reduce(tape, &out.y, &params.reduce_y, cfg.dropout, &mut rng_ry, training)?;

    let fused = fuse(tape, red_x.vector, red_y.vector, &params.fuse, cfg.eps)?;
    let logits = classify(tape, fused.fused, &params.classifier)?;

    Ok(ForwardOutput {
        logits,
        trace: out.trace,
        alpha_x: red_x.alpha,
        alpha_y: red_y.alpha,
        fused_pre_norm: fused.pre_norm,
    })
}

/// One-hot target row for a single answer id.
pub fn one_hot(answer: usize, answers: usize) -> Result<Tensor> {
    if answer >= answers {
        return Err(Error::InvalidTarget {
            value: answer as f64,
        });
    }
    let mut data = vec![0.0; answers];
    data[answer] = 1.0;
    Tensor::from_vec(&[1, answers], data)
}

/// Index of the largest logit (first one on ties).
pub fn argmax(logits: &Tensor) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Smallest config that exercises every code path; shared by tests across
/// modules.
#[cfg(test)]
pub fn tiny_config(variant: McaVariant, strategy: CascadeStrategy) -> ModelConfig {
    ModelConfig {
        variant,
        strategy,
        layers: 2,
        d: 8,
        heads: 2,
        d_x: 6,
        d_y: 8,
        d_z: 10,
        answers: 5,
        vocab: 12,
        attn_bias: true,
        positional: true,
        dropout: 0.1,
        eps: 1e-9,
    }
}
