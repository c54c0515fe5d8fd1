//! Closed-form parameter and multiply-add accounting.
//!
//! Both counters mirror the executed graph exactly: `count_params` matches
//! the shape sum of an initialized parameter tree, and `estimate_flops`
//! matches the tape's instrumented multiply-add counter for one forward
//! sample. Multiply-adds are counted once per fused multiply-accumulate
//! (matmuls a*b*c, softmax and layer norm once per element, everything
//! elementwise-cheap as zero), the convention under which the estimate is
//! comparable with published per-sample totals.

use crate::cascade::McaVariant;
use crate::model::ModelConfig;

/// Parameter totals by model region. `cascade = per_layer * layers`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub embedding: u64,
    pub input_projections: u64,
    pub per_layer: u64,
    pub cascade: u64,
    pub reductions: u64,
    pub fusion: u64,
    pub classifier: u64,
    pub total: u64,
}

impl ParamCounts {
    /// Stable (label, value) rows for reports.
    pub fn lines(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("embedding", self.embedding),
            ("input_projections", self.input_projections),
            ("per_layer", self.per_layer),
            ("cascade", self.cascade),
            ("reductions", self.reductions),
            ("fusion", self.fusion),
            ("classifier", self.classifier),
            ("total", self.total),
        ]
    }
}

fn linear_params(fan_in: u64, fan_out: u64, bias: bool) -> u64 {
    fan_in * fan_out + if bias { fan_out } else { 0 }
}

fn mha_params(d: u64, heads: u64, bias: bool) -> u64 {
    let d_h = d / heads;
    heads * 3 * linear_params(d, d_h, bias) + linear_params(d, d, bias)
}

fn unit_params(d: u64, heads: u64, bias: bool, with_ffn: bool) -> u64 {
    let ln = 2 * d;
    let ffn = if with_ffn {
        linear_params(d, 4 * d, true) + linear_params(4 * d, d, true) + ln
    } else {
        0
    };
    mha_params(d, heads, bias) + ln + ffn
}

fn layer_params(variant: McaVariant, d: u64, heads: u64, bias: bool) -> u64 {
    let full = unit_params(d, heads, bias, true);
    let reduced = unit_params(d, heads, bias, false);
    let sa_y = if variant.has_sa_y() { full } else { 0 };
    let sa_x = if variant.has_sa_x() { reduced } else { 0 };
    sa_y + sa_x + full
}

fn reduction_params(d: u64) -> u64 {
    linear_params(d, d, true) + linear_params(d, 1, true)
}

/// Exact parameter count from the config, no allocation.
pub fn count_params(cfg: &ModelConfig) -> ParamCounts {
    let d = cfg.d as u64;
    let heads = cfg.heads as u64;
    let embedding = cfg.vocab as u64 * cfg.d_y as u64;
    let input_projections =
        linear_params(cfg.d_x as u64, d, true) + linear_params(cfg.d_y as u64, d, true);
    let per_layer = layer_params(cfg.variant, d, heads, cfg.attn_bias);
    let cascade = per_layer * cfg.layers as u64;
    let reductions = 2 * reduction_params(d);
    let fusion = 2 * d * cfg.d_z as u64 + 2 * cfg.d_z as u64;
    let classifier = linear_params(cfg.d_z as u64, cfg.answers as u64, true);
    ParamCounts {
        embedding,
        input_projections,
        per_layer,
        cascade,
        reductions,
        fusion,
        classifier,
        total: embedding + input_projections + cascade + reductions + fusion + classifier,
    }
}

/// Multiply-add totals by forward stage for one sample with m valid objects
/// and n valid tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopsEstimate {
    pub input_projections: u64,
    pub question_units: u64,
    pub image_units: u64,
    pub reductions: u64,
    pub fusion_head: u64,
    pub total: u64,
}

impl FlopsEstimate {
    pub fn lines(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("input_projections", self.input_projections),
            ("question_units", self.question_units),
            ("image_units", self.image_units),
            ("reductions", self.reductions),
            ("fusion_head", self.fusion_head),
            ("total", self.total),
        ]
    }
}

/// Multi-head attention with a query rows and b key rows: per-head q/k/v
/// projections, score and mixing matmuls, and the output projection.
fn mha_macs(a: u64, b: u64, d: u64) -> u64 {
    2 * a * d * d + 2 * b * d * d + 2 * a * b * d
}

fn sa_full_macs(r: u64, d: u64, h: u64) -> u64 {
    mha_macs(r, r, d) + h * r * r + 8 * r * d * d + 2 * r * d
}

fn sa_reduced_macs(r: u64, d: u64, h: u64) -> u64 {
    mha_macs(r, r, d) + h * r * r + r * d
}

fn ga_macs(m: u64, n: u64, d: u64, h: u64) -> u64 {
    mha_macs(m, n, d) + h * m * n + 8 * m * d * d + 2 * m * d
}

/// Attentional reduction over k rows: two-layer scorer, softmax, weighted sum.
fn reduce_macs(k: u64, d: u64) -> u64 {
    k * d * d + k * d + k + k * d
}

/// Exact forward multiply-add count; equal to the instrumented tape counter
/// for a sample with no padded rows. Identical for both cascade strategies,
/// which apply the same units in a different order.
pub fn estimate_flops(cfg: &ModelConfig, m: usize, n: usize) -> FlopsEstimate {
    let (m, n) = (m as u64, n as u64);
    let d = cfg.d as u64;
    let h = cfg.heads as u64;
    let layers = cfg.layers as u64;

    let input_projections = m * cfg.d_x as u64 * d + n * cfg.d_y as u64 * d;
    let question_units = if cfg.variant.has_sa_y() {
        layers * sa_full_macs(n, d, h)
    } else {
        0
    };
    let sa_x = if cfg.variant.has_sa_x() {
        sa_reduced_macs(m, d, h)
    } else {
        0
    };
    let image_units = layers * (sa_x + ga_macs(m, n, d, h));
    let reductions = reduce_macs(m, d) + reduce_macs(n, d);
    let fusion_head =
        2 * d * cfg.d_z as u64 + cfg.d_z as u64 + cfg.d_z as u64 * cfg.answers as u64;

    FlopsEstimate {
        input_projections,
        question_units,
        image_units,
        reductions,
        fusion_head,
        total: input_projections + question_units + image_units + reductions + fusion_head,
    }
}
