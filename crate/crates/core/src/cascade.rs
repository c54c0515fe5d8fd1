//! Layer variants composed from SA/GA units and their deep cascades.
//!
//! A layer transforms (X, Y) to (X', Y'). Three variants:
//!   - `IdGa`:  Y' = Y,          X' = GA(X, Y_guide)
//!   - `SaGa`:  Y' = SA(Y),      X' = GA(X, Y_guide)
//!   - `SaSga`: Y' = SA(Y),      X' = GA(SA_reduced(X), Y_guide)
//! where the reduced SA drops the feed-forward block and its norm.
//!
//! Two cascade strategies: stacking feeds each layer's fresh Y' into that
//! layer's GA; encoder-decoder first runs the whole question chain, then
//! feeds the final Y into every GA. At depth 1 both orders run the same
//! units on the same inputs, so they agree bit for bit.
//!
//! Dropout randomness is derived per (layer, unit), never drawn from a
//! shared sequential stream, so the two strategies' different execution
//! orders cannot shift the noise.

use crate::error::{Error, Result};
use crate::feature::FeatureVar;
use crate::params::Linear;
use crate::rng::{streams, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trace::{AttentionTrace, TraceRecord, UnitTag};
use crate::units::{ga_unit, sa_unit, UnitCtx, UnitWeights};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum McaVariant {
    IdGa,
    SaGa,
    SaSga,
}

impl McaVariant {
    pub const ALL: [McaVariant; 3] = [McaVariant::IdGa, McaVariant::SaGa, McaVariant::SaSga];

    pub fn as_str(self) -> &'static str {
        match self {
            McaVariant::IdGa => "id_ga",
            McaVariant::SaGa => "sa_ga",
            McaVariant::SaSga => "sa_sga",
        }
    }

    pub fn parse(s: &str) -> Result<McaVariant> {
        match s {
            "id_ga" => Ok(McaVariant::IdGa),
            "sa_ga" => Ok(McaVariant::SaGa),
            "sa_sga" => Ok(McaVariant::SaSga),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected id_ga, sa_ga, or sa_sga)"
            ))),
        }
    }

    pub fn has_sa_y(self) -> bool {
        !matches!(self, McaVariant::IdGa)
    }

    pub fn has_sa_x(self) -> bool {
        matches!(self, McaVariant::SaSga)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CascadeStrategy {
    Stacking,
    EncoderDecoder,
}

impl CascadeStrategy {
    pub const ALL: [CascadeStrategy; 2] =
        [CascadeStrategy::Stacking, CascadeStrategy::EncoderDecoder];

    pub fn as_str(self) -> &'static str {
        match self {
            CascadeStrategy::Stacking => "stacking",
            CascadeStrategy::EncoderDecoder => "encoder_decoder",
        }
    }

    pub fn parse(s: &str) -> Result<CascadeStrategy> {
        match s {
            "stacking" => Ok(CascadeStrategy::Stacking),
            "encoder_decoder" => Ok(CascadeStrategy::EncoderDecoder),
            other => Err(Error::Config(format!(
                "unknown strategy {other:?} (expected stacking or encoder_decoder)"
            ))),
        }
    }
}

/// Weights of one layer; unit presence is fixed by the variant.
#[derive(Debug, Clone)]
pub struct LayerWeights<T> {
    pub sa_y: Option<UnitWeights<T>>,
    pub sa_x: Option<UnitWeights<T>>,
    pub ga: UnitWeights<T>,
}

impl LayerWeights<Tensor> {
    pub fn init(
        rng: &mut Rng,
        d: usize,
        heads: usize,
        attn_bias: bool,
        variant: McaVariant,
    ) -> LayerWeights<Tensor> {
        LayerWeights {
            sa_y: variant
                .has_sa_y()
                .then(|| UnitWeights::init(rng, d, heads, attn_bias, true)),
            sa_x: variant
                .has_sa_x()
                .then(|| UnitWeights::init(rng, d, heads, attn_bias, false)),
            ga: UnitWeights::init(rng, d, heads, attn_bias, true),
        }
    }
}

impl<T> LayerWeights<T> {
    pub fn try_map<U>(
        self,
        prefix: &str,
        f: &mut impl FnMut(String, T) -> Result<U>,
    ) -> Result<LayerWeights<U>> {
        Ok(LayerWeights {
            sa_y: match self.sa_y {
                Some(w) => Some(w.try_map(&format!("{prefix}.sa_y"), f)?),
                None => None,
            },
            sa_x: match self.sa_x {
                Some(w) => Some(w.try_map(&format!("{prefix}.sa_x"), f)?),
                None => None,
            },
            ga: self.ga.try_map(&format!("{prefix}.ga"), f)?,
        })
    }
}

fn unit_rng(base: &Rng, layer: usize, unit: UnitTag) -> Rng {
    let tag = match unit {
        UnitTag::SaY => 0,
        UnitTag::SaX => 1,
        UnitTag::GaXy => 2,
    };
    base.derive(&[streams::DROPOUT, layer as u64, tag])
}

fn record_maps(
    sink: &mut Option<&mut Vec<TraceRecord>>,
    tape: &Tape,
    layer: usize,
    unit: UnitTag,
    maps: &[Var],
) {
    if let Some(records) = sink {
        for (head, &map) in maps.iter().enumerate() {
            records.push(TraceRecord {
                layer,
                unit,
                head,
                matrix: tape.value(map).clone(),
            });
        }
    }
}

/// Question-side step of one layer: identity for `IdGa`, SA otherwise.
fn question_step(
    tape: &mut Tape,
    y_prev: &FeatureVar,
    w: &LayerWeights<Var>,
    variant: McaVariant,
    layer: usize,
    ctx: UnitCtx,
    base_rng: &Rng,
    sink: &mut Option<&mut Vec<TraceRecord>>,
) -> Result<FeatureVar> {
    if !variant.has_sa_y() {
        if w.sa_y.is_some() {
            return Err(Error::Config(format!(
                "layer {layer} carries a question SA unit but variant {} has none",
                variant.as_str()
            )));
        }
        return Ok(y_prev.clone());
    }
    let unit = w.sa_y.as_ref().ok_or_else(|| {
        Error::Config(format!(
            "layer {layer} is missing the question SA unit required by variant {}",
            variant.as_str()
        ))
    })?;
    let mut rng = unit_rng(base_rng, layer, UnitTag::SaY);
    let (y, maps) = sa_unit(tape, y_prev, unit, ctx, &mut rng)?;
    record_maps(sink, tape, layer, UnitTag::SaY, &maps);
    Ok(y)
}

/// Image-side step of one layer: optional reduced SA, then GA over the
/// guiding question features.
fn image_step(
    tape: &mut Tape,
    x_prev: &FeatureVar,
    y_guide: &FeatureVar,
    w: &LayerWeights<Var>,
    variant: McaVariant,
    layer: usize,
    ctx: UnitCtx,
    base_rng: &Rng,
    sink: &mut Option<&mut Vec<TraceRecord>>,
) -> Result<FeatureVar> {
    if variant.has_sa_x() != w.sa_x.is_some() {
        return Err(Error::Config(format!(
            "layer {layer} image SA unit does not match variant {}",
            variant.as_str()
        )));
    }
    let mut x = x_prev.clone();
    if let Some(unit) = &w.sa_x {
        let mut rng = unit_rng(base_rng, layer, UnitTag::SaX);
        let (next, maps) = sa_unit(tape, &x, unit, ctx, &mut rng)?;
        record_maps(sink, tape, layer, UnitTag::SaX, &maps);
        x = next;
    }
    let mut rng = unit_rng(base_rng, layer, UnitTag::GaXy);
    let (x, maps) = ga_unit(tape, &x, y_guide, &w.ga, ctx, &mut rng)?;
    record_maps(sink, tape, layer, UnitTag::GaXy, &maps);
    Ok(x)
}

/// One layer. `y_for_ga` overrides the GA input (encoder-decoder passes the
/// final question features); `None` uses the freshly computed Y'.
pub fn mca_layer(
    tape: &mut Tape,
    x_prev: &FeatureVar,
    y_prev: &FeatureVar,
    y_for_ga: Option<&FeatureVar>,
    w: &LayerWeights<Var>,
    variant: McaVariant,
    layer: usize,
    ctx: UnitCtx,
    base_rng: &Rng,
    mut sink: Option<&mut Vec<TraceRecord>>,
) -> Result<(FeatureVar, FeatureVar)> {
    let y_next = question_step(tape, y_prev, w, variant, layer, ctx, base_rng, &mut sink)?;
    let guide = y_for_ga.unwrap_or(&y_next);
    let x_next = image_step(tape, x_prev, guide, w, variant, layer, ctx, base_rng, &mut sink)?;
    Ok((x_next, y_next))
}

#[derive(Debug)]
pub struct CascadeOutput {
    pub x: FeatureVar,
    pub y: FeatureVar,
    pub trace: Option<AttentionTrace>,
}

/// Run L layers under the given strategy. Stacking interleaves question and
/// image steps layer by layer; encoder-decoder runs the whole question
/// chain first and guides every GA with its final output.
pub fn cascade_forward(
    tape: &mut Tape,
    x0: &FeatureVar,
    y0: &FeatureVar,
    layers: &[LayerWeights<Var>],
    variant: McaVariant,
    strategy: CascadeStrategy,
    ctx: UnitCtx,
    base_rng: &Rng,
    want_trace: bool,
) -> Result<CascadeOutput> {
    if layers.is_empty() {
        return Err(Error::Config("cascade requires at least one layer".into()));
    }
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut sink = want_trace.then_some(&mut records);

    let (x, y) = match strategy {
        CascadeStrategy::Stacking => {
            let mut x = x0.clone();
            let mut y = y0.clone();
            for (l, w) in layers.iter().enumerate() {
                let y_next =
                    question_step(tape, &y, w, variant, l, ctx, base_rng, &mut sink)?;
                x = image_step(tape, &x, &y_next, w, variant, l, ctx, base_rng, &mut sink)?;
                y = y_next;
            }
            (x, y)
        }
        CascadeStrategy::EncoderDecoder => {
            let mut y = y0.clone();
            for (l, w) in layers.iter().enumerate() {
                y = question_step(tape, &y, w, variant, l, ctx, base_rng, &mut sink)?;
            }
            let mut x = x0.clone();
            for (l, w) in layers.iter().enumerate() {
                x = image_step(tape, &x, &y, w, variant, l, ctx, base_rng, &mut sink)?;
            }
            (x, y)
        }
    };

    let trace = want_trace.then(|| AttentionTrace {
        records,
        x_labels: Vec::new(),
        y_labels: Vec::new(),
    });
    Ok(CascadeOutput { x, y, trace })
}

/// Project raw modality features to the model width.
pub fn input_projection(
    tape: &mut Tape,
    raw: &FeatureVar,
    proj: &Linear<Var>,
) -> Result<FeatureVar> {
    let projected = proj.apply(tape, raw.var)?;
    let projected = tape.mask_rows(projected, &raw.mask)?;
    Ok(FeatureVar::new(projected, raw.mask.clone()))
}
