//! Attention traces: per-layer, per-unit, per-head probability matrices
//! captured during a forward pass, with entity labels for the rows and
//! columns so a trace file is readable on its own.

use crate::tensor::Tensor;

/// Which unit inside a layer produced a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitTag {
    /// Question self-attention.
    SaY,
    /// Image self-attention (the reduced unit inside the SGA composition).
    SaX,
    /// Guided attention: image queries over question keys.
    GaXy,
}

impl UnitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            UnitTag::SaY => "SA_Y",
            UnitTag::SaX => "SA_X",
            UnitTag::GaXy => "GA_XY",
        }
    }

    pub fn parse(s: &str) -> Option<UnitTag> {
        match s {
            "SA_Y" => Some(UnitTag::SaY),
            "SA_X" => Some(UnitTag::SaX),
            "GA_XY" => Some(UnitTag::GaXy),
            _ => None,
        }
    }

    /// Label domains of (rows, cols): x = objects, y = tokens.
    pub fn domains(self) -> (char, char) {
        match self {
            UnitTag::SaY => ('y', 'y'),
            UnitTag::SaX => ('x', 'x'),
            UnitTag::GaXy => ('x', 'y'),
        }
    }
}

/// One head's probability matrix from one unit application.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub layer: usize,
    pub unit: UnitTag,
    pub head: usize,
    pub matrix: Tensor,
}

/// All maps captured in one forward pass, in execution order.
#[derive(Debug, Clone, Default)]
pub struct AttentionTrace {
    pub records: Vec<TraceRecord>,
    /// Labels for image-side rows (object indices / descriptions).
    pub x_labels: Vec<String>,
    /// Labels for question-side rows (tokens).
    pub y_labels: Vec<String>,
}

impl AttentionTrace {
    pub fn new() -> AttentionTrace {
        AttentionTrace::default()
    }
}
