//! Summary of a conversion: per-layer widths and FLOPs totals.

use serde::{Deserialize, Serialize};

use crate::reparam::LayerWidth;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthReport {
    pub layers: Vec<LayerWidth>,
    pub original_flops: u64,
    pub final_flops: u64,
    /// `100 · (1 − final / original)`.
    pub reduction_pct: f64,
    pub accuracy_before: Option<f64>,
    pub accuracy_after: Option<f64>,
}

impl WidthReport {
    pub fn new(layers: Vec<LayerWidth>, original_flops: u64, final_flops: u64) -> Self {
        Self {
            layers,
            original_flops,
            final_flops,
            reduction_pct: reduction_pct(original_flops, final_flops),
            accuracy_before: None,
            accuracy_after: None,
        }
    }
}

pub fn reduction_pct(original: u64, now: u64) -> f64 {
    if original == 0 {
        return 0.0;
    }
    100.0 * (1.0 - now as f64 / original as f64)
}
