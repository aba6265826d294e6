use serde::{Deserialize, Serialize};
use sheetcoder_core::a1::CellAddr;
use sheetcoder_core::context::extract_window;
use sheetcoder_core::formula::render_formula;
use sheetcoder_core::grid::Sheet;

use crate::{Model, ModelError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub rank: usize,
    pub logprob: f64,
    /// A1 formula text starting with `=`.
    pub formula: String,
    pub stream: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOutput {
    pub predictions: Vec<Prediction>,
    /// Hypotheses whose references fell off the sheet.
    pub dropped_off_sheet: usize,
}

/// Beam-decodes the formula for `target` and renders the best `top_k` in A1 notation.
pub fn predict(model: &Model, sheet: &Sheet, target: CellAddr, top_k: usize, beam: usize) -> Result<PredictOutput, ModelError> {
    if !sheet.contains(target) {
        let (rows, cols) = sheet.bounds();
        return Err(ModelError::Data(format!("target {target} is outside the sheet ({rows} rows x {cols} columns)")));
    }
    if top_k == 0 || top_k > beam {
        return Err(ModelError::Config(format!("top_k must be between 1 and the beam size {beam}, got {top_k}")));
    }
    let window = extract_window(sheet, target, model.config.radius);
    let hyps = model.beam(&window, beam)?;
    let mut predictions = Vec::new();
    let mut dropped = 0;
    for h in hyps {
        let ir = h.ir()?;
        match render_formula(&ir, target) {
            Ok(formula) => {
                if predictions.len() < top_k {
                    predictions.push(Prediction { rank: predictions.len() + 1, logprob: h.logp, formula, stream: ir.to_string() });
                }
            }
            Err(_) => dropped += 1,
        }
    }
    Ok(PredictOutput { predictions, dropped_off_sheet: dropped })
}
