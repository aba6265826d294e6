use sheetcoder_core::dataset::ExampleRecord;
use sheetcoder_core::formula::FormulaIR;
use sheetcoder_core::metrics::EvalReport;

use crate::{Model, ModelError};

/// Beam-decodes every example and scores the ranked lists.
/// With `blank_headers`, the header row is removed from each context first.
pub fn evaluate(model: &Model, examples: &[ExampleRecord], beam: usize, ks: &[usize], blank_headers: bool) -> Result<EvalReport, ModelError> {
    let mut ranked = Vec::with_capacity(examples.len());
    let mut golds = Vec::with_capacity(examples.len());
    for ex in examples {
        let gold = ex.gold_ir().map_err(|e| ModelError::Data(format!("{}: {e}", ex.target)))?;
        let window = if blank_headers { ex.window.without_header() } else { ex.window.clone() };
        let preds: Vec<FormulaIR> = model.beam(&window, beam)?.iter().map(|h| h.ir()).collect::<Result<_, _>>()?;
        ranked.push(preds);
        golds.push(gold);
    }
    EvalReport::compute(&ranked, &golds, ks).map_err(|e| ModelError::Config(e.to_string()))
}
