//! Token ids for the encoder and the decoder's output spaces.

use sheetcoder_core::context::{build_bundles, Bundle, ContextWindow};
use sheetcoder_core::dataset::Vocabs;
use sheetcoder_core::formula::{FormulaIR, RangeToken, SketchToken, END_SKETCH};

use crate::config::ModelConfig;
use crate::ModelError;

/// One bundle as ids: `(N+1)*L` positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundleIds {
    pub ids: Vec<usize>,
    pub segments: Vec<usize>,
    pub mask: Vec<bool>,
}

impl BundleIds {
    fn from_bundle(b: &Bundle, vocabs: &Vocabs) -> Self {
        let unk = vocabs.input.unk_id().expect("input vocabulary has UNK") as usize;
        Self {
            ids: b.tokens().map(|t| vocabs.input.get(t).map_or(unk, |i| i as usize)).collect(),
            segments: b.segment_ids().map(usize::from).collect(),
            mask: b.mask().collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderInput {
    pub row_bundles: Vec<BundleIds>,
    pub col_bundles: Vec<BundleIds>,
}

pub fn featurize(window: &ContextWindow, config: &ModelConfig, vocabs: &Vocabs) -> Result<EncoderInput, ModelError> {
    if window.radius != config.radius {
        return Err(ModelError::Data(format!("window radius {} does not match model radius {}", window.radius, config.radius)));
    }
    let set = build_bundles(window, config.layout())?;
    Ok(EncoderInput {
        row_bundles: set.row_bundles.iter().map(|b| BundleIds::from_bundle(b, vocabs)).collect(),
        col_bundles: set.col_bundles.iter().map(|b| BundleIds::from_bundle(b, vocabs)).collect(),
    })
}

/// Which output layer scores a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Sketch,
    Range,
}

/// Output token tables and the decoder input numbering
/// (`GO`, then sketch ids, then range ids).
#[derive(Clone, Debug)]
pub struct OutputSpace {
    pub sketch_text: Vec<String>,
    /// `None` for reserved entries that never appear in a stream (UNK).
    pub sketch: Vec<Option<SketchToken>>,
    pub range: Vec<RangeToken>,
    pub end_sketch: usize,
}

impl OutputSpace {
    pub fn new(vocabs: &Vocabs) -> Result<Self, ModelError> {
        let sketch_text: Vec<String> = vocabs.sketch.tokens().to_vec();
        let sketch = sketch_text.iter().map(|t| SketchToken::parse(t).ok()).collect();
        let range = vocabs
            .range
            .tokens()
            .iter()
            .map(|t| RangeToken::parse(t).ok_or_else(|| ModelError::Data(format!("bad range vocabulary entry `{t}`"))))
            .collect::<Result<_, _>>()?;
        let end_sketch = vocabs.sketch.get(END_SKETCH).ok_or_else(|| ModelError::Data("sketch vocabulary lacks $ENDSKETCH$".into()))?;
        Ok(Self { sketch_text, sketch, range, end_sketch: end_sketch as usize })
    }

    pub fn n_sketch(&self) -> usize {
        self.sketch.len()
    }

    pub fn n_range(&self) -> usize {
        self.range.len()
    }

    pub const GO: usize = 0;

    pub fn n_decoder_inputs(&self) -> usize {
        1 + self.n_sketch() + self.n_range()
    }

    pub fn decoder_input(&self, head: Head, id: usize) -> usize {
        match head {
            Head::Sketch => 1 + id,
            Head::Range => 1 + self.n_sketch() + id,
        }
    }

    /// Index in the single-stage joint output layer.
    pub fn joint(&self, head: Head, id: usize) -> usize {
        match head {
            Head::Sketch => id,
            Head::Range => self.n_sketch() + id,
        }
    }

    pub fn text(&self, head: Head, id: usize) -> String {
        match head {
            Head::Sketch => self.sketch_text[id].clone(),
            Head::Range => self.range[id].text(),
        }
    }
}

/// A gold stream as `(head, id)` steps: sketch through `$ENDSKETCH$`, then ranges through `EOF`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GoldSeq {
    pub steps: Vec<(Head, usize)>,
}

impl GoldSeq {
    pub fn sketch_steps(&self) -> usize {
        self.steps.iter().filter(|(h, _)| *h == Head::Sketch).count()
    }
}

pub fn encode_gold(ir: &FormulaIR, vocabs: &Vocabs) -> Result<GoldSeq, ModelError> {
    let mut steps = Vec::new();
    for t in ir.sketch_tokens() {
        let id = vocabs.sketch.get(&t).ok_or_else(|| ModelError::Data(format!("gold sketch token `{t}` is not in the sketch vocabulary")))?;
        steps.push((Head::Sketch, id as usize));
    }
    for t in ir.range_tokens() {
        let id = vocabs.range.get(&t).ok_or_else(|| ModelError::Data(format!("gold range token `{t}` is not in the range vocabulary")))?;
        steps.push((Head::Range, id as usize));
    }
    Ok(GoldSeq { steps })
}
