//! The formula-prediction network: per-bundle self-attention encoders with
//! row/column convolutions, and a two-stage LSTM decoder with dual attention.

pub mod config;
pub mod decode;
pub mod eval;
pub mod features;
pub mod net;
pub mod predict;
pub mod train;

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sheetcoder_autodiff::checkpoint::{read_checkpoint, write_checkpoint};
use sheetcoder_autodiff::{AdError, ParamStore, Tape};
use sheetcoder_core::context::{ContextWindow, TilingError};
use sheetcoder_core::dataset::{ExampleRecord, Vocabs};
use thiserror::Error;

pub use config::{ContextMode, Decoding, ModelConfig, Sides};
pub use decode::{Decoder, Hypothesis};
use features::{encode_gold, featurize, EncoderInput, GoldSeq, OutputSpace};
use net::{DecoderCache, Dropout, Network};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Tiling(#[from] TilingError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error("checkpoint does not match: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: u64, loss: f64 },
}

/// Config, vocabularies and parameters.
pub struct Model {
    pub config: ModelConfig,
    pub vocabs: Vocabs,
    pub params: ParamStore,
    net: Network,
    out: OutputSpace,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    vocabs: Vocabs,
}

/// A featurized example ready for the network.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub input: EncoderInput,
    pub gold: GoldSeq,
}

impl Model {
    pub fn new(config: ModelConfig, vocabs: Vocabs) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = sheetcoder_core::dataset::range_vocabulary(config.radius);
        if vocabs.range.tokens() != expected.tokens() {
            return Err(ModelError::Config(format!("range vocabulary does not match radius {}", config.radius)));
        }
        let out = OutputSpace::new(&vocabs)?;
        let mut params = ParamStore::new();
        let net = Network::build(&config, vocabs.input.len(), &out, &mut params);
        Ok(Self { config, vocabs, params, net, out })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn output_space(&self) -> &OutputSpace {
        &self.out
    }

    pub fn decoder(&self) -> Decoder<'_> {
        Decoder { net: &self.net, store: &self.params, out: &self.out }
    }

    pub fn featurize(&self, window: &ContextWindow) -> Result<EncoderInput, ModelError> {
        featurize(window, &self.config, &self.vocabs)
    }

    pub fn prepare_example(&self, ex: &ExampleRecord) -> Result<Prepared, ModelError> {
        let ir = ex.gold_ir().map_err(|e| ModelError::Data(format!("{}: {e}", ex.target)))?;
        Ok(Prepared { input: self.featurize(&ex.window)?, gold: encode_gold(&ir, &self.vocabs)? })
    }

    /// Teacher-forced mean token loss without dropout.
    pub fn loss(&self, ex: &Prepared) -> Result<f64, ModelError> {
        let mut t = Tape::new();
        let l = self.net.loss(&mut t, &self.params, &ex.input, &ex.gold, &self.out, &mut Dropout::off())?;
        Ok(t.value(l).item())
    }

    pub fn cache(&self, input: &EncoderInput) -> Result<DecoderCache, ModelError> {
        Ok(self.net.prepare(&self.params, input)?)
    }

    pub fn beam(&self, window: &ContextWindow, beam: usize) -> Result<Vec<Hypothesis>, ModelError> {
        let cache = self.cache(&self.featurize(window)?)?;
        self.decoder().beam(&cache, beam)
    }

    pub fn greedy(&self, window: &ContextWindow) -> Result<Option<Hypothesis>, ModelError> {
        let cache = self.cache(&self.featurize(window)?)?;
        self.decoder().greedy(&cache)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let io = |source| ModelError::Io { path: path.display().to_string(), source };
        let header = serde_json::to_string(&CheckpointHeader { config: self.config.clone(), vocabs: self.vocabs.clone() })
            .expect("header serializes");
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp).map_err(io)?);
            write_checkpoint(&mut w, &header, &self.params)?;
            std::io::Write::flush(&mut w).map_err(io)?;
        }
        fs::rename(&tmp, path).map_err(io)
    }

    /// Loads a checkpoint and checks every parameter against the embedded config.
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let io = |source| ModelError::Io { path: path.display().to_string(), source };
        let mut r = BufReader::new(fs::File::open(path).map_err(io)?);
        let (header, params) = read_checkpoint(&mut r)?;
        let header: CheckpointHeader =
            serde_json::from_str(&header).map_err(|e| ModelError::Checkpoint(format!("bad header: {e}")))?;
        let mut model = Self::new(header.config, header.vocabs)?;
        model.params.check_compatible(&params).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        model.params = params;
        Ok(model)
    }
}
