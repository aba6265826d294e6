use serde::{Deserialize, Serialize};
use sheetcoder_core::context::{tiling, BundleLayout};
use sheetcoder_core::formula::StreamLimits;

use crate::ModelError;

/// Which encoder banks the decoder attends to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextMode {
    Full,
    /// Decoder only; both banks are empty and attention contexts are zero.
    NoContext,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sides {
    Both,
    RowOnly,
    ColumnOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decoding {
    /// Separate sketch and range output layers.
    TwoStage,
    /// One output layer over the joint sketch + range vocabulary.
    SingleStage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Context radius D.
    pub radius: u32,
    /// Rows per bundle N.
    pub per_bundle: u32,
    /// Tokens per row L.
    pub seq_len: usize,
    pub max_positions: usize,
    pub enc_layers: usize,
    pub enc_heads: usize,
    pub enc_hidden: usize,
    pub ffn_hidden: usize,
    /// Output width of the row/column convolutions.
    pub conv_dim: usize,
    pub dec_hidden: usize,
    pub attn_dim: usize,
    pub dropout: f64,
    pub beam_size: usize,
    pub max_sketch_len: usize,
    pub max_ranges: usize,
    pub context: ContextMode,
    pub sides: Sides,
    pub decoding: Decoding,
    /// Row and column sides share transformer weights.
    pub shared_encoder: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            radius: 10,
            per_bundle: 3,
            seq_len: 128,
            max_positions: 512,
            enc_layers: 2,
            enc_heads: 4,
            enc_hidden: 128,
            ffn_hidden: 512,
            conv_dim: 128,
            dec_hidden: 128,
            attn_dim: 128,
            dropout: 0.1,
            beam_size: 64,
            max_sketch_len: 64,
            max_ranges: 8,
            context: ContextMode::Full,
            sides: Sides::Both,
            decoding: Decoding::TwoStage,
            shared_encoder: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// A few thousand parameters; for tests and smoke runs.
    pub fn tiny(radius: u32, per_bundle: u32, seq_len: usize) -> Self {
        Self {
            radius,
            per_bundle,
            seq_len,
            enc_layers: 1,
            enc_heads: 2,
            enc_hidden: 16,
            ffn_hidden: 32,
            conv_dim: 8,
            dec_hidden: 16,
            attn_dim: 8,
            dropout: 0.0,
            beam_size: 8,
            ..Self::default()
        }
    }

    pub fn layout(&self) -> BundleLayout {
        BundleLayout { radius: self.radius, per_bundle: self.per_bundle, seq_len: self.seq_len }
    }

    pub fn limits(&self) -> StreamLimits {
        StreamLimits { max_sketch_len: self.max_sketch_len, max_ranges: self.max_ranges, radius: self.radius }
    }

    /// Tokens in one bundle: a header sequence plus N member sequences.
    pub fn bundle_tokens(&self) -> usize {
        self.seq_len * (self.per_bundle as usize + 1)
    }

    pub fn bundles_per_side(&self) -> usize {
        (2 * self.radius as usize + 1) / self.per_bundle as usize
    }

    /// Width of a final token embedding `[c_r + c_c ; e_b]`.
    pub fn token_dim(&self) -> usize {
        self.conv_dim + self.enc_hidden
    }

    pub fn uses_row_side(&self) -> bool {
        self.context == ContextMode::Full && self.sides != Sides::ColumnOnly
    }

    pub fn uses_col_side(&self) -> bool {
        self.context == ContextMode::Full && self.sides != Sides::RowOnly
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        tiling(self.radius, self.per_bundle)?;
        if self.bundle_tokens() > self.max_positions {
            return bad(format!(
                "L*(N+1) = {} exceeds max_positions {}",
                self.bundle_tokens(),
                self.max_positions
            ));
        }
        if self.seq_len == 0 || self.enc_hidden == 0 || self.dec_hidden == 0 || self.attn_dim == 0 || self.conv_dim == 0 {
            return bad("sizes must be positive".into());
        }
        if self.enc_heads == 0 || self.enc_hidden % self.enc_heads != 0 {
            return bad(format!("enc_hidden {} is not divisible by enc_heads {}", self.enc_hidden, self.enc_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.beam_size == 0 {
            return bad("beam_size must be at least 1".into());
        }
        if self.max_sketch_len < 2 {
            return bad("max_sketch_len must be at least 2".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.bundles_per_side(), 7);
        assert_eq!(c.bundle_tokens(), 512);
    }

    #[test]
    fn rejects_bad_configs() {
        let over = ModelConfig { seq_len: 129, ..ModelConfig::default() };
        assert!(over.validate().is_err());
        let even = ModelConfig { per_bundle: 2, ..ModelConfig::default() };
        assert!(even.validate().is_err());
        let heads = ModelConfig { enc_heads: 3, ..ModelConfig::default() };
        assert!(heads.validate().is_err());
        ModelConfig::tiny(2, 5, 16).validate().unwrap();
        ModelConfig::tiny(2, 1, 16).validate().unwrap();
    }

    #[test]
    fn serde_round_trip() {
        let c = ModelConfig { sides: Sides::RowOnly, decoding: Decoding::SingleStage, ..ModelConfig::tiny(4, 3, 12) };
        let back: ModelConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
