//! Parameter layout and the differentiable forward pass.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sheetcoder_autodiff::{AdError, DenseArray, ParamId, ParamStore, Tape, Var};

use crate::config::{Decoding, ModelConfig};
use crate::features::{BundleIds, EncoderInput, GoldSeq, Head, OutputSpace};

const LN_EPS: f64 = 1e-6;
/// Init scale for embeddings and output layers.
const SMALL_INIT: f64 = 0.02;

#[derive(Clone, Debug)]
struct LayerIds {
    wqkv: ParamId,
    bqkv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

#[derive(Clone, Debug)]
struct TransformerIds {
    tok_emb: ParamId,
    seg_emb: ParamId,
    pos_emb: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    layers: Vec<LayerIds>,
}

#[derive(Clone, Debug)]
struct SideIds {
    encoder: TransformerIds,
    /// Kernel spanning one whole sequence (1 x L).
    conv_seq_w: ParamId,
    conv_seq_b: ParamId,
    /// Kernel spanning all sequences at one position (K x 1).
    conv_pos_w: ParamId,
    conv_pos_b: ParamId,
}

#[derive(Clone, Debug)]
struct AttnIds {
    wk: ParamId,
    wq: ParamId,
    v: ParamId,
}

#[derive(Clone, Debug)]
enum HeadIds {
    TwoStage { sketch_w: ParamId, sketch_b: ParamId, range_w: ParamId, range_b: ParamId },
    Joint { w: ParamId, b: ParamId },
}

#[derive(Clone, Debug)]
struct DecoderIds {
    emb: ParamId,
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    attn_header: AttnIds,
    attn_data: AttnIds,
    heads: HeadIds,
}

/// Parameter ids for the whole network.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    row: Option<SideIds>,
    col: Option<SideIds>,
    dec: DecoderIds,
}

/// Inverted dropout driven by a caller-seeded RNG; a no-op without one.
pub struct Dropout {
    rng: Option<ChaCha8Rng>,
    rate: f64,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rng: None, rate: 0.0 }
    }

    pub fn seeded(rate: f64, seed: u64) -> Self {
        if rate > 0.0 {
            Self { rng: Some(ChaCha8Rng::seed_from_u64(seed)), rate }
        } else {
            Self::off()
        }
    }

    fn apply(&mut self, t: &mut Tape, x: Var) -> Result<Var, AdError> {
        let Some(rng) = self.rng.as_mut() else { return Ok(x) };
        let keep = 1.0 - self.rate;
        let shape = t.value(x).shape().to_vec();
        let data = (0..shape.iter().product::<usize>()).map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = t.constant(DenseArray::new(&shape, data)?);
        t.mul(x, m)
    }
}

/// Encoder output: final token embeddings for the two attention banks.
/// `None` means the bank has no valid tokens.
pub struct Banks {
    pub header: Option<Var>,
    pub data: Option<Var>,
}

/// Encoder output detached from any tape, for step-wise decoding.
#[derive(Clone, Debug)]
pub struct DecoderCache {
    header: Option<(Arc<DenseArray>, Arc<DenseArray>)>,
    data: Option<(Arc<DenseArray>, Arc<DenseArray>)>,
}

impl DecoderCache {
    pub fn header_len(&self) -> usize {
        self.header.as_ref().map_or(0, |(b, _)| b.rows())
    }

    pub fn data_len(&self) -> usize {
        self.data.as_ref().map_or(0, |(b, _)| b.rows())
    }
}

/// Recurrent state of a batch of hypotheses, `[B, dec_hidden]` each.
#[derive(Clone, Debug)]
pub struct StepState {
    pub h: DenseArray,
    pub c: DenseArray,
}

impl StepState {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        Self { h: DenseArray::zeros(&[batch, hidden]), c: DenseArray::zeros(&[batch, hidden]) }
    }

    pub fn row(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        (self.h.row_slice(i).to_vec(), self.c.row_slice(i).to_vec())
    }

    pub fn stack(rows: &[(Vec<f64>, Vec<f64>)], hidden: usize) -> Self {
        let h = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
        let c = rows.iter().flat_map(|r| r.1.iter().copied()).collect();
        Self {
            h: DenseArray::new(&[rows.len(), hidden], h).expect("rows have hidden width"),
            c: DenseArray::new(&[rows.len(), hidden], c).expect("rows have hidden width"),
        }
    }
}

/// Per-row log-probabilities from one decoding step.
pub struct StepOutput {
    pub state: StepState,
    /// Two-stage: sketch-head log-probs per row; single-stage: joint log-probs.
    pub sketch_logp: Vec<Vec<f64>>,
    /// Two-stage only.
    pub range_logp: Vec<Vec<f64>>,
}

/// Parameter leaves for one tape, created on first use.
struct Leaves<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Leaves<'a> {
    fn new(store: &'a ParamStore) -> Self {
        Self { store, vars: vec![None; store.len()] }
    }

    fn get(&mut self, t: &mut Tape, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| t.param(self.store, id))
    }
}

fn register_transformer(s: &mut ParamStore, prefix: &str, cfg: &ModelConfig, vocab: usize, rng: &mut ChaCha8Rng) -> TransformerIds {
    let h = cfg.enc_hidden;
    let layers = (0..cfg.enc_layers)
        .map(|l| {
            let p = format!("{prefix}.layer{l}");
            LayerIds {
                wqkv: s.add_glorot(format!("{p}.attn.wqkv"), &[h, 3 * h], rng),
                bqkv: s.add_filled(format!("{p}.attn.bqkv"), &[1, 3 * h], 0.0),
                wo: s.add_glorot(format!("{p}.attn.wo"), &[h, h], rng),
                bo: s.add_filled(format!("{p}.attn.bo"), &[1, h], 0.0),
                ln1_g: s.add_filled(format!("{p}.ln1.gain"), &[1, h], 1.0),
                ln1_b: s.add_filled(format!("{p}.ln1.bias"), &[1, h], 0.0),
                w1: s.add_glorot(format!("{p}.ffn.w1"), &[h, cfg.ffn_hidden], rng),
                b1: s.add_filled(format!("{p}.ffn.b1"), &[1, cfg.ffn_hidden], 0.0),
                w2: s.add_glorot(format!("{p}.ffn.w2"), &[cfg.ffn_hidden, h], rng),
                b2: s.add_filled(format!("{p}.ffn.b2"), &[1, h], 0.0),
                ln2_g: s.add_filled(format!("{p}.ln2.gain"), &[1, h], 1.0),
                ln2_b: s.add_filled(format!("{p}.ln2.bias"), &[1, h], 0.0),
            }
        })
        .collect();
    TransformerIds {
        tok_emb: s.add_uniform(format!("{prefix}.tok_emb"), &[vocab, h], SMALL_INIT * 3f64.sqrt() * 10.0, rng),
        seg_emb: s.add_uniform(format!("{prefix}.seg_emb"), &[2, h], SMALL_INIT * 3f64.sqrt() * 10.0, rng),
        pos_emb: s.add_uniform(format!("{prefix}.pos_emb"), &[cfg.bundle_tokens(), h], SMALL_INIT * 3f64.sqrt() * 10.0, rng),
        ln_g: s.add_filled(format!("{prefix}.emb_ln.gain"), &[1, h], 1.0),
        ln_b: s.add_filled(format!("{prefix}.emb_ln.bias"), &[1, h], 0.0),
        layers,
    }
}

fn register_side(
    s: &mut ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    vocab: usize,
    sequences: usize,
    shared: Option<&TransformerIds>,
    rng: &mut ChaCha8Rng,
) -> SideIds {
    let encoder = match shared {
        Some(t) => t.clone(),
        None => register_transformer(s, &format!("{prefix}.encoder"), cfg, vocab, rng),
    };
    let h = cfg.enc_hidden;
    SideIds {
        encoder,
        conv_seq_w: s.add_glorot(format!("{prefix}.conv_seq.w"), &[cfg.seq_len * h, cfg.conv_dim], rng),
        conv_seq_b: s.add_filled(format!("{prefix}.conv_seq.b"), &[1, cfg.conv_dim], 0.0),
        conv_pos_w: s.add_glorot(format!("{prefix}.conv_pos.w"), &[sequences * h, cfg.conv_dim], rng),
        conv_pos_b: s.add_filled(format!("{prefix}.conv_pos.b"), &[1, cfg.conv_dim], 0.0),
    }
}

fn register_attn(s: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> AttnIds {
    AttnIds {
        wk: s.add_glorot(format!("{prefix}.wk"), &[cfg.token_dim(), cfg.attn_dim], rng),
        wq: s.add_glorot(format!("{prefix}.wq"), &[cfg.dec_hidden, cfg.attn_dim], rng),
        v: s.add_glorot(format!("{prefix}.v"), &[cfg.attn_dim, 1], rng),
    }
}

impl Network {
    /// Registers freshly initialised parameters in `store`, seeded from the config.
    pub fn build(config: &ModelConfig, input_vocab: usize, out: &OutputSpace, store: &mut ParamStore) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cfg = config;
        let d = cfg.radius as usize;
        let row = cfg.uses_row_side().then(|| register_side(store, "row", cfg, input_vocab, 2 * d + 2, None, &mut rng));
        let col = cfg.uses_col_side().then(|| {
            let shared = if cfg.shared_encoder { row.as_ref().map(|r| &r.encoder) } else { None };
            register_side(store, "col", cfg, input_vocab, 2 * d + 1, shared, &mut rng)
        });
        let hd = cfg.dec_hidden;
        let out_in = hd + 2 * cfg.token_dim();
        let small = SMALL_INIT * 3f64.sqrt();
        let heads = match cfg.decoding {
            Decoding::TwoStage => HeadIds::TwoStage {
                sketch_w: store.add_uniform("dec.sketch_head.w", &[out_in, out.n_sketch()], small, &mut rng),
                sketch_b: store.add_filled("dec.sketch_head.b", &[1, out.n_sketch()], 0.0),
                range_w: store.add_uniform("dec.range_head.w", &[out_in, out.n_range()], small, &mut rng),
                range_b: store.add_filled("dec.range_head.b", &[1, out.n_range()], 0.0),
            },
            Decoding::SingleStage => HeadIds::Joint {
                w: store.add_uniform("dec.joint_head.w", &[out_in, out.n_sketch() + out.n_range()], small, &mut rng),
                b: store.add_filled("dec.joint_head.b", &[1, out.n_sketch() + out.n_range()], 0.0),
            },
        };
        let dec = DecoderIds {
            emb: store.add_uniform("dec.emb", &[out.n_decoder_inputs(), hd], small * 10.0, &mut rng),
            wx: store.add_glorot("dec.lstm.wx", &[hd, 4 * hd], &mut rng),
            wh: store.add_glorot("dec.lstm.wh", &[hd, 4 * hd], &mut rng),
            b: store.add_filled("dec.lstm.b", &[1, 4 * hd], 0.0),
            attn_header: register_attn(store, "dec.attn_header", cfg, &mut rng),
            attn_data: register_attn(store, "dec.attn_data", cfg, &mut rng),
            heads,
        };
        Self { config: config.clone(), row, col, dec }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn transformer(&self, t: &mut Tape, p: &mut Leaves, ids: &TransformerIds, b: &BundleIds, drop: &mut Dropout) -> Result<Var, AdError> {
        let cfg = &self.config;
        let emb = p.get(t, ids.tok_emb);
        let tok = t.gather_rows(emb, &b.ids)?;
        let seg_table = p.get(t, ids.seg_emb);
        let seg = t.gather_rows(seg_table, &b.segments)?;
        let pos = p.get(t, ids.pos_emb);
        let x = t.add_n(&[tok, seg, pos])?;
        let (g, bb) = (p.get(t, ids.ln_g), p.get(t, ids.ln_b));
        let x = t.layer_norm(x, g, bb, LN_EPS)?;
        let mut x = drop.apply(t, x)?;
        let h = cfg.enc_hidden;
        let dh = h / cfg.enc_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in &ids.layers {
            let w = p.get(t, l.wqkv);
            let bq = p.get(t, l.bqkv);
            let qkv = t.matmul(x, w)?;
            let qkv = t.add_row(qkv, bq)?;
            let mut heads = Vec::with_capacity(cfg.enc_heads);
            for k in 0..cfg.enc_heads {
                let q = t.slice_cols(qkv, k * dh, dh)?;
                let kk = t.slice_cols(qkv, h + k * dh, dh)?;
                let v = t.slice_cols(qkv, 2 * h + k * dh, dh)?;
                let s = t.matmul_nt(q, kk)?;
                let s = t.scale(s, scale);
                let a = t.softmax(s, Some(&b.mask))?;
                heads.push(t.matmul(a, v)?);
            }
            let cat = t.concat_cols(&heads)?;
            let (wo, bo) = (p.get(t, l.wo), p.get(t, l.bo));
            let o = t.matmul(cat, wo)?;
            let o = t.add_row(o, bo)?;
            let o = drop.apply(t, o)?;
            let r = t.add(x, o)?;
            let (g1, b1) = (p.get(t, l.ln1_g), p.get(t, l.ln1_b));
            let x1 = t.layer_norm(r, g1, b1, LN_EPS)?;
            let (w1, bb1, w2, bb2) = (p.get(t, l.w1), p.get(t, l.b1), p.get(t, l.w2), p.get(t, l.b2));
            let f = t.matmul(x1, w1)?;
            let f = t.add_row(f, bb1)?;
            let f = t.gelu(f);
            let f = t.matmul(f, w2)?;
            let f = t.add_row(f, bb2)?;
            let f = drop.apply(t, f)?;
            let r2 = t.add(x1, f)?;
            let (g2, b2) = (p.get(t, l.ln2_g), p.get(t, l.ln2_b));
            x = t.layer_norm(r2, g2, b2, LN_EPS)?;
        }
        Ok(x)
    }

    /// Convolutions over a `[R*L, H]` grid of token embeddings; returns `[R*L, C+H]`.
    fn aggregate(&self, t: &mut Tape, p: &mut Leaves, ids: &SideIds, grid: Var, sequences: usize) -> Result<Var, AdError> {
        let (l, h) = (self.config.seq_len, self.config.enc_hidden);
        let flat = t.reshape(grid, &[sequences, l * h])?;
        let (w, b) = (p.get(t, ids.conv_seq_w), p.get(t, ids.conv_seq_b));
        let c_seq = t.matmul(flat, w)?;
        let c_seq = t.add_row(c_seq, b)?;
        let by_pos = t.transpose01(grid, sequences, l, h)?;
        let by_pos = t.reshape(by_pos, &[l, sequences * h])?;
        let (w, b) = (p.get(t, ids.conv_pos_w), p.get(t, ids.conv_pos_b));
        let c_pos = t.matmul(by_pos, w)?;
        let c_pos = t.add_row(c_pos, b)?;
        let c = t.outer_add(c_seq, c_pos)?;
        t.concat_cols(&[c, grid])
    }

    /// Row side: `(header, data)` valid-token embeddings.
    fn encode_rows(&self, t: &mut Tape, p: &mut Leaves, ids: &SideIds, input: &EncoderInput, drop: &mut Dropout) -> Result<(Option<Var>, Option<Var>), AdError> {
        let l = self.config.seq_len;
        let mut headers = Vec::new();
        let mut rows = Vec::new();
        let mut mask = Vec::new();
        for b in &input.row_bundles {
            let e = self.transformer(t, p, &ids.encoder, b, drop)?;
            headers.push(t.slice_rows(e, 0, l)?);
            for m in 1..=self.config.per_bundle as usize {
                rows.push(t.slice_rows(e, m * l, l)?);
                mask.extend_from_slice(&b.mask[m * l..(m + 1) * l]);
            }
        }
        // The header row gets a different encoding in every bundle; average them.
        let header = t.mean_n(&headers)?;
        let header_mask = &input.row_bundles[0].mask[..l];
        let mut parts = vec![header];
        parts.extend(rows);
        let grid = t.concat_rows(&parts)?;
        let e = self.aggregate(t, p, ids, grid, parts.len())?;
        let hidx: Vec<usize> = (0..l).filter(|&i| header_mask[i]).collect();
        let didx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).map(|i| i + l).collect();
        let header = if hidx.is_empty() { None } else { Some(t.gather_rows(e, &hidx)?) };
        let data = if didx.is_empty() { None } else { Some(t.gather_rows(e, &didx)?) };
        Ok((header, data))
    }

    /// Column side: data-role embeddings only; `C_0` in its header role is dropped.
    fn encode_cols(&self, t: &mut Tape, p: &mut Leaves, ids: &SideIds, input: &EncoderInput, drop: &mut Dropout) -> Result<Option<Var>, AdError> {
        let l = self.config.seq_len;
        let mut cols = Vec::new();
        let mut mask = Vec::new();
        for b in &input.col_bundles {
            let e = self.transformer(t, p, &ids.encoder, b, drop)?;
            for m in 1..=self.config.per_bundle as usize {
                cols.push(t.slice_rows(e, m * l, l)?);
                mask.extend_from_slice(&b.mask[m * l..(m + 1) * l]);
            }
        }
        let grid = t.concat_rows(&cols)?;
        let e = self.aggregate(t, p, ids, grid, cols.len())?;
        let didx: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
        Ok(if didx.is_empty() { None } else { Some(t.gather_rows(e, &didx)?) })
    }

    fn encode_with(&self, t: &mut Tape, p: &mut Leaves, input: &EncoderInput, drop: &mut Dropout) -> Result<Banks, AdError> {
        let (header, row_data) = match &self.row {
            Some(ids) => self.encode_rows(t, p, ids, input, drop)?,
            None => (None, None),
        };
        let col_data = match &self.col {
            Some(ids) => self.encode_cols(t, p, ids, input, drop)?,
            None => None,
        };
        let data = match (row_data, col_data) {
            (Some(a), Some(b)) => Some(t.concat_rows(&[a, b])?),
            (a, b) => a.or(b),
        };
        Ok(Banks { header, data })
    }

    pub fn encode(&self, t: &mut Tape, store: &ParamStore, input: &EncoderInput, drop: &mut Dropout) -> Result<Banks, AdError> {
        let mut p = Leaves::new(store);
        self.encode_with(t, &mut p, input, drop)
    }

    /// Additive attention of every query row over a bank; `[T, token_dim]`.
    fn attend(&self, t: &mut Tape, p: &mut Leaves, ids: &AttnIds, queries: Var, bank: Option<(Var, Var)>) -> Result<Var, AdError> {
        let rows = t.value(queries).rows();
        let Some((bank, keys)) = bank else {
            return Ok(t.constant(DenseArray::zeros(&[rows, self.config.token_dim()])));
        };
        let n = t.value(bank).rows();
        let wq = p.get(t, ids.wq);
        let q = t.matmul(queries, wq)?;
        let s = t.outer_add(q, keys)?;
        let s = t.tanh(s);
        let v = p.get(t, ids.v);
        let s = t.matmul(s, v)?;
        let s = t.reshape(s, &[rows, n])?;
        let a = t.softmax(s, None)?;
        t.matmul(a, bank)
    }

    fn keys(&self, t: &mut Tape, p: &mut Leaves, ids: &AttnIds, bank: Option<Var>) -> Result<Option<(Var, Var)>, AdError> {
        match bank {
            None => Ok(None),
            Some(b) => {
                let wk = p.get(t, ids.wk);
                Ok(Some((b, t.matmul(b, wk)?)))
            }
        }
    }

    /// One LSTM step over a batch: `x` `[B, 4H]` already projected.
    fn lstm(&self, t: &mut Tape, p: &mut Leaves, xw: Var, h: Var, c: Var) -> Result<(Var, Var), AdError> {
        let hd = self.config.dec_hidden;
        let wh = p.get(t, self.dec.wh);
        let hw = t.matmul(h, wh)?;
        let g = t.add(xw, hw)?;
        let i = t.slice_cols(g, 0, hd)?;
        let f = t.slice_cols(g, hd, hd)?;
        let u = t.slice_cols(g, 2 * hd, hd)?;
        let o = t.slice_cols(g, 3 * hd, hd)?;
        let (i, f, o) = (t.sigmoid(i), t.sigmoid(f), t.sigmoid(o));
        let u = t.tanh(u);
        let fc = t.mul(f, c)?;
        let iu = t.mul(i, u)?;
        let c2 = t.add(fc, iu)?;
        let tc = t.tanh(c2);
        let h2 = t.mul(o, tc)?;
        Ok((h2, c2))
    }

    fn project_inputs(&self, t: &mut Tape, p: &mut Leaves, inputs: &[usize]) -> Result<Var, AdError> {
        let emb = p.get(t, self.dec.emb);
        let x = t.gather_rows(emb, inputs)?;
        let wx = p.get(t, self.dec.wx);
        let b = p.get(t, self.dec.b);
        let xw = t.matmul(x, wx)?;
        t.add_row(xw, b)
    }

    fn head_logits(&self, t: &mut Tape, p: &mut Leaves, o: Var, head: Option<Head>) -> Result<Var, AdError> {
        let (w, b) = match (&self.dec.heads, head) {
            (HeadIds::TwoStage { sketch_w, sketch_b, .. }, Some(Head::Sketch)) => (*sketch_w, *sketch_b),
            (HeadIds::TwoStage { range_w, range_b, .. }, Some(Head::Range)) => (*range_w, *range_b),
            (HeadIds::Joint { w, b }, _) => (*w, *b),
            (HeadIds::TwoStage { .. }, None) => unreachable!("two-stage heads need a stage"),
        };
        let (w, b) = (p.get(t, w), p.get(t, b));
        let z = t.matmul(o, w)?;
        t.add_row(z, b)
    }

    /// Mean token cross-entropy of the gold stream under teacher forcing.
    pub fn loss(&self, t: &mut Tape, store: &ParamStore, input: &EncoderInput, gold: &GoldSeq, out: &OutputSpace, drop: &mut Dropout) -> Result<Var, AdError> {
        let mut p = Leaves::new(store);
        let banks = if self.config.uses_row_side() || self.config.uses_col_side() {
            self.encode_with(t, &mut p, input, drop)?
        } else {
            Banks { header: None, data: None }
        };
        self.decode_loss(t, &mut p, banks, gold, out, drop)
    }

    fn decode_loss(&self, t: &mut Tape, p: &mut Leaves, banks: Banks, gold: &GoldSeq, out: &OutputSpace, drop: &mut Dropout) -> Result<Var, AdError> {
        let hd = self.config.dec_hidden;
        let n = gold.steps.len();
        let mut inputs = vec![OutputSpace::GO];
        inputs.extend(gold.steps[..n - 1].iter().map(|(h, id)| out.decoder_input(*h, *id)));
        let xw = self.project_inputs(t, p, &inputs)?;
        let mut h = t.constant(DenseArray::zeros(&[1, hd]));
        let mut c = t.constant(DenseArray::zeros(&[1, hd]));
        let mut hs = Vec::with_capacity(n);
        for step in 0..n {
            let x = t.slice_rows(xw, step, 1)?;
            (h, c) = self.lstm(t, p, x, h, c)?;
            hs.push(h);
        }
        let hs = t.concat_rows(&hs)?;
        let hk = self.keys(t, p, &self.dec.attn_header, banks.header)?;
        let dk = self.keys(t, p, &self.dec.attn_data, banks.data)?;
        let ch = self.attend(t, p, &self.dec.attn_header, hs, hk)?;
        let cd = self.attend(t, p, &self.dec.attn_data, hs, dk)?;
        let o = t.concat_cols(&[hs, ch, cd])?;
        let o = drop.apply(t, o)?;
        let total = match self.config.decoding {
            Decoding::TwoStage => {
                let ns = gold.sketch_steps();
                let os = t.slice_rows(o, 0, ns)?;
                let ls = self.head_logits(t, p, os, Some(Head::Sketch))?;
                let ts: Vec<usize> = gold.steps[..ns].iter().map(|s| s.1).collect();
                let cs = t.cross_entropy(ls, &ts)?;
                let or = t.slice_rows(o, ns, n - ns)?;
                let lr = self.head_logits(t, p, or, Some(Head::Range))?;
                let tr: Vec<usize> = gold.steps[ns..].iter().map(|s| s.1).collect();
                let cr = t.cross_entropy(lr, &tr)?;
                t.add(cs, cr)?
            }
            Decoding::SingleStage => {
                let lj = self.head_logits(t, p, o, None)?;
                let tj: Vec<usize> = gold.steps.iter().map(|(h, id)| out.joint(*h, *id)).collect();
                t.cross_entropy(lj, &tj)?
            }
        };
        Ok(t.scale(total, 1.0 / n as f64))
    }

    /// Runs the encoder once and keeps the banks and their attention keys.
    pub fn prepare(&self, store: &ParamStore, input: &EncoderInput) -> Result<DecoderCache, AdError> {
        let mut t = Tape::new();
        let mut p = Leaves::new(store);
        let banks = if self.config.uses_row_side() || self.config.uses_col_side() {
            self.encode_with(&mut t, &mut p, input, &mut Dropout::off())?
        } else {
            Banks { header: None, data: None }
        };
        let detach = |t: &mut Tape, p: &mut Leaves, ids: &AttnIds, bank: Option<Var>| -> Result<_, AdError> {
            match self.keys(t, p, ids, bank)? {
                None => Ok(None),
                Some((b, k)) => Ok(Some((Arc::new(t.value(b).clone()), Arc::new(t.value(k).clone())))),
            }
        };
        Ok(DecoderCache {
            header: detach(&mut t, &mut p, &self.dec.attn_header, banks.header)?,
            data: detach(&mut t, &mut p, &self.dec.attn_data, banks.data)?,
        })
    }

    /// One decoder step for a batch of hypotheses. Rows are computed independently,
    /// so a row's result does not depend on the rest of the batch.
    pub fn step(&self, store: &ParamStore, cache: &DecoderCache, inputs: &[usize], state: &StepState) -> Result<StepOutput, AdError> {
        let mut t = Tape::new();
        let mut p = Leaves::new(store);
        let t = &mut t;
        let xw = self.project_inputs(t, &mut p, inputs)?;
        let h = t.constant(state.h.clone());
        let c = t.constant(state.c.clone());
        let (h2, c2) = self.lstm(t, &mut p, xw, h, c)?;
        let bank = |t: &mut Tape, b: &Option<(Arc<DenseArray>, Arc<DenseArray>)>| {
            b.as_ref().map(|(bank, keys)| (t.constant_arc(Arc::clone(bank)), t.constant_arc(Arc::clone(keys))))
        };
        let hb = bank(t, &cache.header);
        let db = bank(t, &cache.data);
        let ch = self.attend(t, &mut p, &self.dec.attn_header, h2, hb)?;
        let cd = self.attend(t, &mut p, &self.dec.attn_data, h2, db)?;
        let o = t.concat_cols(&[h2, ch, cd])?;
        let log_rows = |t: &Tape, v: Var| -> Vec<Vec<f64>> {
            let a = t.value(v);
            (0..a.rows()).map(|i| sheetcoder_autodiff::log_softmax(a.row_slice(i))).collect()
        };
        let (sketch_logp, range_logp) = match self.config.decoding {
            Decoding::TwoStage => {
                let ls = self.head_logits(t, &mut p, o, Some(Head::Sketch))?;
                let lr = self.head_logits(t, &mut p, o, Some(Head::Range))?;
                (log_rows(t, ls), log_rows(t, lr))
            }
            Decoding::SingleStage => {
                let lj = self.head_logits(t, &mut p, o, None)?;
                (log_rows(t, lj), Vec::new())
            }
        };
        Ok(StepOutput { state: StepState { h: t.value(h2).clone(), c: t.value(c2).clone() }, sketch_logp, range_logp })
    }
}
