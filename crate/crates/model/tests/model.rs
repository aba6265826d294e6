use sheetcoder_autodiff::Tape;
use sheetcoder_core::a1::CellAddr;
use sheetcoder_core::context::extract_window;
use sheetcoder_core::dataset::{build_vocab, ExampleRecord};
use sheetcoder_core::formula::{accepts_stream, EOF};
use sheetcoder_core::grid::{CellValue, Sheet};
use sheetcoder_core::toy::{toy_examples, toy_sheet, ToySpec};
use sheetcoder_model::features::{GoldSeq, Head, OutputSpace};
use sheetcoder_model::net::{Dropout, StepState};
use sheetcoder_model::predict::predict;
use sheetcoder_model::train::{train, TrainConfig};
use sheetcoder_model::{ContextMode, Decoding, Model, ModelConfig, ModelError, Prepared, Sides};

const D: u32 = 4;

fn corpus(n: usize, seed: u64) -> Vec<ExampleRecord> {
    toy_examples(n, &ToySpec::default(), D, seed)
}

fn tiny() -> ModelConfig {
    ModelConfig::tiny(D, 3, 12)
}

fn model_with(cfg: ModelConfig, train: &[ExampleRecord]) -> Model {
    Model::new(cfg, build_vocab(train, 1, D).unwrap()).unwrap()
}

fn prepare(m: &Model, ex: &[ExampleRecord]) -> Vec<Prepared> {
    ex.iter().map(|e| m.prepare_example(e).unwrap()).collect()
}

fn params_bits(m: &Model) -> Vec<u64> {
    m.params.iter().flat_map(|(_, p)| p.value.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn untrained_loss_is_near_uniform() {
    let ex = corpus(20, 1);
    let m = model_with(tiny(), &ex);
    let out = m.output_space();
    for p in prepare(&m, &ex) {
        let expected: f64 = p
            .gold
            .steps
            .iter()
            .map(|(h, _)| match h {
                Head::Sketch => (out.n_sketch() as f64).ln(),
                Head::Range => (out.n_range() as f64).ln(),
            })
            .sum::<f64>()
            / p.gold.steps.len() as f64;
        let loss = m.loss(&p).unwrap();
        assert!((loss - expected).abs() <= 0.2 * expected, "{loss} vs {expected}");
    }
}

#[test]
fn sum_stream_uses_three_sketch_and_eight_range_steps() {
    let ex = corpus(5, 2);
    let m = model_with(tiny(), &ex);
    let one_col = ex.iter().find(|e| e.gold.contains("C[0] $SEP$")).or(ex.first()).unwrap();
    let p = m.prepare_example(one_col).unwrap();
    // SUM RANGE $ENDSKETCH$, then $R$ R C $SEP$ R C $ENDR$ EOF.
    assert_eq!(p.gold.sketch_steps(), 3);
    assert_eq!(p.gold.steps.len() - p.gold.sketch_steps(), 8);
}

#[test]
fn teacher_forced_loss_matches_stepwise_log_probs() {
    let ex = corpus(5, 3);
    let m = model_with(tiny(), &ex);
    let out = m.output_space();
    let eof = (0..out.n_range()).find(|&i| out.text(Head::Range, i) == EOF).unwrap();
    let gold = GoldSeq { steps: vec![(Head::Sketch, out.end_sketch), (Head::Range, eof)] };
    let input = m.featurize(&ex[0].window).unwrap();
    let mut t = Tape::new();
    let l = m.network().loss(&mut t, &m.params, &input, &gold, out, &mut Dropout::off()).unwrap();
    let loss = t.value(l).item();

    let cache = m.cache(&input).unwrap();
    let hd = m.config.dec_hidden;
    let s1 = m.network().step(&m.params, &cache, &[OutputSpace::GO], &StepState::zeros(1, hd)).unwrap();
    let s2 = m.network().step(&m.params, &cache, &[out.decoder_input(Head::Sketch, out.end_sketch)], &s1.state).unwrap();
    let expected = -(s1.sketch_logp[0][out.end_sketch] + s2.range_logp[0][eof]) / 2.0;
    assert!((loss - expected).abs() < 1e-10, "{loss} vs {expected}");
}

#[test]
fn gold_token_outside_vocab_is_named() {
    let ex = corpus(5, 4);
    let m = model_with(tiny(), &ex);
    let mut odd = ex[0].clone();
    odd.gold = odd.gold.replacen("SUM", "STDEV", 1).replacen("AVERAGE", "STDEV", 1).replacen("MAX", "STDEV", 1).replacen("MIN", "STDEV", 1);
    let err = m.prepare_example(&odd).unwrap_err();
    assert!(err.to_string().contains("STDEV"), "{err}");
}

fn dense_sheet() -> (Sheet, CellAddr) {
    let mut s = Sheet::new("dense");
    s.set_frozen_rows(1);
    for c in 1..=40 {
        s.set(CellAddr::new(1, c), CellValue::text("h"));
        for r in 2..=40 {
            s.set(CellAddr::new(r, c), CellValue::number("5"));
        }
    }
    let target = CellAddr::new(20, 20);
    s.set(target, CellValue::formula("=T19", "5").unwrap());
    (s, target)
}

#[test]
fn bank_sizes_at_full_radius() {
    let (sheet, target) = dense_sheet();
    let mut cfg = ModelConfig::tiny(10, 3, 8);
    cfg.seed = 5;
    let window = extract_window(&sheet, target, 10);
    let vocabs = build_vocab(&toy_examples(5, &ToySpec::default(), 10, 1), 1, 10).unwrap();
    let m = Model::new(cfg, vocabs).unwrap();
    let cache = m.cache(&m.featurize(&window).unwrap()).unwrap();
    // Every sequence is full: three 2-token cells joined by [SEP].
    assert_eq!(cache.header_len(), 8);
    // 21 row-side data sequences plus 21 column-side ones.
    assert_eq!(cache.data_len(), 2 * 21 * 8);
}

#[test]
fn empty_context_decodes_finitely() {
    let mut s = Sheet::new("lonely");
    let target = CellAddr::new(3, 3);
    s.set(target, CellValue::number("1"));
    let ex = corpus(5, 5);
    let m = model_with(tiny(), &ex);
    let window = extract_window(&s, target, D);
    let cache = m.cache(&m.featurize(&window).unwrap()).unwrap();
    assert_eq!(cache.header_len(), 0);
    let step = m.network().step(&m.params, &cache, &[OutputSpace::GO], &StepState::zeros(1, m.config.dec_hidden)).unwrap();
    assert!(step.sketch_logp[0].iter().all(|x| x.is_finite()));
    for h in m.beam(&window, 4).unwrap() {
        assert!(h.logp.is_finite());
    }
}

#[test]
fn beam_of_one_is_greedy_and_outputs_parse() {
    let ex = corpus(10, 6);
    let m = model_with(tiny(), &ex);
    for e in &ex {
        let g = m.greedy(&e.window).unwrap();
        let b = m.beam(&e.window, 1).unwrap();
        assert_eq!(g.as_ref().map(|h| &h.tokens), b.first().map(|h| &h.tokens));
        for h in m.beam(&e.window, 4).unwrap() {
            accepts_stream(&h.tokens, m.config.limits()).unwrap();
            h.ir().unwrap();
        }
    }
}

#[test]
fn training_is_deterministic_and_resumable() {
    let ex = corpus(30, 7);
    let cfg = ModelConfig { dropout: 0.1, ..tiny() };
    let tc = TrainConfig { steps: 12, batch_size: 4, lr: 3e-3, eval_every: 4, valid_limit: 0, seed: 9, ..Default::default() };

    let mut a = model_with(cfg.clone(), &ex);
    let data = prepare(&a, &ex);
    let log_a = train(&mut a, &data, &[], &tc, None, |_| {}).unwrap().log;

    let mut b = model_with(cfg.clone(), &ex);
    let log_b = train(&mut b, &data, &[], &tc, None, |_| {}).unwrap().log;
    assert_eq!(log_a, log_b);
    assert_eq!(params_bits(&a), params_bits(&b));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("half.ckpt");
    let mut c = model_with(cfg, &ex);
    train(&mut c, &data, &[], &TrainConfig { steps: 8, ..tc.clone() }, None, |_| {}).unwrap();
    c.save(&path).unwrap();
    let mut c = Model::load(&path).unwrap();
    assert_eq!(c.params.step, 8);
    let rest = train(&mut c, &data, &[], &tc, None, |_| {}).unwrap().log;
    assert_eq!(rest.last(), log_a.last());
    assert_eq!(params_bits(&a), params_bits(&c));
}

#[test]
fn loss_falls_over_first_hundred_steps() {
    let ex = corpus(40, 8);
    let mut m = model_with(tiny(), &ex);
    let data = prepare(&m, &ex);
    let before: f64 = data.iter().map(|p| m.loss(p).unwrap()).sum::<f64>() / data.len() as f64;
    let tc = TrainConfig { steps: 100, batch_size: 8, lr: 3e-3, eval_every: 50, valid_limit: 0, ..Default::default() };
    train(&mut m, &data, &[], &tc, None, |_| {}).unwrap();
    let after: f64 = data.iter().map(|p| m.loss(p).unwrap()).sum::<f64>() / data.len() as f64;
    assert!(after < 0.5 * before, "{before} -> {after}");
}

#[test]
fn best_checkpoint_is_written_and_nan_aborts() {
    let ex = corpus(10, 9);
    let mut m = model_with(tiny(), &ex);
    let data = prepare(&m, &ex);
    let dir = tempfile::tempdir().unwrap();
    let best = dir.path().join("best.ckpt");
    let tc = TrainConfig { steps: 4, batch_size: 2, lr: 1e-3, eval_every: 2, valid_limit: 2, ..Default::default() };
    let outcome = train(&mut m, &data, &data[..3], &tc, Some(&best), |_| {}).unwrap();
    assert_eq!(outcome.log.len(), 2);
    assert!(outcome.log.iter().all(|r| r.valid_loss.is_some() && r.valid_top1.is_some()));
    let loaded = Model::load(&best).unwrap();
    assert_eq!(loaded.params.step, outcome.best_step);

    let good = params_bits(&m);
    let tc = TrainConfig { steps: 10, lr: f64::NAN, eval_every: 1, ..tc };
    let err = train(&mut m, &data, &[], &tc, None, |_| {}).unwrap_err();
    assert!(matches!(err, ModelError::Diverged { .. }), "{err}");
    assert_ne!(good, params_bits(&m));
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let ex = corpus(10, 10);
    let m = model_with(tiny(), &ex);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config, m.config);
    assert_eq!(params_bits(&back), params_bits(&m));
    for e in &ex {
        assert_eq!(m.beam(&e.window, 3).unwrap(), back.beam(&e.window, 3).unwrap());
    }

    // A checkpoint whose parameters disagree with its embedded config.
    let big = model_with(ModelConfig { enc_hidden: 24, ..tiny() }, &ex);
    let other = dir.path().join("other.ckpt");
    big.save(&other).unwrap();
    let mut bytes = std::fs::read(&other).unwrap();
    let small_header = std::fs::read(&path).unwrap();
    let cut = |b: &[u8]| {
        let n = u64::from_le_bytes(b[12..20].try_into().unwrap()) as usize;
        20 + n
    };
    let tail = bytes.split_off(cut(&bytes));
    let mut forged = small_header[..cut(&small_header)].to_vec();
    forged.extend(tail);
    std::fs::write(&other, forged).unwrap();
    match Model::load(&other) {
        Err(ModelError::Checkpoint(_)) => {}
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mismatched checkpoint loaded"),
    }
}

#[test]
fn predict_is_deterministic_and_bounds_top_k() {
    let ex = corpus(10, 11);
    let m = model_with(tiny(), &ex);
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
    let (sheet, target) = toy_sheet("s", &ToySpec::default(), &mut rng);
    let a = predict(&m, &sheet, target, 3, 4).unwrap();
    let b = predict(&m, &sheet, target, 3, 4).unwrap();
    assert_eq!(a, b);
    assert!(a.predictions.len() <= 3);
    assert!(matches!(predict(&m, &sheet, target, 5, 4), Err(ModelError::Config(_))));
    assert!(matches!(predict(&m, &sheet, CellAddr::new(500, 1), 1, 4), Err(ModelError::Data(_))));
}

#[test]
fn memorized_example_is_predicted_first() {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(12);
    let (sheet, target) = toy_sheet("s", &ToySpec::default(), &mut rng);
    let (ex, _) = sheetcoder_core::dataset::mine_sheets("one.grid.json", std::slice::from_ref(&sheet), D);
    assert_eq!(ex.len(), 1);
    let mut m = model_with(tiny(), &ex);
    let data = prepare(&m, &ex);
    let tc = TrainConfig { steps: 150, batch_size: 1, lr: 1e-2, eval_every: 50, valid_limit: 0, ..Default::default() };
    train(&mut m, &data, &[], &tc, None, |_| {}).unwrap();
    let out = predict(&m, &sheet, target, 1, 4).unwrap();
    let gold = sheet.cell_at(target).formula_source().unwrap().to_string();
    assert_eq!(out.predictions[0].formula, gold);
}

#[test]
fn ablation_modes_train_and_decode() {
    let ex = corpus(8, 13);
    let modes = [
        ModelConfig { decoding: Decoding::SingleStage, ..tiny() },
        ModelConfig { sides: Sides::RowOnly, ..tiny() },
        ModelConfig { sides: Sides::ColumnOnly, ..tiny() },
        ModelConfig { context: ContextMode::NoContext, ..tiny() },
        ModelConfig { shared_encoder: true, ..tiny() },
    ];
    for cfg in modes {
        let mut m = model_with(cfg.clone(), &ex);
        let data = prepare(&m, &ex);
        let tc = TrainConfig { steps: 3, batch_size: 2, eval_every: 3, valid_limit: 0, ..Default::default() };
        train(&mut m, &data, &[], &tc, None, |_| {}).unwrap();
        for h in m.beam(&ex[0].window, 3).unwrap() {
            accepts_stream(&h.tokens, m.config.limits()).unwrap();
        }
        let g = m.greedy(&ex[0].window).unwrap();
        assert_eq!(g.map(|h| h.tokens), m.beam(&ex[0].window, 1).unwrap().first().map(|h| h.tokens.clone()), "{cfg:?}");
    }
}

#[test]
fn bad_tiling_is_rejected() {
    let ex = corpus(3, 14);
    let vocabs = build_vocab(&ex, 1, D).unwrap();
    assert!(Model::new(ModelConfig::tiny(D, 2, 12), vocabs.clone()).is_err());
    assert!(Model::new(ModelConfig { seq_len: 200, ..ModelConfig::tiny(D, 3, 12) }, vocabs).is_err());
}
