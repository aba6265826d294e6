//! Argument parsing and the subcommands.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sheetcoder_core::a1::{parse_a1, A1Ref};
use sheetcoder_core::dataset::{
    gold_in_vocab, preprocess, read_records, read_vocabs, split_path, PreprocessOptions, PreprocessReport, SplitReport,
};
use sheetcoder_core::grid::load_grid_file;
use sheetcoder_core::metrics::REPORT_KS;
use sheetcoder_model::eval::evaluate;
use sheetcoder_model::predict::predict;
use sheetcoder_model::train::{train, LogRecord, TrainConfig};
use sheetcoder_model::{Model, ModelConfig, Prepared};

use crate::service::{self, AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "sheetcoder", version, about = "Predict spreadsheet formulas from their surrounding cells")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine a directory of grid files into train/valid/test examples and vocabularies.
    Preprocess(PreprocessArgs),
    /// Train a model; writes the best checkpoint and a metrics log.
    Train(TrainArgs),
    /// Top-k exact-match accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Ranked formula suggestions for one cell of a grid file.
    Predict(PredictArgs),
    /// Run the HTTP prediction service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory of `.grid.json` files.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Context radius D.
    #[arg(long, default_value_t = 10)]
    pub radius: u32,
    #[arg(long, default_value_t = 10)]
    pub min_count: u64,
    /// Train, valid and test fractions of files.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 2 layers, hidden 128.
    Desk,
    /// 1 layer, hidden 16; for smoke tests.
    Tiny,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Output directory of `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    /// Where the best checkpoint is written.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Metrics log (JSON lines); defaults to the checkpoint path with `.metrics.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Full model config as JSON; overrides --preset and the size flags.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Rows per bundle N.
    #[arg(long, default_value_t = 3)]
    pub per_bundle: u32,
    /// Tokens per row L; defaults to 128 (desk) or 16 (tiny).
    #[arg(long)]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Also save the final model here.
    #[arg(long)]
    pub last: Option<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    #[arg(long, default_value_t = 100)]
    pub eval_every: u64,
    #[arg(long, default_value_t = 200)]
    pub valid_limit: usize,
    /// Seeds parameter init, example order and dropout.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Defaults to the checkpoint's beam size.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = REPORT_KS)]
    pub k: Vec<usize>,
    /// Evaluate with the header row removed from every context.
    #[arg(long)]
    pub blank_headers: bool,
    /// Only the first N examples.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub grid: PathBuf,
    /// Target cell, e.g. D4.
    #[arg(long)]
    pub target: String,
    /// Defaults to the first sheet.
    #[arg(long)]
    pub sheet: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Defaults to the checkpoint's beam size.
    #[arg(long)]
    pub beam: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "SSCODER_CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long, env = "SSCODER_BIND", default_value = "127.0.0.1:8080")]
    pub bind: String,
    /// Defaults to the checkpoint's beam size.
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, default_value_t = 1 << 20)]
    pub max_body_bytes: usize,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
}

/// Parses `args` and runs the command. Usage errors exit 2, failures 1.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Serve(a) => cmd_serve(a),
    }
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    let ratios: [f64; 3] = a.ratios.try_into().map_err(|_| anyhow!("--ratios takes three numbers"))?;
    let opts = PreprocessOptions { radius: a.radius, min_count: a.min_count, ratios, seed: a.seed };
    let report = preprocess(&a.corpus, &a.out, &opts)?;
    for (name, s) in [("train", &report.train), ("valid", &report.valid), ("test", &report.test)] {
        let m = &s.mining;
        println!(
            "{name}: {} files, {} formulas, {} examples ({} duplicates dropped, {} filtered, {} out of vocabulary)",
            s.files.len(),
            m.total_formulas,
            s.examples,
            m.dedup_dropped,
            m.filtered_total(),
            s.unk_dropped
        );
    }
    println!("vocabularies: {:?}", report.vocab_sizes);
    Ok(())
}

fn read_report(data: &Path) -> Result<Option<PreprocessReport>> {
    let path = data.join("stats.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
}

fn model_config(a: &TrainArgs, radius: u32) -> Result<ModelConfig> {
    if let Some(path) = &a.model_config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        return serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()));
    }
    let mut cfg = match a.preset {
        Preset::Desk => ModelConfig { radius, per_bundle: a.per_bundle, seq_len: a.seq_len.unwrap_or(128), ..ModelConfig::default() },
        Preset::Tiny => ModelConfig::tiny(radius, a.per_bundle, a.seq_len.unwrap_or(16)),
    };
    if let Some(d) = a.dropout {
        cfg.dropout = d;
    }
    cfg.seed = a.seed;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let report = read_report(&a.data)?;
    let radius = report.as_ref().map_or(ModelConfig::default().radius, |r| r.options.radius);
    let vocabs = read_vocabs(&a.data)?;
    let mut model = match &a.resume {
        Some(path) => Model::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => Model::new(model_config(&a, radius)?, vocabs.clone())?,
    };
    if model.vocabs != vocabs {
        bail!("checkpoint vocabularies differ from those in {}", a.data.display());
    }
    let load = |split: &str| -> Result<Vec<Prepared>> {
        let records = read_records(&split_path(&a.data, split))?;
        records.iter().filter(|r| gold_in_vocab(r, &model.vocabs)).map(|r| Ok(model.prepare_example(r)?)).collect()
    };
    let train_set = load("train")?;
    if train_set.is_empty() {
        bail!("no examples in the train split");
    }
    let valid_set = load("valid")?;
    let cfg = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        clip_norm: a.clip_norm,
        eval_every: a.eval_every,
        valid_limit: a.valid_limit,
        seed: a.seed,
    };
    let log_path = a.log.clone().unwrap_or_else(|| a.checkpoint.with_extension("metrics.jsonl"));
    let mut log = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log_err = None;
    let mut on_log = |r: &LogRecord| {
        let line = serde_json::to_string(r).expect("log records serialize");
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            log_err.get_or_insert(e);
        }
    };
    let outcome = train(&mut model, &train_set, &valid_set, &cfg, Some(&a.checkpoint), &mut on_log)?;
    if let Some(e) = log_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    if let Some(last) = &a.last {
        model.save(last)?;
    }
    println!("best step {} loss {:.6}; checkpoint {}", outcome.best_step, outcome.best_loss, a.checkpoint.display());
    Ok(())
}

fn split_report<'a>(report: &'a PreprocessReport, split: &str) -> Option<&'a SplitReport> {
    match split {
        "train" => Some(&report.train),
        "valid" => Some(&report.valid),
        "test" => Some(&report.test),
        _ => None,
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let path = split_path(&a.data, &a.split);
    let mut records = read_records(&path)?;
    if let Some(n) = a.limit {
        records.truncate(n);
    }
    if records.is_empty() {
        bail!("no examples in split `{}` ({})", a.split, path.display());
    }
    let beam = a.beam.unwrap_or(model.config.beam_size);
    let mut report = evaluate(&model, &records, beam, &a.k, a.blank_headers)?;
    if let Some(s) = read_report(&a.data)?.as_ref().and_then(|r| split_report(r, &a.split)) {
        report.dropped = s.mining.filtered.clone();
        report.dropped.insert("DuplicateCap".into(), s.mining.dedup_dropped);
        report.dropped.insert("OutOfVocabulary".into(), s.unk_dropped);
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{report}");
    }
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let sheets = load_grid_file(&a.grid)?;
    let sheet = match &a.sheet {
        Some(name) => sheets.iter().find(|s| &s.name == name).ok_or_else(|| anyhow!("no sheet named `{name}`"))?,
        None => sheets.first().ok_or_else(|| anyhow!("{} has no sheets", a.grid.display()))?,
    };
    let target = match parse_a1(&a.target) {
        Ok(A1Ref::Single(t)) => t,
        _ => bail!("target `{}` is not a single relative A1 cell", a.target),
    };
    let beam = a.beam.unwrap_or(model.config.beam_size);
    let out = predict(&model, sheet, target, a.top_k, beam)?;
    for p in &out.predictions {
        println!("{}\t{:.6}\t{}", p.rank, p.logprob, p.formula);
    }
    if out.dropped_off_sheet > 0 {
        eprintln!("{} suggestions referenced cells off the sheet and were dropped", out.dropped_off_sheet);
    }
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let config = ServiceConfig {
        bind: a.bind.clone(),
        beam: a.beam.unwrap_or(model.config.beam_size),
        top_k: a.top_k,
        max_body_bytes: a.max_body_bytes,
        max_in_flight: a.max_in_flight,
    };
    let state = AppState::new(model, config).map_err(|e| anyhow!(e))?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.bind).await.with_context(|| format!("binding {}", a.bind))?;
        eprintln!("listening on {}", listener.local_addr()?);
        service::serve(listener, state).await?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn defaults_parse() {
        let cli = Cli::try_parse_from(["sheetcoder", "eval", "--checkpoint", "c", "--data", "d"]).unwrap();
        let Command::Eval(e) = cli.command else { panic!("not eval") };
        assert_eq!(e.k, vec![1, 5, 10]);
        assert_eq!(e.split, "test");
        let cli = Cli::try_parse_from(["sheetcoder", "preprocess", "--corpus", "c", "--out", "o", "--ratios", "1,0,0"]).unwrap();
        let Command::Preprocess(p) = cli.command else { panic!("not preprocess") };
        assert_eq!(p.ratios, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let err = Cli::try_parse_from(["sheetcoder", "predict", "--bogus"]).unwrap_err();
        assert!(err.use_stderr());
        assert_eq!(err.exit_code(), 2);
    }
}
