//! Corpus mining, file-level splits, vocabularies, and the on-disk dataset layout.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::a1::{parse_a1, A1Ref, CellAddr};
use crate::context::{extract_window, ContextWindow, PAD, SEP, UNK};
use crate::formula::{classify_formula, parse_formula, to_ir, Eligibility, FormulaIR, RangeToken, END_SKETCH, RANGE};
use crate::grid::{load_grid_file, GRID_EXTENSION};
use crate::vocab::Vocabulary;

/// At most this many copies of one relative formula per (sheet, column).
pub const MAX_DUPLICATES: usize = 10;

pub const PARSE_ERROR: &str = "ParseError";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("split ratios must be three non-negative numbers summing to 1, got {0:?}")]
    BadRatios(Vec<f64>),
    #[error("cannot split {files} files three ways")]
    TooFewFiles { files: usize },
    #[error("training split has no examples")]
    EmptyTrain,
    #[error("bad record at {path}:{line}: {message}")]
    BadRecord { path: String, line: usize, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.display().to_string(), source }
}

/// One (context, formula) training example.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleRecord {
    pub file: String,
    pub sheet: String,
    /// Target cell in A1 notation.
    pub target: String,
    pub window: ContextWindow,
    /// Gold formula in stream text form.
    pub gold: String,
    pub sketch_len: usize,
}

impl ExampleRecord {
    pub fn gold_ir(&self) -> Result<FormulaIR, crate::formula::IrError> {
        FormulaIR::parse_stream(&self.gold)
    }

    pub fn target_addr(&self) -> Option<CellAddr> {
        match parse_a1(&self.target).ok()? {
            A1Ref::Single(a) => Some(a),
            _ => None,
        }
    }
}

/// Per-reason accounting for one mining pass.
///
/// `total_formulas == emitted + dedup_dropped + sum(filtered)`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiningStats {
    pub files: usize,
    pub corrupt_files: Vec<String>,
    pub total_formulas: u64,
    pub emitted: u64,
    pub dedup_dropped: u64,
    /// Keyed by filter reason name, plus `ParseError`.
    pub filtered: BTreeMap<String, u64>,
}

impl MiningStats {
    pub fn filtered_total(&self) -> u64 {
        self.filtered.values().sum()
    }

    pub fn reconciles(&self) -> bool {
        self.total_formulas == self.emitted + self.dedup_dropped + self.filtered_total()
    }

    fn merge(&mut self, other: MiningStats) {
        self.files += other.files;
        self.corrupt_files.extend(other.corrupt_files);
        self.total_formulas += other.total_formulas;
        self.emitted += other.emitted;
        self.dedup_dropped += other.dedup_dropped;
        for (k, v) in other.filtered {
            *self.filtered.entry(k).or_default() += v;
        }
    }
}

/// Mines every formula cell of every sheet in one parsed file.
pub fn mine_sheets(file: &str, sheets: &[crate::grid::Sheet], radius: u32) -> (Vec<ExampleRecord>, MiningStats) {
    let mut stats = MiningStats::default();
    let mut out = Vec::new();
    for sheet in sheets {
        // (column, stream) -> occurrences so far; cells iterate in row order.
        let mut seen: HashMap<(u32, String), usize> = HashMap::new();
        for (addr, cell) in sheet.formula_cells() {
            stats.total_formulas += 1;
            let source = cell.formula_source().expect("formula cells carry source");
            let ast = match parse_formula(source) {
                Ok(ast) => ast,
                Err(_) => {
                    *stats.filtered.entry(PARSE_ERROR.to_string()).or_default() += 1;
                    continue;
                }
            };
            if let Eligibility::Filtered(reason) = classify_formula(&ast, addr, radius) {
                *stats.filtered.entry(reason.to_string()).or_default() += 1;
                continue;
            }
            let ir = to_ir(&ast, addr, radius).expect("eligible formulas convert");
            let gold = ir.to_string();
            let n = seen.entry((addr.col, gold.clone())).or_default();
            *n += 1;
            if *n > MAX_DUPLICATES {
                stats.dedup_dropped += 1;
                continue;
            }
            stats.emitted += 1;
            out.push(ExampleRecord {
                file: file.to_string(),
                sheet: sheet.name.clone(),
                target: addr.to_string(),
                window: extract_window(sheet, addr, radius),
                sketch_len: ir.sketch_length(),
                gold,
            });
        }
    }
    (out, stats)
}

/// Sorted `.grid.json` files directly under `dir`.
pub fn list_grid_files(dir: &Path) -> Result<Vec<PathBuf>, DatasetError> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(GRID_EXTENSION)) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Mines `files` in order. Corrupt files are skipped and listed in the stats.
pub fn mine_files(files: &[PathBuf], radius: u32) -> (Vec<ExampleRecord>, MiningStats) {
    let mut records = Vec::new();
    let mut stats = MiningStats::default();
    for path in files {
        stats.files += 1;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match load_grid_file(path) {
            Ok(sheets) => {
                let (r, s) = mine_sheets(&name, &sheets, radius);
                records.extend(r);
                stats.merge(s);
            }
            Err(e) => {
                eprintln!("skipping {}: {e}", path.display());
                stats.corrupt_files.push(name);
            }
        }
    }
    (records, stats)
}

pub fn mine_corpus(dir: &Path, radius: u32) -> Result<(Vec<ExampleRecord>, MiningStats), DatasetError> {
    Ok(mine_files(&list_grid_files(dir)?, radius))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle, then cut at file granularity.
pub fn split_corpus<T: Clone>(files: &[T], ratios: [f64; 3], seed: u64) -> Result<Split<T>, DatasetError> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DatasetError::BadRatios(ratios.to_vec()));
    }
    if files.len() < 3 {
        return Err(DatasetError::TooFewFiles { files: files.len() });
    }
    let mut shuffled = files.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = files.len();
    let n_train = ((n as f64) * ratios[0]).round() as usize;
    let n_valid = (((n as f64) * ratios[1]).round() as usize).min(n - n_train);
    let test = shuffled.split_off(n_train + n_valid);
    let valid = shuffled.split_off(n_train);
    Ok(Split { train: shuffled, valid, test })
}

/// Input, sketch and range vocabularies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabs {
    pub input: Vocabulary,
    pub sketch: Vocabulary,
    pub range: Vocabulary,
}

pub const INPUT_RESERVED: [&str; 3] = [PAD, UNK, SEP];
pub const SKETCH_RESERVED: [&str; 3] = [UNK, END_SKETCH, RANGE];

pub fn range_vocabulary(radius: u32) -> Vocabulary {
    let tokens: Vec<String> = RangeToken::vocabulary(radius).iter().map(RangeToken::text).collect();
    Vocabulary::fixed(&tokens)
}

/// Counts come from `train` only; reserved tokens are exempt from `min_count`.
pub fn build_vocab(train: &[ExampleRecord], min_count: u64, radius: u32) -> Result<Vocabs, DatasetError> {
    if train.is_empty() {
        return Err(DatasetError::EmptyTrain);
    }
    let mut input_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut sketch_counts: BTreeMap<String, u64> = BTreeMap::new();
    for ex in train {
        for tok in ex.window.cells.iter().flatten().flatten() {
            *input_counts.entry(tok.clone()).or_default() += 1;
        }
        let ir = ex.gold_ir().map_err(|e| DatasetError::BadRecord {
            path: ex.file.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        for tok in ir.sketch_tokens() {
            *sketch_counts.entry(tok).or_default() += 1;
        }
    }
    *input_counts.entry(SEP.to_string()).or_default() += 0;
    Ok(Vocabs {
        input: Vocabulary::build(&INPUT_RESERVED, Some(UNK), &input_counts, min_count),
        sketch: Vocabulary::build(&SKETCH_RESERVED, Some(UNK), &sketch_counts, min_count),
        range: range_vocabulary(radius),
    })
}

/// True when every gold sketch token is in the sketch vocabulary.
pub fn gold_in_vocab(ex: &ExampleRecord, vocabs: &Vocabs) -> bool {
    ex.gold_ir().is_ok_and(|ir| ir.sketch_tokens().iter().all(|t| vocabs.sketch.get(t).is_some()))
}

pub fn write_records(path: &Path, records: &[ExampleRecord]) -> Result<(), DatasetError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(f);
    for r in records {
        serde_json::to_writer(&mut w, r).expect("records serialize");
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_records(path: &Path) -> Result<Vec<ExampleRecord>, DatasetError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| DatasetError::BadRecord {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub const VOCAB_FILES: [&str; 3] = ["input.vocab", "sketch.vocab", "range.vocab"];

pub fn write_vocabs(dir: &Path, v: &Vocabs) -> Result<(), DatasetError> {
    for (name, vocab) in VOCAB_FILES.iter().zip([&v.input, &v.sketch, &v.range]) {
        let path = dir.join(name);
        fs::write(&path, vocab.to_tsv()).map_err(io_err(&path))?;
    }
    Ok(())
}

pub fn read_vocabs(dir: &Path) -> Result<Vocabs, DatasetError> {
    let read = |name: &str, reserved: usize, unk: Option<&str>| -> Result<Vocabulary, DatasetError> {
        let path = dir.join(name);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Vocabulary::from_tsv(&text, reserved, unk).map_err(|e| DatasetError::BadRecord {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    };
    let range = read(VOCAB_FILES[2], 0, None)?;
    let range_len = range.len();
    Ok(Vocabs {
        input: read(VOCAB_FILES[0], INPUT_RESERVED.len(), Some(UNK))?,
        sketch: read(VOCAB_FILES[1], SKETCH_RESERVED.len(), Some(UNK))?,
        range: Vocabulary::from_tsv(&range.to_tsv(), range_len, None).expect("re-read"),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub radius: u32,
    pub min_count: u64,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self { radius: crate::formula::DEFAULT_RADIUS, min_count: 10, ratios: [0.8, 0.1, 0.1], seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub files: Vec<String>,
    pub mining: MiningStats,
    /// Dropped because the gold sketch uses a token outside the sketch vocabulary.
    pub unk_dropped: u64,
    pub examples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub options: PreprocessOptions,
    pub train: SplitReport,
    pub valid: SplitReport,
    pub test: SplitReport,
    pub vocab_sizes: BTreeMap<String, usize>,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

pub fn split_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

/// Full preprocessing: split files, mine each split, build vocabularies from train,
/// drop out-of-vocabulary golds, and write everything under `out`.
pub fn preprocess(corpus: &Path, out: &Path, opts: &PreprocessOptions) -> Result<PreprocessReport, DatasetError> {
    let files = list_grid_files(corpus)?;
    let split = split_corpus(&files, opts.ratios, opts.seed)?;
    let (train, train_stats) = mine_files(&split.train, opts.radius);
    let vocabs = build_vocab(&train, opts.min_count, opts.radius)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_vocabs(out, &vocabs)?;

    let mut reports = Vec::new();
    let mined = [(train, train_stats), mine_files(&split.valid, opts.radius), mine_files(&split.test, opts.radius)];
    for ((name, (records, stats)), paths) in SPLIT_NAMES.iter().zip(mined).zip([&split.train, &split.valid, &split.test]) {
        let before = records.len();
        let kept: Vec<ExampleRecord> = records.into_iter().filter(|r| gold_in_vocab(r, &vocabs)).collect();
        write_records(&split_path(out, name), &kept)?;
        reports.push(SplitReport {
            files: paths.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect(),
            mining: stats,
            unk_dropped: (before - kept.len()) as u64,
            examples: kept.len(),
        });
    }
    let [train, valid, test]: [SplitReport; 3] = reports.try_into().expect("three splits");
    let report = PreprocessReport {
        options: opts.clone(),
        train,
        valid,
        test,
        vocab_sizes: BTreeMap::from([
            ("input".to_string(), vocabs.input.len()),
            ("sketch".to_string(), vocabs.sketch.len()),
            ("range".to_string(), vocabs.range.len()),
        ]),
    };
    let stats_path = out.join("stats.json");
    fs::write(&stats_path, serde_json::to_string_pretty(&report).expect("serializes") + "\n").map_err(io_err(&stats_path))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{CellValue, Sheet};

    fn formula_sheet(formulas: &[(u32, u32, &str)]) -> Sheet {
        let mut s = Sheet::new("s");
        for r in 1..=30 {
            s.set(CellAddr::new(r, 1), CellValue::number(r.to_string()));
        }
        for (r, c, f) in formulas {
            s.set(CellAddr::new(*r, *c), CellValue::formula(*f, "0").unwrap());
        }
        s
    }

    #[test]
    fn dragged_formula_is_capped() {
        let mut s = Sheet::new("s");
        for r in 1..=200 {
            s.set(CellAddr::new(r, 1), CellValue::number("1"));
            s.set(CellAddr::new(r, 2), CellValue::formula(format!("=A{r}*2"), "2").unwrap());
        }
        let (records, stats) = mine_sheets("f", &[s], 10);
        assert_eq!(records.len(), MAX_DUPLICATES);
        assert_eq!(stats.dedup_dropped, 190);
        assert!(stats.reconciles());
        // The first ten in row order.
        let rows: Vec<u32> = records.iter().map(|r| r.target_addr().unwrap().row).collect();
        assert_eq!(rows, (1..=10).collect::<Vec<_>>());
    }

    #[test]
    fn no_formulas_no_records() {
        let (records, stats) = mine_sheets("f", &[formula_sheet(&[])], 10);
        assert!(records.is_empty());
        assert_eq!(stats.total_formulas, 0);
    }

    #[test]
    fn reasons_are_counted() {
        let s = formula_sheet(&[
            (2, 2, "=HYPERLINK(\"http://a\",\"b\")"),
            (3, 2, "=Other!A1"),
            (30, 2, "=SUM(A1:A5)"),
            (4, 2, "=$A$1"),
            (5, 2, "=FOO(A1)"),
            (6, 2, "=SUM(A1"),
            (7, 2, "=A7+1"),
        ]);
        let (records, stats) = mine_sheets("f", &[s], 10);
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].gold, "+ RANGE 1 $ENDSKETCH$ $R$ R[0] C[-1] $ENDR$ EOF");
        for key in ["HyperlinkLiteralUrl", "CrossSheetRef", "OutOfWindow", "AbsoluteRef", "UnsupportedToken", PARSE_ERROR] {
            assert_eq!(stats.filtered.get(key), Some(&1), "{key}");
        }
        assert!(stats.reconciles());
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let files: Vec<u32> = (0..10).collect();
        let a = split_corpus(&files, [0.8, 0.1, 0.1], 7).unwrap();
        let b = split_corpus(&files, [0.8, 0.1, 0.1], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.valid.len(), a.test.len()), (8, 1, 1));
        let mut all: Vec<u32> = a.train.iter().chain(&a.valid).chain(&a.test).copied().collect();
        all.sort();
        assert_eq!(all, files);
        assert!(split_corpus(&files[..2], [0.8, 0.1, 0.1], 7).is_err());
        assert!(split_corpus(&files, [0.8, 0.1, 0.2], 7).is_err());
    }

    #[test]
    fn vocab_from_train_only() {
        let mut s = Sheet::new("s");
        for r in 1..=12 {
            s.set(CellAddr::new(r, 1), CellValue::number("5"));
            // 9 occurrences of the string literal, 12 of SUM.
            let f = if r <= 9 { format!("=SUM(A{r})&\"x\"") } else { format!("=SUM(A{r})") };
            s.set(CellAddr::new(r, 2), CellValue::formula(f, "0").unwrap());
        }
        let (records, _) = mine_sheets("f", &[s], 10);
        let v = build_vocab(&records, 10, 10).unwrap();
        assert!(v.sketch.get("SUM").is_some());
        assert!(v.sketch.get("\"x\"").is_none());
        assert_eq!(v.sketch.id_or_unk("\"x\""), v.sketch.get(UNK));
        assert_eq!(v.range.len(), 46);
        assert!(!gold_in_vocab(&records[0], &v));
        assert!(gold_in_vocab(&records[11], &v));
        assert!(build_vocab(&[], 1, 10).is_err());
    }
}
