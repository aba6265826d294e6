use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sheetcoder_core::a1::{col_to_letters, parse_a1, render_a1, A1Ref, CellAddr};
use sheetcoder_core::context::{assemble_col_seq, assemble_row_seq, build_bundles, extract_window, tiling, BundleLayout, RowSel, PAD};
use sheetcoder_core::dataset::{build_vocab, mine_sheets, MAX_DUPLICATES};
use sheetcoder_core::formula::random::FormulaGen;
use sheetcoder_core::formula::{classify_formula, parse_formula, render_formula, to_ir, Eligibility, FormulaIR, RelRange};
use sheetcoder_core::grid::{parse_grid, render_grid, CellValue, Sheet};
use sheetcoder_core::metrics::{match_formula, match_ranges, match_sketch};

fn addr() -> impl Strategy<Value = CellAddr> {
    // Columns up to ZZ.
    (1u32..=5000, 1u32..=702).prop_map(|(r, c)| CellAddr::new(r, c))
}

fn cell() -> impl Strategy<Value = CellValue> {
    prop_oneof![
        (0i64..100_000).prop_map(|n| CellValue::number(n.to_string())),
        "[a-zA-Z \"'/,]{0,12}".prop_map(CellValue::text),
        (1u32..30, 1u32..5).prop_map(|(r, c)| CellValue::formula(format!("=SUM({}{r}:{}{})", col_to_letters(c), col_to_letters(c), r + 3), "6").unwrap()),
        Just(CellValue::formula("=A1&\"x,\"\"y\"", "x").unwrap()),
    ]
}

fn sheet() -> impl Strategy<Value = Sheet> {
    (0u32..2, proptest::collection::vec(((1u32..25, 1u32..12), cell()), 0..60)).prop_map(|(frozen, cells)| {
        let mut s = Sheet::new("S 1");
        s.set_frozen_rows(frozen);
        for ((r, c), v) in cells {
            s.set(CellAddr::new(r, c), v);
        }
        s
    })
}

fn generated(seed: u64, radius: u32) -> (CellAddr, sheetcoder_core::formula::FormulaAst) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = CellAddr::new(1 + (seed % 30) as u32, 1 + (seed % 17) as u32);
    (target, FormulaGen { target, radius, max_depth: 5 }.generate(&mut rng))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn a1_range_round_trip(a in addr(), b in addr()) {
        let text = format!("{a}:{b}");
        let parsed = parse_a1(&text).unwrap();
        let A1Ref::Range(s, e) = parsed else { panic!("not a range") };
        prop_assert!(s.row <= e.row && s.col <= e.col);
        let canonical = render_a1(&parsed).unwrap();
        prop_assert_eq!(parse_a1(&canonical).unwrap(), parsed);
        if s == a && e == b {
            prop_assert_eq!(canonical, text);
        }
    }

    #[test]
    fn grid_round_trip(s in sheet()) {
        let text = render_grid(std::slice::from_ref(&s));
        let back = parse_grid(&text).unwrap();
        prop_assert_eq!(&back[0], &s);
        prop_assert_eq!(render_grid(&back), text);
    }

    #[test]
    fn cell_at_is_total(s in sheet(), r in 0u32..10_000, c in 0u32..10_000) {
        let v = s.cell_at(CellAddr::new(r, c));
        if !s.cells().any(|(a, _)| a == CellAddr::new(r, c)) {
            prop_assert!(v.is_empty());
        }
    }

    #[test]
    fn ir_round_trip_and_offset_bound(seed in any::<u64>(), radius in 1u32..=10) {
        let (target, ast) = generated(seed, radius);
        prop_assert_eq!(classify_formula(&ast, target, radius), Eligibility::Eligible);
        let parsed = parse_formula(&format!("={ast}")).unwrap();
        let ir = to_ir(&parsed, target, radius).unwrap();
        prop_assert!(ir.ranges().iter().all(|r| r.max_abs_offset() <= radius as i32));
        let back = parse_formula(&render_formula(&ir, target).unwrap()).unwrap();
        prop_assert_eq!(back, parsed);
        prop_assert_eq!(FormulaIR::parse_stream(&ir.to_string()).unwrap(), ir);
    }

    #[test]
    fn range_arity_is_enforced_under_mutation(seed in any::<u64>(), extra in 1usize..3) {
        let (target, ast) = generated(seed, 10);
        let ir = to_ir(&ast, target, 10).unwrap();
        let mut more = ir.ranges().to_vec();
        more.extend(std::iter::repeat_n(RelRange::cell(0, -1), extra));
        prop_assert!(FormulaIR::new(ir.sketch().to_vec(), more).is_err());
        if !ir.ranges().is_empty() {
            let fewer = ir.ranges()[1..].to_vec();
            prop_assert!(FormulaIR::new(ir.sketch().to_vec(), fewer).is_err());
        }
    }

    #[test]
    fn full_match_implies_parts(a in any::<u64>(), b in any::<u64>(), same in any::<bool>()) {
        let (ta, fa) = generated(a, 10);
        let gold = to_ir(&fa, ta, 10).unwrap();
        let pred = if same { gold.clone() } else { let (tb, fb) = generated(b, 10); to_ir(&fb, tb, 10).unwrap() };
        if match_formula(&pred, &gold) {
            prop_assert!(match_sketch(&pred, &gold) && match_ranges(&pred, &gold));
        }
    }

    #[test]
    fn windows_and_sequences(s in sheet(), r in 1u32..25, c in 1u32..12, radius in 1u32..=4, len in 4usize..20) {
        let target = CellAddr::new(r, c);
        let w = extract_window(&s, target, radius);
        prop_assert!(w.data(0, 0).is_empty());
        prop_assert_eq!(w.has_header(), s.frozen_rows() >= 1 && (0..w.width()).any(|i| w.valid[0][i]));
        prop_assert_eq!(&extract_window(&s, target, radius), &w);
        let d = radius as i32;
        let mut seqs = vec![assemble_row_seq(&w, RowSel::Header, len)];
        for off in -d..=d {
            seqs.push(assemble_row_seq(&w, RowSel::Data(off), len));
            seqs.push(assemble_col_seq(&w, off, len));
        }
        for seq in &seqs {
            prop_assert_eq!(seq.tokens.len(), len);
            prop_assert_eq!(seq.mask.len(), len);
            for (t, m) in seq.tokens.iter().zip(&seq.mask) {
                prop_assert_eq!(t == PAD, !m);
            }
            // Padding only at the end.
            let valid = seq.mask.iter().filter(|m| **m).count();
            prop_assert!(seq.mask[..valid].iter().all(|m| *m));
        }
        let per_bundle = if (2 * radius + 1) % 3 == 0 { 3 } else { 1 };
        let layout = BundleLayout { radius, per_bundle, seq_len: len };
        prop_assert_eq!(build_bundles(&w, layout).unwrap(), build_bundles(&w, layout).unwrap());
    }

    #[test]
    fn odd_divisors_tile_exactly(radius in 0u32..40, n in 1u32..20) {
        let rows = 2 * radius + 1;
        match tiling(radius, n) {
            Ok(t) => {
                prop_assert!(n % 2 == 1 && rows % n == 0);
                let mut all: Vec<i32> = t.iter().flat_map(|(_, m)| m.clone()).collect();
                all.sort();
                prop_assert_eq!(all, (-(radius as i32)..=radius as i32).collect::<Vec<_>>());
            }
            Err(_) => prop_assert!(n % 2 == 0 || rows % n != 0),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mined_records_respect_pipeline_invariants(seeds in proptest::collection::vec(any::<u64>(), 1..20), copies in 1u32..30) {
        let mut s = Sheet::new("m");
        for r in 1..=40 {
            s.set(CellAddr::new(r, 1), CellValue::number(r.to_string()));
        }
        // A dragged formula in column B plus assorted generated ones further right.
        for r in 2..2 + copies {
            s.set(CellAddr::new(r, 2), CellValue::formula(format!("=A{r}+1"), "0").unwrap());
        }
        for (i, seed) in seeds.iter().enumerate() {
            let target = CellAddr::new(15 + i as u32, 4 + (i as u32 % 5));
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let ast = FormulaGen { target, radius: 10, max_depth: 4 }.generate(&mut rng);
            s.set(target, CellValue::formula(format!("={ast}"), "0").unwrap());
        }
        let (records, stats) = mine_sheets("f.grid.json", std::slice::from_ref(&s), 10);
        prop_assert!(stats.reconciles());
        let mut per_key: HashMap<(String, String), usize> = HashMap::new();
        for r in &records {
            let target = r.target_addr().unwrap();
            let src = s.cell_at(target).formula_source().unwrap();
            prop_assert_eq!(classify_formula(&parse_formula(src).unwrap(), target, 10), Eligibility::Eligible);
            let ir = r.gold_ir().unwrap();
            prop_assert_eq!(ir.to_string(), r.gold.clone());
            *per_key.entry((col_to_letters(target.col), r.gold.clone())).or_default() += 1;
        }
        prop_assert!(per_key.values().all(|n| *n <= MAX_DUPLICATES));
        if !records.is_empty() {
            let a = build_vocab(&records, 1, 10).unwrap();
            let mut shuffled = records.clone();
            shuffled.reverse();
            prop_assert_eq!(a, build_vocab(&shuffled, 1, 10).unwrap());
        }
    }
}
