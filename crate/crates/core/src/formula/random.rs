//! Random eligible formulas, for property tests and round-trip checks.

use rand::seq::SliceRandom;
use rand::Rng;

use super::ast::{BinaryOp, FormulaAst, UnaryOp};
use super::functions::FUNCTIONS;
use crate::a1::{CellAddr, MarkedAddr};

/// Generates formulas whose references all lie within `radius` of `target`
/// and on the sheet, using only supported functions and operators.
pub struct FormulaGen {
    pub target: CellAddr,
    pub radius: u32,
    pub max_depth: usize,
}

impl FormulaGen {
    fn addr(&self, rng: &mut impl Rng) -> CellAddr {
        let d = self.radius as i32;
        loop {
            let dr = rng.gen_range(-d..=d);
            let dc = rng.gen_range(-d..=d);
            if let Some(a) = self.target.offset(dr, dc) {
                return a;
            }
        }
    }

    fn leaf(&self, rng: &mut impl Rng) -> FormulaAst {
        let rel = |addr| MarkedAddr { addr, abs_col: false, abs_row: false };
        match rng.gen_range(0..5) {
            0 => {
                let n = match rng.gen_range(0..4) {
                    0 => rng.gen_range(0..100).to_string(),
                    1 => format!("{}.{}", rng.gen_range(0..10), rng.gen_range(0..100)),
                    2 => format!("{}e{}", rng.gen_range(1..10), rng.gen_range(1..4)),
                    _ => "0".to_string(),
                };
                FormulaAst::Number(n)
            }
            1 => {
                let pool = ["A", "", "/", "total", "a b", "say \"hi\"", ", ", "N/A"];
                FormulaAst::Str(pool.choose(rng).expect("non-empty").to_string())
            }
            2 | 3 => FormulaAst::Cell(rel(self.addr(rng))),
            _ => FormulaAst::range(rel(self.addr(rng)), rel(self.addr(rng))),
        }
    }

    fn node(&self, depth: usize, rng: &mut impl Rng) -> FormulaAst {
        if depth + 1 >= self.max_depth || rng.gen_bool(0.3) {
            return self.leaf(rng);
        }
        match rng.gen_range(0..3) {
            0 => {
                let f = FUNCTIONS.choose(rng).expect("non-empty");
                let max = f.max_args.unwrap_or(f.min_args + 3);
                let argc = rng.gen_range(f.min_args..=max);
                FormulaAst::call(f.name, (0..argc).map(|_| self.node(depth + 1, rng)).collect())
            }
            1 => {
                let op = *BinaryOp::ALL.choose(rng).expect("non-empty");
                FormulaAst::binary(op, self.node(depth + 1, rng), self.node(depth + 1, rng))
            }
            _ => {
                let op = if rng.gen_bool(0.5) { UnaryOp::Minus } else { UnaryOp::Plus };
                FormulaAst::unary(op, self.node(depth + 1, rng))
            }
        }
    }

    pub fn generate(&self, rng: &mut impl Rng) -> FormulaAst {
        self.node(0, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::{classify_formula, Eligibility};
    use rand::SeedableRng;

    #[test]
    fn generated_formulas_are_eligible_and_bounded() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let g = FormulaGen { target: CellAddr::new(4, 3), radius: 10, max_depth: 5 };
        for _ in 0..500 {
            let f = g.generate(&mut rng);
            assert!(f.depth() <= 5);
            assert_eq!(classify_formula(&f, g.target, 10), Eligibility::Eligible, "{f}");
        }
    }
}
