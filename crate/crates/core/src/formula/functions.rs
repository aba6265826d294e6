//! The closed function vocabulary.

/// Arity constraints of a supported function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FunctionSpec {
    pub name: &'static str,
    pub min_args: usize,
    /// `None` for variadic functions.
    pub max_args: Option<usize>,
    /// Argument count written without an explicit `:n` suffix in sketch tokens.
    pub default_args: usize,
}

const fn f(name: &'static str, min_args: usize, max_args: Option<usize>, default_args: usize) -> FunctionSpec {
    FunctionSpec { name, min_args, max_args, default_args }
}

const VARIADIC: Option<usize> = None;

/// Sorted by name.
pub static FUNCTIONS: &[FunctionSpec] = &[
    f("ABS", 1, Some(1), 1),
    f("AND", 1, VARIADIC, 2),
    f("AVERAGE", 1, VARIADIC, 1),
    f("AVERAGEA", 1, VARIADIC, 1),
    f("CONCATENATE", 1, VARIADIC, 2),
    f("COS", 1, Some(1), 1),
    f("COUNT", 1, VARIADIC, 1),
    f("COUNTA", 1, VARIADIC, 1),
    f("COUNTIF", 2, Some(2), 2),
    f("DAY", 1, Some(1), 1),
    f("IF", 2, Some(3), 3),
    f("IFERROR", 1, Some(2), 2),
    f("INT", 1, Some(1), 1),
    f("LEFT", 1, Some(2), 2),
    f("LEN", 1, Some(1), 1),
    f("LN", 1, Some(1), 1),
    f("LOWER", 1, Some(1), 1),
    f("MAX", 1, VARIADIC, 1),
    f("MEDIAN", 1, VARIADIC, 1),
    f("MID", 3, Some(3), 3),
    f("MIN", 1, VARIADIC, 1),
    f("MOD", 2, Some(2), 2),
    f("MONTH", 1, Some(1), 1),
    f("NOT", 1, Some(1), 1),
    f("OR", 1, VARIADIC, 2),
    f("POWER", 2, Some(2), 2),
    f("PRODUCT", 1, VARIADIC, 1),
    f("RIGHT", 1, Some(2), 2),
    f("ROUND", 1, Some(2), 2),
    f("ROUNDDOWN", 1, Some(2), 2),
    f("ROUNDUP", 1, Some(2), 2),
    f("SIN", 1, Some(1), 1),
    f("SINH", 1, Some(1), 1),
    f("SQRT", 1, Some(1), 1),
    f("STDEV", 1, VARIADIC, 1),
    f("SUM", 1, VARIADIC, 1),
    f("SUMIF", 2, Some(3), 2),
    f("TODAY", 0, Some(0), 0),
    f("TRIM", 1, Some(1), 1),
    f("UPPER", 1, Some(1), 1),
    f("VLOOKUP", 3, Some(4), 3),
    f("WEEKDAY", 1, Some(2), 1),
    f("WEEKNUM", 1, Some(2), 1),
    f("YEAR", 1, Some(1), 1),
];

pub fn lookup(name: &str) -> Option<&'static FunctionSpec> {
    FUNCTIONS.binary_search_by(|f| f.name.cmp(name)).ok().map(|i| &FUNCTIONS[i])
}

impl FunctionSpec {
    pub fn accepts(&self, argc: usize) -> bool {
        argc >= self.min_args && self.max_args.is_none_or(|m| argc <= m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_sorted_and_consistent() {
        assert!(FUNCTIONS.windows(2).all(|w| w[0].name < w[1].name));
        for f in FUNCTIONS {
            assert!(f.accepts(f.default_args), "{}", f.name);
        }
    }

    #[test]
    fn lookup_known_and_unknown() {
        assert_eq!(lookup("SUM").unwrap().default_args, 1);
        assert!(lookup("HYPERLINK").is_none());
        assert!(lookup("sum").is_none());
    }
}
