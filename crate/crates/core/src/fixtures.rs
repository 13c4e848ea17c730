//! Small reference containers used by tests, benches and the examples in the
//! README.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::container::{Container, Dimension, Scalar};
use crate::ops::{Builtin, OperationSignature, ParamValue};

/// The 4x3 people table (`Name`, `Age`, `Children`) with a missing name in
/// row `2` and a missing child count in row `3`. Rows `0` and `1` survive
/// null removal and both have `Age > 30`.
pub fn d0() -> Container {
    Container::new(
        "D0",
        vec![
            Dimension::positional("rows", 4),
            Dimension::new("cols", ["Name", "Age", "Children"]).unwrap(),
        ],
        vec![
            Scalar::str("Alice"),
            Scalar::Int(35),
            Scalar::Int(2),
            Scalar::str("Bob"),
            Scalar::Int(41),
            Scalar::Int(1),
            Scalar::Null,
            Scalar::Int(28),
            Scalar::Int(3),
            Scalar::str("Dana"),
            Scalar::Int(30),
            Scalar::Null,
        ],
    )
    .expect("fixture is well formed")
}

/// A rows x cols integer grid with positional row labels and `c0..` columns.
pub fn int_grid(id: &str, rows: usize, cols: usize, values: &[i64]) -> Container {
    Container::new(
        id,
        vec![
            Dimension::positional("rows", rows),
            Dimension::new("cols", (0..cols).map(|c| format!("c{c}"))).unwrap(),
        ],
        values.iter().copied().map(Scalar::Int).collect(),
    )
    .expect("grid shape matches values")
}

/// The three steps of the people pipeline: drop incomplete rows, keep
/// `Age > 30`, scale `Age` to [0, 1].
pub fn people_pipeline() -> [OperationSignature; 3] {
    [
        OperationSignature::new("pandas", "dropna"),
        OperationSignature::new("duckdb", "filter_rows")
            .param("column", "Age")
            .param("cmp", ">")
            .param("value", 30),
        OperationSignature::new("sklearn", "minmax_scale").param("columns", ["Age"]),
    ]
}

#[derive(Clone, Copy)]
enum ColumnType {
    Int,
    Float,
    Str,
    Bool,
}

fn random_value<R: Rng>(rng: &mut R, ty: ColumnType) -> Scalar {
    if rng.gen_bool(0.2) {
        return Scalar::Null;
    }
    match ty {
        ColumnType::Int => Scalar::Int(rng.gen_range(-4..=4)),
        ColumnType::Float => Scalar::Float(f64::from(rng.gen_range(-8i32..=8)) * 0.5),
        ColumnType::Str => Scalar::str(["a", "b", "c", "d", "e"][rng.gen_range(0..5)]),
        ColumnType::Bool => Scalar::Bool(rng.gen()),
    }
}

/// A random table of at most `max_rows` x `max_cols` whose columns each hold
/// one value type (plus nulls). Strings are short and non-empty.
pub fn random_table<R: Rng>(rng: &mut R, max_rows: usize, max_cols: usize) -> Container {
    let rows = rng.gen_range(1..=max_rows);
    let cols = rng.gen_range(1..=max_cols);
    let types: Vec<ColumnType> = (0..cols)
        .map(|_| [ColumnType::Int, ColumnType::Int, ColumnType::Float, ColumnType::Str, ColumnType::Bool][rng.gen_range(0..5)])
        .collect();
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        for &ty in &types {
            values.push(random_value(rng, ty));
        }
    }
    Container::new(
        "R",
        vec![
            Dimension::positional("rows", rows),
            Dimension::new("cols", (0..cols).map(|c| format!("c{c}"))).unwrap(),
        ],
        values,
    )
    .expect("random table is well formed")
}

/// A random builtin signature of the given kind (index into
/// [`Builtin::NAMES`]) with parameters that make sense for `table`.
pub fn random_builtin<R: Rng>(rng: &mut R, kind: usize, table: &Container) -> OperationSignature {
    let cols: Vec<&str> = table.dim(1).labels().collect();
    let pick = |rng: &mut R| cols[rng.gen_range(0..cols.len())].to_string();
    let op = OperationSignature::new("builtin", Builtin::NAMES[kind]);
    match kind {
        0 => op,
        1 => {
            let column = pick(rng);
            let pos = table.dim(1).position(&column).unwrap();
            let peer = (0..table.dim(0).len())
                .map(|r| table.get_at(&[r, pos]).clone())
                .find(|v| !v.is_null());
            let value = match peer {
                Some(v) if rng.gen_bool(0.8) => random_like(rng, &v),
                _ => Scalar::Int(rng.gen_range(-3..=3)),
            };
            op.param("column", column.as_str())
                .param("cmp", ["<", ">", "=", "!="][rng.gen_range(0..4)])
                .param("value", value)
        }
        2 => {
            let numeric: Vec<Scalar> = (0..cols.len())
                .filter(|&c| (0..table.dim(0).len()).all(|r| {
                    let v = table.get_at(&[r, c]);
                    v.is_null() || v.is_numeric()
                }))
                .filter(|_| rng.gen_bool(0.7))
                .map(|c| Scalar::str(cols[c]))
                .collect();
            op.param("columns", ParamValue::List(numeric))
        }
        3 => {
            let k = if rng.gen_bool(0.7) {
                Scalar::Int(rng.gen_range(-2..=2))
            } else {
                Scalar::Float(0.5)
            };
            op.param("k", k)
        }
        4 => op.param("column", pick(rng).as_str()).param("ascending", rng.gen_bool(0.5)),
        _ => {
            let mut chosen: Vec<Scalar> = cols.iter().filter(|_| rng.gen_bool(0.6)).map(|c| Scalar::str(*c)).collect();
            if chosen.is_empty() {
                chosen.push(Scalar::str(cols[0]));
            }
            chosen.shuffle(rng);
            op.param("columns", ParamValue::List(chosen))
        }
    }
}

fn random_like<R: Rng>(rng: &mut R, v: &Scalar) -> Scalar {
    match v {
        Scalar::Int(_) => Scalar::Int(rng.gen_range(-4..=4)),
        Scalar::Float(_) => Scalar::Float(f64::from(rng.gen_range(-8i32..=8)) * 0.5),
        Scalar::Str(_) => Scalar::str(["a", "b", "c", "d", "e"][rng.gen_range(0..5)]),
        Scalar::Bool(_) => Scalar::Bool(rng.gen()),
        Scalar::Null => Scalar::Null,
    }
}
