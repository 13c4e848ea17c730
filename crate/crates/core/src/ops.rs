//! Operation identity and execution.
//!
//! Operations are named by an [`OperationSignature`] (namespace, name,
//! parameters). The engine ships a small builtin catalog over 2-D containers
//! (dimension 0 = rows, dimension 1 = columns) with analytic exact lineage,
//! and can run arbitrary external programs that exchange canonical container
//! files.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::container::{Container, ContainerError, ContainerSchema, Dimension, IndexTuple, Scalar};
use crate::oracle::{PerturbationDomain, StandardDomain};
use crate::lineage::{
    Completeness, InfluenceKind, KindCompleteness, LineageError, LineageRecord, LineageTable, Origin,
    OriginKind,
};

#[derive(Debug, Error)]
pub enum OpError {
    #[error("unknown operation {0}")]
    UnknownOperation(String),
    #[error("operation takes {expected} input(s), got {found}")]
    ArityMismatch { expected: usize, found: usize },
    #[error("bad parameter: {0}")]
    BadParam(String),
    #[error("execution failed: {0}")]
    ExecutionFailure(String),
    #[error("{0} is not a builtin operation")]
    NotBuiltin(String),
    #[error("output does not match re-execution of {0}")]
    OutputMismatch(String),
    #[error("external command timed out after {0:?}")]
    Timeout(Duration),
    #[error("external command exited with {code:?}: {stderr}")]
    NonZeroExit { code: Option<i32>, stderr: String },
    #[error("external command produced a malformed container: {0}")]
    MalformedOutput(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error(transparent)]
    Lineage(#[from] LineageError),
}

pub type Result<T, E = OpError> = std::result::Result<T, E>;

/// A parameter value: a scalar or a list of scalars (column lists).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    List(Vec<Scalar>),
    Scalar(Scalar),
}

impl ParamValue {
    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Scalar(Scalar::Str(s)) => Some(s),
            _ => None,
        }
    }

    /// String labels mentioned by this value.
    pub fn strings(&self) -> Vec<&str> {
        match self {
            ParamValue::Scalar(Scalar::Str(s)) => vec![s.as_str()],
            ParamValue::List(items) => items
                .iter()
                .filter_map(|s| match s {
                    Scalar::Str(s) => Some(s.as_str()),
                    _ => None,
                })
                .collect(),
            ParamValue::Scalar(_) => vec![],
        }
    }
}

impl From<Scalar> for ParamValue {
    fn from(s: Scalar) -> Self {
        ParamValue::Scalar(s)
    }
}

impl From<&str> for ParamValue {
    fn from(s: &str) -> Self {
        ParamValue::Scalar(Scalar::str(s))
    }
}

impl From<i64> for ParamValue {
    fn from(v: i64) -> Self {
        ParamValue::Scalar(Scalar::Int(v))
    }
}

impl From<bool> for ParamValue {
    fn from(v: bool) -> Self {
        ParamValue::Scalar(Scalar::Bool(v))
    }
}

impl<const N: usize> From<[&str; N]> for ParamValue {
    fn from(items: [&str; N]) -> Self {
        ParamValue::List(items.iter().map(|s| Scalar::str(*s)).collect())
    }
}

/// Library-agnostic identity of an operation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OperationSignature {
    pub namespace: String,
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, ParamValue>,
}

impl OperationSignature {
    pub fn new(namespace: impl Into<String>, name: impl Into<String>) -> OperationSignature {
        OperationSignature {
            namespace: namespace.into(),
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn param(mut self, key: impl Into<String>, value: impl Into<ParamValue>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }

    /// `namespace.name(k1=v1,k2=v2)` with keys sorted and values in JSON
    /// notation, e.g. `pandas.dropna()`.
    pub fn canonical_key(&self) -> String {
        let params: Vec<String> = self
            .params
            .iter()
            .map(|(k, v)| format!("{k}={}", serde_json::to_string(v).expect("params serialize")))
            .collect();
        format!("{}.{}({})", self.namespace, self.name, params.join(","))
    }

    /// Every string mentioned by any parameter.
    pub fn referenced_labels(&self) -> BTreeSet<&str> {
        self.params.values().flat_map(ParamValue::strings).collect()
    }
}

impl fmt::Display for OperationSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical_key())
    }
}

pub fn canonical_key(op: &OperationSignature) -> String {
    op.canonical_key()
}

/// An operation resolved against the concrete schemas it ran on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSignature {
    pub op: OperationSignature,
    pub inputs: Vec<ContainerSchema>,
    pub output: ContainerSchema,
}

impl NodeSignature {
    pub fn new(op: OperationSignature, inputs: &[Container], output: &Container) -> NodeSignature {
        NodeSignature {
            op,
            inputs: inputs.iter().map(Container::schema).collect(),
            output: output.schema(),
        }
    }

    /// Operation key plus a digest of the input and output schemas.
    pub fn key(&self) -> String {
        let schemas = serde_json::to_vec(&(&self.inputs, &self.output)).expect("schemas serialize");
        let digest = Sha256::digest(&schemas);
        let hex: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        format!("{}@{hex}", self.op.canonical_key())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cmp {
    Lt,
    Gt,
    Eq,
    Ne,
}

impl Cmp {
    pub fn parse(s: &str) -> Option<Cmp> {
        match s {
            "<" => Some(Cmp::Lt),
            ">" => Some(Cmp::Gt),
            "=" | "==" => Some(Cmp::Eq),
            "!=" | "≠" | "<>" => Some(Cmp::Ne),
            _ => None,
        }
    }

    /// Evaluates `cell cmp value`. Null or incomparable operands never
    /// satisfy a predicate.
    pub fn holds(self, cell: &Scalar, value: &Scalar) -> bool {
        use std::cmp::Ordering::*;
        match cell.partial_compare(value) {
            None => false,
            Some(o) => match self {
                Cmp::Lt => o == Less,
                Cmp::Gt => o == Greater,
                Cmp::Eq => o == Equal,
                Cmp::Ne => o != Equal,
            },
        }
    }
}

/// The builtin catalog with parameters resolved.
#[derive(Debug, Clone, PartialEq)]
pub enum Builtin {
    DropNullRows,
    FilterRows { column: String, cmp: Cmp, value: Scalar },
    MinMaxScaleColumns { columns: Vec<String> },
    MapAddConstant { k: Scalar },
    SortByColumn { column: String, ascending: bool },
    ProjectColumns { columns: Vec<String> },
}

fn str_param(op: &OperationSignature, key: &str) -> Result<String> {
    op.params
        .get(key)
        .and_then(ParamValue::as_str)
        .map(str::to_string)
        .ok_or_else(|| OpError::BadParam(format!("{} needs string parameter {key:?}", op.name)))
}

fn list_param(op: &OperationSignature, key: &str) -> Result<Vec<String>> {
    match op.params.get(key) {
        Some(ParamValue::Scalar(Scalar::Str(s))) => Ok(vec![s.clone()]),
        Some(ParamValue::List(items)) => items
            .iter()
            .map(|s| match s {
                Scalar::Str(s) => Ok(s.clone()),
                other => Err(OpError::BadParam(format!("{key} entries must be strings, got {other}"))),
            })
            .collect(),
        _ => Err(OpError::BadParam(format!("{} needs list parameter {key:?}", op.name))),
    }
}

fn scalar_param<'a>(op: &'a OperationSignature, key: &str) -> Result<&'a Scalar> {
    match op.params.get(key) {
        Some(ParamValue::Scalar(s)) => Ok(s),
        _ => Err(OpError::BadParam(format!("{} needs scalar parameter {key:?}", op.name))),
    }
}

impl Builtin {
    pub const NAMES: [&'static str; 6] = [
        "drop_null_rows",
        "filter_rows",
        "minmax_scale_columns",
        "map_add_constant",
        "sort_by_column",
        "project_columns",
    ];

    /// Resolves a signature by its name (the namespace only records the
    /// library the operation mirrors). Short aliases such as `dropna` are
    /// accepted.
    pub fn from_signature(op: &OperationSignature) -> Result<Builtin> {
        let builtin = match op.name.as_str() {
            "drop_null_rows" | "dropna" => Builtin::DropNullRows,
            "filter_rows" | "filter" | "select" => {
                let cmp_text = str_param(op, "cmp")?;
                Builtin::FilterRows {
                    column: str_param(op, "column")?,
                    cmp: Cmp::parse(&cmp_text)
                        .ok_or_else(|| OpError::BadParam(format!("unknown comparison {cmp_text:?}")))?,
                    value: scalar_param(op, "value")?.clone(),
                }
            }
            "minmax_scale_columns" | "minmax_scale" => Builtin::MinMaxScaleColumns {
                columns: list_param(op, "columns")?,
            },
            "map_add_constant" | "add_constant" => {
                let k = scalar_param(op, "k")?.clone();
                if !k.is_numeric() {
                    return Err(OpError::BadParam(format!("k must be numeric, got {k}")));
                }
                Builtin::MapAddConstant { k }
            }
            "sort_by_column" | "sort_values" => Builtin::SortByColumn {
                column: str_param(op, "column")?,
                ascending: match op.params.get("ascending") {
                    None => true,
                    Some(ParamValue::Scalar(Scalar::Bool(b))) => *b,
                    Some(other) => {
                        return Err(OpError::BadParam(format!("ascending must be a bool, got {other:?}")))
                    }
                },
            },
            "project_columns" | "project" => Builtin::ProjectColumns {
                columns: list_param(op, "columns")?,
            },
            _ => return Err(OpError::UnknownOperation(op.canonical_key())),
        };
        Ok(builtin)
    }

    pub fn is_builtin(op: &OperationSignature) -> bool {
        !matches!(Builtin::from_signature(op), Err(OpError::UnknownOperation(_)))
    }

    pub fn execute(&self, input: &Container) -> Result<Container> {
        let t = Table2::new(input)?;
        match self {
            Builtin::DropNullRows => {
                let rows: Vec<usize> = (0..t.rows())
                    .filter(|&r| (0..t.cols()).all(|c| !t.at(r, c).is_null()))
                    .collect();
                Ok(t.select_rows(&rows))
            }
            Builtin::FilterRows { column, cmp, value } => {
                let col = t.col(column)?;
                let rows: Vec<usize> = (0..t.rows())
                    .filter(|&r| cmp.holds(t.at(r, col), value))
                    .collect();
                Ok(t.select_rows(&rows))
            }
            Builtin::MinMaxScaleColumns { columns } => {
                let mut cells = input.values().to_vec();
                for name in dedup(columns) {
                    let col = t.col(name)?;
                    let scaled = scale_column(&t.column(col)).map_err(|v| {
                        OpError::ExecutionFailure(format!("cannot scale non-numeric value {v} in column {name:?}"))
                    })?;
                    for (r, v) in scaled.into_iter().enumerate() {
                        cells[r * t.cols() + col] = v;
                    }
                }
                Ok(Container::new(input.id(), input.dims().to_vec(), cells)?)
            }
            Builtin::MapAddConstant { k } => {
                let cells = input
                    .values()
                    .iter()
                    .map(|v| add_scalar(v, k))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Container::new(input.id(), input.dims().to_vec(), cells)?)
            }
            Builtin::SortByColumn { column, ascending } => {
                let col = t.col(column)?;
                let mut rows: Vec<usize> = (0..t.rows()).collect();
                rows.sort_by(|&a, &b| {
                    let (x, y) = (t.at(a, col), t.at(b, col));
                    match (x.is_null(), y.is_null()) {
                        (true, true) => std::cmp::Ordering::Equal,
                        (true, false) => std::cmp::Ordering::Greater,
                        (false, true) => std::cmp::Ordering::Less,
                        _ if *ascending => x.sort_cmp(y),
                        _ => y.sort_cmp(x),
                    }
                });
                Ok(t.select_rows(&rows))
            }
            Builtin::ProjectColumns { columns } => {
                let mut seen = BTreeSet::new();
                let mut cols = Vec::with_capacity(columns.len());
                for name in columns {
                    if !seen.insert(name) {
                        return Err(OpError::ExecutionFailure(format!("column {name:?} listed twice")));
                    }
                    cols.push(t.col(name)?);
                }
                Ok(t.select_cols(&cols)?)
            }
        }
    }

    /// Analytic lineage of one execution. The table is exact with respect to
    /// the influence definitions; value-dependent cases (equality filters,
    /// interior values of scaled columns) are resolved from the input.
    pub fn capture_exact_lineage(&self, input: &Container, output: &Container) -> Result<LineageTable> {
        let expected = self.execute(input)?;
        if expected != *output {
            return Err(OpError::OutputMismatch(format!("{self:?}")));
        }
        let t = Table2::new(input)?;
        let mut records = Vec::new();
        let mut push = |out: &IndexTuple, r: usize, c: usize, kind: InfluenceKind| {
            records.push(LineageRecord::new(out.clone(), 0, t.index(r, c), kind));
        };
        let scaled: BTreeSet<usize> = match self {
            Builtin::MinMaxScaleColumns { columns } => {
                columns.iter().map(|c| t.col(c)).collect::<Result<_>>()?
            }
            _ => BTreeSet::new(),
        };
        let replays: BTreeMap<usize, Vec<(Vec<usize>, Vec<usize>)>> = scaled
            .iter()
            .map(|&c| (c, replay_scaling(&t, c)))
            .collect();
        let filter_col = match self {
            Builtin::FilterRows { column, .. } => Some(t.col(column)?),
            _ => None,
        };
        for out in output.indices() {
            let r = t.row_of(out.get(0).expect("2-D"))?;
            let c = t.col(out.get(1).expect("2-D"))?;
            match self {
                Builtin::DropNullRows => {
                    push(&out, r, c, InfluenceKind::Direct);
                    for c2 in 0..t.cols() {
                        push(&out, r, c2, InfluenceKind::Indirect);
                    }
                }
                Builtin::FilterRows { cmp, value, .. } => {
                    let pc = filter_col.expect("filter column resolved");
                    push(&out, r, c, InfluenceKind::Direct);
                    push(&out, r, c, InfluenceKind::Indirect);
                    push(&out, r, pc, InfluenceKind::Indirect);
                    if predicate_cell_is_direct(*cmp, t.at(r, pc), value) {
                        push(&out, r, pc, InfluenceKind::Direct);
                    }
                }
                Builtin::MinMaxScaleColumns { .. } if scaled.contains(&c) => {
                    let (direct, indirect) = &replays[&c][r];
                    for &r2 in direct {
                        push(&out, r2, c, InfluenceKind::Direct);
                    }
                    for &r2 in indirect {
                        push(&out, r2, c, InfluenceKind::Indirect);
                    }
                }
                _ => {
                    push(&out, r, c, InfluenceKind::Direct);
                    push(&out, r, c, InfluenceKind::Indirect);
                }
            }
        }
        Ok(LineageTable::build(
            records,
            KindCompleteness::both(Completeness::Exact),
            Origin::now(OriginKind::CapturedExact),
            output.schema(),
            vec![input.schema()],
        )?)
    }
}

/// True when no value other than `v` (of `v`'s type) satisfies the filter,
/// so every change to the predicate cell removes its row.
pub fn predicate_cell_is_direct(cmp: Cmp, v: &Scalar, value: &Scalar) -> bool {
    match v {
        Scalar::Null => false,
        Scalar::Bool(b) => !cmp.holds(&Scalar::Bool(!b), value),
        Scalar::Int(_) | Scalar::Float(_) => cmp == Cmp::Eq,
        Scalar::Str(s) => match cmp {
            Cmp::Eq => true,
            Cmp::Ne | Cmp::Gt => false,
            Cmp::Lt if !s.is_empty() => false,
            Cmp::Lt => !cmp.holds(&Scalar::str("\u{0}"), value),
        },
    }
}

/// Min-max scaling of one column; nulls stay null, a constant column maps to
/// zero. Fails with the offending value on non-numeric input.
fn scale_column(values: &[&Scalar]) -> std::result::Result<Vec<Scalar>, Scalar> {
    let mut span: Option<(f64, f64)> = None;
    for v in values {
        if v.is_null() {
            continue;
        }
        let x = v.as_f64().ok_or_else(|| (*v).clone())?;
        span = Some(span.map_or((x, x), |(lo, hi)| (lo.min(x), hi.max(x))));
    }
    Ok(values
        .iter()
        .map(|v| match (v.as_f64(), span) {
            (Some(x), Some((lo, hi))) if hi > lo => Scalar::Float((x - lo) / (hi - lo)),
            (Some(_), _) => Scalar::Float(0.0),
            (None, _) => Scalar::Null,
        })
        .collect())
}

/// Per row of scaled column `c`: the rows whose cells directly and
/// indirectly influence it. Scaled values depend on the whole column in a
/// value-dependent way, so every single-cell change the standard domain
/// admits is replayed through the closed-form scaling.
fn replay_scaling(t: &Table2<'_>, c: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let column = t.column(c);
    let base = scale_column(&column).expect("column scaled during execution");
    let mut direct = vec![Vec::new(); t.rows()];
    let mut indirect = vec![Vec::new(); t.rows()];
    for a in 0..t.rows() {
        let alternatives = StandardDomain.alternatives(t.c, a * t.cols() + c);
        let mut any = vec![false; t.rows()];
        let mut all = vec![!alternatives.is_empty(); t.rows()];
        for x in &alternatives {
            let mut changed: Vec<&Scalar> = column.clone();
            changed[a] = x;
            let after = scale_column(&changed).expect("domain keeps numeric columns numeric");
            for b in 0..t.rows() {
                let differs = after[b] != base[b];
                any[b] |= differs;
                all[b] &= differs;
            }
        }
        for b in 0..t.rows() {
            if any[b] {
                indirect[b].push(a);
            }
            if all[b] {
                direct[b].push(a);
            }
        }
    }
    direct.into_iter().zip(indirect).collect()
}

fn dedup(columns: &[String]) -> Vec<&String> {
    let mut seen = BTreeSet::new();
    columns.iter().filter(|c| seen.insert(*c)).collect()
}

fn add_scalar(v: &Scalar, k: &Scalar) -> Result<Scalar> {
    Ok(match (v, k) {
        (Scalar::Int(a), Scalar::Int(b)) => Scalar::Int(
            a.checked_add(*b)
                .ok_or_else(|| OpError::ExecutionFailure(format!("{a} + {b} overflows")))?,
        ),
        (a, b) if a.is_numeric() => Scalar::float(a.as_f64().unwrap() + b.as_f64().unwrap())?,
        (other, _) => other.clone(),
    })
}

/// Row/column view over a 2-D container.
struct Table2<'a> {
    c: &'a Container,
}

impl<'a> Table2<'a> {
    fn new(c: &'a Container) -> Result<Table2<'a>> {
        if c.dim_count() != 2 {
            return Err(OpError::ExecutionFailure(format!(
                "builtins need a 2-D container, got {} dims",
                c.dim_count()
            )));
        }
        Ok(Table2 { c })
    }

    fn rows(&self) -> usize {
        self.c.dim(0).len()
    }

    fn cols(&self) -> usize {
        self.c.dim(1).len()
    }

    fn at(&self, r: usize, c: usize) -> &Scalar {
        &self.c.values()[r * self.cols() + c]
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.c
            .dim(1)
            .position(name)
            .ok_or_else(|| OpError::ExecutionFailure(format!("no column {name:?}")))
    }

    fn row_of(&self, label: &str) -> Result<usize> {
        self.c
            .dim(0)
            .position(label)
            .ok_or_else(|| OpError::ExecutionFailure(format!("no row {label:?}")))
    }

    fn index(&self, r: usize, c: usize) -> IndexTuple {
        self.c.index_at(&[r, c])
    }

    fn column(&self, col: usize) -> Vec<&Scalar> {
        (0..self.rows()).map(|r| self.at(r, col)).collect()
    }

    fn select_rows(&self, rows: &[usize]) -> Container {
        let row_dim = Dimension::new(
            self.c.dim(0).name(),
            rows.iter().map(|&r| self.c.dim(0).label(r).unwrap().to_string()),
        )
        .expect("row labels stay unique");
        let all_cols: Vec<usize> = (0..self.cols()).collect();
        self.c
            .gather(vec![row_dim, self.c.dim(1).clone()], &[rows.to_vec(), all_cols])
    }

    fn select_cols(&self, cols: &[usize]) -> Result<Container> {
        let col_dim = Dimension::new(
            self.c.dim(1).name(),
            cols.iter().map(|&c| self.c.dim(1).label(c).unwrap().to_string()),
        )?;
        let all_rows: Vec<usize> = (0..self.rows()).collect();
        Ok(self
            .c
            .gather(vec![self.c.dim(0).clone(), col_dim], &[all_rows, cols.to_vec()]))
    }
}

/// Executes a builtin operation on its inputs.
pub fn execute(op: &OperationSignature, inputs: &[Container]) -> Result<Container> {
    let builtin = Builtin::from_signature(op)?;
    match inputs {
        [one] => builtin.execute(one),
        _ => Err(OpError::ArityMismatch {
            expected: 1,
            found: inputs.len(),
        }),
    }
}

/// Analytic exact lineage for a builtin execution.
pub fn capture_exact_lineage(op: &OperationSignature, input: &Container, output: &Container) -> Result<LineageTable> {
    let builtin = match Builtin::from_signature(op) {
        Ok(b) => b,
        Err(OpError::UnknownOperation(k)) => return Err(OpError::NotBuiltin(k)),
        Err(e) => return Err(e),
    };
    builtin.capture_exact_lineage(input, output)
}

fn default_timeout() -> f64 {
    30.0
}

/// A black-box operation run as a subprocess.
///
/// The command is split shell-style. `{inputs}` expands to all input file
/// paths, `{in0}`, `{in1}`, ... to single inputs and `{output}` to the output
/// path; without any placeholder the paths are appended as
/// `<in_1> ... <in_n> <out>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalOpSpec {
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workdir: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
}

impl ExternalOpSpec {
    pub fn new(command: impl Into<String>) -> ExternalOpSpec {
        ExternalOpSpec {
            command: command.into(),
            workdir: None,
            timeout_secs: default_timeout(),
        }
    }

    fn argv(&self, inputs: &[PathBuf], output: &Path) -> Result<Vec<String>> {
        let tokens = shlex::split(&self.command)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| OpError::BadParam(format!("cannot parse command {:?}", self.command)))?;
        let show = |p: &Path| p.to_string_lossy().into_owned();
        let mut argv = Vec::new();
        let mut placed = false;
        for tok in tokens {
            if tok == "{inputs}" {
                argv.extend(inputs.iter().map(|p| show(p)));
                placed = true;
            } else if tok == "{output}" {
                argv.push(show(output));
                placed = true;
            } else if let Some(i) = tok
                .strip_prefix("{in")
                .and_then(|r| r.strip_suffix('}'))
                .and_then(|n| n.parse::<usize>().ok())
            {
                let p = inputs
                    .get(i)
                    .ok_or_else(|| OpError::BadParam(format!("{tok} has no matching input")))?;
                argv.push(show(p));
                placed = true;
            } else {
                argv.push(tok);
            }
        }
        if !placed {
            argv.extend(inputs.iter().map(|p| show(p)));
            argv.push(show(output));
        }
        Ok(argv)
    }
}

/// Runs an external operation in an isolated temporary directory.
pub fn execute_external(spec: &ExternalOpSpec, inputs: &[Container]) -> Result<Container> {
    let scratch = tempfile::Builder::new().prefix("xprov-ext-").tempdir()?;
    let mut in_paths = Vec::with_capacity(inputs.len());
    for (i, c) in inputs.iter().enumerate() {
        let p = scratch.path().join(format!("in{i}.json"));
        std::fs::write(&p, c.to_canonical_json())?;
        in_paths.push(p);
    }
    let out_path = scratch.path().join("out.json");
    let err_path = scratch.path().join("stderr.txt");
    let argv = spec.argv(&in_paths, &out_path)?;
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(spec.workdir.as_deref().unwrap_or(scratch.path()))
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::from(File::create(&err_path)?));
    let mut child = cmd
        .spawn()
        .map_err(|e| OpError::ExecutionFailure(format!("cannot start {:?}: {e}", argv[0])))?;
    let limit = Duration::from_secs_f64(spec.timeout_secs.max(0.0));
    let started = Instant::now();
    let mut pause = Duration::from_micros(100);
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if started.elapsed() >= limit {
            let _ = child.kill();
            let _ = child.wait();
            return Err(OpError::Timeout(limit));
        }
        std::thread::sleep(pause);
        pause = (pause * 2).min(Duration::from_millis(5));
    };
    if !status.success() {
        let stderr = std::fs::read_to_string(&err_path).unwrap_or_default();
        return Err(OpError::NonZeroExit {
            code: status.code(),
            stderr: stderr.trim().to_string(),
        });
    }
    let text = std::fs::read_to_string(&out_path)
        .map_err(|e| OpError::MalformedOutput(format!("cannot read output: {e}")))?;
    Container::from_json(&text).map_err(|e| OpError::MalformedOutput(e.to_string()))
}

/// How a workflow node is executed.
#[derive(Debug, Clone, PartialEq)]
pub enum Executable {
    Builtin(Builtin),
    External(ExternalOpSpec),
}

impl Executable {
    pub fn run(&self, inputs: &[Container]) -> Result<Container> {
        match self {
            Executable::Builtin(b) => match inputs {
                [one] => b.execute(one),
                _ => Err(OpError::ArityMismatch {
                    expected: 1,
                    found: inputs.len(),
                }),
            },
            Executable::External(spec) => execute_external(spec, inputs),
        }
    }

    pub fn builtin(&self) -> Option<&Builtin> {
        match self {
            Executable::Builtin(b) => Some(b),
            Executable::External(_) => None,
        }
    }
}
