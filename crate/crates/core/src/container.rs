//! Array data model.
//!
//! Every datum the engine tracks is a dense, immutable, multi-dimensional
//! array with named dimensions and ordered, unique string labels per
//! dimension. Tables and dataframes reduce to two dimensions (rows, columns).

use std::cmp::Ordering;
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use indexmap::IndexSet;
use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContainerError {
    #[error("duplicate label {label:?} in dimension {dim:?}")]
    DuplicateLabel { dim: String, label: String },
    #[error("expected {expected} values, got {found}")]
    ArityMismatch { expected: usize, found: usize },
    #[error("unknown index {0}")]
    UnknownIndex(String),
    #[error("dimension {0:?} would be empty")]
    EmptyDimension(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("malformed container document: {0}")]
    Malformed(String),
}

pub type Result<T, E = ContainerError> = std::result::Result<T, E>;

/// A single cell value. `Null` is the only missing-value marker; floats are
/// always finite.
#[derive(Debug, Clone)]
pub enum Scalar {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
}

impl Scalar {
    pub fn float(v: f64) -> Result<Scalar> {
        if v.is_finite() {
            Ok(Scalar::Float(v))
        } else {
            Err(ContainerError::InvalidValue(format!("non-finite float {v}")))
        }
    }

    pub fn str(s: impl Into<String>) -> Scalar {
        Scalar::Str(s.into())
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Scalar::Null)
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Scalar::Int(i) => Some(*i as f64),
            Scalar::Float(f) => Some(*f),
            _ => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Scalar::Int(_) | Scalar::Float(_))
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            Scalar::Null => "null",
            Scalar::Bool(_) => "bool",
            Scalar::Int(_) => "int",
            Scalar::Float(_) => "float",
            Scalar::Str(_) => "str",
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Scalar::Float(f) if !f.is_finite() => Err(ContainerError::InvalidValue(format!(
                "non-finite float {f}"
            ))),
            _ => Ok(()),
        }
    }

    /// Compares two values the way a predicate would: numbers across
    /// Int/Float, strings lexicographically, bools with `false < true`.
    /// Mixed or null operands are incomparable.
    pub fn partial_compare(&self, other: &Scalar) -> Option<Ordering> {
        match (self, other) {
            (Scalar::Int(a), Scalar::Int(b)) => Some(a.cmp(b)),
            (a, b) if a.is_numeric() && b.is_numeric() => {
                a.as_f64().unwrap().partial_cmp(&b.as_f64().unwrap())
            }
            (Scalar::Str(a), Scalar::Str(b)) => Some(a.cmp(b)),
            (Scalar::Bool(a), Scalar::Bool(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }

    /// Total order used for sorting: numbers, then strings, then bools, with
    /// null last.
    pub fn sort_cmp(&self, other: &Scalar) -> Ordering {
        fn rank(s: &Scalar) -> u8 {
            match s {
                Scalar::Int(_) | Scalar::Float(_) => 0,
                Scalar::Str(_) => 1,
                Scalar::Bool(_) => 2,
                Scalar::Null => 3,
            }
        }
        match self.partial_compare(other) {
            Some(o) => o,
            None => rank(self).cmp(&rank(other)),
        }
    }

    fn float_key(f: f64) -> u64 {
        if f == 0.0 {
            0f64.to_bits()
        } else {
            f.to_bits()
        }
    }
}

impl PartialEq for Scalar {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Scalar::Null, Scalar::Null) => true,
            (Scalar::Bool(a), Scalar::Bool(b)) => a == b,
            (Scalar::Int(a), Scalar::Int(b)) => a == b,
            (Scalar::Float(a), Scalar::Float(b)) => a == b,
            (Scalar::Str(a), Scalar::Str(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Scalar {}

impl Hash for Scalar {
    fn hash<H: Hasher>(&self, state: &mut H) {
        std::mem::discriminant(self).hash(state);
        match self {
            Scalar::Null => {}
            Scalar::Bool(b) => b.hash(state),
            Scalar::Int(i) => i.hash(state),
            Scalar::Float(f) => Scalar::float_key(*f).hash(state),
            Scalar::Str(s) => s.hash(state),
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Null => f.write_str("null"),
            Scalar::Bool(b) => write!(f, "{b}"),
            Scalar::Int(i) => write!(f, "{i}"),
            Scalar::Float(x) => {
                if x.fract() == 0.0 && x.abs() < 1e15 {
                    write!(f, "{x:.1}")
                } else {
                    write!(f, "{x}")
                }
            }
            Scalar::Str(s) => write!(f, "{s:?}"),
        }
    }
}

impl From<i64> for Scalar {
    fn from(v: i64) -> Self {
        Scalar::Int(v)
    }
}

impl From<bool> for Scalar {
    fn from(v: bool) -> Self {
        Scalar::Bool(v)
    }
}

impl From<&str> for Scalar {
    fn from(v: &str) -> Self {
        Scalar::Str(v.to_string())
    }
}

impl Serialize for Scalar {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Scalar::Null => s.serialize_unit(),
            Scalar::Bool(b) => s.serialize_bool(*b),
            Scalar::Int(i) => s.serialize_i64(*i),
            Scalar::Float(f) => s.serialize_f64(*f),
            Scalar::Str(v) => s.serialize_str(v),
        }
    }
}

impl<'de> Deserialize<'de> for Scalar {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct ScalarVisitor;

        impl Visitor<'_> for ScalarVisitor {
            type Value = Scalar;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("null, bool, number or string")
            }

            fn visit_unit<E: de::Error>(self) -> std::result::Result<Scalar, E> {
                Ok(Scalar::Null)
            }

            fn visit_none<E: de::Error>(self) -> std::result::Result<Scalar, E> {
                Ok(Scalar::Null)
            }

            fn visit_bool<E: de::Error>(self, v: bool) -> std::result::Result<Scalar, E> {
                Ok(Scalar::Bool(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<Scalar, E> {
                Ok(Scalar::Int(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<Scalar, E> {
                i64::try_from(v)
                    .map(Scalar::Int)
                    .map_err(|_| E::custom(format!("integer {v} out of range")))
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<Scalar, E> {
                Scalar::float(v).map_err(E::custom)
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<Scalar, E> {
                Ok(Scalar::Str(v.to_string()))
            }

            fn visit_string<E: de::Error>(self, v: String) -> std::result::Result<Scalar, E> {
                Ok(Scalar::Str(v))
            }
        }

        d.deserialize_any(ScalarVisitor)
    }
}

/// A named dimension with ordered, pairwise-distinct labels.
#[derive(Debug, Clone)]
pub struct Dimension {
    name: String,
    labels: IndexSet<String>,
}

impl PartialEq for Dimension {
    /// Label order matters.
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.labels.iter().eq(other.labels.iter())
    }
}

impl Eq for Dimension {}

impl Dimension {
    pub fn new<I, S>(name: impl Into<String>, labels: I) -> Result<Dimension>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let name = name.into();
        let mut set = IndexSet::new();
        for label in labels {
            let label = label.into();
            if set.contains(&label) {
                return Err(ContainerError::DuplicateLabel { dim: name, label });
            }
            set.insert(label);
        }
        Ok(Dimension { name, labels: set })
    }

    /// Builds a dimension from labels that may repeat, disambiguating the
    /// k-th repeat (k >= 1) of a label as `label#k`.
    pub fn with_subkeys<I, S>(name: impl Into<String>, labels: I) -> Dimension
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut set = IndexSet::new();
        let mut seen = std::collections::HashMap::<String, usize>::new();
        for label in labels {
            let label = label.into();
            let count = seen.entry(label.clone()).or_insert(0);
            let mut candidate = if *count == 0 {
                label.clone()
            } else {
                format!("{label}#{count}")
            };
            while set.contains(&candidate) {
                *count += 1;
                candidate = format!("{label}#{count}");
            }
            *count += 1;
            set.insert(candidate);
        }
        Dimension {
            name: name.into(),
            labels: set,
        }
    }

    /// Positional labels "0", "1", ... as used for numeric row indices.
    pub fn positional(name: impl Into<String>, len: usize) -> Dimension {
        Dimension {
            name: name.into(),
            labels: (0..len).map(|i| i.to_string()).collect(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn labels(&self) -> impl ExactSizeIterator<Item = &str> + '_ {
        self.labels.iter().map(String::as_str)
    }

    pub fn label(&self, pos: usize) -> Option<&str> {
        self.labels.get_index(pos).map(String::as_str)
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.get_index_of(label)
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.contains(label)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One label per dimension, positionally aligned with a container's dims.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct IndexTuple(pub Vec<String>);

impl IndexTuple {
    pub fn new<I, S>(labels: I) -> IndexTuple
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        IndexTuple(labels.into_iter().map(Into::into).collect())
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn arity(&self) -> usize {
        self.0.len()
    }

    pub fn get(&self, dim: usize) -> Option<&str> {
        self.0.get(dim).map(String::as_str)
    }

    /// Parses the comma-separated form printed by `Display`, with optional
    /// surrounding parentheses: `0,Age` or `(0,Age)`.
    pub fn parse(s: &str) -> Option<IndexTuple> {
        let s = s.trim();
        let inner = s
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .unwrap_or(s);
        if inner.is_empty() {
            return None;
        }
        Some(IndexTuple(
            inner.split(',').map(|p| p.trim().to_string()).collect(),
        ))
    }
}

impl fmt::Display for IndexTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({})", self.0.join(","))
    }
}

/// Structure of a container without its values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContainerSchema {
    pub dims: Vec<DimSchema>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DimSchema {
    pub name: String,
    pub indices: Vec<String>,
}

impl ContainerSchema {
    pub fn dim_count(&self) -> usize {
        self.dims.len()
    }

    pub fn contains(&self, idx: &IndexTuple) -> bool {
        idx.arity() == self.dims.len()
            && self
                .dims
                .iter()
                .zip(idx.labels())
                .all(|(d, l)| d.indices.iter().any(|x| x == l))
    }

    pub fn positions(&self, idx: &IndexTuple) -> Option<Vec<usize>> {
        if idx.arity() != self.dims.len() {
            return None;
        }
        self.dims
            .iter()
            .zip(idx.labels())
            .map(|(d, l)| d.indices.iter().position(|x| x == l))
            .collect()
    }

    pub fn cell_count(&self) -> usize {
        self.dims.iter().map(|d| d.indices.len()).product()
    }

    /// All index tuples in row-major order.
    pub fn indices(&self) -> Vec<IndexTuple> {
        let shape: Vec<usize> = self.dims.iter().map(|d| d.indices.len()).collect();
        RowMajor::new(&shape)
            .map(|pos| {
                IndexTuple(
                    pos.iter()
                        .enumerate()
                        .map(|(d, &p)| self.dims[d].indices[p].clone())
                        .collect(),
                )
            })
            .collect()
    }
}

/// Iterates multi-dimensional positions in row-major order.
pub(crate) struct RowMajor {
    shape: Vec<usize>,
    next: Option<Vec<usize>>,
}

impl RowMajor {
    pub(crate) fn new(shape: &[usize]) -> RowMajor {
        let next = if shape.contains(&0) {
            None
        } else {
            Some(vec![0; shape.len()])
        };
        RowMajor {
            shape: shape.to_vec(),
            next,
        }
    }
}

impl Iterator for RowMajor {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut d = succ.len();
        let mut done = true;
        while d > 0 {
            d -= 1;
            succ[d] += 1;
            if succ[d] < self.shape[d] {
                done = false;
                break;
            }
            succ[d] = 0;
        }
        if !done {
            self.next = Some(succ);
        }
        Some(current)
    }
}

/// Dense immutable array with labeled dimensions.
#[derive(Debug, Clone)]
pub struct Container {
    id: String,
    dims: Vec<Dimension>,
    cells: Arc<Vec<Scalar>>,
}

impl Container {
    /// Builds a container from dimensions and a row-major value list.
    pub fn new(id: impl Into<String>, dims: Vec<Dimension>, values: Vec<Scalar>) -> Result<Container> {
        let expected: usize = dims.iter().map(Dimension::len).product();
        if values.len() != expected {
            return Err(ContainerError::ArityMismatch {
                expected,
                found: values.len(),
            });
        }
        for v in &values {
            v.validate()?;
        }
        Ok(Container {
            id: id.into(),
            dims,
            cells: Arc::new(values),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(&self, id: impl Into<String>) -> Container {
        Container {
            id: id.into(),
            dims: self.dims.clone(),
            cells: Arc::clone(&self.cells),
        }
    }

    pub fn dims(&self) -> &[Dimension] {
        &self.dims
    }

    pub fn dim(&self, d: usize) -> &Dimension {
        &self.dims[d]
    }

    pub fn dim_count(&self) -> usize {
        self.dims.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(Dimension::len).collect()
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn values(&self) -> &[Scalar] {
        &self.cells
    }

    pub fn schema(&self) -> ContainerSchema {
        ContainerSchema {
            dims: self
                .dims
                .iter()
                .map(|d| DimSchema {
                    name: d.name.clone(),
                    indices: d.labels().map(str::to_string).collect(),
                })
                .collect(),
        }
    }

    pub fn offset_of_positions(&self, pos: &[usize]) -> usize {
        let mut off = 0;
        for (d, &p) in pos.iter().enumerate() {
            off = off * self.dims[d].len() + p;
        }
        off
    }

    pub fn positions(&self, idx: &IndexTuple) -> Result<Vec<usize>> {
        if idx.arity() != self.dims.len() {
            return Err(ContainerError::UnknownIndex(idx.to_string()));
        }
        self.dims
            .iter()
            .zip(idx.labels())
            .map(|(d, l)| {
                d.position(l)
                    .ok_or_else(|| ContainerError::UnknownIndex(idx.to_string()))
            })
            .collect()
    }

    pub fn contains(&self, idx: &IndexTuple) -> bool {
        self.positions(idx).is_ok()
    }

    pub fn index_at(&self, pos: &[usize]) -> IndexTuple {
        IndexTuple(
            pos.iter()
                .enumerate()
                .map(|(d, &p)| self.dims[d].label(p).unwrap().to_string())
                .collect(),
        )
    }

    pub fn get_cell(&self, idx: &IndexTuple) -> Result<&Scalar> {
        let pos = self.positions(idx)?;
        Ok(&self.cells[self.offset_of_positions(&pos)])
    }

    pub fn get_at(&self, pos: &[usize]) -> &Scalar {
        &self.cells[self.offset_of_positions(pos)]
    }

    /// Returns a copy differing from `self` only at `idx`.
    pub fn with_cell(&self, idx: &IndexTuple, value: Scalar) -> Result<Container> {
        value.validate()?;
        let pos = self.positions(idx)?;
        let off = self.offset_of_positions(&pos);
        let mut cells = (*self.cells).clone();
        cells[off] = value;
        Ok(Container {
            id: self.id.clone(),
            dims: self.dims.clone(),
            cells: Arc::new(cells),
        })
    }

    /// Like [`Container::with_cell`], addressed by row-major offset.
    pub fn with_value_at(&self, offset: usize, value: Scalar) -> Result<Container> {
        value.validate()?;
        if offset >= self.cells.len() {
            return Err(ContainerError::UnknownIndex(format!("offset {offset}")));
        }
        let mut cells = (*self.cells).clone();
        cells[offset] = value;
        Ok(Container {
            id: self.id.clone(),
            dims: self.dims.clone(),
            cells: Arc::new(cells),
        })
    }

    /// Restricts the container to the kept labels of each dimension.
    ///
    /// `keep[d]` must list labels of dimension `d` in their original relative
    /// order; every dimension keeps at least one label.
    pub fn subset(&self, keep: &[Vec<String>]) -> Result<Container> {
        if keep.len() != self.dims.len() {
            return Err(ContainerError::ArityMismatch {
                expected: self.dims.len(),
                found: keep.len(),
            });
        }
        let mut new_dims = Vec::with_capacity(self.dims.len());
        let mut kept_pos = Vec::with_capacity(self.dims.len());
        for (dim, labels) in self.dims.iter().zip(keep) {
            if labels.is_empty() {
                return Err(ContainerError::EmptyDimension(dim.name.clone()));
            }
            let mut positions = Vec::with_capacity(labels.len());
            for l in labels {
                let p = dim
                    .position(l)
                    .ok_or_else(|| ContainerError::UnknownIndex(format!("{}={l}", dim.name)))?;
                if positions.last().is_some_and(|&last| p <= last) {
                    return Err(ContainerError::InvalidValue(format!(
                        "labels for {:?} must follow the container's order",
                        dim.name
                    )));
                }
                positions.push(p);
            }
            new_dims.push(Dimension::new(dim.name.clone(), labels.iter().cloned())?);
            kept_pos.push(positions);
        }
        Ok(self.gather(new_dims, &kept_pos))
    }

    /// Builds a container whose dimension `d` takes source positions
    /// `source[d]` (any order, no repeats), with the given new dimensions.
    pub(crate) fn gather(&self, dims: Vec<Dimension>, source: &[Vec<usize>]) -> Container {
        let shape: Vec<usize> = source.iter().map(Vec::len).collect();
        let cells = RowMajor::new(&shape)
            .map(|pos| {
                let src: Vec<usize> = pos.iter().enumerate().map(|(d, &p)| source[d][p]).collect();
                self.get_at(&src).clone()
            })
            .collect();
        Container {
            id: self.id.clone(),
            dims,
            cells: Arc::new(cells),
        }
    }

    /// All index tuples in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = IndexTuple> + '_ {
        RowMajor::new(&self.shape()).map(move |pos| self.index_at(&pos))
    }

    /// All (position vector, value) pairs in row-major order.
    pub fn positioned_cells(&self) -> impl Iterator<Item = (Vec<usize>, &Scalar)> + '_ {
        RowMajor::new(&self.shape()).zip(self.cells.iter())
    }

    /// Canonical file form: pretty JSON with `id`, `dims`, `values`.
    pub fn to_canonical_json(&self) -> String {
        let doc = ContainerDoc {
            id: self.id.clone(),
            dims: self
                .dims
                .iter()
                .map(|d| DimSchema {
                    name: d.name.clone(),
                    indices: d.labels().map(str::to_string).collect(),
                })
                .collect(),
            values: (*self.cells).clone(),
        };
        let mut s = serde_json::to_string_pretty(&doc).expect("container serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Container> {
        let doc: ContainerDoc =
            serde_json::from_str(text).map_err(|e| ContainerError::Malformed(e.to_string()))?;
        let dims = doc
            .dims
            .into_iter()
            .map(|d| Dimension::new(d.name, d.indices))
            .collect::<Result<Vec<_>>>()?;
        Container::new(doc.id, dims, doc.values)
    }
}

#[derive(Serialize, Deserialize)]
struct ContainerDoc {
    id: String,
    dims: Vec<DimSchema>,
    values: Vec<Scalar>,
}

impl PartialEq for Container {
    /// Content equality; ids are names and do not participate.
    fn eq(&self, other: &Self) -> bool {
        containers_equal(self, other)
    }
}

/// Same dimension names, same ordered labels and cell-wise equal values.
pub fn containers_equal(a: &Container, b: &Container) -> bool {
    a.dims == b.dims && a.cells == b.cells
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    fn idx(r: &str, c: &str) -> IndexTuple {
        IndexTuple::new([r, c])
    }

    #[test]
    fn minimal_container() {
        let c = Container::new(
            "c",
            vec![
                Dimension::new("rows", ["0", "1"]).unwrap(),
                Dimension::new("cols", ["Age"]).unwrap(),
            ],
            vec![Scalar::Int(35), Scalar::Int(28)],
        )
        .unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.get_cell(&idx("1", "Age")).unwrap(), &Scalar::Int(28));
    }

    #[test]
    fn duplicate_label_rejected() {
        let err = Dimension::new("rows", ["0", "0"]).unwrap_err();
        assert!(matches!(err, ContainerError::DuplicateLabel { .. }));
    }

    #[test]
    fn value_count_checked() {
        let err = Container::new(
            "c",
            vec![Dimension::new("rows", ["0", "1"]).unwrap()],
            vec![Scalar::Int(1)],
        )
        .unwrap_err();
        assert_eq!(err, ContainerError::ArityMismatch { expected: 2, found: 1 });
    }

    #[test]
    fn nan_is_not_a_value() {
        assert!(Scalar::float(f64::NAN).is_err());
        let c = fixtures::d0();
        assert!(c.with_cell(&idx("0", "Age"), Scalar::Float(f64::NAN)).is_err());
    }

    #[test]
    fn fixture_lookups() {
        let d0 = fixtures::d0();
        assert_eq!(d0.get_cell(&idx("0", "Age")).unwrap(), &Scalar::Int(35));
        assert_eq!(d0.get_cell(&idx("2", "Name")).unwrap(), &Scalar::Null);
        assert_eq!(d0.get_cell(&idx("3", "Children")).unwrap(), &Scalar::Null);
        assert!(matches!(
            d0.get_cell(&idx("9", "Age")),
            Err(ContainerError::UnknownIndex(_))
        ));
    }

    #[test]
    fn with_cell_is_a_pure_update() {
        let d0 = fixtures::d0();
        let changed = d0.with_cell(&idx("0", "Age"), Scalar::Int(99)).unwrap();
        assert_eq!(changed.get_cell(&idx("0", "Age")).unwrap(), &Scalar::Int(99));
        assert_eq!(d0.get_cell(&idx("0", "Age")).unwrap(), &Scalar::Int(35));
        assert!(!containers_equal(&d0, &changed));
        let same = d0
            .with_cell(&idx("0", "Age"), d0.get_cell(&idx("0", "Age")).unwrap().clone())
            .unwrap();
        assert!(containers_equal(&d0, &same));
    }

    #[test]
    fn subset_rows() {
        let d0 = fixtures::d0();
        let cols: Vec<String> = d0.dim(1).labels().map(str::to_string).collect();
        let sub = d0.subset(&[vec!["0".into(), "1".into()], cols.clone()]).unwrap();
        assert_eq!(sub.shape(), vec![2, 3]);
        for r in ["0", "1"] {
            for c in &cols {
                assert_eq!(sub.get_cell(&idx(r, c)).unwrap(), d0.get_cell(&idx(r, c)).unwrap());
            }
        }
        let rows: Vec<String> = d0.dim(0).labels().map(str::to_string).collect();
        assert!(containers_equal(&d0.subset(&[rows, cols.clone()]).unwrap(), &d0));
        assert!(matches!(
            d0.subset(&[vec![], cols]),
            Err(ContainerError::EmptyDimension(_))
        ));
    }

    #[test]
    fn row_order_is_significant() {
        let a = Container::new(
            "a",
            vec![Dimension::new("rows", ["0", "1"]).unwrap()],
            vec![Scalar::Int(1), Scalar::Int(2)],
        )
        .unwrap();
        let b = Container::new(
            "b",
            vec![Dimension::new("rows", ["1", "0"]).unwrap()],
            vec![Scalar::Int(2), Scalar::Int(1)],
        )
        .unwrap();
        assert!(!containers_equal(&a, &b));
    }

    #[test]
    fn subkeys_disambiguate() {
        let d = Dimension::with_subkeys("rows", ["a", "b", "a", "a"]);
        let labels: Vec<&str> = d.labels().collect();
        assert_eq!(labels, ["a", "b", "a#1", "a#2"]);
    }

    #[test]
    fn canonical_json_shape() {
        let c = Container::new(
            "c",
            vec![
                Dimension::new("rows", ["0"]).unwrap(),
                Dimension::new("cols", ["a", "b", "c", "d", "e"]).unwrap(),
            ],
            vec![
                Scalar::Int(1),
                Scalar::Float(2.0),
                Scalar::str("x"),
                Scalar::Bool(true),
                Scalar::Null,
            ],
        )
        .unwrap();
        let text = c.to_canonical_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["values"], serde_json::json!([1, 2.0, "x", true, null]));
        let back = Container::from_json(&text).unwrap();
        assert_eq!(back.get_cell(&idx("0", "b")).unwrap(), &Scalar::Float(2.0));
        assert_eq!(back.to_canonical_json(), text);
    }

    fn arb_scalar() -> impl Strategy<Value = Scalar> {
        prop_oneof![
            Just(Scalar::Null),
            any::<bool>().prop_map(Scalar::Bool),
            any::<i64>().prop_map(Scalar::Int),
            (-1e12f64..1e12).prop_map(Scalar::Float),
            "[a-zA-Z0-9 _\\-]{0,6}".prop_map(Scalar::Str),
        ]
    }

    fn arb_container() -> impl Strategy<Value = Container> {
        (1usize..4, 1usize..4).prop_flat_map(|(r, c)| {
            proptest::collection::vec(arb_scalar(), r * c).prop_map(move |vals| {
                Container::new(
                    "rand",
                    vec![
                        Dimension::positional("rows", r),
                        Dimension::new("cols", (0..c).map(|i| format!("c{i}"))).unwrap(),
                    ],
                    vals,
                )
                .unwrap()
            })
        })
    }

    #[test]
    fn reordered_rows_are_not_equal() {
        let a = Container::new(
            "c",
            vec![Dimension::new("rows", ["0", "1"]).unwrap(), Dimension::new("cols", ["x"]).unwrap()],
            vec![Scalar::Int(1), Scalar::Int(2)],
        )
        .unwrap();
        let b = Container::new(
            "c",
            vec![Dimension::new("rows", ["1", "0"]).unwrap(), Dimension::new("cols", ["x"]).unwrap()],
            vec![Scalar::Int(2), Scalar::Int(1)],
        )
        .unwrap();
        assert!(!containers_equal(&a, &b));
    }

    proptest! {
        #[test]
        fn json_round_trip(c in arb_container()) {
            let back = Container::from_json(&c.to_canonical_json()).unwrap();
            prop_assert!(containers_equal(&c, &back));
        }

        #[test]
        fn double_write_restores(c in arb_container(), v in arb_scalar(), r in 0usize..3, k in 0usize..3) {
            let pos = [r % c.dim(0).len(), k % c.dim(1).len()];
            let at = c.index_at(&pos);
            let orig = c.get_cell(&at).unwrap().clone();
            let back = c.with_cell(&at, v).unwrap().with_cell(&at, orig).unwrap();
            prop_assert!(containers_equal(&c, &back));
        }

        #[test]
        fn subset_keeps_order(c in arb_container(), mask in proptest::collection::vec(any::<bool>(), 8)) {
            let keep: Vec<Vec<String>> = c.dims().iter().enumerate().map(|(d, dim)| {
                let mut kept: Vec<String> = dim.labels().enumerate()
                    .filter(|(i, _)| mask[(i + d * 4) % 8])
                    .map(|(_, l)| l.to_string()).collect();
                if kept.is_empty() { kept.push(dim.label(0).unwrap().to_string()); }
                kept
            }).collect();
            let sub = c.subset(&keep).unwrap();
            for (d, dim) in sub.dims().iter().enumerate() {
                let positions: Vec<usize> = dim.labels().map(|l| c.dim(d).position(l).unwrap()).collect();
                prop_assert!(positions.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }
}
