//! Relational lineage tables.
//!
//! A table holds one record per (output entity, input entity, kind) edge for
//! a single operation execution, along with a per-kind completeness claim and
//! the origin of the table. Every record is validated against the output
//! schema and the schema of its input slot.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{ContainerSchema, IndexTuple};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LineageError {
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("no tables given")]
    EmptyInput,
    #[error("corrupt lineage payload: {0}")]
    CorruptPayload(String),
}

pub type Result<T, E = LineageError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfluenceKind {
    Direct,
    Indirect,
}

impl InfluenceKind {
    pub const ALL: [InfluenceKind; 2] = [InfluenceKind::Direct, InfluenceKind::Indirect];

    pub fn parse(s: &str) -> Option<InfluenceKind> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Some(InfluenceKind::Direct),
            "indirect" => Some(InfluenceKind::Indirect),
            _ => None,
        }
    }
}

impl fmt::Display for InfluenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InfluenceKind::Direct => "direct",
            InfluenceKind::Indirect => "indirect",
        })
    }
}

/// How a record set relates to the true lineage. Ordered from most to least
/// precise, so `max` picks the weakest claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Completeness {
    Exact,
    OverApprox,
    Unknown,
}

impl fmt::Display for Completeness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Completeness::Exact => "exact",
            Completeness::OverApprox => "overapprox",
            Completeness::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KindCompleteness {
    pub direct: Completeness,
    pub indirect: Completeness,
}

impl KindCompleteness {
    pub fn both(c: Completeness) -> KindCompleteness {
        KindCompleteness {
            direct: c,
            indirect: c,
        }
    }

    pub fn get(&self, kind: InfluenceKind) -> Completeness {
        match kind {
            InfluenceKind::Direct => self.direct,
            InfluenceKind::Indirect => self.indirect,
        }
    }

    pub fn weakest(&self, other: &KindCompleteness) -> KindCompleteness {
        KindCompleteness {
            direct: self.direct.max(other.direct),
            indirect: self.indirect.max(other.indirect),
        }
    }
}

/// What produced a table or tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OriginKind {
    Declared,
    CapturedExact,
    Oracle,
    Learnt { example_count: usize },
}

impl OriginKind {
    /// Trust rank; higher is weaker.
    fn rank(&self) -> u8 {
        match self {
            OriginKind::CapturedExact => 0,
            OriginKind::Oracle => 1,
            OriginKind::Declared => 2,
            OriginKind::Learnt { .. } => 3,
        }
    }

    /// The less trustworthy of two origins. Between two learnt origins the
    /// one backed by fewer examples is weaker.
    pub fn weakest(self, other: OriginKind) -> OriginKind {
        match (self, other) {
            (
                OriginKind::Learnt { example_count: a },
                OriginKind::Learnt { example_count: b },
            ) => OriginKind::Learnt {
                example_count: a.min(b),
            },
            _ if other.rank() > self.rank() => other,
            _ => self,
        }
    }
}

impl fmt::Display for OriginKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OriginKind::Declared => f.write_str("declared"),
            OriginKind::CapturedExact => f.write_str("captured-exact"),
            OriginKind::Oracle => f.write_str("oracle"),
            OriginKind::Learnt { example_count } => write!(f, "learnt(n={example_count})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Origin {
    #[serde(flatten)]
    pub kind: OriginKind,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

impl Origin {
    pub fn now(kind: OriginKind) -> Origin {
        Origin {
            kind,
            timestamp: now_millis(),
        }
    }

    pub fn at(kind: OriginKind, timestamp: u64) -> Origin {
        Origin { kind, timestamp }
    }
}

pub(crate) fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LineageRecord {
    pub out_idx: IndexTuple,
    pub in_slot: usize,
    pub in_idx: IndexTuple,
    pub kind: InfluenceKind,
}

impl LineageRecord {
    pub fn new(out_idx: IndexTuple, in_slot: usize, in_idx: IndexTuple, kind: InfluenceKind) -> Self {
        LineageRecord {
            out_idx,
            in_slot,
            in_idx,
            kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// From input entities to the output entities they influence.
    Forward,
    /// From output entities to their influencing input entities.
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineageTable {
    records: BTreeSet<LineageRecord>,
    completeness: KindCompleteness,
    origin: Origin,
    output_schema: ContainerSchema,
    input_schemas: Vec<ContainerSchema>,
}

impl LineageTable {
    /// Builds a table, dropping duplicate records and rejecting any record
    /// that does not fit the schemas.
    pub fn build<I>(
        records: I,
        completeness: KindCompleteness,
        origin: Origin,
        output_schema: ContainerSchema,
        input_schemas: Vec<ContainerSchema>,
    ) -> Result<LineageTable>
    where
        I: IntoIterator<Item = LineageRecord>,
    {
        let table = LineageTable {
            records: BTreeSet::new(),
            completeness,
            origin,
            output_schema,
            input_schemas,
        };
        table.with_records(records)
    }

    /// Same schemas, completeness and origin with a new record set.
    pub fn with_records<I>(mut self, records: I) -> Result<LineageTable>
    where
        I: IntoIterator<Item = LineageRecord>,
    {
        let mut set = BTreeSet::new();
        for r in records {
            self.check_record(&r)?;
            set.insert(r);
        }
        self.records = set;
        Ok(self)
    }

    fn check_record(&self, r: &LineageRecord) -> Result<()> {
        if !self.output_schema.contains(&r.out_idx) {
            return Err(LineageError::SchemaViolation(format!(
                "output index {} not in output schema",
                r.out_idx
            )));
        }
        let schema = self.input_schemas.get(r.in_slot).ok_or_else(|| {
            LineageError::SchemaViolation(format!("input slot {} does not exist", r.in_slot))
        })?;
        if !schema.contains(&r.in_idx) {
            return Err(LineageError::SchemaViolation(format!(
                "input index {} not in schema of slot {}",
                r.in_idx, r.in_slot
            )));
        }
        Ok(())
    }

    /// A table that claims nothing: no records and unknown completeness.
    pub fn unknown(origin: Origin, output_schema: ContainerSchema, input_schemas: Vec<ContainerSchema>) -> Self {
        LineageTable {
            records: BTreeSet::new(),
            completeness: KindCompleteness::both(Completeness::Unknown),
            origin,
            output_schema,
            input_schemas,
        }
    }

    /// Direct and indirect records between identical index tuples present on
    /// both sides of a single-input table.
    pub fn identity(schema: &ContainerSchema, origin: Origin) -> LineageTable {
        let records = schema.indices().into_iter().flat_map(|idx| {
            InfluenceKind::ALL
                .into_iter()
                .map(move |k| LineageRecord::new(idx.clone(), 0, idx.clone(), k))
        });
        LineageTable {
            records: records.collect(),
            completeness: KindCompleteness::both(Completeness::Exact),
            origin,
            output_schema: schema.clone(),
            input_schemas: vec![schema.clone()],
        }
    }

    pub fn records(&self) -> &BTreeSet<LineageRecord> {
        &self.records
    }

    pub fn records_of(&self, kind: InfluenceKind) -> impl Iterator<Item = &LineageRecord> + '_ {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn completeness(&self) -> KindCompleteness {
        self.completeness
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn output_schema(&self) -> &ContainerSchema {
        &self.output_schema
    }

    pub fn input_schemas(&self) -> &[ContainerSchema] {
        &self.input_schemas
    }

    pub fn with_origin(mut self, origin: Origin) -> LineageTable {
        self.origin = origin;
        self
    }

    pub fn with_completeness(mut self, completeness: KindCompleteness) -> LineageTable {
        self.completeness = completeness;
        self
    }

    /// Records of one input slot, re-homed as a single-input table.
    pub fn slot_table(&self, slot: usize) -> Result<LineageTable> {
        let schema = self.input_schemas.get(slot).cloned().ok_or_else(|| {
            LineageError::SchemaViolation(format!("input slot {slot} does not exist"))
        })?;
        Ok(LineageTable {
            records: self
                .records
                .iter()
                .filter(|r| r.in_slot == slot)
                .map(|r| LineageRecord::new(r.out_idx.clone(), 0, r.in_idx.clone(), r.kind))
                .collect(),
            completeness: self.completeness,
            origin: self.origin,
            output_schema: self.output_schema.clone(),
            input_schemas: vec![schema],
        })
    }

    /// Completeness of the answer to a query of the given kind. Indirect
    /// queries also match direct records, so they are only as precise as the
    /// direct records they pull in.
    pub fn query_completeness(&self, kind: InfluenceKind) -> Completeness {
        match kind {
            InfluenceKind::Direct => self.completeness.direct,
            InfluenceKind::Indirect => {
                let direct_covered = self.records_of(InfluenceKind::Direct).all(|r| {
                    self.records.contains(&LineageRecord::new(
                        r.out_idx.clone(),
                        r.in_slot,
                        r.in_idx.clone(),
                        InfluenceKind::Indirect,
                    ))
                });
                if direct_covered {
                    self.completeness.indirect
                } else {
                    self.completeness.indirect.max(self.completeness.direct)
                }
            }
        }
    }

    /// Canonical text form: header row then one sorted record per line.
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut header: Vec<String> = self
            .output_schema
            .dims
            .iter()
            .map(|d| format!("out_{}", d.name))
            .collect();
        header.push("in_slot".into());
        if let Some(s) = self.input_schemas.first() {
            header.extend(s.dims.iter().map(|d| format!("in_{}", d.name)));
        }
        header.push("kind".into());
        w.write_record(&header).expect("write to vec");
        for r in &self.records {
            let mut row: Vec<String> = r.out_idx.labels().to_vec();
            row.push(r.in_slot.to_string());
            row.extend(r.in_idx.labels().iter().cloned());
            row.push(r.kind.to_string());
            w.write_record(&row).expect("write to vec");
        }
        String::from_utf8(w.into_inner().expect("flush vec")).expect("utf-8 labels")
    }
}

fn same_schemas(a: &LineageTable, b: &LineageTable) -> bool {
    a.output_schema == b.output_schema && a.input_schemas == b.input_schemas
}

/// Kind-wise intersection of the record sets of tables over the same schemas.
pub fn intersect_tables(tables: &[LineageTable]) -> Result<LineageTable> {
    let first = tables.first().ok_or(LineageError::EmptyInput)?;
    if let Some(bad) = tables.iter().find(|t| !same_schemas(first, t)) {
        return Err(LineageError::SchemaMismatch(format!(
            "table with output schema of {} dims differs from the first table",
            bad.output_schema.dim_count()
        )));
    }
    let records: BTreeSet<LineageRecord> = first
        .records
        .iter()
        .filter(|r| tables[1..].iter().all(|t| t.records.contains(*r)))
        .cloned()
        .collect();
    let claim = |kind: InfluenceKind| {
        if tables
            .iter()
            .all(|t| t.completeness.get(kind) != Completeness::Unknown)
        {
            Completeness::OverApprox
        } else {
            Completeness::Unknown
        }
    };
    let example_count = tables
        .iter()
        .map(|t| match t.origin.kind {
            OriginKind::Learnt { example_count } => example_count,
            _ => 0,
        })
        .max()
        .unwrap_or(0);
    let timestamp = tables.iter().map(|t| t.origin.timestamp).max().unwrap_or(0);
    Ok(LineageTable {
        records,
        completeness: KindCompleteness {
            direct: claim(InfluenceKind::Direct),
            indirect: claim(InfluenceKind::Indirect),
        },
        origin: Origin::at(OriginKind::Learnt { example_count }, timestamp),
        output_schema: first.output_schema.clone(),
        input_schemas: first.input_schemas.clone(),
    })
}

/// Joins two hops on the middle container: the result links the downstream
/// outputs to the upstream inputs.
pub fn compose_tables(upstream: &LineageTable, downstream: &LineageTable) -> Result<LineageTable> {
    if downstream.input_schemas.len() != 1 || downstream.input_schemas[0] != upstream.output_schema {
        return Err(LineageError::SchemaMismatch(
            "downstream input schema must equal upstream output schema".into(),
        ));
    }
    let mut by_middle: HashMap<&IndexTuple, Vec<&LineageRecord>> = HashMap::new();
    for r in &upstream.records {
        by_middle.entry(&r.out_idx).or_default().push(r);
    }
    let mut records = BTreeSet::new();
    for d in &downstream.records {
        if let Some(ups) = by_middle.get(&d.in_idx) {
            for u in ups {
                let kind = if u.kind == InfluenceKind::Direct && d.kind == InfluenceKind::Direct {
                    InfluenceKind::Direct
                } else {
                    InfluenceKind::Indirect
                };
                records.insert(LineageRecord::new(
                    d.out_idx.clone(),
                    u.in_slot,
                    u.in_idx.clone(),
                    kind,
                ));
            }
        }
    }
    Ok(LineageTable {
        records,
        completeness: upstream.completeness.weakest(&downstream.completeness),
        origin: Origin::at(
            upstream.origin.kind.weakest(downstream.origin.kind),
            upstream.origin.timestamp.max(downstream.origin.timestamp),
        ),
        output_schema: downstream.output_schema.clone(),
        input_schemas: upstream.input_schemas.clone(),
    })
}

/// Indices reachable from `indices` in one hop. Direct queries follow
/// direct records only; indirect queries follow records of both kinds.
pub fn query_table(
    t: &LineageTable,
    side: Side,
    indices: &BTreeSet<IndexTuple>,
    kind: InfluenceKind,
) -> Result<BTreeSet<IndexTuple>> {
    query_slot(t, side, 0, indices, kind)
}

pub fn query_slot(
    t: &LineageTable,
    side: Side,
    slot: usize,
    indices: &BTreeSet<IndexTuple>,
    kind: InfluenceKind,
) -> Result<BTreeSet<IndexTuple>> {
    let start_schema = match side {
        Side::Forward => t.input_schemas.get(slot).ok_or_else(|| {
            LineageError::SchemaViolation(format!("input slot {slot} does not exist"))
        })?,
        Side::Backward => &t.output_schema,
    };
    if let Some(bad) = indices.iter().find(|i| !start_schema.contains(i)) {
        return Err(LineageError::SchemaViolation(format!(
            "query index {bad} not in schema"
        )));
    }
    let matches_kind = |r: &LineageRecord| kind == InfluenceKind::Indirect || r.kind == InfluenceKind::Direct;
    Ok(t.records
        .iter()
        .filter(|r| r.in_slot == slot && matches_kind(r))
        .filter_map(|r| match side {
            Side::Forward if indices.contains(&r.in_idx) => Some(r.out_idx.clone()),
            Side::Backward if indices.contains(&r.out_idx) => Some(r.in_idx.clone()),
            _ => None,
        })
        .collect())
}

const MAGIC: &str = "XPLT1";

#[derive(Serialize, Deserialize)]
struct PayloadHeader {
    output: ContainerSchema,
    inputs: Vec<ContainerSchema>,
    completeness: KindCompleteness,
    origin: Origin,
    boxes: usize,
}

/// Range-compressed table: a JSON header line followed by one line per
/// axis-aligned box of records, with inclusive position intervals per
/// coordinate (output dims first, then input dims).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompressedTable {
    pub payload: String,
}

impl CompressedTable {
    pub fn box_count(&self) -> usize {
        self.payload.lines().skip(2).filter(|l| !l.is_empty()).count()
    }
}

type Point = Vec<usize>;

/// Splits a point set into disjoint boxes whose union is exactly the set.
fn boxes_of(points: &BTreeSet<Point>) -> Vec<(Point, Point)> {
    let mut covered: BTreeSet<&Point> = BTreeSet::new();
    let mut out = Vec::new();
    for p in points {
        if covered.contains(p) {
            continue;
        }
        let lo = p.clone();
        let mut hi = p.clone();
        for axis in (0..p.len()).rev() {
            loop {
                let mut probe_lo = lo.clone();
                let mut probe_hi = hi.clone();
                probe_lo[axis] = hi[axis] + 1;
                probe_hi[axis] = hi[axis] + 1;
                let slab_ok = box_points(&probe_lo, &probe_hi)
                    .all(|q| points.contains(&q) && !covered.contains(&q));
                if !slab_ok {
                    break;
                }
                hi[axis] += 1;
            }
        }
        for q in box_points(&lo, &hi) {
            covered.insert(points.get(&q).expect("box points come from the set"));
        }
        out.push((lo, hi));
    }
    out
}

fn box_points(lo: &[usize], hi: &[usize]) -> impl Iterator<Item = Point> {
    let shape: Vec<usize> = lo.iter().zip(hi).map(|(l, h)| h - l + 1).collect();
    let lo = lo.to_vec();
    crate::container::RowMajor::new(&shape)
        .map(move |off| off.iter().zip(&lo).map(|(o, l)| o + l).collect())
}

pub fn compress_table(t: &LineageTable) -> CompressedTable {
    let mut groups: BTreeMap<(InfluenceKind, usize), BTreeSet<Point>> = BTreeMap::new();
    for r in &t.records {
        let mut p = t
            .output_schema
            .positions(&r.out_idx)
            .expect("records are schema-valid");
        p.extend(
            t.input_schemas[r.in_slot]
                .positions(&r.in_idx)
                .expect("records are schema-valid"),
        );
        groups.entry((r.kind, r.in_slot)).or_default().insert(p);
    }
    let mut lines = Vec::new();
    for ((kind, slot), points) in &groups {
        for (lo, hi) in boxes_of(points) {
            let ranges: Vec<String> = lo.iter().zip(&hi).map(|(l, h)| format!("{l}:{h}")).collect();
            let k = match kind {
                InfluenceKind::Direct => 'D',
                InfluenceKind::Indirect => 'I',
            };
            lines.push(format!("{k} {slot} {}", ranges.join(" ")));
        }
    }
    let header = PayloadHeader {
        output: t.output_schema.clone(),
        inputs: t.input_schemas.clone(),
        completeness: t.completeness,
        origin: t.origin,
        boxes: lines.len(),
    };
    let mut payload = format!(
        "{MAGIC}\n{}\n",
        serde_json::to_string(&header).expect("header serializes")
    );
    for l in lines {
        payload.push_str(&l);
        payload.push('\n');
    }
    CompressedTable { payload }
}

pub fn decompress_table(c: &CompressedTable) -> Result<LineageTable> {
    let corrupt = |m: String| LineageError::CorruptPayload(m);
    let mut lines = c.payload.lines();
    if lines.next() != Some(MAGIC) {
        return Err(corrupt("missing XPLT1 magic".into()));
    }
    let header: PayloadHeader = serde_json::from_str(lines.next().ok_or_else(|| corrupt("missing header".into()))?)
        .map_err(|e| corrupt(format!("bad header: {e}")))?;
    let mut records = BTreeSet::new();
    let mut seen = 0;
    for line in lines.filter(|l| !l.is_empty()) {
        seen += 1;
        let mut parts = line.split(' ');
        let kind = match parts.next() {
            Some("D") => InfluenceKind::Direct,
            Some("I") => InfluenceKind::Indirect,
            other => return Err(corrupt(format!("bad kind {other:?}"))),
        };
        let slot: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| corrupt(format!("bad slot in {line:?}")))?;
        let in_schema = header
            .inputs
            .get(slot)
            .ok_or_else(|| corrupt(format!("slot {slot} out of range")))?;
        let axes: Vec<&Vec<String>> = header
            .output
            .dims
            .iter()
            .chain(in_schema.dims.iter())
            .map(|d| &d.indices)
            .collect();
        let mut lo = Vec::with_capacity(axes.len());
        let mut hi = Vec::with_capacity(axes.len());
        for (axis, part) in axes.iter().zip(parts.by_ref()) {
            let (l, h) = part
                .split_once(':')
                .and_then(|(l, h)| Some((l.parse::<usize>().ok()?, h.parse::<usize>().ok()?)))
                .ok_or_else(|| corrupt(format!("bad range {part:?}")))?;
            if l > h || h >= axis.len() {
                return Err(corrupt(format!("range {part:?} out of bounds")));
            }
            lo.push(l);
            hi.push(h);
        }
        if lo.len() != axes.len() || parts.next().is_some() {
            return Err(corrupt(format!("wrong arity in {line:?}")));
        }
        let n_out = header.output.dims.len();
        for p in box_points(&lo, &hi) {
            let label = |axis: usize| axes[axis][p[axis]].clone();
            records.insert(LineageRecord::new(
                IndexTuple((0..n_out).map(label).collect()),
                slot,
                IndexTuple((n_out..axes.len()).map(label).collect()),
                kind,
            ));
        }
    }
    if seen != header.boxes {
        return Err(corrupt(format!("expected {} boxes, found {seen}", header.boxes)));
    }
    LineageTable::build(
        records,
        header.completeness,
        header.origin,
        header.output,
        header.inputs,
    )
    .map_err(|e| corrupt(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::{Container, Dimension, Scalar};
    use proptest::prelude::*;

    fn schema(rows: usize, cols: usize) -> ContainerSchema {
        crate::fixtures::int_grid("g", rows, cols, &vec![0; rows * cols]).schema()
    }

    fn idx(r: &str, c: &str) -> IndexTuple {
        IndexTuple::new([r, c])
    }

    fn exact() -> KindCompleteness {
        KindCompleteness::both(Completeness::Exact)
    }

    fn origin() -> Origin {
        Origin::at(OriginKind::CapturedExact, 1)
    }

    #[test]
    fn build_dedups_and_validates() {
        let s = schema(2, 2);
        let empty = LineageTable::build([], exact(), origin(), s.clone(), vec![s.clone()]).unwrap();
        assert!(empty.is_empty());
        let r = LineageRecord::new(idx("0", "c0"), 0, idx("0", "c0"), InfluenceKind::Direct);
        let t = LineageTable::build([r.clone(), r.clone()], exact(), origin(), s.clone(), vec![s.clone()])
            .unwrap();
        assert_eq!(t.len(), 1);
        let bad = LineageRecord::new(idx("7", "c0"), 0, idx("0", "c0"), InfluenceKind::Direct);
        assert!(matches!(
            LineageTable::build([bad], exact(), origin(), s.clone(), vec![s]),
            Err(LineageError::SchemaViolation(_))
        ));
    }

    #[test]
    fn singleton_and_disjoint_intersections() {
        let s = schema(2, 2);
        let t = LineageTable::identity(&s, origin());
        let only = intersect_tables(std::slice::from_ref(&t)).unwrap();
        assert_eq!(only.records(), t.records());
        assert_eq!(only.completeness(), KindCompleteness::both(Completeness::OverApprox));
        let other = LineageTable::build(
            [LineageRecord::new(idx("0", "c0"), 0, idx("1", "c1"), InfluenceKind::Direct)],
            exact(),
            origin(),
            s.clone(),
            vec![s.clone()],
        )
        .unwrap();
        assert!(intersect_tables(&[t, other]).unwrap().is_empty());
        assert_eq!(intersect_tables(&[]).unwrap_err(), LineageError::EmptyInput);
    }

    #[test]
    fn unknown_poisons_intersection_claim() {
        let s = schema(1, 1);
        let t = LineageTable::identity(&s, origin());
        let u = LineageTable::unknown(origin(), s.clone(), vec![s]);
        let r = intersect_tables(&[t, u]).unwrap();
        assert_eq!(r.completeness(), KindCompleteness::both(Completeness::Unknown));
    }

    #[test]
    fn identity_is_neutral_for_composition() {
        let s = schema(2, 2);
        let t = LineageTable::build(
            [
                LineageRecord::new(idx("0", "c0"), 0, idx("0", "c1"), InfluenceKind::Indirect),
                LineageRecord::new(idx("1", "c1"), 0, idx("1", "c1"), InfluenceKind::Direct),
                LineageRecord::new(idx("1", "c1"), 0, idx("1", "c1"), InfluenceKind::Indirect),
            ],
            exact(),
            origin(),
            s.clone(),
            vec![s.clone()],
        )
        .unwrap();
        let composed = compose_tables(&LineageTable::identity(&s, origin()), &t).unwrap();
        assert_eq!(composed.records(), t.records());
    }

    #[test]
    fn direct_then_indirect_is_indirect() {
        let s = schema(1, 2);
        let up = LineageTable::build(
            [LineageRecord::new(idx("0", "c0"), 0, idx("0", "c0"), InfluenceKind::Direct)],
            exact(),
            origin(),
            s.clone(),
            vec![s.clone()],
        )
        .unwrap();
        let down = LineageTable::build(
            [LineageRecord::new(idx("0", "c1"), 0, idx("0", "c0"), InfluenceKind::Indirect)],
            exact(),
            Origin::at(OriginKind::Learnt { example_count: 3 }, 2),
            s.clone(),
            vec![s.clone()],
        )
        .unwrap();
        let c = compose_tables(&up, &down).unwrap();
        let recs: Vec<_> = c.records().iter().cloned().collect();
        assert_eq!(
            recs,
            vec![LineageRecord::new(idx("0", "c1"), 0, idx("0", "c0"), InfluenceKind::Indirect)]
        );
        assert_eq!(c.origin().kind, OriginKind::Learnt { example_count: 3 });
        let wrong = schema(2, 2);
        let mismatched = LineageTable::identity(&wrong, origin());
        assert!(matches!(
            compose_tables(&up, &mismatched),
            Err(LineageError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn empty_query_is_empty() {
        let s = schema(2, 2);
        let t = LineageTable::identity(&s, origin());
        let r = query_table(&t, Side::Backward, &BTreeSet::new(), InfluenceKind::Indirect).unwrap();
        assert!(r.is_empty());
        let bad: BTreeSet<_> = [idx("5", "c0")].into();
        assert!(query_table(&t, Side::Forward, &bad, InfluenceKind::Direct).is_err());
    }

    #[test]
    fn rectangle_compresses_to_one_box() {
        let s = schema(3, 2);
        let records = s.indices().into_iter().flat_map(|o| {
            s.indices()
                .into_iter()
                .map(move |i| LineageRecord::new(o.clone(), 0, i, InfluenceKind::Indirect))
        });
        let t = LineageTable::build(records, exact(), origin(), s.clone(), vec![s.clone()]).unwrap();
        assert_eq!(t.len(), 36);
        let c = compress_table(&t);
        assert_eq!(c.box_count(), 1);
        assert_eq!(decompress_table(&c).unwrap(), t);
    }

    #[test]
    fn empty_table_round_trips() {
        let s = schema(1, 1);
        let t = LineageTable::build([], exact(), origin(), s.clone(), vec![s]).unwrap();
        let c = compress_table(&t);
        assert_eq!(c.box_count(), 0);
        assert_eq!(decompress_table(&c).unwrap(), t);
    }

    #[test]
    fn corrupt_payloads_are_rejected() {
        let s = schema(2, 2);
        let c = compress_table(&LineageTable::identity(&s, origin()));
        for bad in [
            c.payload.replace("XPLT1", "XPLT9"),
            c.payload.replace("D 0", "Q 0"),
            c.payload.replace("I 0", "I 7"),
            c.payload.replace(" 0:0", " 0:9"),
            c.payload.lines().take(3).collect::<Vec<_>>().join("\n"),
        ] {
            assert!(matches!(
                decompress_table(&CompressedTable { payload: bad }),
                Err(LineageError::CorruptPayload(_))
            ));
        }
    }

    #[test]
    fn csv_is_sorted_with_header() {
        let s = Container::new(
            "x",
            vec![Dimension::new("rows", ["1", "0"]).unwrap()],
            vec![Scalar::Int(1), Scalar::Int(2)],
        )
        .unwrap()
        .schema();
        let t = LineageTable::identity(&s, origin());
        let text = t.to_csv();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "out_rows,in_slot,in_rows,kind");
        assert_eq!(lines[1], "0,0,0,direct");
        assert_eq!(lines.len(), 5);
    }

    /// Random table over fixed small schemas.
    pub(crate) fn arb_table(rows: usize, cols: usize) -> impl Strategy<Value = LineageTable> {
        let s = schema(rows, cols);
        let n = rows * cols;
        proptest::collection::vec((0..n, 0..n, any::<bool>()), 0..(n * n).min(60)).prop_map(move |edges| {
            let idx = s.indices();
            let records = edges.into_iter().map(|(o, i, d)| {
                LineageRecord::new(
                    idx[o].clone(),
                    0,
                    idx[i].clone(),
                    if d { InfluenceKind::Direct } else { InfluenceKind::Indirect },
                )
            });
            LineageTable::build(records, exact(), origin(), s.clone(), vec![s.clone()]).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn compression_round_trip(t in arb_table(3, 3)) {
            let back = decompress_table(&compress_table(&t)).unwrap();
            prop_assert_eq!(back, t);
        }
    }

    proptest! {
        #[test]
        fn intersection_laws(a in arb_table(2, 2), b in arb_table(2, 2), c in arb_table(2, 2)) {
            let ab = intersect_tables(&[a.clone(), b.clone()]).unwrap();
            let ba = intersect_tables(&[b.clone(), a.clone()]).unwrap();
            prop_assert_eq!(ab.records(), ba.records());
            let left = intersect_tables(&[ab, c.clone()]).unwrap();
            let right = intersect_tables(&[a.clone(), intersect_tables(&[b, c]).unwrap()]).unwrap();
            prop_assert_eq!(left.records(), right.records());
            let aa = intersect_tables(&[a.clone(), a.clone()]).unwrap();
            prop_assert_eq!(aa.records(), a.records());
        }

        #[test]
        fn composition_is_associative(a in arb_table(2, 2), b in arb_table(2, 2), c in arb_table(2, 2)) {
            let left = compose_tables(&compose_tables(&a, &b).unwrap(), &c).unwrap();
            let right = compose_tables(&a, &compose_tables(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(left.records(), right.records());
        }
    }
}
