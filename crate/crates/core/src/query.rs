//! Queries over a finished run: path lineage, tag assertions, and the two
//! applications built on them (row-wise leakage and reorder checks).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::container::{containers_equal, Container, IndexTuple};
use crate::kb::{Kb, KbError};
use crate::lineage::{
    compose_tables, query_table, Completeness, InfluenceKind, LineageError, LineageTable, Origin, OriginKind, Side,
};
use crate::ops::{Builtin, Executable, OpError};
use crate::tags::{assert_on_instance, declared_tags, enumerate_candidate_params, ConstraintTag, TagError, TagKind};
use crate::workflow::{op_level_tags, ExecSpec, NodeRun, RunRecord, WorkflowError};

#[derive(Debug, Error)]
pub enum QueryError {
    #[error("invalid path: {0}")]
    InvalidPath(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("unknown target {0:?}")]
    UnknownTarget(String),
    #[error("cannot resolve {0}")]
    Unresolved(String),
    #[error("node {node:?} failed: {source}")]
    Execution { node: String, source: OpError },
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Lineage(LineageError),
}

impl From<LineageError> for QueryError {
    fn from(e: LineageError) -> Self {
        match e {
            LineageError::SchemaViolation(m) => QueryError::SchemaViolation(m),
            other => QueryError::Lineage(other),
        }
    }
}

impl From<WorkflowError> for QueryError {
    fn from(e: WorkflowError) -> Self {
        match e {
            WorkflowError::Kb(k) => QueryError::Kb(k),
            other => QueryError::Unresolved(other.to_string()),
        }
    }
}

pub type Result<T, E = QueryError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct PathQuery {
    /// Container ids, adjacent pairs joined by one node.
    pub path: Vec<String>,
    /// Indices in the first container.
    pub indices: BTreeSet<IndexTuple>,
    pub kind: InfluenceKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// Indices in the last container.
    pub indices: BTreeSet<IndexTuple>,
    pub completeness: Completeness,
    pub origin: Origin,
}

struct Hop<'a> {
    node: &'a NodeRun,
    slot: usize,
}

/// Resolves a container path to the nodes joining it, in data-flow order.
fn resolve_path<'a>(run: &'a RunRecord, path: &[String]) -> Result<(Vec<Hop<'a>>, Side)> {
    if path.len() < 2 {
        return Err(QueryError::InvalidPath("a path needs at least two containers".into()));
    }
    for id in path {
        if !run.containers.contains_key(id) {
            return Err(QueryError::InvalidPath(format!("unknown container {id:?}")));
        }
    }
    let hop = |from: &str, to: &str| {
        run.producer(to)
            .and_then(|n| n.inputs.iter().position(|c| c == from).map(|slot| Hop { node: n, slot }))
    };
    if let Some(hops) = path.windows(2).map(|w| hop(&w[0], &w[1])).collect::<Option<Vec<_>>>() {
        return Ok((hops, Side::Forward));
    }
    if let Some(mut hops) = path.windows(2).map(|w| hop(&w[1], &w[0])).collect::<Option<Vec<_>>>() {
        hops.reverse();
        return Ok((hops, Side::Backward));
    }
    Err(QueryError::InvalidPath(format!(
        "no chain of nodes joins {}",
        path.join(" -> ")
    )))
}

/// The composed table from the first to the last container of a path, in
/// data-flow order, and the direction the path runs in.
pub fn path_table(run: &RunRecord, path: &[String]) -> Result<(LineageTable, Side)> {
    let (hops, side) = resolve_path(run, path)?;
    let mut composed: Option<LineageTable> = None;
    for h in hops {
        let t = run
            .tables
            .get(&h.node.id)
            .ok_or_else(|| QueryError::Unresolved(format!("lineage of node {:?}", h.node.id)))?
            .slot_table(h.slot)?;
        composed = Some(match composed {
            None => t,
            Some(up) => compose_tables(&up, &t)?,
        });
    }
    Ok((composed.expect("at least one hop"), side))
}

/// Entities of the last container on `q.path` linked to `q.indices` in the
/// first. A path running against the data flow answers a backward query.
pub fn prov_query(run: &RunRecord, q: &PathQuery) -> Result<QueryResult> {
    let (table, side) = path_table(run, &q.path)?;
    let indices = query_table(&table, side, &q.indices, q.kind)?;
    Ok(QueryResult {
        indices,
        completeness: table.query_completeness(q.kind),
        origin: table.origin(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Node(String),
    /// Canonical operation key.
    Op(String),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Node(n) => write!(f, "node {n}"),
            Target::Op(k) => write!(f, "op {k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum TagSource {
    Kb,
    Catalog,
    Instance,
}

impl fmt::Display for TagSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TagSource::Kb => "kb",
            TagSource::Catalog => "catalog",
            TagSource::Instance => "instance",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub holds: bool,
    pub source: TagSource,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TagAnswer {
    /// Verdict for a fully parameterized tag.
    Verdict(Evidence),
    /// Parameterizations that hold, when params were omitted.
    Satisfying(Vec<(ConstraintTag, Evidence)>),
}

impl TagAnswer {
    pub fn holds(&self) -> bool {
        match self {
            TagAnswer::Verdict(e) => e.holds,
            TagAnswer::Satisfying(list) => !list.is_empty(),
        }
    }
}

struct Resolver<'a> {
    run: Option<&'a RunRecord>,
    kb: Option<&'a Kb>,
    op_key: String,
    nodes: Vec<&'a NodeRun>,
    kb_tags: BTreeMap<ConstraintTag, Origin>,
}

impl<'a> Resolver<'a> {
    fn new(run: Option<&'a RunRecord>, kb: Option<&'a Kb>, target: &Target) -> Result<Resolver<'a>> {
        let (op_key, nodes) = match target {
            Target::Node(id) => {
                let n = run
                    .and_then(|r| r.node(id))
                    .ok_or_else(|| QueryError::UnknownTarget(id.clone()))?;
                (n.signature.op.canonical_key(), vec![n])
            }
            Target::Op(key) => {
                let nodes: Vec<&NodeRun> = run
                    .map(|r| r.nodes.iter().filter(|n| n.signature.op.canonical_key() == *key).collect())
                    .unwrap_or_default();
                (key.clone(), nodes)
            }
        };
        let kb_tags: BTreeMap<ConstraintTag, Origin> = match kb {
            Some(kb) => kb.op_tags(&op_key)?.into_iter().collect(),
            None => BTreeMap::new(),
        };
        if nodes.is_empty() && kb_tags.is_empty() {
            return Err(QueryError::UnknownTarget(op_key));
        }
        Ok(Resolver {
            run,
            kb,
            op_key,
            nodes,
            kb_tags,
        })
    }

    fn catalog(&self) -> Option<BTreeSet<ConstraintTag>> {
        if self.nodes.is_empty() || self.nodes.iter().any(|n| n.exec != ExecSpec::Builtin) {
            return None;
        }
        Builtin::from_signature(&self.nodes[0].signature.op).ok().map(|b| declared_tags(&b))
    }

    fn instance(&self, n: &NodeRun) -> Result<(&'a LineageTable, &'a Container, &'a Container)> {
        let run = self.run.expect("nodes come from a run");
        let [input] = n.inputs.as_slice() else {
            return Err(QueryError::Unresolved(format!(
                "node {:?} has {} inputs; tags describe single-input operations",
                n.id,
                n.inputs.len()
            )));
        };
        let missing = || QueryError::Unresolved(format!("run record is missing data for node {:?}", n.id));
        Ok((
            run.tables.get(&n.id).ok_or_else(missing)?,
            run.containers.get(input).ok_or_else(missing)?,
            run.containers.get(&n.output).ok_or_else(missing)?,
        ))
    }

    fn resolve(&self, tag: &ConstraintTag) -> Result<Evidence> {
        if let Some(origin) = self.kb_tags.get(tag) {
            return Ok(Evidence {
                holds: true,
                source: TagSource::Kb,
                origin: *origin,
            });
        }
        if self.catalog().is_some_and(|c| c.contains(tag)) {
            return Ok(Evidence {
                holds: true,
                source: TagSource::Catalog,
                origin: Origin::at(OriginKind::Declared, 0),
            });
        }
        if self.nodes.is_empty() {
            // the stored tag set is the complete set of tags established
            // for this operation
            let origin = self
                .kb_tags
                .values()
                .copied()
                .reduce(|a, b| Origin::at(a.kind.weakest(b.kind), a.timestamp.max(b.timestamp)))
                .expect("checked in new");
            return Ok(Evidence {
                holds: false,
                source: TagSource::Kb,
                origin,
            });
        }
        let mut holds = true;
        let mut origin: Option<Origin> = None;
        for n in &self.nodes {
            let (t, input, output) = self.instance(n)?;
            holds &= assert_on_instance(tag, t, input, output)?;
            let o = t.origin();
            origin = Some(match origin {
                None => o,
                Some(p) => Origin::at(p.kind.weakest(o.kind), p.timestamp.max(o.timestamp)),
            });
        }
        Ok(Evidence {
            holds,
            source: TagSource::Instance,
            origin: origin.expect("non-empty"),
        })
    }

    fn candidates(&self, kind: TagKind) -> BTreeSet<ConstraintTag> {
        let mut out: BTreeSet<ConstraintTag> = self.kb_tags.keys().filter(|t| t.kind() == kind).cloned().collect();
        if let Some(c) = self.catalog() {
            out.extend(c.into_iter().filter(|t| t.kind() == kind));
        }
        for n in &self.nodes {
            if let Ok((_, input, _)) = self.instance(n) {
                out.extend(enumerate_candidate_params(kind, input, &n.signature.op));
            }
        }
        out
    }
}

/// Checks `kind` (with `params`, or every parameterization when omitted)
/// against a node or an operation. Knowledge-base tags are consulted first,
/// then the builtin catalog, then the recorded lineage of the node(s).
pub fn assert_tag(
    run: Option<&RunRecord>,
    kb: Option<&Kb>,
    target: &Target,
    kind: TagKind,
    params: Option<&str>,
) -> Result<TagAnswer> {
    let r = Resolver::new(run, kb, target)?;
    log::debug!("assert {kind} on {target} (op {}), kb at {:?}", r.op_key, r.kb.map(Kb::root));
    if params.is_some() || matches!(kind, TagKind::OneToOne | TagKind::Identity) {
        let tag = ConstraintTag::with_params(kind, params)?;
        if params.is_none() {
            let ev = r.resolve(&tag)?;
            return Ok(TagAnswer::Satisfying(if ev.holds { vec![(tag, ev)] } else { vec![] }));
        }
        return r.resolve(&tag).map(TagAnswer::Verdict);
    }
    let mut out = Vec::new();
    let mut failure = None;
    for tag in r.candidates(kind) {
        match r.resolve(&tag) {
            Ok(ev) if ev.holds => out.push((tag, ev)),
            Ok(_) => {}
            Err(e) => failure = Some(e),
        }
    }
    match failure {
        Some(e) if out.is_empty() => Err(e),
        _ => Ok(TagAnswer::Satisfying(out)),
    }
}

/// Nodes that are not row-wise, i.e. fail `Slice[0]`.
pub fn row_wise(run: &RunRecord, kb: Option<&Kb>, nodes: &[String]) -> Result<BTreeSet<String>> {
    let mut offending = BTreeSet::new();
    for n in nodes {
        if !assert_tag(Some(run), kb, &Target::Node(n.clone()), TagKind::Slice, Some("0"))?.holds() {
            offending.insert(n.clone());
        }
    }
    Ok(offending)
}

/// Slice dims and Identity for a node, from operation-level knowledge when
/// any exists, else from its recorded lineage.
fn slice_identity(run: &RunRecord, kb: Option<&Kb>, node: &NodeRun) -> Result<(BTreeSet<usize>, bool)> {
    if let Some(tags) = op_level_tags(&node.signature.op, &node.exec, kb)? {
        let slices = tags
            .keys()
            .filter_map(|t| match t {
                ConstraintTag::Slice(d) => Some(*d),
                _ => None,
            })
            .collect();
        return Ok((slices, tags.contains_key(&ConstraintTag::Identity)));
    }
    let target = Target::Node(node.id.clone());
    let TagAnswer::Satisfying(slices) = assert_tag(Some(run), kb, &target, TagKind::Slice, None)? else {
        unreachable!("params omitted");
    };
    let slices = slices
        .into_iter()
        .filter_map(|(t, _)| match t {
            ConstraintTag::Slice(d) => Some(d),
            _ => None,
        })
        .collect();
    let identity = assert_tag(Some(run), kb, &target, TagKind::Identity, None)?.holds();
    Ok((slices, identity))
}

fn adjacent<'a>(run: &'a RunRecord, parent: &str, child: &str) -> Result<(&'a NodeRun, &'a NodeRun)> {
    let p = run.node(parent).ok_or_else(|| QueryError::UnknownTarget(parent.into()))?;
    let c = run.node(child).ok_or_else(|| QueryError::UnknownTarget(child.into()))?;
    if !c.inputs.contains(&p.output) {
        return Err(QueryError::InvalidPath(format!("node {parent:?} does not feed node {child:?}")));
    }
    Ok((p, c))
}

/// Whether two adjacent row-slicing, value-preserving nodes may swap: both
/// satisfy Identity and `Slice[d]` for a common dim `d`.
pub fn double_slice(run: &RunRecord, kb: Option<&Kb>, parent: &str, child: &str) -> Result<bool> {
    let (p, c) = adjacent(run, parent, child)?;
    let (p_slices, p_id) = slice_identity(run, kb, p)?;
    if p_slices.is_empty() || !p_id {
        return Ok(false);
    }
    let (c_slices, c_id) = slice_identity(run, kb, c)?;
    Ok(c_id && !p_slices.is_disjoint(&c_slices))
}

fn executable(n: &NodeRun) -> Result<Executable> {
    let err = |source| QueryError::Execution {
        node: n.id.clone(),
        source,
    };
    Ok(match &n.exec {
        ExecSpec::Builtin => Executable::Builtin(Builtin::from_signature(&n.signature.op).map_err(err)?),
        ExecSpec::External(spec) => Executable::External(spec.clone()),
    })
}

/// Executes both orders on the parent's input and compares the results.
/// Either order failing counts as a difference.
pub fn verify_reorder(run: &RunRecord, parent: &str, child: &str) -> Result<bool> {
    let (p, c) = adjacent(run, parent, child)?;
    if p.inputs.len() != 1 || c.inputs.len() != 1 {
        return Ok(false);
    }
    let input = run
        .containers
        .get(&p.inputs[0])
        .ok_or_else(|| QueryError::Unresolved(format!("input of node {parent:?}")))?;
    let (pe, ce) = (executable(p)?, executable(c)?);
    let one = |e: &Executable, x: &Container| e.run(std::slice::from_ref(x)).ok();
    let as_is = one(&pe, input).and_then(|x| one(&ce, &x));
    let swapped = one(&ce, input).and_then(|x| one(&pe, &x));
    Ok(match (as_is, swapped) {
        (Some(a), Some(b)) => containers_equal(&a, &b),
        _ => false,
    })
}
