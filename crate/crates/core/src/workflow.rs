//! Workflow DAGs: parsing, execution in topological order and per-node
//! lineage resolution against the knowledge base.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::container::{Container, ContainerError};
use crate::kb::{Kb, KbError};
use crate::learn::{learn_lineage, LearnConfig, LearnError};
use crate::lineage::{
    compress_table, decompress_table, CompressedTable, Completeness, KindCompleteness, LineageError, LineageTable,
    Origin, OriginKind,
};
use crate::ops::{Builtin, Executable, ExternalOpSpec, NodeSignature, OpError, OperationSignature};
use crate::oracle::{influence_oracle_with_output, OracleError};
use crate::tags::{declared_tags, ConstraintTag};

#[derive(Debug, Error)]
pub enum WorkflowError {
    #[error("cannot parse workflow: {0}")]
    Parse(String),
    #[error("cycle detected through node {0:?}")]
    CycleDetected(String),
    #[error("node {node:?} references unknown container {container:?}")]
    UnknownContainerRef { node: String, container: String },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("cannot read {path}: {reason}")]
    Read { path: PathBuf, reason: String },
    #[error("node {node:?} failed: {source}")]
    Execution { node: String, source: OpError },
    #[error("lineage capture for node {node:?} failed: {reason}")]
    Capture { node: String, reason: String },
    #[error("knowledge base write failed: {0}")]
    KbWrite(KbError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("cannot write run directory {path}: {reason}")]
    Write { path: PathBuf, reason: String },
    #[error(transparent)]
    Lineage(#[from] LineageError),
}

pub type Result<T, E = WorkflowError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecSpec {
    #[default]
    Builtin,
    External(ExternalOpSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRef {
    pub id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowNode {
    pub id: String,
    pub op: OperationSignature,
    #[serde(default)]
    pub exec: ExecSpec,
    pub inputs: Vec<String>,
    pub output: String,
}

impl WorkflowNode {
    pub fn executable(&self) -> Result<Executable, OpError> {
        Ok(match &self.exec {
            ExecSpec::Builtin => Executable::Builtin(Builtin::from_signature(&self.op)?),
            ExecSpec::External(spec) => Executable::External(spec.clone()),
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
struct WorkflowDoc {
    #[serde(default)]
    containers: Vec<SourceRef>,
    nodes: Vec<WorkflowNode>,
}

/// A validated DAG. Source paths are resolved against the workflow file's
/// directory.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkflowDag {
    pub sources: Vec<SourceRef>,
    pub nodes: Vec<WorkflowNode>,
    /// Node positions in execution order.
    pub order: Vec<usize>,
}

impl WorkflowDag {
    pub fn node(&self, id: &str) -> Option<&WorkflowNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn order_ids(&self) -> Vec<&str> {
        self.order.iter().map(|&i| self.nodes[i].id.as_str()).collect()
    }
}

/// Parses and validates a JSON workflow document.
pub fn parse_workflow(text: &str, base_dir: &Path) -> Result<WorkflowDag> {
    let doc: WorkflowDoc = serde_json::from_str(text).map_err(|e| WorkflowError::Parse(e.to_string()))?;
    let mut producer: HashMap<&str, Option<usize>> = HashMap::new();
    for s in &doc.containers {
        if producer.insert(&s.id, None).is_some() {
            return Err(WorkflowError::DuplicateId(s.id.clone()));
        }
    }
    let mut node_ids = BTreeSet::new();
    for (i, n) in doc.nodes.iter().enumerate() {
        if !node_ids.insert(n.id.as_str()) || producer.insert(&n.output, Some(i)).is_some() {
            return Err(WorkflowError::DuplicateId(if node_ids.contains(n.id.as_str()) {
                n.output.clone()
            } else {
                n.id.clone()
            }));
        }
        if n.inputs.is_empty() {
            return Err(WorkflowError::Parse(format!("node {:?} has no inputs", n.id)));
        }
        if n.exec == ExecSpec::Builtin {
            Builtin::from_signature(&n.op).map_err(|e| WorkflowError::Parse(format!("node {:?}: {e}", n.id)))?;
        }
    }
    for n in &doc.nodes {
        for c in &n.inputs {
            if !producer.contains_key(c.as_str()) {
                return Err(WorkflowError::UnknownContainerRef {
                    node: n.id.clone(),
                    container: c.clone(),
                });
            }
        }
    }
    // Kahn's algorithm, ties broken by document order
    let n = doc.nodes.len();
    let mut indegree = vec![0usize; n];
    let mut users: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in doc.nodes.iter().enumerate() {
        for c in &node.inputs {
            if let Some(Some(p)) = producer.get(c.as_str()) {
                indegree[i] += 1;
                users[*p].push(i);
            }
        }
    }
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &u in &users[i] {
            indegree[u] -= 1;
            if indegree[u] == 0 {
                ready.insert(u);
            }
        }
    }
    if order.len() < n {
        let stuck = (0..n).find(|i| !order.contains(i)).unwrap();
        return Err(WorkflowError::CycleDetected(doc.nodes[stuck].id.clone()));
    }
    let sources = doc
        .containers
        .into_iter()
        .map(|s| SourceRef {
            path: base_dir.join(&s.path),
            id: s.id,
        })
        .collect();
    Ok(WorkflowDag {
        sources,
        nodes: doc.nodes,
        order,
    })
}

/// Reads and parses a workflow file.
pub fn load_workflow(path: &Path) -> Result<WorkflowDag> {
    let text = fs::read_to_string(path).map_err(|e| WorkflowError::Read {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_workflow(&text, path.parent().unwrap_or(Path::new(".")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapturePolicy {
    #[default]
    DeclaredOnly,
    Oracle,
    Learn,
}

impl std::str::FromStr for CapturePolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "declared-only" => Ok(CapturePolicy::DeclaredOnly),
            "oracle" => Ok(CapturePolicy::Oracle),
            "learn" => Ok(CapturePolicy::Learn),
            _ => Err(format!("unknown capture policy {s:?} (declared-only, oracle, learn)")),
        }
    }
}

/// How a node's lineage table was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Resolution {
    KbHit,
    Analytic,
    Extrapolated,
    Oracle,
    Learnt,
    Unknown,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub kb_hits: usize,
    /// Tables produced in this run (anything but KB hits and unknown tables).
    pub captures: usize,
    /// Operation executions spent on oracle and learning runs.
    pub capture_executions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRun {
    pub id: String,
    pub signature: NodeSignature,
    pub key: String,
    pub exec: ExecSpec,
    pub inputs: Vec<String>,
    pub output: String,
    pub resolution: Resolution,
    pub origin: Origin,
    pub completeness: KindCompleteness,
}

/// Everything a run produced: containers, per-node tables and metadata.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub order: Vec<String>,
    pub nodes: Vec<NodeRun>,
    pub containers: BTreeMap<String, Container>,
    pub tables: BTreeMap<String, LineageTable>,
    pub stats: RunStats,
}

#[derive(Serialize, Deserialize)]
struct RunDoc {
    order: Vec<String>,
    nodes: Vec<NodeRun>,
    containers: BTreeMap<String, String>,
    stats: RunStats,
}

fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

impl RunRecord {
    pub fn node(&self, id: &str) -> Option<&NodeRun> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// The node producing container `id`.
    pub fn producer(&self, id: &str) -> Option<&NodeRun> {
        self.nodes.iter().find(|n| n.output == id)
    }

    /// Writes `run.json`, `containers/*.json` and `lineage/<node>.{xplt,csv}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let werr = |path: &Path| {
            let path = path.to_path_buf();
            move |e: std::io::Error| WorkflowError::Write {
                path,
                reason: e.to_string(),
            }
        };
        for sub in ["containers", "lineage"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(werr(&p))?;
        }
        let mut files = BTreeMap::new();
        for (id, c) in &self.containers {
            let rel = format!("containers/{}.json", file_stem(id));
            let p = dir.join(&rel);
            fs::write(&p, c.to_canonical_json()).map_err(werr(&p))?;
            files.insert(id.clone(), rel);
        }
        for (node, t) in &self.tables {
            let stem = file_stem(node);
            let p = dir.join("lineage").join(format!("{stem}.xplt"));
            fs::write(&p, compress_table(t).payload).map_err(werr(&p))?;
            let p = dir.join("lineage").join(format!("{stem}.csv"));
            fs::write(&p, t.to_csv()).map_err(werr(&p))?;
        }
        let doc = RunDoc {
            order: self.order.clone(),
            nodes: self.nodes.clone(),
            containers: files,
            stats: self.stats.clone(),
        };
        let mut text = serde_json::to_string_pretty(&doc).expect("run record serializes");
        text.push('\n');
        let p = dir.join("run.json");
        fs::write(&p, text).map_err(werr(&p))
    }

    pub fn load(dir: &Path) -> Result<RunRecord> {
        let read = |p: PathBuf| {
            fs::read_to_string(&p).map_err(|e| WorkflowError::Read {
                path: p.clone(),
                reason: e.to_string(),
            })
        };
        let doc: RunDoc = serde_json::from_str(&read(dir.join("run.json"))?)
            .map_err(|e| WorkflowError::Parse(format!("run.json: {e}")))?;
        let mut containers = BTreeMap::new();
        for (id, rel) in &doc.containers {
            let c = Container::from_json(&read(dir.join(rel))?)
                .map_err(|e| WorkflowError::Parse(format!("{rel}: {e}")))?;
            containers.insert(id.clone(), c.with_id(id.clone()));
        }
        let mut tables = BTreeMap::new();
        for n in &doc.nodes {
            let payload = read(dir.join("lineage").join(format!("{}.xplt", file_stem(&n.id))))?;
            tables.insert(n.id.clone(), decompress_table(&CompressedTable { payload })?);
        }
        Ok(RunRecord {
            order: doc.order,
            nodes: doc.nodes,
            containers,
            tables,
            stats: doc.stats,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    pub policy: CapturePolicy,
    pub learn: LearnConfig,
}

fn read_source(s: &SourceRef) -> Result<Container> {
    let text = fs::read_to_string(&s.path).map_err(|e| WorkflowError::Read {
        path: s.path.clone(),
        reason: e.to_string(),
    })?;
    let c = Container::from_json(&text).map_err(|e: ContainerError| WorkflowError::Read {
        path: s.path.clone(),
        reason: e.to_string(),
    })?;
    Ok(c.with_id(s.id.clone()))
}

/// Loads sources from disk and runs the DAG.
pub fn run_workflow(dag: &WorkflowDag, kb: &Kb, opts: &RunOptions) -> Result<RunRecord> {
    let sources = dag
        .sources
        .iter()
        .map(|s| read_source(s).map(|c| (s.id.clone(), c)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    run_workflow_with(dag, sources, kb, opts)
}

/// Runs the DAG on in-memory source containers.
///
/// Lineage per node, first match wins: a KB table for the node signature;
/// analytic capture for builtins; extrapolation from KB operation tags; the
/// oracle (policy `oracle`); learning (policy `learn`); otherwise an empty
/// table of unknown completeness. Newly produced tables and learnt tags are
/// appended to the KB.
pub fn run_workflow_with(
    dag: &WorkflowDag,
    sources: BTreeMap<String, Container>,
    kb: &Kb,
    opts: &RunOptions,
) -> Result<RunRecord> {
    let mut containers = sources;
    let mut record = RunRecord {
        order: Vec::with_capacity(dag.order.len()),
        nodes: Vec::with_capacity(dag.order.len()),
        containers: BTreeMap::new(),
        tables: BTreeMap::new(),
        stats: RunStats::default(),
    };
    for &i in &dag.order {
        let node = &dag.nodes[i];
        let inputs: Vec<Container> = node
            .inputs
            .iter()
            .map(|c| {
                containers.get(c).cloned().ok_or_else(|| WorkflowError::UnknownContainerRef {
                    node: node.id.clone(),
                    container: c.clone(),
                })
            })
            .collect::<Result<_>>()?;
        let exec_err = |source| WorkflowError::Execution {
            node: node.id.clone(),
            source,
        };
        let exe = node.executable().map_err(exec_err)?;
        let output = exe.run(&inputs).map_err(exec_err)?.with_id(node.output.clone());
        let signature = NodeSignature::new(node.op.clone(), &inputs, &output);
        let key = signature.key();
        let (table, resolution) = resolve_lineage(node, &exe, &inputs, &output, &key, kb, opts, &mut record.stats)?;
        log::info!(
            "node {}: {} lineage, origin {}",
            node.id,
            serde_json::to_string(&resolution).unwrap().trim_matches('"'),
            table.origin().kind
        );
        record.nodes.push(NodeRun {
            id: node.id.clone(),
            key,
            signature,
            exec: node.exec.clone(),
            inputs: node.inputs.clone(),
            output: node.output.clone(),
            resolution,
            origin: table.origin(),
            completeness: table.completeness(),
        });
        record.order.push(node.id.clone());
        record.tables.insert(node.id.clone(), table);
        containers.insert(node.output.clone(), output);
    }
    record.containers = containers;
    Ok(record)
}

#[allow(clippy::too_many_arguments)]
fn resolve_lineage(
    node: &WorkflowNode,
    exe: &Executable,
    inputs: &[Container],
    output: &Container,
    key: &str,
    kb: &Kb,
    opts: &RunOptions,
    stats: &mut RunStats,
) -> Result<(LineageTable, Resolution)> {
    if let Some(t) = kb.latest_table(key)? {
        stats.kb_hits += 1;
        return Ok((t, Resolution::KbHit));
    }
    let capture_err = |reason: String| WorkflowError::Capture {
        node: node.id.clone(),
        reason,
    };
    let store = |t: &LineageTable| kb.store_table(key, t).map_err(WorkflowError::KbWrite);
    let single = match inputs {
        [one] => Some(one),
        _ => None,
    };

    if let (Some(b), Some(input)) = (exe.builtin(), single) {
        let t = b.capture_exact_lineage(input, output).map_err(|e| capture_err(e.to_string()))?;
        store(&t)?;
        stats.captures += 1;
        return Ok((t, Resolution::Analytic));
    }

    let op_key = node.op.canonical_key();
    let known = kb.op_tags(&op_key)?;
    if let (false, Some(input)) = (known.is_empty(), single) {
        let tags: Vec<ConstraintTag> = known.iter().map(|(t, _)| t.clone()).collect();
        let origin = known
            .iter()
            .map(|(_, o)| *o)
            .reduce(|a, b| Origin::at(a.kind.weakest(b.kind), a.timestamp.max(b.timestamp)))
            .expect("non-empty");
        let n = match origin.kind {
            OriginKind::Learnt { example_count } => example_count,
            _ => 0,
        };
        let t = crate::learn::extrapolate_lineage(&tags, input, output, n)
            .map_err(|e| capture_err(e.to_string()))?
            .with_origin(origin);
        store(&t)?;
        stats.captures += 1;
        return Ok((t, Resolution::Extrapolated));
    }

    let counter = std::sync::atomic::AtomicUsize::new(0);
    let run = |c: &Container| {
        counter.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        exe.run(std::slice::from_ref(c))
    };
    let unknown = || {
        LineageTable::unknown(
            Origin::now(OriginKind::Declared),
            output.schema(),
            inputs.iter().map(Container::schema).collect(),
        )
    };
    let outcome = match (opts.policy, single) {
        (CapturePolicy::Oracle, Some(input)) => {
            let t = influence_oracle_with_output(&run, input, output, opts.learn.domain.domain())
                .map_err(|e: OracleError| capture_err(e.to_string()))?;
            Some((t, Resolution::Oracle))
        }
        (CapturePolicy::Learn, Some(input)) => {
            let smallest = input.shape().into_iter().min().unwrap_or(0);
            if smallest < 2 {
                log::warn!("node {}: input too small to learn from, lineage unknown", node.id);
                None
            } else {
                let mut cfg = opts.learn.clone();
                if cfg.subset_size > smallest {
                    log::warn!(
                        "node {}: subset size {} clamped to {smallest} for input shape {:?}",
                        node.id,
                        cfg.subset_size,
                        input.shape()
                    );
                    cfg.subset_size = smallest;
                }
                let learnt = learn_lineage(&run, &node.op, input, output, &cfg)
                    .map_err(|e: LearnError| capture_err(e.to_string()))?;
                if !learnt.tags.is_empty() {
                    kb.store_tags(&op_key, &learnt.tags).map_err(WorkflowError::KbWrite)?;
                }
                Some((learnt.table, Resolution::Learnt))
            }
        }
        (CapturePolicy::DeclaredOnly, _) => None,
        (_, None) => {
            log::warn!("node {}: capture needs a single input, lineage unknown", node.id);
            None
        }
    };
    stats.capture_executions += counter.into_inner();
    match outcome {
        Some((t, res)) if t.completeness().direct != Completeness::Unknown => {
            store(&t)?;
            stats.captures += 1;
            Ok((t, res))
        }
        Some((t, res)) => Ok((t, res)),
        None => Ok((unknown(), Resolution::Unknown)),
    }
}

/// The operation-level tags known for a node: KB entries and, for builtins,
/// the catalog's declarations. `None` when neither source knows anything.
pub fn op_level_tags(op: &OperationSignature, exec: &ExecSpec, kb: Option<&Kb>) -> Result<Option<BTreeMap<ConstraintTag, Origin>>> {
    let mut tags = BTreeMap::new();
    if let Some(kb) = kb {
        tags.extend(kb.op_tags(&op.canonical_key())?);
    }
    if *exec == ExecSpec::Builtin {
        if let Ok(b) = Builtin::from_signature(op) {
            let declared = Origin::at(OriginKind::Declared, 0);
            for t in declared_tags(&b) {
                tags.entry(t).or_insert(declared);
            }
        }
    }
    Ok((!tags.is_empty()).then_some(tags))
}
