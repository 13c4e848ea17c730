use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use xprov_core::kb::{Kb, KbError, Payload};
use xprov_core::learn::{LearnConfig, LearnError};
use xprov_core::lineage::{InfluenceKind, KindCompleteness, Origin, OriginKind};
use xprov_core::ops::{execute, OpError, OperationSignature, ParamValue};
use xprov_core::query::{
    assert_tag, double_slice, prov_query, row_wise, verify_reorder, PathQuery, QueryError, TagAnswer, Target,
};
use xprov_core::tags::{ConstraintTag, TagError, TagKind};
use xprov_core::workflow::{load_workflow, run_workflow, CapturePolicy, RunOptions, RunRecord, WorkflowError};
use xprov_core::{Container, IndexTuple, Scalar};

// A closed stdout (e.g. piped into `head`) ends the process quietly.
macro_rules! out {
    ($($t:tt)*) => {
        emit(format_args!($($t)*))
    };
}

fn emit(args: fmt::Arguments<'_>) {
    use std::io::Write;
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout.write_fmt(args).and_then(|_| stdout.write_all(b"\n")) {
        if e.kind() == std::io::ErrorKind::BrokenPipe {
            std::process::exit(0);
        }
    }
}

const EXIT_FINDING: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_EXECUTION: u8 = 3;
const EXIT_RESOLUTION: u8 = 4;

/// Fine-grained lineage for array workflows.
#[derive(Parser)]
#[command(name = "xprov", version)]
struct Cli {
    /// More log output (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct KbArg {
    /// Knowledge base directory.
    #[arg(long, env = "XPROV_KB")]
    kb: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Capture {
    DeclaredOnly,
    Oracle,
    Learn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Direct,
    Indirect,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a workflow and record lineage for every node.
    Run {
        workflow: PathBuf,
        #[command(flatten)]
        kb: KbArg,
        /// Capture policy for nodes without known lineage.
        #[arg(long, value_enum)]
        capture: Option<Capture>,
        /// Run directory to write.
        #[arg(long)]
        out: PathBuf,
        /// TOML file with `kb`, `capture` and a `[learn]` table.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Lineage between entities along a container path.
    Query {
        run: PathBuf,
        /// Comma-separated container ids.
        #[arg(long, value_delimiter = ',', required = true)]
        path: Vec<String>,
        /// Index tuple such as `(0,Age)`; repeatable.
        #[arg(long = "index", required = true)]
        indices: Vec<String>,
        #[arg(long, value_enum, default_value = "indirect")]
        kind: Kind,
    },
    /// Check a lineage-constraint tag on a node or an operation.
    Assert {
        /// Run directory; optional with `--op`.
        run: Option<PathBuf>,
        #[command(flatten)]
        kb: KbArg,
        #[arg(long, conflicts_with = "op", required_unless_present = "op")]
        node: Option<String>,
        /// Canonical operation key.
        #[arg(long)]
        op: Option<String>,
        /// Tag kind (`Slice`) or a full tag (`Slice[0]`).
        #[arg(long)]
        tag: String,
        /// Tag parameters, e.g. `0` or `1,Age`; omit to list the ones that hold.
        #[arg(long)]
        params: Option<String>,
    },
    /// Report nodes that mix information across rows.
    CheckLeakage {
        run: PathBuf,
        #[command(flatten)]
        kb: KbArg,
    },
    /// Decide whether two adjacent nodes may swap.
    CheckReorder {
        run: PathBuf,
        #[command(flatten)]
        kb: KbArg,
        #[arg(long)]
        parent: String,
        #[arg(long)]
        child: String,
        /// Also execute both orders and compare.
        #[arg(long)]
        verify: bool,
    },
    /// Inspect or extend the knowledge base.
    Kb {
        #[command(flatten)]
        kb: KbArg,
        #[command(subcommand)]
        action: KbAction,
    },
    /// Run one builtin on container files: `exec --op NAME <in>... <out>`.
    #[command(hide = true)]
    Exec {
        #[arg(long)]
        op: String,
        #[arg(long, default_value = "builtin")]
        namespace: String,
        /// `key=value`; values are read as JSON when they parse.
        #[arg(long = "param")]
        params: Vec<String>,
        #[arg(required = true, num_args = 2..)]
        files: Vec<PathBuf>,
    },
}

#[derive(Subcommand)]
enum KbAction {
    /// All entries, newest first.
    List,
    /// Entries under one key, newest first.
    Show { key: String },
    /// Record tags for an operation key.
    Declare {
        key: String,
        #[arg(required = true)]
        tags: Vec<String>,
    },
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    kb: Option<PathBuf>,
    capture: Option<CapturePolicy>,
    learn: LearnConfig,
}

/// An error with a fixed exit code.
#[derive(Debug)]
struct Coded(u8, String);

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Coded {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Coded(EXIT_USAGE, msg.into()).into()
}

fn unresolved(msg: impl Into<String>) -> anyhow::Error {
    Coded(EXIT_RESOLUTION, msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(Coded(code, _)) = cause.downcast_ref() {
            return *code;
        }
        if let Some(e) = cause.downcast_ref::<WorkflowError>() {
            return match e {
                WorkflowError::Parse(_)
                | WorkflowError::CycleDetected(_)
                | WorkflowError::UnknownContainerRef { .. }
                | WorkflowError::DuplicateId(_)
                | WorkflowError::Read { .. } => EXIT_USAGE,
                _ => EXIT_EXECUTION,
            };
        }
        if let Some(e) = cause.downcast_ref::<QueryError>() {
            return match e {
                QueryError::Execution { .. } | QueryError::Kb(_) => EXIT_EXECUTION,
                _ => EXIT_RESOLUTION,
            };
        }
        if cause.is::<TagError>() {
            return EXIT_RESOLUTION;
        }
        if cause.is::<LearnError>() || cause.is::<toml::de::Error>() {
            return EXIT_USAGE;
        }
        if cause.is::<KbError>() || cause.is::<OpError>() {
            return EXIT_EXECUTION;
        }
    }
    EXIT_EXECUTION
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match dispatch(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(command: Command) -> Result<u8> {
    match command {
        Command::Run {
            workflow,
            kb,
            capture,
            out,
            config,
        } => cmd_run(&workflow, kb, capture, &out, config.as_deref()),
        Command::Query {
            run,
            path,
            indices,
            kind,
        } => cmd_query(&run, path, &indices, kind),
        Command::Assert {
            run,
            kb,
            node,
            op,
            tag,
            params,
        } => cmd_assert(run.as_deref(), kb, node, op, &tag, params.as_deref()),
        Command::CheckLeakage { run, kb } => cmd_check_leakage(&run, kb),
        Command::CheckReorder {
            run,
            kb,
            parent,
            child,
            verify,
        } => cmd_check_reorder(&run, kb, &parent, &child, verify),
        Command::Kb { kb, action } => cmd_kb(kb, action),
        Command::Exec {
            op,
            namespace,
            params,
            files,
        } => cmd_exec(&namespace, &op, &params, &files),
    }
}

fn open_kb(arg: &KbArg) -> Result<Option<Kb>> {
    arg.kb.as_ref().map(|p| Kb::open(p).map_err(Into::into)).transpose()
}

fn load_run(dir: &Path) -> Result<RunRecord> {
    RunRecord::load(dir).with_context(|| format!("cannot load run directory {}", dir.display()))
}

fn fmt_origin(o: &Origin) -> String {
    o.kind.to_string()
}

fn fmt_completeness(c: &KindCompleteness) -> String {
    if c.direct == c.indirect {
        c.direct.to_string()
    } else {
        format!("direct:{},indirect:{}", c.direct, c.indirect)
    }
}

fn cmd_run(workflow: &Path, kb: KbArg, capture: Option<Capture>, out: &Path, config: Option<&Path>) -> Result<u8> {
    let file_cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| usage(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str::<FileConfig>(&text).with_context(|| format!("invalid config {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    file_cfg.learn.validate().context("invalid [learn] settings")?;
    let kb_dir = kb
        .kb
        .or(file_cfg.kb)
        .ok_or_else(|| usage("no knowledge base: pass --kb or set XPROV_KB"))?;
    let policy = match capture {
        Some(Capture::DeclaredOnly) => CapturePolicy::DeclaredOnly,
        Some(Capture::Oracle) => CapturePolicy::Oracle,
        Some(Capture::Learn) => CapturePolicy::Learn,
        None => file_cfg.capture.unwrap_or_default(),
    };
    let dag = load_workflow(workflow)?;
    let kb = Kb::open(&kb_dir)?;
    let opts = RunOptions {
        policy,
        learn: file_cfg.learn,
    };
    let record = run_workflow(&dag, &kb, &opts)?;
    record.save(out)?;
    for n in &record.nodes {
        let resolution = serde_json::to_value(n.resolution)?;
        out!(
            "node={} resolution={} origin={} completeness={} records={}",
            n.id,
            resolution.as_str().unwrap_or_default(),
            fmt_origin(&n.origin),
            fmt_completeness(&n.completeness),
            record.tables[&n.id].len()
        );
    }
    let s = &record.stats;
    log::info!("kb hits: {}, new captures: {}", s.kb_hits, s.captures);
    out!(
        "kb_hits={} captures={} capture_executions={}",
        s.kb_hits, s.captures, s.capture_executions
    );
    Ok(0)
}

fn cmd_query(run: &Path, path: Vec<String>, indices: &[String], kind: Kind) -> Result<u8> {
    let record = load_run(run)?;
    let indices = indices
        .iter()
        .map(|s| IndexTuple::parse(s).ok_or_else(|| unresolved(format!("malformed index {s:?}"))))
        .collect::<Result<BTreeSet<_>>>()?;
    let kind = match kind {
        Kind::Direct => InfluenceKind::Direct,
        Kind::Indirect => InfluenceKind::Indirect,
    };
    let result = prov_query(&record, &PathQuery { path, indices, kind })?;
    for idx in &result.indices {
        out!("{idx}");
    }
    out!(
        "count={} kind={kind} origin={} completeness={}",
        result.indices.len(),
        fmt_origin(&result.origin),
        result.completeness
    );
    Ok(0)
}

fn parse_tag_arg(tag: &str, params: Option<&str>) -> Result<(TagKind, Option<String>)> {
    if tag.contains('[') {
        if params.is_some() {
            bail!(usage("give parameters either in --tag or in --params"));
        }
        let t: ConstraintTag = tag.parse()?;
        return Ok((t.kind(), t.params()));
    }
    Ok((tag.parse()?, params.map(str::to_string)))
}

fn cmd_assert(
    run: Option<&Path>,
    kb: KbArg,
    node: Option<String>,
    op: Option<String>,
    tag: &str,
    params: Option<&str>,
) -> Result<u8> {
    let (kind, params) = parse_tag_arg(tag, params)?;
    let record = run.map(load_run).transpose()?;
    let kb = open_kb(&kb)?;
    let target = match (node, op) {
        (Some(n), _) => {
            if record.is_none() {
                bail!(usage("--node needs a run directory"));
            }
            Target::Node(n)
        }
        (None, Some(k)) => Target::Op(k),
        (None, None) => bail!(usage("pass --node or --op")),
    };
    match assert_tag(record.as_ref(), kb.as_ref(), &target, kind, params.as_deref())? {
        TagAnswer::Verdict(ev) => {
            out!("{} source={} origin={}", ev.holds, ev.source, fmt_origin(&ev.origin));
        }
        TagAnswer::Satisfying(list) if list.is_empty() => out!("none"),
        TagAnswer::Satisfying(list) => {
            for (t, ev) in list {
                out!("{t} source={} origin={}", ev.source, fmt_origin(&ev.origin));
            }
        }
    }
    Ok(0)
}

fn cmd_check_leakage(run: &Path, kb: KbArg) -> Result<u8> {
    let record = load_run(run)?;
    let kb = open_kb(&kb)?;
    let offending = row_wise(&record, kb.as_ref(), &record.order)?;
    for id in &record.order {
        if offending.contains(id) {
            let n = record.node(id).expect("ordered node exists");
            out!("not-row-wise node={id} op={}", n.signature.op);
        }
    }
    if offending.is_empty() {
        out!("clean");
        Ok(0)
    } else {
        out!("leakage-risk nodes={}", offending.len());
        Ok(EXIT_FINDING)
    }
}

fn cmd_check_reorder(run: &Path, kb: KbArg, parent: &str, child: &str, verify: bool) -> Result<u8> {
    let record = load_run(run)?;
    let kb = open_kb(&kb)?;
    let valid = double_slice(&record, kb.as_ref(), parent, child)?;
    let verdict = if valid { "valid" } else { "invalid" };
    if !verify {
        out!("{verdict} parent={parent} child={child}");
        return Ok(0);
    }
    let same = verify_reorder(&record, parent, child)?;
    out!("{verdict} parent={parent} child={child} outputs_equal={same}");
    Ok(if valid && !same { EXIT_FINDING } else { 0 })
}

fn require_kb(arg: &KbArg) -> Result<Kb> {
    open_kb(arg)?.ok_or_else(|| usage("no knowledge base: pass --kb or set XPROV_KB"))
}

fn cmd_kb(kb: KbArg, action: KbAction) -> Result<u8> {
    let kb = require_kb(&kb)?;
    match action {
        KbAction::List => {
            for e in kb.list()? {
                let what = match &e.payload {
                    Payload::Tags { tags } => format!("tags={}", tags.len()),
                    Payload::Table { records, boxes, .. } => format!("table records={records} boxes={boxes}"),
                };
                out!("{} key={} {what} origin={}", e.file, e.key, fmt_origin(&e.origin));
            }
        }
        KbAction::Show { key } => {
            let entries = kb.lookup(&key)?;
            if entries.is_empty() {
                bail!(unresolved(format!("no entries under {key:?}")));
            }
            for e in entries {
                match &e.payload {
                    Payload::Tags { tags } => {
                        out!("{} tags timestamp={}", e.file, e.timestamp);
                        for t in tags {
                            out!("  {} origin={}", t.tag, fmt_origin(&t.origin));
                        }
                    }
                    Payload::Table { file, records, boxes } => {
                        let t = kb.load_table(&e)?.expect("table payload");
                        out!(
                            "{} table file={file} records={records} boxes={boxes} origin={} completeness={} timestamp={}",
                            e.file,
                            fmt_origin(&e.origin),
                            fmt_completeness(&t.completeness()),
                            e.timestamp
                        );
                    }
                }
            }
        }
        KbAction::Declare { key, tags } => {
            let origin = Origin::now(OriginKind::Declared);
            let tags = tags
                .iter()
                .map(|t| t.parse::<ConstraintTag>().map(|t| (t, origin)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| usage(e.to_string()))?;
            let entry = kb.store_tags(&key, &tags)?;
            out!("{} key={key} tags={}", entry.file, tags.len());
        }
    }
    Ok(0)
}

fn parse_param(text: &str) -> Result<(String, ParamValue)> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| usage(format!("parameter {text:?} is not key=value")))?;
    let value = serde_json::from_str::<ParamValue>(v).unwrap_or_else(|_| ParamValue::Scalar(Scalar::str(v)));
    Ok((k.to_string(), value))
}

fn cmd_exec(namespace: &str, name: &str, params: &[String], files: &[PathBuf]) -> Result<u8> {
    let mut op = OperationSignature::new(namespace, name);
    for p in params {
        let (k, v) = parse_param(p)?;
        op = op.param(&k, v);
    }
    let (out, inputs) = files.split_last().expect("clap requires two files");
    let inputs = inputs
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            Container::from_json(&text).with_context(|| format!("invalid container {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let result = execute(&op, &inputs)?;
    fs::write(out, result.to_canonical_json()).with_context(|| format!("cannot write {}", out.display()))?;
    Ok(0)
}
