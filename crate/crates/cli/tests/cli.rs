use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const BIN: &str = env!("CARGO_BIN_EXE_xprov");

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/people")
}

fn xprov(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("XPROV_KB")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        fs::copy(data_dir().join("d0.json"), dir.path().join("d0.json")).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> String {
        self.dir.path().join(rel).to_string_lossy().into_owned()
    }

    fn pipeline(&self) -> Value {
        serde_json::from_str(&fs::read_to_string(data_dir().join("pipeline.json")).unwrap()).unwrap()
    }

    fn write_workflow(&self, name: &str, doc: &Value) -> String {
        let p = self.path(name);
        fs::write(&p, serde_json::to_string_pretty(doc).unwrap()).unwrap();
        p
    }

    fn run(&self, wf: &str, out: &str, extra: &[&str]) -> Output {
        let (kb, out) = (self.path("kb"), self.path(out));
        let mut args = vec!["run", wf, "--kb", &kb, "--out", &out];
        args.extend_from_slice(extra);
        xprov(&args)
    }
}

fn pipeline_run(ws: &Workspace) -> String {
    let wf = ws.write_workflow("wf.json", &ws.pipeline());
    let o = ws.run(&wf, "run1", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    ws.path("run1")
}

#[test]
fn run_populates_the_run_directory_and_warms_the_kb() {
    let ws = Workspace::new();
    let wf = ws.write_workflow("wf.json", &ws.pipeline());
    let cold = ws.run(&wf, "run1", &["--capture", "oracle"]);
    assert_eq!(code(&cold), 0);
    let text = stdout(&cold);
    assert!(text.contains("node=scale resolution=analytic origin=captured-exact completeness=exact"));
    assert!(text.ends_with("kb_hits=0 captures=3 capture_executions=0\n"), "{text}");
    for f in ["run.json", "containers/D3.json", "lineage/filter.csv", "lineage/filter.xplt"] {
        assert!(Path::new(&ws.path("run1")).join(f).exists(), "{f}");
    }
    let warm = ws.run(&wf, "run2", &["--capture", "oracle"]);
    assert!(stdout(&warm).ends_with("kb_hits=3 captures=0 capture_executions=0\n"));
}

#[test]
fn run_reads_kb_and_policy_from_config() {
    let ws = Workspace::new();
    let wf = ws.write_workflow("wf.json", &ws.pipeline());
    let cfg = ws.path("cfg.toml");
    fs::write(&cfg, format!("kb = {:?}\ncapture = \"learn\"\n[learn]\nrng_seed = 7\n", ws.path("kb"))).unwrap();
    let out = ws.path("r");
    let o = xprov(&["run", &wf, "--out", &out, "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(&cfg, "[learn]\nn_subsets = 0\n").unwrap();
    assert_eq!(code(&xprov(&["run", &wf, "--out", &out, "--config", &cfg, "--kb", "k"])), 2);
    fs::write(&cfg, "unknown = 1\n").unwrap();
    assert_eq!(code(&xprov(&["run", &wf, "--out", &out, "--config", &cfg, "--kb", "k"])), 2);
}

#[test]
fn run_parse_and_execution_errors() {
    let ws = Workspace::new();
    assert_eq!(code(&ws.run(&ws.path("missing.json"), "r", &[])), 2);
    let wf = ws.write_workflow("wf.json", &ws.pipeline());
    let out = ws.path("r");
    assert_eq!(code(&xprov(&["run", &wf, "--out", &out])), 2, "no kb given");

    let mut cyclic = ws.pipeline();
    cyclic["nodes"][0]["inputs"] = json!(["D3"]);
    assert_eq!(code(&ws.run(&ws.write_workflow("c.json", &cyclic), "r", &[])), 2);

    let mut dangling = ws.pipeline();
    dangling["nodes"][1]["inputs"] = json!(["D9"]);
    let o = ws.run(&ws.write_workflow("d.json", &dangling), "r", &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("D9"));

    let mut failing = ws.pipeline();
    failing["nodes"][1]["exec"] = json!({"external": {"command": "false"}});
    let o = ws.run(&ws.write_workflow("f.json", &failing), "r", &[]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("filter"));

    let mut bad_param = ws.pipeline();
    bad_param["nodes"][2]["op"]["params"]["columns"] = json!(["Name"]);
    assert_eq!(code(&ws.run(&ws.write_workflow("p.json", &bad_param), "r", &[])), 3);
}

#[test]
fn query_output_and_errors() {
    let ws = Workspace::new();
    let run = pipeline_run(&ws);
    let o = xprov(&["query", &run, "--path", "D0,D1,D2", "--index", "(0,Age)", "--kind", "direct"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o), "(0,Age)\ncount=1 kind=direct origin=captured-exact completeness=exact\n");
    let dropped = xprov(&["query", &run, "--path", "D0,D1,D2", "--index", "(2,Age)"]);
    assert_eq!(stdout(&dropped), "count=0 kind=indirect origin=captured-exact completeness=exact\n");
    let back = xprov(&["query", &run, "--path", "D1,D0", "--index", "(0,Age)", "--kind", "direct"]);
    assert_eq!(stdout(&back).lines().next(), Some("(0,Age)"));
    assert_eq!(code(&xprov(&["query", &run, "--path", "D0,D1", "--index", ""])), 4);
    assert_eq!(code(&xprov(&["query", &run, "--path", "D0,D1", "--index", "(0,Age"])), 4);
    assert_eq!(code(&xprov(&["query", &run, "--path", "D0,D2", "--index", "(0,Age)"])), 4);
    assert_eq!(code(&xprov(&["query", &run, "--path", "D0", "--index", "(0,Age)"])), 4);
    assert_eq!(code(&xprov(&["query", &ws.path("nope"), "--path", "D0,D1", "--index", "(0,Age)"])), 2);
}

#[test]
fn query_reports_unknown_completeness() {
    let ws = Workspace::new();
    let mut doc = ws.pipeline();
    doc["nodes"][1]["op"] = json!({"namespace": "ext", "name": "copy"});
    doc["nodes"][1]["exec"] = json!({"external": {"command": "cp"}});
    let wf = ws.write_workflow("wf.json", &doc);
    let o = ws.run(&wf, "run", &["--capture", "declared-only"]);
    assert!(stdout(&o).contains("node=filter resolution=unknown origin=declared completeness=unknown records=0"));
    let q = xprov(&["query", &ws.path("run"), "--path", "D0,D1,D2,D3", "--index", "(0,Age)"]);
    assert_eq!(code(&q), 0);
    assert_eq!(stdout(&q), "count=0 kind=indirect origin=declared completeness=unknown\n");
    let a = xprov(&["assert", &ws.path("run"), "--node", "filter", "--tag", "Slice[0]"]);
    assert_eq!(code(&a), 4);
}

#[test]
fn assert_verdicts() {
    let ws = Workspace::new();
    let run = pipeline_run(&ws);
    let o = xprov(&["assert", &run, "--node", "scale", "--tag", "Slice", "--params", "0"]);
    assert_eq!((code(&o), stdout(&o)), (0, "false source=instance origin=captured-exact\n".into()));
    let o = xprov(&["assert", &run, "--node", "filter", "--tag", "Slice"]);
    assert_eq!(stdout(&o), "Slice[0] source=catalog origin=declared\n");
    let o = xprov(&["assert", &run, "--node", "dropna", "--tag", "Identity"]);
    assert_eq!(stdout(&o), "Identity source=catalog origin=declared\n");
    let o = xprov(&["assert", &run, "--node", "scale", "--tag", "Identity"]);
    assert_eq!(stdout(&o), "none\n");
    assert_eq!(code(&xprov(&["assert", &run, "--node", "nope", "--tag", "Slice"])), 4);
    assert_eq!(code(&xprov(&["assert", &run, "--node", "scale", "--tag", "Sliced"])), 4);
    assert_eq!(code(&xprov(&["assert", &run, "--tag", "Slice"])), 2);
}

#[test]
fn assert_against_the_kb_alone() {
    let ws = Workspace::new();
    let kb = ws.path("kb");
    let o = xprov(&["kb", "--kb", &kb, "declare", "ext.rows()", "Slice[0]", "Identity"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = xprov(&["assert", "--kb", &kb, "--op", "ext.rows()", "--tag", "Slice[0]"]);
    assert_eq!(stdout(&o), "true source=kb origin=declared\n");
    let o = xprov(&["assert", "--kb", &kb, "--op", "ext.rows()", "--tag", "Slice[1]"]);
    assert_eq!(stdout(&o), "false source=kb origin=declared\n");
    assert_eq!(code(&xprov(&["assert", "--kb", &kb, "--op", "ext.other()", "--tag", "Slice[1]"])), 4);
    assert_eq!(code(&xprov(&["kb", "--kb", &kb, "declare", "ext.rows()", "Bogus"])), 2);
}

#[test]
fn leakage_report() {
    let ws = Workspace::new();
    let run = pipeline_run(&ws);
    let o = xprov(&["check-leakage", &run]);
    assert_eq!(code(&o), 1);
    assert_eq!(
        stdout(&o),
        "not-row-wise node=scale op=sklearn.minmax_scale(columns=[\"Age\"])\nleakage-risk nodes=1\n"
    );
    let mut clean = ws.pipeline();
    clean["nodes"].as_array_mut().unwrap().pop();
    let wf = ws.write_workflow("clean.json", &clean);
    ws.run(&wf, "clean", &[]);
    let o = xprov(&["check-leakage", &ws.path("clean")]);
    assert_eq!((code(&o), stdout(&o)), (0, "clean\n".into()));
}

#[test]
fn reorder_report() {
    let ws = Workspace::new();
    let run = pipeline_run(&ws);
    let o = xprov(&["check-reorder", &run, "--parent", "dropna", "--child", "filter"]);
    assert_eq!((code(&o), stdout(&o)), (0, "valid parent=dropna child=filter\n".into()));
    let o = xprov(&["check-reorder", &run, "--parent", "dropna", "--child", "filter", "--verify"]);
    assert_eq!(stdout(&o), "valid parent=dropna child=filter outputs_equal=true\n");
    let o = xprov(&["check-reorder", &run, "--parent", "filter", "--child", "scale", "--verify"]);
    assert_eq!((code(&o), stdout(&o)), (0, "invalid parent=filter child=scale outputs_equal=false\n".into()));
    assert_eq!(code(&xprov(&["check-reorder", &run, "--parent", "dropna", "--child", "scale"])), 4);
    assert_eq!(code(&xprov(&["check-reorder", &run, "--parent", "x", "--child", "scale"])), 4);
}

#[test]
fn kb_listing() {
    let ws = Workspace::new();
    let kb = ws.path("kb");
    let empty = xprov(&["kb", "--kb", &kb, "list"]);
    assert_eq!((code(&empty), stdout(&empty)), (0, String::new()));
    pipeline_run(&ws);
    let list = stdout(&xprov(&["kb", "--kb", &kb, "list"]));
    let files: Vec<&str> = list.lines().map(|l| l.split(' ').next().unwrap()).collect();
    assert_eq!(files, ["00000003.json", "00000002.json", "00000001.json"]);
    let key = list.lines().last().unwrap().split(' ').nth(1).unwrap().strip_prefix("key=").unwrap();
    let show = xprov(&["kb", "--kb", &kb, "show", key]);
    assert_eq!(code(&show), 0);
    assert!(stdout(&show).contains("table file=00000001.xplt records=24"));
    assert_eq!(code(&xprov(&["kb", "--kb", &kb, "show", "nothing"])), 4);
    assert_eq!(code(&xprov(&["kb", "list"])), 2);

    fs::write(ws.dir.path().join("kb/entries/00000002.json"), "{").unwrap();
    let o = xprov(&["kb", "--kb", &kb, "list"]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("00000002.json"));
}

#[test]
fn kb_path_from_environment() {
    let ws = Workspace::new();
    let wf = ws.write_workflow("wf.json", &ws.pipeline());
    let out = ws.path("r");
    let o = Command::new(BIN)
        .args(["run", &wf, "--out", &out])
        .env("XPROV_KB", ws.path("envkb"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(ws.dir.path().join("envkb/index.json").exists());
}

#[test]
fn learnt_tags_for_a_black_box_filter() {
    let ws = Workspace::new();
    let mut doc = ws.pipeline();
    doc["nodes"][1]["op"] = json!({"namespace": "ext", "name": "myfilter"});
    doc["nodes"][1]["exec"] = json!({"external": {
        "command": format!("{BIN} exec --op filter_rows --param column=Age --param cmp=> --param value=30")
    }});
    let wf = ws.write_workflow("wf.json", &doc);
    let o = ws.run(&wf, "run", &["--capture", "learn"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("node=filter resolution=learnt origin=learnt(n="));
    let show = stdout(&xprov(&["kb", "--kb", &ws.path("kb"), "show", "ext.myfilter()"]));
    assert!(show.contains("  Slice[0] origin=learnt(n="), "{show}");
    assert!(show.contains("  Identity origin=learnt(n="), "{show}");
    let o = xprov(&["check-reorder", &ws.path("run"), "--kb", &ws.path("kb"), "--parent", "dropna", "--child", "filter"]);
    assert_eq!(stdout(&o), "valid parent=dropna child=filter\n");
}

#[test]
fn exec_runs_a_builtin_on_files() {
    let ws = Workspace::new();
    let out = ws.path("out.json");
    let o = xprov(&["exec", "--op", "dropna", &ws.path("d0.json"), &out]);
    assert_eq!(code(&o), 0);
    let doc: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(doc["dims"][0]["indices"], json!(["0", "1"]));
    assert_eq!(code(&xprov(&["exec", "--op", "nope", &ws.path("d0.json"), &out])), 3);
}

#[test]
fn stdout_is_stable_across_invocations() {
    let ws = Workspace::new();
    let run = pipeline_run(&ws);
    let args: [&[&str]; 3] = [
        &["query", &run, "--path", "D3,D2,D1,D0", "--index", "(0,Age)", "--index", "(1,Age)"],
        &["assert", &run, "--node", "filter", "--tag", "Condition"],
        &["check-leakage", &run],
    ];
    for a in args {
        assert_eq!(stdout(&xprov(a)), stdout(&xprov(a)));
    }
}
