use std::path::Path;

use famsync::crashharness::{load_trace, parse_trace, sweep, trace_to_json, HarnessConfig, TraceOp};

fn readme_example() -> String {
    let readme = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let start = readme.find("```json\n").expect("json block") + "```json\n".len();
    let len = readme[start..].find("```").unwrap();
    readme[start..start + len].to_string()
}

#[test]
fn readme_example_parses_and_survives_a_sweep() {
    let ops = parse_trace(&readme_example()).unwrap();
    assert_eq!(
        ops[0],
        TraceOp::Store {
            offset: 960,
            size: 8,
            value: 1
        }
    );
    assert_eq!(ops[7], TraceOp::SetRoot { alloc: None });
    let summary = sweep(&HarnessConfig::for_trace(&ops), &ops).unwrap();
    assert_eq!(summary.counterexamples(), 0, "{summary}");
}

#[test]
fn sample_traces_round_trip_and_pass() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("traces");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let ops = load_trace(entry.unwrap().path()).unwrap();
        assert_eq!(parse_trace(&trace_to_json(&ops)).unwrap(), ops);
        let summary = sweep(&HarnessConfig::for_trace(&ops), &ops).unwrap();
        assert_eq!(summary.counterexamples(), 0, "{summary}");
        seen += 1;
    }
    assert!(seen >= 2);
}

#[test]
fn unknown_ops_and_missing_args_are_rejected() {
    assert!(parse_trace(r#"[{"op": "flush"}]"#).is_err());
    assert!(parse_trace(r#"[{"op": "write", "args": {"offset": 0}}]"#).is_err());
    assert!(parse_trace(r#"{"op": "sync"}"#).is_err());
}
