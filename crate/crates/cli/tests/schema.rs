use std::path::Path;
use std::process::Command;

use contextfed::eval::ExperimentConfig;
use serde_json::Value;

fn config_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/config"))
}

fn schema() -> Value {
    let text = std::fs::read_to_string(config_dir().join("experiment.schema.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Every `default` in the schema, keyed by its JSON pointer into a config.
fn defaults(node: &Value, pointer: String, out: &mut Vec<(String, Value)>) {
    if let Some(d) = node.get("default") {
        out.push((pointer.clone(), d.clone()));
    }
    if let Some(props) = node.get("properties").and_then(Value::as_object) {
        for (name, child) in props {
            defaults(child, format!("{pointer}/{name}"), out);
        }
    }
}

#[test]
fn schema_defaults_match_code_defaults() {
    let code = serde_json::to_value(ExperimentConfig::default()).unwrap();
    let mut found = Vec::new();
    defaults(&schema(), String::new(), &mut found);
    assert!(found.len() > 20);
    for (pointer, want) in found {
        let got = code.pointer(&pointer).unwrap_or_else(|| panic!("{pointer} missing from default config"));
        match (got.as_f64(), want.as_f64()) {
            (Some(a), Some(b)) => assert_eq!(a, b, "{pointer}"),
            _ => assert_eq!(got, &want, "{pointer}"),
        }
    }
}

#[test]
fn schema_lists_every_config_field() {
    let code = serde_json::to_value(ExperimentConfig::default()).unwrap();
    let s = schema();
    fn walk(code: &Value, schema: &Value, pointer: &str) {
        let Some(obj) = code.as_object() else { return };
        let Some(props) = schema.get("properties").and_then(Value::as_object) else { return };
        for (k, v) in obj {
            let child = props.get(k).unwrap_or_else(|| panic!("{pointer}/{k} not in schema"));
            walk(v, child, &format!("{pointer}/{k}"));
        }
    }
    walk(&code, &s, "");
}

#[test]
fn shipped_configs_validate() {
    for entry in std::fs::read_dir(config_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap().to_str().unwrap().ends_with(".schema.json") {
            continue;
        }
        let out = Command::new(env!("CARGO_BIN_EXE_contextfed"))
            .args(["validate-config", "--config", path.to_str().unwrap()])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}: {}", path.display(), String::from_utf8_lossy(&out.stderr));
    }
}
