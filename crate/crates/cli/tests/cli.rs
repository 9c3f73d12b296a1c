use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn matforge(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_matforge"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

/// The one-line JSON error printed on failure.
fn error_of(out: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("no stderr");
    let v: Value = serde_json::from_str(line).unwrap();
    v["error"].clone()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const GRAPH: &str = r#"{
  "format": "matforge-graph/1",
  "nodes": [
    {"id": 0, "type": "perlin_noise", "params": [4.0, 4, 0.5, 7]},
    {"id": 1, "type": "output_roughness", "params": []}
  ],
  "edges": [{"from": [0, 0], "to": [1, 0]}],
  "outputs": {"roughness": 1}
}"#;

fn write_graph(dir: &Path) -> std::path::PathBuf {
    let lib = matforge::OpLibrary::standard();
    let mut g = matforge::NodeGraph::new();
    let p = g.add(lib, "perlin_noise");
    let o = g.add(lib, "output_roughness");
    g.connect(p, 0, o, 0);
    let path = dir.join("g.json");
    std::fs::write(&path, g.to_json(lib)).unwrap();
    path
}

#[test]
fn validate_accepts_a_valid_graph() {
    let dir = tempfile::tempdir().unwrap();
    write_graph(dir.path());
    let out = matforge(dir.path(), &["validate", "g.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["ok"], true);
}

#[test]
fn validate_rejects_a_double_input() {
    let dir = tempfile::tempdir().unwrap();
    let mut g: Value = serde_json::from_str(GRAPH).unwrap();
    let dup = g["edges"][0].clone();
    g["edges"].as_array_mut().unwrap().push(dup);
    std::fs::write(dir.path().join("bad.json"), g.to_string()).unwrap();
    let out = matforge(dir.path(), &["validate", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["kind"], "invalid-graph");
}

#[test]
fn encode_decode_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    write_graph(dir.path());
    assert!(matforge(dir.path(), &["encode", "g.json", "--out", "t.json"]).status.success());
    assert!(dir.path().join("t.manifest.json").exists());
    assert!(matforge(dir.path(), &["decode", "t.json", "--out", "back.json"]).status.success());
    let back = read_json(&dir.path().join("back.json"));
    let types: Vec<&str> = back["nodes"].as_array().unwrap().iter().map(|n| n["type"].as_str().unwrap()).collect();
    assert_eq!(types, ["output_roughness", "perlin_noise"]);
}

#[test]
fn truncated_token_file_names_stream_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    write_graph(dir.path());
    assert!(matforge(dir.path(), &["encode", "g.json", "--out", "t.json"]).status.success());
    let text = std::fs::read_to_string(dir.path().join("t.json")).unwrap();
    let cut = text.find("\"node_seq\"").unwrap() + "\"node_seq\":[".len() + 4;
    std::fs::write(dir.path().join("cut.json"), &text[..cut]).unwrap();
    let out = matforge(dir.path(), &["decode", "cut.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_of(&out);
    assert_eq!(err["kind"], "malformed-sequence");
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("node sequence at offset 1"), "{msg}");

    // Complete JSON but a node stream without its END token.
    let mut t: Value = serde_json::from_str(&text).unwrap();
    t["node_seq"].as_array_mut().unwrap().pop();
    std::fs::write(dir.path().join("short.json"), t.to_string()).unwrap();
    let out = matforge(dir.path(), &["decode", "short.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_of(&out);
    assert_eq!(err["kind"], "malformed-sequence");
    assert!(err["message"].as_str().unwrap().contains("node"));
}

#[test]
fn unknown_subcommand_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = matforge(dir.path(), &["transmogrify"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["kind"], "unknown-subcommand");
}

#[test]
fn bad_overrides_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    write_graph(dir.path());
    for set in ["train.not_a_key=1", "train.epochs=many", "noequals"] {
        let out = matforge(dir.path(), &["--set", set, "validate", "g.json"]);
        assert_eq!(out.status.code(), Some(1), "{set}");
        assert_eq!(error_of(&out)["kind"], "config-parse-error", "{set}");
    }
    std::fs::write(dir.path().join("cfg.json"), "{ not json").unwrap();
    let out = matforge(dir.path(), &["--config", "cfg.json", "validate", "g.json"]);
    assert_eq!(error_of(&out)["kind"], "config-parse-error");
}

#[test]
fn logs_are_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    write_graph(dir.path());
    let out = matforge(dir.path(), &["render", "--graph", "g.json", "--out", "r.png", "--resolution", "16"]);
    assert!(out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let events: Vec<Value> = stderr.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(events.first().unwrap()["event"], "start");
    assert_eq!(events.last().unwrap()["event"], "done");
}

#[test]
fn config_file_and_overrides_reach_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    write_graph(dir.path());
    std::fs::write(dir.path().join("cfg.json"), r#"{"corpus": {"resolution": 24}}"#).unwrap();
    let out = matforge(
        dir.path(),
        &["--config", "cfg.json", "--set", "seed=9", "--set", "corpus.render.gamma=1.0", "render", "--graph", "g.json", "--out", "r.png"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m = read_json(&dir.path().join("r.manifest.json"));
    assert_eq!(m["seed"], 9);
    assert_eq!(m["config"]["corpus"]["resolution"], 24);
    assert_eq!(m["config"]["corpus"]["render"]["gamma"], 1.0);
    assert_eq!(m["inputs"][0], "cfg.json");
    assert_eq!(matforge::ImagePlane::read_png(dir.path().join("r.png")).unwrap().res, 24);
}

#[test]
fn smoke_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |args: &[&str]| {
        let out = matforge(d, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["corpus", "build", "--out", "c", "--base-graphs", "10", "--variants", "2", "--set", "corpus.resolution=32"]);
    let corpus = read_json(&d.join("c/manifest.json"));
    assert!(corpus["counts"]["train_records"].as_u64().unwrap() > 0);
    assert_eq!(read_json(&d.join("c/run_manifest.json"))["seed"], 0);
    let id = corpus["train_graph_ids"][0].as_u64().unwrap() as usize;
    let prompt = format!("c/{}", matforge::corpus::render_path(id, 0));

    run(&["train", "--corpus", "c", "--out", "ck", "--epochs", "1"]);
    for f in ["node.json", "edge.json", "param.json", "run_manifest.json"] {
        assert!(d.join("ck").join(f).exists(), "{f}");
    }

    run(&["generate", "--ckpt", "ck", "--image", &prompt, "--n", "3", "--seed", "4", "--out", "gen", "--set", "corpus.resolution=32"]);
    for i in 0..3 {
        assert!(d.join(format!("gen/g{i:03}.json")).exists());
        assert!(d.join(format!("gen/g{i:03}.png")).exists());
    }
    assert_eq!(read_json(&d.join("gen/run_manifest.json"))["seed"], 4);
    for i in 0..3 {
        run(&["validate", &format!("gen/g{i:03}.json")]);
    }

    run(&["generate", "--ckpt", "ck", "--uncond", "--n", "2", "--out", "uncond", "--set", "corpus.resolution=32"]);

    run(&["rank", "--prompt", &prompt, "--graphs", "gen", "--k", "2", "--report", "rank.json", "--set", "rank.resolution=32"]);
    let report = read_json(&d.join("rank.json"));
    let ranked = report["ranked"].as_array().unwrap();
    assert_eq!(ranked.len(), 3);
    assert!(ranked.iter().all(|e| e["style"].is_f64() && e["swd"].is_f64()));
    assert_eq!(report["top_k"].as_array().unwrap().len(), 2);

    run(&["optimize", "--graph", "gen/g000.json", "--target", &prompt, "--iters", "5", "--out", "opt.json", "--set", "optimize.resolution=32"]);
    let m = read_json(&d.join("opt.manifest.json"));
    assert!(m["summary"]["best_score"].as_f64().unwrap() <= m["summary"]["initial_score"].as_f64().unwrap());
    run(&["validate", "opt.json"]);

    // Autocompletion from the first generated graph's prefix.
    run(&["autocomplete", "--ckpt", "ck", "--partial", "gen/g000.json", "--image", &prompt, "--n", "2", "--out", "auto", "--set", "corpus.resolution=32"]);
    assert!(d.join("auto/g001.json").exists());
}

#[test]
fn autocomplete_requires_a_partial() {
    let dir = tempfile::tempdir().unwrap();
    let out = matforge(dir.path(), &["autocomplete", "--ckpt", "ck", "--uncond", "--out", "o"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_of(&out)["kind"], "config-parse-error");
}
