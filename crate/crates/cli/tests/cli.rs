use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kgprobe::kg::{KnowledgeGraph, Split};
use kgprobe::synthetic::{synthetic_graph, SyntheticGraphConfig};

fn kgprobe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kgprobe"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = kgprobe(dir, args);
    assert!(
        out.status.success(),
        "kgprobe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_split(g: &KnowledgeGraph, split: Split, labeled: bool, path: PathBuf) {
    let mut s = String::new();
    for lt in g.split(split) {
        let line = g.format_labeled(lt);
        if labeled {
            s.push_str(&line);
        } else {
            s.push_str(line.rsplit_once('\t').unwrap().0);
        }
        s.push('\n');
    }
    fs::write(path, s).unwrap();
}

fn dataset(dir: &Path, triples: usize) {
    let g = synthetic_graph(&SyntheticGraphConfig {
        entities: 400,
        relations: 4,
        triples,
        ..Default::default()
    });
    write_split(&g, Split::Train, false, dir.join("train.txt"));
    write_split(&g, Split::Valid, true, dir.join("valid.txt"));
    write_split(&g, Split::Test, true, dir.join("test.txt"));
}

fn ingest(dir: &Path) {
    ok(
        dir,
        &[
            "ingest",
            "--train",
            "train.txt",
            "--valid",
            "valid.txt",
            "--test",
            "test.txt",
            "--out",
            "graph.bin",
        ],
    );
}

#[test]
fn composable_mock_pipeline_finds_planted_layer() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d, 5000);
    ingest(d);
    for (split, n, name) in [
        ("train", "1000", "train"),
        ("valid", "500", "valid"),
        ("test", "500", "test"),
    ] {
        ok(
            d,
            &[
                "sample",
                "--graph",
                "graph.bin",
                "--split",
                split,
                "--n-pairs",
                n,
                "--seed",
                "3",
                "--out",
                &format!("{name}.tsv"),
            ],
        );
        ok(
            d,
            &[
                "render",
                "--graph",
                "graph.bin",
                "--pairs",
                &format!("{name}.tsv"),
                "--template-id",
                "PT1",
                "--out",
                &format!("{name}.jsonl"),
            ],
        );
        ok(
            d,
            &[
                "extract",
                "--prompts",
                &format!("{name}.jsonl"),
                "--backend",
                "mock",
                "--planted",
                "5",
                "--out",
                &format!("{name}.kgph"),
            ],
        );
        ok(d, &["validate-store", "--in", &format!("{name}.kgph")]);
    }
    let first = fs::read_to_string(d.join("train.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert!(rec["text"]
        .as_str()
        .unwrap()
        .starts_with("Is it true that "));
    assert!(rec.get("id").is_some() && rec.get("label").is_some());

    ok(
        d,
        &[
            "sweep",
            "--states-train",
            "train.kgph",
            "--states-valid",
            "valid.kgph",
            "--states-test",
            "test.kgph",
            "--test-all-layers",
            "--report",
            "sweep.json",
            "--out",
            "layers.csv",
        ],
    );
    let sweep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["selected_layer"], 5);
    assert_eq!(
        fs::read_to_string(d.join("layers.csv"))
            .unwrap()
            .lines()
            .count(),
        8
    );

    ok(
        d,
        &[
            "train",
            "--states",
            "train.kgph",
            "--states-valid",
            "valid.kgph",
            "--layer",
            "auto",
            "--out",
            "model.bin",
        ],
    );
    ok(
        d,
        &[
            "eval",
            "--states-test",
            "test.kgph",
            "--model",
            "model.bin",
            "--pca",
            "pca.csv",
            "--out",
            "report.json",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["selected_layer"], 5);
    assert!(report["metrics"]["accuracy"].as_f64().unwrap() >= 0.99);
    let pca = fs::read_to_string(d.join("pca.csv")).unwrap();
    assert_eq!(pca.lines().next(), Some("id,label,x,y,z"));
    assert_eq!(pca.lines().count(), 1001);

    ok(
        d,
        &[
            "train",
            "--states",
            "train.kgph",
            "--layer",
            "2",
            "--out",
            "model2.bin",
        ],
    );
    ok(
        d,
        &[
            "eval",
            "--states-test",
            "test.kgph",
            "--model",
            "model2.bin",
            "--out",
            "report2.json",
        ],
    );
    let r2: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("report2.json")).unwrap()).unwrap();
    assert!((r2["metrics"]["accuracy"].as_f64().unwrap() - 0.5).abs() <= 0.1);
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d, 1500);
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        ingest(d);
        ok(
            d,
            &[
                "sample",
                "--graph",
                "graph.bin",
                "--n-pairs",
                "200",
                "--seed",
                "9",
                "--out",
                "p.tsv",
            ],
        );
        ok(
            d,
            &[
                "describe",
                "--graph",
                "graph.bin",
                "--pairs",
                "p.tsv",
                "--cap",
                "4",
                "--out",
                "desc.tsv",
            ],
        );
        ok(
            d,
            &[
                "render",
                "--graph",
                "graph.bin",
                "--pairs",
                "p.tsv",
                "--template-id",
                "PT2",
                "--descriptions",
                "desc.tsv",
                "--out",
                "p.jsonl",
            ],
        );
        ok(
            d,
            &[
                "extract",
                "--prompts",
                "p.jsonl",
                "--backend",
                "mock",
                "--layers",
                "1..=3",
                "--planted",
                "2",
                "--out",
                "s.kgph",
            ],
        );
        ok(
            d,
            &[
                "train", "--states", "s.kgph", "--layer", "2", "--model", "mlp", "--hidden", "8",
                "--epochs", "2", "--out", "m.bin",
            ],
        );
        ok(
            d,
            &[
                "sweep",
                "--states-train",
                "s.kgph",
                "--states-valid",
                "s.kgph",
                "--threads",
                "3",
                "--out",
                "l.csv",
            ],
        );
        snapshots.push(
            [
                "graph.bin",
                "p.tsv",
                "desc.tsv",
                "p.jsonl",
                "s.kgph",
                "m.bin",
                "l.csv",
            ]
            .map(|f| fs::read(d.join(f)).unwrap()),
        );
    }
    assert!(snapshots[0] == snapshots[1]);
    let prompts = fs::read_to_string(d.join("p.jsonl")).unwrap();
    assert!(prompts.contains(" is described as: "));
}

#[test]
fn sample_writes_two_lines_per_pair() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    dataset(d, 9000);
    ingest(d);
    ok(
        d,
        &[
            "sample",
            "--graph",
            "graph.bin",
            "--n-pairs",
            "5000",
            "--seed",
            "1",
            "--out",
            "pairs.tsv",
        ],
    );
    let text = fs::read_to_string(d.join("pairs.tsv")).unwrap();
    assert_eq!(text.lines().count(), 10_000);
    let labels: Vec<&str> = text
        .lines()
        .map(|l| l.rsplit('\t').next().unwrap())
        .collect();
    assert_eq!(labels.iter().filter(|&&l| l == "1").count(), 5000);
    assert_eq!(labels.iter().filter(|&&l| l == "0").count(), 5000);
}

#[test]
fn validate_store_exit_codes_and_json_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("p.jsonl"),
        "{\"id\":0,\"text\":\"a\",\"label\":0}\n{\"id\":1,\"text\":\"bb\",\"label\":1}\n",
    )
    .unwrap();
    ok(
        d,
        &[
            "extract",
            "--prompts",
            "p.jsonl",
            "--backend",
            "mock",
            "--layers",
            "1,2",
            "--out",
            "s.kgph",
        ],
    );
    assert_eq!(
        kgprobe(d, &["validate-store", "--in", "s.kgph"])
            .status
            .code(),
        Some(0)
    );

    let mut bytes = fs::read(d.join("s.kgph")).unwrap();
    bytes[0] = b'X';
    fs::write(d.join("bad.kgph"), &bytes).unwrap();
    let out = kgprobe(d, &["--json-errors", "validate-store", "--in", "bad.kgph"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "bad_magic");

    let good = fs::read(d.join("s.kgph")).unwrap();
    fs::write(d.join("short.kgph"), &good[..good.len() - 3]).unwrap();
    let out = kgprobe(
        d,
        &["--json-errors", "validate-store", "--in", "short.kgph"],
    );
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "truncated");

    assert_eq!(
        kgprobe(d, &["validate-store", "--in", "missing.kgph"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn run_command_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(
        d.join("run.toml"),
        r#"
task = "tc"
[data]
source = "synthetic"
entities = 300
triples = 2500
[examples]
train = 600
valid = 300
test = 300
[backend]
kind = "mock"
planted = [2]
num_layers = 5
[probe]
epochs = 30
"#,
    )
    .unwrap();
    ok(
        d,
        &[
            "run",
            "--config",
            "run.toml",
            "--set",
            "backend.planted=[3]",
            "--set",
            "probe.seed=4",
            "--out",
            "out",
        ],
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(report["selected_layer"], 3);
    assert_eq!(report["config"]["probe"]["seed"], 4);
    assert!(d.join("out/model.bin").exists());
    assert!(d.join("out/layers.csv").exists());

    let out = kgprobe(
        d,
        &[
            "--json-errors",
            "run",
            "--config",
            "run.toml",
            "--set",
            "probe.colour=1",
            "--out",
            "o2",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["chain"].to_string().contains("colour"));
}
