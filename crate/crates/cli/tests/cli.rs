use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use clipe_core::dataio::{read_embeddings, write_embeddings, EmbeddingDataset};
use clipe_core::heads::{encode_model, init_head_with, HeadKind};
use clipe_core::numcore::DenseMatrix;
use clipe_core::taxonomy::Taxonomy;

fn clipe(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clipe"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = clipe(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn small_synth(dir: &Path, name: &str) {
    ok(
        dir,
        &[
            "synth",
            "--classes",
            "3",
            "--per-class",
            "10",
            "--dim",
            "16",
            "--seed",
            "5",
            "--synonyms",
            "--out",
            name,
        ],
    );
}

const FAST: &[&str] = &["--hidden", "16", "--epochs", "3"];

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        ok(
            dir.path(),
            &[
                "synth",
                "--classes",
                "3",
                "--per-class",
                "100",
                "--seed",
                "7",
                "--out",
                out,
            ],
        );
    }
    for f in [
        "images.cemb",
        "images.jsonl",
        "image_captions.cemb",
        "prompts.cemb",
        "prompts.json",
    ] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    let ds = read_embeddings(dir.path().join("a/images")).unwrap();
    assert_eq!((ds.len(), ds.dim()), (300, 512));
}

#[test]
fn random_baseline_at_25() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &["baseline", "--kind", "random", "--level", "25"],
    );
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["accuracy"], 0.04);
    assert_eq!(v["percent"], "4.00");
    let out = ok(
        dir.path(),
        &["baseline", "--kind", "random", "--level", "6"],
    );
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["percent"], "16.66");
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "s");
    let out = clipe(
        dir.path(),
        &["train", "--head", "ce", "--train", "s/images", "--out", "r"],
    );
    assert_eq!(code(&out), 1);
    let out = clipe(
        dir.path(),
        &[
            "train",
            "--head",
            "contrastive",
            "--taxonomy",
            "default",
            "--train",
            "s/images",
            "--out",
            "r",
        ],
    );
    assert_eq!(code(&out), 1);
    let out = clipe(
        dir.path(),
        &["baseline", "--kind", "median", "--level", "2"],
    );
    assert_eq!(code(&out), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_clipe"))
        .args(["baseline", "--kind", "random", "--level", "2"])
        .env("CLIPE_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
    assert_eq!(code(&clipe(dir.path(), &["--help"])), 0);
}

#[test]
fn ce_zero_epochs_writes_init_head() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "s");
    ok(
        dir.path(),
        &[
            "train",
            "--head",
            "ce",
            "--taxonomy",
            "default",
            "--train",
            "s/images",
            "--epochs",
            "0",
            "--seed",
            "9",
            "--out",
            "r",
        ],
    );
    let mut expected = init_head_with(HeadKind::CrossEntropy, 16, 512, 25, 9).unwrap();
    expected.meta_mut().fingerprint = Taxonomy::parrott().fingerprint();
    let written = fs::read(dir.path().join("r/model.clipe")).unwrap();
    assert_eq!(written, encode_model(&expected).unwrap());
    assert_eq!(
        fs::read_to_string(dir.path().join("r/epochs.jsonl")).unwrap(),
        ""
    );
}

#[test]
fn contrastive_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "s");
    let mut args = vec![
        "train",
        "--head",
        "contrastive",
        "--taxonomy",
        "default",
        "--train",
        "s/images",
        "--ic-emb",
        "s/image_captions",
        "--bank",
        "s/prompts.json",
        "--bank-emb",
        "s/prompts",
        "--caption-types",
        "sc,ic,ssc",
        "--val-fraction",
        "0.3",
        "--out",
        "r",
    ];
    args.extend_from_slice(FAST);
    ok(dir.path(), &args);
    let logs = fs::read_to_string(dir.path().join("r/epochs.jsonl")).unwrap();
    assert!(!logs.is_empty());
    for line in logs.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for key in ["epoch", "train_loss", "val_loss", "lr", "wall_time_s"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/run_manifest.json")).unwrap())
            .unwrap();
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["train"]["batch_size"], 8);
    let inputs = m["inputs"].as_object().unwrap();
    assert!(inputs.keys().any(|k| k.ends_with("images.cemb")));
    assert!(inputs.keys().any(|k| k.ends_with("prompts.json")));
    assert!(inputs.values().all(|h| h.as_str().unwrap().len() == 64));

    let out = ok(
        dir.path(),
        &[
            "eval",
            "--model",
            "r/model.clipe",
            "--data",
            "s/images",
            "--taxonomy",
            "default",
            "--bank",
            "s/prompts.json",
            "--bank-emb",
            "s/prompts",
            "--level",
            "2",
            "--out",
            "e",
        ],
    );
    assert!(out.starts_with("valence (2 classes): accuracy"));
    let csv = fs::read_to_string(dir.path().join("e/confusion_valence.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "positive,negative");
    let preds = fs::read_to_string(dir.path().join("e/predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 30);
}

#[test]
fn training_is_bit_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "s");
    for out in ["r1", "r2"] {
        let mut args = vec![
            "train",
            "--head",
            "ce",
            "--taxonomy",
            "default",
            "--train",
            "s/images",
            "--seed",
            "4",
            "--out",
            out,
        ];
        args.extend_from_slice(FAST);
        ok(dir.path(), &args);
    }
    let read = |p: &str| fs::read(dir.path().join(p)).unwrap();
    assert_eq!(read("r1/model.clipe"), read("r2/model.clipe"));
    let strip = |p: &str| -> Vec<serde_json::Value> {
        String::from_utf8(read(p))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_s");
                v
            })
            .collect()
    };
    assert_eq!(strip("r1/epochs.jsonl"), strip("r2/epochs.jsonl"));
}

const EIGHT: &str = r#"{
  "valence_clusters": {"positive": ["amusement", "awe", "contentment", "excitement"],
                       "negative": ["anger", "disgust", "fear", "sadness"]},
  "primaries": {"amusement": ["amusement"], "awe": ["awe"], "contentment": ["contentment"],
                "excitement": ["excitement"], "anger": ["anger"], "disgust": ["disgust"],
                "fear": ["fear"], "sadness": ["sadness"]}
}"#;

#[test]
fn cross_taxonomy_ce_is_x() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "s");
    fs::write(dir.path().join("eight.json"), EIGHT).unwrap();
    ok(
        dir.path(),
        &[
            "synth",
            "--taxonomy",
            "eight.json",
            "--classes",
            "8",
            "--per-class",
            "3",
            "--dim",
            "16",
            "--out",
            "fi",
        ],
    );
    ok(
        dir.path(),
        &[
            "train",
            "--head",
            "ce",
            "--taxonomy",
            "default",
            "--train",
            "s/images",
            "--epochs",
            "1",
            "--hidden",
            "8",
            "--out",
            "ce",
        ],
    );

    let out = clipe(
        dir.path(),
        &[
            "eval",
            "--model",
            "ce/model.clipe",
            "--data",
            "fi/images",
            "--taxonomy",
            "eight.json",
            "--model-taxonomy",
            "default",
            "--out",
            "e",
        ],
    );
    assert_eq!(code(&out), 2);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("valence (2 classes): accuracy"));
    assert!(stdout.contains("fine (8 classes): X"));
    let rec: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("e/report_fine.json")).unwrap())
            .unwrap();
    assert_eq!(rec["status"], "X");

    let out = clipe(
        dir.path(),
        &[
            "eval",
            "--model",
            "ce/model.clipe",
            "--data",
            "fi/images",
            "--taxonomy",
            "eight.json",
            "--out",
            "e2",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("taxonomy mismatch"));

    fs::write(
        dir.path().join("plan.json"),
        r#"{"models": [{"name": "zs"}, {"name": "ce", "model": "ce/model.clipe"}],
            "datasets": [{"name": "FI", "data": "fi/images", "taxonomy": "eight.json",
                          "bank": "fi/prompts.json", "bank_emb": "fi/prompts", "levels": ["2", "fine"]}]}"#,
    )
    .unwrap();
    ok(dir.path(), &["cross", "--plan", "plan.json", "--out", "x"]);
    let csv = fs::read_to_string(dir.path().join("x/cross.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "model,FI (2),FI (8)");
    assert!(lines[2].starts_with("ce,") && lines[2].ends_with(",X"));
    assert!(!lines[1].contains('X'));
}

#[test]
fn data_and_numeric_errors() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "s");
    let cemb = dir.path().join("s/images.cemb");
    let bytes = fs::read(&cemb).unwrap();
    fs::write(dir.path().join("s/cut.cemb"), &bytes[..bytes.len() - 3]).unwrap();
    fs::copy(
        dir.path().join("s/images.jsonl"),
        dir.path().join("s/cut.jsonl"),
    )
    .unwrap();
    let out = clipe(
        dir.path(),
        &[
            "baseline", "--kind", "majority", "--level", "2", "--data", "s/cut",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("truncated payload"));

    let ds = read_embeddings(dir.path().join("s/images")).unwrap();
    let mut data = ds.vectors().clone();
    data.row_mut(0).iter_mut().for_each(|v| *v = 0.0);
    let zeroed = EmbeddingDataset::new(
        DenseMatrix::from_vec(ds.len(), ds.dim(), data.into_vec()).unwrap(),
        ds.manifest().to_vec(),
    )
    .unwrap();
    write_embeddings(&zeroed, dir.path().join("s/zero")).unwrap();
    let out = clipe(
        dir.path(),
        &[
            "zeroshot",
            "--data",
            "s/zero",
            "--taxonomy",
            "default",
            "--bank",
            "s/prompts.json",
            "--bank-emb",
            "s/prompts",
            "--out",
            "z",
        ],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn zeroshot_and_ablation_grids() {
    let dir = tempfile::tempdir().unwrap();
    small_synth(dir.path(), "s");
    let out = ok(
        dir.path(),
        &[
            "zeroshot",
            "--data",
            "s/images",
            "--taxonomy",
            "default",
            "--bank",
            "s/prompts.json",
            "--bank-emb",
            "s/prompts",
            "--level",
            "2",
            "--out",
            "z",
        ],
    );
    assert_eq!(out.lines().count(), 1);

    let mut args = vec![
        "ablate",
        "--taxonomy",
        "default",
        "--train",
        "s/images",
        "--ic-emb",
        "s/image_captions",
        "--val-fraction",
        "0.3",
        "--test",
        "s/images",
        "--bank",
        "s/prompts.json",
        "--bank-emb",
        "s/prompts",
        "--out",
        "a",
    ];
    args.extend_from_slice(FAST);
    ok(dir.path(), &args);
    let csv = fs::read_to_string(dir.path().join("a/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0], "model,images (2),images (6),images (25)");
    assert!(rows[1].starts_with("CLIP-E Contrastive (SC),"));
    assert!(rows[5].starts_with("CLIP-E Contrastive (SC + IC + SSC),"));
}

#[test]
fn expand_prompts_lists_every_class() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["expand-prompts", "--out", "sc.json"]);
    ok(
        dir.path(),
        &["expand-prompts", "--synonyms", "--out", "all.json"],
    );
    let sc: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("sc.json")).unwrap()).unwrap();
    let all: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("all.json")).unwrap()).unwrap();
    assert_eq!(sc.as_array().unwrap().len(), 25);
    assert_eq!(all.as_array().unwrap().len(), 25 * 6);
    assert!(sc
        .as_array()
        .unwrap()
        .iter()
        .any(|e| e["prompt"] == "a photo that seems to express contentment"));
}
