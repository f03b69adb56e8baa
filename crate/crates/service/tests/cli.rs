use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn atelier(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_atelier"))
        .current_dir(cwd)
        .env_remove("ATELIER_DATA_DIR")
        .env("RUST_LOG", "off")
        .args(args)
        .output()
        .unwrap()
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    assert_eq!(text.lines().count(), 1, "{text}");
    serde_json::from_str(&text).unwrap()
}

fn one_line_error(out: &Output, code: &str, exit: i32) {
    assert_eq!(out.status.code(), Some(exit));
    let err = String::from_utf8(out.stderr.clone()).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with(&format!("error[{code}]: ")), "{err}");
}

#[test]
fn pipeline_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = |d: &'static str| {
        vec![
            "--data-dir",
            d,
            "pipeline",
            "a red square",
            "--seed",
            "5",
            "--auto",
            "--reshuffle",
            "1",
        ]
    };
    let a = atelier(dir.path(), &args("one"));
    let b = atelier(dir.path(), &args("two"));
    let (ja, jb) = (ok_json(&a)["job"].clone(), ok_json(&b)["job"].clone());
    assert_eq!(ja["state"], "done");
    assert_eq!(ja["generated"], jb["generated"]);
    assert_eq!(ja["stylized"], jb["stylized"]);
    for h in ja["stylized"].as_array().unwrap().iter().chain([&ja["generated"]]) {
        let name = format!("{}.png", h.as_str().unwrap());
        let fa = fs::read(dir.path().join("one/artifacts").join(&name)).unwrap();
        let fb = fs::read(dir.path().join("two/artifacts").join(&name)).unwrap();
        assert_eq!(fa, fb);
    }
}

#[test]
fn explicit_style_chain_and_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let parked = ok_json(&atelier(
        dir.path(),
        &["--data-dir", "d", "pipeline", "a blue circle", "--seed", "1"],
    ))["job"]
        .clone();
    assert_eq!(parked["state"], "awaiting_style_choice");
    let recs: Vec<String> = parked["recommendation"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["style"].as_str().unwrap().to_string())
        .collect();
    let chained = ok_json(&atelier(
        dir.path(),
        &[
            "--data-dir",
            "d",
            "pipeline",
            "a blue circle",
            "--seed",
            "1",
            "--style",
            &recs[0],
            "--style",
            &recs[1],
        ],
    ))["job"]
        .clone();
    assert_eq!(chained["stylized"].as_array().unwrap().len(), 2);
    assert_eq!(chained["chosen_styles"], serde_json::json!([recs[0], recs[1]]));

    let bad = atelier(
        dir.path(),
        &["--data-dir", "d", "pipeline", "a blue circle", "--style", "no-such-style"],
    );
    one_line_error(&bad, "invalid_argument", 3);
    assert!(String::from_utf8_lossy(&bad.stderr).contains(&recs[0]));
}

#[test]
fn errors_are_one_line_with_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    one_line_error(
        &atelier(dir.path(), &["--data-dir", "d", "classify", "missing.png"]),
        "not_found",
        4,
    );
    one_line_error(&atelier(dir.path(), &["--data-dir", "d", "pipeline", "  "]), "invalid_argument", 3);
    fs::write(dir.path().join("bad.toml"), "stages = 0\n").unwrap();
    one_line_error(
        &atelier(dir.path(), &["--config", "bad.toml", "generate", "a red square"]),
        "invalid_argument",
        3,
    );
    fs::write(dir.path().join("junk.png"), b"not a png").unwrap();
    let out = atelier(dir.path(), &["--data-dir", "d", "classify", "junk.png"]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8_lossy(&out.stderr).trim_end().lines().count(), 1);
}

#[test]
fn data_dir_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_atelier"))
        .current_dir(dir.path())
        .env("ATELIER_DATA_DIR", "from-env")
        .args(["generate", "a red square", "--out", "g.png"])
        .output()
        .unwrap();
    let j = ok_json(&out);
    assert!(dir
        .path()
        .join("from-env/artifacts")
        .join(format!("{}.png", j["artifact"].as_str().unwrap()))
        .exists());
}

#[test]
fn model_commands_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[&str]| ok_json(&atelier(dir.path(), &[&["--data-dir", "d"], args].concat()));

    let g = run(&["generate", "a green triangle", "--seed", "2", "--stages", "2", "--out", "g.png"]);
    assert_eq!(g["provenance"]["seed"], 2);
    let png = fs::read(dir.path().join("g.png")).unwrap();
    assert_eq!(atelier_service::artifacts::content_hash(&png), g["artifact"].as_str().unwrap());

    let c = run(&["classify", "g.png"]);
    let probs: Vec<f64> = c["probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).collect();
    assert_eq!(probs.len(), c["genres"].as_array().unwrap().len());
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-4);

    let s = run(&[
        "stylize",
        "g.png",
        "--style-image",
        "g.png",
        "--optimize",
        "--iters",
        "3",
        "--out",
        "s.png",
    ]);
    assert_eq!(s["mode"], "optimize");
    assert!(dir.path().join("s.png").exists());
    run(&["stylize", "g.png", "--style-image", "g.png", "--out", "f.png"]);

    let syn = run(&["synth-data", "syn", "--shapes", "16", "--per-genre", "1"]);
    assert_eq!(syn["caption_records"], 16);
    let damsm = run(&["train-damsm", "syn/shapes/captions.jsonl", "--steps", "3"]);
    assert!(damsm["last_loss"].as_f64().unwrap().is_finite());
    run(&["train-gan", "syn/shapes/captions.jsonl", "--steps", "2"]);
    run(&["train-classifier", "syn/paintings/paintings.jsonl", "--epochs", "1"]);
    let st = run(&["train-styler", "syn/paintings/paintings.jsonl", "--epochs", "1", "--contents", "1"]);
    for f in [
        "damsm.ckpt",
        "generator.ckpt",
        "classifier.ckpt",
        "style-predictor.ckpt",
        "style-transfer.ckpt",
    ] {
        assert!(dir.path().join("d/models").join(f).exists(), "{f}");
    }

    // trained checkpoints are picked up on the next run
    let g2 = run(&["generate", "a green triangle", "--seed", "2", "--stages", "2"]);
    assert_ne!(g2["provenance"]["checkpoint_id"], g["provenance"]["checkpoint_id"]);

    fs::write(
        dir.path().join("ev.toml"),
        "captions = [\"a red square\", \"a blue circle\", \"a green triangle\"]\nr = 3\ncontents = 1\nrecords = \"ev.jsonl\"\n",
    )
    .unwrap();
    let ev = atelier(dir.path(), &["--data-dir", "d", "evaluate", "ev.toml"]);
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    let text = String::from_utf8(ev.stdout).unwrap();
    assert!(text.contains("R-precision") && text.contains("observed") && text.contains("unobserved"));
    assert!(text.contains(st["transfer"].as_str().unwrap()));
    let records: Vec<Value> = fs::read_to_string(dir.path().join("ev.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let metrics: Vec<&str> = records.iter().filter_map(|r| r["metric"].as_str()).collect();
    assert_eq!(metrics, ["inception_score", "r_precision", "fid"]);
    assert_eq!(records.iter().filter(|r| r["split"].is_string()).count(), 4);
}
