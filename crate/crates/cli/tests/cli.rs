use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use motalk::judge::{JudgeRequest, OfflineTransport, CRITERIA};

fn motalk(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_motalk"))
        .args(args)
        .current_dir(dir)
        .env_remove("JUDGE_ENDPOINT")
        .env_remove("JUDGE_API_KEY")
        .env_remove("JUDGE_OFFLINE_DIR")
        .env_remove("JUDGE_MODEL")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = motalk(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const SMALL: &str = "hidden = 16\nrelevance_dim = 16\nstage1_epochs = 3\nstage2_epochs = 2\n";

/// Dataset plus stage-1 and stage-2 checkpoints in `dir`.
fn trained(dir: &Path) {
    fs::write(dir.join("small.toml"), SMALL).unwrap();
    ok(
        dir,
        &[
            "gen-data",
            "--out",
            "d.jsonl",
            "--samples",
            "5",
            "--seed",
            "4",
            "--frames",
            "20",
        ],
    );
    ok(
        dir,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--stage",
            "1",
            "--config",
            "small.toml",
            "--out",
            "s1",
        ],
    );
    ok(
        dir,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--stage",
            "2",
            "--config",
            "small.toml",
            "--out",
            "s2",
            "--init",
            "s1/checkpoint.json",
        ],
    );
}

#[test]
fn gen_data_writes_header_records_and_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data",
            "--out",
            "a.jsonl",
            "--samples",
            "10",
            "--seed",
            "2",
            "--cycles-range",
            "2..5",
        ],
    );
    ok(
        d,
        &[
            "gen-data",
            "--out",
            "b.jsonl",
            "--samples",
            "10",
            "--seed",
            "2",
            "--cycles-range",
            "2..5",
        ],
    );
    let a = fs::read_to_string(d.join("a.jsonl")).unwrap();
    assert_eq!(a.lines().count(), 11);
    assert!(a.starts_with("{\"schema\":\"motalk.samples\""));
    assert_eq!(a, fs::read_to_string(d.join("b.jsonl")).unwrap());
    let vocab = fs::read_to_string(d.join("a.vocab.txt")).unwrap();
    assert!(vocab.lines().any(|w| w == "repetitions"));

    let out = motalk(d, &["gen-data", "--out", "missing/dir/x.jsonl", "--samples", "2"]);
    assert_ne!(code(&out), 0);
    assert!(!out.stderr.is_empty());
    assert_eq!(
        code(&motalk(d, &["gen-data", "--out", "c.jsonl", "--cycles-range", "5..2"])),
        1
    );
}

#[test]
fn training_writes_one_loss_row_per_epoch_and_echoes_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let s1 = fs::read_to_string(d.join("s1/loss.csv")).unwrap();
    assert_eq!(s1.lines().next(), Some("epoch,mean_loss,lr"));
    assert_eq!(s1.lines().count(), 1 + 3);
    assert_eq!(
        fs::read_to_string(d.join("s2/loss.csv")).unwrap().lines().count(),
        1 + 2
    );
    let echoed = fs::read_to_string(d.join("s2/config.toml")).unwrap();
    assert!(echoed.contains("hidden = 16") && echoed.contains("stage2_epochs = 2"));
    // Stage 2 continues from stage 1 rather than from scratch.
    let loss = |line: &str| -> f64 { line.split(',').nth(1).unwrap().parse().unwrap() };
    let first = loss(
        fs::read_to_string(d.join("s2/loss.csv"))
            .unwrap()
            .lines()
            .nth(1)
            .unwrap(),
    );
    let last_s1 = loss(s1.lines().last().unwrap());
    assert!(first < last_s1 * 1.5, "{first} vs {last_s1}");
}

#[test]
fn overrides_resume_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(
        d,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--stage",
            "1",
            "--config",
            "small.toml",
            "--set",
            "stage1_epochs=4",
            "--out",
            "s3",
        ],
    );
    assert!(fs::read_to_string(d.join("s3/config.toml"))
        .unwrap()
        .contains("stage1_epochs = 4"));
    // Resuming a finished run is a no-op that keeps the log intact.
    let before = fs::read(d.join("s3/loss.csv")).unwrap();
    ok(
        d,
        &[
            "train",
            "--data",
            "d.jsonl",
            "--stage",
            "1",
            "--config",
            "small.toml",
            "--set",
            "stage1_epochs=4",
            "--out",
            "s3",
            "--resume",
        ],
    );
    assert_eq!(fs::read(d.join("s3/loss.csv")).unwrap(), before);

    for bad in [
        vec![
            "train", "--data", "d.jsonl", "--stage", "1", "--set", "bogus=1", "--out", "x",
        ],
        vec!["train", "--data", "d.jsonl", "--stage", "3", "--out", "x"],
        vec![
            "train",
            "--data",
            "d.jsonl",
            "--stage",
            "1",
            "--config",
            "nope.toml",
            "--out",
            "x",
        ],
        vec![
            "train",
            "--data",
            "d.jsonl",
            "--stage",
            "2",
            "--config",
            "small.toml",
            "--set",
            "hidden=8",
            "--out",
            "x",
            "--init",
            "s1/checkpoint.json",
        ],
    ] {
        let out = motalk(d, &bad);
        assert_eq!(code(&out), 1, "{bad:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn eval_report_follows_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    ok(
        d,
        &[
            "eval",
            "--data",
            "d.jsonl",
            "--checkpoint",
            "s2/checkpoint.json",
            "--report",
            "r.json",
        ],
    );
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("r.json")).unwrap()).unwrap();
    assert_eq!(r["schema"], "motalk.eval");
    assert_eq!(r["version"], 1);
    assert_eq!(r["stage"], 2);
    assert_eq!(r["config"]["hidden"], 16);
    assert_eq!(r["summary"]["samples"], 5);
    assert_eq!(r["outcomes"].as_array().unwrap().len(), 5);
    for key in ["mean_nll", "exact_match", "counting", "selection"] {
        assert!(!r["summary"][key].is_null(), "{key}");
    }
    let sel = &r["summary"]["selection"];
    assert_eq!(sel["tolerance"], 2);
    assert!(sel["recall"].as_f64().unwrap() >= 0.0);
}

#[test]
fn select_prints_sorted_indices_and_clamps_large_k() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);
    let args = [
        "select",
        "--data",
        "d.jsonl",
        "--checkpoint",
        "s2/checkpoint.json",
        "--id",
        "sample-00001",
    ];
    let a = ok(d, &args);
    assert_eq!(a, ok(d, &args));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let idx: Vec<u64> = v["selected"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap())
        .collect();
    assert_eq!(idx.len(), 4);
    assert!(idx.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(v["scores"].as_array().unwrap().len(), 20);
    assert_eq!(v["windows"].as_array().unwrap().len(), 4);

    let all: serde_json::Value = serde_json::from_str(&ok(d, &[&args[..], &["--k", "50"]].concat())).unwrap();
    assert_eq!(all["selected"].as_array().unwrap().len(), 20);
    assert_eq!(all["clamped"], true);

    assert_eq!(code(&motalk(d, &[&args[..6], &["--id", "nope"]].concat())), 1);
}

#[test]
fn flops_reports_the_quadratic_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let v: serde_json::Value = serde_json::from_str(&ok(
        dir.path(),
        &["flops", "--lt", "16", "--t", "256", "--k", "16", "--h", "32"],
    ))
    .unwrap();
    let ratio = v["measured_ratio"].as_f64().unwrap();
    assert!((ratio - (32.0f64 / 272.0).powi(2)).abs() < 1e-12);
    assert_eq!(v["fused_measured"], v["fused_analytic"]);
    let double: serde_json::Value = serde_json::from_str(&ok(
        dir.path(),
        &["flops", "--lt", "32", "--t", "512", "--k", "32", "--h", "32"],
    ))
    .unwrap();
    assert_eq!(
        double["baseline_analytic"].as_u64().unwrap(),
        4 * v["baseline_analytic"].as_u64().unwrap()
    );
}

#[test]
fn grad_check_passes_and_flags_injected_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let v: serde_json::Value = serde_json::from_str(&ok(d, &["grad-check", "--seed", "0"])).unwrap();
    assert_eq!(v["passed"], true);
    assert!(v["max_rel_err"].as_f64().unwrap() <= 1e-4);

    let out = motalk(d, &["grad-check", "--seed", "0", "--inject-error", "0.05"]);
    assert_eq!(code(&out), 2);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["passed"], false);
    let module = v["worst_module"].as_str().unwrap();
    assert!(["enhancer", "talker", "decoder"].contains(&module), "{module}");
    assert!(v["worst_param"].as_str().unwrap().starts_with(module));
}

fn judge_inputs(d: &Path, n: usize) {
    let mut answers = String::new();
    let mut gt = String::new();
    let fixtures = d.join("fixtures");
    fs::create_dir_all(&fixtures).unwrap();
    let transport = OfflineTransport::new(&fixtures);
    for i in 0..n {
        let req = JudgeRequest {
            id: format!("a{i}"),
            question: format!("is rep {i} clean"),
            answer: format!("mostly, tempo {i}"),
            ground_truth: "keep a steady tempo".into(),
        };
        answers += &serde_json::json!({"id": req.id, "question": req.question, "answer": req.answer}).to_string();
        answers.push('\n');
        gt += &serde_json::json!({"id": req.id, "ground_truth": req.ground_truth}).to_string();
        gt.push('\n');
        let mut reply = String::from("Here is my verdict:\n{\n");
        for c in CRITERIA {
            let conf = u8::from(i != 1 || c != "Coherence");
            reply += &format!("  '{c}': {{'pred': 'True', 'score': 4.{i}, 'confidence': {conf}}},\n");
        }
        reply += "}\n";
        fs::write(transport.fixture_path(&req.prompt().unwrap()), reply).unwrap();
    }
    fs::write(d.join("answers.jsonl"), answers).unwrap();
    fs::write(d.join("gt.jsonl"), gt).unwrap();
}

#[test]
fn offline_judge_is_deterministic_and_queues_low_confidence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    judge_inputs(d, 3);
    let base = [
        "judge",
        "--answers",
        "answers.jsonl",
        "--gt",
        "gt.jsonl",
        "--offline",
        "fixtures",
    ];
    ok(d, &[&base[..], &["--out", "v1.jsonl"]].concat());
    ok(d, &[&base[..], &["--out", "v2.jsonl", "--concurrency", "1"]].concat());
    let v1 = fs::read_to_string(d.join("v1.jsonl")).unwrap();
    assert_eq!(v1, fs::read_to_string(d.join("v2.jsonl")).unwrap());
    assert_eq!(v1.lines().count(), 3);
    let review = fs::read_to_string(d.join("v1.review.jsonl")).unwrap();
    assert_eq!(review.lines().count(), 1);
    assert!(review.contains("\"a1\""));
    assert_eq!(ok(d, &base), v1);
}

#[test]
fn judge_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    judge_inputs(d, 2);
    let out = motalk(d, &["judge", "--answers", "answers.jsonl", "--gt", "gt.jsonl"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("JUDGE_API_KEY"));

    fs::create_dir_all(d.join("empty")).unwrap();
    let out = motalk(
        d,
        &[
            "judge",
            "--answers",
            "answers.jsonl",
            "--gt",
            "gt.jsonl",
            "--offline",
            "empty",
        ],
    );
    assert_eq!(code(&out), 3);

    fs::write(d.join("gt.jsonl"), "{\"id\": \"a0\", \"ground_truth\": \"x\"}\n").unwrap();
    let out = motalk(
        d,
        &[
            "judge",
            "--answers",
            "answers.jsonl",
            "--gt",
            "gt.jsonl",
            "--offline",
            "fixtures",
        ],
    );
    assert_eq!(code(&out), 1);
}
