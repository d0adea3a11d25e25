//! End-to-end command tests against the built binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hiba"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: status {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Tiny model flags shared by the training tests.
fn tiny_flags() -> Vec<String> {
    [
        "d_model=8",
        "layers=2",
        "block_schedule=[3,7]",
        "context_length=84",
        "patch_size=4",
        "horizons=[4,8]",
        "query_heads=2",
        "kv_heads=1",
        "d_ff=16",
        "embed_hidden=16",
        "batch_size=2",
        "synth_count=8",
        "synth_len_min=96",
        "synth_len_max=128",
    ]
    .iter()
    .flat_map(|kv| ["--set".to_string(), kv.to_string()])
    .collect()
}

fn train_tiny(dir: &Path, steps: u64, seed: u64, extra: &[&str]) -> PathBuf {
    let ckpt = dir.join(format!("model-{seed}-{steps}.ckpt"));
    let mut args: Vec<String> = vec![
        "train".into(),
        "--seed".into(),
        seed.to_string(),
        "--out".into(),
        ckpt.display().to_string(),
        "--set".into(),
        format!("total_steps={steps}"),
    ];
    args.extend(tiny_flags());
    args.extend(extra.iter().map(|s| s.to_string()));
    let out = bin().args(&args).output().expect("train runs");
    assert_success(&out);
    ckpt
}

#[test]
fn synth_is_deterministic_and_rescoring_matches_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a.jsonl");
    let out_b = dir.path().join("b.jsonl");
    for out in [&out_a, &out_b] {
        let o = run(&["synth", "--count", "1000", "--seed", "11", "--out", &out.display().to_string()]);
        assert_success(&o);
    }
    assert_eq!(fs::read(&out_a).unwrap(), fs::read(&out_b).unwrap(), "same seed must give identical bytes");

    // Manifest tier assignments must match recomputation from the corpus.
    let manifest = hiba_core::dataset::read_manifest(&out_a.with_extension("manifest.json")).unwrap();
    let series = hiba_core::dataset::read_series_jsonl(&out_a).unwrap();
    assert_eq!(series.len(), 1000);
    for s in &series {
        let profile = hiba_core::synth::score_predictability(s).unwrap();
        let recorded = &manifest.profiles[&s.id];
        assert_eq!(profile.tier, recorded.tier, "tier mismatch for {}", s.id);
        assert_eq!(profile.sampling_weight, recorded.sampling_weight);
    }
}

#[test]
fn synth_count_zero_writes_empty_corpus_with_valid_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty.jsonl");
    let o = run(&["synth", "--count", "0", "--seed", "1", "--out", &out.display().to_string()]);
    assert_success(&o);
    assert_eq!(fs::read_to_string(&out).unwrap(), "");
    let manifest = hiba_core::dataset::read_manifest(&out.with_extension("manifest.json")).unwrap();
    assert!(manifest.profiles.is_empty());
    assert_eq!(manifest.files.len(), 1);
}

#[test]
fn train_zero_steps_checkpoints_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), 0, 3, &[]);
    let meta = hiba_core::train::peek_checkpoint(&ckpt).unwrap();
    assert_eq!(meta.step, 0);
    // Metrics log exists and is empty.
    let metrics = fs::read_to_string(ckpt.with_extension("metrics.jsonl")).unwrap();
    assert!(metrics.is_empty());
}

#[test]
fn ablated_training_logs_architecture_and_param_count() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ablate.ckpt");
    let mut args: Vec<String> = vec![
        "train".into(),
        "--seed".into(),
        "5".into(),
        "--ablate".into(),
        "standard_attention".into(),
        "--out".into(),
        ckpt.display().to_string(),
        "--set".into(),
        "total_steps=2".into(),
    ];
    args.extend(tiny_flags());
    let out = bin().args(&args).output().unwrap();
    assert_success(&out);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("dense causal attention"), "stderr must describe the rewired attention");
    assert!(stderr.contains("parameter count:"), "stderr must report the parameter count");
    assert!(stderr.contains("\"standard_attention\":true"), "resolved config must show the toggle");
}

#[test]
fn forecast_routes_heads_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    assert_success(&bin()
        .args(["synth", "--count", "3", "--seed", "2", "--out"])
        .arg(&corpus)
        .args(["--set", "synth_len_min=96", "--set", "synth_len_max=128"])
        .output()
        .unwrap());
    let ckpt = train_tiny(dir.path(), 2, 7, &[]);

    let fc = |horizon: &str, out: &Path| -> Output {
        bin()
            .args(["forecast", "--checkpoint"])
            .arg(&ckpt)
            .args(["--input"])
            .arg(&corpus)
            .args(["--horizon", horizon, "--out"])
            .arg(out)
            .output()
            .unwrap()
    };

    let out3 = dir.path().join("f3.json");
    assert_success(&fc("3", &out3));
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out3).unwrap()).unwrap();
    let first = &parsed.as_array().unwrap()[0];
    assert_eq!(first["horizon"], 3);
    assert_eq!(first["values"].as_array().unwrap().len(), 3, "truncated to the requested horizon");

    let out6 = dir.path().join("f6.json");
    assert_success(&fc("6", &out6));
    let parsed: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out6).unwrap()).unwrap();
    for record in parsed.as_array().unwrap() {
        for row in record["values"].as_array().unwrap() {
            let row: Vec<f64> = row.as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            assert!(row.windows(2).all(|w| w[0] <= w[1]), "quantiles must be monotone");
        }
    }

    // Beyond the largest head: contract violation, exit code 1.
    let out9 = dir.path().join("f9.json");
    let o = fc("9", &out9);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out9.exists());

    // Determinism: identical bytes on rerun.
    let rerun = dir.path().join("f3-again.json");
    assert_success(&fc("3", &rerun));
    assert_eq!(fs::read(&out3).unwrap(), fs::read(&rerun).unwrap());
}

#[test]
fn eval_writes_reports_and_rejects_empty_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    assert_success(&bin()
        .args(["synth", "--count", "4", "--seed", "9", "--out"])
        .arg(&corpus)
        .args(["--set", "synth_len_min=120", "--set", "synth_len_max=160"])
        .output()
        .unwrap());
    let ckpt = train_tiny(dir.path(), 2, 9, &[]);

    let report = dir.path().join("report");
    let o = bin()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .args(["--data"])
        .arg(&corpus)
        .args(["--out"])
        .arg(&report)
        .args(["--set", "eval_csv=true"])
        .env("HIBA_NUM_THREADS", "2")
        .output()
        .unwrap();
    assert_success(&o);
    let records = fs::read_to_string(report.with_extension("records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 4);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(report.with_extension("summary.json")).unwrap()).unwrap();
    assert!(summary["geo_mean_scaled_mase"].as_f64().unwrap() > 0.0);
    assert!(report.with_extension("records.csv").exists());

    // Records are sorted by id.
    let ids: Vec<String> = records
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .map(|v| v["dataset_id"].as_str().unwrap().to_string())
        .collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);

    // Rerun with the same inputs produces an identical report.
    let rerun = dir.path().join("report2");
    let o = bin()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .args(["--data"])
        .arg(&corpus)
        .args(["--out"])
        .arg(&rerun)
        .env("HIBA_NUM_THREADS", "1")
        .output()
        .unwrap();
    assert_success(&o);
    assert_eq!(
        fs::read(report.with_extension("records.jsonl")).unwrap(),
        fs::read(rerun.with_extension("records.jsonl")).unwrap()
    );

    // Empty dataset: exit 1, no report written.
    let empty = dir.path().join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let missing_report = dir.path().join("nope");
    let o = bin()
        .args(["eval", "--checkpoint"])
        .arg(&ckpt)
        .args(["--data"])
        .arg(&empty)
        .args(["--out"])
        .arg(&missing_report)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(!missing_report.with_extension("records.jsonl").exists());
}

#[test]
fn bench_reports_exact_pair_counts() {
    let o = run(&["bench", "--n", "336", "--d", "8", "--no-timing"]);
    assert_success(&o);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let blocks = report["per_block"].as_array().unwrap();
    let expect = [(3u64, 38_640u64), (7, 18_480), (21, 12_432)];
    for (block, (b, pairs)) in blocks.iter().zip(expect) {
        assert_eq!(block["block_size"].as_u64().unwrap(), b);
        assert_eq!(block["measured_pairs"].as_u64().unwrap(), pairs);
        assert_eq!(block["formula_pairs"].as_u64().unwrap(), pairs);
    }
    assert_eq!(report["dense_measured_pairs"].as_u64().unwrap(), 56_616);
}

#[test]
fn bench_timing_reports_wall_clock() {
    let o = run(&["bench", "--n", "84", "--d", "16", "--layers", "3"]);
    assert_success(&o);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let timing = &report["timing"];
    assert!(timing["hiba_forward_ms"].as_f64().unwrap() > 0.0);
    assert!(timing["dense_forward_ms"].as_f64().unwrap() > 0.0);
}

#[test]
fn inspect_prints_config_and_tensor_table() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), 1, 13, &[]);
    let o = bin().args(["inspect", "--checkpoint"]).arg(&ckpt).output().unwrap();
    assert_success(&o);
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["dtype"], "f32");
    assert_eq!(report["step"], 1);
    assert!(report["param_count"].as_u64().unwrap() > 0);
    assert!(report["tensors"].as_array().unwrap().len() > 10);
}

#[test]
fn config_file_drives_training() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    fs::write(
        &config,
        r#"
            d_model = 8
            layers = 2
            block_schedule = [3, 7]
            context_length = 84
            patch_size = 4
            horizons = [4, 8]
            query_heads = 2
            kv_heads = 1
            d_ff = 16
            embed_hidden = 16
            batch_size = 2
            total_steps = 2
            synth_count = 6
            synth_len_min = 96
            synth_len_max = 120
        "#,
    )
    .unwrap();
    let ckpt = dir.path().join("from-config.ckpt");
    let o = bin()
        .args(["train", "--seed", "21", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&ckpt)
        .output()
        .unwrap();
    assert_success(&o);
    let meta = hiba_core::train::peek_checkpoint(&ckpt).unwrap();
    assert_eq!(meta.step, 2);
    assert_eq!(meta.config.model.d_model, 8);
    assert_eq!(meta.config.model.horizons, vec![4, 8]);
}

#[test]
fn exit_codes_distinguish_contract_and_format_errors() {
    // Missing file: I/O error → 2.
    let o = run(&["inspect", "--checkpoint", "/nonexistent/path.ckpt"]);
    assert_eq!(o.status.code(), Some(2));

    // Unknown config key: format error → 2.
    let o = run(&["synth", "--count", "1", "--set", "not_a_key=1", "--out", "/tmp/x.jsonl"]);
    assert_eq!(o.status.code(), Some(2));

    // Contract violation (invalid model shape): exit 1.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad.ckpt");
    let o = bin()
        .args(["train", "--set", "total_steps=1", "--set", "d_model=7", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));

    // Corrupt checkpoint: format error → 2.
    let bad = dir.path().join("corrupt.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let o = bin().args(["inspect", "--checkpoint"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}
