//! End-to-end drives of the `vanillanet` binary: every subcommand is run
//! as a real child process in a scratch directory and judged only by its
//! exit status, its printed output, and the files it leaves behind.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_vanillanet");

/// Run the binary with `args` inside `dir` and wait for it.
fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn vanillanet")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited without a code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn json_file(path: &Path) -> Value {
    let text = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("read {}: {e}", path.display()));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("parse {}: {e}", path.display()))
}

fn json_stdout(out: &Output) -> Value {
    serde_json::from_str(&stdout(out))
        .unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {}", stdout(out)))
}

/// Arguments for a small, fast training run: a narrow five-layer net on a
/// handful of generated samples. Two epochs land the blend at identity, so
/// the resulting checkpoint is fusable.
fn tiny_train(seed: &str, out: &str) -> Vec<String> {
    [
        "train",
        "--variant",
        "5",
        "--width-scale",
        "0.03125",
        "--data",
        "synthetic",
        "--samples",
        "64",
        "--batch-size",
        "32",
        "--epochs",
        "2",
        "--seed",
        seed,
        "--out",
        out,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run_strings(dir: &Path, args: &[String]) -> Output {
    let refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    run_in(dir, &refs)
}

/// A completed session shared by the read-only tests: one tiny run trained,
/// fused with verification, and benched, laid out in a single directory the
/// way a real invocation would leave it.
struct Workbench {
    dir: TempDir,
}

impl Workbench {
    fn run_dir(&self) -> PathBuf {
        self.dir.path().join("run")
    }
}

fn workbench() -> &'static Workbench {
    static BENCH: OnceLock<Workbench> = OnceLock::new();
    BENCH.get_or_init(|| {
        let dir = TempDir::new().expect("tempdir");
        let train = run_strings(dir.path(), &tiny_train("7", "run"));
        assert_eq!(code(&train), 0, "fixture train failed: {}", stderr(&train));
        let fuse = run_in(
            dir.path(),
            &["fuse", "--checkpoint", "run/last.vnck", "--out", "run/fused.vnck"],
        );
        assert_eq!(code(&fuse), 0, "fixture fuse failed: {}", stderr(&fuse));
        let bench = run_in(
            dir.path(),
            &[
                "bench",
                "--checkpoint",
                "run/fused.vnck",
                "--batch",
                "1",
                "--iters",
                "3",
                "--warmup",
                "1",
                "--out",
                "run/bench.json",
            ],
        );
        assert_eq!(code(&bench), 0, "fixture bench failed: {}", stderr(&bench));
        Workbench { dir }
    })
}

#[test]
fn quickstart_invocation_works_verbatim() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "train",
            "--variant",
            "6",
            "--width-scale",
            "0.0625",
            "--data",
            "synthetic",
            "--epochs",
            "3",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    assert!(dir.path().join("run/last.vnck").is_file());

    let manifest = json_file(&dir.path().join("run/manifest.json"));
    assert_eq!(manifest["schema_version"], 1);
    assert_eq!(manifest["arch"]["variant"], 6);
    let id = manifest["run_id"].as_str().unwrap();
    assert_eq!(id.len(), 12);
    assert!(id.chars().all(|c| c.is_ascii_hexdigit()));
    let epochs = manifest["epochs"].as_array().unwrap();
    assert_eq!(epochs.len(), 3);
    let final_acc = epochs[2]["accuracy"].as_f64().unwrap();
    assert!(
        final_acc > 0.5,
        "three epochs on separable blobs should beat 50% (got {final_acc})"
    );
}

#[test]
fn training_is_reproducible_per_seed() {
    let dir = TempDir::new().unwrap();
    for (seed, out) in [("11", "a"), ("11", "b"), ("12", "c")] {
        let run = run_strings(dir.path(), &tiny_train(seed, out));
        assert_eq!(code(&run), 0, "stderr: {}", stderr(&run));
    }
    let loss = |name: &str| {
        let manifest = json_file(&dir.path().join(name).join("manifest.json"));
        manifest["epochs"][1]["loss"].as_f64().unwrap()
    };
    assert_eq!(
        loss("a"),
        loss("b"),
        "same seed must reproduce the loss curve exactly"
    );
    assert_ne!(loss("a"), loss("c"), "a different seed must actually differ");

    let bytes = |name: &str| std::fs::read(dir.path().join(name).join("last.vnck")).unwrap();
    assert_eq!(
        bytes("a"),
        bytes("b"),
        "same seed must write byte-identical checkpoints"
    );
}

#[test]
fn out_of_range_variant_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &["train", "--variant", "4", "--data", "synthetic", "--epochs", "1"],
    );
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("variant"), "stderr: {}", stderr(&out));
}

#[test]
fn unreadable_dataset_files_are_a_data_error() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "train",
            "--data",
            "idx",
            "--images",
            "no-such-images.idx",
            "--labels",
            "no-such-labels.idx",
            "--epochs",
            "1",
        ],
    );
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn fusion_collapses_the_trained_graph() {
    let bench = workbench();
    let dir = TempDir::new().unwrap();
    let ckpt = bench.run_dir().join("last.vnck");
    let fused = dir.path().join("f.vnck");
    let report_path = dir.path().join("r.json");
    let out = run_in(
        dir.path(),
        &[
            "fuse",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--out",
            fused.to_str().unwrap(),
            "--report",
            report_path.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let report = json_file(&report_path);
    assert_eq!(report["passed"], true);
    assert!(!report["passes"].as_array().unwrap().is_empty());
    let max_dev = report["max_deviation"].as_f64().unwrap();
    let tol = report["tolerance"].as_f64().unwrap();
    assert!(max_dev <= tol, "max deviation {max_dev} over tolerance {tol}");

    // The printed "parameters A -> B" line must show a strict shrink.
    let text = stdout(&out);
    let line = text
        .lines()
        .find(|l| l.starts_with("parameters"))
        .expect("parameter summary line");
    let nums: Vec<u64> = line
        .split_whitespace()
        .filter_map(|w| w.parse().ok())
        .collect();
    assert_eq!(nums.len(), 2, "line: {line}");
    assert!(nums[1] < nums[0], "fusion should remove parameters: {line}");

    // Fusing the already-deployed result is a no-op that changes nothing.
    let again = run_in(
        dir.path(),
        &[
            "fuse",
            "--checkpoint",
            fused.to_str().unwrap(),
            "--out",
            dir.path().join("f2.vnck").to_str().unwrap(),
        ],
    );
    assert_eq!(code(&again), 0, "stderr: {}", stderr(&again));
    let second = json_file(&dir.path().join("f2.report.json"));
    assert!(second["passes"].as_array().unwrap().is_empty());
    let text = stdout(&again);
    let line = text.lines().find(|l| l.starts_with("parameters")).unwrap();
    let nums: Vec<u64> = line
        .split_whitespace()
        .filter_map(|w| w.parse().ok())
        .collect();
    assert_eq!(nums[0], nums[1], "re-fusing must not change the count");
}

#[test]
fn partial_blend_refuses_to_fuse() {
    let dir = TempDir::new().unwrap();
    let mut args = tiny_train("3", "half");
    args.extend(["--deep-epochs".to_string(), "2".to_string()]);
    let train = run_strings(dir.path(), &args);
    assert_eq!(code(&train), 0, "stderr: {}", stderr(&train));

    // Two epochs against a two-epoch ramp leaves the blend at 1/2.
    let out = run_in(
        dir.path(),
        &["fuse", "--checkpoint", "half/last.vnck", "--out", "half/f.vnck"],
    );
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
    assert!(!dir.path().join("half/f.vnck").exists());
}

#[test]
fn verification_passes_on_a_completed_run() {
    let bench = workbench();
    let ckpt = bench.run_dir().join("last.vnck");
    let out = run_in(
        bench.dir.path(),
        &[
            "verify",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--samples",
            "8",
            "--json",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let doc = json_stdout(&out);
    assert_eq!(doc["passed"], true);
    assert_eq!(doc["num_samples"], 8);

    // A checkpoint that is already deployed has nothing left to verify.
    let fused = bench.run_dir().join("fused.vnck");
    let out = run_in(
        bench.dir.path(),
        &["verify", "--checkpoint", fused.to_str().unwrap()],
    );
    assert_eq!(code(&out), 1, "stderr: {}", stderr(&out));
}

#[test]
fn reference_counts_match_published_totals() {
    let dir = TempDir::new().unwrap();
    let count = |extra: &[&str]| -> Value {
        let mut args = vec!["count", "--variant", "6", "--json"];
        args.extend_from_slice(extra);
        let out = run_in(dir.path(), &args);
        assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
        json_stdout(&out)
    };

    let v6 = count(&[]);
    assert_eq!(v6["params"]["total"], 32_509_416u64);
    assert_eq!(v6["flops"]["conv"], 5_835_751_424u64);

    let v6_plain = count(&["--series-n", "0"]);
    let with_series = v6["flops_total"].as_u64().unwrap();
    let without = v6_plain["flops_total"].as_u64().unwrap();
    assert!(
        with_series > without,
        "series taps must add work: {with_series} vs {without}"
    );

    let out = run_in(dir.path(), &["count", "--variant", "5", "--json"]);
    let v5 = json_stdout(&out);
    let total = v5["params"]["total"].as_u64().unwrap() as f64;
    let rel = (total - 15.52e6).abs() / 15.52e6;
    assert!(rel < 0.02, "five-layer total {total} is {rel:.4} off the reference");
}

#[test]
fn count_prints_a_layer_table() {
    let dir = TempDir::new().unwrap();
    let out = run_in(dir.path(), &["count", "--variant", "6"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for needle in ["layer", "kind", "output", "params", "flops", "stem", "total parameters"] {
        assert!(text.contains(needle), "missing {needle:?} in:\n{text}");
    }
}

#[test]
fn bench_emits_complete_timing_json() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "bench",
            "--variant",
            "5",
            "--width-scale",
            "0.03125",
            "--iters",
            "3",
            "--warmup",
            "1",
            "--json",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let doc = json_stdout(&out);
    let latency = &doc["latency"];
    assert_eq!(latency["iters"], 3);
    assert!(latency["median_ms"].as_f64().unwrap() > 0.0);
    let p10 = latency["p10_ms"].as_f64().unwrap();
    let p90 = latency["p90_ms"].as_f64().unwrap();
    assert!(p10 <= p90, "p10 {p10} above p90 {p90}");

    let zero = run_in(
        dir.path(),
        &["bench", "--variant", "5", "--iters", "0"],
    );
    assert_eq!(code(&zero), 1, "stderr: {}", stderr(&zero));
}

#[test]
fn eval_scores_a_checkpoint() {
    let bench = workbench();
    let ckpt = bench.run_dir().join("last.vnck");
    let out = run_in(
        bench.dir.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            "synthetic",
            "--samples",
            "64",
            "--json",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let doc = json_stdout(&out);
    assert_eq!(doc["samples"], 64);
    let acc = doc["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc), "accuracy {acc} out of range");
    assert!(doc["loss"].as_f64().unwrap().is_finite());
}

#[test]
fn export_bundles_the_run_directory() {
    let bench = workbench();
    let out = run_in(bench.dir.path(), &["export-report", "--run", "run"]);
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    let doc = json_stdout(&out);

    let manifest = json_file(&bench.run_dir().join("manifest.json"));
    assert_eq!(doc["run_id"], manifest["run_id"]);
    assert!(!doc["fusion"].as_array().unwrap().is_empty());
    assert!(!doc["latency"].as_array().unwrap().is_empty());
}

#[test]
fn config_file_layers_under_flags() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("cfg.toml"),
        r#"
seed = 9

[arch]
variant = 5
width_scale = 0.03125

[train]
epochs = 1
batch_size = 32

[data]
source = "synthetic"
samples = 48
"#,
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &["train", "--config", "cfg.toml", "--epochs", "3", "--out", "run"],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let manifest = json_file(&dir.path().join("run/manifest.json"));
    assert_eq!(manifest["arch"]["variant"], 5, "file sets the variant");
    assert_eq!(manifest["seed"], 9, "file sets the seed");
    assert_eq!(manifest["data"]["samples"], 48, "file sets the sample count");
    assert_eq!(
        manifest["epochs"].as_array().unwrap().len(),
        3,
        "the flag overrides the file's epoch count"
    );

    let bad = run_in(
        dir.path(),
        &["train", "--config", "missing.toml", "--epochs", "1"],
    );
    assert_eq!(code(&bad), 1, "stderr: {}", stderr(&bad));
}

#[test]
fn help_and_bad_flags_follow_cli_conventions() {
    let dir = TempDir::new().unwrap();
    let help = run_in(dir.path(), &["--help"]);
    assert_eq!(code(&help), 0);
    assert!(stdout(&help).contains("train"));

    let sub_help = run_in(dir.path(), &["train", "--help"]);
    assert_eq!(code(&sub_help), 0);

    let unknown = run_in(dir.path(), &["--frobnicate"]);
    assert_eq!(code(&unknown), 1);
}

#[test]
fn small_grayscale_images_are_padded_into_the_frame() {
    let dir = TempDir::new().unwrap();
    let out = run_in(
        dir.path(),
        &[
            "train",
            "--variant",
            "5",
            "--width-scale",
            "0.03125",
            "--data",
            "digits",
            "--samples",
            "64",
            "--batch-size",
            "32",
            "--epochs",
            "1",
            "--out",
            "run",
        ],
    );
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));

    let manifest = json_file(&dir.path().join("run/manifest.json"));
    assert_eq!(manifest["data"]["height"], 28);
    assert_eq!(manifest["data"]["width"], 28);
    assert_eq!(manifest["data"]["channels"], 1);
    assert_eq!(manifest["data"]["padded_to"], 32);
    assert_eq!(manifest["arch"]["input_size"], 32);
    assert_eq!(manifest["arch"]["in_channels"], 1);
    assert_eq!(manifest["arch"]["reduced_pool"], true);
}
