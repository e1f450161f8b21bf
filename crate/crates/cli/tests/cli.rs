//! End-to-end checks of the command-line surface: every subcommand runs the
//! full pipeline on a tiny dataset, outputs are byte-identical across reruns,
//! and invalid invocations fail before touching the output directory.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twindepth"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn failed");
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_err(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn failed");
    assert!(
        !out.status.success(),
        "command {:?} unexpectedly succeeded",
        args
    );
    out
}

fn read_dir_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn gen_data_writes_a_loadable_deterministic_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let ds_a = tmp.path().join("a");
    let ds_b = tmp.path().join("b");
    for ds in [&ds_a, &ds_b] {
        run_ok(&[
            "gen-data",
            "--count",
            "4",
            "--size",
            "32",
            "--seed",
            "11",
            "--out",
            ds.to_str().unwrap(),
        ]);
    }
    // byte-identical across runs
    assert_eq!(read_dir_files(&ds_a), read_dir_files(&ds_b));

    // 4 files per sample, and everything parses back
    let loaded = twindepth::data::load_dataset(&ds_a).unwrap();
    assert!(loaded.has_clue);
    assert_eq!(loaded.samples.len(), 4);
    for s in &loaded.samples {
        assert_eq!(s.left.shape(), &[3, 32, 32]);
        assert_eq!(s.clue.shape(), &[1, 32, 32]);
    }
}

#[test]
fn gen_data_count_zero_succeeds_with_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("empty");
    run_ok(&[
        "gen-data",
        "--count",
        "0",
        "--size",
        "32",
        "--out",
        ds.to_str().unwrap(),
    ]);
    let manifest = std::fs::read_to_string(ds.join("manifest.txt")).unwrap();
    assert!(manifest.is_empty());
}

#[test]
fn train_eval_infer_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    run_ok(&[
        "gen-data",
        "--count",
        "6",
        "--size",
        "32",
        "--seed",
        "3",
        "--out",
        ds.to_str().unwrap(),
    ]);

    let run_a = tmp.path().join("run_a");
    let run_b = tmp.path().join("run_b");
    for run in [&run_a, &run_b] {
        run_ok(&[
            "train",
            "--data",
            ds.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--levels",
            "2",
            "--base-channels",
            "2",
            "--epochs",
            "2",
            "--batch",
            "4",
            "--seed",
            "1",
        ]);
    }
    // training is idempotent: checkpoint and curve match byte for byte
    assert_eq!(read_dir_files(&run_a), read_dir_files(&run_b));
    assert!(run_a.join("checkpoint.bin").is_file());
    assert!(run_a.join("curve.csv").is_file());
    let curve = std::fs::read_to_string(run_a.join("curve.csv")).unwrap();
    assert!(curve.starts_with("step,train_loss,val_loss\n"));

    let ckpt = run_a.join("checkpoint.bin");
    let eval_out = tmp.path().join("eval");
    let out = run_ok(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        ds.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("abs_rel"), "missing table header: {stdout}");
    assert!(stdout.contains("sigma3"));
    let csv = std::fs::read_to_string(eval_out.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 8);

    let inf = tmp.path().join("inf");
    let out = run_ok(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--left",
        ds.join("left/0000.ppm").to_str().unwrap(),
        "--right",
        ds.join("right/0000.ppm").to_str().unwrap(),
        "--clue",
        ds.join("clue/0000.pfm").to_str().unwrap(),
        "--out",
        inf.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("inference time"), "{stdout}");
    let depth = twindepth::data::read_pfm(&inf.join("depth.pfm")).unwrap();
    assert_eq!(depth.shape(), &[1, 32, 32]);
    let pgm = twindepth::data::read_pgm(&inf.join("depth.pgm")).unwrap();
    assert_eq!(pgm.shape(), &[1, 32, 32]);
}

#[test]
fn perfect_predictor_fixture_scores_sigma_one() {
    // feeding ground truth back through the metric path yields the ideal row
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    run_ok(&[
        "gen-data",
        "--count",
        "2",
        "--size",
        "16",
        "--seed",
        "8",
        "--out",
        ds.to_str().unwrap(),
    ]);
    let loaded = twindepth::data::load_dataset(&ds).unwrap();
    for s in &loaded.samples {
        let row = twindepth::metrics::compute_sample(&s.gt_depth, &s.gt_depth).unwrap();
        assert_eq!(row.sigma1, 1.0);
        assert_eq!(row.abs_rel, 0.0);
        assert!((row.ssim - 1.0).abs() < 1e-9);
    }
}

#[test]
fn gradcheck_subcommand_passes() {
    let out = run_ok(&["gradcheck", "--seeds", "1"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("two_tower_net"));
    assert!(!stdout.contains("FAIL"), "{stdout}");
}

#[test]
fn invalid_flags_fail_before_writing() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("should_not_exist");

    // missing dataset
    run_err(&[
        "train",
        "--data",
        tmp.path().join("nope").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(!out_dir.exists(), "output dir was created on failure");

    // size not divisible by 2^levels
    run_err(&[
        "gen-data",
        "--count",
        "1",
        "--size",
        "30",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(!out_dir.exists());
}

#[test]
fn eval_rejects_clue_mode_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    run_ok(&[
        "gen-data",
        "--count",
        "3",
        "--size",
        "16",
        "--seed",
        "2",
        "--out",
        ds.to_str().unwrap(),
    ]);
    let run = tmp.path().join("run");
    run_ok(&[
        "train",
        "--data",
        ds.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--levels",
        "2",
        "--base-channels",
        "2",
        "--epochs",
        "1",
        "--batch",
        "4",
    ]);
    let out = run_err(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.bin").to_str().unwrap(),
        "--data",
        ds.to_str().unwrap(),
        "--clue-mode",
        "none",
    ]);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("clue"), "unhelpful error: {stderr}");
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = tmp.path().join("ds");
    let cfg = tmp.path().join("gen.cfg");
    std::fs::write(
        &cfg,
        format!(
            "count = 5\nsize = 16\nseed = 4\nout = {}\n# trailing comment\n",
            ds.display()
        ),
    )
    .unwrap();
    run_ok(&["gen-data", "--config", cfg.to_str().unwrap(), "--count", "2"]);
    let loaded = twindepth::data::load_dataset(&ds).unwrap();
    assert_eq!(loaded.samples.len(), 2, "flag should override config file");
    let echoed = std::fs::read_to_string(ds.join("run.cfg")).unwrap();
    assert!(echoed.contains("count = 2"));
    assert!(echoed.contains("size = 16"));
}
