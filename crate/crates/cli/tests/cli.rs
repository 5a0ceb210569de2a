//! Black-box tests of the zeroseg binary: exit codes, determinism across
//! runs, stage-named failures, and a short pipeline.

use std::path::Path;
use std::process::{Command, Output};

fn zeroseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_zeroseg"))
        .args(args)
        .env("ZEROSEG_LOG", "quiet")
        .output()
        .expect("binary runs")
}

fn output_hashes(manifest: &Path) -> Vec<String> {
    std::fs::read_to_string(manifest)
        .expect("manifest readable")
        .lines()
        .filter(|l| l.starts_with("output "))
        .map(|l| l.rsplit("sha256:").next().expect("hash suffix").to_string())
        .collect()
}

#[test]
fn usage_errors_exit_two() {
    let out = zeroseg(&[]);
    assert_eq!(out.status.code(), Some(2));
    let out = zeroseg(&["dpgmm"]);
    assert_eq!(out.status.code(), Some(2), "missing required flags");
    let out = zeroseg(&["no-such-stage"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_outputs() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = tmp.path();
    let corpus = dir.join("corpus");
    let out = zeroseg(&[
        "gen-corpus",
        "--out",
        corpus.to_str().unwrap(),
        "--utterances",
        "12",
        "--seed",
        "3",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    for run in ["a", "b"] {
        let out = zeroseg(&[
            "dpgmm",
            "--features",
            corpus.join("features.feat").to_str().unwrap(),
            "--model",
            dir.join(format!("{run}.dpgm")).to_str().unwrap(),
            "--labels",
            dir.join(format!("{run}.tsv")).to_str().unwrap(),
            "--iterations",
            "30",
            "--seed",
            "7",
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    let model_a = std::fs::read(dir.join("a.dpgm")).unwrap();
    let model_b = std::fs::read(dir.join("b.dpgm")).unwrap();
    assert_eq!(
        model_a, model_b,
        "model files differ between identical runs"
    );
    let labels_a = std::fs::read(dir.join("a.tsv")).unwrap();
    let labels_b = std::fs::read(dir.join("b.tsv")).unwrap();
    assert_eq!(
        labels_a, labels_b,
        "label files differ between identical runs"
    );

    let hashes_a = output_hashes(&dir.join("a.dpgm.manifest"));
    let hashes_b = output_hashes(&dir.join("b.dpgm.manifest"));
    assert_eq!(hashes_a.len(), 2);
    assert_eq!(hashes_a, hashes_b, "manifest hashes differ");
}

#[test]
fn failures_name_the_stage() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = tmp.path();
    let corpus = dir.join("corpus");
    let out = zeroseg(&[
        "gen-corpus",
        "--out",
        corpus.to_str().unwrap(),
        "--utterances",
        "4",
    ]);
    assert!(out.status.success());

    let ghost = dir.join("ghost.tsv");
    std::fs::write(&ghost, "ghost\t0\t1\n").unwrap();
    let out = zeroseg(&[
        "eval-purity",
        "--labels",
        ghost.to_str().unwrap(),
        "--alignment",
        corpus.join("alignment.txt").to_str().unwrap(),
        "--report",
        dir.join("purity.report").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("stage eval-purity failed"),
        "stderr was: {stderr}"
    );
    assert!(stderr.contains("ghost"), "stderr was: {stderr}");
}

#[test]
fn short_pipeline_runs_and_reports() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let dir = tmp.path();
    let config = dir.join("short.cfg");
    std::fs::write(
        &config,
        "[pipeline]\n\
         stages = gen-corpus, dpgmm, filter-labels, collapse, fuse-bounds, segclust, eval-purity\n\
         \n\
         [corpus]\n\
         utterances = 16\n\
         seed = 5\n\
         \n\
         [dpgmm]\n\
         iterations = 30\n\
         \n\
         [segclust]\n\
         units = 5\n",
    )
    .unwrap();
    let out_dir = dir.join("run");
    let out = zeroseg(&[
        "pipeline",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let report = out_dir.join("purity.report");
    assert!(report.exists());
    let summary = zeroseg_core::eval::reports::read_summary(&report).unwrap();
    let purity: f64 = summary["overall_purity"].parse().unwrap();
    assert!((0.0..=1.0).contains(&purity));
    assert!(out_dir.join("manifest.txt").exists());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("overall_purity"), "stdout was: {stdout}");
}
