//! The `tailseg` binary: exit codes, artifacts and reproducibility.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tailseg::checkpoint::Checkpoint;
use tailseg::experiment::{RunManifest, RunStatus};
use tempfile::TempDir;

const TINY: &str = r#"
name = "tiny"
seeds = [1]

[scene]
classes = 4
head_points = 120
imbalance_ratio = 6.0

[labeling]
kind = "percent"
fraction = 0.05

[train]
outer_iterations = 3
pretrain_epochs = 5
i_epochs = 2
ii_epochs = 2
hidden = 8
neighbors = 6
"#;

fn tailseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tailseg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("TAILSEG_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

fn manifest(dir: &Path) -> RunManifest {
    RunManifest::load(&dir.join("manifest.json")).unwrap()
}

#[test]
fn missing_config_is_a_usage_error_naming_the_path() {
    let tmp = setup();
    let out = tailseg(&["run", "nowhere.toml"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("nowhere.toml"), "{}", stderr(&out));
}

#[test]
fn invalid_values_report_the_field() {
    let tmp = setup();
    let out = tailseg(&["run", "tiny.toml", "--set", "train.selector.floor=0.2"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("floor"), "{}", stderr(&out));
    let out = tailseg(&["run", "tiny.toml", "--set", "train.optimiser=1"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("optimiser"), "{}", stderr(&out));
}

#[test]
fn repeated_seed_gives_identical_artifacts() {
    let tmp = setup();
    for out in ["a", "b"] {
        let o = tailseg(&["run", "tiny.toml", "--seed", "7", "--out", out], tmp.path());
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (tmp.path().join("a/seed-7"), tmp.path().join("b/seed-7"));
    for f in ["metrics.csv", "pseudo_labels.csv", "focusing.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma.files, mb.files);
    assert_eq!(ma.config_hash, mb.config_hash);
}

#[test]
fn manifest_lists_existing_files_with_their_hashes() {
    let tmp = setup();
    let o = tailseg(&["run", "tiny.toml", "--out", "out"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("out/seed-1");
    let m = manifest(&dir);
    assert_eq!(m.status, RunStatus::Completed);
    assert_eq!(m.iterations.len(), 3);
    assert_eq!(m.pretrain_checkpoint.as_deref(), Some("checkpoints/iter-000.ckpt"));
    for f in &m.files {
        let bytes = fs::read(dir.join(&f.path)).unwrap();
        assert_eq!(bytes.len() as u64, f.bytes);
        assert_eq!(tailseg::experiment::hex(&sha2_digest(&bytes)), f.sha256, "{}", f.path);
    }
    for it in &m.iterations {
        assert!(m.files.iter().any(|f| f.path == it.checkpoint));
        assert!(m.files.iter().any(|f| f.path == it.metrics));
    }
}

fn sha2_digest(bytes: &[u8]) -> Vec<u8> {
    use sha2::Digest;
    sha2::Sha256::digest(bytes).to_vec()
}

#[test]
fn reference_run_records_ten_iterations() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(
        tmp.path().join("ref.toml"),
        "[scene]\nclasses = 6\nhead_points = 2000\nimbalance_ratio = 50.0\n",
    )
    .unwrap();
    let o = tailseg(&["run", "ref.toml", "--out", "out"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("out/seed-0");
    assert_eq!(manifest(&dir).iterations.len(), 10);
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    let miou_rows = metrics.lines().filter(|l| l.contains(",miou,")).count();
    assert_eq!(miou_rows, 10);
}

#[test]
fn manifest_alone_reproduces_the_run() {
    let tmp = setup();
    assert!(tailseg(&["run", "tiny.toml", "--seed", "3", "--out", "first"], tmp.path()).status.success());
    let o = tailseg(&["run", "first/seed-3/manifest.json", "--out", "again"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let (a, b) = (manifest(&tmp.path().join("first/seed-3")), manifest(&tmp.path().join("again/seed-3")));
    assert_eq!(a.files, b.files);
}

#[test]
fn output_root_comes_from_the_environment() {
    let tmp = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_tailseg"))
        .args(["run", "tiny.toml"])
        .current_dir(tmp.path())
        .env("TAILSEG_OUTPUT_ROOT", "elsewhere")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(tmp.path().join("elsewhere/tiny/seed-1/manifest.json").is_file());
}

#[test]
fn mid_run_failure_leaves_partial_artifacts_and_a_failure_record() {
    let tmp = setup();
    // A directory where the second checkpoint should go makes that save fail.
    let dir = tmp.path().join("out/seed-1");
    fs::create_dir_all(dir.join("checkpoints/iter-002.ckpt")).unwrap();
    let o = tailseg(&["run", "tiny.toml", "--out", "out"], tmp.path());
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let m = manifest(&dir);
    assert_eq!(m.status, RunStatus::Failed);
    assert!(m.failure.is_some());
    assert_eq!(m.iterations.len(), 1);
    let metrics = fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.lines().any(|l| l.starts_with("tiny,1,2,")), "iteration 2 metrics are flushed before the save");
    assert!(m.files.iter().all(|f| dir.join(&f.path).is_file()));
}

#[test]
fn inspect_reports_iteration_and_rejects_tampering() {
    let tmp = setup();
    assert!(tailseg(&["run", "tiny.toml", "--out", "out"], tmp.path()).status.success());
    let ckpt = tmp.path().join("out/seed-1/checkpoints/iter-000.ckpt");
    let o = tailseg(&["inspect", ckpt.to_str().unwrap()], tmp.path());
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("iteration    0"), "{text}");
    assert!(text.contains("classifier.weight"), "{text}");

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    let bad = tmp.path().join("bad.ckpt");
    fs::write(&bad, &bytes).unwrap();
    let o = tailseg(&["inspect", "bad.ckpt"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("byte 0"), "{}", stderr(&o));

    let o = tailseg(&["inspect", "absent.ckpt"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn checkpoints_round_trip_bit_for_bit() {
    let tmp = setup();
    assert!(tailseg(&["run", "tiny.toml", "--out", "out"], tmp.path()).status.success());
    let path = tmp.path().join("out/seed-1/checkpoints/iter-003.ckpt");
    let bytes = fs::read(&path).unwrap();
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.iteration, 3);
    assert_eq!(ckpt.to_bytes(), bytes);
    let state = ckpt.to_state().unwrap();
    let again = Checkpoint::from_state(&state, ckpt.neighbors as usize, ckpt.config_hash);
    assert_eq!(again.to_bytes(), bytes);
}

#[test]
fn ablation_matrix_runs_every_row_and_seed() {
    let tmp = setup();
    fs::write(
        tmp.path().join("matrix.toml"),
        "[[row]]\ntwo_round = false\nmi_fl = false\n\n[[row]]\n",
    )
    .unwrap();
    let o = tailseg(
        &[
            "ablate", "tiny.toml", "--matrix", "matrix.toml", "--seed", "1", "--seed", "2", "--seed", "3", "--jobs",
            "2", "--out", "abl",
        ],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = tmp.path().join("abl");
    let mut runs: Vec<PathBuf> = Vec::new();
    for row in ["baseline", "ours"] {
        runs.extend((1..=3).map(|s| out.join(row).join(format!("seed-{s}"))));
    }
    assert_eq!(runs.len(), 6);
    assert!(runs.iter().all(|d| d.join("manifest.json").is_file()));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let mut rows: Vec<&str> = summary.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    rows.dedup();
    assert_eq!(rows, ["baseline", "ours"]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("±"), "{stdout}");
}

#[test]
fn contradictory_ablation_rows_are_rejected() {
    let tmp = setup();
    fs::write(
        tmp.path().join("bad.toml"),
        "[[row]]\nschedule = \"joint\"\nlabel_source = \"gt-plus-pseudo\"\n",
    )
    .unwrap();
    let o = tailseg(&["ablate", "tiny.toml", "--matrix", "bad.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("label_source"), "{}", stderr(&o));
    fs::write(tmp.path().join("dup.toml"), "[[row]]\n[[row]]\ntwo_round = true\n").unwrap();
    let o = tailseg(&["ablate", "tiny.toml", "--matrix", "dup.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("duplicate"), "{}", stderr(&o));
}

#[test]
fn exported_scene_trains_like_the_generated_one() {
    let tmp = setup();
    let o = tailseg(&["gen-data", "tiny.toml", "--seed", "1", "-o", "scene.txt"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let from_file = TINY.replace(
        "[scene]\nclasses = 4\nhead_points = 120\nimbalance_ratio = 6.0\n\n[labeling]\nkind = \"percent\"\nfraction = 0.05\n",
        "scene_file = \"scene.txt\"\n\n[labeling]\nkind = \"explicit\"\n",
    );
    assert_ne!(from_file, TINY);
    fs::write(tmp.path().join("file.toml"), from_file).unwrap();
    assert!(tailseg(&["run", "tiny.toml", "--out", "gen"], tmp.path()).status.success());
    let o = tailseg(&["run", "file.toml", "--out", "file"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |d: &str| fs::read_to_string(tmp.path().join(d).join("seed-1/metrics.csv")).unwrap();
    let strip = |s: String| s.lines().map(|l| l.split_once(',').unwrap().1.to_owned()).collect::<Vec<_>>();
    assert_eq!(strip(read("gen")), strip(read("file")));
}
